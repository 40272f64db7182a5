//! End-to-end pipelines: data → GP state models → parameter posterior →
//! ensemble prediction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    baseline_linreg, finite_difference_derivatives, generate, savitzky_golay, Dataset,
    GenerateConfig, Sampling, SG_ORDER, SG_WINDOW,
};
use crate::dynamics::{
    blackhole_initial_state, blackhole_rates, check_orbit_elements, quadratic_library_names,
    SystemSpec,
};
use crate::error::{Error, Result};
use crate::gp::{fit_components, GpConfig, GpStateModel};
use crate::linalg::Weighting;
use crate::linear::{
    joint_posterior, metrics_eps, posterior, sparse_posterior, stridge, Dictionary,
    GaussianPosterior, LinearBlock, SparsityPattern, LAMBDA_ACTIVE, LAMBDA_SPARSE,
    STRIDGE_THRESHOLD,
};
use crate::mcmc::{
    gaussian_log_posterior, laplace_precision, maximize_numeric, run_chain, ChainConfig, Proposal,
    SampleChain,
};
use crate::network::{NetShape, NetworkSamplerConfig, NetworkTarget};
use crate::ode::Method;

/// Fit one GP per state component of a dataset.
pub fn fit_state_models(data: &Dataset, config: &GpConfig) -> Result<Vec<GpStateModel>> {
    let comps: Vec<Vec<f64>> = (0..data.state_dim()).map(|i| data.component(i)).collect();
    fit_components(data.times(), &comps, config)
}

/// Rows `û(t_k)` on the shared derivative grid of the models.
pub fn smoothed_states(models: &[GpStateModel]) -> Result<Vec<Vec<f64>>> {
    let k = models.first().map_or(0, |m| m.smooth_states().len());
    if models.iter().any(|m| m.smooth_states().len() != k) {
        return Err(Error::InvalidArgument(
            "state models disagree on the derivative grid".into(),
        ));
    }
    Ok((0..k)
        .map(|r| models.iter().map(|m| m.smooth_states()[r]).collect())
        .collect())
}

/// Split a flat parameter vector into per-equation vectors.
pub fn split_theta(spec: &SystemSpec, theta: &[f64]) -> Vec<Vec<f64>> {
    spec.equation_params
        .iter()
        .map(|idx| idx.iter().map(|&i| theta[i]).collect())
        .collect()
}

/// Per-equation Gaussian posteriors of an affine model.
#[derive(Clone, Debug)]
pub struct LinearFit {
    pub models: Vec<GpStateModel>,
    pub posteriors: Vec<GaussianPosterior>,
    /// Surviving terms per equation when sparsity was identified.
    pub active_sets: Option<Vec<Vec<usize>>>,
}

impl LinearFit {
    /// `(ε₁, ε₂)` in percent against a flat truth vector.
    pub fn eps(&self, spec: &SystemSpec, truth: &[f64]) -> Result<(f64, f64)> {
        metrics_eps(&self.posteriors, &split_theta(spec, truth))
    }
}

/// Known dictionaries, uninformative-to-weak prior `λ` on every term.
pub fn case_a(
    data: &Dataset,
    dictionaries: &[Dictionary],
    lambda: f64,
    gp: &GpConfig,
) -> Result<LinearFit> {
    let models = fit_state_models(data, gp)?;
    case_a_with_models(models, dictionaries, lambda)
}

/// As [`case_a`] with already fitted state models.
pub fn case_a_with_models(
    models: Vec<GpStateModel>,
    dictionaries: &[Dictionary],
    lambda: f64,
) -> Result<LinearFit> {
    check_equations(&models, dictionaries)?;
    let states = smoothed_states(&models)?;
    let posteriors = dictionaries
        .par_iter()
        .zip(&models)
        .map(|(dict, m)| {
            let g = dict.design_matrix(&states)?;
            posterior(
                g.as_ref(),
                &m.precision().weight,
                m.estimate_derivatives(),
                &vec![lambda; dict.len()],
                dict.names(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LinearFit {
        models,
        posteriors,
        active_sets: None,
    })
}

/// Settings for sparse identification.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparseConfig {
    pub threshold: f64,
    pub max_iter: usize,
    pub lambda_active: f64,
    pub lambda_sparse: f64,
}

impl Default for SparseConfig {
    fn default() -> Self {
        Self {
            threshold: STRIDGE_THRESHOLD,
            max_iter: 20,
            lambda_active: LAMBDA_ACTIVE,
            lambda_sparse: LAMBDA_SPARSE,
        }
    }
}

/// Candidate libraries: STRidge picks the active terms, then the sparsity
/// prior gives the posterior over every term.
pub fn case_b(
    data: &Dataset,
    dictionaries: &[Dictionary],
    sparse: &SparseConfig,
    gp: &GpConfig,
) -> Result<LinearFit> {
    let models = fit_state_models(data, gp)?;
    case_b_with_models(models, dictionaries, sparse)
}

pub fn case_b_with_models(
    models: Vec<GpStateModel>,
    dictionaries: &[Dictionary],
    sparse: &SparseConfig,
) -> Result<LinearFit> {
    check_equations(&models, dictionaries)?;
    let states = smoothed_states(&models)?;
    let fits = dictionaries
        .par_iter()
        .zip(&models)
        .map(|(dict, m)| {
            let g = dict.design_matrix(&states)?;
            let active = stridge(
                g.as_ref(),
                m.estimate_derivatives(),
                sparse.threshold,
                sparse.max_iter,
            )?;
            let pattern = SparsityPattern::new(
                dict.len(),
                active.clone(),
                sparse.lambda_active,
                sparse.lambda_sparse,
            )?;
            let post = sparse_posterior(
                g.as_ref(),
                &m.precision().weight,
                m.estimate_derivatives(),
                &pattern,
                dict.names(),
            )?;
            Ok((post, active))
        })
        .collect::<Result<Vec<_>>>()?;
    let (posteriors, active): (Vec<_>, Vec<_>) = fits.into_iter().unzip();
    Ok(LinearFit {
        models,
        posteriors,
        active_sets: Some(active),
    })
}

/// One posterior over a parameter vector shared across equations and
/// trajectories.
#[derive(Clone, Debug)]
pub struct JointFit {
    /// State models per trajectory.
    pub models: Vec<Vec<GpStateModel>>,
    pub posterior: GaussianPosterior,
}

impl JointFit {
    pub fn eps(&self, truth: &[f64]) -> Result<(f64, f64)> {
        metrics_eps(std::slice::from_ref(&self.posterior), &[truth.to_vec()])
    }
}

/// Joint posterior of an affine system from one or more trajectories.
///
/// Equation `i` of every trajectory contributes a block whose columns map
/// to `spec.equation_params[i]`; trajectory `j` fits its GPs from seed
/// `gp.seed + 1000 j`.
pub fn shared_param(
    datasets: &[Dataset],
    spec: &SystemSpec,
    dictionaries: &[Dictionary],
    lambda: f64,
    gp: &GpConfig,
) -> Result<JointFit> {
    if datasets.is_empty() {
        return Err(Error::InvalidArgument("no trajectories given".into()));
    }
    if dictionaries.len() != spec.equation_params.len() {
        return Err(Error::ShapeMismatch {
            expected: spec.equation_params.len(),
            got: dictionaries.len(),
        });
    }
    for (dict, map) in dictionaries.iter().zip(&spec.equation_params) {
        if dict.len() != map.len() {
            return Err(Error::IndexMapMismatch(format!(
                "dictionary of {} terms for {} parameters",
                dict.len(),
                map.len()
            )));
        }
    }
    let models = datasets
        .iter()
        .enumerate()
        .map(|(j, data)| {
            let cfg = GpConfig {
                seed: gp.seed.wrapping_add(1000 * j as u64),
                ..gp.clone()
            };
            let m = fit_state_models(data, &cfg)?;
            check_equations(&m, dictionaries)?;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut designs = Vec::new();
    for m in &models {
        let states = smoothed_states(m)?;
        for dict in dictionaries {
            designs.push(dict.design_matrix(&states)?);
        }
    }
    let mut blocks = Vec::with_capacity(designs.len());
    for (j, m) in models.iter().enumerate() {
        for (i, model) in m.iter().enumerate() {
            blocks.push(LinearBlock {
                design: designs[j * dictionaries.len() + i].as_ref(),
                weight: &model.precision().weight,
                d_hat: model.estimate_derivatives(),
                index_map: &spec.equation_params[i],
            });
        }
    }
    let mut names = vec![String::new(); spec.theta_dim];
    for (i, (dict, map)) in dictionaries.iter().zip(&spec.equation_params).enumerate() {
        for (name, &k) in dict.names().into_iter().zip(map) {
            if names[k].is_empty() {
                names[k] = format!("eq{}:{name}", i + 1);
            }
        }
    }
    let posterior = joint_posterior(&blocks, &vec![lambda; spec.theta_dim], names)?;
    Ok(JointFit { models, posterior })
}

fn check_equations(models: &[GpStateModel], dictionaries: &[Dictionary]) -> Result<()> {
    if models.len() != dictionaries.len() {
        return Err(Error::ShapeMismatch {
            expected: models.len(),
            got: dictionaries.len(),
        });
    }
    Ok(())
}

/// Finite differences plus ordinary least squares, optionally after
/// Savitzky–Golay smoothing of each component (in sample-index spacing).
pub fn fd_linreg(
    data: &Dataset,
    dictionaries: &[Dictionary],
    smooth: bool,
) -> Result<Vec<Vec<f64>>> {
    let n = data.state_dim();
    if dictionaries.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: dictionaries.len(),
        });
    }
    let mut comps: Vec<Vec<f64>> = (0..n).map(|i| data.component(i)).collect();
    if smooth {
        let window = sg_window(data.len());
        if let Some(w) = window {
            comps = comps
                .iter()
                .map(|c| savitzky_golay(c, w, SG_ORDER))
                .collect::<Result<_>>()?;
        }
    }
    let states: Vec<Vec<f64>> = (0..data.len())
        .map(|k| comps.iter().map(|c| c[k]).collect())
        .collect();
    dictionaries
        .iter()
        .zip(&comps)
        .map(|(dict, c)| {
            let d = finite_difference_derivatives(data.times(), c)?;
            baseline_linreg(dict.design_matrix(&states)?.as_ref(), &d)
        })
        .collect()
}

/// Default frame, shrunk to the largest odd length that fits short series.
fn sg_window(len: usize) -> Option<usize> {
    let w = SG_WINDOW.min(if len % 2 == 1 {
        len
    } else {
        len.saturating_sub(1)
    });
    (w > SG_ORDER).then_some(w)
}

/// `ε₁` of a point estimate, in percent.
pub fn point_eps1(estimate: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    let (mut err, mut norm) = (0.0, 0.0);
    for (e, t) in estimate.iter().zip(truth) {
        err += e.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        norm += t.iter().map(|x| x * x).sum::<f64>();
    }
    if norm == 0.0 {
        return Err(Error::ZeroTruthNorm);
    }
    Ok(100.0 * (err / norm).sqrt())
}

/// A network right-hand side sampled by MH.
#[derive(Clone, Debug)]
pub struct NetworkFit {
    pub model: GpStateModel,
    pub shape: NetShape,
    pub chain: SampleChain,
}

/// Fit the GP on a scalar series and sample the network posterior.
pub fn network_fit(
    data: &Dataset,
    shape: NetShape,
    lambda: f64,
    gp: &GpConfig,
    sampler: &NetworkSamplerConfig,
) -> Result<NetworkFit> {
    if data.state_dim() != 1 || shape.input_dim != 1 {
        return Err(Error::InvalidArgument(
            "the network pipeline handles scalar systems".into(),
        ));
    }
    let model = GpStateModel::fit(data.times(), &data.component(0), gp)?;
    let states: Vec<Vec<f64>> = model.smooth_states().iter().map(|&u| vec![u]).collect();
    let target = NetworkTarget::new(
        shape,
        states,
        model.precision().weight.clone(),
        model.estimate_derivatives().to_vec(),
        lambda,
    )?;
    let chain = target.sample(sampler)?;
    Ok(NetworkFit {
        model,
        shape,
        chain,
    })
}

/// Shared orbital elements `(e, p)` sampled by MH.
#[derive(Clone, Debug)]
pub struct BlackHoleFit {
    pub models: Vec<GpStateModel>,
    pub map: Vec<f64>,
    pub chain: SampleChain,
}

/// Joint log posterior of `(e, p)` over both orbit equations; flat prior on
/// the physical domain.
pub fn blackhole_log_posterior<'a>(
    models: &'a [GpStateModel],
    states: &[Vec<f64>],
) -> impl Fn(&[f64]) -> f64 + 'a {
    let states = states.to_vec();
    move |theta: &[f64]| {
        if check_orbit_elements(theta[0], theta[1]).is_err() {
            return f64::NEG_INFINITY;
        }
        let mut r = [vec![0.0; states.len()], vec![0.0; states.len()]];
        for (k, x) in states.iter().enumerate() {
            let (a, b) = blackhole_rates(x[1], theta[0], theta[1]);
            r[0][k] = a - models[0].estimate_derivatives()[k];
            r[1][k] = b - models[1].estimate_derivatives()[k];
        }
        if r.iter().flatten().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let w: [&dyn Weighting; 2] = [&models[0].precision().weight, &models[1].precision().weight];
        gaussian_log_posterior(&r, &w, theta, 0.0)
    }
}

/// Coarse grid search over the physical domain, BFGS polish, then MH with a
/// Laplace proposal at the mode.
pub fn blackhole_fit(data: &Dataset, gp: &GpConfig, chain: &ChainConfig) -> Result<BlackHoleFit> {
    if data.state_dim() != 2 {
        return Err(Error::ShapeMismatch {
            expected: 2,
            got: data.state_dim(),
        });
    }
    let models = fit_state_models(data, gp)?;
    let (map, chain) = sample_orbit_elements(&models, chain)?;
    Ok(BlackHoleFit { models, map, chain })
}

fn sample_orbit_elements(
    models: &[GpStateModel],
    chain: &ChainConfig,
) -> Result<(Vec<f64>, SampleChain)> {
    let states = smoothed_states(models)?;
    let lp = blackhole_log_posterior(models, &states);
    let mut start = None;
    for e in [0.05, 0.2, 0.35, 0.5, 0.65, 0.8, 0.95] {
        for p in [
            10.0, 20.0, 40.0, 70.0, 100.0, 150.0, 250.0, 400.0, 700.0, 1000.0,
        ] {
            let v = lp(&[e, p]);
            if v.is_finite() && start.as_ref().is_none_or(|(_, b)| v > *b) {
                start = Some((vec![e, p], v));
            }
        }
    }
    let (x0, _) = start.ok_or(Error::NonFiniteInit)?;
    let steps = [0.01, 0.01 * x0[1]];
    let (map, _) = maximize_numeric(&lp, &x0, &steps, 500).ok_or(Error::NonFiniteInit)?;
    let hess_steps = [1e-5, 1e-5 * map[1]];
    let precision = laplace_precision(&lp, &map, &hess_steps);
    let proposal = Proposal::from_precision(&precision)?;
    let chain = run_chain(&map, &lp, &proposal, chain)?;
    Ok((map, chain))
}

/// Known Lotka–Volterra libraries `{x₁, x₁x₂}` and `{x₁x₂, x₂}`.
pub fn lotka_volterra_dictionaries() -> Vec<Dictionary> {
    vec![
        Dictionary::monomials(2, &["x1", "x1*x2"]).expect("valid monomials"),
        Dictionary::monomials(2, &["x1*x2", "x2"]).expect("valid monomials"),
    ]
}

/// The six-term quadratic library, once per equation.
pub fn quadratic_dictionaries() -> Vec<Dictionary> {
    let names = quadratic_library_names();
    (0..2)
        .map(|_| Dictionary::monomials(2, &names).expect("valid monomials"))
        .collect()
}

/// Lotka–Volterra benchmark data: `θ* = (1.5, 1, 1, 3)`, `x₀ = (1, 1)`.
pub fn lotka_volterra_data(
    density: f64,
    noise_level: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let spec = SystemSpec::lotka_volterra(1.5, 1.0, 1.0, 3.0);
    let cfg = GenerateConfig::lotka_volterra(density, noise_level, seed);
    generate(
        &spec,
        spec.truth.as_ref().expect("truth"),
        &[1.0, 1.0],
        &cfg,
    )
}

/// Initial value of the logistic benchmark.
pub const LOGISTIC_X0: f64 = 0.01;
/// Horizon of the logistic benchmark.
pub const LOGISTIC_T_END: f64 = 9.0;

/// Sampling of the logistic benchmark: `points` samples from
/// `[0, train_fraction · 9]` of an accurate solution on a 0.001 grid.
pub fn logistic_config(
    points: usize,
    train_fraction: f64,
    noise_level: f64,
    seed: u64,
) -> GenerateConfig {
    GenerateConfig {
        t_end: LOGISTIC_T_END,
        dt: 0.001,
        method: Method::AdaptiveRk {
            rtol: 1e-10,
            atol: 1e-12,
        },
        train_fraction,
        pool_fraction: 1.0,
        pool_seed: 0,
        sampling: Sampling::Count(points),
        noise_level,
        seed,
    }
}

/// `points` noise-free logistic samples from `[0, train_fraction · 9]`.
pub fn logistic_data(points: usize, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let spec = SystemSpec::logistic();
    generate(
        &spec,
        spec.truth.as_ref().expect("truth"),
        &[LOGISTIC_X0],
        &logistic_config(points, train_fraction, 0.0, seed),
    )
}

/// Training horizon of the orbit benchmark.
pub const BLACKHOLE_T_TRAIN: f64 = 1e4;
/// Prediction horizon of the orbit benchmark.
pub const BLACKHOLE_T_END: f64 = 6e4;

/// Sampling of the orbit benchmark: `points` samples over `[0, 10⁴]` of a
/// unit-spaced grid; the test set runs to `6·10⁴`.
pub fn blackhole_config(points: usize, noise_level: f64, seed: u64) -> GenerateConfig {
    GenerateConfig {
        t_end: BLACKHOLE_T_END,
        dt: 1.0,
        method: Method::AdaptiveRk {
            rtol: 1e-10,
            atol: 1e-10,
        },
        train_fraction: BLACKHOLE_T_TRAIN / BLACKHOLE_T_END,
        pool_fraction: 1.0,
        pool_seed: 0,
        sampling: Sampling::Count(points),
        noise_level,
        seed,
    }
}

/// Orbit with `(e, p) = (0.5, 100)` from `(φ, χ) = (0, π)`.
pub fn blackhole_data(points: usize, noise_level: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let spec = SystemSpec::black_hole(0.5, 100.0);
    generate(
        &spec,
        &[0.5, 100.0],
        &blackhole_initial_state(),
        &blackhole_config(points, noise_level, seed),
    )
}
