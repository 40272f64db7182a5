//! Per-component Gaussian-process emulation of a trajectory.
//!
//! For one state component observed as `u` at times `T`, a [`GpStateModel`]
//! caches everything the parameter inference needs:
//!
//! ```text
//! d̂   = Kdu Kuu⁻¹ u                      derivative estimate
//! û   = κ(T,T) Kuu⁻¹ u                   smoothed states
//! Rdd = (Kdd − Kdu Kuu⁻¹ Kud)⁻¹          derivative precision
//! Rdu = −Rdd Kdu Kuu⁻¹
//! ```
//!
//! Hyperparameters `(σ², ℓ, χᵘ)` maximize the marginal likelihood
//! `log p(u) = −½ uᵀKuu⁻¹u − ½ log|Kuu| − (K/2) log 2π`.
//!
//! Hyperparameter box used by the optimizer, with `v = var(u)` (or the mean
//! square of `u` when the variance vanishes, or 1 for all-zero data):
//!
//! | parameter | restart draws      | hard bounds                 |
//! |-----------|--------------------|-----------------------------|
//! | `σ²`      | `[0.1, 10]·v`      | `[1e-3·v, 1e3·max(v, ū²)]`  |
//! | `ℓ`       | `[0.05, 2]·span`   | `[1e-3·span/K, 10·span]`    |
//! | `χᵘ`      | `[1e-6, 1e-1]·v`   | `[1e-10·v, 10·v]`           |

use std::f64::consts::PI;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{check_increasing, CovarianceKernel, SeKernel};
use crate::linalg::{jittered_cholesky, mat_vec, symmetrize, Factor, InverseWeight};
use crate::optimize::{minimize_split, BfgsOptions, Bounds};

/// Largest condition estimate accepted for the Schur complement.
pub const CONDITION_LIMIT: f64 = 1e8;
/// Factor applied to `χᵈ` on each conditioning step.
pub const CHI_D_GROWTH: f64 = 10.0;
/// `χᵈ` may grow at most this many times above its base value.
pub const CHI_D_MAX_RATIO: f64 = 1e6;

/// Settings for hyperparameter fitting.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpConfig {
    pub restarts: usize,
    pub seed: u64,
    /// Restarts run on a strided subset of at most this many points, then
    /// the winner is polished on the full data.
    pub subset_max: usize,
    /// Initial `χᵈ`; `None` starts from the fitted `χᵘ`.
    pub chi_d_init: Option<f64>,
    pub max_iter: usize,
    /// Iteration cap for the full-data polish after the subset restarts.
    pub polish_iter: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            restarts: 8,
            seed: 0,
            subset_max: 400,
            chi_d_init: None,
            max_iter: 200,
            polish_iter: 10,
        }
    }
}

/// Outcome of marginal-likelihood maximization.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub kernel: SeKernel,
    pub chi_u: f64,
    pub log_likelihood: f64,
}

fn se_matrix(kernel: &SeKernel, times: &[f64]) -> Mat<f64> {
    Mat::from_fn(times.len(), times.len(), |i, j| {
        kernel.eval(times[i], times[j])
    })
}

/// `log p(u)` for fixed hyperparameters.
pub fn log_marginal_likelihood(
    kernel: &SeKernel,
    chi_u: f64,
    times: &[f64],
    u: &[f64],
) -> Result<f64> {
    Ok(lml_and_gradient(kernel, chi_u, times, u, false)?.0)
}

/// `log p(u)` and its gradient with respect to `(log σ², log ℓ, log χᵘ)`.
pub fn log_marginal_likelihood_gradient(
    kernel: &SeKernel,
    chi_u: f64,
    times: &[f64],
    u: &[f64],
) -> Result<(f64, [f64; 3])> {
    lml_and_gradient(kernel, chi_u, times, u, true)
}

fn lml_and_gradient(
    kernel: &SeKernel,
    chi_u: f64,
    times: &[f64],
    u: &[f64],
    gradient: bool,
) -> Result<(f64, [f64; 3])> {
    let k = times.len();
    if u.len() != k {
        return Err(Error::ShapeMismatch {
            expected: k,
            got: u.len(),
        });
    }
    let kmat = se_matrix(kernel, times);
    let mut a = kmat.clone();
    for i in 0..k {
        a[(i, i)] += chi_u;
    }
    let factor = jittered_cholesky(a.as_ref())?;
    let alpha = factor.solve_vec(u);
    let fit: f64 = u.iter().zip(&alpha).map(|(x, y)| x * y).sum();
    let value = -0.5 * fit - 0.5 * factor.log_det() - 0.5 * k as f64 * (2.0 * PI).ln();
    if !gradient {
        return Ok((value, [0.0; 3]));
    }
    let inv = factor.inverse();
    let l2 = kernel.lengthscale() * kernel.lengthscale();
    let (mut g_var, mut g_ell, mut g_chi) = (0.0, 0.0, 0.0);
    for j in 0..k {
        for i in 0..k {
            let w = alpha[i] * alpha[j] - inv[(i, j)];
            let kij = kmat[(i, j)];
            let r = times[i] - times[j];
            g_var += w * kij;
            g_ell += w * kij * r * r / l2;
        }
        g_chi += (alpha[j] * alpha[j] - inv[(j, j)]) * chi_u;
    }
    Ok((value, [0.5 * g_var, 0.5 * g_ell, 0.5 * g_chi]))
}

fn data_scale(u: &[f64]) -> (f64, f64) {
    let n = u.len() as f64;
    let mean = u.iter().sum::<f64>() / n;
    let var = u.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let msq = u.iter().map(|x| x * x).sum::<f64>() / n;
    let v = if var > 0.0 {
        var
    } else if msq > 0.0 {
        msq
    } else {
        1.0
    };
    (v, v.max(msq))
}

struct Problem<'a> {
    times: &'a [f64],
    u: &'a [f64],
}

impl Problem<'_> {
    fn objective(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let kernel = SeKernel::from_log(x[0], x[1]).ok()?;
        let (v, g) =
            log_marginal_likelihood_gradient(&kernel, x[2].exp(), self.times, self.u).ok()?;
        Some((-v, g.iter().map(|gi| -gi).collect()))
    }

    fn value(&self, x: &[f64]) -> Option<f64> {
        let kernel = SeKernel::from_log(x[0], x[1]).ok()?;
        let v = log_marginal_likelihood(&kernel, x[2].exp(), self.times, self.u).ok()?;
        v.is_finite().then_some(-v)
    }
}

/// Maximize the marginal likelihood over `(σ², ℓ, χᵘ)` with multi-start
/// quasi-Newton in log coordinates.
pub fn fit_hyperparameters(times: &[f64], u: &[f64], config: &GpConfig) -> Result<Hyperparameters> {
    let k = times.len();
    if k < 3 {
        return Err(Error::InvalidArgument(format!(
            "hyperparameter fitting needs at least 3 points, got {k}"
        )));
    }
    if u.len() != k {
        return Err(Error::ShapeMismatch {
            expected: k,
            got: u.len(),
        });
    }
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("observations must be finite".into()));
    }
    check_increasing(times)?;
    if config.restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be at least 1".into()));
    }

    let span = times[k - 1] - times[0];
    let (v, vmax) = data_scale(u);
    let bounds = Bounds {
        lower: vec![
            (1e-3 * v).ln(),
            (1e-3 * span / k as f64).ln(),
            (1e-10 * v).ln(),
        ],
        upper: vec![(1e3 * vmax).ln(), (10.0 * span).ln(), (10.0 * v).ln()],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let starts: Vec<Vec<f64>> = (0..config.restarts)
        .map(|_| {
            vec![
                v.ln() + rng.random_range(0.1f64.ln()..10f64.ln()),
                span.ln() + rng.random_range(0.05f64.ln()..2f64.ln()),
                v.ln() + rng.random_range(1e-6f64.ln()..1e-1f64.ln()),
            ]
        })
        .collect();

    let full = Problem { times, u };
    let (sub_times, sub_u) = strided_subset(times, u, config.subset_max.max(3));
    let subset = Problem {
        times: &sub_times,
        u: &sub_u,
    };
    let opts = BfgsOptions {
        max_iter: config.max_iter,
        gtol: 1e-5,
        ftol: 1e-10,
        max_step: 2.0,
        max_backtracks: 12,
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    for start in &starts {
        if let Some(m) = minimize_split(
            |x| subset.objective(x),
            |x| subset.value(x),
            start,
            Some(&bounds),
            &opts,
        ) {
            if best.as_ref().is_none_or(|(f, _)| m.value < *f) {
                best = Some((m.value, m.x));
            }
        }
    }
    let Some((_, mut x)) = best else {
        return Err(Error::OptimizationFailed(
            "no restart produced a finite objective".into(),
        ));
    };

    if sub_times.len() < k {
        let polish = BfgsOptions {
            max_iter: config.polish_iter,
            ftol: 1e-8,
            ..opts
        };
        let mut value = full.value(&x).unwrap_or(f64::INFINITY);
        if let Some(m) = minimize_split(
            |x| full.objective(x),
            |x| full.value(x),
            &x,
            Some(&bounds),
            &polish,
        ) {
            if m.value <= value {
                value = m.value;
                x = m.x;
            }
        }
        // Keep the guarantee of never ending below the best starting point.
        for start in &starts {
            if let Some(f) = full.value(start) {
                if f < value {
                    value = f;
                    x = start.clone();
                }
            }
        }
        if !value.is_finite() {
            return Err(Error::OptimizationFailed(
                "objective is not finite on the full data".into(),
            ));
        }
    }

    let kernel = SeKernel::from_log(x[0], x[1])?;
    let chi_u = x[2].exp();
    let log_likelihood = log_marginal_likelihood(&kernel, chi_u, times, u)?;
    Ok(Hyperparameters {
        kernel,
        chi_u,
        log_likelihood,
    })
}

fn strided_subset(times: &[f64], u: &[f64], max: usize) -> (Vec<f64>, Vec<f64>) {
    let k = times.len();
    if k <= max {
        return (times.to_vec(), u.to_vec());
    }
    let stride = k.div_ceil(max);
    let mut idx: Vec<usize> = (0..k).step_by(stride).collect();
    if *idx.last().unwrap() != k - 1 {
        idx.push(k - 1);
    }
    (
        idx.iter().map(|&i| times[i]).collect(),
        idx.iter().map(|&i| u[i]).collect(),
    )
}

/// `Rdd` in factored form together with the `χᵈ` that conditioned it.
#[derive(Clone, Debug)]
pub struct DerivativePrecision {
    pub weight: InverseWeight,
    pub chi_d: f64,
    pub condition: f64,
}

/// A fitted GP for one state component.
#[derive(Clone, Debug)]
pub struct GpStateModel {
    kernel: SeKernel,
    chi_u: f64,
    times: Vec<f64>,
    u: Vec<f64>,
    derivative_indices: Vec<usize>,
    kuu: Factor,
    alpha: Vec<f64>,
    d_hat: Vec<f64>,
    u_hat: Vec<f64>,
    /// `Kdd − Kdu Kuu⁻¹ Kud` without the `χᵈ` term.
    schur: Mat<f64>,
    precision: DerivativePrecision,
}

impl GpStateModel {
    /// Fit hyperparameters and build the model on the full grid.
    pub fn fit(times: &[f64], u: &[f64], config: &GpConfig) -> Result<Self> {
        Self::fit_on(times, u, None, config)
    }

    /// As [`fit`](Self::fit) with derivatives placed on a subset of the grid.
    pub fn fit_on(
        times: &[f64],
        u: &[f64],
        derivative_indices: Option<Vec<usize>>,
        config: &GpConfig,
    ) -> Result<Self> {
        let hp = fit_hyperparameters(times, u, config)?;
        Self::with_hyperparameters(
            hp.kernel,
            hp.chi_u,
            times,
            u,
            derivative_indices,
            config.chi_d_init,
        )
    }

    /// Build the model for given hyperparameters.
    ///
    /// `derivative_indices` selects the derivative grid as a strictly
    /// increasing subset of `times` (default: all of it). `chi_d_init`
    /// defaults to `chi_u`.
    pub fn with_hyperparameters(
        kernel: SeKernel,
        chi_u: f64,
        times: &[f64],
        u: &[f64],
        derivative_indices: Option<Vec<usize>>,
        chi_d_init: Option<f64>,
    ) -> Result<Self> {
        let k = times.len();
        if u.len() != k {
            return Err(Error::ShapeMismatch {
                expected: k,
                got: u.len(),
            });
        }
        if !(chi_u >= 0.0 && chi_u.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "chi_u must be >= 0, got {chi_u}"
            )));
        }
        let derivative_indices = derivative_indices.unwrap_or_else(|| (0..k).collect());
        if derivative_indices.is_empty()
            || derivative_indices.windows(2).any(|w| w[1] <= w[0])
            || derivative_indices.iter().any(|&i| i >= k)
        {
            return Err(Error::InvalidArgument(
                "derivative indices must be a non-empty increasing subset of the grid".into(),
            ));
        }
        let dtimes: Vec<f64> = derivative_indices.iter().map(|&i| times[i]).collect();
        let blocks = crate::kernels::GramBlocks::assemble_on(&kernel, times, &dtimes, chi_u, 0.0)?;

        let kuu = jittered_cholesky(blocks.kuu.as_ref())?;
        let alpha = kuu.solve_vec(u);
        let d_hat = mat_vec(blocks.kdu.as_ref(), &alpha);
        let kplain = se_matrix(&kernel, times);
        let u_hat = mat_vec(kplain.as_ref(), &alpha);

        let half = kuu.half_solve(blocks.kud.as_ref());
        let mut schur = &blocks.kdd - half.transpose() * &half;
        symmetrize(&mut schur);

        let chi_d_init = chi_d_init.unwrap_or(chi_u);
        let precision = condition_schur(&schur, chi_d_init, chi_u)?;
        Ok(Self {
            kernel,
            chi_u,
            times: times.to_vec(),
            u: u.to_vec(),
            derivative_indices,
            kuu,
            alpha,
            d_hat,
            u_hat,
            schur,
            precision,
        })
    }

    pub fn kernel(&self) -> &SeKernel {
        &self.kernel
    }

    pub fn chi_u(&self) -> f64 {
        self.chi_u
    }

    pub fn chi_d(&self) -> f64 {
        self.precision.chi_d
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn observations(&self) -> &[f64] {
        &self.u
    }

    pub fn derivative_indices(&self) -> &[usize] {
        &self.derivative_indices
    }

    pub fn derivative_times(&self) -> Vec<f64> {
        self.derivative_indices
            .iter()
            .map(|&i| self.times[i])
            .collect()
    }

    /// `û = κ(T,T) Kuu⁻¹ u`.
    pub fn smooth_states(&self) -> &[f64] {
        &self.u_hat
    }

    /// `d̂ = Kdu Kuu⁻¹ u` on the derivative grid.
    pub fn estimate_derivatives(&self) -> &[f64] {
        &self.d_hat
    }

    /// The precision conditioned at construction.
    pub fn precision(&self) -> &DerivativePrecision {
        &self.precision
    }

    /// Recondition the derivative precision starting from another `χᵈ`.
    pub fn derivative_precision(&self, chi_d_init: f64) -> Result<DerivativePrecision> {
        condition_schur(&self.schur, chi_d_init, self.chi_u)
    }

    /// Dense `Rdd`.
    pub fn rdd_matrix(&self) -> Mat<f64> {
        self.precision.weight.matrix()
    }

    /// Dense `Rdu = −Rdd Kdu Kuu⁻¹`.
    pub fn rdu_matrix(&self) -> Mat<f64> {
        let dtimes = self.derivative_times();
        let kud = Mat::from_fn(self.times.len(), dtimes.len(), |i, j| {
            self.kernel.eval_dt(dtimes[j], self.times[i])
        });
        // Kuu⁻¹ Kud = (Kdu Kuu⁻¹)ᵀ
        let x = self.kuu.solve(kud.as_ref());
        let rdd = self.rdd_matrix();
        -(rdd * x.transpose())
    }

    /// Posterior mean function `κ(t, T) Kuu⁻¹ u` off the grid.
    pub fn mean(&self, t: f64) -> f64 {
        self.times
            .iter()
            .zip(&self.alpha)
            .map(|(ti, a)| self.kernel.eval(t, *ti) * a)
            .sum()
    }

    /// Time derivative of [`mean`](Self::mean).
    pub fn mean_derivative(&self, t: f64) -> f64 {
        self.times
            .iter()
            .zip(&self.alpha)
            .map(|(ti, a)| self.kernel.eval_dt(t, *ti) * a)
            .sum()
    }

    pub fn to_record(&self) -> GpModelRecord {
        GpModelRecord {
            variance: self.kernel.variance(),
            lengthscale: self.kernel.lengthscale(),
            chi_u: self.chi_u,
            chi_d: self.precision.chi_d,
            times: self.times.clone(),
            u: self.u.clone(),
            derivative_indices: self.derivative_indices.clone(),
        }
    }

    /// Rebuild from a record; cached matrices are recomputed.
    pub fn from_record(rec: &GpModelRecord) -> Result<Self> {
        let kernel = SeKernel::new(rec.variance, rec.lengthscale)?;
        Self::with_hyperparameters(
            kernel,
            rec.chi_u,
            &rec.times,
            &rec.u,
            Some(rec.derivative_indices.clone()),
            Some(rec.chi_d),
        )
    }
}

/// Serialized form of a [`GpStateModel`]: hyperparameters plus grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpModelRecord {
    pub variance: f64,
    pub lengthscale: f64,
    pub chi_u: f64,
    pub chi_d: f64,
    pub times: Vec<f64>,
    pub u: Vec<f64>,
    pub derivative_indices: Vec<usize>,
}

fn condition_schur(schur: &Mat<f64>, chi_d_init: f64, chi_u: f64) -> Result<DerivativePrecision> {
    if !(chi_d_init > 0.0 && chi_d_init.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "chi_d_init must be positive, got {chi_d_init}"
        )));
    }
    let limit = CHI_D_MAX_RATIO * chi_u.max(chi_d_init) * (1.0 + 1e-9);
    let n = schur.nrows();
    let mut chi_d = chi_d_init;
    let mut condition = f64::INFINITY;
    while chi_d <= limit {
        let mut s = schur.clone();
        for i in 0..n {
            s[(i, i)] += chi_d;
        }
        if let Ok(factor) = jittered_cholesky(s.as_ref()) {
            condition = factor.condition_estimate();
            if condition <= CONDITION_LIMIT {
                return Ok(DerivativePrecision {
                    weight: InverseWeight::new(factor),
                    chi_d,
                    condition,
                });
            }
        }
        chi_d *= CHI_D_GROWTH;
    }
    Err(Error::ConditioningFailed {
        chi_d: chi_d / CHI_D_GROWTH,
        condition,
    })
}

/// Fit one model per state component, in parallel.
///
/// Component `i` draws its restarts from `config.seed + i`.
pub fn fit_components(
    times: &[f64],
    components: &[Vec<f64>],
    config: &GpConfig,
) -> Result<Vec<GpStateModel>> {
    components
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let cfg = GpConfig {
                seed: config.seed.wrapping_add(i as u64),
                ..config.clone()
            };
            GpStateModel::fit(times, u, &cfg)
        })
        .collect()
}
