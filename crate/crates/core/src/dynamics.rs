//! Right-hand-side registry and Bayesian ensemble prediction.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::mat_vec;
use crate::linear::{Dictionary, GaussianPosterior};
use crate::mcmc::SampleChain;
use crate::network::NetShape;
use crate::ode::{integrate, Method, Trajectory};

/// `(x, θ, out)`: writes `ẋ` for flat parameters `θ`.
pub type RhsFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// An autonomous system `ẋ_i = f_i(x; θ)`.
///
/// `theta` is flat; `equation_params[i]` lists the entries of `θ` that
/// equation `i` depends on, which may overlap when parameters are shared.
#[derive(Clone)]
pub struct SystemSpec {
    pub name: String,
    pub state_dim: usize,
    pub theta_dim: usize,
    pub equation_params: Vec<Vec<usize>>,
    pub truth: Option<Vec<f64>>,
    rhs: RhsFn,
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("theta_dim", &self.theta_dim)
            .field("equation_params", &self.equation_params)
            .field("truth", &self.truth)
            .finish()
    }
}

impl SystemSpec {
    pub fn new(
        name: &str,
        state_dim: usize,
        equation_params: Vec<Vec<usize>>,
        truth: Option<Vec<f64>>,
        rhs: RhsFn,
    ) -> Result<Self> {
        if equation_params.len() != state_dim {
            return Err(Error::ShapeMismatch {
                expected: state_dim,
                got: equation_params.len(),
            });
        }
        let theta_dim = equation_params
            .iter()
            .flatten()
            .map(|i| i + 1)
            .max()
            .unwrap_or(0);
        if let Some(t) = &truth {
            if t.len() != theta_dim {
                return Err(Error::ShapeMismatch {
                    expected: theta_dim,
                    got: t.len(),
                });
            }
        }
        Ok(Self {
            name: name.to_string(),
            state_dim,
            theta_dim,
            equation_params,
            truth,
            rhs,
        })
    }

    /// `ẋ_i = Σ_j θ_ij g_ij(x)` with one dictionary per equation and the
    /// parameters of successive equations stacked.
    pub fn affine(
        name: &str,
        dictionaries: Vec<Dictionary>,
        truth: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = dictionaries.len();
        if let Some(d) = dictionaries.iter().find(|d| d.arity() != n) {
            return Err(Error::ShapeMismatch {
                expected: n,
                got: d.arity(),
            });
        }
        let mut maps = Vec::with_capacity(n);
        let mut offset = 0;
        for d in &dictionaries {
            maps.push((offset..offset + d.len()).collect());
            offset += d.len();
        }
        let dicts = Arc::new(dictionaries);
        let rhs: RhsFn = Arc::new(move |x, theta, out| {
            let mut off = 0;
            for (i, d) in dicts.iter().enumerate() {
                out[i] = d
                    .terms()
                    .iter()
                    .enumerate()
                    .map(|(j, g)| theta[off + j] * g.eval(x))
                    .sum();
                off += d.len();
            }
        });
        Self::new(name, n, maps, truth, rhs)
    }

    /// Lotka–Volterra with the known library `{x₁, x₁x₂}`, `{x₁x₂, x₂}` and
    /// `θ = (α, −β, δ, −γ)`.
    pub fn lotka_volterra(alpha: f64, beta: f64, delta: f64, gamma: f64) -> Self {
        let dicts = vec![
            Dictionary::monomials(2, &["x1", "x1*x2"]).expect("valid monomials"),
            Dictionary::monomials(2, &["x1*x2", "x2"]).expect("valid monomials"),
        ];
        Self::affine(
            "lotka-volterra",
            dicts,
            Some(vec![alpha, -beta, delta, -gamma]),
        )
        .expect("consistent shapes")
    }

    /// Lotka–Volterra over the full quadratic library
    /// `{1, x₁, x₂, x₁², x₂², x₁x₂}` in both equations.
    pub fn lotka_volterra_library(alpha: f64, beta: f64, delta: f64, gamma: f64) -> Self {
        let names = quadratic_library_names();
        let dicts = vec![
            Dictionary::monomials(2, &names).expect("valid monomials"),
            Dictionary::monomials(2, &names).expect("valid monomials"),
        ];
        let truth = vec![
            0.0, alpha, 0.0, 0.0, 0.0, -beta, 0.0, 0.0, -gamma, 0.0, 0.0, delta,
        ];
        Self::affine("lotka-volterra-library", dicts, Some(truth)).expect("consistent shapes")
    }

    /// `ẋ = θ₁x + θ₂x²` with truth `(1, −1)`.
    pub fn logistic() -> Self {
        let d = Dictionary::monomials(1, &["x1", "x1^2"]).expect("valid monomials");
        Self::affine("logistic", vec![d], Some(vec![1.0, -1.0])).expect("consistent shapes")
    }

    /// A scalar system whose right-hand side is a shallow network.
    pub fn network(shape: NetShape) -> Result<Self> {
        if shape.input_dim != 1 {
            return Err(Error::InvalidArgument(
                "network systems model a single state equation".into(),
            ));
        }
        let p = shape.param_len();
        let rhs: RhsFn = Arc::new(move |x, theta, out| out[0] = shape.eval(theta, x));
        Self::new("network", 1, vec![(0..p).collect()], None, rhs)
    }

    /// Relativistic test-body orbit in `(φ, χ)` with shared `θ = (e, p)`.
    pub fn black_hole(e: f64, p: f64) -> Self {
        let rhs: RhsFn = Arc::new(|x, theta, out| {
            let (phi_dot, chi_dot) = blackhole_rates(x[1], theta[0], theta[1]);
            out[0] = phi_dot;
            out[1] = chi_dot;
        });
        Self::new(
            "black-hole",
            2,
            vec![vec![0, 1], vec![0, 1]],
            Some(vec![e, p]),
            rhs,
        )
        .expect("consistent shapes")
    }

    pub fn eval(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        (self.rhs)(x, theta, out)
    }

    /// Integrate at parameters `theta` from `x0` at `t0`.
    pub fn integrate(
        &self,
        theta: &[f64],
        x0: &[f64],
        t0: f64,
        outputs: &[f64],
        method: Method,
    ) -> Result<Trajectory> {
        if theta.len() != self.theta_dim {
            return Err(Error::ShapeMismatch {
                expected: self.theta_dim,
                got: theta.len(),
            });
        }
        if x0.len() != self.state_dim {
            return Err(Error::ShapeMismatch {
                expected: self.state_dim,
                got: x0.len(),
            });
        }
        let f = |_t: f64, x: &[f64], out: &mut [f64]| (self.rhs)(x, theta, out);
        integrate(&f, x0, t0, outputs, method)
    }
}

pub fn quadratic_library_names() -> [&'static str; 6] {
    ["1", "x1", "x2", "x1^2", "x2^2", "x1*x2"]
}

/// `x(t) = γ / (γ + (1 − γ) e^{−t})` for `ẋ = x(1 − x)`, `x(0) = γ`.
pub fn logistic_solution(gamma: f64, t: f64) -> f64 {
    gamma / (gamma + (1.0 - gamma) * (-t).exp())
}

/// `δx₁ − γ ln x₁ + βx₂ − α ln x₂`, conserved along Lotka–Volterra orbits.
pub fn lotka_volterra_invariant(x: &[f64], alpha: f64, beta: f64, delta: f64, gamma: f64) -> f64 {
    delta * x[0] - gamma * x[0].ln() + beta * x[1] - alpha * x[1].ln()
}

/// `(p − 2 − 2e cos χ)(1 + e cos χ)² / √((p − 2)² − 4e²)`, the factor shared by
/// both orbit equations.
pub fn blackhole_common_factor(chi: f64, e: f64, p: f64) -> f64 {
    let c = e * chi.cos();
    (p - 2.0 - 2.0 * c) * (1.0 + c).powi(2) / ((p - 2.0).powi(2) - 4.0 * e * e).sqrt()
}

/// `(φ̇, χ̇)`. Outside the physical domain the result is NaN.
pub fn blackhole_rates(chi: f64, e: f64, p: f64) -> (f64, f64) {
    let common = blackhole_common_factor(chi, e, p);
    let radicand = p - 6.0 - 2.0 * e * chi.cos();
    (common / p.powf(1.5), common * radicand.sqrt() / (p * p))
}

/// Reject orbital elements outside `e ∈ [0, 1)`, `p > 6 + 2e`.
pub fn check_orbit_elements(e: f64, p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&e) || !(p > 6.0 + 2.0 * e) {
        return Err(Error::DomainViolation(format!(
            "orbit elements e = {e}, p = {p} need 0 ≤ e < 1 and p > 6 + 2e"
        )));
    }
    Ok(())
}

/// Radius `r = p / (1 + e cos χ)` and position `−r (cos φ, sin φ)`.
pub fn blackhole_observables(phi: &[f64], chi: &[f64], e: f64, p: f64) -> Result<Vec<[f64; 2]>> {
    if phi.len() != chi.len() {
        return Err(Error::ShapeMismatch {
            expected: phi.len(),
            got: chi.len(),
        });
    }
    check_orbit_elements(e, p)?;
    phi.iter()
        .zip(chi)
        .map(|(&ph, &ch)| {
            if p - 6.0 - 2.0 * e * ch.cos() < 0.0 {
                return Err(Error::DomainViolation(format!(
                    "p − 6 − 2e cos χ < 0 at χ = {ch}"
                )));
            }
            let r = p / (1.0 + e * ch.cos());
            Ok([-r * ph.cos(), -r * ph.sin()])
        })
        .collect()
}

/// Initial state used for the orbit benchmark, `(φ, χ) = (0, π)`.
pub fn blackhole_initial_state() -> [f64; 2] {
    [0.0, PI]
}

/// Where ensemble parameter draws come from.
#[derive(Clone, Debug)]
pub enum ParameterSource {
    /// Exact draws from `N(mean, covariance)`.
    Gaussian {
        mean: Vec<f64>,
        covariance: Mat<f64>,
    },
    /// Uniform resampling of chain draws.
    Chain(SampleChain),
}

impl ParameterSource {
    /// Stack independent per-equation posteriors into one block-diagonal Gaussian.
    pub fn from_posteriors(posteriors: &[GaussianPosterior]) -> Self {
        let p: usize = posteriors.iter().map(|g| g.dim()).sum();
        let mut mean = Vec::with_capacity(p);
        let mut covariance = Mat::zeros(p, p);
        let mut off = 0;
        for g in posteriors {
            mean.extend(&g.mean);
            for i in 0..g.dim() {
                for j in 0..g.dim() {
                    covariance[(off + i, off + j)] = g.covariance[(i, j)];
                }
            }
            off += g.dim();
        }
        ParameterSource::Gaussian { mean, covariance }
    }

    pub fn dim(&self) -> usize {
        match self {
            ParameterSource::Gaussian { mean, .. } => mean.len(),
            ParameterSource::Chain(c) => c.dim(),
        }
    }

    /// `count` draws from a ChaCha stream seeded by `seed`.
    pub fn draw(&self, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            ParameterSource::Gaussian { mean, covariance } => {
                let root = symmetric_sqrt(covariance)?;
                Ok((0..count)
                    .map(|_| {
                        let z: Vec<f64> = (0..mean.len())
                            .map(|_| rng.sample(StandardNormal))
                            .collect();
                        mat_vec(root.as_ref(), &z)
                            .iter()
                            .zip(mean)
                            .map(|(a, m)| a + m)
                            .collect()
                    })
                    .collect())
            }
            ParameterSource::Chain(chain) => {
                if chain.is_empty() {
                    return Err(Error::InvalidArgument("empty chain".into()));
                }
                Ok((0..count)
                    .map(|_| chain.samples[rng.random_range(0..chain.len())].clone())
                    .collect())
            }
        }
    }
}

/// `U diag(√max(s, 0)) Uᵀ`; tolerates semidefinite and zero covariances.
fn symmetric_sqrt(c: &Mat<f64>) -> Result<Mat<f64>> {
    let n = c.nrows();
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let evd = c.self_adjoint_eigen(Side::Lower).map_err(|_| {
        Error::InvalidArgument("eigendecomposition of the covariance failed".into())
    })?;
    let u = evd.U();
    let s = evd.S().column_vector();
    Ok(Mat::from_fn(n, n, |i, j| {
        (0..n)
            .map(|k| u[(i, k)] * s[k].max(0.0).sqrt() * u[(j, k)])
            .sum()
    }))
}

/// Pointwise moments over non-divergent ensemble members.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub times: Vec<f64>,
    /// `mean[k][i]`: state `i` at `times[k]`.
    pub mean: Vec<Vec<f64>>,
    pub sd: Vec<Vec<f64>>,
    pub draws_used: usize,
    pub divergent_draws: usize,
}

impl EnsemblePrediction {
    pub fn mean_component(&self, i: usize) -> Vec<f64> {
        self.mean.iter().map(|m| m[i]).collect()
    }

    pub fn sd_component(&self, i: usize) -> Vec<f64> {
        self.sd.iter().map(|s| s[i]).collect()
    }

    /// Columns `t, state_1_mean, state_1_sd, …`.
    pub fn to_csv(&self) -> String {
        let n = self.mean.first().map_or(0, Vec::len);
        let mut out = String::from("t");
        for i in 1..=n {
            out.push_str(&format!(",state_{i}_mean,state_{i}_sd"));
        }
        out.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            out.push_str(&format!("{t:e}"));
            for i in 0..n {
                out.push_str(&format!(",{:e},{:e}", self.mean[k][i], self.sd[k][i]));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::dataio::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Integrate the system for `draws` parameter samples and report pointwise
/// moments. Draws whose integration fails or leaves the finite range are
/// counted in `divergent_draws` and left out of the moments.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_predict(
    spec: &SystemSpec,
    source: &ParameterSource,
    x0: &[f64],
    t0: f64,
    outputs: &[f64],
    method: Method,
    draws: usize,
    seed: u64,
) -> Result<EnsemblePrediction> {
    if draws < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 draws, got {draws}"
        )));
    }
    if source.dim() != spec.theta_dim {
        return Err(Error::ShapeMismatch {
            expected: spec.theta_dim,
            got: source.dim(),
        });
    }
    let thetas = source.draw(draws, seed)?;
    let runs: Vec<Option<Trajectory>> = thetas
        .par_iter()
        .map(|theta| {
            spec.integrate(theta, x0, t0, outputs, method)
                .ok()
                .filter(|tr| tr.states.iter().flatten().all(|v| v.is_finite()))
        })
        .collect();
    let good: Vec<&Trajectory> = runs.iter().flatten().collect();
    if good.is_empty() {
        return Err(Error::AllDrawsDiverged { draws });
    }
    let n = good.len() as f64;
    let dim = x0.len();
    let mut mean = vec![vec![0.0; dim]; outputs.len()];
    let mut sd = vec![vec![0.0; dim]; outputs.len()];
    for k in 0..outputs.len() {
        for i in 0..dim {
            // Shifted by the first member so identical draws give exact moments.
            let x0 = good[0].states[k][i];
            let m = x0 + good.iter().map(|tr| tr.states[k][i] - x0).sum::<f64>() / n;
            let v = good
                .iter()
                .map(|tr| (tr.states[k][i] - m).powi(2))
                .sum::<f64>()
                / n;
            mean[k][i] = m;
            sd[k][i] = v.sqrt();
        }
    }
    Ok(EnsemblePrediction {
        times: outputs.to_vec(),
        mean,
        sd,
        draws_used: good.len(),
        divergent_draws: draws - good.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::uniform_grid;

    #[test]
    fn lotka_volterra_rhs() {
        let lv = SystemSpec::lotka_volterra(1.5, 1.0, 1.0, 3.0);
        let mut out = [0.0; 2];
        lv.eval(&[2.0, 0.5], lv.truth.as_ref().unwrap(), &mut out);
        assert_eq!(out, [1.5 * 2.0 - 2.0 * 0.5, 2.0 * 0.5 - 3.0 * 0.5]);
        let lib = SystemSpec::lotka_volterra_library(1.5, 1.0, 1.0, 3.0);
        let mut out2 = [0.0; 2];
        lib.eval(&[2.0, 0.5], lib.truth.as_ref().unwrap(), &mut out2);
        assert!((out[0] - out2[0]).abs() < 1e-15 && (out[1] - out2[1]).abs() < 1e-15);
        assert_eq!(lib.theta_dim, 12);
        assert_eq!(lib.equation_params[1], (6..12).collect::<Vec<_>>());
    }

    #[test]
    fn adaptive_solve_conserves_lotka_volterra_invariant() {
        let lv = SystemSpec::lotka_volterra(1.5, 1.0, 1.0, 3.0);
        let grid = uniform_grid(0.0, 20.0, 0.01);
        let tr = lv
            .integrate(
                lv.truth.as_ref().unwrap(),
                &[1.0, 1.0],
                0.0,
                &grid,
                Method::AdaptiveRk {
                    rtol: 1e-10,
                    atol: 1e-10,
                },
            )
            .unwrap();
        let h0 = lotka_volterra_invariant(&[1.0, 1.0], 1.5, 1.0, 1.0, 3.0);
        let drift = tr
            .states
            .iter()
            .map(|x| (lotka_volterra_invariant(x, 1.5, 1.0, 1.0, 3.0) - h0).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-3, "drift {drift}");
    }

    #[test]
    fn logistic_matches_closed_form() {
        let sys = SystemSpec::logistic();
        let tr = sys
            .integrate(
                &[1.0, -1.0],
                &[0.01],
                0.0,
                &[4.5, 9.0],
                Method::AdaptiveRk {
                    rtol: 1e-8,
                    atol: 1e-12,
                },
            )
            .unwrap();
        assert!((tr.states[1][0] - logistic_solution(0.01, 9.0)).abs() < 1e-4);
    }

    fn direct_rates(chi: f64, e: f64, p: f64) -> (f64, f64) {
        // Each equation written out in full, no shared subexpressions.
        let phi_dot = (p - 2.0 - 2.0 * e * chi.cos()) * (1.0 + e * chi.cos()).powi(2)
            / (p.powf(1.5) * ((p - 2.0).powi(2) - 4.0 * e * e).sqrt());
        let chi_dot = (p - 2.0 - 2.0 * e * chi.cos())
            * (1.0 + e * chi.cos()).powi(2)
            * (p - 6.0 - 2.0 * e * chi.cos()).sqrt()
            / (p * p * ((p - 2.0).powi(2) - 4.0 * e * e).sqrt());
        (phi_dot, chi_dot)
    }

    #[test]
    fn black_hole_rates_match_direct_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let chi = rng.random_range(-PI..PI);
            let e = rng.random_range(0.0..0.95);
            let p = rng.random_range(6.0 + 2.0 * e + 0.5..500.0);
            let (a, b) = blackhole_rates(chi, e, p);
            let (da, db) = direct_rates(chi, e, p);
            assert!((a - da).abs() <= 1e-14 * da.abs(), "{a} {da}");
            assert!((b - db).abs() <= 1e-14 * db.abs(), "{b} {db}");
        }
    }

    #[test]
    fn black_hole_observables() {
        let xy = blackhole_observables(&[0.0], &[PI], 0.5, 100.0).unwrap();
        assert!((xy[0][0] + 200.0).abs() < 1e-12 && xy[0][1].abs() < 1e-12);
        let circ = blackhole_observables(&[0.3, 1.2, 2.5], &[0.1, 2.0, 3.0], 0.0, 50.0).unwrap();
        for v in circ {
            assert!((v[0].hypot(v[1]) - 50.0).abs() < 1e-12);
        }
        assert!(matches!(
            blackhole_observables(&[0.0], &[PI], 0.5, 6.5),
            Err(Error::DomainViolation(_))
        ));
        assert!(blackhole_observables(&[0.0], &[PI], 1.0, 100.0).is_err());
    }

    #[test]
    fn degenerate_posterior_gives_deterministic_ensemble() {
        let lv = SystemSpec::lotka_volterra(1.5, 1.0, 1.0, 3.0);
        let truth = lv.truth.clone().unwrap();
        let source = ParameterSource::Gaussian {
            mean: truth.clone(),
            covariance: Mat::zeros(4, 4),
        };
        let grid = uniform_grid(0.0, 5.0, 0.5);
        let method = Method::AdaptiveRk {
            rtol: 1e-9,
            atol: 1e-9,
        };
        let pred = ensemble_predict(&lv, &source, &[1.0, 1.0], 0.0, &grid, method, 5, 0).unwrap();
        let exact = lv
            .integrate(&truth, &[1.0, 1.0], 0.0, &grid, method)
            .unwrap();
        assert_eq!(pred.draws_used, 5);
        for k in 0..grid.len() {
            for i in 0..2 {
                assert_eq!(pred.sd[k][i], 0.0);
                assert_eq!(pred.mean[k][i], exact.states[k][i]);
            }
        }
    }

    #[test]
    fn gaussian_draws_have_requested_moments() {
        let cov = Mat::from_fn(2, 2, |i, j| if i == j { 2.0 } else { 0.6 });
        let source = ParameterSource::Gaussian {
            mean: vec![1.0, -1.0],
            covariance: cov,
        };
        let draws = source.draw(40_000, 5).unwrap();
        let n = draws.len() as f64;
        let m0 = draws.iter().map(|d| d[0]).sum::<f64>() / n;
        let c01 = draws
            .iter()
            .map(|d| (d[0] - 1.0) * (d[1] + 1.0))
            .sum::<f64>()
            / n;
        assert!((m0 - 1.0).abs() < 0.03 && (c01 - 0.6).abs() < 0.05);
    }

    #[test]
    fn ensemble_is_reproducible_and_counts_divergence() {
        let sys = SystemSpec::logistic();
        // Wide spread in the linear coefficient makes some draws blow up.
        let source = ParameterSource::Gaussian {
            mean: vec![1.0, -1.0],
            covariance: Mat::from_fn(2, 2, |i, j| if i == j && i == 1 { 4.0 } else { 0.0 }),
        };
        let method = Method::AdaptiveRk {
            rtol: 1e-6,
            atol: 1e-9,
        };
        let a = ensemble_predict(&sys, &source, &[0.5], 0.0, &[1.0, 10.0], method, 64, 9).unwrap();
        let b = ensemble_predict(&sys, &source, &[0.5], 0.0, &[1.0, 10.0], method, 64, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.divergent_draws > 0 && a.draws_used > 0);
        assert_eq!(a.draws_used + a.divergent_draws, 64);
        assert!(a.sd.iter().flatten().all(|s| *s >= 0.0));
    }

    #[test]
    fn all_divergent_is_an_error() {
        let sys = SystemSpec::logistic();
        let source = ParameterSource::Gaussian {
            mean: vec![1.0, 5.0],
            covariance: Mat::zeros(2, 2),
        };
        let err = ensemble_predict(
            &sys,
            &source,
            &[0.5],
            0.0,
            &[10.0],
            Method::AdaptiveRk {
                rtol: 1e-6,
                atol: 1e-9,
            },
            3,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::AllDrawsDiverged { draws: 3 }));
        assert!(ensemble_predict(
            &sys,
            &source,
            &[0.5],
            0.0,
            &[1.0],
            Method::AdaptiveRk {
                rtol: 1e-6,
                atol: 1e-9
            },
            1,
            0
        )
        .is_err());
    }

    #[test]
    fn csv_layout() {
        let pred = EnsemblePrediction {
            times: vec![0.0, 1.0],
            mean: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            sd: vec![vec![0.0, 0.1], vec![0.2, 0.3]],
            draws_used: 2,
            divergent_draws: 0,
        };
        let csv = pred.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,state_1_mean,state_1_sd,state_2_mean,state_2_sd"
        );
        assert_eq!(lines.count(), 2);
    }
}
