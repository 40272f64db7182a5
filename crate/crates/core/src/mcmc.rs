//! Random-walk Metropolis–Hastings.
//!
//! The proposal is `θ' = θ + s·A z` with `z ~ N(0, I)`, where `A` is the
//! identity, a covariance square root, or the inverse transpose of a
//! precision factor. The scale `s` is adapted during burn-in by a
//! Robbins–Monro update on `log s` toward the target acceptance rate, then
//! frozen so the retained samples come from a fixed, reversible kernel.

use std::path::Path;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, jittered_cholesky, symmetrize, Factor, Weighting};
use crate::optimize::{minimize, numeric_gradient, BfgsOptions};

/// Chain budget and adaptation settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Starting scale; `None` uses `2.38 / √P`.
    pub initial_scale: Option<f64>,
    pub target_acceptance: f64,
    pub adapt: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            steps: 50_000,
            burn_in: 10_000,
            thin: 10,
            seed: 0,
            initial_scale: None,
            target_acceptance: 0.23,
            adapt: true,
        }
    }
}

/// Shape of the random-walk increment.
#[derive(Clone, Debug)]
pub enum Proposal {
    Isotropic,
    /// Lower-triangular `C` with `CCᵀ` the proposal covariance.
    CovarianceRoot(Mat<f64>),
    /// A precision matrix `H`, stored Jacobi-scaled and factored; increments
    /// are `D^{-1/2} L⁻ᵀ z` with `D = diag(H)` and `LLᵀ = D^{-1/2} H D^{-1/2}`.
    Precision {
        factor: Factor,
        inv_sqrt_diag: Vec<f64>,
    },
}

impl Proposal {
    /// Proposal with covariance `H⁻¹` for a symmetric positive definite `H`.
    pub fn from_precision(h: &Mat<f64>) -> Result<Self> {
        let p = h.nrows();
        let inv_sqrt_diag: Vec<f64> = (0..p).map(|i| 1.0 / h[(i, i)].sqrt()).collect();
        if inv_sqrt_diag.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite { jitter: 0.0 });
        }
        let mut scaled = Mat::from_fn(p, p, |i, j| h[(i, j)] * inv_sqrt_diag[i] * inv_sqrt_diag[j]);
        symmetrize(&mut scaled);
        Ok(Proposal::Precision {
            factor: jittered_cholesky(scaled.as_ref())?,
            inv_sqrt_diag,
        })
    }

    pub fn from_covariance(c: &Mat<f64>) -> Result<Self> {
        Ok(Proposal::CovarianceRoot(
            jittered_cholesky(c.as_ref())?.lower().to_owned(),
        ))
    }

    fn increment(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Proposal::Isotropic => z.to_vec(),
            Proposal::CovarianceRoot(c) => crate::linalg::mat_vec(c.as_ref(), z),
            Proposal::Precision {
                factor,
                inv_sqrt_diag,
            } => factor
                .half_solve_transpose_vec(z)
                .iter()
                .zip(inv_sqrt_diag)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }
}

/// Post-burn-in, thinned draws.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleChain {
    pub samples: Vec<Vec<f64>>,
    /// Acceptance rate over the post-burn-in steps.
    pub acceptance_rate: f64,
    pub log_posterior_trace: Vec<f64>,
    pub proposal_scale: f64,
    pub seed: u64,
}

impl SampleChain {
    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.dim())
            .map(|j| self.samples.iter().map(|s| s[j]).sum::<f64>() / n)
            .collect()
    }

    pub fn std_devs(&self) -> Vec<f64> {
        let m = self.mean();
        let n = self.len() as f64;
        (0..self.dim())
            .map(|j| {
                (self
                    .samples
                    .iter()
                    .map(|s| (s[j] - m[j]).powi(2))
                    .sum::<f64>()
                    / n)
                    .sqrt()
            })
            .collect()
    }

    pub fn metadata(&self) -> ChainMetadata {
        ChainMetadata {
            acceptance_rate: self.acceptance_rate,
            proposal_scale: self.proposal_scale,
            seed: self.seed,
            samples: self.len(),
            dim: self.dim(),
        }
    }

    /// One CSV row per retained draw (`log_posterior, theta_1, …`) and a
    /// JSON sidecar with the metadata.
    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        let mut out = String::from("log_posterior");
        for j in 0..self.dim() {
            out.push_str(&format!(",theta_{}", j + 1));
        }
        out.push('\n');
        for (s, lp) in self.samples.iter().zip(&self.log_posterior_trace) {
            out.push_str(&format!("{lp:e}"));
            for v in s {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        crate::dataio::write_atomic(csv_path, out.as_bytes())?;
        crate::dataio::write_atomic(
            json_path,
            serde_json::to_string_pretty(&self.metadata())?.as_bytes(),
        )
    }

    /// Read a chain written by [`write`](Self::write).
    pub fn read(csv_path: &Path, json_path: &Path) -> Result<Self> {
        let meta: ChainMetadata = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
        let text = std::fs::read_to_string(csv_path)?;
        let mut samples = Vec::new();
        let mut trace = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("chain row {i}: {e}")))?;
            if vals.len() != meta.dim + 1 {
                return Err(Error::Format(format!(
                    "chain row {i} has {} columns",
                    vals.len()
                )));
            }
            trace.push(vals[0]);
            samples.push(vals[1..].to_vec());
        }
        if samples.len() != meta.samples {
            return Err(Error::Format("chain length disagrees with metadata".into()));
        }
        Ok(Self {
            samples,
            acceptance_rate: meta.acceptance_rate,
            log_posterior_trace: trace,
            proposal_scale: meta.proposal_scale,
            seed: meta.seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainMetadata {
    pub acceptance_rate: f64,
    pub proposal_scale: f64,
    pub seed: u64,
    pub samples: usize,
    pub dim: usize,
}

/// Run random-walk Metropolis–Hastings on `target` (an unnormalized log
/// density; `-∞` or NaN marks points outside the support).
pub fn run_chain<F>(
    init: &[f64],
    target: F,
    proposal: &Proposal,
    config: &ChainConfig,
) -> Result<SampleChain>
where
    F: Fn(&[f64]) -> f64,
{
    if config.steps <= config.burn_in {
        return Err(Error::InvalidArgument(format!(
            "steps ({}) must exceed burn-in ({})",
            config.steps, config.burn_in
        )));
    }
    let p = init.len();
    let thin = config.thin.max(1);
    let mut x = init.to_vec();
    let mut lp = target(&x);
    if !lp.is_finite() {
        return Err(Error::NonFiniteInit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log_scale = config
        .initial_scale
        .unwrap_or(2.38 / (p as f64).sqrt())
        .ln();
    let mut samples = Vec::with_capacity((config.steps - config.burn_in) / thin + 1);
    let mut trace = Vec::with_capacity(samples.capacity());
    let mut accepted = 0usize;
    let mut z = vec![0.0; p];

    for step in 0..config.steps {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let inc = proposal.increment(&z);
        let scale = log_scale.exp();
        let y: Vec<f64> = x.iter().zip(&inc).map(|(a, d)| a + scale * d).collect();
        let ly = target(&y);
        let u: f64 = rng.random();
        let accept = ly.is_finite() && u.ln() < ly - lp;
        if accept {
            x = y;
            lp = ly;
        }
        if step < config.burn_in {
            if config.adapt {
                let a = if accept { 1.0 } else { 0.0 };
                log_scale += (a - config.target_acceptance) / ((step + 1) as f64).powf(0.6);
            }
        } else {
            accepted += accept as usize;
            if (step - config.burn_in).is_multiple_of(thin) {
                samples.push(x.clone());
                trace.push(lp);
            }
        }
    }
    Ok(SampleChain {
        samples,
        acceptance_rate: accepted as f64 / (config.steps - config.burn_in) as f64,
        log_posterior_trace: trace,
        proposal_scale: log_scale.exp(),
        seed: config.seed,
    })
}

/// Maximize a log density with BFGS on central-difference gradients.
/// `steps` sets the per-coordinate difference step and the natural scale
/// the optimizer works in.
pub fn maximize_numeric<F>(
    target: F,
    x0: &[f64],
    steps: &[f64],
    max_iter: usize,
) -> Option<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> f64,
{
    let unscale = |y: &[f64]| -> Vec<f64> { y.iter().zip(steps).map(|(v, s)| v * s).collect() };
    let f = |y: &[f64]| {
        let v = -target(&unscale(y));
        if !v.is_finite() {
            return None;
        }
        let g = numeric_gradient(|z| -target(&unscale(z)), y, &vec![1e-5; y.len()]);
        g.iter().all(|gi| gi.is_finite()).then_some((v, g))
    };
    let y0: Vec<f64> = x0.iter().zip(steps).map(|(v, s)| v / s).collect();
    let opts = BfgsOptions {
        max_iter,
        gtol: 1e-8,
        ftol: 1e-15,
        ..BfgsOptions::default()
    };
    let m = minimize(f, &y0, None, &opts)?;
    Some((unscale(&m.x), -m.value))
}

/// Negative Hessian of a log density by central second differences.
pub fn laplace_precision<F>(target: F, x: &[f64], steps: &[f64]) -> Mat<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let p = x.len();
    let f0 = target(x);
    let mut h = Mat::zeros(p, p);
    let at = |da: (usize, f64), db: (usize, f64)| {
        let mut y = x.to_vec();
        y[da.0] += da.1;
        y[db.0] += db.1;
        target(&y)
    };
    for a in 0..p {
        let ha = steps[a];
        h[(a, a)] = -(at((a, ha), (a, 0.0)) - 2.0 * f0 + at((a, -ha), (a, 0.0))) / (ha * ha);
        for b in 0..a {
            let hb = steps[b];
            let v = -(at((a, ha), (b, hb)) - at((a, ha), (b, -hb)) - at((a, -ha), (b, hb))
                + at((a, -ha), (b, -hb)))
                / (4.0 * ha * hb);
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    h
}

/// `−½ (Σ_i r_iᵀ W_i r_i + λ‖θ‖²)` with `r_i = f_i − d̂_i`, the log posterior of
/// a derivative-constrained model up to a constant.
pub fn gaussian_log_posterior(
    residuals: &[Vec<f64>],
    weights: &[&dyn Weighting],
    theta: &[f64],
    lambda: f64,
) -> f64 {
    let fit: f64 = residuals
        .iter()
        .zip(weights)
        .map(|(r, w)| w.quad_form(r))
        .sum();
    let prior: f64 = theta.iter().map(|t| t * t).sum::<f64>() * lambda;
    -0.5 * (fit + prior)
}

/// Exact draws from `N(mean, cov)` are handy for checks; `None` when `cov`
/// is not positive definite.
pub fn covariance_factor(cov: &Mat<f64>) -> Option<Factor> {
    cholesky(cov.as_ref())
}
