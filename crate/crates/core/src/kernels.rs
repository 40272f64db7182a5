//! Covariance functions and the joint state/derivative Gram blocks.
//!
//! A zero-mean Gaussian process `x(t)` with a differentiable stationary
//! kernel `κ` induces a joint Gaussian law on `(x, ẋ)`. For observation
//! times `T` the covariance blocks are
//!
//! ```text
//! Kuu = κ(T, T) + χᵘ I        state / state
//! Kdu = ∂ₜ κ(T, T)            derivative / state
//! Kud = Kduᵀ                  state / derivative
//! Kdd = ∂ₜ∂ₜ' κ(T, T) + χᵈ I  derivative / derivative
//! ```

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A stationary covariance function together with its time derivatives.
pub trait CovarianceKernel {
    fn eval(&self, t: f64, t2: f64) -> f64;
    /// `∂κ/∂t`.
    fn eval_dt(&self, t: f64, t2: f64) -> f64;
    /// `∂κ/∂t'`.
    fn eval_dt2(&self, t: f64, t2: f64) -> f64;
    /// `∂²κ/∂t∂t'`.
    fn eval_dt_dt2(&self, t: f64, t2: f64) -> f64;
}

/// Squared-exponential kernel `σ² exp(−(t−t')² / 2ℓ²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeKernel {
    variance: f64,
    lengthscale: f64,
}

impl SeKernel {
    pub fn new(variance: f64, lengthscale: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel variance must be positive, got {variance}"
            )));
        }
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel lengthscale must be positive, got {lengthscale}"
            )));
        }
        Ok(Self {
            variance,
            lengthscale,
        })
    }

    /// Build from `(log σ², log ℓ)`, the coordinates the optimizer works in.
    pub fn from_log(log_variance: f64, log_lengthscale: f64) -> Result<Self> {
        Self::new(log_variance.exp(), log_lengthscale.exp())
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }
}

impl CovarianceKernel for SeKernel {
    fn eval(&self, t: f64, t2: f64) -> f64 {
        let r = t - t2;
        self.variance * (-r * r / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }

    fn eval_dt(&self, t: f64, t2: f64) -> f64 {
        let l2 = self.lengthscale * self.lengthscale;
        -(t - t2) / l2 * self.eval(t, t2)
    }

    fn eval_dt2(&self, t: f64, t2: f64) -> f64 {
        let l2 = self.lengthscale * self.lengthscale;
        (t - t2) / l2 * self.eval(t, t2)
    }

    fn eval_dt_dt2(&self, t: f64, t2: f64) -> f64 {
        let l2 = self.lengthscale * self.lengthscale;
        let r = t - t2;
        (1.0 / l2 - r * r / (l2 * l2)) * self.eval(t, t2)
    }
}

/// Gram blocks of the joint `(D, U)` Gaussian on a time grid.
///
/// The derivative grid may be a subset of the state grid; by default they
/// coincide.
#[derive(Clone, Debug)]
pub struct GramBlocks {
    pub kuu: Mat<f64>,
    pub kdu: Mat<f64>,
    pub kud: Mat<f64>,
    pub kdd: Mat<f64>,
    pub times: Vec<f64>,
    pub derivative_times: Vec<f64>,
}

pub(crate) fn check_increasing(times: &[f64]) -> Result<()> {
    for (i, w) in times.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(Error::NonIncreasingTimes { index: i + 1 });
        }
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument("non-finite time stamp".into()));
    }
    Ok(())
}

impl GramBlocks {
    /// Assemble all four blocks on a single grid.
    pub fn assemble<K: CovarianceKernel>(
        kernel: &K,
        times: &[f64],
        chi_u: f64,
        chi_d: f64,
    ) -> Result<Self> {
        Self::assemble_on(kernel, times, times, chi_u, chi_d)
    }

    /// Assemble with derivatives placed on `derivative_times` (a subset of
    /// `times` in practice, although any increasing grid works).
    pub fn assemble_on<K: CovarianceKernel>(
        kernel: &K,
        times: &[f64],
        derivative_times: &[f64],
        chi_u: f64,
        chi_d: f64,
    ) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 time stamps, got {}",
                times.len()
            )));
        }
        check_increasing(times)?;
        check_increasing(derivative_times)?;
        if chi_u < 0.0 || chi_d < 0.0 {
            return Err(Error::InvalidArgument(
                "noise variances must be >= 0".into(),
            ));
        }
        let k = times.len();
        let kd = derivative_times.len();
        let kuu = Mat::from_fn(k, k, |i, j| {
            kernel.eval(times[i], times[j]) + if i == j { chi_u } else { 0.0 }
        });
        let kdu = Mat::from_fn(kd, k, |i, j| kernel.eval_dt(derivative_times[i], times[j]));
        let kud = kdu.transpose().to_owned();
        let kdd = Mat::from_fn(kd, kd, |i, j| {
            kernel.eval_dt_dt2(derivative_times[i], derivative_times[j])
                + if i == j { chi_d } else { 0.0 }
        });
        Ok(Self {
            kuu,
            kdu,
            kud,
            kdd,
            times: times.to_vec(),
            derivative_times: derivative_times.to_vec(),
        })
    }

    /// The full joint covariance `[[Kdd, Kdu], [Kud, Kuu]]`.
    pub fn joint(&self) -> Mat<f64> {
        let kd = self.kdd.nrows();
        let k = self.kuu.nrows();
        Mat::from_fn(kd + k, kd + k, |i, j| match (i < kd, j < kd) {
            (true, true) => self.kdd[(i, j)],
            (true, false) => self.kdu[(i, j - kd)],
            (false, true) => self.kud[(i - kd, j)],
            (false, false) => self.kuu[(i - kd, j - kd)],
        })
    }
}
