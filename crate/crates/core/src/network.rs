//! Single-hidden-layer tanh networks as right-hand sides, and their
//! derivative-matching posterior.
//!
//! Parameters are flattened as `w` (row-major, `L×N`), then `b`, then `v`,
//! so `P = L(N + 2)`.

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Weighting};
use crate::mcmc::{run_chain, ChainConfig, Proposal, SampleChain};
use crate::optimize::{minimize, BfgsOptions};

/// Layer sizes of a [`ShallowNet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input_dim: usize,
    pub hidden: usize,
}

impl NetShape {
    pub fn new(input_dim: usize, hidden: usize) -> Self {
        Self { input_dim, hidden }
    }

    pub fn param_len(&self) -> usize {
        self.hidden * (self.input_dim + 2)
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_len() {
            return Err(Error::ShapeMismatch {
                expected: self.param_len(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    /// `f(x; θ) = Σ_l v_l tanh(w_lᵀ x + b_l)` on a flat parameter vector.
    pub fn eval(&self, theta: &[f64], x: &[f64]) -> f64 {
        let (n, l) = (self.input_dim, self.hidden);
        let (w, rest) = theta.split_at(n * l);
        let (b, v) = rest.split_at(l);
        (0..l)
            .map(|i| v[i] * (dot(&w[i * n..(i + 1) * n], x) + b[i]).tanh())
            .sum()
    }

    /// `∂f/∂θ` at `x`, in flat parameter order.
    pub fn gradient(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let (n, l) = (self.input_dim, self.hidden);
        let (w, rest) = theta.split_at(n * l);
        let (b, v) = rest.split_at(l);
        let mut g = vec![0.0; self.param_len()];
        for i in 0..l {
            let h = (dot(&w[i * n..(i + 1) * n], x) + b[i]).tanh();
            let s = (1.0 - h * h) * v[i];
            for j in 0..n {
                g[i * n + j] = s * x[j];
            }
            g[n * l + i] = s;
            g[n * l + l + i] = h;
        }
        g
    }

    /// Rows of `∂f(x_k)/∂θ` for each state `x_k`.
    pub fn jacobian(&self, theta: &[f64], states: &[Vec<f64>]) -> Mat<f64> {
        let mut j = Mat::zeros(states.len(), self.param_len());
        for (k, x) in states.iter().enumerate() {
            for (p, v) in self.gradient(theta, x).into_iter().enumerate() {
                j[(k, p)] = v;
            }
        }
        j
    }
}

/// A network with its parameters laid out by layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShallowNet {
    pub weights_in: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub weights_out: Vec<f64>,
}

impl ShallowNet {
    pub fn shape(&self) -> NetShape {
        NetShape::new(
            self.weights_in.first().map_or(0, Vec::len),
            self.biases.len(),
        )
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.weights_in.iter().flatten().copied().collect();
        out.extend(&self.biases);
        out.extend(&self.weights_out);
        out
    }

    pub fn unflatten(shape: NetShape, theta: &[f64]) -> Result<Self> {
        shape.check(theta)?;
        let (n, l) = (shape.input_dim, shape.hidden);
        Ok(Self {
            weights_in: (0..l).map(|i| theta[i * n..(i + 1) * n].to_vec()).collect(),
            biases: theta[n * l..n * l + l].to_vec(),
            weights_out: theta[n * l + l..].to_vec(),
        })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.weights_in
            .iter()
            .zip(&self.biases)
            .zip(&self.weights_out)
            .map(|((w, b), v)| v * (dot(w, x) + b).tanh())
            .sum()
    }
}

/// `log π(θ) = −½ (rᵀ R r + λ‖θ‖²)` with `r = f(û; θ) − d̂`.
pub fn log_posterior<W: Weighting + ?Sized>(
    theta: &[f64],
    shape: NetShape,
    states: &[Vec<f64>],
    rdd: &W,
    d_hat: &[f64],
    lambda: f64,
) -> Result<f64> {
    shape.check(theta)?;
    if states.len() != d_hat.len() || rdd.dim() != d_hat.len() {
        return Err(Error::ShapeMismatch {
            expected: d_hat.len(),
            got: states.len().min(rdd.dim()),
        });
    }
    let r: Vec<f64> = states
        .iter()
        .zip(d_hat)
        .map(|(x, d)| shape.eval(theta, x) - d)
        .collect();
    Ok(-0.5 * (rdd.quad_form(&r) + lambda * dot(theta, theta)))
}

/// Everything needed to evaluate the network posterior for one equation.
pub struct NetworkTarget<W> {
    pub shape: NetShape,
    pub states: Vec<Vec<f64>>,
    pub weight: W,
    pub d_hat: Vec<f64>,
    pub lambda: f64,
}

/// Knobs for [`NetworkTarget::sample`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSamplerConfig {
    pub prior_draws: usize,
    pub map_iterations: usize,
    pub chain: ChainConfig,
}

impl Default for NetworkSamplerConfig {
    fn default() -> Self {
        Self {
            prior_draws: 16,
            map_iterations: 2000,
            chain: ChainConfig::default(),
        }
    }
}

impl<W: Weighting + Sync> NetworkTarget<W> {
    pub fn new(
        shape: NetShape,
        states: Vec<Vec<f64>>,
        weight: W,
        d_hat: Vec<f64>,
        lambda: f64,
    ) -> Result<Self> {
        if states.len() != d_hat.len() || weight.dim() != d_hat.len() {
            return Err(Error::ShapeMismatch {
                expected: d_hat.len(),
                got: states.len(),
            });
        }
        if let Some(x) = states.iter().find(|x| x.len() != shape.input_dim) {
            return Err(Error::ShapeMismatch {
                expected: shape.input_dim,
                got: x.len(),
            });
        }
        Ok(Self {
            shape,
            states,
            weight,
            d_hat,
            lambda,
        })
    }

    fn residual(&self, theta: &[f64]) -> Vec<f64> {
        self.states
            .iter()
            .zip(&self.d_hat)
            .map(|(x, d)| self.shape.eval(theta, x) - d)
            .collect()
    }

    /// `NaN` for a wrongly sized `theta`.
    pub fn log_posterior(&self, theta: &[f64]) -> f64 {
        if theta.len() != self.shape.param_len() {
            return f64::NAN;
        }
        -0.5 * (self.weight.quad_form(&self.residual(theta)) + self.lambda * dot(theta, theta))
    }

    /// Negative log posterior and its gradient `Jᵀ R r + λθ`.
    pub fn objective(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let r = self.residual(theta);
        let j = self.shape.jacobian(theta, &self.states);
        let mut g = self.weight.weighted_rhs(j.as_ref(), &r);
        for (gi, t) in g.iter_mut().zip(theta) {
            *gi += self.lambda * t;
        }
        (
            0.5 * (self.weight.quad_form(&r) + self.lambda * dot(theta, theta)),
            g,
        )
    }

    /// Gauss–Newton precision `Jᵀ R J + λI` at `theta`.
    pub fn gauss_newton_precision(&self, theta: &[f64]) -> Mat<f64> {
        let j = self.shape.jacobian(theta, &self.states);
        let mut h = self.weight.weighted_gram(j.as_ref());
        for i in 0..h.nrows() {
            h[(i, i)] += self.lambda;
        }
        h
    }

    /// Posterior mode: `prior_draws` starts from `N(0, λ⁻¹ I)`, each polished
    /// by BFGS, best kept.
    pub fn find_map(&self, prior_draws: usize, max_iter: usize, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = 1.0 / self.lambda.max(f64::MIN_POSITIVE).sqrt();
        let starts: Vec<Vec<f64>> = (0..prior_draws.max(1))
            .map(|_| {
                (0..self.shape.param_len())
                    .map(|_| sd * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect()
            })
            .collect();
        let opts = BfgsOptions {
            max_iter,
            gtol: 1e-8,
            ftol: 1e-14,
            ..BfgsOptions::default()
        };
        let polished: Vec<(f64, Vec<f64>)> = starts
            .par_iter()
            .filter_map(|s| {
                let m = minimize(|t| Some(self.objective(t)), s, None, &opts)?;
                Some((m.value, m.x))
            })
            .collect();
        polished
            .into_iter()
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, x)| x)
            .ok_or(Error::NonFiniteInit)
    }

    /// Random-walk MH started at the mode, with the Gauss–Newton precision
    /// at the mode shaping the proposal.
    pub fn sample(&self, config: &NetworkSamplerConfig) -> Result<SampleChain> {
        let map = self.find_map(config.prior_draws, config.map_iterations, config.chain.seed)?;
        let proposal = Proposal::from_precision(&self.gauss_newton_precision(&map))?;
        run_chain(&map, |t| self.log_posterior(t), &proposal, &config.chain)
    }
}

/// Pointwise mean and standard deviation of `f(x; θ)` over the chain.
pub fn posterior_f_band(
    chain: &SampleChain,
    shape: NetShape,
    query_states: &[Vec<f64>],
) -> (Vec<f64>, Vec<f64>) {
    let n = chain.len() as f64;
    query_states
        .iter()
        .map(|x| {
            let vals: Vec<f64> = chain.samples.iter().map(|t| shape.eval(t, x)).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .unzip()
}
