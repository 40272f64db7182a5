//! Deterministic initial-value solvers.
//!
//! Two methods are provided: implicit Euler with a damped Newton solve at
//! every step, and the adaptive Dormand–Prince 5(4) pair. Both return the
//! state exactly at the requested output instants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Newton residual tolerance for implicit Euler, relative to `max(1, ‖y‖∞)`.
pub const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 50;
const MAX_STEPS: usize = 50_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Method {
    ImplicitEuler { dt: f64 },
    AdaptiveRk { rtol: f64, atol: f64 },
}

/// States at a list of output times.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// One row per output time.
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Values of component `i` over time.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[i]).collect()
    }
}

/// Right-hand side `ẋ = f(t, x)` writing into `out`.
pub trait Rhs {
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]);
}

impl<F: Fn(f64, &[f64], &mut [f64])> Rhs for F {
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self(t, x, out)
    }
}

/// Integrate from `(t0, x0)` and report the state at each of `outputs`
/// (non-decreasing, all `≥ t0`).
pub fn integrate<R: Rhs + ?Sized>(
    rhs: &R,
    x0: &[f64],
    t0: f64,
    outputs: &[f64],
    method: Method,
) -> Result<Trajectory> {
    if outputs.iter().any(|t| !t.is_finite()) || outputs.first().is_some_and(|&t| t < t0) {
        return Err(Error::InvalidArgument(
            "output times must be finite and start at or after t0".into(),
        ));
    }
    if let Some(i) = outputs.windows(2).position(|w| w[1] < w[0]) {
        return Err(Error::NonIncreasingTimes { index: i + 1 });
    }
    match method {
        Method::ImplicitEuler { dt } => {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "dt must be positive, got {dt}"
                )));
            }
            implicit_euler(rhs, x0, t0, outputs, dt)
        }
        Method::AdaptiveRk { rtol, atol } => {
            if !(rtol > 0.0 && atol > 0.0) {
                return Err(Error::InvalidArgument("tolerances must be positive".into()));
            }
            dormand_prince(rhs, x0, t0, outputs, rtol, atol)
        }
    }
}

/// The uniform grid `t0, t0 + dt, …` up to `t_end` (inclusive when it lands
/// on the grid up to rounding).
pub fn uniform_grid(t0: f64, t_end: f64, dt: f64) -> Vec<f64> {
    let n = ((t_end - t0) / dt + 1e-9).floor() as usize;
    (0..=n).map(|k| t0 + k as f64 * dt).collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Solve `y − x − h f(t, y) = 0` by damped Newton with a finite-difference
/// Jacobian. Returns `None` on failure.
fn newton_step<R: Rhs + ?Sized>(rhs: &R, t: f64, x: &[f64], h: f64) -> Option<Vec<f64>> {
    let n = x.len();
    let mut fy = vec![0.0; n];
    let residual = |y: &[f64], fy: &mut [f64]| -> Vec<f64> {
        rhs.eval(t, y, fy);
        (0..n).map(|i| y[i] - x[i] - h * fy[i]).collect()
    };
    // Explicit Euler predictor.
    rhs.eval(t - h, x, &mut fy);
    let mut y: Vec<f64> = (0..n).map(|i| x[i] + h * fy[i]).collect();
    if y.iter().any(|v| !v.is_finite()) {
        y = x.to_vec();
    }
    let mut r = residual(&y, &mut fy);
    let mut jac = vec![vec![0.0; n]; n];
    let mut f2 = vec![0.0; n];
    // After the tolerance is met one more Newton step is tried, kept only if
    // it lowers the residual further.
    let mut polished = false;
    for _ in 0..NEWTON_MAX_ITER {
        let rn = inf_norm(&r);
        if !rn.is_finite() {
            return None;
        }
        let converged = rn < NEWTON_TOL * inf_norm(&y).max(1.0);
        if converged && polished {
            return Some(y);
        }
        polished = converged;
        for j in 0..n {
            let step = 1e-7 * y[j].abs().max(1.0);
            let mut yp = y.clone();
            yp[j] += step;
            rhs.eval(t, &yp, &mut f2);
            for i in 0..n {
                let dfi = (f2[i] - fy[i]) / step;
                jac[i][j] = if i == j { 1.0 } else { 0.0 } - h * dfi;
            }
        }
        let delta = solve_small(&jac, &r)?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand: Vec<f64> = y.iter().zip(&delta).map(|(a, d)| a - lambda * d).collect();
            let mut fc = vec![0.0; n];
            let rc = residual(&cand, &mut fc);
            let rcn = inf_norm(&rc);
            if rcn.is_finite() && rcn < rn * (1.0 - 1e-4 * lambda) {
                y = cand;
                r = rc;
                fy = fc;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            if polished {
                return Some(y);
            }
            // No descent possible; accept if already at rounding level.
            return (rn < 1e3 * NEWTON_TOL * inf_norm(&y).max(1.0)).then_some(y);
        }
    }
    (inf_norm(&r) < NEWTON_TOL * inf_norm(&y).max(1.0)).then_some(y)
}

/// Gaussian elimination with partial pivoting for the tiny Newton systems.
fn solve_small(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, bi)| row.iter().copied().chain([*bi]).collect())
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-300 || !m[piv][col].is_finite() {
            return None;
        }
        m.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..=n {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| m[i][k] * x[k]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    Some(x)
}

fn implicit_euler<R: Rhs + ?Sized>(
    rhs: &R,
    x0: &[f64],
    t0: f64,
    outputs: &[f64],
    dt: f64,
) -> Result<Trajectory> {
    let mut t = t0;
    let mut x = x0.to_vec();
    let mut step = 0usize;
    let mut states = Vec::with_capacity(outputs.len());
    for &target in outputs {
        // Steps landing within rounding of the target snap onto it.
        while target - t > 1e-9 * dt {
            let h = if target - t < dt * (1.0 + 1e-9) {
                target - t
            } else {
                dt
            };
            step += 1;
            let next = t + h;
            x = newton_step(rhs, next, &x, h).ok_or_else(|| Error::NewtonDivergence {
                step,
                time: next,
                state: x.clone(),
            })?;
            t = if h == target - t { target } else { next };
        }
        states.push(x.clone());
    }
    Ok(Trajectory {
        times: outputs.to_vec(),
        states,
    })
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn dormand_prince<R: Rhs + ?Sized>(
    rhs: &R,
    x0: &[f64],
    t0: f64,
    outputs: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<Trajectory> {
    let n = x0.len();
    let mut t = t0;
    let mut x = x0.to_vec();
    let mut k = vec![vec![0.0; n]; 7];
    rhs.eval(t, &x, &mut k[0]);
    if k[0].iter().any(|v| !v.is_finite()) {
        return Err(Error::DomainViolation(format!(
            "non-finite derivative at t = {t}"
        )));
    }
    let span = outputs.last().map_or(0.0, |&e| e - t0);
    let mut h = initial_step(&x, &k[0], rtol, atol, span);
    let mut states = Vec::with_capacity(outputs.len());
    let mut steps = 0usize;
    let mut xs = vec![0.0; n];
    for &target in outputs {
        while target > t {
            steps += 1;
            if steps > MAX_STEPS {
                return Err(Error::StepSizeUnderflow { time: t });
            }
            let last = h >= target - t;
            let hh = if last { target - t } else { h };
            for s in 1..7 {
                for i in 0..n {
                    xs[i] = x[i] + hh * (0..s).map(|j| A[s][j] * k[j][i]).sum::<f64>();
                }
                rhs.eval(t + C[s] * hh, &xs, &mut k[s]);
            }
            let x_new: Vec<f64> = (0..n)
                .map(|i| x[i] + hh * (0..7).map(|j| B[j] * k[j][i]).sum::<f64>())
                .collect();
            let mut err = 0.0;
            for i in 0..n {
                let e = hh * (0..7).map(|j| E[j] * k[j][i]).sum::<f64>();
                let sc = atol + rtol * x[i].abs().max(x_new[i].abs());
                err += (e / sc).powi(2);
            }
            let err = (err / n as f64).sqrt();
            if !err.is_finite() {
                h = hh * 0.2;
            } else if err <= 1.0 {
                t = if last { target } else { t + hh };
                x = x_new;
                // FSAL: the last stage is the derivative at the new point.
                k.swap(0, 6);
                let fac = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                if !last {
                    h = hh * fac;
                } else {
                    h = h.max(hh * fac);
                }
            } else {
                h = hh * (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            }
            if h < 1e-14 * t.abs().max(1.0) {
                if !err.is_finite() {
                    return Err(Error::DomainViolation(format!(
                        "non-finite derivative near t = {t}"
                    )));
                }
                return Err(Error::StepSizeUnderflow { time: t });
            }
        }
        states.push(x.clone());
    }
    Ok(Trajectory {
        times: outputs.to_vec(),
        states,
    })
}

fn initial_step(x: &[f64], f: &[f64], rtol: f64, atol: f64, span: f64) -> f64 {
    let n = x.len() as f64;
    let d0 = (x
        .iter()
        .map(|v| (v / (atol + rtol * v.abs())).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let d1 = (x
        .iter()
        .zip(f)
        .map(|(v, d)| (d / (atol + rtol * v.abs())).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let h = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    if span > 0.0 {
        h.min(span)
    } else {
        h
    }
}
