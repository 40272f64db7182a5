//! Quasi-Newton minimization with optional box constraints.
//!
//! A dense inverse-Hessian BFGS with a projected Armijo line search. Variables
//! sitting on a bound with the gradient pointing outward are frozen for the
//! step. Problems here have at most a few dozen unknowns, so the dense
//! update is fine.

/// Stopping rules.
#[derive(Clone, Copy, Debug)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Projected-gradient infinity norm below which we stop.
    pub gtol: f64,
    /// Relative objective change below which (twice in a row) we stop.
    pub ftol: f64,
    /// Largest trial move along any coordinate.
    pub max_step: f64,
    /// Step halvings tried before the line search gives up.
    pub max_backtracks: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            gtol: 1e-6,
            ftol: 1e-12,
            max_step: f64::INFINITY,
            max_backtracks: 60,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Box constraints `lower ≤ x ≤ upper`.
#[derive(Clone, Debug)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn project(&self, x: &mut [f64]) {
        for ((xi, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *xi = xi.clamp(*lo, *hi);
        }
    }
}

fn free_mask(x: &[f64], g: &[f64], bounds: Option<&Bounds>) -> Vec<bool> {
    match bounds {
        None => vec![true; x.len()],
        Some(b) => (0..x.len())
            .map(|i| !((x[i] <= b.lower[i] && g[i] > 0.0) || (x[i] >= b.upper[i] && g[i] < 0.0)))
            .collect(),
    }
}

/// Minimize `f`, which returns the value and gradient or `None` where the
/// objective is undefined. Returns `None` if `f(x0)` is undefined.
pub fn minimize<F>(
    mut f: F,
    x0: &[f64],
    bounds: Option<&Bounds>,
    opts: &BfgsOptions,
) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    run(&mut |x, _| f(x), x0, bounds, opts)
}

/// As [`minimize`], with a cheaper value-only `value` used for line-search
/// trials. The gradient is evaluated only at accepted points.
pub fn minimize_split<F, V>(
    mut f: F,
    mut value: V,
    x0: &[f64],
    bounds: Option<&Bounds>,
    opts: &BfgsOptions,
) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    V: FnMut(&[f64]) -> Option<f64>,
{
    run(
        &mut |x, grad| {
            if grad {
                f(x)
            } else {
                value(x).map(|v| (v, Vec::new()))
            }
        },
        x0,
        bounds,
        opts,
    )
}

type Eval<'a> = dyn FnMut(&[f64], bool) -> Option<(f64, Vec<f64>)> + 'a;

fn run(
    f: &mut Eval<'_>,
    x0: &[f64],
    bounds: Option<&Bounds>,
    opts: &BfgsOptions,
) -> Option<Minimum> {
    let n = x0.len();
    let mut x = x0.to_vec();
    if let Some(b) = bounds {
        b.project(&mut x);
    }
    let (mut fx, mut g) = eval_finite(f, &x, true)?;
    let mut h = identity(n);
    let mut fresh = true;
    let mut small_steps = 0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let free = free_mask(&x, &g, bounds);
        let pg = (0..n)
            .filter(|&i| free[i])
            .map(|i| g[i].abs())
            .fold(0.0, f64::max);
        if pg <= opts.gtol {
            converged = true;
            break;
        }

        let mut d = vec![0.0; n];
        for i in (0..n).filter(|&i| free[i]) {
            d[i] = -(0..n)
                .filter(|&j| free[j])
                .map(|j| h[i][j] * g[j])
                .sum::<f64>();
        }
        if dot(&d, &g) >= 0.0 {
            h = identity(n);
            fresh = true;
            for i in 0..n {
                d[i] = if free[i] { -g[i] } else { 0.0 };
            }
        }
        let dmax = d.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let mut alpha = if fresh { (1.0 / dmax).min(1.0) } else { 1.0 };
        alpha = alpha.min(opts.max_step / dmax);

        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let mut xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            if let Some(b) = bounds {
                b.project(&mut xn);
            }
            let step: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            if step.iter().all(|s| *s == 0.0) {
                break;
            }
            if let Some((fn_, trial)) = eval_finite(f, &xn, false) {
                if fn_ <= fx + 1e-4 * dot(&g, &step) {
                    let full = if trial.len() == n {
                        Some((fn_, trial))
                    } else {
                        eval_finite(f, &xn, true)
                    };
                    if let Some((fn_, gn)) = full {
                        accepted = Some((xn, fn_, gn, step));
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }

        let Some((xn, fn_, gn, s)) = accepted else {
            if fresh {
                break;
            }
            h = identity(n);
            fresh = true;
            continue;
        };

        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if fresh {
                let scale = sy / dot(&y, &y);
                h = identity(n);
                for (i, row) in h.iter_mut().enumerate() {
                    row[i] = scale;
                }
            }
            bfgs_update(&mut h, &s, &y, sy);
            fresh = false;
        }

        let rel = (fx - fn_).abs() / fx.abs().max(1.0);
        small_steps = if rel <= opts.ftol { small_steps + 1 } else { 0 };
        x = xn;
        fx = fn_;
        g = gn;
        if small_steps >= 2 {
            converged = true;
            break;
        }
    }

    Some(Minimum {
        x,
        value: fx,
        iterations,
        converged,
    })
}

fn eval_finite(f: &mut Eval<'_>, x: &[f64], grad: bool) -> Option<(f64, Vec<f64>)> {
    let (v, g) = f(x, grad)?;
    (v.is_finite() && g.iter().all(|gi| gi.is_finite())).then_some((v, g))
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
        }
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Central-difference gradient with per-coordinate steps.
pub fn numeric_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], steps: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + steps[i];
            let up = f(&xp);
            xp[i] = x[i] - steps[i];
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * steps[i])
        })
        .collect()
}
