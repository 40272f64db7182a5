//! Closed-form inference for parametrizations that are affine in `θ`.
//!
//! With `f_i(x; θ) = g(x)ᵀθ` evaluated on the smoothed states, the
//! derivative-constrained likelihood and a Gaussian prior `N(0, Λ⁻¹)` give
//!
//! ```text
//! Σ = (Gᵀ Rdd G + Λ)⁻¹
//! μ = Σ Gᵀ Rdd d̂
//! ```
//!
//! which is also the minimizer of
//! `J(θ) = ½ (Gθ − d̂)ᵀ Rdd (Gθ − d̂) + ½ θᵀ Λ θ`.

use std::fmt;
use std::sync::Arc;

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, from_rows, mat_vec, symmetrize, to_rows, Weighting};

/// Reciprocal condition below which the normal matrix counts as singular.
const SINGULAR_RCOND: f64 = 1e-14;

/// Default sequential-threshold cut-off.
pub const STRIDGE_THRESHOLD: f64 = 0.1;
/// Prior precision on terms kept by thresholding.
pub const LAMBDA_ACTIVE: f64 = 1e-7;
/// Prior precision on terms removed by thresholding.
pub const LAMBDA_SPARSE: f64 = 1e7;

type TermFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// One candidate function `g_j : Rᴺ → R`.
#[derive(Clone)]
pub enum Term {
    /// `∏ x_i^{p_i}`; all-zero powers is the constant term.
    Monomial {
        name: String,
        powers: Vec<u32>,
    },
    Custom {
        name: String,
        f: TermFn,
    },
}

impl Term {
    pub fn name(&self) -> &str {
        match self {
            Term::Monomial { name, .. } | Term::Custom { name, .. } => name,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Term::Monomial { powers, .. } => powers
                .iter()
                .zip(x)
                .map(|(&p, &xi)| xi.powi(p as i32))
                .product(),
            Term::Custom { f, .. } => f(x),
        }
    }
}

impl fmt::Debug for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Monomial { name, powers } => write!(f, "Monomial({name}, {powers:?})"),
            Term::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

fn parse_monomial(name: &str, arity: usize) -> Result<Vec<u32>> {
    let bad = || Error::InvalidArgument(format!("cannot parse dictionary term `{name}`"));
    let mut powers = vec![0u32; arity];
    let trimmed = name.trim();
    if trimmed == "1" {
        return Ok(powers);
    }
    for factor in trimmed.split('*') {
        let factor = factor.trim();
        let (var, pow) = match factor.split_once('^') {
            Some((v, p)) => (v.trim(), p.trim().parse::<u32>().map_err(|_| bad())?),
            None => (factor, 1),
        };
        let idx: usize = var
            .strip_prefix('x')
            .ok_or_else(bad)?
            .parse()
            .map_err(|_| bad())?;
        if idx == 0 || idx > arity {
            return Err(Error::InvalidArgument(format!(
                "term `{name}` refers to x{idx} but the state has {arity} components"
            )));
        }
        powers[idx - 1] += pow;
    }
    Ok(powers)
}

/// An ordered list of uniquely named candidate functions.
#[derive(Clone, Debug)]
pub struct Dictionary {
    arity: usize,
    terms: Vec<Term>,
}

impl Dictionary {
    pub fn new(arity: usize) -> Self {
        Self {
            arity,
            terms: Vec::new(),
        }
    }

    /// Monomials written as `1`, `x1`, `x1*x2`, `x2^2`, ...
    pub fn monomials(arity: usize, names: &[&str]) -> Result<Self> {
        let mut d = Self::new(arity);
        for name in names {
            d.push(Term::Monomial {
                name: name.trim().to_string(),
                powers: parse_monomial(name, arity)?,
            })?;
        }
        Ok(d)
    }

    pub fn push_custom<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        self.push(Term::Custom {
            name: name.to_string(),
            f: Arc::new(f),
        })
    }

    pub fn push(&mut self, term: Term) -> Result<()> {
        if self.terms.iter().any(|t| t.name() == term.name()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate dictionary term `{}`",
                term.name()
            )));
        }
        self.terms.push(term);
        Ok(())
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.name().to_string()).collect()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.terms.iter().map(|t| t.eval(x)).collect()
    }

    /// `G[k][j] = g_j(x(t_k))` for states given row by row.
    pub fn design_matrix(&self, states: &[Vec<f64>]) -> Result<Mat<f64>> {
        let mut g = Mat::zeros(states.len(), self.terms.len());
        for (k, row) in states.iter().enumerate() {
            if row.len() != self.arity {
                return Err(Error::ShapeMismatch {
                    expected: self.arity,
                    got: row.len(),
                });
            }
            for (j, term) in self.terms.iter().enumerate() {
                let v = term.eval(row);
                if !v.is_finite() {
                    return Err(Error::NonFiniteTerm {
                        term: term.name().to_string(),
                        row: k,
                    });
                }
                g[(k, j)] = v;
            }
        }
        Ok(g)
    }
}

/// Exact Gaussian posterior `N(μ, Σ)`.
#[derive(Clone, Debug)]
pub struct GaussianPosterior {
    pub term_names: Vec<String>,
    pub mean: Vec<f64>,
    pub covariance: Mat<f64>,
    /// Diagonal prior precision used.
    pub lambda: Vec<f64>,
    pub pattern: Option<SparsityPattern>,
}

impl GaussianPosterior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std_devs(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.covariance[(i, i)].max(0.0).sqrt())
            .collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.covariance[(i, i)]).sum()
    }

    pub fn to_record(&self, eps: Option<(f64, f64)>) -> PosteriorRecord {
        PosteriorRecord {
            term_names: self.term_names.clone(),
            mean: self.mean.clone(),
            covariance: to_rows(self.covariance.as_ref()),
            lambda_active: self.pattern.as_ref().map(|p| p.lambda_active),
            lambda_sparse: self.pattern.as_ref().map(|p| p.lambda_sparse),
            active: self.pattern.as_ref().map(|p| p.active.clone()),
            eps1: eps.map(|e| e.0),
            eps2: eps.map(|e| e.1),
        }
    }

    pub fn from_record(rec: &PosteriorRecord) -> Result<Self> {
        let p = rec.mean.len();
        if rec.term_names.len() != p
            || rec.covariance.len() != p
            || rec.covariance.iter().any(|r| r.len() != p)
        {
            return Err(Error::Format("posterior record dimensions disagree".into()));
        }
        let pattern = match (&rec.active, rec.lambda_active, rec.lambda_sparse) {
            (Some(active), Some(a), Some(s)) => {
                Some(SparsityPattern::new(p, active.clone(), a, s)?)
            }
            _ => None,
        };
        let lambda = match &pattern {
            Some(pat) => pat.lambda_vector(),
            None => vec![0.0; p],
        };
        Ok(Self {
            term_names: rec.term_names.clone(),
            mean: rec.mean.clone(),
            covariance: from_rows(&rec.covariance),
            lambda,
            pattern,
        })
    }
}

/// JSON form of a posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRecord {
    pub term_names: Vec<String>,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub lambda_active: Option<f64>,
    pub lambda_sparse: Option<f64>,
    #[serde(default)]
    pub active: Option<Vec<usize>>,
    pub eps1: Option<f64>,
    pub eps2: Option<f64>,
}

/// Terms kept by thresholding and the two prior precisions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityPattern {
    pub p: usize,
    pub active: Vec<usize>,
    pub lambda_active: f64,
    pub lambda_sparse: f64,
}

impl SparsityPattern {
    pub fn new(
        p: usize,
        mut active: Vec<usize>,
        lambda_active: f64,
        lambda_sparse: f64,
    ) -> Result<Self> {
        active.sort_unstable();
        active.dedup();
        if active.iter().any(|&j| j >= p) {
            return Err(Error::InvalidArgument(format!(
                "active index out of range for {p} terms"
            )));
        }
        if !(lambda_sparse > 1.0 && 1.0 > lambda_active && lambda_active > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need lambda_sparse > 1 > lambda_active > 0, got {lambda_sparse} and {lambda_active}"
            )));
        }
        Ok(Self {
            p,
            active,
            lambda_active,
            lambda_sparse,
        })
    }

    pub fn is_active(&self, j: usize) -> bool {
        self.active.binary_search(&j).is_ok()
    }

    pub fn lambda_vector(&self) -> Vec<f64> {
        (0..self.p)
            .map(|j| {
                if self.is_active(j) {
                    self.lambda_active
                } else {
                    self.lambda_sparse
                }
            })
            .collect()
    }
}

fn check_shapes(g: MatRef<'_, f64>, weight: &dyn Weighting, d_hat: &[f64]) -> Result<()> {
    if d_hat.len() != g.nrows() {
        return Err(Error::ShapeMismatch {
            expected: g.nrows(),
            got: d_hat.len(),
        });
    }
    if weight.dim() != g.nrows() {
        return Err(Error::ShapeMismatch {
            expected: g.nrows(),
            got: weight.dim(),
        });
    }
    Ok(())
}

/// Solve the normal equations `N μ = b` and return `(μ, N⁻¹)`.
///
/// The matrix is Jacobi-scaled first so the singularity test is
/// independent of the units of each column.
fn solve_normal(normal: &Mat<f64>, rhs: &[f64]) -> Result<(Vec<f64>, Mat<f64>)> {
    let p = normal.nrows();
    let scale: Vec<f64> = (0..p).map(|i| normal[(i, i)]).collect();
    if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::SingularSystem);
    }
    let inv_sqrt: Vec<f64> = scale.iter().map(|s| 1.0 / s.sqrt()).collect();
    let scaled = Mat::from_fn(p, p, |i, j| normal[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
    let factor = cholesky(scaled.as_ref()).ok_or(Error::SingularSystem)?;
    if factor.condition_estimate() * SINGULAR_RCOND > 1.0 {
        return Err(Error::SingularSystem);
    }
    let srhs: Vec<f64> = rhs.iter().zip(&inv_sqrt).map(|(b, s)| b * s).collect();
    let y = factor.solve_vec(&srhs);
    let mean: Vec<f64> = y.iter().zip(&inv_sqrt).map(|(v, s)| v * s).collect();
    let sinv = factor.inverse();
    let mut cov = Mat::from_fn(p, p, |i, j| sinv[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
    symmetrize(&mut cov);
    Ok((mean, cov))
}

/// Posterior for a single equation with diagonal prior precision `lambda`.
pub fn posterior(
    g: MatRef<'_, f64>,
    weight: &dyn Weighting,
    d_hat: &[f64],
    lambda: &[f64],
    term_names: Vec<String>,
) -> Result<GaussianPosterior> {
    check_shapes(g, weight, d_hat)?;
    let p = g.ncols();
    if lambda.len() != p || term_names.len() != p {
        return Err(Error::ShapeMismatch {
            expected: p,
            got: lambda.len().min(term_names.len()),
        });
    }
    if lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::InvalidArgument(
            "prior precisions must be >= 0".into(),
        ));
    }
    let mut normal = weight.weighted_gram(g);
    for (j, l) in lambda.iter().enumerate() {
        normal[(j, j)] += l;
    }
    let rhs = weight.weighted_rhs(g, d_hat);
    let (mean, covariance) = solve_normal(&normal, &rhs)?;
    Ok(GaussianPosterior {
        term_names,
        mean,
        covariance,
        lambda: lambda.to_vec(),
        pattern: None,
    })
}

/// Value and gradient of `J(θ) = ½ (Gθ − d̂)ᵀ W (Gθ − d̂) + ½ θᵀΛθ`.
pub fn map_objective(
    g: MatRef<'_, f64>,
    weight: &dyn Weighting,
    d_hat: &[f64],
    lambda: &[f64],
    theta: &[f64],
) -> (f64, Vec<f64>) {
    let gt = mat_vec(g, theta);
    let r: Vec<f64> = gt.iter().zip(d_hat).map(|(a, b)| a - b).collect();
    let value = 0.5 * weight.quad_form(&r)
        + 0.5
            * theta
                .iter()
                .zip(lambda)
                .map(|(t, l)| l * t * t)
                .sum::<f64>();
    let grad = weight
        .weighted_rhs(g, &r)
        .iter()
        .zip(theta.iter().zip(lambda))
        .map(|(gf, (t, l))| gf + l * t)
        .collect();
    (value, grad)
}

/// Sequential threshold ridge regression with unit ridge weight:
/// repeatedly solve `min ‖G_a θ − d̂‖² + ‖θ‖²` on the active columns and
/// drop coefficients below `threshold` until the set stops changing.
pub fn stridge(
    g: MatRef<'_, f64>,
    d_hat: &[f64],
    threshold: f64,
    max_iter: usize,
) -> Result<Vec<usize>> {
    if d_hat.len() != g.nrows() {
        return Err(Error::ShapeMismatch {
            expected: g.nrows(),
            got: d_hat.len(),
        });
    }
    if !(threshold >= 0.0 && threshold.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be >= 0, got {threshold}"
        )));
    }
    let mut active: Vec<usize> = (0..g.ncols()).collect();
    for _ in 0..max_iter.max(1) {
        let theta = ridge(g, d_hat, &active)?;
        let kept: Vec<usize> = active
            .iter()
            .zip(&theta)
            .filter(|(_, t)| t.abs() >= threshold)
            .map(|(&j, _)| j)
            .collect();
        if kept.is_empty() {
            return Err(Error::AllTermsPruned { threshold });
        }
        if kept == active {
            break;
        }
        active = kept;
    }
    Ok(active)
}

fn ridge(g: MatRef<'_, f64>, d_hat: &[f64], cols: &[usize]) -> Result<Vec<f64>> {
    let sub = Mat::from_fn(g.nrows(), cols.len(), |i, j| g[(i, cols[j])]);
    let mut normal = sub.transpose() * &sub;
    for j in 0..cols.len() {
        normal[(j, j)] += 1.0;
    }
    let rhs = mat_vec(sub.transpose(), d_hat);
    let factor = cholesky(normal.as_ref()).ok_or(Error::SingularSystem)?;
    Ok(factor.solve_vec(&rhs))
}

/// Posterior with `λᵃ` on active and `λˢ` on sparsified terms. All terms
/// stay in the output.
pub fn sparse_posterior(
    g: MatRef<'_, f64>,
    weight: &dyn Weighting,
    d_hat: &[f64],
    pattern: &SparsityPattern,
    term_names: Vec<String>,
) -> Result<GaussianPosterior> {
    if pattern.p != g.ncols() {
        return Err(Error::ShapeMismatch {
            expected: g.ncols(),
            got: pattern.p,
        });
    }
    let mut post = posterior(g, weight, d_hat, &pattern.lambda_vector(), term_names)?;
    post.pattern = Some(pattern.clone());
    Ok(post)
}

/// One equation's contribution to a joint posterior.
pub struct LinearBlock<'a> {
    pub design: MatRef<'a, f64>,
    pub weight: &'a dyn Weighting,
    pub d_hat: &'a [f64],
    /// Column `j` of `design` multiplies union parameter `index_map[j]`.
    pub index_map: &'a [usize],
}

/// Posterior over the union of the blocks' parameters.
///
/// Normal matrix `Σ_b Eᵀ Gᵀ W G E + Λ` and right-hand side `Σ_b Eᵀ Gᵀ W d̂`,
/// accumulated in block order.
pub fn joint_posterior(
    blocks: &[LinearBlock<'_>],
    lambda_union: &[f64],
    term_names: Vec<String>,
) -> Result<GaussianPosterior> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument(
            "joint posterior needs at least one block".into(),
        ));
    }
    let q = lambda_union.len();
    if term_names.len() != q {
        return Err(Error::ShapeMismatch {
            expected: q,
            got: term_names.len(),
        });
    }
    let mut normal = Mat::<f64>::zeros(q, q);
    let mut rhs = vec![0.0; q];
    for (b, block) in blocks.iter().enumerate() {
        check_shapes(block.design, block.weight, block.d_hat)?;
        let map = block.index_map;
        if map.len() != block.design.ncols() {
            return Err(Error::IndexMapMismatch(format!(
                "block {b} maps {} columns but its design has {}",
                map.len(),
                block.design.ncols()
            )));
        }
        if let Some(&bad) = map.iter().find(|&&i| i >= q) {
            return Err(Error::IndexMapMismatch(format!(
                "block {b} maps to index {bad} outside a union of size {q}"
            )));
        }
        let mut seen = map.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != map.len() {
            return Err(Error::IndexMapMismatch(format!(
                "block {b} maps two columns to one index"
            )));
        }
        let gram = block.weight.weighted_gram(block.design);
        let r = block.weight.weighted_rhs(block.design, block.d_hat);
        for (a, &ia) in map.iter().enumerate() {
            rhs[ia] += r[a];
            for (c, &ic) in map.iter().enumerate() {
                normal[(ia, ic)] += gram[(a, c)];
            }
        }
    }
    for (j, l) in lambda_union.iter().enumerate() {
        normal[(j, j)] += l;
    }
    let (mean, covariance) = solve_normal(&normal, &rhs)?;
    Ok(GaussianPosterior {
        term_names,
        mean,
        covariance,
        lambda: lambda_union.to_vec(),
        pattern: None,
    })
}

/// Relative error of the means and relative spread, both in percent:
/// `ε₁ = 100 √(Σ‖θ* − μ‖² / Σ‖θ*‖²)`, `ε₂ = 100 √(Σ tr Σ / Σ‖θ*‖²)`.
pub fn metrics_eps(posteriors: &[GaussianPosterior], truth: &[Vec<f64>]) -> Result<(f64, f64)> {
    if posteriors.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            expected: truth.len(),
            got: posteriors.len(),
        });
    }
    let (mut err, mut spread, mut norm) = (0.0, 0.0, 0.0);
    for (post, t) in posteriors.iter().zip(truth) {
        if post.dim() != t.len() {
            return Err(Error::ShapeMismatch {
                expected: t.len(),
                got: post.dim(),
            });
        }
        err += post
            .mean
            .iter()
            .zip(t)
            .map(|(m, x)| (x - m).powi(2))
            .sum::<f64>();
        spread += post.trace();
        norm += t.iter().map(|x| x * x).sum::<f64>();
    }
    if norm == 0.0 {
        return Err(Error::ZeroTruthNorm);
    }
    Ok((100.0 * (err / norm).sqrt(), 100.0 * (spread / norm).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use faer::linalg::solvers::{DenseSolveCore, Solve};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("t{j}")).collect()
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
        let b = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut a = b.transpose() * &b;
        for i in 0..n {
            a[(i, i)] += 0.5;
        }
        a
    }

    #[test]
    fn design_matrix_examples() {
        let d = Dictionary::monomials(2, &["x1", "x1*x2"]).unwrap();
        let g = d.design_matrix(&[vec![2.0, 3.0]]).unwrap();
        assert_eq!((g[(0, 0)], g[(0, 1)]), (2.0, 6.0));
        let d6 = Dictionary::monomials(2, &["1", "x1", "x2", "x1^2", "x2^2", "x1*x2"]).unwrap();
        let g6 = d6.design_matrix(&[vec![1.0, 1.0]]).unwrap();
        assert!((0..6).all(|j| g6[(0, j)] == 1.0));
        let g6b = d6.design_matrix(&[vec![2.0, -3.0]]).unwrap();
        let want = [1.0, 2.0, -3.0, 4.0, 9.0, -6.0];
        assert!((0..6).all(|j| g6b[(0, j)] == want[j]));
    }

    #[test]
    fn design_matrix_reports_non_finite_term() {
        let mut d = Dictionary::monomials(1, &["x1"]).unwrap();
        d.push_custom("log", |x| x[0].ln()).unwrap();
        let err = d.design_matrix(&[vec![1.0], vec![-1.0]]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteTerm { ref term, row: 1 } if term == "log"));
    }

    #[test]
    fn dictionary_rejects_duplicates_and_bad_names() {
        assert!(Dictionary::monomials(2, &["x1", "x1"]).is_err());
        assert!(Dictionary::monomials(2, &["x3"]).is_err());
        assert!(Dictionary::monomials(2, &["y1"]).is_err());
    }

    #[test]
    fn identity_design_returns_data() {
        let k = 4;
        let g = Mat::<f64>::identity(k, k);
        let w = Mat::<f64>::identity(k, k);
        let d = vec![0.5, -1.0, 2.0, 3.0];
        let post = posterior(g.as_ref(), &w, &d, &[0.0; 4], names(4)).unwrap();
        assert_eq!(post.mean, d);
        assert!(
            max_abs_diff(
                post.covariance.as_ref(),
                Mat::<f64>::identity(k, k).as_ref()
            ) < 1e-15
        );
    }

    #[test]
    fn matches_generalized_least_squares_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (k, p) = (30, 3);
        let g = Mat::from_fn(k, p, |_, _| rng.random_range(-2.0..2.0));
        let d: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = random_spd(k, &mut rng);
        let post = posterior(g.as_ref(), &w, &d, &[0.0; 3], names(3)).unwrap();
        // Oracle: LU solve of the unscaled normal equations.
        let normal = g.transpose() * &w * &g;
        let rhs = g.transpose() * &w * crate::linalg::col_matrix(&d);
        let mu = normal.partial_piv_lu().solve(rhs.as_ref());
        for j in 0..p {
            assert!((post.mean[j] - mu[(j, 0)]).abs() < 1e-8);
        }
        let inv = normal.partial_piv_lu().inverse();
        assert!(max_abs_diff(post.covariance.as_ref(), inv.as_ref()) < 1e-8);
    }

    #[test]
    fn rank_deficient_without_prior_is_singular() {
        let g = Mat::from_fn(5, 2, |i, j| if j == 0 { i as f64 } else { 2.0 * i as f64 });
        let w = Mat::<f64>::identity(5, 5);
        let d = vec![1.0; 5];
        let err = posterior(g.as_ref(), &w, &d, &[0.0, 0.0], names(2)).unwrap_err();
        assert!(matches!(err, Error::SingularSystem));
        assert!(posterior(g.as_ref(), &w, &d, &[1e-3, 1e-3], names(2)).is_ok());
    }

    #[test]
    fn square_design_reduces_to_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Mat::from_fn(4, 4, |i, j| {
            rng.random_range(-1.0..1.0) + if i == j { 3.0 } else { 0.0 }
        });
        let w = Mat::<f64>::identity(4, 4);
        let d = vec![1.0, -2.0, 0.5, 0.0];
        let post = posterior(g.as_ref(), &w, &d, &[0.0; 4], names(4)).unwrap();
        let back = mat_vec(g.as_ref(), &post.mean);
        for (a, b) in back.iter().zip(&d) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn mean_minimizes_map_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (k, p) = (40, 4);
        let g = Mat::from_fn(k, p, |_, _| rng.random_range(-1.0..1.0));
        let d: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = random_spd(k, &mut rng);
        let lambda = [0.0, 0.1, 1.0, 10.0];
        let post = posterior(g.as_ref(), &w, &d, &lambda, names(p)).unwrap();
        let (_, grad) = map_objective(g.as_ref(), &w, &d, &lambda, &post.mean);
        let scale = d.iter().map(|x| x.abs()).fold(1.0, f64::max);
        assert!(grad.iter().all(|x| x.abs() <= 1e-6 * scale), "{grad:?}");
    }

    #[test]
    fn stridge_recovers_synthetic_sparse_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Mat::from_fn(50, 3, |_, _| rng.random_range(-1.0..1.0));
        let d = mat_vec(g.as_ref(), &[2.0, 0.0, 0.0]);
        assert_eq!(stridge(g.as_ref(), &d, 0.5, 10).unwrap(), vec![0]);
        assert_eq!(stridge(g.as_ref(), &d, 0.0, 10).unwrap(), vec![0, 1, 2]);
        let err = stridge(g.as_ref(), &d, 100.0, 10).unwrap_err();
        assert!(matches!(err, Error::AllTermsPruned { .. }));
    }

    #[test]
    fn stridge_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Mat::from_fn(60, 6, |_, _| rng.random_range(-1.0..1.0));
        let d: Vec<f64> = mat_vec(g.as_ref(), &[1.0, 0.0, -0.7, 0.0, 0.05, 0.0])
            .iter()
            .map(|v| v + rng.random_range(-0.01..0.01))
            .collect();
        let first = stridge(g.as_ref(), &d, 0.1, 20).unwrap();
        let sub = Mat::from_fn(60, first.len(), |i, j| g[(i, first[j])]);
        let second = stridge(sub.as_ref(), &d, 0.1, 20).unwrap();
        assert_eq!(second, (0..first.len()).collect::<Vec<_>>());
    }

    #[test]
    fn sparse_posterior_with_all_active_matches_case_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = Mat::from_fn(25, 3, |_, _| rng.random_range(-1.0..1.0));
        let d: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = random_spd(25, &mut rng);
        let a = posterior(g.as_ref(), &w, &d, &[0.0; 3], names(3)).unwrap();
        let pat = SparsityPattern::new(3, vec![0, 1, 2], 1e-14, 1e7).unwrap();
        let b = sparse_posterior(g.as_ref(), &w, &d, &pat, names(3)).unwrap();
        for j in 0..3 {
            assert!((a.mean[j] - b.mean[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn sparsified_mean_obeys_shrinkage_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Mat::from_fn(30, 4, |_, _| rng.random_range(-1.0..1.0));
        let d: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
        let w = random_spd(30, &mut rng);
        let pat = SparsityPattern::new(4, vec![0, 2], LAMBDA_ACTIVE, LAMBDA_SPARSE).unwrap();
        let post = sparse_posterior(g.as_ref(), &w, &d, &pat, names(4)).unwrap();
        let bound = w
            .weighted_rhs(g.as_ref(), &d)
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
            / LAMBDA_SPARSE;
        for j in [1, 3] {
            assert!(
                post.mean[j].abs() <= bound * (1.0 + 1e-9),
                "{} > {bound}",
                post.mean[j]
            );
        }
    }

    #[test]
    fn pattern_enforces_lambda_ordering() {
        assert!(SparsityPattern::new(3, vec![0], 2.0, 1e7).is_err());
        assert!(SparsityPattern::new(3, vec![0], 1e-7, 0.5).is_err());
        assert!(SparsityPattern::new(3, vec![5], 1e-7, 1e7).is_err());
    }

    #[test]
    fn joint_of_one_block_equals_single_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = Mat::from_fn(20, 2, |_, _| rng.random_range(-1.0..1.0));
        let d: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = random_spd(20, &mut rng);
        let single = posterior(g.as_ref(), &w, &d, &[0.0; 2], names(2)).unwrap();
        let block = LinearBlock {
            design: g.as_ref(),
            weight: &w,
            d_hat: &d,
            index_map: &[0, 1],
        };
        let joint = joint_posterior(&[block], &[0.0; 2], names(2)).unwrap();
        assert_eq!(single.mean, joint.mean);
        assert!(max_abs_diff(single.covariance.as_ref(), joint.covariance.as_ref()) == 0.0);
    }

    #[test]
    fn duplicated_block_halves_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Mat::from_fn(20, 2, |_, _| rng.random_range(-1.0..1.0));
        let d: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = random_spd(20, &mut rng);
        let single = posterior(g.as_ref(), &w, &d, &[0.0; 2], names(2)).unwrap();
        let mk = || LinearBlock {
            design: g.as_ref(),
            weight: &w,
            d_hat: &d,
            index_map: &[0, 1],
        };
        let joint = joint_posterior(&[mk(), mk()], &[0.0; 2], names(2)).unwrap();
        for j in 0..2 {
            assert!((single.mean[j] - joint.mean[j]).abs() < 1e-10);
            for i in 0..2 {
                assert!((0.5 * single.covariance[(i, j)] - joint.covariance[(i, j)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn joint_rejects_bad_maps() {
        let g = Mat::<f64>::identity(3, 2);
        let w = Mat::<f64>::identity(3, 3);
        let d = [1.0, 2.0, 3.0];
        let bad = |map: &'static [usize]| LinearBlock {
            design: g.as_ref(),
            weight: &w,
            d_hat: &d,
            index_map: map,
        };
        for map in [&[0usize][..], &[0, 5], &[1, 1]] {
            let err = joint_posterior(&[bad(map)], &[0.0; 2], names(2)).unwrap_err();
            assert!(matches!(err, Error::IndexMapMismatch(_)));
        }
    }

    #[test]
    fn shared_parameter_blocks() {
        // Two equations sharing the middle parameter of a 3-vector.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let theta = [0.7, -1.2, 2.0];
        let g1 = Mat::from_fn(15, 2, |_, _| rng.random_range(-1.0..1.0));
        let g2 = Mat::from_fn(15, 2, |_, _| rng.random_range(-1.0..1.0));
        let d1 = mat_vec(g1.as_ref(), &[theta[0], theta[1]]);
        let d2 = mat_vec(g2.as_ref(), &[theta[1], theta[2]]);
        let w = Mat::<f64>::identity(15, 15);
        let blocks = [
            LinearBlock {
                design: g1.as_ref(),
                weight: &w,
                d_hat: &d1,
                index_map: &[0, 1],
            },
            LinearBlock {
                design: g2.as_ref(),
                weight: &w,
                d_hat: &d2,
                index_map: &[1, 2],
            },
        ];
        let post = joint_posterior(&blocks, &[0.0; 3], names(3)).unwrap();
        for j in 0..3 {
            assert!((post.mean[j] - theta[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn eps_examples() {
        let mk = |mean: Vec<f64>| GaussianPosterior {
            term_names: names(mean.len()),
            covariance: Mat::zeros(mean.len(), mean.len()),
            lambda: vec![0.0; mean.len()],
            mean,
            pattern: None,
        };
        let (e1, e2) = metrics_eps(&[mk(vec![3.0, 4.0])], &[vec![3.0, 4.0]]).unwrap();
        assert_eq!((e1, e2), (0.0, 0.0));
        let (e1, _) = metrics_eps(&[mk(vec![3.3, 4.4])], &[vec![3.0, 4.0]]).unwrap();
        assert!((e1 - 10.0).abs() < 1e-12);
        assert!(matches!(
            metrics_eps(&[mk(vec![1.0])], &[vec![0.0]]),
            Err(Error::ZeroTruthNorm)
        ));
    }

    #[test]
    fn record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Mat::from_fn(10, 3, |_, _| rng.random_range(-1.0..1.0));
        let d: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Mat::<f64>::identity(10, 10);
        let pat = SparsityPattern::new(3, vec![1], LAMBDA_ACTIVE, LAMBDA_SPARSE).unwrap();
        let post = sparse_posterior(g.as_ref(), &w, &d, &pat, names(3)).unwrap();
        let rec = post.to_record(Some((1.0, 2.0)));
        let json = serde_json::to_string(&rec).unwrap();
        let back: PosteriorRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
        let again = GaussianPosterior::from_record(&back).unwrap();
        assert_eq!(again.mean, post.mean);
        assert_eq!(again.pattern, post.pattern);
    }

    proptest! {
        #[test]
        fn posterior_is_permutation_equivariant(seed in 0u64..1000, shift in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (k, p) = (12, 3);
            let g = Mat::from_fn(k, p, |_, _| rng.random_range(-1.0..1.0));
            let d: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = random_spd(k, &mut rng);
            let lambda: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..1.0)).collect();
            let perm: Vec<usize> = (0..p).map(|j| (j + shift) % p).collect();
            let gp = Mat::from_fn(k, p, |i, j| g[(i, perm[j])]);
            let lp: Vec<f64> = perm.iter().map(|&j| lambda[j]).collect();
            let a = posterior(g.as_ref(), &w, &d, &lambda, names(p)).unwrap();
            let b = posterior(gp.as_ref(), &w, &d, &lp, names(p)).unwrap();
            for j in 0..p {
                prop_assert!((b.mean[j] - a.mean[perm[j]]).abs() < 1e-9);
                for i in 0..p {
                    prop_assert!((b.covariance[(i, j)] - a.covariance[(perm[i], perm[j])]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn posterior_covariance_is_symmetric_positive(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Mat::from_fn(10, 3, |_, _| rng.random_range(-1.0..1.0));
            let d: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = random_spd(10, &mut rng);
            let post = posterior(g.as_ref(), &w, &d, &[0.0; 3], names(3)).unwrap();
            let ev = post.covariance.self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
            prop_assert!(ev.iter().all(|&e| e > 0.0));
            prop_assert!(max_abs_diff(post.covariance.as_ref(), post.covariance.transpose()) == 0.0);
        }
    }
}
