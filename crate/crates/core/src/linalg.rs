//! Dense linear-algebra helpers on top of `faer`.
//!
//! Every Cholesky factorization in the crate goes through [`jittered_cholesky`]
//! so that the jitter policy lives in exactly one place.

use faer::linalg::solvers::{DenseSolveCore, Llt};
use faer::linalg::triangular_solve::{
    solve_lower_triangular_in_place, solve_upper_triangular_in_place,
};
use faer::prelude::*;
use faer::{Mat, MatRef, Par, Side};

use crate::error::{Error, Result};

/// Relative jitter added before the first factorization attempt.
pub const JITTER_START: f64 = 1e-10;
/// Largest relative jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-6;

/// A Cholesky factorization together with the absolute jitter that made it succeed.
#[derive(Clone, Debug)]
pub struct Factor {
    llt: Llt<f64>,
    jitter: f64,
}

impl Factor {
    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn lower(&self) -> MatRef<'_, f64> {
        self.llt.L()
    }

    /// `A⁻¹ B`.
    pub fn solve(&self, rhs: MatRef<'_, f64>) -> Mat<f64> {
        self.llt.solve(rhs)
    }

    pub fn solve_vec(&self, rhs: &[f64]) -> Vec<f64> {
        let x = self.llt.solve(col_matrix(rhs).as_ref());
        x.col_as_slice(0).to_vec()
    }

    /// `L⁻¹ B`, the half-solve used for quadratic forms and weighted Gram matrices.
    pub fn half_solve(&self, rhs: MatRef<'_, f64>) -> Mat<f64> {
        let mut out = rhs.to_owned();
        solve_lower_triangular_in_place(self.llt.L(), out.as_mut(), Par::Seq);
        out
    }

    pub fn half_solve_vec(&self, rhs: &[f64]) -> Vec<f64> {
        let out = self.half_solve(col_matrix(rhs).as_ref());
        out.col_as_slice(0).to_vec()
    }

    /// `L⁻ᵀ b`; maps white noise to a draw with covariance `A⁻¹`.
    pub fn half_solve_transpose_vec(&self, rhs: &[f64]) -> Vec<f64> {
        let mut out = col_matrix(rhs);
        solve_upper_triangular_in_place(self.llt.L().transpose(), out.as_mut(), Par::Seq);
        out.col_as_slice(0).to_vec()
    }

    pub fn inverse(&self) -> Mat<f64> {
        let mut inv = self.llt.inverse();
        symmetrize(&mut inv);
        inv
    }

    /// `log |A|` of the jittered matrix.
    pub fn log_det(&self) -> f64 {
        let l = self.llt.L();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// Cheap condition estimate `(max Lᵢᵢ / min Lᵢᵢ)²` from the factor diagonal.
    pub fn condition_estimate(&self) -> f64 {
        let l = self.llt.L();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
        for i in 0..l.nrows() {
            let d = l[(i, i)];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        (hi / lo).powi(2)
    }
}

/// Cholesky with escalating diagonal jitter.
///
/// Starts at `1e-10 · max diag` and multiplies by ten on failure up to
/// `1e-6 · max diag`.
pub fn jittered_cholesky(a: MatRef<'_, f64>) -> Result<Factor> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::InvalidArgument(format!(
            "cholesky needs a non-empty square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let scale = (0..n).map(|i| a[(i, i)]).fold(0.0_f64, f64::max);
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::NotPositiveDefinite { jitter: 0.0 });
    }
    let mut rel = JITTER_START;
    loop {
        let jitter = rel * scale;
        let mut m = a.to_owned();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Ok(llt) = m.llt(Side::Lower) {
            return Ok(Factor { llt, jitter });
        }
        if rel >= JITTER_MAX * (1.0 - 1e-9) {
            return Err(Error::NotPositiveDefinite { jitter });
        }
        rel *= 10.0;
    }
}

/// Plain Cholesky without jitter, `None` when the matrix is not numerically SPD.
pub fn cholesky(a: MatRef<'_, f64>) -> Option<Factor> {
    a.llt(Side::Lower)
        .ok()
        .map(|llt| Factor { llt, jitter: 0.0 })
}

pub fn col_matrix(v: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

pub fn symmetrize(m: &mut Mat<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn mat_vec(m: MatRef<'_, f64>, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.ncols(), v.len());
    let out = m * col_matrix(v);
    out.col_as_slice(0).to_vec()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_abs_diff(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    let mut m = 0.0_f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max((a[(i, j)] - b[(i, j)]).abs());
        }
    }
    m
}

/// Row-major nested vectors to a dense matrix.
pub fn from_rows(rows: &[Vec<f64>]) -> Mat<f64> {
    let ncols = rows.first().map_or(0, Vec::len);
    Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

pub fn to_rows(m: MatRef<'_, f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// A symmetric positive (semi)definite weight `W` used in generalized least
/// squares `‖r‖²_W = rᵀ W r`.
pub trait Weighting {
    fn dim(&self) -> usize;
    fn quad_form(&self, r: &[f64]) -> f64;
    /// `Gᵀ W G`.
    fn weighted_gram(&self, g: MatRef<'_, f64>) -> Mat<f64>;
    /// `Gᵀ W d`.
    fn weighted_rhs(&self, g: MatRef<'_, f64>, d: &[f64]) -> Vec<f64>;
}

impl Weighting for Mat<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn quad_form(&self, r: &[f64]) -> f64 {
        dot(r, &mat_vec(self.as_ref(), r))
    }

    fn weighted_gram(&self, g: MatRef<'_, f64>) -> Mat<f64> {
        let wg = self * g;
        let mut out = g.transpose() * wg;
        symmetrize(&mut out);
        out
    }

    fn weighted_rhs(&self, g: MatRef<'_, f64>, d: &[f64]) -> Vec<f64> {
        let wd = mat_vec(self.as_ref(), d);
        mat_vec(g.transpose(), &wd)
    }
}

/// The inverse of a factored SPD matrix used as a weight: `W = A⁻¹`.
///
/// Nothing is ever inverted explicitly; every product goes through
/// triangular solves with the factor of `A`.
#[derive(Clone, Debug)]
pub struct InverseWeight {
    factor: Factor,
}

impl InverseWeight {
    pub fn new(factor: Factor) -> Self {
        Self { factor }
    }

    pub fn factor(&self) -> &Factor {
        &self.factor
    }

    /// Materialize `W = A⁻¹`.
    pub fn matrix(&self) -> Mat<f64> {
        self.factor.inverse()
    }

    /// `W x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.factor.solve_vec(x)
    }
}

impl Weighting for InverseWeight {
    fn dim(&self) -> usize {
        self.factor.dim()
    }

    fn quad_form(&self, r: &[f64]) -> f64 {
        let h = self.factor.half_solve_vec(r);
        dot(&h, &h)
    }

    fn weighted_gram(&self, g: MatRef<'_, f64>) -> Mat<f64> {
        let h = self.factor.half_solve(g);
        let mut out = h.transpose() * &h;
        symmetrize(&mut out);
        out
    }

    fn weighted_rhs(&self, g: MatRef<'_, f64>, d: &[f64]) -> Vec<f64> {
        let hg = self.factor.half_solve(g);
        let hd = self.factor.half_solve_vec(d);
        mat_vec(hg.transpose(), &hd)
    }
}

impl<W: Weighting + ?Sized> Weighting for &W {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn quad_form(&self, r: &[f64]) -> f64 {
        (**self).quad_form(r)
    }
    fn weighted_gram(&self, g: MatRef<'_, f64>) -> Mat<f64> {
        (**self).weighted_gram(g)
    }
    fn weighted_rhs(&self, g: MatRef<'_, f64>, d: &[f64]) -> Vec<f64> {
        (**self).weighted_rhs(g, d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> Mat<f64> {
        let b = Mat::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let mut a = b.transpose() * &b;
        for i in 0..n {
            a[(i, i)] += 1.0;
        }
        a
    }

    #[test]
    fn inverse_weight_matches_dense_inverse() {
        let a = spd(6);
        let w = InverseWeight::new(jittered_cholesky(a.as_ref()).unwrap());
        let dense = w.matrix();
        let g = Mat::from_fn(6, 2, |i, j| (i as f64 + 1.0) * (j as f64 - 0.5));
        let d = vec![0.3, -1.0, 2.0, 0.1, 0.0, 1.5];
        assert!(
            max_abs_diff(
                w.weighted_gram(g.as_ref()).as_ref(),
                dense.weighted_gram(g.as_ref()).as_ref()
            ) < 1e-8
        );
        let r1 = w.weighted_rhs(g.as_ref(), &d);
        let r2 = dense.weighted_rhs(g.as_ref(), &d);
        for (x, y) in r1.iter().zip(&r2) {
            assert!((x - y).abs() < 1e-8);
        }
        assert!((w.quad_form(&d) - dense.quad_form(&d)).abs() < 1e-8);
    }

    #[test]
    fn jitter_escalates_on_singular_input() {
        let a = Mat::from_fn(3, 3, |_, _| 1.0);
        let f = jittered_cholesky(a.as_ref()).unwrap();
        assert!(f.jitter() > 0.0 && f.jitter() <= JITTER_MAX * 1.0000001);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let mut a = Mat::<f64>::identity(3, 3);
        a[(2, 2)] = -1.0;
        assert!(matches!(
            jittered_cholesky(a.as_ref()),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }
}
