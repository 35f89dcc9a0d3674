//! Small dense linear-algebra helpers shared by the model fitters.

use nalgebra::{DMatrix, DVector};

/// Columns that lie (numerically) in the span of the columns before them.
///
/// Modified Gram-Schmidt in column order; a column whose residual norm falls
/// below `rel_tol` times its own norm is reported and dropped from the basis.
pub fn collinear_columns(x: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut r = col;
        for q in &basis {
            let proj = q.dot(&r);
            r.axpy(-proj, q, 1.0);
        }
        let rn = r.norm();
        if norm == 0.0 || !rn.is_finite() || rn <= rel_tol * norm {
            bad.push(j);
        } else {
            basis.push(r / rn);
        }
    }
    bad
}

/// Squared Cholesky pivots below this fraction of the largest diagonal
/// entry are treated as zero.
const PIVOT_TOL: f64 = 1e-13;

fn cholesky(a: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let chol = a.clone().cholesky()?;
    let scale = a.diagonal().amax();
    let l = chol.l_dirty();
    if (0..a.nrows()).any(|i| l[(i, i)] * l[(i, i)] <= PIVOT_TOL * scale) {
        return None;
    }
    Some(chol)
}

/// Solve `a x = b` for symmetric positive definite `a`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    Some(cholesky(a)?.solve(b))
}

/// Solve `a X = B` for symmetric positive definite `a`, several right-hand sides.
pub fn solve_spd_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Some(cholesky(a)?.solve(b))
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let sym = (a + a.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric positive semidefinite up to `-1e-8 * trace`.
pub fn is_psd(a: &DMatrix<f64>) -> bool {
    let tr = a.trace().abs().max(1e-300);
    min_eigenvalue(a) >= -1e-8 * tr
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut acc = CompensatedSum::default();
    for x in it {
        acc.add(x);
    }
    acc.value()
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
