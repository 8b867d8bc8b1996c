//! Cholesky factorization with an escalating jitter ladder, triangular
//! solves and log-determinants.

use crate::error::{Error, Result};
use crate::numkit::mat::Mat;

/// Relative jitter levels tried in order, scaled by the mean of the diagonal.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum JitterPolicy {
    /// Try each level of [`JITTER_LADDER`] until the factorization succeeds.
    #[default]
    Ladder,
    /// Factor the matrix as given.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Solve `L x = b`.
    Lower,
    /// Solve `Lᵀ x = b`.
    Upper,
}

/// Lower-triangular factor `L` with `L Lᵀ = A + jitter I`.
#[derive(Clone, Debug)]
pub struct CholFactor {
    l: Mat,
    jitter: f64,
}

impl CholFactor {
    /// Wraps an already lower-triangular factor with positive diagonal.
    pub(crate) fn from_lower(l: Mat) -> Self {
        CholFactor { l, jitter: 0.0 }
    }

    pub fn l(&self) -> &Mat {
        &self.l
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn logdet(&self) -> f64 {
        logdet(self)
    }

    /// Solves `(L Lᵀ) x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        forward_in_place(&self.l, &mut x);
        backward_in_place(&self.l, &mut x);
        x
    }

    /// Solves `L X = B` column-wise.
    pub fn solve_lower_mat(&self, b: &Mat) -> Mat {
        let l = &self.l;
        let n = l.rows();
        assert_eq!(b.rows(), n, "solve_lower_mat: row mismatch");
        let m = b.cols();
        let mut x = b.clone();
        for i in 0..n {
            let lii = l[(i, i)];
            for k in 0..i {
                let lik = l[(i, k)];
                if lik == 0.0 {
                    continue;
                }
                let (head, tail) = x.as_mut_slice().split_at_mut(i * m);
                let xk = &head[k * m..(k + 1) * m];
                for (xi, &v) in tail[..m].iter_mut().zip(xk) {
                    *xi -= lik * v;
                }
            }
            for v in x.row_mut(i) {
                *v /= lii;
            }
        }
        x
    }

    /// Solves `Lᵀ X = B` column-wise.
    pub fn solve_upper_mat(&self, b: &Mat) -> Mat {
        let l = &self.l;
        let n = l.rows();
        assert_eq!(b.rows(), n, "solve_upper_mat: row mismatch");
        let m = b.cols();
        let mut x = b.clone();
        for i in (0..n).rev() {
            let lii = l[(i, i)];
            for v in x.row_mut(i) {
                *v /= lii;
            }
            // propagate row i into rows k < i through L[i][k]
            let (head, tail) = x.as_mut_slice().split_at_mut(i * m);
            let xi = &tail[..m];
            for k in 0..i {
                let lik = l[(i, k)];
                if lik == 0.0 {
                    continue;
                }
                for (xk, &v) in head[k * m..(k + 1) * m].iter_mut().zip(xi) {
                    *xk -= lik * v;
                }
            }
        }
        x
    }

    /// Solves `(L Lᵀ) X = B`.
    pub fn solve_mat(&self, b: &Mat) -> Mat {
        self.solve_upper_mat(&self.solve_lower_mat(b))
    }

    /// `(L Lᵀ)^{-1}`, symmetric.
    pub fn inverse(&self) -> Mat {
        let mut inv = self.solve_mat(&Mat::identity(self.dim()));
        inv.mirror_lower();
        inv
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> Mat {
        self.l.matmul_tr(&self.l)
    }
}

fn forward_in_place(l: &Mat, x: &mut [f64]) {
    for i in 0..x.len() {
        let row = l.row(i);
        let s: f64 = row[..i].iter().zip(&x[..i]).map(|(a, b)| a * b).sum();
        x[i] = (x[i] - s) / row[i];
    }
}

fn backward_in_place(l: &Mat, x: &mut [f64]) {
    let n = x.len();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
}

/// Plain Cholesky of `a + shift I`; `None` when a pivot is not positive.
fn try_factor(a: &Mat, shift: f64) -> Option<Mat> {
    let n = a.rows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let lj = l.row(j);
        let d = a[(j, j)] + shift - lj[..j].iter().map(|v| v * v).sum::<f64>();
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let s: f64 = {
                let (li, lj) = (l.row(i), l.row(j));
                li[..j].iter().zip(&lj[..j]).map(|(p, q)| p * q).sum()
            };
            l[(i, j)] = (a[(i, j)] - s) / djj;
        }
    }
    Some(l)
}

/// Factors a symmetric matrix, reading only its lower triangle.
pub fn cholesky(a: &Mat, policy: JitterPolicy) -> Result<CholFactor> {
    if !a.is_square() {
        return Err(Error::dims("cholesky", "square matrix", format!("{:?}", a.shape())));
    }
    let n = a.rows();
    if n == 0 {
        return Ok(CholFactor {
            l: Mat::zeros(0, 0),
            jitter: 0.0,
        });
    }
    let levels: &[f64] = match policy {
        JitterPolicy::Ladder => &JITTER_LADDER,
        JitterPolicy::None => &JITTER_LADDER[..1],
    };
    let mean_diag = a.diagonal().iter().sum::<f64>() / n as f64;
    let scale = if mean_diag.is_finite() && mean_diag > 0.0 {
        mean_diag
    } else {
        1.0
    };
    for &level in levels {
        let jitter = level * scale;
        if let Some(l) = try_factor(a, jitter) {
            return Ok(CholFactor { l, jitter });
        }
    }
    Err(Error::NotPositiveDefinite {
        size: n,
        max_jitter: levels[levels.len() - 1] * scale,
    })
}

/// Exact forward (`Lower`) or back (`Upper`) substitution.
pub fn tri_solve(factor: &CholFactor, b: &[f64], side: Side) -> Result<Vec<f64>> {
    if b.len() != factor.dim() {
        return Err(Error::dims("tri_solve", factor.dim(), b.len()));
    }
    let mut x = b.to_vec();
    match side {
        Side::Lower => forward_in_place(factor.l(), &mut x),
        Side::Upper => backward_in_place(factor.l(), &mut x),
    }
    Ok(x)
}

/// `2 Σ log L_ii`.
pub fn logdet(factor: &CholFactor) -> f64 {
    2.0 * factor.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}
