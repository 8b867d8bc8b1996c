//! Ridge-regularized least squares by Householder QR of the stacked system
//! `[K; √ridge·I] a = [g; 0]`.

use crate::error::{Error, Result};
use crate::numkit::mat::Mat;

/// Minimizes `‖K a − g‖² + ridge ‖a‖²`.
pub fn ridge_lstsq(k: &Mat, g: &[f64], ridge: f64) -> Result<Vec<f64>> {
    let (p, m) = k.shape();
    if g.len() != p {
        return Err(Error::dims("ridge_lstsq", p, g.len()));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Domain(format!("ridge must be non-negative, got {ridge}")));
    }
    let rows = p + m;
    // column-major copy of the stacked matrix
    let mut a = vec![0.0; rows * m];
    for j in 0..m {
        for i in 0..p {
            a[j * rows + i] = k[(i, j)];
        }
        a[j * rows + p + j] = ridge.sqrt();
    }
    let mut b = g.to_vec();
    b.resize(rows, 0.0);

    for j in 0..m {
        let col = &mut a[j * rows..(j + 1) * rows];
        let norm = col[j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::NotPositiveDefinite {
                size: m,
                max_jitter: ridge,
            });
        }
        let alpha = if col[j] > 0.0 { -norm } else { norm };
        col[j] -= alpha;
        let vnorm2 = col[j..].iter().map(|v| v * v).sum::<f64>();
        let v: Vec<f64> = col[j..].to_vec();
        col[j] = alpha;
        for x in &mut col[j + 1..] {
            *x = 0.0;
        }
        if vnorm2 == 0.0 {
            continue;
        }
        for jj in j + 1..m {
            let c = &mut a[jj * rows..(jj + 1) * rows];
            let s = c[j..].iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() * 2.0 / vnorm2;
            for (x, y) in c[j..].iter_mut().zip(&v) {
                *x -= s * y;
            }
        }
        let s = b[j..].iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() * 2.0 / vnorm2;
        for (x, y) in b[j..].iter_mut().zip(&v) {
            *x -= s * y;
        }
    }
    let mut x = vec![0.0; m];
    for i in (0..m).rev() {
        let mut s = b[i];
        for j in i + 1..m {
            s -= a[j * rows + i] * x[j];
        }
        x[i] = s / a[i * rows + i];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_system_is_solved() {
        let k = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0], vec![0.0, 1.0]]).unwrap();
        let x_true = [0.5, -1.5];
        let g = k.matvec(&x_true);
        let x = ridge_lstsq(&k, &g, 0.0).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-13 && (x[1] + 1.5).abs() < 1e-13);
    }

    #[test]
    fn matches_normal_equations() {
        let k = Mat::from_fn(7, 3, |i, j| ((i * 3 + j) as f64 * 0.7).sin());
        let g: Vec<f64> = (0..7).map(|i| (i as f64).cos()).collect();
        let ridge = 0.3;
        let x = ridge_lstsq(&k, &g, ridge).unwrap();
        let mut ktk = k.tr_matmul(&k);
        ktk.add_diag(ridge);
        let lhs = ktk.matvec(&x);
        let rhs = k.transpose().matvec(&g);
        for (l, r) in lhs.iter().zip(&rhs) {
            assert!((l - r).abs() < 1e-12);
        }
    }
}
