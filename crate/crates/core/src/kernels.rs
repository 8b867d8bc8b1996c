//! Squared-exponential kernel and the multiclass composite kernel
//! `B[c,c'] · rbf(x,x') · (ψ(x)ᵀψ(x') + δ)`.
//!
//! Length-scales divide the squared difference directly
//! (`(x_j - x'_j)² / l_j`), so `l_j` has the units of a squared input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::mat::{dot, Mat};
use crate::numkit::tape::rbf_value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfParams {
    pub log_amp: f64,
    pub log_ls: Vec<f64>,
}

impl RbfParams {
    pub fn new(amplitude: f64, length_scales: &[f64]) -> Self {
        RbfParams {
            log_amp: amplitude.ln(),
            log_ls: length_scales.iter().map(|l| l.ln()).collect(),
        }
    }

    /// Same length-scale for every dimension.
    pub fn isotropic(amplitude: f64, length_scale: f64, dim: usize) -> Self {
        Self::new(amplitude, &vec![length_scale; dim])
    }

    pub fn amplitude(&self) -> f64 {
        self.log_amp.exp()
    }

    pub fn length_scales(&self) -> Vec<f64> {
        self.log_ls.iter().map(|l| l.exp()).collect()
    }

    pub fn dim(&self) -> usize {
        self.log_ls.len()
    }
}

/// Hyper-parameters of the composite classification kernel. `B` is stored
/// through its lower Cholesky factor, packed row-major with log-diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassKernelParams {
    pub rbf: RbfParams,
    pub lb_packed: Vec<f64>,
    pub n_classes: usize,
    pub embed_dim: usize,
}

impl ClassKernelParams {
    /// `B = I`.
    pub fn identity_b(rbf: RbfParams, n_classes: usize, embed_dim: usize) -> Self {
        ClassKernelParams {
            rbf,
            lb_packed: vec![0.0; n_classes * (n_classes + 1) / 2],
            n_classes,
            embed_dim,
        }
    }

    /// Packs a lower-triangular factor with strictly positive diagonal.
    pub fn with_b_factor(rbf: RbfParams, lb: &Mat, embed_dim: usize) -> Result<Self> {
        let c = lb.rows();
        if !lb.is_square() {
            return Err(Error::dims("ClassKernelParams", "square factor", format!("{:?}", lb.shape())));
        }
        let mut packed = Vec::with_capacity(c * (c + 1) / 2);
        for i in 0..c {
            for j in 0..=i {
                if i == j {
                    if !(lb[(i, i)] > 0.0) {
                        return Err(Error::Domain("B factor needs a positive diagonal".into()));
                    }
                    packed.push(lb[(i, i)].ln());
                } else {
                    packed.push(lb[(i, j)]);
                }
            }
        }
        Ok(ClassKernelParams {
            rbf,
            lb_packed: packed,
            n_classes: c,
            embed_dim,
        })
    }

    pub fn b_factor(&self) -> Mat {
        let c = self.n_classes;
        let mut l = Mat::zeros(c, c);
        let mut k = 0;
        for i in 0..c {
            for j in 0..=i {
                l[(i, j)] = if i == j {
                    self.lb_packed[k].exp()
                } else {
                    self.lb_packed[k]
                };
                k += 1;
            }
        }
        l
    }

    pub fn b_matrix(&self) -> Mat {
        let l = self.b_factor();
        l.matmul_tr(&l)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelParams {
    Rbf(RbfParams),
    Class(ClassKernelParams),
}

impl KernelParams {
    pub fn rbf(&self) -> &RbfParams {
        match self {
            KernelParams::Rbf(p) => p,
            KernelParams::Class(p) => &p.rbf,
        }
    }

    pub fn rbf_mut(&mut self) -> &mut RbfParams {
        match self {
            KernelParams::Rbf(p) => p,
            KernelParams::Class(p) => &mut p.rbf,
        }
    }

    pub fn is_class(&self) -> bool {
        matches!(self, KernelParams::Class(_))
    }
}

/// Source of the coordinates the RBF factor sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelInput {
    #[default]
    Features,
    Embeddings,
}

/// An input as seen by a kernel: coordinate, optional embedding and class.
#[derive(Clone, Copy, Debug)]
pub struct KernelPoint<'a> {
    pub x: &'a [f64],
    pub psi: Option<&'a [f64]>,
    pub class: Option<usize>,
}

impl<'a> KernelPoint<'a> {
    pub fn plain(x: &'a [f64]) -> Self {
        KernelPoint {
            x,
            psi: None,
            class: None,
        }
    }

    pub fn labeled(x: &'a [f64], psi: &'a [f64], class: usize) -> Self {
        KernelPoint {
            x,
            psi: Some(psi),
            class: Some(class),
        }
    }
}

/// Inducing location; classification ones carry both embedding and class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingPoint {
    pub z: Vec<f64>,
    pub psi: Option<Vec<f64>>,
    pub class: Option<usize>,
}

impl InducingPoint {
    pub fn as_kernel_point(&self) -> KernelPoint<'_> {
        KernelPoint {
            x: &self.z,
            psi: self.psi.as_deref(),
            class: self.class,
        }
    }
}

pub fn rbf(x: &[f64], y: &[f64], p: &RbfParams) -> f64 {
    assert_eq!(x.len(), y.len(), "rbf: input dimensions differ");
    assert_eq!(x.len(), p.dim(), "rbf: one length-scale per dimension");
    let s: f64 = x
        .iter()
        .zip(y)
        .zip(&p.log_ls)
        .map(|((a, b), l)| (a - b) * (a - b) * (-l).exp())
        .sum();
    p.amplitude() * (-0.5 * s).exp()
}

pub fn rbf_matrix(x: &Mat, y: &Mat, p: &RbfParams) -> Result<Mat> {
    if x.cols() != y.cols() || x.cols() != p.dim() {
        return Err(Error::dims(
            "rbf_matrix",
            format!("{} columns", p.dim()),
            format!("{} and {}", x.cols(), y.cols()),
        ));
    }
    let mut k = rbf_value(x, y, p.log_amp, &p.log_ls);
    if std::ptr::eq(x, y) {
        k.mirror_lower();
    }
    Ok(k)
}

fn check_class(c: Option<usize>, n_classes: usize) -> Result<usize> {
    let c = c.ok_or_else(|| Error::Domain("classification point without class".into()))?;
    if c >= n_classes {
        return Err(Error::ClassOutOfRange {
            class: c,
            n_classes,
        });
    }
    Ok(c)
}

/// Composite kernel between two labeled points. `same_point` supplies the
/// identity term; coordinates are never compared for equality.
pub fn class_kernel(
    a: &KernelPoint,
    b: &KernelPoint,
    p: &ClassKernelParams,
    same_point: bool,
) -> Result<f64> {
    let ca = check_class(a.class, p.n_classes)?;
    let cb = check_class(b.class, p.n_classes)?;
    let (pa, pb) = match (a.psi, b.psi) {
        (Some(pa), Some(pb)) => (pa, pb),
        _ => return Err(Error::Domain("classification kernel needs embeddings".into())),
    };
    if pa.len() != pb.len() {
        return Err(Error::dims("class_kernel embeddings", pa.len(), pb.len()));
    }
    let bmat = p.b_matrix();
    let lin = dot(pa, pb) + if same_point { 1.0 } else { 0.0 };
    Ok(bmat[(ca, cb)] * rbf(a.x, b.x, &p.rbf) * lin)
}

/// Prior variance `K(x,x)` of each point.
pub fn kernel_diag(points: &[KernelPoint], p: &KernelParams) -> Result<Vec<f64>> {
    match p {
        KernelParams::Rbf(r) => Ok(vec![r.amplitude(); points.len()]),
        KernelParams::Class(cp) => {
            let bmat = cp.b_matrix();
            let amp = cp.rbf.amplitude();
            points
                .iter()
                .map(|pt| {
                    let c = check_class(pt.class, cp.n_classes)?;
                    let psi = pt
                        .psi
                        .ok_or_else(|| Error::Domain("classification kernel needs embeddings".into()))?;
                    Ok(bmat[(c, c)] * amp * (dot(psi, psi) + 1.0))
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::chol::{cholesky, JitterPolicy};
    use proptest::prelude::*;

    #[test]
    fn rbf_closed_forms() {
        let p = RbfParams::new(1.7, &[0.4, 2.0]);
        assert!((rbf(&[0.3, -1.0], &[0.3, -1.0], &p) - 1.7).abs() < 1e-15);
        let p1 = RbfParams::new(1.0, &[1.0]);
        let d = (2.0 * 2f64.ln()).sqrt();
        assert!((rbf(&[0.0], &[d], &p1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rbf_matrix_cases() {
        let p = RbfParams::new(2.5, &[0.7]);
        let one = Mat::from_rows(&[vec![0.2]]).unwrap();
        assert_eq!(rbf_matrix(&one, &one, &p).unwrap()[(0, 0)], 2.5);
        let dup = Mat::from_rows(&[vec![0.2], vec![0.2]]).unwrap();
        let k = rbf_matrix(&dup, &dup, &p).unwrap();
        assert!(k.as_slice().iter().all(|&v| (v - 2.5).abs() < 1e-15));

        let p3 = RbfParams::new(0.8, &[0.5, 1.5, 3.0]);
        let x = Mat::from_fn(5, 3, |i, j| (i as f64 * 0.37 + j as f64 * 0.11).sin());
        let y = Mat::from_fn(4, 3, |i, j| (i as f64 * 0.53 - j as f64 * 0.29).cos());
        let k = rbf_matrix(&x, &y, &p3).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                assert!((k[(i, j)] - rbf(x.row(i), y.row(j), &p3)).abs() < 1e-15);
            }
        }
        assert!(rbf_matrix(&x, &Mat::zeros(2, 2), &p3).is_err());
    }

    #[test]
    fn class_kernel_cases() {
        let rbf_p = RbfParams::new(1.3, &[1.0]);
        let p = ClassKernelParams::identity_b(rbf_p.clone(), 3, 2);
        let zero = [0.0, 0.0];
        let a = KernelPoint::labeled(&[0.5], &zero, 1);
        assert!((class_kernel(&a, &a, &p, true).unwrap() - 1.3).abs() < 1e-15);

        let b = KernelPoint::labeled(&[0.1], &[0.3, 0.4], 2);
        assert_eq!(class_kernel(&a, &b, &p, false).unwrap(), 0.0);

        let u1 = [1.0, 0.0];
        let u2 = [1.0, 0.0];
        let x1 = KernelPoint::labeled(&[0.0], &u1, 0);
        let x2 = KernelPoint::labeled(&[0.8], &u2, 0);
        let want = rbf(&[0.0], &[0.8], &rbf_p);
        assert!((class_kernel(&x1, &x2, &p, false).unwrap() - want).abs() < 1e-15);

        let bad = KernelPoint::labeled(&[0.0], &u1, 3);
        assert!(matches!(
            class_kernel(&bad, &x1, &p, false),
            Err(Error::ClassOutOfRange { class: 3, n_classes: 3 })
        ));
    }

    #[test]
    fn diagonal_values() {
        let r = RbfParams::new(0.6, &[1.0]);
        let pts = [KernelPoint::plain(&[1.0]), KernelPoint::plain(&[-4.0])];
        assert_eq!(kernel_diag(&pts, &KernelParams::Rbf(r.clone())).unwrap(), vec![0.6, 0.6]);

        let p = ClassKernelParams::identity_b(r.clone(), 2, 3);
        let z = [0.0; 3];
        let pts = [KernelPoint::labeled(&[1.0], &z, 0)];
        let d = kernel_diag(&pts, &KernelParams::Class(p)).unwrap();
        assert!((d[0] - 0.6).abs() < 1e-15);

        // B_00 = 4 through a factor with L_00 = 2; |ψ|² = 3
        let lb = Mat::from_rows(&[vec![2.0, 0.0], vec![0.5, 1.0]]).unwrap();
        let p = ClassKernelParams::with_b_factor(r, &lb, 3).unwrap();
        let psi = [1.0, 1.0, 1.0];
        let pts = [KernelPoint::labeled(&[0.0], &psi, 0)];
        let d = kernel_diag(&pts, &KernelParams::Class(p)).unwrap();
        assert!((d[0] - 16.0 * 0.6).abs() < 1e-12);
    }

    fn min_eig_sym(a: &Mat) -> f64 {
        // Jacobi sweeps on a small symmetric matrix
        let n = a.rows();
        let mut m = a.clone();
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in p + 1..n {
                    off += m[(p, q)] * m[(p, q)];
                    if m[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                        m[(k, p)] = c * mkp - s * mkq;
                        m[(k, q)] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                        m[(p, k)] = c * mpk - s * mqk;
                        m[(q, k)] = s * mpk + c * mqk;
                    }
                }
            }
            if off < 1e-24 {
                break;
            }
        }
        m.diagonal().into_iter().fold(f64::INFINITY, f64::min)
    }

    proptest! {
        #[test]
        fn gram_matrices_are_psd(
            coords in proptest::collection::vec(-3.0f64..3.0, 16),
            log_amp in -1.0f64..1.0,
            log_ls in proptest::collection::vec(-1.5f64..1.5, 2),
        ) {
            let x = Mat::from_vec(8, 2, coords).unwrap();
            let p = RbfParams { log_amp, log_ls };
            let k = rbf_matrix(&x, &x, &p).unwrap();
            prop_assert!(min_eig_sym(&k) >= -1e-8 * k.trace());
        }

        #[test]
        fn class_gram_matrices_are_psd(
            coords in proptest::collection::vec(-2.0f64..2.0, 6),
            psis in proptest::collection::vec(-1.0f64..1.0, 12),
            classes in proptest::collection::vec(0usize..3, 6),
            lb in proptest::collection::vec(-0.8f64..0.8, 6),
        ) {
            let p = ClassKernelParams {
                rbf: RbfParams::new(1.0, &[0.7]),
                lb_packed: lb,
                n_classes: 3,
                embed_dim: 2,
            };
            let k = Mat::from_fn(6, 6, |i, j| {
                let a = KernelPoint::labeled(&coords[i..i + 1], &psis[2 * i..2 * i + 2], classes[i]);
                let b = KernelPoint::labeled(&coords[j..j + 1], &psis[2 * j..2 * j + 2], classes[j]);
                class_kernel(&a, &b, &p, i == j).unwrap()
            });
            prop_assert!(k.asymmetry() < 1e-12);
            prop_assert!(min_eig_sym(&k) >= -1e-8 * k.trace());
        }
    }

    #[test]
    fn distinct_rows_factor_with_small_jitter() {
        let p = RbfParams::new(1.0, &[0.3]);
        let x = Mat::from_fn(30, 1, |i, _| i as f64 * 0.25);
        let k = rbf_matrix(&x, &x, &p).unwrap();
        let f = cholesky(&k, JitterPolicy::Ladder).unwrap();
        assert!(f.jitter() <= 1e-6 * k.trace() / 30.0);
    }
}
