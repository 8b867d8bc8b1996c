//! Synthetic prediction bundles with known generative processes.
//!
//! Each generator also plays the part of the pre-trained model: `g` comes
//! from an exact-GP mean (regression) or a multinomial linear model fitted
//! on a separate small sample (classification).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::Result;
use crate::exact_gp::{fit_exact, optimize_hypers, predict_exact_batch, HyperFit};
use crate::fmgp::Mode;
use crate::io::bundle::{PredictionBundle, Split, Targets};
use crate::kernels::RbfParams;
use crate::metrics::softmax_rows;
use crate::numkit::Mat;

/// Input intervals of the three training clusters.
pub const CLUSTERS: [(f64, f64); 3] = [(-3.0, -2.0), (-0.5, 0.5), (2.0, 3.0)];
/// Standard deviation of the observation noise in the cluster data.
pub const CLUSTER_NOISE_SD: f64 = 0.1;

/// Smooth trend underlying the cluster data.
pub fn cluster_trend(x: f64) -> f64 {
    (1.5 * x).sin() + 0.3 * x
}

/// Midpoints of the two gaps between consecutive clusters.
pub fn gap_midpoints() -> [f64; 2] {
    [
        0.5 * (CLUSTERS[0].1 + CLUSTERS[1].0),
        0.5 * (CLUSTERS[1].1 + CLUSTERS[2].0),
    ]
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("positive sd")
}

/// One-dimensional cluster regression data. `g` is the mean of an exact GP
/// whose hyper-parameters maximize the marginal likelihood of the points.
pub fn synth_clusters(seed: u64, n_per_cluster: usize) -> Result<PredictionBundle> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let noise = normal(CLUSTER_NOISE_SD);
    let mut xs = Vec::with_capacity(3 * n_per_cluster);
    for &(lo, hi) in &CLUSTERS {
        for _ in 0..n_per_cluster {
            xs.push(r.random_range(lo..=hi));
        }
    }
    let y: Vec<f64> = xs.iter().map(|&x| cluster_trend(x) + noise.sample(&mut r)).collect();
    let x = Mat::col(&xs);
    let (kernel, sigma2) = optimize_hypers(
        &x,
        &y,
        &RbfParams::new(1.0, &[1.0]),
        0.1,
        HyperFit::default(),
    )?;
    let gp = fit_exact(&x, &y, &kernel, sigma2)?;
    let (g, _) = predict_exact_batch(&gp, &x)?;
    Ok(PredictionBundle {
        mode: Mode::Regression,
        x,
        g: Mat::col(&g),
        y: Targets::Real(y),
        psi: None,
        split: None,
        seed: Some(seed),
    })
}

/// Random-Fourier-feature draw from a GP prior with an RBF kernel.
#[derive(Clone, Debug)]
pub struct PriorDraw {
    omega: Vec<Vec<f64>>,
    phase: Vec<f64>,
    weight: Vec<f64>,
    scale: f64,
}

impl PriorDraw {
    pub fn new(kernel: &RbfParams, features: usize, rng: &mut impl Rng) -> Self {
        let ls = kernel.length_scales();
        let omega = (0..features)
            .map(|_| {
                ls.iter()
                    .map(|l| {
                        let z: f64 = StandardNormal.sample(rng);
                        z / l.sqrt()
                    })
                    .collect()
            })
            .collect();
        let phase = (0..features)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        let weight = (0..features).map(|_| StandardNormal.sample(rng)).collect();
        PriorDraw {
            omega,
            phase,
            weight,
            scale: (2.0 * kernel.amplitude() / features as f64).sqrt(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let s: f64 = self
            .omega
            .iter()
            .zip(&self.phase)
            .zip(&self.weight)
            .map(|((w, b), a)| a * (w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b).cos())
            .sum();
        self.scale * s
    }
}

/// Settings of the well-specified regression generator.
#[derive(Clone, Debug)]
pub struct GpRegressionSpec {
    pub n: usize,
    pub train_fraction: f64,
    pub domain: (f64, f64),
    /// Intervals without training inputs.
    pub gaps: Vec<(f64, f64)>,
    pub kernel: RbfParams,
    pub noise_sd: f64,
}

impl Default for GpRegressionSpec {
    fn default() -> Self {
        GpRegressionSpec {
            n: 2000,
            train_fraction: 0.5,
            domain: (-6.0, 6.0),
            gaps: vec![(-4.0, -2.0), (1.0, 3.0)],
            kernel: RbfParams::new(1.0, &[0.5]),
            noise_sd: 0.1,
        }
    }
}

/// One-dimensional data drawn from a GP prior with known hyper-parameters.
/// Training inputs avoid the gaps; test inputs cover the whole domain. `g`
/// is the exact posterior mean given the training rows.
pub fn synth_gp_regression(seed: u64, spec: &GpRegressionSpec) -> Result<PredictionBundle> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let f = PriorDraw::new(&spec.kernel, 1000, &mut r);
    let noise = normal(spec.noise_sd);
    let n_train = ((spec.n as f64) * spec.train_fraction).round() as usize;
    let (lo, hi) = spec.domain;
    let in_gap = |x: f64| spec.gaps.iter().any(|&(a, b)| x > a && x < b);
    let mut xs = Vec::with_capacity(spec.n);
    let mut split = Vec::with_capacity(spec.n);
    while xs.len() < n_train {
        let x = r.random_range(lo..hi);
        if !in_gap(x) {
            xs.push(x);
            split.push(Split::Train);
        }
    }
    while xs.len() < spec.n {
        xs.push(r.random_range(lo..hi));
        split.push(Split::Test);
    }
    let y: Vec<f64> = xs.iter().map(|&x| f.eval(&[x]) + noise.sample(&mut r)).collect();
    let x = Mat::col(&xs);
    let gp = fit_exact(
        &Mat::col(&xs[..n_train]),
        &y[..n_train],
        &spec.kernel,
        spec.noise_sd * spec.noise_sd,
    )?;
    let (g, _) = predict_exact_batch(&gp, &x)?;
    Ok(PredictionBundle {
        mode: Mode::Regression,
        x,
        g: Mat::col(&g),
        y: Targets::Real(y),
        psi: None,
        split: Some(split),
        seed: Some(seed),
    })
}

/// Settings of the Gaussian-blobs classification generator.
#[derive(Clone, Debug)]
pub struct BlobsSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    /// Points per class in the sample the linear model is fitted on.
    pub pretrain_per_class: usize,
    pub radius: f64,
    pub spread: f64,
    pub test_fraction: f64,
    /// Offset of the out-of-distribution blobs.
    pub ood_shift: [f64; 2],
}

impl Default for BlobsSpec {
    fn default() -> Self {
        BlobsSpec {
            n_classes: 3,
            n_per_class: 200,
            pretrain_per_class: 10,
            radius: 2.0,
            spread: 0.8,
            test_fraction: 0.5,
            ood_shift: [7.0, 7.0],
        }
    }
}

/// In-distribution bundle (train and test rows) and a bundle of the same
/// blobs translated by the OOD shift.
#[derive(Clone, Debug)]
pub struct BlobsData {
    pub bundle: PredictionBundle,
    pub ood: PredictionBundle,
}

fn blob_center(spec: &BlobsSpec, c: usize) -> [f64; 2] {
    let t = std::f64::consts::TAU * c as f64 / spec.n_classes as f64;
    [spec.radius * t.cos(), spec.radius * t.sin()]
}

fn draw_blobs(spec: &BlobsSpec, per_class: usize, shift: [f64; 2], r: &mut ChaCha8Rng) -> (Mat, Vec<usize>) {
    let noise = normal(spec.spread);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..spec.n_classes {
        let m = blob_center(spec, c);
        for _ in 0..per_class {
            rows.push(vec![
                m[0] + shift[0] + noise.sample(r),
                m[1] + shift[1] + noise.sample(r),
            ]);
            labels.push(c);
        }
    }
    // Interleave the classes so that contiguous splits stay balanced.
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, r.random_range(0..=i));
    }
    let x = Mat::from_rows(&order.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>())
        .expect("non-empty blobs");
    (x, order.iter().map(|&i| labels[i]).collect())
}

/// Unregularized multinomial logistic regression with a bias, fitted by
/// gradient descent. Returns the `(D+1) x C` weights.
pub fn fit_linear_softmax(x: &Mat, labels: &[usize], n_classes: usize, iterations: usize, lr: f64) -> Mat {
    let xb = x.hcat(&Mat::filled(x.rows(), 1, 1.0)).expect("same rows");
    let mut w = Mat::zeros(xb.cols(), n_classes);
    let n = x.rows() as f64;
    for _ in 0..iterations {
        let mut p = softmax_rows(&xb.matmul(&w));
        for (i, &l) in labels.iter().enumerate() {
            p[(i, l)] -= 1.0;
        }
        let g = xb.tr_matmul(&p).scale(lr / n);
        w = w.sub(&g);
    }
    w
}

pub fn linear_logits(x: &Mat, w: &Mat) -> Mat {
    x.hcat(&Mat::filled(x.rows(), 1, 1.0)).expect("same rows").matmul(w)
}

/// Gaussian blobs on a circle with logits from a linear model fitted on a
/// small separate sample, and `ψ = x`.
pub fn synth_blobs(seed: u64, spec: &BlobsSpec) -> Result<BlobsData> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (xp, lp) = draw_blobs(spec, spec.pretrain_per_class, [0.0, 0.0], &mut r);
    let w = fit_linear_softmax(&xp, &lp, spec.n_classes, 5000, 0.5);
    let make = |x: Mat, labels: Vec<usize>, split: Option<Vec<Split>>| {
        let b = PredictionBundle {
            mode: Mode::Classification,
            g: linear_logits(&x, &w),
            psi: Some(x.clone()),
            x,
            y: Targets::Class(labels),
            split,
            seed: Some(seed),
        };
        b.validate().map(|_| b)
    };
    let (x, labels) = draw_blobs(spec, spec.n_per_class, [0.0, 0.0], &mut r);
    let n_test = ((x.rows() as f64) * spec.test_fraction).round() as usize;
    let split = (0..x.rows())
        .map(|i| if i < x.rows() - n_test { Split::Train } else { Split::Test })
        .collect();
    let bundle = make(x, labels, Some(split))?;
    let per_ood = (n_test / spec.n_classes).max(1);
    let (xo, lo) = draw_blobs(spec, per_ood, spec.ood_shift, &mut r);
    let ood = make(xo, lo, None)?;
    Ok(BlobsData { bundle, ood })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{ece, ECE_BINS};

    #[test]
    fn clusters_are_seeded_gapped_and_fitted() {
        let a = synth_clusters(3, 20).unwrap();
        assert_eq!(a.digest(), synth_clusters(3, 20).unwrap().digest());
        assert_ne!(a.digest(), synth_clusters(4, 20).unwrap().digest());
        let [m0, m1] = gap_midpoints();
        for &x in a.x.as_slice() {
            assert!(CLUSTERS.iter().any(|&(lo, hi)| (lo..=hi).contains(&x)));
            assert!((x - m0).abs() > 0.5 && (x - m1).abs() > 0.5);
        }
        let y = a.y.real().unwrap();
        let mse = y
            .iter()
            .zip(a.g.as_slice())
            .map(|(y, g)| (y - g).powi(2))
            .sum::<f64>()
            / y.len() as f64;
        assert!(mse.sqrt() <= 1.2 * CLUSTER_NOISE_SD, "rmse {}", mse.sqrt());
    }

    #[test]
    fn prior_draw_has_kernel_variance() {
        let k = RbfParams::new(2.0, &[0.5]);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let (n, pts) = (400, [0.0, 0.3]);
        let mut s = [0.0; 3];
        for _ in 0..n {
            let f = PriorDraw::new(&k, 500, &mut r);
            let (a, b) = (f.eval(&[pts[0]]), f.eval(&[pts[1]]));
            s[0] += a * a;
            s[1] += b * b;
            s[2] += a * b;
        }
        let cov = crate::kernels::rbf(&[pts[0]], &[pts[1]], &k);
        assert!((s[0] / n as f64 - 2.0).abs() < 0.4);
        assert!((s[1] / n as f64 - 2.0).abs() < 0.4);
        assert!((s[2] / n as f64 - cov).abs() < 0.4);
    }

    #[test]
    fn gp_regression_keeps_gaps_out_of_training() {
        let spec = GpRegressionSpec {
            n: 300,
            ..GpRegressionSpec::default()
        };
        let b = synth_gp_regression(2, &spec).unwrap();
        assert_eq!(b.len(), 300);
        for i in b.train_indices() {
            let x = b.x[(i, 0)];
            assert!(spec.gaps.iter().all(|&(lo, hi)| x <= lo || x >= hi));
        }
        assert_eq!(b.test_indices().len(), 150);
    }

    #[test]
    fn blob_logits_are_overconfident_in_distribution() {
        let d = synth_blobs(0, &BlobsSpec::default()).unwrap();
        let test = d.bundle.subset(&d.bundle.test_indices());
        let p = softmax_rows(&test.g);
        let e = ece(test.y.classes().unwrap(), &p, ECE_BINS).unwrap();
        assert!(e > 0.02, "ece {e}");
        assert_eq!(d.ood.n_classes(), 3);
    }
}
