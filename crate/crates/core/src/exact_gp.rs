//! Exact Gaussian-process regression in dual coordinates: weights
//! `Λy` with `Λ = (K + σ²I)⁻¹`, held through a Cholesky factor.

use crate::error::{Error, Result};
use crate::kernels::{rbf_matrix, RbfParams};
use crate::numkit::{cholesky, grad, Adam, CholFactor, Direction, JitterPolicy, Mat, ParamVector, Tape, Var};

/// Largest training set accepted.
pub const MAX_EXACT_N: usize = 5000;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug)]
pub struct ExactGPState {
    x: Mat,
    weights: Vec<f64>,
    factor: CholFactor,
    kernel: RbfParams,
    noise: f64,
}

impl ExactGPState {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn factor(&self) -> &CholFactor {
        &self.factor
    }

    pub fn kernel(&self) -> &RbfParams {
        &self.kernel
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn inputs(&self) -> &Mat {
        &self.x
    }
}

pub fn fit_exact(x: &Mat, y: &[f64], kernel: &RbfParams, noise: f64) -> Result<ExactGPState> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::EmptyInput("fit_exact"));
    }
    if n > MAX_EXACT_N {
        return Err(Error::Config(format!(
            "exact GP is capped at {MAX_EXACT_N} points, got {n}"
        )));
    }
    if y.len() != n {
        return Err(Error::dims("fit_exact targets", n, y.len()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("targets must be finite".into()));
    }
    if !(noise > 0.0) {
        return Err(Error::Domain(format!("noise variance must be positive, got {noise}")));
    }
    let mut k = rbf_matrix(x, x, kernel)?;
    k.add_diag(noise);
    let factor = cholesky(&k, JitterPolicy::Ladder)?;
    let weights = factor.solve(y);
    Ok(ExactGPState {
        x: x.clone(),
        weights,
        factor,
        kernel: kernel.clone(),
        noise,
    })
}

/// Posterior mean and latent variance at one point.
pub fn predict_exact(state: &ExactGPState, xstar: &[f64]) -> Result<(f64, f64)> {
    let xs = Mat::row_vec(xstar);
    let (m, v) = predict_exact_batch(state, &xs)?;
    Ok((m[0], v[0]))
}

/// Posterior means and latent variances at every row of `xs`.
pub fn predict_exact_batch(state: &ExactGPState, xs: &Mat) -> Result<(Vec<f64>, Vec<f64>)> {
    let kxs = rbf_matrix(&state.x, xs, &state.kernel)?;
    let mean = kxs.tr_matmul(&Mat::col(&state.weights)).into_vec();
    let half = state.factor.solve_lower_mat(&kxs);
    let amp = state.kernel.amplitude();
    let var = (0..xs.rows())
        .map(|j| {
            let q: f64 = (0..half.rows()).map(|i| half[(i, j)] * half[(i, j)]).sum();
            amp - q
        })
        .collect();
    Ok((mean, var))
}

/// `−½ yᵀΛy − ½ log|K + σ²I| − (N/2) log 2π`.
pub fn log_marginal_likelihood(state: &ExactGPState, y: &[f64]) -> Result<f64> {
    if y.len() != state.x.rows() {
        return Err(Error::dims("log_marginal_likelihood", state.x.rows(), y.len()));
    }
    let n = y.len() as f64;
    let quad: f64 = y.iter().zip(&state.factor.solve(y)).map(|(a, b)| a * b).sum();
    Ok(-0.5 * quad - 0.5 * state.factor.logdet() - 0.5 * n * LN_2PI)
}

/// Log marginal likelihood on a tape, as a function of `log_amp`,
/// `log_ls` (`1 x D`) and `log_noise` leaves.
pub fn lml_on_tape(
    t: &mut Tape,
    x: &Mat,
    y: &[f64],
    log_amp: Var,
    log_ls: Var,
    log_noise: Var,
) -> Result<Var> {
    let n = x.rows();
    let xv = t.constant(x.clone());
    let k = t.rbf(xv, xv, log_amp, log_ls);
    let eye = t.constant(Mat::identity(n));
    let s2 = t.exp(log_noise);
    let noise = t.mul_scalar(eye, s2);
    let kn = t.add(k, noise);
    let p = t.spd(kn)?;
    let yv = t.constant(Mat::col(y));
    let sol = t.spd_solve(&p, yv);
    let yt = t.constant(Mat::row_vec(y));
    let quad = t.matmul(yt, sol);
    let quad = t.scale(quad, -0.5);
    let ld = t.spd_logdet(&p);
    let ld = t.scale(ld, -0.5);
    let lml = t.add(quad, ld);
    let c = t.constant(Mat::scalar(-0.5 * n as f64 * LN_2PI));
    Ok(t.add(lml, c))
}

/// Settings for marginal-likelihood hyper-parameter fitting.
#[derive(Clone, Copy, Debug)]
pub struct HyperFit {
    pub steps: usize,
    pub lr: f64,
    pub fit_noise: bool,
}

impl Default for HyperFit {
    fn default() -> Self {
        HyperFit {
            steps: 300,
            lr: 0.05,
            fit_noise: true,
        }
    }
}

/// Adam ascent on the log marginal likelihood in log-space. Returns the
/// fitted kernel and noise variance.
pub fn optimize_hypers(
    x: &Mat,
    y: &[f64],
    init: &RbfParams,
    noise: f64,
    settings: HyperFit,
) -> Result<(RbfParams, f64)> {
    if x.rows() > MAX_EXACT_N {
        return Err(Error::Config(format!("exact GP is capped at {MAX_EXACT_N} points")));
    }
    let mut p = ParamVector::new();
    p.register("log_amp", &Mat::scalar(init.log_amp), true)?;
    p.register("log_ls", &Mat::row_vec(&init.log_ls), true)?;
    p.register("log_noise", &Mat::scalar(noise.ln()), settings.fit_noise)?;
    let mut adam = Adam::new(p.len(), settings.lr);
    for step in 0..settings.steps {
        let (_, g) = grad(&p, |t, b| {
            lml_on_tape(t, x, y, b.var("log_amp"), b.var("log_ls"), b.var("log_noise"))
        })
        .map_err(|e| match e {
            Error::NonFiniteGradient { block, .. } => Error::NonFiniteGradient { block, step },
            other => other,
        })?;
        adam.step(p.values_mut(), &g, Direction::Ascent);
    }
    let kernel = RbfParams {
        log_amp: p.get("log_amp").expect("registered")[0],
        log_ls: p.get("log_ls").expect("registered").to_vec(),
    };
    Ok((kernel, p.get("log_noise").expect("registered")[0].exp()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit() -> RbfParams {
        RbfParams::new(1.0, &[1.0])
    }

    #[test]
    fn single_point_hand_values() {
        let x = Mat::from_rows(&[vec![0.3]]).unwrap();
        let s = fit_exact(&x, &[2.0], &unit(), 1.0).unwrap();
        assert!((s.weights()[0] - 1.0).abs() < 1e-15);
        let (m, v) = predict_exact(&s, &[0.3]).unwrap();
        assert!((m - 1.0).abs() < 1e-15);
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_targets_and_huge_noise() {
        let x = Mat::from_fn(6, 1, |i, _| i as f64 * 0.4);
        let s = fit_exact(&x, &[0.0; 6], &unit(), 0.1).unwrap();
        assert!(s.weights().iter().all(|&w| w == 0.0));
        let y: Vec<f64> = (0..6).map(|i| (i as f64).sin()).collect();
        let s = fit_exact(&x, &y, &unit(), 1e8).unwrap();
        assert!(s.weights().iter().all(|w| w.abs() < 1e-6));
    }

    #[test]
    fn far_field_reverts_to_prior() {
        let x = Mat::from_fn(5, 1, |i, _| i as f64 * 0.2);
        let y = [1.0, -0.5, 0.3, 0.8, 0.0];
        let k = RbfParams::new(1.7, &[0.3]);
        let s = fit_exact(&x, &y, &k, 0.05).unwrap();
        let (m, v) = predict_exact(&s, &[100.0]).unwrap();
        assert!(m.abs() < 1e-12);
        assert!((v - 1.7).abs() < 1e-12);
        for i in 0..50 {
            let (_, v) = predict_exact(&s, &[-2.0 + 0.1 * i as f64]).unwrap();
            assert!(v <= 1.7 + 1e-12);
        }
    }

    #[test]
    fn lml_scalar_value() {
        let x = Mat::from_rows(&[vec![0.0]]).unwrap();
        let s = fit_exact(&x, &[0.0], &unit(), 1.0).unwrap();
        let want = -0.5 * 2f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((log_marginal_likelihood(&s, &[0.0]).unwrap() - want).abs() < 1e-14);
        assert!((want + 1.2655).abs() < 1e-4);
    }

    #[test]
    fn lml_tape_matches_direct_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Mat::from_fn(12, 2, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..12).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let k = RbfParams::new(0.9, &[0.5, 1.3]);
        let noise = 0.3;
        let direct = log_marginal_likelihood(&fit_exact(&x, &y, &k, noise).unwrap(), &y).unwrap();

        let eval = |ln: f64| {
            let mut p = ParamVector::new();
            p.register("a", &Mat::scalar(k.log_amp), true).unwrap();
            p.register("l", &Mat::row_vec(&k.log_ls), true).unwrap();
            p.register("n", &Mat::scalar(ln), true).unwrap();
            grad(&p, |t, b| lml_on_tape(t, &x, &y, b.var("a"), b.var("l"), b.var("n"))).unwrap()
        };
        let (v, g) = eval(noise.ln());
        assert!((v - direct).abs() < 1e-10);
        let h = 1e-5;
        let fd = (eval(noise.ln() + h).0 - eval(noise.ln() - h).0) / (2.0 * h);
        assert!((fd - g[3]).abs() < 1e-6 * (1.0 + fd.abs()));
    }

    #[test]
    fn noise_recovered_from_prior_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 500;
        let x = Mat::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
        let k = RbfParams::new(1.0, &[0.5]);
        let true_noise = 0.04;
        let mut kk = rbf_matrix(&x, &x, &k).unwrap();
        kk.add_diag(true_noise);
        let f = cholesky(&kk, JitterPolicy::Ladder).unwrap();
        let e: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y = f.l().matvec(&e);
        let (_, s2) = optimize_hypers(&x, &y, &RbfParams::new(0.5, &[1.0]), 0.2, HyperFit::default())
            .unwrap();
        assert!(s2 > true_noise / 2.0 && s2 < true_noise * 2.0, "fitted noise {s2}");
    }

    #[test]
    fn cap_is_enforced() {
        let x = Mat::zeros(MAX_EXACT_N + 1, 1);
        let y = vec![0.0; MAX_EXACT_N + 1];
        assert!(matches!(fit_exact(&x, &y, &unit(), 1.0), Err(Error::Config(_))));
    }
}
