use super::*;
use crate::io::bundle::Split;
use rand::Rng;

fn normal_cdf_free_quadrature(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    // composite Simpson rule
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        let x = lo + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

fn normal_pdf(x: f64, m: f64, v: f64) -> f64 {
    (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
}

#[test]
fn gaussian_term_hand_values() {
    assert!((gaussian_log_expected_lik(0.3, 0.3, 0.0, 1.0) + 0.918_938_533_2).abs() < 1e-9);
    let want = -0.5 * (4.0 * std::f64::consts::PI).ln();
    assert!((gaussian_log_expected_lik(1.0, 1.0, 1.0, 1.0) - want).abs() < 1e-14);
    assert!((want + 1.26551).abs() < 1e-5);
}

#[test]
fn gaussian_term_matches_quadrature() {
    for &(y, m, v, s2) in &[(0.4f64, -0.2f64, 0.7f64, 0.3f64), (2.0, 0.0, 0.05, 1.5), (-1.0, 1.0, 2.0, 0.1)] {
        let integral = normal_cdf_free_quadrature(
            |f| normal_pdf(y, f, s2) * normal_pdf(f, m, v),
            m - 12.0 * v.sqrt(),
            m + 12.0 * v.sqrt(),
            20_000,
        );
        assert!((gaussian_log_expected_lik(y, m, v, s2) - integral.ln()).abs() < 1e-8);
    }
}

#[test]
fn categorical_term_deterministic_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let v = categorical_log_expected_lik(0, &[10.0, -10.0], &Mat::zeros(2, 2), 64, &mut rng).unwrap();
    let want = -(1.0 + (-20f64).exp()).ln();
    assert!((v - want).abs() < 1e-12, "{v} vs {want}");
    assert!((want + 2.06e-9).abs() < 1e-11);
    let v = categorical_log_expected_lik(1, &[0.2, 0.2], &Mat::zeros(2, 2), 64, &mut rng).unwrap();
    // zero covariance is factored with the smallest jitter level
    assert!((v - 0.5f64.ln()).abs() < 1e-4);
    assert!(categorical_log_expected_lik(2, &[0.0, 0.0], &Mat::identity(2), 4, &mut rng).is_err());
}

#[test]
fn categorical_term_matches_quadrature_at_large_s() {
    let logits = [0.7, -0.3];
    let s = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let est = categorical_log_expected_lik(0, &logits, &Mat::identity(2), s, &mut rng).unwrap();
    // f0 - f1 ~ N(1, 2)
    let sigmoid = |t: f64| 1.0 / (1.0 + (-t).exp());
    let p = normal_cdf_free_quadrature(|t| sigmoid(t) * normal_pdf(t, 1.0, 2.0), -20.0, 22.0, 20_000);
    let second = normal_cdf_free_quadrature(
        |t| sigmoid(t).powi(2) * normal_pdf(t, 1.0, 2.0),
        -20.0,
        22.0,
        20_000,
    );
    let se = ((second - p * p) / s as f64).sqrt() / p;
    assert!((est - p.ln()).abs() < 3.0 * se, "{est} vs {} (se {se})", p.ln());
}

fn tiny_regression(seed: u64, n: usize) -> PredictionBundle {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = Mat::from_fn(n, 1, |i, _| i as f64 / n as f64 * 4.0 - 2.0);
    let g = Mat::from_fn(n, 1, |i, _| x[(i, 0)].sin());
    let y = (0..n).map(|i| g[(i, 0)] + 0.1 * r.random_range(-1.0..1.0)).collect();
    PredictionBundle {
        mode: Mode::Regression,
        x,
        g,
        y: Targets::Real(y),
        psi: None,
        split: None,
        seed: Some(seed),
    }
}

#[test]
fn hand_evaluated_three_point_objective() {
    let x = Mat::from_rows(&[vec![-1.0], vec![0.0], vec![2.0]]).unwrap();
    let g = [0.5, -0.25, 1.0];
    let y = [0.7, -0.2, 0.4];
    let b = PredictionBundle {
        mode: Mode::Regression,
        x: x.clone(),
        g: Mat::col(&g),
        y: Targets::Real(y.to_vec()),
        psi: None,
        split: None,
        seed: None,
    };
    let (amp, noise) = (0.8, 0.3);
    let mut s = VariationalState::regression(x, RbfParams::new(amp, &[1.0]), noise).unwrap();
    s.set_scaled_identity((-60f64).exp());
    let cfg = FitConfig {
        m_beta: 3,
        ..FitConfig::default()
    };
    let got = minibatch_objective(&s, &b, &[0, 1, 2], &cfg).unwrap();
    let lg = |y: f64, m: f64| -0.5 * ((2.0 * std::f64::consts::PI * (amp + noise)).ln() + (y - m).powi(2) / (amp + noise));
    let want: f64 = (0..3).map(|i| lg(y[i], g[i]) + lg(y[i], 0.0)).sum();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");

    let no_aux = FitConfig {
        use_qstar: false,
        ..cfg
    };
    let got = minibatch_objective(&s, &b, &[0, 1, 2], &no_aux).unwrap();
    let want: f64 = (0..3).map(|i| lg(y[i], g[i])).sum();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn batch_objective_is_unbiased() {
    let b = tiny_regression(3, 20);
    let cfg = FitConfig {
        m_beta: 5,
        steps: 1,
        ..FitConfig::default()
    };
    let mut s = init_state(&b, &cfg).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(8);
    for v in s.l_packed.iter_mut() {
        *v += r.random_range(-0.3..0.3);
    }
    for a in s.a.iter_mut() {
        *a = r.random_range(-0.5..0.5);
    }
    let full = minibatch_objective(&s, &b, &(0..20).collect::<Vec<_>>(), &cfg).unwrap();
    let draws = 10_000;
    let mut vals = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mut idx = index::sample(&mut r, 20, 5).into_vec();
        idx.sort_unstable();
        vals.push(minibatch_objective(&s, &b, &idx, &cfg).unwrap());
    }
    let mean = vals.iter().sum::<f64>() / draws as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    let se = (var / draws as f64).sqrt();
    assert!((mean - full).abs() < 2.0 * se, "{mean} vs {full} (se {se})");
}

#[test]
fn config_validation() {
    let bad = FitConfig {
        m_beta: 0,
        ..FitConfig::default()
    };
    let msg = bad.validate().unwrap_err().to_string();
    assert!(msg.contains("M_beta >= 1"), "{msg}");
    assert!(FitConfig {
        lr: 0.0,
        ..FitConfig::default()
    }
    .validate()
    .is_err());
    let b = tiny_regression(0, 10);
    let cfg = FitConfig {
        m_beta: 11,
        ..FitConfig::default()
    };
    assert!(matches!(init_state(&b, &cfg), Err(Error::Config(_))));
    let cfg = FitConfig {
        mode: Mode::Classification,
        m_beta: 3,
        ..FitConfig::default()
    };
    assert!(matches!(init_state(&b, &cfg), Err(Error::ModeMismatch(_))));
}

#[test]
fn initialization_follows_recipe() {
    let b = tiny_regression(1, 30);
    let cfg = FitConfig {
        m_beta: 6,
        ..FitConfig::default()
    };
    let s = init_state(&b, &cfg).unwrap();
    assert_eq!(s.a, vec![0.0; 6]);
    assert!(s.a_tilde().sub(&Mat::identity(6)).max_abs() < 1e-15);
    let y = b.y.real().unwrap();
    let resid: Vec<f64> = y.iter().zip(b.g.as_slice()).map(|(y, g)| y - g).collect();
    let m = resid.iter().sum::<f64>() / 30.0;
    let v = resid.iter().map(|r| (r - m).powi(2)).sum::<f64>() / 30.0;
    assert!((s.noise().unwrap() - v).abs() < 1e-15);

    let exact = PredictionBundle {
        y: Targets::Real(b.g.as_slice().to_vec()),
        ..b.clone()
    };
    let s = init_state(&exact, &cfg).unwrap();
    assert!((s.noise().unwrap() - NOISE_FLOOR).abs() < 1e-20);
}

#[test]
fn batch_is_clamped_and_split_respected() {
    let mut b = tiny_regression(2, 12);
    b.split = Some((0..12).map(|i| if i < 8 { Split::Train } else { Split::Test }).collect());
    let cfg = FitConfig {
        m_beta: 3,
        batch_size: 100,
        steps: 2,
        ..FitConfig::default()
    };
    let t = Trainer::new(&b, &cfg).unwrap();
    assert_eq!(t.batch_size(), 8);
}

#[test]
fn seeded_fits_are_reproducible() {
    let b = tiny_regression(4, 40);
    let cfg = FitConfig {
        m_beta: 5,
        batch_size: 10,
        steps: 50,
        lr: 1e-2,
        seed: 17,
        ..FitConfig::default()
    };
    let (s1, t1) = fit(&b, &cfg).unwrap();
    let (s2, t2) = fit(&b, &cfg).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(t1.to_tsv(), t2.to_tsv());
    assert!(t1.rows.windows(2).all(|w| w[0].step < w[1].step));
}

#[test]
fn exact_targets_drive_noise_to_floor() {
    let b = tiny_regression(5, 40);
    let b = PredictionBundle {
        y: Targets::Real(b.g.as_slice().to_vec()),
        ..b
    };
    let cfg = FitConfig {
        m_beta: 8,
        batch_size: 40,
        steps: 8000,
        lr: 1e-3,
        ..FitConfig::default()
    };
    let mut s = init_state(&b, &cfg).unwrap();
    s.log_noise = Some(0.1f64.ln());
    let (s, trace) = Trainer::from_state(&b, s, &cfg).unwrap().run().unwrap();
    let noise = s.noise().unwrap();
    assert!((NOISE_FLOOR..=1e-4).contains(&noise), "noise {noise}");
    let ma = trace.moving_average(100);
    let tail = &ma[ma.len() / 5..];
    let ups = tail.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(ups as f64 >= 0.95 * (tail.len() - 1) as f64, "{ups} of {}", tail.len() - 1);
}

#[test]
fn non_finite_objective_reports_step() {
    let b = tiny_regression(6, 10);
    let cfg = FitConfig {
        m_beta: 3,
        steps: 3,
        ..FitConfig::default()
    };
    let mut s = init_state(&b, &cfg).unwrap();
    s.a[0] = f64::NAN;
    let mut t = Trainer::from_state(&b, s, &cfg).unwrap();
    match t.step() {
        Err(Error::NonFiniteGradient { step, .. }) => assert_eq!(step, 1),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn classification_steps_run() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let n = 30;
    let x = Mat::from_fn(n, 2, |_, _| r.random_range(-2.0..2.0));
    let labels: Vec<usize> = (0..n).map(|i| usize::from(x[(i, 0)] > 0.0) + usize::from(x[(i, 1)] > 1.0)).collect();
    let g = Mat::from_fn(n, 3, |i, c| if labels[i] == c { 2.0 } else { 0.0 });
    let b = PredictionBundle {
        mode: Mode::Classification,
        psi: Some(x.clone()),
        x,
        g,
        y: Targets::Class(labels),
        split: None,
        seed: None,
    };
    let cfg = FitConfig {
        mode: Mode::Classification,
        m_beta: 6,
        batch_size: 10,
        steps: 20,
        s_train: 8,
        lr: 1e-2,
        ..FitConfig::default()
    };
    let (s, trace) = fit(&b, &cfg).unwrap();
    assert_eq!(trace.rows.len(), 20);
    assert!(trace.rows.iter().all(|r| r.objective.is_finite() && r.kl_q >= -1e-10));
    assert_eq!(s.labels.as_ref().unwrap().len(), 6);
}
