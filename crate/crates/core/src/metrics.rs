//! Evaluation metrics for regression (NLL, CRPS, CQM) and classification
//! (NLL, ECE, Brier, entropy-based OOD AUC).

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::numkit::Mat;

/// Points of the uniform `α` grid used by [`cqm`].
pub const CQM_GRID: usize = 101;
/// Confidence bins used by [`ece`].
pub const ECE_BINS: usize = 15;
/// Floor applied to predicted probabilities of the true class.
pub const PROB_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Acklam's rational approximation for the lower half, `p <= 0.5`.
fn acklam_lower(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    if p < 0.02425 {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Inverse standard-normal CDF, refined by one Newton step on the CDF.
pub fn gaussian_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("quantile needs 0 < p < 1, got {p}")));
    }
    // Work in the lower tail, where `Φ(x) − p` keeps its relative accuracy.
    let (lower, sign) = if p > 0.5 { (1.0 - p, -1.0) } else { (p, 1.0) };
    let x = acklam_lower(lower);
    let x = x - (normal_cdf(x) - lower) / normal_pdf(x);
    Ok(sign * x)
}

/// Closed-form CRPS of `N(mean, sd²)` at `y`. A zero `sd` gives the
/// point-mass limit `|y − mean|`.
pub fn crps_gaussian(y: f64, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return (y - mean).abs();
    }
    let z = (y - mean) / sd;
    sd * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) - 1.0 / PI.sqrt())
}

fn check_lengths(what: &'static str, n: usize, others: &[usize]) -> Result<()> {
    for &m in others {
        if m != n {
            return Err(Error::dims(what, n, m));
        }
    }
    Ok(())
}

/// Centered quantile metric `∫₀¹ |coverage(α) − α| dα`, where coverage is
/// the fraction of points with `|y − mean| / sd < Φ⁻¹((1+α)/2)`, by the
/// trapezoid rule on [`CQM_GRID`] points.
pub fn cqm(y: &[f64], mean: &[f64], sd: &[f64]) -> Result<f64> {
    check_lengths("cqm", y.len(), &[mean.len(), sd.len()])?;
    if y.is_empty() {
        return Err(Error::EmptyInput("cqm"));
    }
    if let Some(bad) = sd.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Domain(format!("cqm needs positive sd, got {bad}")));
    }
    let mut z: Vec<f64> = y
        .iter()
        .zip(mean)
        .zip(sd)
        .map(|((y, m), s)| ((y - m) / s).abs())
        .collect();
    z.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    let last = CQM_GRID - 1;
    let gap = |k: usize| -> Result<f64> {
        let alpha = k as f64 / last as f64;
        let bound = if k == 0 {
            0.0
        } else if k == last {
            f64::INFINITY
        } else {
            gaussian_quantile(0.5 * (1.0 + alpha))?
        };
        let covered = z.partition_point(|&v| v < bound) as f64;
        Ok((covered / n - alpha).abs())
    };
    let mut sum = 0.5 * (gap(0)? + gap(last)?);
    for k in 1..last {
        sum += gap(k)?;
    }
    Ok(sum / last as f64)
}

/// Mean negative log-likelihood with the count of clamped probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Nll {
    pub value: f64,
    pub clamped: usize,
}

/// `−mean log N(y | mean, variance)` with `variance` the full predictive
/// variance (latent plus noise).
pub fn nll_gaussian(y: &[f64], mean: &[f64], variance: &[f64]) -> Result<Nll> {
    check_lengths("nll", y.len(), &[mean.len(), variance.len()])?;
    if y.is_empty() {
        return Err(Error::EmptyInput("nll"));
    }
    let total: f64 = y
        .iter()
        .zip(mean)
        .zip(variance)
        .map(|((y, m), v)| 0.5 * (LN_2PI + v.ln() + (y - m) * (y - m) / v))
        .sum();
    Ok(Nll {
        value: total / y.len() as f64,
        clamped: 0,
    })
}

fn check_probs(labels: &[usize], probs: &Mat) -> Result<()> {
    check_lengths("class probabilities", labels.len(), &[probs.rows()])?;
    if labels.is_empty() {
        return Err(Error::EmptyInput("class probabilities"));
    }
    let c = probs.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::ClassOutOfRange {
            class: bad,
            n_classes: c,
        });
    }
    for i in 0..probs.rows() {
        let s: f64 = probs.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("probability row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// `−mean log p(y)`, with probabilities below [`PROB_FLOOR`] clamped and
/// counted.
pub fn nll_categorical(labels: &[usize], probs: &Mat) -> Result<Nll> {
    check_probs(labels, probs)?;
    let mut clamped = 0;
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let mut p = probs[(i, l)];
        if p < PROB_FLOOR {
            p = PROB_FLOOR;
            clamped += 1;
        }
        total -= p.ln();
    }
    Ok(Nll {
        value: total / labels.len() as f64,
        clamped,
    })
}

/// Expected calibration error over `bins` equal-width bins of the top-class
/// confidence.
pub fn ece(labels: &[usize], probs: &Mat, bins: usize) -> Result<f64> {
    check_probs(labels, probs)?;
    if bins == 0 {
        return Err(Error::Config("ece needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for (i, &l) in labels.iter().enumerate() {
        let row = probs.row(i);
        let (top, &p) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("at least one class");
        let b = ((p * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += p;
        if top == l {
            hits[b] += 1.0;
        }
    }
    let n = labels.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (hits[b] - conf[b]).abs() / n)
        .sum())
}

/// Mean squared distance between the probability rows and one-hot labels.
pub fn brier(labels: &[usize], probs: &Mat) -> Result<f64> {
    check_probs(labels, probs)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            probs
                .row(i)
                .iter()
                .enumerate()
                .map(|(c, p)| {
                    let t = if c == l { 1.0 } else { 0.0 };
                    (p - t) * (p - t)
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

pub fn row_entropies(probs: &Mat) -> Vec<f64> {
    (0..probs.rows()).map(|i| entropy(probs.row(i))).collect()
}

/// Probability that an out-of-distribution score exceeds an in-distribution
/// one, ties counted as one half (Mann–Whitney U over sizes).
pub fn ood_auc(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::EmptyInput("ood_auc"));
    }
    let mut all: Vec<(f64, bool)> = in_scores
        .iter()
        .map(|&s| (s, false))
        .chain(out_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of mid-ranks of the out-of-distribution scores.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0.total_cmp(&all[i].0).is_eq() {
            j += 1;
        }
        let mid = 0.5 * ((i + 1) + j) as f64;
        rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (n_in, n_out) = (in_scores.len() as f64, out_scores.len() as f64);
    Ok((rank_sum - n_out * (n_out + 1.0) / 2.0) / (n_in * n_out))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegressionEval {
    pub nll: f64,
    pub crps: f64,
    pub cqm: f64,
}

/// Regression metrics for Gaussian predictives `N(mean, latent + noise)`.
pub fn evaluate_regression(
    y: &[f64],
    mean: &[f64],
    latent_variance: &[f64],
    noise: f64,
) -> Result<RegressionEval> {
    check_lengths("regression eval", y.len(), &[mean.len(), latent_variance.len()])?;
    let var: Vec<f64> = latent_variance.iter().map(|v| v + noise).collect();
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let nll = nll_gaussian(y, mean, &var)?.value;
    let crps = y
        .iter()
        .zip(mean)
        .zip(&sd)
        .map(|((y, m), s)| crps_gaussian(*y, *m, *s))
        .sum::<f64>()
        / y.len() as f64;
    Ok(RegressionEval {
        nll,
        crps,
        cqm: cqm(y, mean, &sd)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassificationEval {
    pub nll: f64,
    pub nll_clamped: usize,
    pub ece: f64,
    pub brier: f64,
    pub ood_auc: Option<f64>,
}

/// Classification metrics; `ood_probs` adds the entropy AUC against the
/// in-distribution rows.
pub fn evaluate_classification(
    labels: &[usize],
    probs: &Mat,
    ood_probs: Option<&Mat>,
) -> Result<ClassificationEval> {
    let nll = nll_categorical(labels, probs)?;
    let ood_auc = match ood_probs {
        Some(o) => Some(ood_auc(&row_entropies(probs), &row_entropies(o))?),
        None => None,
    };
    Ok(ClassificationEval {
        nll: nll.value,
        nll_clamped: nll.clamped,
        ece: ece(labels, probs, ECE_BINS)?,
        brier: brier(labels, probs)?,
        ood_auc,
    })
}

/// Row-wise softmax of logits.
pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}
