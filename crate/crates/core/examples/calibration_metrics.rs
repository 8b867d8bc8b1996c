//! The scoring rules on hand-made predictions.

use fmgp::metrics::{brier, cqm, crps_gaussian, ece, nll_gaussian, ood_auc, ECE_BINS};
use fmgp::numkit::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> fmgp::Result<()> {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let y: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut r)).collect();
    let mean = vec![0.0; y.len()];
    for sd in [0.5, 1.0, 2.0] {
        let sds = vec![sd; y.len()];
        let crps = y.iter().map(|&v| crps_gaussian(v, 0.0, sd)).sum::<f64>() / y.len() as f64;
        let nll = nll_gaussian(&y, &mean, &vec![sd * sd; y.len()])?.value;
        println!("sd {sd}: nll {nll:.4} crps {crps:.4} cqm {:.4}", cqm(&y, &mean, &sds)?);
    }

    let labels = [0, 1, 1, 0];
    let confident = Mat::from_rows(&[vec![0.9, 0.1], vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4]])?;
    println!(
        "brier {:.4} ece {:.4}",
        brier(&labels, &confident)?,
        ece(&labels, &confident, ECE_BINS)?
    );
    println!("auc {:.3}", ood_auc(&[0.1, 0.2, 0.5], &[0.4, 0.9, 1.0])?);
    Ok(())
}
