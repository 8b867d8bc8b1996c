//! Post-hoc uncertainty for an overconfident linear classifier, with an
//! out-of-distribution check based on predictive entropy.

use fmgp::io::synth::{synth_blobs, BlobsSpec};
use fmgp::io::{predict_bundle, PredictionValues};
use fmgp::metrics::{evaluate_classification, softmax_rows};
use fmgp::training::{fit, FitConfig};
use fmgp::Mode;

fn main() -> fmgp::Result<()> {
    let data = synth_blobs(0, &BlobsSpec::default())?;
    let config = FitConfig {
        mode: Mode::Classification,
        m_beta: 30,
        batch_size: 100,
        steps: 2000,
        lr: 1e-2,
        ..FitConfig::default()
    };
    let (state, _) = fit(&data.bundle, &config)?;

    let test = data.bundle.subset(&data.bundle.test_indices());
    let probs = |b| match predict_bundle(&state, b, config.s_eval, 0).map(|p| p.values) {
        Ok(PredictionValues::Classification { probs, .. }) => Ok(probs),
        Ok(_) => unreachable!(),
        Err(e) => Err(e),
    };
    let labels = test.y.classes().unwrap();
    let ours = evaluate_classification(labels, &probs(&test)?, Some(&probs(&data.ood)?))?;
    let raw = evaluate_classification(
        labels,
        &softmax_rows(&test.g),
        Some(&softmax_rows(&data.ood.g)),
    )?;
    println!("        nll     ece     brier   ood_auc");
    for (name, e) in [("fmgp", &ours), ("raw", &raw)] {
        println!(
            "{name:<7} {:<7.4} {:<7.4} {:<7.4} {:.4}",
            e.nll,
            e.ece,
            e.brier,
            e.ood_auc.unwrap()
        );
    }
    Ok(())
}
