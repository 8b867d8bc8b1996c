//! Fit FMGP on top of a fixed regression predictor and compare its test
//! metrics with a single global noise level.

use fmgp::cli::residual_variance;
use fmgp::fmgp::{posterior, PosteriorPredictive};
use fmgp::io::synth::{synth_gp_regression, GpRegressionSpec};
use fmgp::metrics::evaluate_regression;
use fmgp::training::{fit, FitConfig};

fn main() -> fmgp::Result<()> {
    let bundle = synth_gp_regression(0, &GpRegressionSpec::default())?;
    let config = FitConfig {
        m_beta: 50,
        steps: 3000,
        lr: 1e-2,
        ..FitConfig::default()
    };
    let (state, trace) = fit(&bundle, &config)?;
    println!(
        "objective {:.2} -> {:.2}, noise {:.4}",
        trace.rows[0].objective,
        trace.rows.last().unwrap().objective,
        state.noise().unwrap()
    );

    let test = bundle.subset(&bundle.test_indices());
    let y = test.y.real().unwrap();
    let PosteriorPredictive::Regression { mean, variance, noise } =
        posterior(&state, &test.inputs(state.kernel_input)?, &test.g)?
    else {
        unreachable!()
    };
    let ours = evaluate_regression(y, &mean, &variance, noise)?;
    let flat = evaluate_regression(y, &mean, &vec![0.0; y.len()], residual_variance(&bundle)?)?;
    println!("          nll      crps     cqm");
    println!("fmgp      {:<8.4} {:<8.4} {:.4}", ours.nll, ours.crps, ours.cqm);
    println!("baseline  {:<8.4} {:<8.4} {:.4}", flat.nll, flat.crps, flat.cqm);
    Ok(())
}
