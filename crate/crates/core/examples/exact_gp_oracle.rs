//! With inducing points on the training inputs and `Ã = σ⁻² I`, FMGP
//! variances coincide with the exact GP posterior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fmgp::exact_gp::{fit_exact, log_marginal_likelihood, optimize_hypers, predict_exact_batch, HyperFit};
use fmgp::fmgp::{predictive_variance, Inputs, VariationalState};
use fmgp::kernels::RbfParams;
use fmgp::numkit::Mat;

fn main() -> fmgp::Result<()> {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x = Mat::from_fn(80, 2, |_, _| r.random_range(-2.0..2.0));
    let y: Vec<f64> = (0..80)
        .map(|i| x[(i, 0)].sin() * x[(i, 1)].cos() + 0.1 * r.random_range(-1.0..1.0))
        .collect();

    let (kernel, noise) = optimize_hypers(&x, &y, &RbfParams::isotropic(1.0, 1.0, 2), 0.1, HyperFit::default())?;
    let gp = fit_exact(&x, &y, &kernel, noise)?;
    println!(
        "amplitude {:.3}, length-scales {:?}, noise {:.4}, lml {:.3}",
        kernel.amplitude(),
        kernel.length_scales(),
        noise,
        log_marginal_likelihood(&gp, &y)?
    );

    let mut state = VariationalState::regression(x.clone(), kernel, noise)?;
    state.set_scaled_identity(noise.powf(-0.5));
    let probes = Mat::from_fn(5, 2, |i, j| -2.0 + i as f64 + 0.5 * j as f64);
    let (_, exact) = predict_exact_batch(&gp, &probes)?;
    let ours = predictive_variance(&state, &Inputs::regression(probes))?;
    for (e, o) in exact.iter().zip(&ours) {
        println!("exact {e:.10}  fmgp {o:.10}");
    }
    Ok(())
}
