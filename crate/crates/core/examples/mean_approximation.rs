//! How well a kernel expansion over inducing points reproduces a smooth
//! mean as the number of centers grows.

use fmgp::fmgp::{default_ridge, mean_approx_error};
use fmgp::kernels::RbfParams;
use fmgp::numkit::Mat;

fn main() -> fmgp::Result<()> {
    let probes = Mat::from_fn(400, 1, |i, _| -4.0 + 8.0 * i as f64 / 399.0);
    let g: Vec<f64> = probes.as_slice().iter().map(|&x| (1.5 * x).sin() + 0.3 * x).collect();
    let kernel = RbfParams::new(1.0, &[0.25]);
    for m in [4, 8, 16, 32, 64] {
        let centers = Mat::from_fn(m, 1, |i, _| -4.0 + 8.0 * i as f64 / (m - 1) as f64);
        let fit = mean_approx_error(&g, &probes, &centers, &kernel, default_ridge(&kernel))?;
        println!("M = {m:>2}: sup error {:.3e}", fit.sup_error);
    }
    Ok(())
}
