//! Finite-difference check of every gradient block, with and without a
//! deliberately broken KL adjoint.

use fmgp::gradcheck::{run_gradcheck, Fault};

fn main() -> fmgp::Result<()> {
    let report = run_gradcheck(0, Fault::None)?;
    print!("{}", report.to_text());
    println!("worst {} {:.2e}", report.worst().name(), report.worst().rel_err);

    let broken = run_gradcheck(0, Fault::FlipKlAdjoint)?;
    for f in broken.failures() {
        println!("caught {} ({:.2e})", f.name(), f.rel_err);
    }
    Ok(())
}
