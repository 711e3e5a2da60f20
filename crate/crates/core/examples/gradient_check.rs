//! The finite-difference suite over every hand-written backward pass, and
//! what a broken gradient looks like.
//!
//! Run with `cargo run --release --example gradient_check`.

use meminv::gradcheck::{run_gradcheck, GradCheckOptions};
use meminv::Result;

fn main() -> Result<()> {
    let opts = GradCheckOptions::default();
    let report = run_gradcheck(&opts)?;
    for c in &report.components {
        println!("{:<24} max relative error {:.2e}", c.name, c.max_relative_error);
    }
    println!(
        "{} instances, all below {:.0e}: {}",
        report.total_instances(),
        opts.tol,
        report.passed()
    );

    // Perturbing one analytic gradient is caught.
    let broken = run_gradcheck(&GradCheckOptions {
        corrupt: Some("gcn_layers".into()),
        ..opts
    })?;
    let worst = broken.worst().expect("suite has components");
    println!(
        "with a corrupted GCN gradient: passed = {}, worst = {} ({:.2e})",
        broken.passed(),
        worst.name,
        worst.max_relative_error
    );
    Ok(())
}
