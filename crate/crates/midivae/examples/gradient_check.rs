//! Validate the analytic gradients of the full loss against central finite
//! differences on a miniature configuration.
//!
//! Run with: cargo run --release --example gradient_check

use midivae::train::gradient_check;

fn main() -> midivae::Result<()> {
    let report = gradient_check(0, 200)?;
    println!(
        "checked {} coordinates: max relative error {:.3e} (tolerance {:.0e}) -> {}",
        report.coordinates,
        report.max_rel_error,
        report.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    );
    println!("worst coordinate per module:");
    for w in &report.per_module_worst {
        println!(
            "  {:18} {:.3e}  ({} [{}, {}])",
            w.module, w.rel_error, w.parameter, w.row, w.col
        );
    }
    Ok(())
}
