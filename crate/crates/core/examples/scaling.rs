//! Vertical scaling of the unscaled energy of a planar sinusoid.
//!
//! `cargo run --release --example scaling`

use nlthin::homogenization::{scaling_probe, scaling_probe_singular};

fn main() -> nlthin::Result<()> {
    let pairs = [(0.5, 0.125), (0.125, 0.5), (0.5, 1.0 / 32.0), (0.25, 1.0 / 16.0), (0.25, 0.25), (1.0 / 16.0, 0.125)];
    let table = scaling_probe(2, 2.0, &pairs, 64)?;
    println!("{:>8} {:>8} {:>12} {:>12} {:>10}", "eps", "gamma", "measured", "exact", "ratio");
    for r in &table.rows {
        println!("{:>8} {:>8} {:>12.6} {:>12.6} {:>10.6}", r.eps, r.gamma, r.vertical_factor, r.predicted, r.ratio);
    }

    let singular = scaling_probe_singular(2, 0.5, 2.0, 0.25, &[4.0, 16.0, 64.0], 64)?;
    println!(
        "singular kernel β = 0.5: fitted exponent {:.4} (expected {:.4})",
        singular.fitted_exponent.unwrap_or(f64::NAN),
        singular.expected_exponent.unwrap_or(f64::NAN)
    );
    Ok(())
}
