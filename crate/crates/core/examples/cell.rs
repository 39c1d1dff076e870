//! Cell formulas in the three regimes for `χ_{C_r}|z|²`, against the closed
//! forms.
//!
//! `cargo run --release --example cell`

use std::sync::Arc;

use nlthin::densities::{pure_convolution, PlanarCut};
use nlthin::homogenization::{cell_formula_delta, cell_formula_infinity, cell_formula_zero, oracle_pure_conv, Regime};
use nlthin::solvers::SolverOptions;

fn main() -> nlthin::Result<()> {
    let slope = vec![vec![1.0]];
    let opts = SolverOptions::default();

    let f1 = pure_convolution(2, 1, 1.0, 2.0)?;
    let est = cell_formula_delta(&f1, 1.0, &slope, &[16, 32, 64], &opts)?;
    println!("δ = 1, r = 1");
    for e in &est.ladder {
        println!("  n = {:>3}  value {:.8}  ({:.2}s)", e.resolution, e.value, e.runtime_s);
    }
    println!(
        "  extrapolated {:?}, oracle {}",
        est.extrapolated,
        oracle_pure_conv(&slope, 1.0, 2.0, Regime::Delta(1.0))?
    );

    let f2 = pure_convolution(2, 1, 2.0, 2.0)?;
    let zero = cell_formula_zero(&f2, &slope, &[8, 16, 32], &opts)?;
    println!(
        "zero regime, r = 2: {:.6} (b* = {:?}), oracle {:.6}",
        zero.value,
        zero.slope_b,
        oracle_pure_conv(&slope, 2.0, 2.0, Regime::Zero)?
    );

    let planar = PlanarCut::new(Arc::new(f2))?;
    let inf = cell_formula_infinity(&planar, &slope, &[16, 32, 64], &opts)?;
    println!(
        "infinity regime, r = 2: {:.6}, oracle {:.6}",
        inf.value,
        oracle_pure_conv(&slope, 2.0, 2.0, Regime::Infinity)?
    );
    Ok(())
}
