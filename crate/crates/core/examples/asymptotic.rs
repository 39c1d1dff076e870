//! Normalized Dirichlet minima on `Q_R × I` for growing `R`.
//!
//! `cargo run --release --example asymptotic`

use nlthin::densities::pure_convolution;
use nlthin::homogenization::{asymptotic_formula, cell_formula_delta};
use nlthin::solvers::SolverOptions;

fn main() -> nlthin::Result<()> {
    let f = pure_convolution(2, 1, 1.0, 2.0)?;
    let slope = vec![vec![1.0]];
    let opts = SolverOptions::default();
    let cell = cell_formula_delta(&f, 1.0, &slope, &[8], &opts)?;
    let rows = asymptotic_formula(&f, 1.0, &slope, &[4.0, 8.0, 16.0, 32.0], 0.125, &opts)?;
    println!("cell value at h = 1/8: {:.6}", cell.value);
    for r in &rows {
        println!("R = {:>4}  H_R = {:.6}  deficit × R = {:.4}", r.resolution, r.value, (cell.value - r.value) * r.resolution);
    }
    Ok(())
}
