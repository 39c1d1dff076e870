//! Dirichlet minima along (ε, γ) trajectories against the limit densities.
//!
//! `cargo run --release --example gamma_min`

use nlthin::densities::pure_convolution;
use nlthin::homogenization::{gamma_min_sweep, Trajectory};
use nlthin::solvers::SolverOptions;

fn main() -> nlthin::Result<()> {
    let f = pure_convolution(2, 1, 1.0, 2.0)?;
    let slope = vec![vec![1.0]];
    let eps = [0.125, 0.0625, 0.03125];
    for tr in [Trajectory::ConstantDelta(1.0), Trajectory::EpsGammaSquared, Trajectory::GammaEpsSquared] {
        println!("{tr:?}");
        for r in gamma_min_sweep(&f, &slope, tr, &eps, &SolverOptions::default())? {
            println!(
                "  ε = {:<8} γ = {:<10.6} δ = {:<8.4} min = {:.6}  oracle = {:.6}  gap = {:.2}%",
                r.eps,
                r.gamma,
                r.delta,
                r.min_over_area,
                r.oracle,
                100.0 * r.rel_gap
            );
        }
    }
    Ok(())
}
