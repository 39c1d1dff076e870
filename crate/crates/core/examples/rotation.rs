//! The rotation example: an upper bound at `+I_{3,2}` below the lower bound
//! at `−I_{3,2}` for small δ, and invariance under rotations for large δ.
//!
//! `cargo run --release --example rotation` (several minutes on one core)

use nlthin::homogenization::rotation_invariance_experiment;
use nlthin::solvers::SolverOptions;

fn main() -> nlthin::Result<()> {
    let opts = SolverOptions {
        max_iters: 300,
        multistart: 2,
        ..Default::default()
    };
    let small = rotation_invariance_experiment(0.05, 2.0, 0.5, 16, &opts)?;
    println!("δ = 0.5");
    println!("  value at +M        {:.4}  (bound {:.4})", small.value_plus.unwrap_or(f64::NAN), small.analytic_upper);
    println!(
        "  lower bound at −M  {:.4}  (bound {:.4})",
        small.value_minus_lower_bound.unwrap_or(f64::NAN),
        small.analytic_lower
    );
    println!("  convex part at −M  {:.4}", small.convex_part_minus.unwrap_or(f64::NAN));
    println!("  verdict            {}", small.verdict.as_deref().unwrap_or("-"));

    let capped = SolverOptions {
        max_iters: 20,
        multistart: 1,
        ..Default::default()
    };
    let large = rotation_invariance_experiment(0.05, 2.0, 8.0, 16, &capped)?;
    if let Some(inv) = &large.invariance_check {
        println!("δ = 8, M = {}·I: values {:?}", inv.slope_scale, inv.values);
        println!("  spread {:.2e}, pass {}", inv.max_rel_spread, inv.pass);
    }
    Ok(())
}
