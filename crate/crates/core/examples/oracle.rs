//! Closed forms and the stencil behind a cell problem.
//!
//! `cargo run --release --example oracle`

use nlthin::homogenization::{oracle_pure_conv, slab_lattice, theta, Regime};
use nlthin::kernels::Kernel;
use nlthin::lattice::build_stencil;

fn main() -> nlthin::Result<()> {
    for delta in [0.0, 0.25, 1.0, 4.0, f64::INFINITY] {
        println!("θ({delta}, 1) = {}", theta(delta, 1.0));
    }
    let m = vec![vec![1.0]];
    for regime in [Regime::Zero, Regime::Delta(1.0), Regime::Infinity] {
        println!("pure convolution r = 2, p = 2, {regime:?}: {}", oracle_pure_conv(&m, 2.0, 2.0, regime)?);
    }

    let lat = slab_lattice(2, 8, 1.0)?;
    let st = build_stencil(&Kernel::cylinder_indicator(2, 1.0), 1.0, 1.0, &lat, f64::INFINITY)?;
    println!(
        "slab stencil at h = 1/8: {} offsets, total weight {} (|C_1| = 4)",
        st.len(),
        st.total_weight()
    );
    Ok(())
}
