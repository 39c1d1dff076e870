//! One energy evaluation on a thin film, with the per-offset breakdown and
//! the identity between the physical and rescaled frames.
//!
//! `cargo run --release --example energy`

use std::sync::Arc;

use nlthin::densities::pure_convolution;
use nlthin::energy::{energy_physical, energy_rescaled, ScaleParams};
use nlthin::lattice::{build_lattice, build_stencil, build_stencil_physical, CylinderSpec, Field};

fn main() -> nlthin::Result<()> {
    let (eps, gamma) = (0.25, 0.125);
    let scale = ScaleParams::new(eps, gamma)?;
    let density = pure_convolution(2, 1, 1.0, 2.0)?;
    let u_of = |x: &[f64]| vec![x[0] * x[0] + 0.3 * x[0]];

    // rescaled domain ω × (−1, 1)
    let spec = CylinderSpec::new(vec![(0.0, 1.0)], 1.0, 1)?;
    let lat = Arc::new(build_lattice(&spec, &[33, 17], &[false, false])?);
    let u = Field::from_fn(lat.clone(), 1, u_of);
    let st = build_stencil(&density.kernel().clone(), eps, gamma, &lat, f64::INFINITY)?;
    let rescaled = energy_rescaled(&u, &density, &scale, &st, None)?;

    // the same nodes on the physical film ω × (−γ, γ)
    let phys_spec = CylinderSpec::new(vec![(0.0, 1.0)], gamma, 1)?;
    let phys_lat = Arc::new(build_lattice(&phys_spec, &[33, 17], &[false, false])?);
    let v = Field::from_fn(phys_lat.clone(), 1, u_of);
    let phys_st = build_stencil_physical(density.kernel(), eps, gamma, &phys_lat, f64::INFINITY)?;
    let physical = energy_physical(&v, &density, &scale, &phys_st)?;

    println!("offsets          {}", rescaled.per_offset.len());
    println!("prefactor        {}", rescaled.prefactor);
    println!("rescaled energy  {:.15}", rescaled.total);
    println!("physical energy  {:.15}", physical.total);
    println!("re-derived       {:.15}", rescaled.rederived_total());
    let top = rescaled
        .per_offset
        .iter()
        .max_by(|a, b| a.value.total_cmp(&b.value))
        .expect("nonempty stencil");
    println!("largest term     offset {:?} ξ {:?} → {:.6}", top.offset, top.xi, top.value);
    Ok(())
}
