use std::sync::Arc;

use nlthin::densities::{homogeneous_convex, pure_convolution, Density, RotationDensity};
use nlthin::energy::{conv_energy_forms_check, energy_physical, energy_rescaled, energy_truncated, Functional, ScaleParams};
use nlthin::kernels::{tail_moment, Kernel, Profile};
use nlthin::lattice::{
    admissible_nodes, build_lattice, build_stencil, build_stencil_physical, CylinderSpec, Field, Lattice,
};
use nlthin::solvers::{collar_mask, minimize_dirichlet, BoundaryDatum, DirichletClassSpec, SolverOptions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn film(n: &[usize], half: f64) -> Arc<Lattice> {
    let spec = CylinderSpec::new(vec![(0.0, 1.0)], half, 1).unwrap();
    Arc::new(build_lattice(&spec, n, &[false, false]).unwrap())
}

fn random_field(lat: &Arc<Lattice>, m: usize, seed: u64) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals = (0..lat.num_nodes() * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Field::from_values(lat.clone(), m, vals).unwrap()
}

fn smooth_density() -> nlthin::densities::PowerDensity {
    let k = Kernel::separable(
        2,
        Profile::Gaussian { sigma: 0.6 },
        Profile::Bump { half_width: 1.5 },
        3.0,
    );
    homogeneous_convex(k, 1, 3.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    // 20 fields × 50 coordinates = 1000 samples
    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>()) {
        let lat = film(&[9, 5], 1.0);
        let f = smooth_density();
        let scale = ScaleParams::new(0.3, 0.4).unwrap();
        let st = build_stencil(f.support(), scale.eps(), scale.gamma(), &lat, 3.0).unwrap();
        let func = Functional::new(&f, &st, &lat, scale.prefactor_rescaled(), None).unwrap();
        let u = random_field(&lat, 1, seed);
        let mut g = vec![0.0; u.values.len()];
        func.evaluate(&u.values, None, Some(&mut g), None).unwrap();
        let gmax = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let h = 1e-5;
        for _ in 0..50 {
            let i = rng.gen_range(0..g.len());
            let mut x = u.values.clone();
            x[i] += h;
            let up = func.evaluate(&x, None, None, None).unwrap().total;
            x[i] -= 2.0 * h;
            let dn = func.evaluate(&x, None, None, None).unwrap().total;
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - g[i]).abs() / g[i].abs().max(1e-3 * gmax);
            prop_assert!(rel <= 1e-5, "node {i}: fd {fd} vs {}", g[i]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn convex_densities_satisfy_midpoint_inequality(
        xi in prop::array::uniform3(-1.0f64..1.0),
        z1 in prop::array::uniform3(-3.0f64..3.0),
        z2 in prop::array::uniform3(-3.0f64..3.0),
    ) {
        let mid: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| 0.5 * (a + b)).collect();
        let power = homogeneous_convex(Kernel::cylinder_over_norm_p(3, 1.0, 2.5), 3, 2.5).unwrap();
        let rot = RotationDensity::new(3, 0.05, 2.0).unwrap().convex_part();
        let x = [0.5, 0.5, 0.0];
        for f in [&power as &dyn Density, &rot] {
            let (a, b, c) = (f.eval(&x, &xi, &z1), f.eval(&x, &xi, &z2), f.eval(&x, &xi, &mid));
            prop_assert!(c <= 0.5 * (a + b) + 1e-12 * (a + b).abs().max(1.0), "{c} > avg of {a}, {b}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rescaled_and_physical_energies_agree(eps in 0.1f64..0.6, gamma in 0.05f64..0.6, seed in any::<u64>()) {
        let f = pure_convolution(2, 1, 1.0, 2.0).unwrap();
        let scale = ScaleParams::new(eps, gamma).unwrap();
        let lat = film(&[13, 7], 1.0);
        let u = random_field(&lat, 1, seed);
        let st = build_stencil(f.support(), eps, gamma, &lat, f64::INFINITY).unwrap();
        let a = energy_rescaled(&u, &f, &scale, &st, None).unwrap().total;
        let plat = film(&[13, 7], gamma);
        let v = Field::from_values(plat.clone(), 1, u.values.clone()).unwrap();
        let pst = build_stencil_physical(f.support(), eps, gamma, &plat, f64::INFINITY).unwrap();
        let b = energy_physical(&v, &f, &scale, &pst).unwrap().total;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300), "{a} vs {b}");
    }

    #[test]
    fn three_convolution_forms_agree(eps in 0.15f64..0.5, gamma in 0.1f64..0.8, r in 0.5f64..1.5, seed in any::<u64>()) {
        let scale = ScaleParams::new(eps, gamma).unwrap();
        let lat = film(&[11, 7], 1.0);
        let u = random_field(&lat, 1, seed);
        let (a, b, c) = conv_energy_forms_check(&u, r, 2.0, &scale).unwrap();
        let tol = 1e-12 * a.abs().max(1e-300);
        prop_assert!((a - b).abs() <= tol && (a - c).abs() <= tol, "{a} {b} {c}");
    }

    #[test]
    fn truncation_is_monotone(t1 in 0.1f64..2.0, dt in 0.0f64..2.0, seed in any::<u64>()) {
        let f = pure_convolution(2, 1, 1.5, 2.0).unwrap();
        let scale = ScaleParams::new(0.25, 0.25).unwrap();
        let lat = film(&[17, 9], 1.0);
        let u = random_field(&lat, 1, seed);
        let st = build_stencil(f.support(), 0.25, 0.25, &lat, f64::INFINITY).unwrap();
        let lo = energy_truncated(&u, &f, &scale, &st, t1).unwrap().total;
        let hi = energy_truncated(&u, &f, &scale, &st, t1 + dt).unwrap().total;
        prop_assert!(lo <= hi * (1.0 + 1e-14), "{lo} > {hi}");
    }

    #[test]
    fn tail_moment_is_nonincreasing(r in 0.0f64..4.0, dr in 0.0f64..4.0) {
        for k in [Kernel::cylinder_over_norm_p(2, 3.0, 2.0), Kernel::mollifier_over_norm_p(2, 2.0)] {
            let a = tail_moment(&k, 2.0, r).unwrap();
            let b = tail_moment(&k, 2.0, r + dr).unwrap();
            prop_assert!(b <= a + 1e-9 * a.abs().max(1e-12), "{b} > {a}");
        }
    }

    #[test]
    fn admissible_nodes_are_symmetric(k0 in -9i64..10, k1 in -5i64..6, periodic in any::<bool>()) {
        let spec = CylinderSpec::new(vec![(0.0, 1.0)], 1.0, 1).unwrap();
        let lat = build_lattice(&spec, &[8, 5], &[periodic, false]).unwrap();
        let fwd = admissible_nodes(&lat, &[k0, k1], None);
        let back = admissible_nodes(&lat, &[-k0, -k1], None);
        prop_assert_eq!(fwd.len(), back.len());
        let n0 = lat.node_counts[0] as i64;
        for &x in &fwd {
            let mi = lat.multi_index(x);
            let mut a = mi[0] as i64 + k0;
            if periodic {
                a = a.rem_euclid(n0);
            }
            let y = lat.index(&[a as usize, (mi[1] as i64 + k1) as usize]);
            prop_assert!(back.contains(&y));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn dirichlet_solutions_are_feasible_and_certified(seed in any::<u64>(), collar in 0.1f64..0.3) {
        let lat = film(&[17, 9], 1.0);
        let f = pure_convolution(2, 1, 1.0, 2.0).unwrap();
        let scale = ScaleParams::new(0.25, 0.25).unwrap();
        let st = build_stencil(f.support(), 0.25, 0.25, &lat, f64::INFINITY).unwrap();
        let g = random_field(&lat, 1, seed).values;
        let spec = DirichletClassSpec { datum: BoundaryDatum::Tabulated(g.clone()), collar };
        let opts = SolverOptions { certify: true, tol_g: 1e-9, seed, ..Default::default() };
        let r = minimize_dirichlet(&f, &scale, lat.clone(), &spec, &st, &opts).unwrap();
        prop_assert_eq!(r.max_feasibility_violation, 0.0);
        prop_assert_eq!(r.certificate, Some(true), "{:?} vs {}", r.restart_values, r.value);
        for (n, &fixed) in collar_mask(&lat, 1, collar).iter().enumerate() {
            if fixed {
                prop_assert_eq!(r.field.values[n], g[n]);
            }
        }
    }
}
