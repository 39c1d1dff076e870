//! Energy densities `f(x, ξ, z)` with convexity, symmetry and growth
//! metadata.
//!
//! The energy engine asks a density to [`Density::bind`] itself at a fixed
//! ξ; the returned [`Bound`] lets the inner pair loop skip the generic
//! virtual call for the built-in families.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Kernel;

/// Unit cell in which an x-dependent density is periodic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeriodicCell {
    /// `Q_1` in the planar variables.
    Planar,
    /// `Q_1^d`.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymmetryFlags {
    /// `f(x, ξ, z) = f(x_α, ξ, z)`.
    pub vertical_x_independent: bool,
    /// `f(x, ξ_α, ξ_d, z) = f(x, ξ_α, −ξ_d, z)`.
    pub vertical_xi_even: bool,
}

/// `c1 (ψ|z|^p − ρ) ≤ f ≤ c2 (ψ|z|^p + ρ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Growth {
    pub c1: f64,
    pub c2: f64,
    pub p: f64,
    pub psi: Kernel,
    pub rho: Option<Kernel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityMeta {
    pub name: String,
    pub d: usize,
    pub m: usize,
    pub p: f64,
    pub is_convex_in_z: bool,
    pub x_periodic_cell: Option<PeriodicCell>,
    pub depends_on_x: bool,
    pub depends_on_vertical_x: bool,
    pub depends_on_vertical_xi: bool,
    pub symmetry: SymmetryFlags,
    pub growth: Option<Growth>,
}

impl DensityMeta {
    /// Independent of `x_d` and `ξ_d`.
    pub fn is_planar(&self) -> bool {
        !self.depends_on_vertical_x && !self.depends_on_vertical_xi
    }
}

/// A density frozen at one ξ.
#[derive(Clone, Debug, PartialEq)]
pub enum Bound {
    Zero,
    /// `a|z|^p`.
    Power { a: f64, p: f64 },
    /// `radial·| |z|·inv_norm − 1 |^p + Σ_j c_j |z − e_{i_j}|^p`.
    Composite {
        p: f64,
        radial: f64,
        inv_norm: f64,
        shifted: Vec<(f64, usize)>,
    },
    /// Fall back to [`Density::eval`] and [`Density::grad_z`].
    Dyn,
}

impl Bound {
    /// Value and (optionally) gradient of the bound density at `z`.
    #[inline]
    pub fn eval_grad(&self, z: &[f64], grad: Option<&mut [f64]>) -> f64 {
        match self {
            Bound::Zero => {
                if let Some(g) = grad {
                    g.fill(0.0);
                }
                0.0
            }
            Bound::Power { a, p } => power_eval_grad(*a, *p, z, grad),
            Bound::Composite {
                p,
                radial,
                inv_norm,
                shifted,
            } => {
                let mut gbuf = [0.0; 8];
                let m = z.len();
                let want = grad.is_some();
                let mut v = 0.0;
                if *radial != 0.0 {
                    let nz = norm(z);
                    let t = nz * inv_norm - 1.0;
                    v += radial * abs_pow(t, *p);
                    if want && nz > 0.0 {
                        let c = radial * p * abs_pow(t, p - 1.0) * t.signum() * inv_norm / nz;
                        for i in 0..m {
                            gbuf[i] += c * z[i];
                        }
                    }
                }
                for &(c, e) in shifted {
                    let mut r2 = 0.0;
                    for i in 0..m {
                        let w = z[i] - (i == e) as u8 as f64;
                        r2 += w * w;
                    }
                    if *p == 2.0 {
                        v += c * r2;
                        if want {
                            for i in 0..m {
                                gbuf[i] += 2.0 * c * (z[i] - (i == e) as u8 as f64);
                            }
                        }
                    } else {
                        let r = r2.sqrt();
                        v += c * r.powf(*p);
                        if want && r > 0.0 {
                            let k = c * p * r.powf(p - 2.0);
                            for i in 0..m {
                                gbuf[i] += k * (z[i] - (i == e) as u8 as f64);
                            }
                        }
                    }
                }
                if let Some(g) = grad {
                    g.copy_from_slice(&gbuf[..m]);
                }
                v
            }
            Bound::Dyn => unreachable!("dynamic bounds are evaluated through the density"),
        }
    }
}

#[inline]
fn power_eval_grad(a: f64, p: f64, z: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let r2: f64 = z.iter().map(|v| v * v).sum();
    if p == 2.0 {
        if let Some(g) = grad {
            for (gi, zi) in g.iter_mut().zip(z) {
                *gi = 2.0 * a * zi;
            }
        }
        return a * r2;
    }
    if r2 == 0.0 {
        if let Some(g) = grad {
            g.fill(0.0);
        }
        return 0.0;
    }
    let rp2 = r2.powf(0.5 * p - 1.0);
    if let Some(g) = grad {
        for (gi, zi) in g.iter_mut().zip(z) {
            *gi = a * p * rp2 * zi;
        }
    }
    a * rp2 * r2
}

fn norm(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn abs_pow(t: f64, p: f64) -> f64 {
    if p == 2.0 {
        t * t
    } else {
        t.abs().powf(p)
    }
}

pub trait Density: Send + Sync + fmt::Debug {
    fn meta(&self) -> &DensityMeta;

    fn eval(&self, x: &[f64], xi: &[f64], z: &[f64]) -> f64;

    /// Gradient in `z`; 0 is used as the subgradient at kinks.
    fn grad_z(&self, x: &[f64], xi: &[f64], z: &[f64], out: &mut [f64]);

    fn bind(&self, _xi: &[f64]) -> Bound {
        Bound::Dyn
    }

    /// Kernel whose support contains every ξ with `f(·, ξ, ·) ≠ 0`.
    fn support(&self) -> &Kernel;
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::invalid("density.p", "must exceed 1"));
    }
    Ok(())
}

/// `a(ξ)|z|^p`.
#[derive(Clone, Debug)]
pub struct PowerDensity {
    meta: DensityMeta,
    kernel: Kernel,
}

impl PowerDensity {
    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn p(&self) -> f64 {
        self.meta.p
    }
}

/// `χ_{C_r}(ξ)|z|^p`.
pub fn pure_convolution(d: usize, m: usize, r: f64, p: f64) -> Result<PowerDensity> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::invalid("density.r", "must be positive"));
    }
    let mut out = homogeneous_convex(Kernel::cylinder_indicator(d, r), m, p)?;
    out.meta.name = "pure_convolution".into();
    Ok(out)
}

/// `a(ξ)|z|^p` for a nonnegative weight `a`.
pub fn homogeneous_convex(kernel_a: Kernel, m: usize, p: f64) -> Result<PowerDensity> {
    check_p(p)?;
    kernel_a.validate()?;
    if m == 0 {
        return Err(Error::invalid("dim.m", "must be at least 1"));
    }
    let planar = matches!(kernel_a.family, crate::kernels::KernelFamily::PlanarCut { .. });
    let meta = DensityMeta {
        name: "homogeneous_convex".into(),
        d: kernel_a.dim,
        m,
        p,
        is_convex_in_z: true,
        x_periodic_cell: None,
        depends_on_x: false,
        depends_on_vertical_x: false,
        depends_on_vertical_xi: !planar,
        symmetry: SymmetryFlags {
            vertical_x_independent: true,
            vertical_xi_even: kernel_a.is_vertically_even(),
        },
        growth: Some(Growth {
            c1: 1.0,
            c2: 1.0,
            p,
            psi: kernel_a.clone(),
            rho: None,
        }),
    };
    Ok(PowerDensity { meta, kernel: kernel_a })
}

impl Density for PowerDensity {
    fn meta(&self) -> &DensityMeta {
        &self.meta
    }

    fn eval(&self, _x: &[f64], xi: &[f64], z: &[f64]) -> f64 {
        let a = self.kernel.eval(xi);
        if a == 0.0 {
            return 0.0;
        }
        power_eval_grad(a, self.meta.p, z, None)
    }

    fn grad_z(&self, _x: &[f64], xi: &[f64], z: &[f64], out: &mut [f64]) {
        let a = self.kernel.eval(xi);
        power_eval_grad(a, self.meta.p, z, Some(out));
    }

    fn bind(&self, xi: &[f64]) -> Bound {
        let a = self.kernel.eval(xi);
        if a == 0.0 {
            Bound::Zero
        } else {
            Bound::Power { a, p: self.meta.p }
        }
    }

    fn support(&self) -> &Kernel {
        &self.kernel
    }
}

/// `ξ ↦ f(x, (ξ_α, 0), z)`, the restriction of a density to planar
/// interactions.
#[derive(Clone, Debug)]
pub struct PlanarCut {
    inner: Arc<dyn Density>,
    kernel: Kernel,
    meta: DensityMeta,
}

impl PlanarCut {
    pub fn new(inner: Arc<dyn Density>) -> Result<Self> {
        let im = inner.meta();
        if im.depends_on_vertical_x {
            return Err(Error::Unsupported(format!(
                "{} depends on x_d and has no planar restriction",
                im.name
            )));
        }
        let mut meta = im.clone();
        meta.name = format!("planar_cut({})", im.name);
        meta.depends_on_vertical_xi = false;
        meta.symmetry.vertical_xi_even = true;
        if let Some(g) = meta.growth.as_mut() {
            g.psi = g.psi.planar_cut();
            g.rho = g.rho.as_ref().map(|r| r.planar_cut());
        }
        let kernel = inner.support().planar_cut();
        Ok(PlanarCut { inner, kernel, meta })
    }
}

fn flatten(xi: &[f64]) -> ([f64; 8], usize) {
    let mut buf = [0.0; 8];
    let d = xi.len();
    buf[..d].copy_from_slice(xi);
    buf[d - 1] = 0.0;
    (buf, d)
}

impl Density for PlanarCut {
    fn meta(&self) -> &DensityMeta {
        &self.meta
    }

    fn eval(&self, x: &[f64], xi: &[f64], z: &[f64]) -> f64 {
        let (b, d) = flatten(xi);
        self.inner.eval(x, &b[..d], z)
    }

    fn grad_z(&self, x: &[f64], xi: &[f64], z: &[f64], out: &mut [f64]) {
        let (b, d) = flatten(xi);
        self.inner.grad_z(x, &b[..d], z, out)
    }

    fn bind(&self, xi: &[f64]) -> Bound {
        let (b, d) = flatten(xi);
        self.inner.bind(&b[..d])
    }

    fn support(&self) -> &Kernel {
        &self.kernel
    }
}

/// Radial term `χ_{C_1}(ξ)| |z|/|ξ| − 1 |^p` plus normalized bump terms
/// `N χ_{C_η(e_i ± e_d)}(ξ)|z − e_i|^p` for `i = 1, 2`.
#[derive(Clone, Debug)]
pub struct RotationDensity {
    meta: DensityMeta,
    eta: f64,
    bump_norm: f64,
    include_f0: bool,
    include_bumps: bool,
    kernel: Kernel,
}

/// Measure of one cylinder `C_η ⊂ ℝ^d`.
pub fn cylinder_measure(d: usize, eta: f64) -> f64 {
    use std::f64::consts::PI;
    let n = d - 1;
    // volume of the unit ball in ℝ^n
    let mut ball = if n.is_multiple_of(2) { 1.0 } else { 2.0 };
    let mut k = if n.is_multiple_of(2) { 0 } else { 1 };
    while k < n {
        k += 2;
        ball *= 2.0 * PI / k as f64;
    }
    ball * eta.powi(n as i32) * 2.0 * eta
}

impl RotationDensity {
    pub fn new(d: usize, eta: f64, p: f64) -> Result<Self> {
        if d < 3 {
            return Err(Error::invalid("dim.d", "rotation example needs d = m ≥ 3"));
        }
        if !(eta > 0.0 && eta < 0.5) {
            return Err(Error::invalid("density.eta", "must lie in (0, 1/2)"));
        }
        check_p(p)?;
        Ok(Self::build(d, eta, p, 1.0 / cylinder_measure(d, eta), true, true))
    }

    fn build(d: usize, eta: f64, p: f64, bump_norm: f64, include_f0: bool, include_bumps: bool) -> Self {
        let q = 2f64.powf(p - 1.0);
        let mut psi_parts = Vec::new();
        let mut rho_parts = Vec::new();
        let mut support = Vec::new();
        if include_f0 {
            psi_parts.push((1.0, Kernel::cylinder_over_norm_p(d, 1.0, p)));
            rho_parts.push((q, Kernel::cylinder_indicator(d, 1.0)));
            support.push((1.0, Kernel::cylinder_indicator(d, 1.0)));
        }
        if include_bumps {
            for i in 0..2 {
                for s in [1.0, -1.0] {
                    let mut c = vec![0.0; d];
                    c[i] = 1.0;
                    c[d - 1] = s;
                    let k = Kernel::cylinder(d, eta, eta, c);
                    psi_parts.push((bump_norm, k.clone()));
                    rho_parts.push((q * bump_norm, k.clone()));
                    support.push((1.0, k));
                }
            }
        }
        let meta = DensityMeta {
            name: if include_f0 { "rotation_example" } else { "rotation_example_convex_part" }.into(),
            d,
            m: d,
            p,
            is_convex_in_z: !include_f0,
            x_periodic_cell: None,
            depends_on_x: false,
            depends_on_vertical_x: false,
            depends_on_vertical_xi: true,
            symmetry: SymmetryFlags {
                vertical_x_independent: true,
                vertical_xi_even: true,
            },
            growth: Some(Growth {
                c1: 1.0 / q,
                c2: q,
                p,
                psi: Kernel::sum(d, psi_parts),
                rho: Some(Kernel::sum(d, rho_parts)),
            }),
        };
        RotationDensity {
            meta,
            eta,
            bump_norm,
            include_f0,
            include_bumps,
            kernel: Kernel::sum(d, support),
        }
    }

    /// The two bump terms alone; convex in z.
    pub fn convex_part(&self) -> RotationDensity {
        Self::build(self.meta.d, self.eta, self.meta.p, self.bump_norm, false, true)
    }

    /// The radial term alone.
    pub fn radial_part(&self) -> RotationDensity {
        Self::build(self.meta.d, self.eta, self.meta.p, self.bump_norm, true, false)
    }

    /// Replace the bump normalization `1/|C_η|`.
    pub fn with_bump_norm(&self, bump_norm: f64) -> RotationDensity {
        Self::build(self.meta.d, self.eta, self.meta.p, bump_norm, self.include_f0, self.include_bumps)
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn bump_norm(&self) -> f64 {
        self.bump_norm
    }

    /// Centers `e_i ± e_d` of the bump cylinders with their target index.
    pub fn bump_centers(&self) -> Vec<(Vec<f64>, usize)> {
        let d = self.meta.d;
        let mut out = Vec::new();
        for i in 0..2 {
            for s in [1.0, -1.0] {
                let mut c = vec![0.0; d];
                c[i] = 1.0;
                c[d - 1] = s;
                out.push((c, i));
            }
        }
        out
    }

    fn in_bump(&self, xi: &[f64], i: usize) -> bool {
        let d = xi.len();
        let tol = 1.0 + 1e-12;
        let r2: f64 = (0..d - 1).map(|a| (xi[a] - (a == i) as u8 as f64).powi(2)).sum();
        r2.sqrt() <= self.eta * tol && ((xi[d - 1] - 1.0).abs() <= self.eta * tol || (xi[d - 1] + 1.0).abs() <= self.eta * tol)
    }

    fn in_c1(xi: &[f64]) -> bool {
        let d = xi.len();
        let r2: f64 = xi[..d - 1].iter().map(|v| v * v).sum();
        r2.sqrt() <= 1.0 + 1e-12 && xi[d - 1].abs() <= 1.0 + 1e-12
    }
}

impl Density for RotationDensity {
    fn meta(&self) -> &DensityMeta {
        &self.meta
    }

    fn eval(&self, _x: &[f64], xi: &[f64], z: &[f64]) -> f64 {
        match self.bind(xi) {
            Bound::Zero => 0.0,
            b => b.eval_grad(z, None),
        }
    }

    fn grad_z(&self, _x: &[f64], xi: &[f64], z: &[f64], out: &mut [f64]) {
        match self.bind(xi) {
            Bound::Zero => out.fill(0.0),
            b => {
                b.eval_grad(z, Some(out));
            }
        }
    }

    fn bind(&self, xi: &[f64]) -> Bound {
        let radial = if self.include_f0 && Self::in_c1(xi) { 1.0 } else { 0.0 };
        let mut shifted = Vec::new();
        if self.include_bumps {
            for i in 0..2 {
                if self.in_bump(xi, i) {
                    shifted.push((self.bump_norm, i));
                }
            }
        }
        if radial == 0.0 && shifted.is_empty() {
            return Bound::Zero;
        }
        let n = norm(xi);
        Bound::Composite {
            p: self.meta.p,
            radial,
            // ξ = 0 is rejected: the radial term becomes NaN
            inv_norm: if radial != 0.0 { if n > 0.0 { 1.0 / n } else { f64::NAN } } else { 0.0 },
            shifted,
        }
    }

    fn support(&self) -> &Kernel {
        &self.kernel
    }
}

// ---------------------------------------------------------------------------
// growth verification

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthWitness {
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
    pub z: Vec<f64>,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub pass: bool,
    pub samples: usize,
    pub lower_violations: usize,
    pub upper_violations: usize,
    /// First violations found, at most 16.
    pub witnesses: Vec<GrowthWitness>,
}

/// Check the growth envelope stored in the density metadata.
pub fn growth_check(density: &dyn Density, n_samples: usize, seed: u64) -> Result<GrowthReport> {
    let growth = density
        .meta()
        .growth
        .clone()
        .ok_or_else(|| Error::invalid("density.growth", "density carries no growth constants"))?;
    Ok(growth_check_with(density, &growth, n_samples, seed))
}

/// Check `c1(ψ|z|^p − ρ) ≤ f ≤ c2(ψ|z|^p + ρ)` on seeded samples: half of
/// the ξ drawn uniformly from a box around the support, half inside its
/// component cylinders.
pub fn growth_check_with(density: &dyn Density, growth: &Growth, n_samples: usize, seed: u64) -> GrowthReport {
    let meta = density.meta();
    let (d, m) = (meta.d, meta.m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut comps = density.support().components();
    comps.extend(growth.psi.components());
    if comps.is_empty() {
        comps.push((vec![0.0; d], 1.0, 1.0));
    }
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for (c, r, h) in &comps {
        for a in 0..d {
            let w = if a + 1 < d { *r } else { *h };
            lo[a] = lo[a].min(c[a] - 1.2 * w);
            hi[a] = hi[a].max(c[a] + 1.2 * w);
        }
    }
    let mut report = GrowthReport {
        pass: true,
        samples: 0,
        lower_violations: 0,
        upper_violations: 0,
        witnesses: vec![],
    };
    let mut x = vec![0.0; d];
    let mut xi = vec![0.0; d];
    let mut z = vec![0.0; m];
    for s in 0..n_samples {
        for v in x.iter_mut() {
            *v = rng.gen::<f64>();
        }
        if s % 2 == 0 {
            for a in 0..d {
                xi[a] = rng.gen_range(lo[a]..hi[a]);
            }
        } else {
            let (c, r, h) = &comps[rng.gen_range(0..comps.len())];
            // uniform in the cylinder by rejection in the planar ball
            loop {
                let mut r2 = 0.0;
                for a in 0..d - 1 {
                    let u: f64 = rng.gen_range(-1.0..1.0);
                    xi[a] = u;
                    r2 += u * u;
                }
                if r2 <= 1.0 {
                    break;
                }
            }
            for a in 0..d - 1 {
                xi[a] = c[a] + r * xi[a];
            }
            xi[d - 1] = c[d - 1] + h * rng.gen_range(-1.0..1.0);
        }
        let scale = if s % 3 == 0 { 0.2 } else { 2.0 };
        for v in z.iter_mut() {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
        if norm(&xi) == 0.0 {
            continue;
        }
        let f = density.eval(&x, &xi, &z);
        let psi = growth.psi.eval(&xi);
        let rho = growth.rho.as_ref().map_or(0.0, |r| r.eval(&xi));
        let zp = norm(&z).powf(growth.p);
        let lower = growth.c1 * (psi * zp - rho);
        let upper = growth.c2 * (psi * zp + rho);
        report.samples += 1;
        let tol = 1e-10 * (1.0 + f.abs());
        let bad_lo = !(lower <= f + tol);
        let bad_hi = !(f <= upper + tol);
        if bad_lo {
            report.lower_violations += 1;
        }
        if bad_hi {
            report.upper_violations += 1;
        }
        if (bad_lo || bad_hi) && report.witnesses.len() < 16 {
            report.witnesses.push(GrowthWitness {
                x: x.clone(),
                xi: xi.clone(),
                z: z.clone(),
                value: f,
                lower,
                upper,
            });
        }
    }
    report.pass = report.lower_violations == 0 && report.upper_violations == 0;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_convolution_spot_values() {
        let f = pure_convolution(3, 1, 1.0, 2.0).unwrap();
        let x = [0.0; 3];
        assert_eq!(f.eval(&x, &[0.5, 0.5, 0.5], &[3.0]), 9.0);
        assert_eq!(f.eval(&x, &[1.5, 0.0, 0.0], &[3.0]), 0.0);
        let mut g = [0.0];
        f.grad_z(&x, &[0.5, 0.5, 0.5], &[3.0], &mut g);
        assert_eq!(g[0], 6.0);
        assert!(f.meta().is_convex_in_z);
        assert!(f.meta().symmetry.vertical_xi_even);
    }

    #[test]
    fn homogeneous_convex_mollifier_at_zero_slope() {
        let f = homogeneous_convex(Kernel::mollifier_over_norm_p(2, 2.0), 2, 2.0).unwrap();
        assert_eq!(f.eval(&[0.0, 0.0], &[0.3, 0.1], &[0.0, 0.0]), 0.0);
        let a = Kernel::mollifier_over_norm_p(2, 2.0).eval(&[0.3, 0.1]);
        let v = f.eval(&[0.0, 0.0], &[0.3, 0.1], &[1.0, 2.0]);
        assert!((v - a * 5.0).abs() < 1e-12 * v);
    }

    #[test]
    fn rotation_spot_values() {
        let f = RotationDensity::new(3, 0.05, 2.0).unwrap();
        let x = [0.0; 3];
        // ξ = e_1 + e_3 sits on the corner of C_1 and at a bump center
        let v = f.eval(&x, &[1.0, 0.0, 1.0], &[1.0, 0.0, 0.0]);
        let want = (1.0 - 1.0 / 2f64.sqrt()).powi(2);
        assert!((v - want).abs() < 1e-14, "{v} vs {want}");
        // off the bumps, z = 0 gives f_0(0) = 1
        assert_eq!(f.eval(&x, &[0.3, 0.2, 0.1], &[0.0, 0.0, 0.0]), 1.0);
        assert_eq!(f.eval(&x, &[3.0, 0.0, 0.0], &[1.0, 2.0, 3.0]), 0.0);
        assert!(!f.meta().is_convex_in_z);
        assert!(f.convex_part().meta().is_convex_in_z);
        assert!(f.eval(&x, &[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).is_nan());
    }

    #[test]
    fn rotation_bump_term_is_normalized() {
        let f = RotationDensity::new(3, 0.05, 2.0).unwrap().convex_part();
        let v = f.eval(&[0.0; 3], &[1.0, 0.0, -1.0], &[0.0, 0.0, 0.0]);
        assert!((v - 1.0 / cylinder_measure(3, 0.05)).abs() < 1e-9 * v);
        let vol = std::f64::consts::PI * 0.05f64.powi(2) * 0.1;
        assert!((cylinder_measure(3, 0.05) - vol).abs() < 1e-15);
        assert_eq!(cylinder_measure(2, 0.5), 1.0);
    }

    #[test]
    fn growth_checks() {
        let f = pure_convolution(2, 1, 1.0, 2.0).unwrap();
        assert!(growth_check(&f, 2000, 1).unwrap().pass);
        let r = RotationDensity::new(3, 0.05, 2.0).unwrap();
        let rep = growth_check(&r, 4000, 2).unwrap();
        assert!(rep.pass, "{:?}", rep.witnesses);
        let mut wrong = r.meta().growth.clone().unwrap();
        wrong.c2 = 0.01;
        let rep = growth_check_with(&r, &wrong, 4000, 2);
        assert!(!rep.pass && rep.upper_violations > 0 && !rep.witnesses.is_empty());
    }

    #[test]
    fn planar_cut_ignores_vertical_xi() {
        let f: Arc<dyn Density> = Arc::new(pure_convolution(2, 1, 1.0, 2.0).unwrap());
        let c = PlanarCut::new(f).unwrap();
        assert!(c.meta().is_planar());
        let x = [0.0; 2];
        assert_eq!(c.eval(&x, &[0.5, 7.0], &[2.0]), 4.0);
        assert_eq!(c.eval(&x, &[1.5, 0.0], &[2.0]), 0.0);
    }
}
