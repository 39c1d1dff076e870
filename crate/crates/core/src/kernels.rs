//! Interaction kernels ψ, envelopes ρ, their moment and slice statistics,
//! and the audit of the admissibility hypotheses (H0)–(H4).
//!
//! Indicator kernels are evaluated on the closed support. Quadrature weights
//! use [`Kernel::support_weight`], which is 1 inside the support, 1/2 on a
//! face and 1/4 on an edge of it: the fraction of a lattice cell centred on
//! the boundary that lies inside.

use quadrature::double_exponential;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) const BOUNDARY_TOL: f64 = 1e-12;

/// 1 if `v < bound`, 1/2 if `v = bound` (relative tolerance), 0 otherwise.
pub fn balanced_indicator(v: f64, bound: f64) -> f64 {
    if v < bound * (1.0 - BOUNDARY_TOL) {
        1.0
    } else if v <= bound * (1.0 + BOUNDARY_TOL) {
        0.5
    } else {
        0.0
    }
}

fn closed_indicator(v: f64, bound: f64) -> f64 {
    if v <= bound * (1.0 + BOUNDARY_TOL) {
        1.0
    } else {
        0.0
    }
}

fn planar_norm(xi: &[f64]) -> f64 {
    xi[..xi.len() - 1].iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn norm(xi: &[f64]) -> f64 {
    xi.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One-dimensional profile used by separable kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Indicator { half_width: f64 },
    Gaussian { sigma: f64 },
    /// `exp(1 − 1/(1 − (s/w)²))` on `|s| < w`.
    Bump { half_width: f64 },
}

impl Profile {
    pub fn eval(&self, s: f64) -> f64 {
        let s = s.abs();
        match *self {
            Profile::Indicator { half_width } => closed_indicator(s, half_width),
            Profile::Gaussian { sigma } => (-0.5 * (s / sigma).powi(2)).exp(),
            Profile::Bump { half_width } => bump(s / half_width),
        }
    }

    fn balanced(&self, s: f64) -> f64 {
        match *self {
            Profile::Indicator { half_width } => balanced_indicator(s.abs(), half_width),
            _ => (self.eval(s) > 0.0) as u8 as f64,
        }
    }

    pub fn extent(&self) -> Option<f64> {
        match *self {
            Profile::Indicator { half_width } | Profile::Bump { half_width } => Some(half_width),
            Profile::Gaussian { .. } => None,
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        let v = match *self {
            Profile::Indicator { half_width } | Profile::Bump { half_width } => half_width,
            Profile::Gaussian { sigma } => sigma,
        };
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::invalid(field, "profile width must be positive"));
        }
        Ok(())
    }
}

fn bump(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

/// Declared coercivity pair of (H0): `ψ ≥ c0` on `C_{r0}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coercivity {
    pub r0: f64,
    pub c0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelFamily {
    Zero,
    /// ψ ≡ 1; used when quadrature weights already carry the kernel.
    Unit,
    /// Indicator of `B_radius(c_α) × (c_d − h, c_d + h)`; `half_height: None`
    /// means the cylinder is unbounded vertically.
    Cylinder {
        radius: f64,
        half_height: Option<f64>,
        center: Vec<f64>,
    },
    /// `χ_{C}(ξ)|ξ|^{−p}` on a centred cylinder.
    CylinderOverNormP { radius: f64, half_height: f64, p: f64 },
    /// `φ(ξ)|ξ|^{−p}` with the standard bump `φ ∈ C_c^∞(B_1)`, `φ(0) = 1`.
    Mollifier { p: f64 },
    /// `ψ_α(|ξ_α|) ψ_d(ξ_d) |ξ|^{−p}`.
    Separable { planar: Profile, vertical: Profile, p: f64 },
    /// `χ_{C_1}(ξ)|ξ_d|^{−β}`.
    VerticalSingular { beta: f64 },
    /// `ξ ↦ inner(ξ_α, 0)`.
    PlanarCut { inner: Box<Kernel> },
    Sum { parts: Vec<(f64, Kernel)> },
}

/// Interaction kernel ψ on `ℝ^d` with optional envelope ρ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub dim: usize,
    pub family: KernelFamily,
    pub coercivity: Option<Coercivity>,
    pub rho: Option<Box<Kernel>>,
}

impl Kernel {
    fn new(dim: usize, family: KernelFamily, coercivity: Option<Coercivity>) -> Self {
        Kernel {
            dim,
            family,
            coercivity,
            rho: None,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(dim, KernelFamily::Zero, None)
    }

    pub fn unit(dim: usize) -> Self {
        Self::new(dim, KernelFamily::Unit, None)
    }

    /// `χ_{C_r}` with `C_r = B_r × (−r, r)`.
    pub fn cylinder_indicator(dim: usize, r: f64) -> Self {
        Self::new(
            dim,
            KernelFamily::Cylinder {
                radius: r,
                half_height: Some(r),
                center: vec![0.0; dim],
            },
            Some(Coercivity { r0: r, c0: 1.0 }),
        )
    }

    pub fn cylinder(dim: usize, radius: f64, half_height: f64, center: Vec<f64>) -> Self {
        Self::new(
            dim,
            KernelFamily::Cylinder {
                radius,
                half_height: Some(half_height),
                center,
            },
            None,
        )
    }

    /// `χ_{B_r}(ξ_α)`, independent of `ξ_d`.
    pub fn planar_disk(dim: usize, r: f64) -> Self {
        Self::new(
            dim,
            KernelFamily::Cylinder {
                radius: r,
                half_height: None,
                center: vec![0.0; dim],
            },
            Some(Coercivity { r0: r, c0: 1.0 }),
        )
    }

    pub fn cylinder_over_norm_p(dim: usize, r: f64, p: f64) -> Self {
        Self::new(
            dim,
            KernelFamily::CylinderOverNormP {
                radius: r,
                half_height: r,
                p,
            },
            Some(Coercivity {
                r0: r,
                c0: (2f64.sqrt() * r).powf(-p),
            }),
        )
    }

    pub fn mollifier_over_norm_p(dim: usize, p: f64) -> Self {
        // on C_{1/2}, |ξ|² ≤ 1/2 so φ ≥ e^{-1} and |ξ|^{-p} ≥ 1
        Self::new(dim, KernelFamily::Mollifier { p }, Some(Coercivity { r0: 0.5, c0: 0.25 }))
    }

    pub fn separable(dim: usize, planar: Profile, vertical: Profile, p: f64) -> Self {
        let r0 = 0.5
            * planar
                .extent()
                .unwrap_or(f64::INFINITY)
                .min(vertical.extent().unwrap_or(f64::INFINITY))
                .min(1.0);
        let c0 = 0.5 * planar.eval(r0) * vertical.eval(r0) * (2f64.sqrt() * r0).powf(-p);
        Self::new(
            dim,
            KernelFamily::Separable { planar, vertical, p },
            Some(Coercivity { r0, c0 }),
        )
    }

    pub fn vertical_singular(dim: usize, beta: f64) -> Self {
        Self::new(
            dim,
            KernelFamily::VerticalSingular { beta },
            Some(Coercivity { r0: 0.5, c0: 1.0 }),
        )
    }

    pub fn sum(dim: usize, parts: Vec<(f64, Kernel)>) -> Self {
        Self::new(dim, KernelFamily::Sum { parts }, None)
    }

    pub fn with_coercivity(mut self, r0: f64, c0: f64) -> Self {
        self.coercivity = Some(Coercivity { r0, c0 });
        self
    }

    pub fn with_rho(mut self, rho: Kernel) -> Self {
        self.rho = Some(Box::new(rho));
        self
    }

    /// Restriction to the plane `ξ_d = 0`, extended constantly in `ξ_d`.
    pub fn planar_cut(&self) -> Kernel {
        let mut k = Kernel::new(
            self.dim,
            KernelFamily::PlanarCut {
                inner: Box::new(self.clone()),
            },
            self.coercivity,
        );
        k.rho = self.rho.as_ref().map(|r| Box::new(r.planar_cut()));
        k
    }

    pub fn family_tag(&self) -> &'static str {
        match self.family {
            KernelFamily::Zero => "zero",
            KernelFamily::Unit => "unit",
            KernelFamily::Cylinder { .. } => "cylinder_indicator",
            KernelFamily::CylinderOverNormP { .. } => "cylinder_over_norm_p",
            KernelFamily::Mollifier { .. } => "mollifier_over_norm_p",
            KernelFamily::Separable { .. } => "separable",
            KernelFamily::VerticalSingular { .. } => "vertical_singular",
            KernelFamily::PlanarCut { .. } => "planar_cut",
            KernelFamily::Sum { .. } => "sum",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::invalid("kernel.dim", "need d ≥ 2"));
        }
        let pos = |v: f64, f: &str| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(f, "must be positive"))
            }
        };
        match &self.family {
            KernelFamily::Cylinder {
                radius,
                half_height,
                center,
            } => {
                pos(*radius, "kernel.r")?;
                if let Some(h) = half_height {
                    pos(*h, "kernel.half_height")?;
                }
                if center.len() != self.dim {
                    return Err(Error::invalid("kernel.center", "length must equal d"));
                }
            }
            KernelFamily::CylinderOverNormP { radius, p, .. } => {
                pos(*radius, "kernel.r")?;
                pos(*p, "kernel.p")?;
            }
            KernelFamily::Mollifier { p } => pos(*p, "kernel.p")?,
            KernelFamily::Separable { planar, vertical, p } => {
                planar.validate("kernel.planar")?;
                vertical.validate("kernel.vertical")?;
                pos(*p, "kernel.p")?;
            }
            KernelFamily::VerticalSingular { beta } => {
                if !(*beta > 0.0 && *beta < 1.0) {
                    return Err(Error::invalid("kernel.beta", "must lie in (0, 1)"));
                }
            }
            KernelFamily::PlanarCut { inner } => inner.validate()?,
            KernelFamily::Sum { parts } => {
                for (w, k) in parts {
                    if !(*w >= 0.0) {
                        return Err(Error::invalid("kernel.parts", "weights must be nonnegative"));
                    }
                    k.validate()?;
                }
            }
            KernelFamily::Zero | KernelFamily::Unit => {}
        }
        Ok(())
    }

    /// ψ(ξ), with indicators taken on the closed support.
    pub fn eval(&self, xi: &[f64]) -> f64 {
        match &self.family {
            KernelFamily::Zero => 0.0,
            KernelFamily::Unit => 1.0,
            KernelFamily::Cylinder {
                radius,
                half_height,
                center,
            } => {
                let (r, t) = offset_parts(xi, center);
                closed_indicator(r, *radius) * half_height.map_or(1.0, |h| closed_indicator(t.abs(), h))
            }
            KernelFamily::CylinderOverNormP { radius, half_height, p } => {
                let inside = closed_indicator(planar_norm(xi), *radius) * closed_indicator(xi[xi.len() - 1].abs(), *half_height);
                if inside == 0.0 {
                    0.0
                } else {
                    norm(xi).powf(-p)
                }
            }
            KernelFamily::Mollifier { p } => {
                let n = norm(xi);
                if n >= 1.0 {
                    0.0
                } else {
                    bump(n) * n.powf(-p)
                }
            }
            KernelFamily::Separable { planar, vertical, p } => {
                let a = planar.eval(planar_norm(xi)) * vertical.eval(xi[xi.len() - 1]);
                if a == 0.0 {
                    0.0
                } else {
                    a * norm(xi).powf(-p)
                }
            }
            KernelFamily::VerticalSingular { beta } => {
                let t = xi[xi.len() - 1].abs();
                if closed_indicator(planar_norm(xi), 1.0) * closed_indicator(t, 1.0) == 0.0 {
                    0.0
                } else {
                    t.powf(-beta)
                }
            }
            KernelFamily::PlanarCut { inner } => inner.eval(&flatten(xi)),
            KernelFamily::Sum { parts } => parts.iter().map(|(w, k)| w * k.eval(xi)).sum(),
        }
    }

    /// `ψ(ξ)|ξ|^p`, finite wherever the product is.
    pub fn weighted(&self, xi: &[f64], p: f64) -> f64 {
        let n = norm(xi);
        match &self.family {
            KernelFamily::CylinderOverNormP { radius, half_height, p: q } => {
                let inside = closed_indicator(planar_norm(xi), *radius) * closed_indicator(xi[xi.len() - 1].abs(), *half_height);
                inside * pow_ratio(n, p, *q)
            }
            KernelFamily::Mollifier { p: q } => {
                if n >= 1.0 {
                    0.0
                } else {
                    bump(n) * pow_ratio(n, p, *q)
                }
            }
            KernelFamily::Separable { planar, vertical, p: q } => {
                planar.eval(planar_norm(xi)) * vertical.eval(xi[xi.len() - 1]) * pow_ratio(n, p, *q)
            }
            KernelFamily::PlanarCut { inner } => {
                // ψ depends on ξ_α only; |ξ|^p keeps the full norm
                let v = inner.eval(&flatten(xi));
                if v == 0.0 {
                    0.0
                } else {
                    v * n.powf(p)
                }
            }
            KernelFamily::Sum { parts } => parts.iter().map(|(w, k)| w * k.weighted(xi, p)).sum(),
            _ => {
                let v = self.eval(xi);
                if v == 0.0 {
                    0.0
                } else {
                    v * n.powf(p)
                }
            }
        }
    }

    pub fn rho_eval(&self, xi: &[f64]) -> f64 {
        self.rho.as_ref().map_or(0.0, |r| r.eval(xi))
    }

    /// Fraction of a lattice cell centred at ξ lying in the support.
    pub fn support_weight(&self, xi: &[f64]) -> f64 {
        self.support_weight_truncated(xi, f64::INFINITY)
    }

    /// As [`Kernel::support_weight`] for the support intersected with
    /// `{|ξ_α| < t}`.
    pub fn support_weight_truncated(&self, xi: &[f64], t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let rp = planar_norm(xi);
        let trunc = if t.is_infinite() { 1.0 } else { balanced_indicator(rp, t) };
        match &self.family {
            KernelFamily::Zero => 0.0,
            KernelFamily::Unit => trunc,
            KernelFamily::Cylinder {
                radius,
                half_height,
                center,
            } => {
                let (r, tt) = offset_parts(xi, center);
                let vertical = half_height.map_or(1.0, |h| balanced_indicator(tt.abs(), h));
                let on_axis = center[..center.len() - 1].iter().all(|&c| c == 0.0);
                let planar = if on_axis {
                    balanced_indicator(r, radius.min(t))
                } else {
                    balanced_indicator(r, *radius) * trunc
                };
                planar * vertical
            }
            KernelFamily::CylinderOverNormP { radius, half_height, .. } => {
                balanced_indicator(rp, radius.min(t)) * balanced_indicator(xi[xi.len() - 1].abs(), *half_height)
            }
            KernelFamily::VerticalSingular { .. } => {
                balanced_indicator(rp, t.min(1.0)) * balanced_indicator(xi[xi.len() - 1].abs(), 1.0)
            }
            KernelFamily::Mollifier { .. } => ((norm(xi) < 1.0) as u8 as f64) * trunc,
            KernelFamily::Separable { planar, vertical, .. } => {
                let pl = match planar {
                    Profile::Indicator { half_width } => balanced_indicator(rp, half_width.min(t)),
                    other => other.balanced(rp) * trunc,
                };
                pl * vertical.balanced(xi[xi.len() - 1])
            }
            KernelFamily::PlanarCut { inner } => inner.support_weight_truncated(&flatten(xi), t),
            KernelFamily::Sum { parts } => parts
                .iter()
                .filter(|(w, _)| *w > 0.0)
                .map(|(_, k)| k.support_weight_truncated(xi, t))
                .fold(0.0, f64::max),
        }
    }

    /// Average of ψ over the cell `ξ + [−half, half]`, restricted to the
    /// support fraction. Exact in the vertical variable for the singular
    /// family; midpoint value elsewhere.
    pub fn cell_average(&self, xi: &[f64], half: &[f64]) -> f64 {
        match &self.family {
            KernelFamily::Cylinder { .. } => self.support_weight(xi),
            KernelFamily::VerticalSingular { beta } => {
                let frac = self.support_weight(xi);
                if frac == 0.0 {
                    return 0.0;
                }
                let c = xi[xi.len() - 1];
                let h = half[half.len() - 1];
                if h <= 0.0 {
                    return frac * c.abs().powf(-beta);
                }
                let anti = |x: f64| x.signum() * x.abs().powf(1.0 - beta) / (1.0 - beta);
                frac * (anti(c + h) - anti(c - h)) / (2.0 * h)
            }
            _ => {
                let w = self.support_weight(xi);
                if w == 0.0 {
                    0.0
                } else {
                    w * self.eval(xi)
                }
            }
        }
    }

    pub fn planar_support_radius(&self) -> Option<f64> {
        match &self.family {
            KernelFamily::Zero => Some(0.0),
            KernelFamily::Unit => None,
            KernelFamily::Cylinder { radius, center, .. } => {
                Some(radius + center[..center.len() - 1].iter().map(|c| c * c).sum::<f64>().sqrt())
            }
            KernelFamily::CylinderOverNormP { radius, .. } => Some(*radius),
            KernelFamily::Mollifier { .. } | KernelFamily::VerticalSingular { .. } => Some(1.0),
            KernelFamily::Separable { planar, .. } => planar.extent(),
            KernelFamily::PlanarCut { inner } => inner.planar_support_radius(),
            KernelFamily::Sum { parts } => max_opt(parts.iter().map(|(_, k)| k.planar_support_radius())),
        }
    }

    pub fn vertical_support_halfheight(&self) -> Option<f64> {
        match &self.family {
            KernelFamily::Zero => Some(0.0),
            KernelFamily::Unit | KernelFamily::PlanarCut { .. } => None,
            KernelFamily::Cylinder { half_height, center, .. } => half_height.map(|h| h + center[center.len() - 1].abs()),
            KernelFamily::CylinderOverNormP { half_height, .. } => Some(*half_height),
            KernelFamily::Mollifier { .. } | KernelFamily::VerticalSingular { .. } => Some(1.0),
            KernelFamily::Separable { vertical, .. } => vertical.extent(),
            KernelFamily::Sum { parts } => max_opt(parts.iter().map(|(_, k)| k.vertical_support_halfheight())),
        }
    }

    /// Whether ψ depends on `ξ_α` through `|ξ_α|` only.
    pub fn is_planar_radial(&self) -> bool {
        match &self.family {
            KernelFamily::Cylinder { center, .. } => center[..center.len() - 1].iter().all(|&c| c == 0.0),
            KernelFamily::PlanarCut { inner } => inner.is_planar_radial(),
            KernelFamily::Sum { parts } => parts.iter().all(|(_, k)| k.is_planar_radial()),
            _ => true,
        }
    }

    /// Whether ψ(ξ_α, ξ_d) = ψ(ξ_α, −ξ_d).
    pub fn is_vertically_even(&self) -> bool {
        match &self.family {
            KernelFamily::Cylinder { center, .. } => center[center.len() - 1] == 0.0,
            KernelFamily::PlanarCut { .. } => true,
            KernelFamily::Sum { parts } => parts.iter().all(|(_, k)| k.is_vertically_even()),
            _ => true,
        }
    }

    /// Bounded cylinders `(center, radius, half_height)` covering the
    /// support, used for sampling.
    pub fn components(&self) -> Vec<(Vec<f64>, f64, f64)> {
        let d = self.dim;
        let unit = |r: f64, h: f64| vec![(vec![0.0; d], r, h)];
        match &self.family {
            KernelFamily::Zero => vec![],
            KernelFamily::Unit => unit(1.0, 1.0),
            KernelFamily::Cylinder {
                radius,
                half_height,
                center,
            } => vec![(center.clone(), *radius, half_height.unwrap_or(2.0))],
            KernelFamily::CylinderOverNormP { radius, half_height, .. } => unit(*radius, *half_height),
            KernelFamily::Mollifier { .. } | KernelFamily::VerticalSingular { .. } => unit(1.0, 1.0),
            KernelFamily::Separable { planar, vertical, .. } => {
                let w = |p: &Profile| match p {
                    Profile::Gaussian { sigma } => 3.0 * sigma,
                    other => other.extent().unwrap_or(1.0),
                };
                unit(w(planar), w(vertical))
            }
            KernelFamily::PlanarCut { inner } => inner
                .components()
                .into_iter()
                .map(|(mut c, r, _)| {
                    c[d - 1] = 0.0;
                    (c, r, 2.0)
                })
                .collect(),
            KernelFamily::Sum { parts } => parts
                .iter()
                .filter(|(w, _)| *w > 0.0)
                .flat_map(|(_, k)| k.components())
                .collect(),
        }
    }

    /// Planar radius beyond which ψ vanishes at height `t` (None: unbounded).
    fn rho_limit(&self, t: f64) -> Option<f64> {
        match &self.family {
            KernelFamily::Mollifier { .. } => Some((1.0 - t * t).max(0.0).sqrt()),
            KernelFamily::Sum { parts } => max_opt(parts.iter().map(|(_, k)| k.rho_limit(t))),
            _ => self.planar_support_radius(),
        }
    }

    fn t_breakpoints(&self) -> Vec<f64> {
        let mut out = vec![0.0];
        match &self.family {
            KernelFamily::Sum { parts } => {
                for (_, k) in parts {
                    out.extend(k.t_breakpoints());
                }
            }
            KernelFamily::Cylinder {
                half_height: Some(h),
                center,
                ..
            } => {
                let c = center[center.len() - 1];
                out.extend([c - h, c + h]);
            }
            _ => {
                if let Some(h) = self.vertical_support_halfheight() {
                    out.extend([-h, h]);
                }
            }
        }
        out
    }

    fn rho_breakpoints(&self) -> Vec<f64> {
        match &self.family {
            KernelFamily::Sum { parts } => parts.iter().flat_map(|(_, k)| k.rho_breakpoints()).collect(),
            _ => self.planar_support_radius().into_iter().collect(),
        }
    }
}

fn pow_ratio(n: f64, p: f64, q: f64) -> f64 {
    if p == q {
        1.0
    } else if n == 0.0 {
        if p > q {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        n.powf(p - q)
    }
}

fn offset_parts(xi: &[f64], center: &[f64]) -> (f64, f64) {
    let d = xi.len();
    let r = (0..d - 1).map(|a| (xi[a] - center[a]).powi(2)).sum::<f64>().sqrt();
    (r, xi[d - 1] - center[d - 1])
}

fn flatten(xi: &[f64]) -> Vec<f64> {
    let mut v = xi.to_vec();
    let d = v.len();
    v[d - 1] = 0.0;
    v
}

fn max_opt(it: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut m: f64 = 0.0;
    for v in it {
        m = m.max(v?);
    }
    Some(m)
}

// ---------------------------------------------------------------------------
// quadrature

const QUAD_TOL: f64 = 1e-12;

fn de<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    double_exponential::integrate(f, a, b, QUAD_TOL * (b - a).max(1.0)).integral
}

fn de_pieces<F: Fn(f64) -> f64>(f: &F, pts: &[f64]) -> f64 {
    pts.windows(2).map(|w| de(f, w[0], w[1])).sum()
}

/// `∫_a^∞ f`, summed over doubling intervals; `Err` when the pieces do not
/// become negligible.
fn de_to_infinity<F: Fn(f64) -> f64>(f: &F, a: f64, what: &str) -> Result<f64> {
    let mut total = 0.0;
    let mut lo = a;
    let mut len = 1.0;
    for it in 0..48 {
        let piece = de(f, lo, lo + len);
        total += piece;
        if it >= 2 && piece.abs() <= 1e-14 * total.abs().max(1e-300) {
            return Ok(total);
        }
        if it >= 2 && piece == 0.0 && total == 0.0 {
            return Ok(0.0);
        }
        lo += len;
        len *= 2.0;
    }
    Err(Error::Divergent(format!("{what}: partial integrals fail the Cauchy test at radius {lo:e}")))
}

fn sphere_area(n: usize) -> f64 {
    // area of the unit sphere in ℝ^{n+1}
    use std::f64::consts::PI;
    match n {
        0 => 2.0,
        1 => 2.0 * PI,
        2 => 4.0 * PI,
        3 => 2.0 * PI * PI,
        _ => {
            // S_n = 2 π^{(n+1)/2} / Γ((n+1)/2), via the recursion S_n = 2π/(n−1) S_{n−2}
            let mut s = if n.is_multiple_of(2) { 4.0 * PI } else { 2.0 * PI * PI };
            let mut k = if n.is_multiple_of(2) { 2 } else { 3 };
            while k < n {
                k += 2;
                s *= 2.0 * PI / (k as f64 - 1.0);
            }
            s
        }
    }
}

fn radial_point(d: usize, rho: f64, t: f64) -> Vec<f64> {
    let mut xi = vec![0.0; d];
    xi[0] = rho;
    xi[d - 1] = t;
    xi
}

/// `∫_{|ξ_α| > r0} g(ξ_α, t) dξ_α` for a planar-radial integrand with
/// support ending at `limit`.
fn planar_integral<G: Fn(&[f64]) -> f64>(
    d: usize,
    g: &G,
    t: f64,
    r0: f64,
    limit: Option<f64>,
    breaks: &[f64],
    what: &str,
) -> Result<f64> {
    let s = sphere_area(d - 2);
    let f = |rho: f64| {
        let xi = radial_point(d, rho, t);
        rho.powi(d as i32 - 2) * g(&xi)
    };
    match limit {
        Some(l) => {
            if l <= r0 {
                return Ok(0.0);
            }
            let mut pts = vec![r0];
            pts.extend(breaks.iter().copied().filter(|&b| b > r0 && b < l));
            pts.push(l);
            pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            pts.dedup();
            Ok(s * de_pieces(&f, &pts))
        }
        None => {
            let mut pts = vec![r0];
            pts.extend(breaks.iter().copied().filter(|&b| b > r0));
            pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            pts.dedup();
            let last = *pts.last().unwrap();
            Ok(s * (de_pieces(&f, &pts) + de_to_infinity(&f, last, what)?))
        }
    }
}

fn require_radial(kernel: &Kernel) -> Result<()> {
    if !kernel.is_planar_radial() || kernel.rho.as_ref().is_some_and(|r| !r.is_planar_radial()) {
        return Err(Error::Unsupported(
            "kernel statistics need a kernel depending on ξ_α through |ξ_α| only".into(),
        ));
    }
    Ok(())
}

/// Slice integral `∫_{|ξ_α|>r0} (ψ|ξ|^p + ρ) dξ_α` at height `t`.
pub fn slice_integral(kernel: &Kernel, p: f64, t: f64, r0: f64, with_rho: bool) -> Result<f64> {
    require_radial(kernel)?;
    let d = kernel.dim;
    let g = |xi: &[f64]| kernel.weighted(xi, p);
    let mut v = planar_integral(d, &g, t, r0, kernel.rho_limit(t), &kernel.rho_breakpoints(), "slice integral")?;
    if with_rho {
        if let Some(rho) = &kernel.rho {
            let gr = |xi: &[f64]| rho.eval(xi);
            v += planar_integral(d, &gr, t, r0, rho.rho_limit(t), &rho.rho_breakpoints(), "slice integral")?;
        }
    }
    Ok(v)
}

fn t_integral(kernel: &Kernel, p: f64, r0: f64, with_rho: bool, cut: f64) -> Result<f64> {
    let mut brk = kernel.t_breakpoints();
    if let Some(r) = &kernel.rho {
        if with_rho {
            brk.extend(r.t_breakpoints());
        }
    }
    let vh = match (kernel.vertical_support_halfheight(), with_rho.then_some(kernel.rho.as_ref()).flatten()) {
        (Some(h), None) => Some(h),
        (Some(h), Some(r)) => r.vertical_support_halfheight().map(|hr| h.max(hr)),
        _ => None,
    };
    let err = std::cell::RefCell::new(None);
    let f = |t: f64| {
        if t.abs() < cut {
            return 0.0;
        }
        match slice_integral(kernel, p, t, r0, with_rho) {
            Ok(v) => v,
            Err(e) => {
                err.borrow_mut().get_or_insert(e);
                0.0
            }
        }
    };
    brk.push(cut);
    brk.push(-cut);
    brk.retain(|b| b.is_finite());
    brk.sort_by(|a, b| a.partial_cmp(b).unwrap());
    brk.dedup();
    let total = match vh {
        Some(h) => {
            let mut pts: Vec<f64> = brk.into_iter().filter(|b| b.abs() < h).collect();
            pts.insert(0, -h);
            pts.push(h);
            de_pieces(&f, &pts)
        }
        None => {
            let lo = brk[0];
            let hi = *brk.last().unwrap();
            let neg = |s: f64| f(-s);
            de_pieces(&f, &brk) + de_to_infinity(&f, hi, "moment")? + de_to_infinity(&neg, -lo, "moment")?
        }
    };
    if let Some(e) = err.into_inner() {
        return Err(e);
    }
    Ok(total)
}

/// Integral of the `ξ_d`-slices, checked for growth as the excluded band
/// `|ξ_d| < 2^{−L}` shrinks with `L ∈ {8, 16, 32}`.
fn moment_impl(kernel: &Kernel, p: f64, r0: f64, with_rho: bool) -> Result<f64> {
    require_radial(kernel)?;
    let levels = [8, 16, 32].map(|l| t_integral(kernel, p, r0, with_rho, 2f64.powi(-l)));
    let vals: Vec<f64> = levels.into_iter().collect::<Result<_>>()?;
    if growth_detected(&vals) {
        return Err(Error::Divergent(format!(
            "partial integrals {:?} grow under refinement of the band around ξ_d = 0",
            vals
        )));
    }
    let full = t_integral(kernel, p, r0, with_rho, 0.0)?;
    if !full.is_finite() {
        return Err(Error::Divergent("non-finite integral".into()));
    }
    Ok(full)
}

/// Two consecutive growth ratios above 1.5 under factor-2 refinement.
fn growth_detected(vals: &[f64]) -> bool {
    vals.windows(2).all(|w| w[0] > 0.0 && w[1] > 1.5 * w[0])
}

/// `∫ ψ(ξ)|ξ|^p dξ`.
pub fn moment_p(kernel: &Kernel, p: f64) -> Result<f64> {
    moment_impl(kernel, p, 0.0, false)
}

/// `∫_{|ξ_α| > r} (ψ(ξ)|ξ|^p + ρ(ξ)) dξ`.
pub fn tail_moment(kernel: &Kernel, p: f64, r: f64) -> Result<f64> {
    if let Some(rs) = kernel.planar_support_radius() {
        let rr = kernel.rho.as_ref().map_or(Some(0.0), |k| k.planar_support_radius());
        if rr.is_some_and(|rr| r >= rs.max(rr)) {
            return Ok(0.0);
        }
    }
    moment_impl(kernel, p, r, true)
}

/// Supremum of the slice integrals over the sample grid, with the
/// refinement-growth verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceStatistic {
    pub sup: f64,
    pub argsup: f64,
    pub divergent: bool,
    /// `(depth, ξ_d, slice value)` of the maximiser at each refinement depth.
    pub witness: Vec<(u32, f64, f64)>,
}

fn slice_grid(depth: u32) -> Vec<f64> {
    let mut ts: Vec<f64> = (1..64).map(|j| j as f64 / 32.0).collect();
    ts.extend((6..=depth).map(|l| 2f64.powi(-(l as i32))));
    let mut both: Vec<f64> = ts.iter().map(|t| -t).collect();
    both.extend(ts);
    both
}

pub fn vertical_slice_statistic(kernel: &Kernel, p: f64, tail_radius: Option<f64>) -> Result<SliceStatistic> {
    require_radial(kernel)?;
    let r0 = tail_radius.unwrap_or(0.0);
    let mut sups = Vec::new();
    let mut witness = Vec::new();
    let mut best = (0.0, 0.0);
    for depth in [8u32, 16, 32] {
        let mut s = (f64::NEG_INFINITY, 0.0);
        for t in slice_grid(depth) {
            let v = slice_integral(kernel, p, t, r0, true)?;
            if v > s.0 {
                s = (v, t);
            }
        }
        sups.push(s.0);
        witness.push((depth, s.1, s.0));
        best = s;
    }
    let divergent = growth_detected(&sups) || !best.0.is_finite();
    Ok(SliceStatistic {
        sup: best.0.max(0.0),
        argsup: best.1,
        divergent,
        witness,
    })
}

/// `sup_{|ξ_d|<2} ∫ (ψ|ξ|^p + ρ) dξ_α`, restricted to `|ξ_α| > tail_radius`.
pub fn vertical_slice_sup(kernel: &Kernel, p: f64, tail_radius: Option<f64>) -> Result<f64> {
    let s = vertical_slice_statistic(kernel, p, tail_radius)?;
    if s.divergent {
        return Err(Error::Divergent(format!(
            "divergent slice sup; witnessing (depth, ξ_d, value): {:?}",
            s.witness
        )));
    }
    Ok(s.sup)
}

// ---------------------------------------------------------------------------
// audit

pub const ETA_LADDER: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub pass: bool,
    pub statistic: f64,
    pub tolerance: f64,
    pub divergent: bool,
    pub note: Option<String>,
    /// Witness radii `r_η` for the η-ladder (H2, H4).
    pub radii: Vec<Option<f64>>,
}

impl HypothesisCheck {
    fn failed(note: String) -> Self {
        HypothesisCheck {
            pass: false,
            statistic: f64::NAN,
            tolerance: 0.0,
            divergent: false,
            note: Some(note),
            radii: vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub family: String,
    pub p: f64,
    pub eta_ladder: Vec<f64>,
    pub h0: HypothesisCheck,
    pub h1: HypothesisCheck,
    pub h2: HypothesisCheck,
    pub h3: HypothesisCheck,
    pub h4: HypothesisCheck,
}

impl HypothesisReport {
    pub fn all_pass(&self) -> bool {
        [&self.h0, &self.h1, &self.h2, &self.h3, &self.h4].iter().all(|h| h.pass)
    }
}

fn radius_schedule() -> Vec<f64> {
    (0..40).map(|j| 0.25 * 2f64.powi(j)).collect()
}

fn eta_witnesses(f: impl Fn(f64) -> Result<f64>, support: Option<f64>) -> Result<Vec<Option<f64>>> {
    let mut sched = radius_schedule();
    if let Some(s) = support {
        sched.push(s);
        sched.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    let mut out = vec![None; ETA_LADDER.len()];
    for r in sched {
        let v = f(r)?;
        for (i, eta) in ETA_LADDER.iter().enumerate() {
            if out[i].is_none() && v < *eta {
                out[i] = Some(r);
            }
        }
        if out.iter().all(|o| o.is_some()) {
            break;
        }
    }
    Ok(out)
}

/// Evaluate (H0)–(H4) for `kernel` at exponent `p`. Failures are report
/// entries; (H0) is certified on the sample grid only.
pub fn audit_hypotheses(kernel: &Kernel, p: f64) -> HypothesisReport {
    let d = kernel.dim;
    let h0 = match kernel.coercivity {
        None => HypothesisCheck::failed("no coercivity pair declared".into()),
        Some(Coercivity { r0, c0 }) => {
            let n = 9;
            let pts: Vec<f64> = (0..n).map(|j| r0 * (-1.0 + (2 * j + 1) as f64 / n as f64)).collect();
            let mut min = f64::INFINITY;
            let mut idx = vec![0usize; d];
            loop {
                let xi: Vec<f64> = idx.iter().map(|&j| pts[j]).collect();
                if planar_norm(&xi) < r0 {
                    min = min.min(kernel.eval(&xi));
                }
                let mut a = d;
                let done = loop {
                    if a == 0 {
                        break true;
                    }
                    a -= 1;
                    idx[a] += 1;
                    if idx[a] < n {
                        break false;
                    }
                    idx[a] = 0;
                };
                if done {
                    break;
                }
            }
            HypothesisCheck {
                pass: min >= c0,
                statistic: min,
                tolerance: c0,
                divergent: false,
                note: Some(format!("sampled on a {n}^{d} grid inside C_{r0}")),
                radii: vec![],
            }
        }
    };
    let h1 = match moment_p(kernel, p) {
        Ok(v) => HypothesisCheck {
            pass: v.is_finite(),
            statistic: v,
            tolerance: 1e-4,
            divergent: false,
            note: None,
            radii: vec![],
        },
        Err(e) => HypothesisCheck {
            divergent: matches!(e, Error::Divergent(_)),
            ..HypothesisCheck::failed(e.to_string())
        },
    };
    let support = kernel.planar_support_radius();
    let h2 = match eta_witnesses(|r| tail_moment(kernel, p, r), support) {
        Ok(radii) => HypothesisCheck {
            pass: radii.iter().all(|r| r.is_some()),
            statistic: tail_moment(kernel, p, 0.0).unwrap_or(f64::NAN),
            tolerance: *ETA_LADDER.last().unwrap(),
            divergent: false,
            note: None,
            radii,
        },
        Err(e) => HypothesisCheck::failed(e.to_string()),
    };
    let (h3, h3_ok) = match vertical_slice_statistic(kernel, p, None) {
        Ok(s) => (
            HypothesisCheck {
                pass: !s.divergent,
                statistic: s.sup,
                tolerance: 1.5,
                divergent: s.divergent,
                note: s.divergent.then(|| format!("divergent slice sup; witnessing (depth, ξ_d, value): {:?}", s.witness)),
                radii: vec![],
            },
            !s.divergent,
        ),
        Err(e) => (HypothesisCheck::failed(e.to_string()), false),
    };
    let h4 = if !h3_ok {
        HypothesisCheck::failed("slice supremum not finite".into())
    } else {
        match eta_witnesses(|r| vertical_slice_sup(kernel, p, Some(r)), support) {
            Ok(radii) => HypothesisCheck {
                pass: radii.iter().all(|r| r.is_some()),
                statistic: h3.statistic,
                tolerance: *ETA_LADDER.last().unwrap(),
                divergent: false,
                note: None,
                radii,
            },
            Err(e) => HypothesisCheck::failed(e.to_string()),
        }
    };
    HypothesisReport {
        family: kernel.family_tag().to_string(),
        p,
        eta_ladder: ETA_LADDER.to_vec(),
        h0,
        h1,
        h2,
        h3,
        h4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn cylinder_moment_closed_form() {
        let k = Kernel::cylinder_indicator(2, 1.0);
        // ∫∫_{[-1,1]²} (s² + t²) = 8/3
        assert!(rel(moment_p(&k, 2.0).unwrap(), 8.0 / 3.0) < 1e-8);
        // d = 3: ∫_{B_1}∫_{-1}^{1} (ρ² + t²) = 2·π/2 + π·2/3
        let k3 = Kernel::cylinder_indicator(3, 1.0);
        let want = 2.0 * std::f64::consts::PI / 2.0 + std::f64::consts::PI * 2.0 / 3.0;
        assert!(rel(moment_p(&k3, 2.0).unwrap(), want) < 1e-8);
    }

    #[test]
    fn zero_kernel_statistics_vanish() {
        let k = Kernel::zero(2);
        assert_eq!(moment_p(&k, 2.0).unwrap(), 0.0);
        assert_eq!(vertical_slice_sup(&k, 2.0, None).unwrap(), 0.0);
    }

    #[test]
    fn singular_moment_matches_brute_force() {
        // oracle: midpoint refinement in t with the exact planar integral,
        // split at the singularity; ∫|t|^{-1/2}(2/3 + 2t²) = 64/15
        let k = Kernel::vertical_singular(2, 0.5);
        let got = moment_p(&k, 2.0).unwrap();
        let n = 200_000;
        let mut brute = 0.0;
        for j in 0..n {
            let t = (j as f64 + 0.5) / n as f64;
            brute += 2.0 * t.powf(-0.5) * (2.0 / 3.0 + 2.0 * t * t) / n as f64;
        }
        assert!(rel(got, brute) < 5e-3, "{got} vs {brute}");
        assert!(rel(got, 64.0 / 15.0) < 1e-6);
    }

    #[test]
    fn tail_moment_properties() {
        let k = Kernel::cylinder_indicator(2, 1.0);
        assert_eq!(tail_moment(&k, 2.0, 1.0).unwrap(), 0.0);
        assert!(rel(tail_moment(&k, 2.0, 0.0).unwrap(), moment_p(&k, 2.0).unwrap()) < 1e-10);
        let a = tail_moment(&k, 2.0, 0.25).unwrap();
        let b = tail_moment(&k, 2.0, 0.5).unwrap();
        assert!(a >= b && b > 0.0);
    }

    #[test]
    fn gaussian_tail_decays_geometrically() {
        let k = Kernel::separable(
            2,
            Profile::Gaussian { sigma: 0.5 },
            Profile::Gaussian { sigma: 0.5 },
            2.0,
        );
        let mut prev = tail_moment(&k, 2.0, 0.5).unwrap();
        for r in [1.0, 2.0] {
            let v = tail_moment(&k, 2.0, r).unwrap();
            assert!(v <= 0.5 * prev, "r={r}: {v} vs {prev}");
            prev = v;
        }
    }

    #[test]
    fn separable_moment_factors() {
        let planar = Profile::Gaussian { sigma: 0.7 };
        let vertical = Profile::Bump { half_width: 0.8 };
        let k = Kernel::separable(2, planar.clone(), vertical.clone(), 2.0);
        let joint = moment_p(&k, 2.0).unwrap();
        // independent 1-D quadratures of each factor
        let fa = |s: f64| planar.eval(s);
        let fd = |s: f64| vertical.eval(s);
        let ia = 2.0 * (de(fa, 0.0, 1.0) + de_to_infinity(&fa, 1.0, "a").unwrap());
        let id = de(fd, -0.8, 0.8);
        assert!(rel(joint, ia * id) < 1e-6, "{joint} vs {}", ia * id);
    }

    #[test]
    fn cylinder_slice_sup_closed_form() {
        // slice at |t| ≤ 1: 2/3 + 2t², maximal at t = 1
        let k = Kernel::cylinder_indicator(2, 1.0);
        let s = vertical_slice_statistic(&k, 2.0, None).unwrap();
        assert!(!s.divergent);
        assert!(rel(s.sup, 8.0 / 3.0) < 1e-9);
    }

    #[test]
    fn singular_slice_diverges() {
        let k = Kernel::vertical_singular(2, 0.5);
        let s = vertical_slice_statistic(&k, 2.0, None).unwrap();
        assert!(s.divergent);
        // the witness values scale like |t|^{-1/2}
        let (_, t8, v8) = s.witness[0];
        let (_, t16, v16) = s.witness[1];
        let slope = (v16 / v8).ln() / (t16.abs() / t8.abs()).ln();
        assert!((slope + 0.5).abs() < 0.01, "{slope}");
        assert!(vertical_slice_sup(&k, 2.0, None).is_err());
    }

    #[test]
    fn audit_passes_example_kernels() {
        for k in [
            Kernel::cylinder_indicator(2, 1.0),
            Kernel::cylinder_indicator(2, 0.3),
            Kernel::cylinder_indicator(3, 2.0),
            Kernel::mollifier_over_norm_p(2, 2.0),
            Kernel::mollifier_over_norm_p(3, 2.0),
        ] {
            let r = audit_hypotheses(&k, 2.0);
            assert!(r.all_pass(), "{}: {:#?}", k.family_tag(), r);
        }
    }

    #[test]
    fn audit_flags_singular_kernel_on_h3() {
        let r = audit_hypotheses(&Kernel::vertical_singular(2, 0.5), 2.0);
        assert!(r.h1.pass);
        assert!(!r.h3.pass && r.h3.divergent);
    }

    #[test]
    fn audit_is_deterministic() {
        let k = Kernel::mollifier_over_norm_p(2, 2.0);
        assert_eq!(
            serde_json::to_string(&audit_hypotheses(&k, 2.0)).unwrap(),
            serde_json::to_string(&audit_hypotheses(&k, 2.0)).unwrap()
        );
    }

    #[test]
    fn balanced_support_weights() {
        let k = Kernel::cylinder_indicator(2, 1.0);
        assert_eq!(k.support_weight(&[0.5, 0.5]), 1.0);
        assert_eq!(k.support_weight(&[1.0, 0.5]), 0.5);
        assert_eq!(k.support_weight(&[1.0, 1.0]), 0.25);
        assert_eq!(k.support_weight(&[1.01, 0.0]), 0.0);
        assert_eq!(k.eval(&[1.0, 1.0]), 1.0);
        assert_eq!(k.support_weight_truncated(&[1.0, 0.0], 1.0), 0.5);
        assert_eq!(k.support_weight_truncated(&[0.5, 0.0], 0.5), 0.5);
    }

    #[test]
    fn singular_cell_average_is_exact() {
        let k = Kernel::vertical_singular(2, 0.5);
        // average of |t|^{-1/2} over [-h, h] is 2/√h
        let h = 0.01;
        let v = k.cell_average(&[0.2, 0.0], &[0.1, h]);
        assert!(rel(v, 2.0 / h.sqrt()) < 1e-12);
    }
}
