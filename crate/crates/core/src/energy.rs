//! Discrete nonlocal energies and their gradients.
//!
//! All functionals share one pair-sum engine, [`Functional`]:
//!
//! ```text
//! E(u) = prefactor · node_measure · Σ_k w_k Σ_{(s,t)} τ_st f(x_s, ξ_k, (u_t − u_s)/ε)
//! ```
//!
//! where `(s, t)` runs over the admissible pairs of stencil shift `k` and
//! `τ_st` is the trapezoid factor of the pair. Fields may carry an affine
//! part `A x` that is not stored on the nodes (periodic correctors); it then
//! enters every difference as `A·shift`.
//!
//! Per-offset partial sums are accumulated in lexicographic node order and
//! combined in stencil order over a fixed chunking, so results do not depend
//! on the number of threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densities::{Bound, Density};
use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::lattice::{build_stencil, for_each_pair, pair_plan, AxisPairs, Field, InteractionStencil, Lattice, PlanarRegion, StencilFrame};

/// Horizon ε, thickness γ and the derived ratio δ = ε/γ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    eps: f64,
    gamma: f64,
    delta: f64,
}

impl ScaleParams {
    pub fn new(eps: f64, gamma: f64) -> Result<Self> {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(Error::invalid("scale.eps", "must lie in (0, 1]"));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::invalid("scale.gamma", "must lie in (0, 1]"));
        }
        Ok(Self::raw(eps, gamma))
    }

    /// Unit interactions `ε = 1` with vertical ratio δ, as used by cell
    /// problems; here `γ = 1/δ` may exceed 1.
    pub fn unit_cell(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::invalid("delta", "must be positive and finite"));
        }
        Ok(ScaleParams {
            eps: 1.0,
            gamma: 1.0 / delta,
            delta,
        })
    }

    fn raw(eps: f64, gamma: f64) -> Self {
        ScaleParams {
            eps,
            gamma,
            delta: eps / gamma,
        }
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `ε/γ² ∨ 1/γ`.
    pub fn prefactor_physical(&self) -> f64 {
        (self.eps / (self.gamma * self.gamma)).max(1.0 / self.gamma)
    }

    /// `ε/γ ∨ 1`.
    pub fn prefactor_rescaled(&self) -> f64 {
        self.delta.max(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetTerm {
    pub offset: Vec<i64>,
    pub xi: Vec<f64>,
    /// `w_k Σ τ f`.
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub prefactor: f64,
    pub node_measure: f64,
    pub per_offset: Vec<OffsetTerm>,
}

impl EnergyBreakdown {
    /// `prefactor · node_measure · Σ per_offset`, summed in stencil order.
    pub fn rederived_total(&self) -> f64 {
        self.prefactor * self.node_measure * self.per_offset.iter().map(|t| t.value).sum::<f64>()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct Term {
    entry: usize,
    weight: f64,
    bound: Bound,
    plan: Vec<AxisPairs>,
    /// Physical displacement `k ∘ h` of the shift.
    shift: Vec<f64>,
}

const CHUNKS: usize = 64;

/// Pair-sum engine for one (density, stencil, lattice) triple.
pub struct Functional<'a> {
    density: &'a dyn Density,
    stencil: &'a InteractionStencil,
    lattice: &'a Lattice,
    m: usize,
    eps: f64,
    prefactor: f64,
    terms: Vec<Term>,
    need_x: bool,
}

/// Result of one pass of the engine.
pub struct Evaluation {
    pub total: f64,
    /// `w_k Σ τ f` for every stencil entry (0 for skipped entries).
    pub per_entry: Vec<f64>,
}

impl<'a> Functional<'a> {
    pub fn new(
        density: &'a dyn Density,
        stencil: &'a InteractionStencil,
        lattice: &'a Lattice,
        prefactor: f64,
        region: Option<&PlanarRegion>,
    ) -> Result<Self> {
        let meta = density.meta();
        let d = meta.d;
        let nd = lattice.ndim();
        if nd != d && nd + 1 != d {
            return Err(Error::Mismatch(format!("density dimension {d} vs lattice with {nd} axes")));
        }
        if meta.m > 8 {
            return Err(Error::Unsupported("codomain dimension above 8".into()));
        }
        if stencil.spacing.len() != nd
            || stencil
                .spacing
                .iter()
                .zip(&lattice.spacing)
                .any(|(a, b)| (a - b).abs() > 1e-12 * b.abs())
        {
            return Err(Error::Mismatch("stencil was built for a different lattice spacing".into()));
        }
        if stencil.xi_points.first().is_some_and(|x| x.len() != d) {
            return Err(Error::Mismatch("stencil ξ dimension differs from the density".into()));
        }
        let eps = stencil.eps;
        let mut terms = Vec::new();
        for (i, (off, xi)) in stencil.offsets.iter().zip(&stencil.xi_points).enumerate() {
            let bound = density.bind(xi);
            if bound == Bound::Zero {
                continue;
            }
            let Some(plan) = pair_plan(lattice, off, region) else { continue };
            let shift = off.iter().zip(&lattice.spacing).map(|(&k, h)| k as f64 * h).collect();
            terms.push(Term {
                entry: i,
                weight: stencil.weights[i],
                bound,
                plan,
                shift,
            });
        }
        Ok(Functional {
            density,
            stencil,
            lattice,
            m: meta.m,
            eps,
            prefactor,
            terms,
            need_x: meta.depends_on_x,
        })
    }

    pub fn prefactor(&self) -> f64 {
        self.prefactor
    }

    pub fn lattice(&self) -> &Lattice {
        self.lattice
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of node pairs visited per evaluation.
    pub fn pair_count(&self) -> usize {
        self.terms
            .iter()
            .map(|t| t.plan.iter().map(|a| a.src.len()).product::<usize>())
            .sum()
    }

    /// Evaluate at nodal values `phi` plus the affine part `affine` (an
    /// `m × ndim` matrix, row-major). Gradients are accumulated into
    /// `grad` (nodal) and `grad_affine` when given.
    pub fn evaluate(
        &self,
        phi: &[f64],
        affine: Option<&[f64]>,
        mut grad: Option<&mut [f64]>,
        mut grad_affine: Option<&mut [f64]>,
    ) -> Result<Evaluation> {
        let m = self.m;
        let nd = self.lattice.ndim();
        if phi.len() != self.lattice.num_nodes() * m {
            return Err(Error::Mismatch(format!(
                "field has {} values, lattice needs {}",
                phi.len(),
                self.lattice.num_nodes() * m
            )));
        }
        let coef = self.prefactor * self.lattice.node_measure();
        let with_grad = grad.is_some();
        let with_ga = grad_affine.is_some();
        let n_terms = self.terms.len();
        let chunk = n_terms.div_ceil(CHUNKS).max(1);
        let chunks: Vec<(Vec<f64>, Option<Vec<f64>>, Vec<f64>)> = self
            .terms
            .par_chunks(chunk)
            .map(|terms| {
                let mut s_vals = Vec::with_capacity(terms.len());
                let mut g = with_grad.then(|| vec![0.0; phi.len()]);
                let mut ga = vec![0.0; if with_ga { m * nd } else { 0 }];
                for term in terms {
                    let mut inc = [0.0; 8];
                    if let Some(a) = affine {
                        for i in 0..m {
                            inc[i] = (0..nd).map(|j| a[i * nd + j] * term.shift[j]).sum();
                        }
                    }
                    let c = coef * term.weight / self.eps;
                    let (s, gsum) = self.term_pass(term, phi, &inc, g.as_deref_mut(), c);
                    s_vals.push(term.weight * s);
                    if with_ga {
                        for i in 0..m {
                            for j in 0..nd {
                                ga[i * nd + j] += c * gsum[i] * term.shift[j];
                            }
                        }
                    }
                }
                (s_vals, g, ga)
            })
            .collect();
        let mut per_entry = vec![0.0; self.stencil.len()];
        let mut sum = 0.0;
        let mut ti = 0;
        for (s_vals, g, ga) in chunks {
            for s in s_vals {
                per_entry[self.terms[ti].entry] = s;
                sum += s;
                ti += 1;
            }
            if let (Some(out), Some(g)) = (grad.as_deref_mut(), g) {
                for (o, v) in out.iter_mut().zip(g) {
                    *o += v;
                }
            }
            if let Some(out) = grad_affine.as_deref_mut() {
                for (o, v) in out.iter_mut().zip(ga) {
                    *o += v;
                }
            }
        }
        let total = coef * sum;
        if !total.is_finite() {
            return Err(Error::NonFinite {
                iteration: 0,
                dump: phi.to_vec(),
            });
        }
        Ok(Evaluation { total, per_entry })
    }

    /// `Σ τ f` over the pairs of one shift; scatters `c τ ∇f` into `grad`
    /// and returns `Σ τ ∇f` for the affine gradient.
    fn term_pass(&self, term: &Term, phi: &[f64], inc: &[f64; 8], grad: Option<&mut [f64]>, c: f64) -> (f64, [f64; 8]) {
        let m = self.m;
        let inv_eps = 1.0 / self.eps;
        let mut s = 0.0;
        let mut gsum = [0.0; 8];
        match (&term.bound, m, grad) {
            (Bound::Power { a, p }, 1, None) if *p == 2.0 => {
                let a = *a;
                let i0 = inc[0];
                for_each_pair(&term.plan, &mut |src, tgt, tau| {
                    let z = (phi[tgt] - phi[src] + i0) * inv_eps;
                    s += tau * z * z;
                });
                s *= a;
            }
            (Bound::Power { a, p }, 1, Some(g)) if *p == 2.0 => {
                let a = *a;
                let i0 = inc[0];
                let mut gs = 0.0;
                for_each_pair(&term.plan, &mut |src, tgt, tau| {
                    let z = (phi[tgt] - phi[src] + i0) * inv_eps;
                    s += tau * z * z;
                    let gz = tau * 2.0 * a * z;
                    gs += gz;
                    g[tgt] += c * gz;
                    g[src] -= c * gz;
                });
                s *= a;
                gsum[0] = gs;
            }
            (Bound::Dyn, _, mut grad) => {
                let d = self.density.meta().d;
                let mut x = [0.0; 8];
                let mut z = [0.0; 8];
                let mut gz = [0.0; 8];
                let xi = &self.stencil.xi_points[term.entry];
                for_each_pair(&term.plan, &mut |src, tgt, tau| {
                    if self.need_x {
                        self.lattice.coords_into(src, &mut x[..self.lattice.ndim()]);
                    }
                    for i in 0..m {
                        z[i] = (phi[tgt * m + i] - phi[src * m + i] + inc[i]) * inv_eps;
                    }
                    s += tau * self.density.eval(&x[..d], xi, &z[..m]);
                    if let Some(g) = grad.as_deref_mut() {
                        self.density.grad_z(&x[..d], xi, &z[..m], &mut gz[..m]);
                        for i in 0..m {
                            let v = tau * gz[i];
                            gsum[i] += v;
                            g[tgt * m + i] += c * v;
                            g[src * m + i] -= c * v;
                        }
                    }
                });
            }
            (bound, _, mut grad) => {
                let mut z = [0.0; 8];
                let mut gz = [0.0; 8];
                let want = grad.is_some();
                for_each_pair(&term.plan, &mut |src, tgt, tau| {
                    for i in 0..m {
                        z[i] = (phi[tgt * m + i] - phi[src * m + i] + inc[i]) * inv_eps;
                    }
                    if want {
                        s += tau * bound.eval_grad(&z[..m], Some(&mut gz[..m]));
                        let g = grad.as_deref_mut().unwrap();
                        for i in 0..m {
                            let v = tau * gz[i];
                            gsum[i] += v;
                            g[tgt * m + i] += c * v;
                            g[src * m + i] -= c * v;
                        }
                    } else {
                        s += tau * bound.eval_grad(&z[..m], None);
                    }
                });
            }
        }
        (s, gsum)
    }

    fn breakdown(&self, eval: Evaluation) -> EnergyBreakdown {
        EnergyBreakdown {
            total: eval.total,
            prefactor: self.prefactor,
            node_measure: self.lattice.node_measure(),
            per_offset: self
                .stencil
                .offsets
                .iter()
                .zip(&self.stencil.xi_points)
                .zip(eval.per_entry)
                .map(|((o, x), v)| OffsetTerm {
                    offset: o.clone(),
                    xi: x.clone(),
                    value: v,
                })
                .collect(),
        }
    }
}

fn check_scale(stencil: &InteractionStencil, scale: &ScaleParams, frame: StencilFrame) -> Result<()> {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs();
    if !close(stencil.eps, scale.eps()) || !close(stencil.gamma, scale.gamma()) {
        return Err(Error::Mismatch(format!(
            "stencil built for (ε, γ) = ({}, {}), energy asked at ({}, {})",
            stencil.eps,
            stencil.gamma,
            scale.eps(),
            scale.gamma()
        )));
    }
    if stencil.frame != frame {
        return Err(Error::Mismatch(format!("stencil frame {:?}, expected {:?}", stencil.frame, frame)));
    }
    Ok(())
}

fn check_field(u: &Field, density: &dyn Density) -> Result<()> {
    if u.m != density.meta().m {
        return Err(Error::Mismatch(format!("field has m = {}, density m = {}", u.m, density.meta().m)));
    }
    Ok(())
}

/// Rescaled functional on `ω × I`, localized to `region` when given.
pub fn energy_rescaled(
    u: &Field,
    density: &dyn Density,
    scale: &ScaleParams,
    stencil: &InteractionStencil,
    region: Option<&PlanarRegion>,
) -> Result<EnergyBreakdown> {
    check_scale(stencil, scale, StencilFrame::Rescaled)?;
    check_field(u, density)?;
    let f = Functional::new(density, stencil, &u.lattice, scale.prefactor_rescaled(), region)?;
    let e = f.evaluate(&u.values, None, None, None)?;
    Ok(f.breakdown(e))
}

/// Physical functional on `ω × γI`, with prefactor `ε/γ² ∨ 1/γ`.
pub fn energy_physical(v: &Field, density: &dyn Density, scale: &ScaleParams, stencil: &InteractionStencil) -> Result<EnergyBreakdown> {
    check_scale(stencil, scale, StencilFrame::Physical)?;
    check_field(v, density)?;
    let f = Functional::new(density, stencil, &v.lattice, scale.prefactor_physical(), None)?;
    let e = f.evaluate(&v.values, None, None, None)?;
    Ok(f.breakdown(e))
}

/// Rescaled functional with interactions restricted to `|ξ_α| < T`.
pub fn energy_truncated(
    u: &Field,
    density: &dyn Density,
    scale: &ScaleParams,
    stencil: &InteractionStencil,
    t: f64,
) -> Result<EnergyBreakdown> {
    let cut = stencil.truncated(density.support(), t);
    energy_rescaled(u, density, scale, &cut, None)
}

/// Nodal gradient of [`energy_rescaled`], zeroed on `fixed_mask`.
pub fn gradient_rescaled(
    u: &Field,
    density: &dyn Density,
    scale: &ScaleParams,
    stencil: &InteractionStencil,
    region: Option<&PlanarRegion>,
    fixed_mask: &[bool],
) -> Result<Field> {
    check_scale(stencil, scale, StencilFrame::Rescaled)?;
    check_field(u, density)?;
    if fixed_mask.len() != u.lattice.num_nodes() {
        return Err(Error::Mismatch("fixed mask length differs from the node count".into()));
    }
    let f = Functional::new(density, stencil, &u.lattice, scale.prefactor_rescaled(), region)?;
    let mut g = vec![0.0; u.values.len()];
    f.evaluate(&u.values, None, Some(&mut g), None)?;
    for (n, &fixed) in fixed_mask.iter().enumerate() {
        if fixed {
            g[n * u.m..(n + 1) * u.m].fill(0.0);
        }
    }
    Field::from_values(u.lattice.clone(), u.m, g)
}

/// The convolution energy `χ_{C_r}|z|^p` evaluated three ways: through the
/// stencil engine, as a double sum over node pairs `(x, y)`, and as a sum
/// over displacements `z = y − x` taken vertical-first. Non-periodic
/// lattices only.
pub fn conv_energy_forms_check(u: &Field, r: f64, p: f64, scale: &ScaleParams) -> Result<(f64, f64, f64)> {
    let lat = &*u.lattice;
    if lat.periodic.iter().any(|&b| b) {
        return Err(Error::Unsupported("forms check needs a lattice without periodic axes".into()));
    }
    let d = lat.ndim();
    let kernel = Kernel::cylinder_indicator(d, r);
    let density = crate::densities::homogeneous_convex(kernel.clone(), u.m, p)?;
    let stencil = build_stencil(&kernel, scale.eps(), scale.gamma(), lat, f64::INFINITY)?;
    let xi_form = energy_rescaled(u, &density, scale, &stencil, None)?.total;

    let eps = scale.eps();
    let step: Vec<f64> = (0..d)
        .map(|a| if a + 1 < d { lat.spacing[a] / eps } else { lat.spacing[a] * scale.gamma() / eps })
        .collect();
    let vol: f64 = step.iter().product();
    let coef = scale.prefactor_rescaled() * lat.node_measure();
    let n = lat.num_nodes();
    let m = u.m;
    let pair = |s: usize, t: usize, ms: &[usize], mt: &[usize]| -> f64 {
        let mut tau = 1.0;
        let mut xi = vec![0.0; d];
        for a in 0..d {
            let (lo, hi) = (ms[a].min(mt[a]), ms[a].max(mt[a]));
            tau *= 1.0 - 0.5 * (lo == 0) as u8 as f64 - 0.5 * (hi == lat.node_counts[a] - 1) as u8 as f64;
            xi[a] = (mt[a] as f64 - ms[a] as f64) * step[a];
        }
        let w = vol * kernel.support_weight(&xi);
        if w == 0.0 || tau == 0.0 {
            return 0.0;
        }
        let z2: f64 = (0..m).map(|i| ((u.values[t * m + i] - u.values[s * m + i]) / eps).powi(2)).sum();
        tau * w * z2.powf(p / 2.0)
    };

    let multi: Vec<Vec<usize>> = (0..n).map(|i| lat.multi_index(i)).collect();
    let mut xy = 0.0;
    for s in 0..n {
        for t in 0..n {
            if s != t {
                xy += pair(s, t, &multi[s], &multi[t]);
            }
        }
    }

    let mut zf = 0.0;
    let counts = &lat.node_counts;
    let mut k = vec![0i64; d];
    let span: Vec<i64> = counts.iter().map(|&c| c as i64 - 1).collect();
    // vertical displacement outermost, then planar axes in order
    let order: Vec<usize> = std::iter::once(d - 1).chain(0..d - 1).collect();
    let total: i64 = span.iter().map(|s| 2 * s + 1).product();
    for idx in 0..total {
        let mut rem = idx;
        for &a in order.iter().rev() {
            let w = 2 * span[a] + 1;
            k[a] = rem % w - span[a];
            rem /= w;
        }
        if k.iter().all(|&v| v == 0) {
            continue;
        }
        for s in 0..n {
            let ms = &multi[s];
            let mut mt = vec![0usize; d];
            let mut inside = true;
            for a in 0..d {
                let v = ms[a] as i64 + k[a];
                if v < 0 || v > span[a] {
                    inside = false;
                    break;
                }
                mt[a] = v as usize;
            }
            if inside {
                zf += pair(s, lat.index(&mt), ms, &mt);
            }
        }
    }
    Ok((xi_form, coef * xy, coef * zf))
}
