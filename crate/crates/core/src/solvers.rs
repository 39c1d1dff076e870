//! Minimization over the lateral-Dirichlet class and over periodic
//! correctors, by projected gradient descent with Barzilai–Borwein steps
//! and an Armijo safeguard.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::densities::{Bound, Density};
use crate::energy::{Functional, ScaleParams};
use crate::error::{Error, Result};
use crate::lattice::{Field, InteractionStencil, Lattice, StencilFrame};

/// Row-major list of rows; an `m × k` matrix is `m` rows of length `k`.
pub type Matrix = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol_g: f64,
    pub max_iters: usize,
    /// Number of starting points; the first is always the affine field.
    pub multistart: usize,
    pub seed: u64,
    /// Re-solve from five seeded random feasible points (convex densities).
    pub certify: bool,
    /// Scale of the seeded perturbations used by multistart.
    pub perturbation: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol_g: 1e-7,
            max_iters: 20000,
            multistart: 1,
            seed: 0,
            certify: false,
            perturbation: 0.5,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_g > 0.0) {
            return Err(Error::invalid("solver.tol_g", "must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("solver.max_iters", "must be positive"));
        }
        if self.multistart == 0 {
            return Err(Error::invalid("solver.multistart", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub value: f64,
    pub step: f64,
    pub grad_norm: f64,
}

/// A smooth objective over a flat vector with a convex feasible set given
/// by a projection.
pub trait Objective: Sync {
    fn len(&self) -> usize;

    /// Value, and the gradient when `grad` is given (overwritten).
    fn value_grad(&self, x: &[f64], grad: Option<&mut [f64]>) -> Result<f64>;

    fn project(&self, x: &mut [f64]);

    fn project_grad(&self, g: &mut [f64]);

    /// Diagonal of the inverse metric in which steps are taken.
    fn inv_metric(&self, _i: usize) -> f64 {
        1.0
    }

    /// Whether the objective is quadratic (enables the power-iteration step).
    fn quadratic(&self) -> bool {
        false
    }

    /// Largest violation of the constraints at `x`.
    fn violation(&self, _x: &[f64]) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug)]
pub struct BbResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<HistoryEntry>,
    pub max_violation: f64,
    pub note: Option<String>,
}

const ARMIJO_C: f64 = 1e-4;

fn metric_norm(obj: &dyn Objective, g: &[f64]) -> f64 {
    g.iter().enumerate().map(|(i, v)| v * v * obj.inv_metric(i)).sum::<f64>().sqrt()
}

fn with_iteration(e: Error, it: usize) -> Error {
    match e {
        Error::NonFinite { dump, .. } => Error::NonFinite { iteration: it, dump },
        other => other,
    }
}

fn projected_grad(obj: &dyn Objective, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; obj.len()];
    let f = obj.value_grad(x, Some(&mut g))?;
    obj.project_grad(&mut g);
    Ok((f, g))
}

/// Step `1/L̂` from the curvature along the scaled gradient: power
/// iteration for quadratics, a finite-difference probe otherwise.
fn initial_step(obj: &dyn Objective, x: &[f64], pg: &[f64]) -> Result<f64> {
    let n = obj.len();
    let mut v: Vec<f64> = (0..n).map(|i| obj.inv_metric(i) * pg[i]).collect();
    let mnorm = |v: &[f64]| v.iter().enumerate().map(|(i, a)| a * a / obj.inv_metric(i)).sum::<f64>().sqrt();
    let g0 = pg;
    let xscale = x.iter().fold(1.0f64, |a, b| a.max(b.abs()));
    let hess = |v: &[f64]| -> Result<(Vec<f64>, f64)> {
        let vmax = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let t = if obj.quadratic() { 1.0 / vmax } else { 1e-4 * xscale / vmax };
        let mut xt: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + t * b).collect();
        obj.project(&mut xt);
        let (_, gt) = projected_grad(obj, &xt)?;
        let hv: Vec<f64> = gt.iter().zip(g0).map(|(a, b)| (a - b) / t).collect();
        let lam = v.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>();
        Ok((hv, lam))
    };
    let nv = mnorm(&v);
    if !(nv > 0.0) {
        return Ok(1.0);
    }
    v.iter_mut().for_each(|a| *a /= nv);
    let mut lam = 0.0;
    let rounds = if obj.quadratic() { 12 } else { 1 };
    for _ in 0..rounds {
        let (hv, l) = hess(&v)?;
        lam = l;
        let mut w: Vec<f64> = (0..n).map(|i| obj.inv_metric(i) * hv[i]).collect();
        let nw = mnorm(&w);
        if !(nw > 0.0) {
            break;
        }
        w.iter_mut().for_each(|a| *a /= nw);
        v = w;
    }
    Ok(if lam > 0.0 && lam.is_finite() { 1.0 / lam } else { 1.0 })
}

const MEMORY: usize = 10;

/// Limited-memory quasi-Newton direction `−H g` with `H₀ = γD`, where `D` is
/// the inverse metric and `γ` the Barzilai–Borwein scaling of the most
/// recent pair.
fn lbfgs_direction(obj: &dyn Objective, g: &[f64], pairs: &[(Vec<f64>, Vec<f64>, f64)], gamma: f64) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    q.iter_mut().enumerate().for_each(|(i, qi)| *qi *= gamma * obj.inv_metric(i));
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected descent with Barzilai–Borwein scaled quasi-Newton directions
/// and monotone Armijo backtracking (first acceptable step wins).
pub fn minimize_bb(obj: &dyn Objective, mut x: Vec<f64>, tol_g: f64, max_iters: usize) -> Result<BbResult> {
    obj.project(&mut x);
    let (mut f, mut pg) = projected_grad(obj, &x).map_err(|e| with_iteration(e, 0))?;
    let mut gn = metric_norm(obj, &pg);
    let mut history = vec![HistoryEntry {
        value: f,
        step: 0.0,
        grad_norm: gn,
    }];
    let mut max_violation = obj.violation(&x);
    let mut pairs: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut gamma = 1.0;
    let mut converged = gn <= tol_g * (1.0 + f.abs());
    let mut note = None;
    let mut it = 0;
    while !converged && it < max_iters {
        it += 1;
        let mut dir = if pairs.is_empty() {
            Vec::new()
        } else {
            lbfgs_direction(obj, &pg, &pairs, gamma)
        };
        if dir.is_empty() || dot(&dir, &pg) >= 0.0 {
            pairs.clear();
            let a0 = initial_step(obj, &x, &pg).map_err(|e| with_iteration(e, it))?;
            dir = pg.iter().enumerate().map(|(i, g)| -a0 * obj.inv_metric(i) * g).collect();
        }
        let mut a = 1.0;
        let mut accepted = None;
        for _ in 0..80 {
            let mut xn: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + a * di).collect();
            obj.project(&mut xn);
            let decrease: f64 = pg.iter().zip(xn.iter().zip(&x)).map(|(g, (b, c))| g * (b - c)).sum();
            if decrease < 0.0 {
                let fnew = obj.value_grad(&xn, None).map_err(|e| with_iteration(e, it))?;
                if fnew <= f + ARMIJO_C * decrease {
                    accepted = Some(xn);
                    break;
                }
            }
            a *= 0.5;
        }
        let Some(xn) = accepted else {
            note = Some(format!("line search stalled at iteration {it}"));
            break;
        };
        let (fnew, pgn) = projected_grad(obj, &xn).map_err(|e| with_iteration(e, it))?;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = pgn.iter().zip(&pg).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let ydy: f64 = y.iter().enumerate().map(|(i, v)| v * v * obj.inv_metric(i)).sum();
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && ydy > 0.0 {
            gamma = sy / ydy;
            if pairs.len() == MEMORY {
                pairs.remove(0);
            }
            pairs.push((s, y, 1.0 / sy));
        }
        x = xn;
        f = fnew;
        pg = pgn;
        gn = metric_norm(obj, &pg);
        max_violation = max_violation.max(obj.violation(&x));
        history.push(HistoryEntry {
            value: f,
            step: a,
            grad_norm: gn,
        });
        converged = gn <= tol_g * (1.0 + f.abs());
    }
    Ok(BbResult {
        x,
        value: f,
        grad_norm: gn,
        iterations: it,
        converged,
        history,
        max_violation,
        note,
    })
}

// ---------------------------------------------------------------------------
// admissible classes

/// Boundary datum of the Dirichlet class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryDatum {
    /// `g(x) = M x_α` with `M ∈ ℝ^{m×(d−1)}`.
    Affine(Matrix),
    /// Nodal values `g` on every node (only collar nodes are used).
    Tabulated(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletClassSpec {
    pub datum: BoundaryDatum,
    /// Collar width `rε` in planar distance units.
    pub collar: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    /// `Q_1 × I`, vertical axis bounded.
    Slab,
    /// `Q_1^d`, all axes periodic.
    Torus,
    /// `Q_1^{d−1}`, planar interactions only.
    Planar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicClassSpec {
    /// Mean planar slope `M ∈ ℝ^{m×(d−1)}`.
    pub slope: Matrix,
    /// Vertical slope `b`; on a torus it is optimized jointly with the
    /// corrector when `free_b` is set, starting from this value.
    pub vertical_slope: Option<Vec<f64>>,
    pub free_b: bool,
    pub cell: CellKind,
}

#[derive(Clone, Debug)]
pub struct MinimizeReport {
    pub value: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub field: Field,
    /// Vertical slope of periodic classes.
    pub slope_b: Option<Vec<f64>>,
    pub converged: bool,
    pub history: Vec<HistoryEntry>,
    pub warnings: Vec<String>,
    /// Set when the value is only an upper bound (non-convex density).
    pub upper_bound_only: bool,
    pub max_feasibility_violation: f64,
    /// Energy of the affine test field; the solver value never exceeds it.
    pub affine_value: f64,
    pub affine_bound_ok: bool,
    /// Best value of each start, in start order.
    pub start_values: Vec<f64>,
    /// Values after restarts from random feasible points.
    pub restart_values: Vec<f64>,
    pub certificate: Option<bool>,
}

impl MinimizeReport {
    pub fn to_json(&self, trace: bool) -> serde_json::Value {
        let mut v = serde_json::json!({
            "value": self.value,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "converged": self.converged,
            "slope_b": self.slope_b,
            "warnings": self.warnings,
            "upper_bound_only": self.upper_bound_only,
            "max_feasibility_violation": self.max_feasibility_violation,
            "affine_value": self.affine_value,
            "affine_bound_ok": self.affine_bound_ok,
            "start_values": self.start_values,
            "restart_values": self.restart_values,
            "certificate": self.certificate,
        });
        if trace {
            v["history"] = serde_json::to_value(&self.history).unwrap_or_default();
        }
        v
    }
}

fn check_matrix(mat: &Matrix, rows: usize, cols: usize, field: &str) -> Result<()> {
    if mat.len() != rows || mat.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid(field, format!("expected a {rows}×{cols} matrix")));
    }
    if mat.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid(field, "entries must be finite"));
    }
    Ok(())
}

struct DirichletObjective<'a> {
    f: Functional<'a>,
    fixed: Vec<bool>,
    g: Vec<f64>,
    m: usize,
    inv_nm: f64,
}

impl Objective for DirichletObjective<'_> {
    fn len(&self) -> usize {
        self.g.len()
    }

    fn value_grad(&self, x: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        match grad {
            Some(g) => {
                g.fill(0.0);
                Ok(self.f.evaluate(x, None, Some(g), None)?.total)
            }
            None => Ok(self.f.evaluate(x, None, None, None)?.total),
        }
    }

    fn project(&self, x: &mut [f64]) {
        for (n, &fx) in self.fixed.iter().enumerate() {
            if fx {
                let r = n * self.m..(n + 1) * self.m;
                x[r.clone()].copy_from_slice(&self.g[r]);
            }
        }
    }

    fn project_grad(&self, g: &mut [f64]) {
        for (n, &fx) in self.fixed.iter().enumerate() {
            if fx {
                g[n * self.m..(n + 1) * self.m].fill(0.0);
            }
        }
    }

    fn inv_metric(&self, _i: usize) -> f64 {
        self.inv_nm
    }

    fn violation(&self, x: &[f64]) -> f64 {
        let mut v: f64 = 0.0;
        for (n, &fx) in self.fixed.iter().enumerate() {
            if fx {
                for i in n * self.m..(n + 1) * self.m {
                    v = v.max((x[i] - self.g[i]).abs());
                }
            }
        }
        v
    }
}

fn is_quadratic(density: &dyn Density) -> bool {
    density.meta().p == 2.0 && density.meta().is_convex_in_z && density.bind(&vec![0.0; density.meta().d]) != Bound::Dyn
}

/// Nodes within planar distance `collar` of the lateral boundary of the
/// lattice box, on every vertical layer.
pub fn collar_mask(lattice: &Lattice, planar_axes: usize, collar: f64) -> Vec<bool> {
    let n = lattice.num_nodes();
    let mut mask = vec![false; n];
    let mut x = vec![0.0; lattice.ndim()];
    let tol = 1e-9 * lattice.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    for (node, slot) in mask.iter_mut().enumerate() {
        lattice.coords_into(node, &mut x);
        let mut dist = f64::INFINITY;
        for a in 0..planar_axes {
            if lattice.periodic[a] {
                continue;
            }
            let lo = lattice.origin[a];
            let hi = lo + lattice.extent(a);
            dist = dist.min(x[a] - lo).min(hi - x[a]);
        }
        *slot = dist <= collar + tol;
    }
    mask
}

fn perturbed_start(base: &[f64], free: impl Fn(usize) -> bool, m: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    base.iter()
        .enumerate()
        .map(|(i, &b)| {
            let z: f64 = rng.sample(StandardNormal);
            if free(i / m) {
                b + scale * z
            } else {
                b
            }
        })
        .collect()
}

fn random_start(base: &[f64], free: impl Fn(usize) -> bool, m: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = base.iter().fold(1.0f64, |a, b| a.max(b.abs()));
    base.iter()
        .enumerate()
        .map(|(i, &b)| {
            let u: f64 = rng.gen_range(-1.0..1.0);
            if free(i / m) {
                amp * u
            } else {
                b
            }
        })
        .collect()
}

const CERTIFY_RESTARTS: u64 = 5;
const CERTIFY_TOL: f64 = 1e-6;

struct RunOutcome {
    best: BbResult,
    start_values: Vec<f64>,
    history: Vec<HistoryEntry>,
    max_violation: f64,
}

fn run_starts(obj: &dyn Objective, starts: Vec<Vec<f64>>, opts: &SolverOptions) -> Result<RunOutcome> {
    let mut best: Option<BbResult> = None;
    let mut start_values = Vec::new();
    let mut max_violation: f64 = 0.0;
    let mut history = Vec::new();
    for (k, x0) in starts.into_iter().enumerate() {
        let r = minimize_bb(obj, x0, opts.tol_g, opts.max_iters)?;
        start_values.push(r.value);
        max_violation = max_violation.max(r.max_violation);
        if k == 0 {
            history = r.history.clone();
        }
        if best.as_ref().is_none_or(|b| r.value < b.value) {
            best = Some(r);
        }
    }
    let best = best.expect("at least one start");
    Ok(RunOutcome {
        best,
        start_values,
        history,
        max_violation,
    })
}

/// Minimize over fields equal to the datum on the lateral collar.
pub fn minimize_dirichlet(
    density: &dyn Density,
    scale: &ScaleParams,
    lattice: Arc<Lattice>,
    spec: &DirichletClassSpec,
    stencil: &InteractionStencil,
    opts: &SolverOptions,
) -> Result<MinimizeReport> {
    opts.validate()?;
    let meta = density.meta();
    let (d, m) = (meta.d, meta.m);
    if lattice.ndim() != d {
        return Err(Error::Mismatch(format!("Dirichlet problems need a {d}-axis lattice")));
    }
    if stencil.frame != StencilFrame::Rescaled || (stencil.eps - scale.eps()).abs() > 1e-12 * scale.eps() {
        return Err(Error::Mismatch("stencil does not match the scale parameters".into()));
    }
    let min_half = (0..d - 1).map(|a| 0.5 * lattice.extent(a)).fold(f64::INFINITY, f64::min);
    if !(spec.collar >= 0.0 && spec.collar < min_half) {
        return Err(Error::invalid("collar", "collar width must be below half the planar extent"));
    }
    let n = lattice.num_nodes();
    let g: Vec<f64> = match &spec.datum {
        BoundaryDatum::Affine(mat) => {
            check_matrix(mat, m, d - 1, "slope")?;
            let mut out = vec![0.0; n * m];
            let mut x = vec![0.0; d];
            for node in 0..n {
                lattice.coords_into(node, &mut x);
                for i in 0..m {
                    out[node * m + i] = (0..d - 1).map(|a| mat[i][a] * x[a]).sum();
                }
            }
            out
        }
        BoundaryDatum::Tabulated(v) => {
            if v.len() != n * m {
                return Err(Error::invalid("datum", format!("expected {} values", n * m)));
            }
            v.clone()
        }
    };
    let fixed = collar_mask(&lattice, d - 1, spec.collar);
    let f = Functional::new(density, stencil, &lattice, scale.prefactor_rescaled(), None)?;
    let mut warnings = Vec::new();
    let convex = meta.is_convex_in_z;
    if let Some(w) = &stencil.warning {
        warnings.push(w.clone());
    }
    if !convex {
        warnings.push("density is not convex in z: multistart, value is an upper bound".into());
    }
    let obj = DirichletObjective {
        f,
        fixed: fixed.clone(),
        g: g.clone(),
        m,
        inv_nm: 1.0 / lattice.node_measure(),
    };
    let quad = is_quadratic(density);
    let obj_q = QuadFlag { inner: &obj, quadratic: quad };
    let free = |node: usize| !fixed[node];
    let mut starts = vec![g.clone()];
    let n_starts = if convex { opts.multistart } else { opts.multistart.max(2) };
    for k in 1..n_starts {
        starts.push(perturbed_start(&g, free, m, opts.perturbation, opts.seed.wrapping_add(k as u64)));
    }
    let out = run_starts(&obj_q, starts, opts)?;
    let affine_value = obj.value_grad(&g, None)?;
    let mut restart_values = Vec::new();
    let mut certificate = None;
    if convex && opts.certify {
        for k in 0..CERTIFY_RESTARTS {
            let x0 = random_start(&g, free, m, opts.seed.wrapping_add(1000 + k));
            restart_values.push(minimize_bb(&obj_q, x0, opts.tol_g, opts.max_iters)?.value);
        }
        certificate = Some(agree(out.best.value, &restart_values));
    }
    let field = Field::from_values(lattice.clone(), m, out.best.x.clone())?;
    let value = obj.value_grad(&field.values, None)?;
    if let Some(nt) = &out.best.note {
        warnings.push(nt.clone());
    }
    Ok(MinimizeReport {
        value,
        iterations: out.best.iterations,
        grad_norm: out.best.grad_norm,
        field,
        slope_b: None,
        converged: out.best.converged,
        history: out.history,
        warnings,
        upper_bound_only: !convex,
        max_feasibility_violation: out.max_violation,
        affine_value,
        affine_bound_ok: value <= affine_value * (1.0 + 1e-12) + 1e-300,
        start_values: out.start_values,
        restart_values,
        certificate,
    })
}

fn agree(best: f64, others: &[f64]) -> bool {
    let scale = best.abs().max(1e-12);
    others.iter().all(|v| (v - best).abs() <= CERTIFY_TOL * scale)
}

struct QuadFlag<'a> {
    inner: &'a dyn Objective,
    quadratic: bool,
}

impl Objective for QuadFlag<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }
    fn value_grad(&self, x: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        self.inner.value_grad(x, grad)
    }
    fn project(&self, x: &mut [f64]) {
        self.inner.project(x)
    }
    fn project_grad(&self, g: &mut [f64]) {
        self.inner.project_grad(g)
    }
    fn inv_metric(&self, i: usize) -> f64 {
        self.inner.inv_metric(i)
    }
    fn quadratic(&self) -> bool {
        self.quadratic
    }
    fn violation(&self, x: &[f64]) -> f64 {
        self.inner.violation(x)
    }
}

/// Corrector `φ` (zero mean per component) plus the affine part `(M|b)`.
pub(crate) struct PeriodicObjective<'a> {
    f: Functional<'a>,
    n_phi: usize,
    m: usize,
    nd: usize,
    slope: Matrix,
    b0: Vec<f64>,
    free_b: bool,
    has_vertical: bool,
    inv_nm: f64,
    quadratic: bool,
}

impl PeriodicObjective<'_> {
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        let (m, nd) = (self.m, self.nd);
        let mut a = vec![0.0; m * nd];
        for i in 0..m {
            for j in 0..self.slope[i].len() {
                a[i * nd + j] = self.slope[i][j];
            }
            if self.has_vertical {
                a[i * nd + nd - 1] = if self.free_b { x[self.n_phi + i] } else { self.b0[i] };
            }
        }
        a
    }

    pub(crate) fn b_of(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.has_vertical.then(|| {
            if self.free_b {
                x[self.n_phi..].to_vec()
            } else {
                self.b0.clone()
            }
        })
    }

    pub(crate) fn initial(&self, phi: Option<&[f64]>) -> Vec<f64> {
        let mut x = vec![0.0; self.len()];
        if let Some(p) = phi {
            x[..self.n_phi].copy_from_slice(p);
        }
        if self.free_b {
            x[self.n_phi..].copy_from_slice(&self.b0);
        }
        x
    }
}

impl Objective for PeriodicObjective<'_> {
    fn len(&self) -> usize {
        self.n_phi + if self.free_b { self.m } else { 0 }
    }

    fn value_grad(&self, x: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        let a = self.affine(x);
        let phi = &x[..self.n_phi];
        match grad {
            None => Ok(self.f.evaluate(phi, Some(&a), None, None)?.total),
            Some(g) => {
                g.fill(0.0);
                let mut ga = vec![0.0; self.m * self.nd];
                let (gp, gb) = g.split_at_mut(self.n_phi);
                let total = self.f.evaluate(phi, Some(&a), Some(gp), Some(&mut ga))?.total;
                if self.free_b {
                    for i in 0..self.m {
                        gb[i] = ga[i * self.nd + self.nd - 1];
                    }
                }
                Ok(total)
            }
        }
    }

    fn project(&self, x: &mut [f64]) {
        subtract_mean(&mut x[..self.n_phi], self.m);
    }

    fn project_grad(&self, g: &mut [f64]) {
        subtract_mean(&mut g[..self.n_phi], self.m);
    }

    fn inv_metric(&self, i: usize) -> f64 {
        if i < self.n_phi {
            self.inv_nm
        } else {
            1.0
        }
    }

    fn quadratic(&self) -> bool {
        self.quadratic
    }

    fn violation(&self, x: &[f64]) -> f64 {
        let n = self.n_phi / self.m;
        (0..self.m)
            .map(|i| ((0..n).map(|k| x[k * self.m + i]).sum::<f64>() / n as f64).abs())
            .fold(0.0, f64::max)
    }
}

fn subtract_mean(v: &mut [f64], m: usize) {
    let n = v.len() / m;
    for i in 0..m {
        let mean = (0..n).map(|k| v[k * m + i]).sum::<f64>() / n as f64;
        for k in 0..n {
            v[k * m + i] -= mean;
        }
    }
}

pub(crate) fn periodic_objective<'a>(
    density: &'a dyn Density,
    delta: f64,
    spec: &PeriodicClassSpec,
    lattice: &'a Lattice,
    stencil: &'a InteractionStencil,
) -> Result<PeriodicObjective<'a>> {
    let meta = density.meta();
    let (d, m) = (meta.d, meta.m);
    let nd = lattice.ndim();
    check_matrix(&spec.slope, m, d - 1, "slope")?;
    match spec.cell {
        CellKind::Slab => {
            if nd != d || lattice.periodic[..d - 1].iter().any(|p| !p) || lattice.periodic[d - 1] {
                return Err(Error::Mismatch("Q_1 × I cells need periodic planar axes and a bounded vertical axis".into()));
            }
        }
        CellKind::Torus => {
            if nd != d || lattice.periodic.iter().any(|p| !p) {
                return Err(Error::Mismatch("Q_1^d cells need every axis periodic".into()));
            }
        }
        CellKind::Planar => {
            if nd + 1 != d || lattice.periodic.iter().any(|p| !p) {
                return Err(Error::Mismatch("planar cells need d − 1 periodic axes".into()));
            }
            if !meta.is_planar() {
                return Err(Error::Unsupported("requires planar density".into()));
            }
        }
    }
    if (stencil.eps - 1.0).abs() > 1e-12 || (stencil.gamma * delta - 1.0).abs() > 1e-12 {
        return Err(Error::Mismatch(format!(
            "cell stencils use unit interactions: expected (ε, γ) = (1, {}), got ({}, {})",
            1.0 / delta,
            stencil.eps,
            stencil.gamma
        )));
    }
    let has_vertical = nd == d;
    let b0 = spec.vertical_slope.clone().unwrap_or_else(|| vec![0.0; m]);
    if b0.len() != m {
        return Err(Error::invalid("vertical_slope", format!("expected {m} entries")));
    }
    let free_b = spec.free_b && has_vertical;
    let f = Functional::new(density, stencil, lattice, delta.max(1.0), None)?;
    Ok(PeriodicObjective {
        f,
        n_phi: lattice.num_nodes() * m,
        m,
        nd,
        slope: spec.slope.clone(),
        b0,
        free_b,
        has_vertical,
        inv_nm: 1.0 / lattice.node_measure(),
        quadratic: is_quadratic(density),
    })
}

/// Minimize the unit-interaction cell energy over `u = (M|b)x + φ` with
/// `φ` periodic (on the planar axes for slabs) and of zero mean.
pub fn minimize_periodic_cell(
    density: &dyn Density,
    delta: f64,
    spec: &PeriodicClassSpec,
    lattice: Arc<Lattice>,
    stencil: &InteractionStencil,
    opts: &SolverOptions,
) -> Result<MinimizeReport> {
    minimize_periodic_cell_from(density, delta, spec, lattice, stencil, opts, &[])
}

/// As [`minimize_periodic_cell`], with extra corrector starts tried after
/// the affine one.
pub fn minimize_periodic_cell_from(
    density: &dyn Density,
    delta: f64,
    spec: &PeriodicClassSpec,
    lattice: Arc<Lattice>,
    stencil: &InteractionStencil,
    opts: &SolverOptions,
    extra_starts: &[Vec<f64>],
) -> Result<MinimizeReport> {
    opts.validate()?;
    let obj = periodic_objective(density, delta, spec, &lattice, stencil)?;
    let m = obj.m;
    let convex = density.meta().is_convex_in_z;
    let mut warnings = Vec::new();
    if let Some(w) = &stencil.warning {
        warnings.push(w.clone());
    }
    if !convex {
        warnings.push("density is not convex in z: multistart, value is an upper bound".into());
    }
    let x_aff = obj.initial(None);
    let mut starts = vec![x_aff.clone()];
    for s in extra_starts {
        if s.len() != obj.n_phi {
            return Err(Error::invalid("starts", "corrector start has the wrong length"));
        }
        starts.push(obj.initial(Some(s)));
    }
    let n_phi = obj.n_phi;
    let n_random = if convex { opts.multistart - 1 } else { opts.multistart.max(2) - 1 };
    for k in 0..n_random {
        starts.push(perturbed_start(&x_aff, |node| node * m < n_phi, m, opts.perturbation, opts.seed.wrapping_add(1 + k as u64)));
    }
    let out = run_starts(&obj, starts, opts)?;
    let affine_value = obj.value_grad(&x_aff, None)?;
    let mut restart_values = Vec::new();
    let mut certificate = None;
    if convex && opts.certify {
        for k in 0..CERTIFY_RESTARTS {
            let x0 = random_start(&x_aff, |node| node * m < n_phi, m, opts.seed.wrapping_add(1000 + k));
            restart_values.push(minimize_bb(&obj, x0, opts.tol_g, opts.max_iters)?.value);
        }
        certificate = Some(agree(out.best.value, &restart_values));
    }
    let x = &out.best.x;
    let value = obj.value_grad(x, None)?;
    let field = Field::from_values(lattice.clone(), m, x[..n_phi].to_vec())?;
    if let Some(nt) = &out.best.note {
        warnings.push(nt.clone());
    }
    Ok(MinimizeReport {
        value,
        iterations: out.best.iterations,
        grad_norm: out.best.grad_norm,
        field,
        slope_b: obj.b_of(x),
        converged: out.best.converged,
        history: out.history,
        warnings,
        upper_bound_only: !convex,
        max_feasibility_violation: out.max_violation,
        affine_value,
        affine_bound_ok: value <= affine_value * (1.0 + 1e-12) + 1e-300,
        start_values: out.start_values,
        restart_values,
        certificate,
    })
}

/// Quadrature points `(ξ, weight)` of `(δ∨1)(2 − δ|ξ_d|)_+ dξ` over the
/// support of the density, on a midpoint grid with `n` points per axis.
fn slope_quadrature(density: &dyn Density, delta: f64, n: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    let d = density.meta().d;
    let kernel = density.support();
    let r = kernel.planar_support_radius().ok_or_else(|| {
        Error::Divergent(format!("kernel {} has unbounded planar support", kernel.family_tag()))
    })?;
    let reach = 2.0 / delta;
    let h = kernel.vertical_support_halfheight().map_or(reach, |h| h.min(reach));
    let mut lo = vec![-r; d];
    let mut hi = vec![r; d];
    lo[d - 1] = -h;
    hi[d - 1] = h;
    let step: Vec<f64> = (0..d).map(|a| (hi[a] - lo[a]) / n as f64).collect();
    let vol: f64 = step.iter().product::<f64>() * delta.max(1.0);
    let mut pts = Vec::new();
    let mut idx = vec![0usize; d];
    loop {
        let xi: Vec<f64> = (0..d).map(|a| lo[a] + (idx[a] as f64 + 0.5) * step[a]).collect();
        let w = vol * (2.0 - delta * xi[d - 1].abs()).max(0.0);
        if w > 0.0 && density.bind(&xi) != Bound::Zero {
            pts.push((xi, w));
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
    Ok(pts)
}

struct SlopeObjective<'a> {
    density: &'a dyn Density,
    slope: &'a Matrix,
    pts: Vec<(Vec<f64>, f64)>,
}

impl Objective for SlopeObjective<'_> {
    fn len(&self) -> usize {
        self.density.meta().m
    }

    fn value_grad(&self, b: &[f64], mut grad: Option<&mut [f64]>) -> Result<f64> {
        let m = b.len();
        let d = self.density.meta().d;
        let x = vec![0.0; d];
        let mut z = vec![0.0; m];
        let mut gz = vec![0.0; m];
        let mut total = 0.0;
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        for (xi, w) in &self.pts {
            for i in 0..m {
                z[i] = (0..d - 1).map(|a| self.slope[i][a] * xi[a]).sum::<f64>() + b[i] * xi[d - 1];
            }
            total += w * self.density.eval(&x, xi, &z);
            if let Some(g) = grad.as_deref_mut() {
                self.density.grad_z(&x, xi, &z, &mut gz);
                for i in 0..m {
                    g[i] += w * gz[i] * xi[d - 1];
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite { iteration: 0, dump: b.to_vec() });
        }
        Ok(total)
    }

    fn project(&self, _x: &mut [f64]) {}

    fn project_grad(&self, _g: &mut [f64]) {}
}

/// `inf_b (δ∨1)∫(2 − δ|ξ_d|)_+ f(ξ, (M|b)ξ) dξ` for an x-independent convex
/// density, with the ξ-integral on a midpoint grid of `n_quad` points per
/// axis. Returns `(b*, value)`.
pub fn relax_vertical_slope(density: &dyn Density, delta: f64, slope: &Matrix, n_quad: usize, tol: f64) -> Result<(Vec<f64>, f64)> {
    let meta = density.meta();
    if meta.depends_on_x || !meta.is_convex_in_z {
        return Err(Error::Unsupported("slope relaxation needs an x-independent convex density".into()));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::invalid("delta", "must be positive and finite"));
    }
    check_matrix(slope, meta.m, meta.d - 1, "slope")?;
    let pts = slope_quadrature(density, delta, n_quad)?;
    let obj = SlopeObjective { density, slope, pts };
    let r = minimize_bb(&obj, vec![0.0; meta.m], tol, 10_000)?;
    Ok((r.x, r.value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{homogeneous_convex, pure_convolution};
    use crate::kernels::Kernel;
    use crate::lattice::{build_lattice, build_stencil, CylinderSpec};

    struct Quadratic {
        diag: Vec<f64>,
        target: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn len(&self) -> usize {
            self.diag.len()
        }
        fn value_grad(&self, x: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
            let mut v = 0.0;
            for i in 0..x.len() {
                v += 0.5 * self.diag[i] * (x[i] - self.target[i]).powi(2);
            }
            if let Some(g) = grad {
                for i in 0..x.len() {
                    g[i] = self.diag[i] * (x[i] - self.target[i]);
                }
            }
            Ok(v)
        }
        fn project(&self, x: &mut [f64]) {
            x[0] = x[0].max(1.0);
        }
        fn project_grad(&self, _g: &mut [f64]) {}
        fn quadratic(&self) -> bool {
            true
        }
    }

    #[test]
    fn bb_solves_box_constrained_quadratic() {
        let q = Quadratic {
            diag: (1..=20).map(|i| i as f64).collect(),
            target: (0..20).map(|i| (i as f64).sin()).collect(),
        };
        let r = minimize_bb(&q, vec![3.0; 20], 1e-10, 5000).unwrap();
        assert_eq!(r.x[0], 1.0);
        for i in 1..20 {
            assert!((r.x[i] - q.target[i]).abs() < 1e-8);
        }
        for w in r.history.windows(2) {
            assert!(w[1].value <= w[0].value);
        }
    }

    fn dirichlet_setup(n: usize) -> (Arc<Lattice>, crate::densities::PowerDensity, ScaleParams, InteractionStencil) {
        let spec = CylinderSpec::new(vec![(0.0, 1.0)], 1.0, 1).unwrap();
        let lat = Arc::new(build_lattice(&spec, &[n, 9], &[false, false]).unwrap());
        let eps = 0.25;
        let f = pure_convolution(2, 1, 1.0, 2.0).unwrap();
        let scale = ScaleParams::new(eps, eps).unwrap();
        let st = build_stencil(f.support(), eps, eps, &lat, f64::INFINITY).unwrap();
        (lat, f, scale, st)
    }

    #[test]
    fn affine_datum_is_optimal_for_convolution() {
        let (lat, f, scale, st) = dirichlet_setup(17);
        let spec = DirichletClassSpec {
            datum: BoundaryDatum::Affine(vec![vec![1.5]]),
            collar: 0.25,
        };
        let opts = SolverOptions::default();
        let r = minimize_dirichlet(&f, &scale, lat, &spec, &st, &opts).unwrap();
        assert_eq!(r.iterations, 0);
        assert!(r.converged);
        assert_eq!(r.value, r.affine_value);
    }

    #[test]
    fn zero_datum_gives_zero() {
        let (lat, f, scale, st) = dirichlet_setup(17);
        let spec = DirichletClassSpec {
            datum: BoundaryDatum::Affine(vec![vec![0.0]]),
            collar: 0.25,
        };
        let r = minimize_dirichlet(&f, &scale, lat, &spec, &st, &SolverOptions::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.field.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tabulated_datum_with_certificate() {
        let (lat, f, scale, st) = dirichlet_setup(17);
        let g: Vec<f64> = (0..lat.num_nodes()).map(|i| (lat.coords(i)[0] * 5.0).sin()).collect();
        let spec = DirichletClassSpec {
            datum: BoundaryDatum::Tabulated(g.clone()),
            collar: 0.25,
        };
        let opts = SolverOptions {
            certify: true,
            tol_g: 1e-9,
            ..Default::default()
        };
        let r = minimize_dirichlet(&f, &scale, lat.clone(), &spec, &st, &opts).unwrap();
        assert!(r.converged, "{:?}", r.warnings);
        assert_eq!(r.certificate, Some(true), "{:?} vs {}", r.restart_values, r.value);
        assert_eq!(r.max_feasibility_violation, 0.0);
        assert!(r.value <= r.affine_value);
        let mask = collar_mask(&lat, 1, 0.25);
        for (n, &fx) in mask.iter().enumerate() {
            if fx {
                assert_eq!(r.field.values[n], g[n]);
            }
        }
    }

    #[test]
    fn cell_value_of_affine_slope() {
        // pure convolution, δ = 1, M = 1 on a coarse slab
        let spec = CylinderSpec::new(vec![(0.0, 1.0)], 1.0, 1).unwrap();
        let n = 16;
        let lat = Arc::new(build_lattice(&spec, &[n, 2 * n + 1], &[true, false]).unwrap());
        let f = pure_convolution(2, 1, 1.0, 2.0).unwrap();
        let st = build_stencil(f.support(), 1.0, 1.0, &lat, f64::INFINITY).unwrap();
        let cls = PeriodicClassSpec {
            slope: vec![vec![1.0]],
            vertical_slope: None,
            free_b: false,
            cell: CellKind::Slab,
        };
        let r = minimize_periodic_cell(&f, 1.0, &cls, lat, &st, &SolverOptions::default()).unwrap();
        assert!((r.value - 2.0).abs() < 0.05 * 2.0, "{}", r.value);
        assert!(r.affine_bound_ok);
        assert!(r.max_feasibility_violation < 1e-14);
    }

    #[test]
    fn slope_relaxation_symmetric_and_skewed() {
        let f = pure_convolution(2, 1, 1.0, 2.0).unwrap();
        let (b, v) = relax_vertical_slope(&f, 1.0, &vec![vec![1.0]], 800, 1e-10).unwrap();
        assert!(b[0].abs() < 1e-8);
        assert!((v - 2.0).abs() < 0.01, "{v}");
        let (b0, v0) = relax_vertical_slope(&f, 1.0, &vec![vec![0.0]], 200, 1e-10).unwrap();
        assert_eq!((b0[0], v0), (0.0, 0.0));

        let skew = homogeneous_convex(Kernel::cylinder(2, 1.0, 1.0, vec![0.3, 0.3]), 1, 2.0).unwrap();
        let (bs, vs) = relax_vertical_slope(&skew, 1.0, &vec![vec![1.0]], 400, 1e-10).unwrap();
        assert!(bs[0].abs() > 1e-3);
        // one-dimensional scan oracle
        let obj = SlopeObjective {
            density: &skew,
            slope: &vec![vec![1.0]],
            pts: slope_quadrature(&skew, 1.0, 400).unwrap(),
        };
        let mut best = (0.0, f64::INFINITY);
        for j in -400..=400 {
            let b = j as f64 / 200.0;
            let v = obj.value_grad(&[b], None).unwrap();
            if v < best.1 {
                best = (b, v);
            }
        }
        assert!((bs[0] - best.0).abs() <= 0.006, "{} vs {}", bs[0], best.0);
        assert!(vs <= best.1 + 1e-12 && vs <= obj.value_grad(&[0.0], None).unwrap());
    }
}
