//! Homogenized densities in the three regimes, asymptotic-formula sequences,
//! scaling probes, the rotation experiment, and the closed forms that pin
//! them.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::densities::{homogeneous_convex, Density, PowerDensity, RotationDensity};
use crate::energy::{Functional, ScaleParams};
use crate::error::{Error, Result};
use crate::kernels::{Kernel, KernelFamily};
use crate::lattice::{build_stencil, build_stencil_physical, Field, Lattice};
use crate::solvers::{
    minimize_bb, minimize_dirichlet, minimize_periodic_cell, minimize_periodic_cell_from, BoundaryDatum, CellKind,
    DirichletClassSpec, HistoryEntry, Matrix, MinimizeReport, Objective, PeriodicClassSpec, SolverOptions,
};

/// Header line of every CSV written by this crate.
pub const CSV_VERSION: &str = "# nlthin-v1";

/// `(δ∨1)(r ∧ 2/δ)(4 − δ(r ∧ 2/δ))`, with `θ(0, r) = 4r` and `θ(∞, r) = 4`.
pub fn theta(delta: f64, r: f64) -> f64 {
    if delta == f64::INFINITY {
        return 4.0;
    }
    let reach = if delta > 0.0 { r.min(2.0 / delta) } else { r };
    delta.max(1.0) * reach * (4.0 - delta * reach)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Delta(f64),
    Zero,
    Infinity,
}

impl Regime {
    pub fn parse(s: &str) -> Result<Regime> {
        match s {
            "zero" | "0" => Ok(Regime::Zero),
            "infinity" | "inf" => Ok(Regime::Infinity),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|d| *d > 0.0 && d.is_finite())
                .map(Regime::Delta)
                .ok_or_else(|| Error::invalid("regime", format!("expected zero, infinity or a positive δ, got {other:?}"))),
        }
    }

    fn theta(&self, r: f64) -> f64 {
        match self {
            Regime::Delta(d) => theta(*d, r),
            Regime::Zero => theta(0.0, r),
            Regime::Infinity => 4.0,
        }
    }
}

fn check_slope(slope: &Matrix) -> Result<(usize, usize)> {
    let m = slope.len();
    let n = slope.first().map_or(0, |r| r.len());
    if m == 0 || n == 0 || slope.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("slope", "expected a nonempty rectangular matrix"));
    }
    if slope.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("slope", "entries must be finite"));
    }
    Ok((m, n))
}

/// `∫_{B_r} |M ξ_α|^p dξ_α` over the ball of `ℝ^n`, `n` the column count.
pub fn planar_power_integral(slope: &Matrix, r: f64, p: f64) -> Result<f64> {
    let (m, n) = check_slope(slope)?;
    let apply = |v: &[f64]| -> f64 { (0..m).map(|i| (0..n).map(|j| slope[i][j] * v[j]).sum::<f64>().powi(2)).sum::<f64>().sqrt() };
    if p == 2.0 {
        let fro: f64 = slope.iter().flatten().map(|v| v * v).sum();
        return Ok(fro * sphere_area(n) * r.powi(n as i32 + 2) / (n * (n + 2)) as f64);
    }
    match n {
        1 => Ok(2.0 * apply(&[1.0]).powf(p) * r.powf(p + 1.0) / (p + 1.0)),
        2 => {
            // periodic integrand: the trapezoid rule converges spectrally
            let k = 4096;
            let s: f64 = (0..k)
                .map(|i| {
                    let t = 2.0 * PI * i as f64 / k as f64;
                    apply(&[t.cos(), t.sin()]).powf(p)
                })
                .sum::<f64>()
                * 2.0
                * PI
                / k as f64;
            Ok(r.powf(p + 2.0) / (p + 2.0) * s)
        }
        _ => Err(Error::Unsupported(format!("planar dimension {n} needs p = 2"))),
    }
}

fn sphere_area(n: usize) -> f64 {
    // |S^{n−1}| = n |B^n|
    let mut ball = if n.is_multiple_of(2) { 1.0 } else { 2.0 };
    let mut k = if n.is_multiple_of(2) { 0 } else { 1 };
    while k < n {
        k += 2;
        ball *= 2.0 * PI / k as f64;
    }
    n as f64 * ball
}

/// Homogenized density of `χ_{C_r}|z|^p` in the given regime.
pub fn oracle_pure_conv(slope: &Matrix, r: f64, p: f64, regime: Regime) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::invalid("r", "must be positive"));
    }
    Ok(regime.theta(r) * planar_power_integral(slope, r, p)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderEntry {
    /// Nodes per unit length (`1/h`), or `R` for asymptotic sequences.
    pub resolution: f64,
    pub value: f64,
    pub runtime_s: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub affine_value: f64,
    pub converged: bool,
    /// Solver history of the first start (omitted from JSON when empty).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<HistoryEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogenizationEstimate {
    pub slope: Matrix,
    pub regime: Regime,
    /// Value at the finest resolution.
    pub value: f64,
    pub grid: String,
    pub ladder: Vec<LadderEntry>,
    pub extrapolated: Option<f64>,
    pub fitted_rate: Option<f64>,
    pub slope_b: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Extrapolate in `h = 1/resolution` with the rate fitted from the last
/// three entries (rate 1 when only two exist). Skipped below rate 0.5.
pub fn richardson(ladder: &[LadderEntry]) -> (Option<f64>, Option<f64>) {
    let n = ladder.len();
    if n < 2 {
        return (None, None);
    }
    let (a, b) = (&ladder[n - 2], &ladder[n - 1]);
    let ratio = b.resolution / a.resolution;
    let diff = b.value - a.value;
    if diff == 0.0 {
        return (Some(b.value), None);
    }
    let rate = if n >= 3 {
        let z = &ladder[n - 3];
        let prev = a.value - z.value;
        let q = prev / diff;
        if !(q > 0.0) {
            return (None, None);
        }
        q.ln() / (a.resolution / z.resolution).ln()
    } else {
        1.0
    };
    if !(rate >= 0.5) || !rate.is_finite() {
        return (None, Some(rate));
    }
    (Some(b.value + diff / (ratio.powf(rate) - 1.0)), Some(rate))
}

/// Ladder row whose value and affine bound are the raw solver values times
/// `factor`.
fn entry(resolution: f64, rep: &MinimizeReport, factor: f64, start: Instant) -> LadderEntry {
    LadderEntry {
        resolution,
        value: factor * rep.value,
        runtime_s: start.elapsed().as_secs_f64(),
        grad_norm: rep.grad_norm,
        iterations: rep.iterations,
        affine_value: factor * rep.affine_value,
        converged: rep.converged,
        history: rep.history.clone(),
    }
}

fn check_ladder(ladder: &[usize]) -> Result<()> {
    if ladder.is_empty() || ladder.windows(2).any(|w| w[1] <= w[0]) || ladder[0] < 2 {
        return Err(Error::invalid("ladder", "expected increasing resolutions of at least 2"));
    }
    Ok(())
}

fn require_convex(density: &dyn Density) -> Result<()> {
    if !density.meta().is_convex_in_z {
        return Err(Error::Unsupported(
            "cell formulas need a convex density; the non-convex case requires quasiconvexification".into(),
        ));
    }
    Ok(())
}

fn finish(
    slope: &Matrix,
    regime: Regime,
    grid: String,
    ladder: Vec<LadderEntry>,
    slope_b: Option<Vec<f64>>,
    warnings: Vec<String>,
) -> HomogenizationEstimate {
    let (extrapolated, fitted_rate) = richardson(&ladder);
    HomogenizationEstimate {
        slope: slope.clone(),
        regime,
        value: ladder.last().map_or(f64::NAN, |e| e.value),
        grid,
        ladder,
        extrapolated,
        fitted_rate,
        slope_b,
        warnings,
    }
}

/// Lattice over `Q_1 × I` with `n` planar nodes per axis (periodic) and
/// vertical spacing `δ/n`, so the vertical ξ-step equals the planar one.
pub fn slab_lattice(d: usize, n: usize, delta: f64) -> Result<Lattice> {
    let nd = (2.0 * n as f64 / delta).round() as usize + 1;
    let mut origin = vec![0.0; d - 1];
    origin.push(-1.0);
    let mut extent = vec![1.0; d - 1];
    extent.push(2.0);
    let mut counts = vec![n; d - 1];
    counts.push(nd.max(3));
    let mut periodic = vec![true; d - 1];
    periodic.push(false);
    Lattice::new(origin, &extent, counts, periodic)
}

fn torus_lattice(axes: usize, n: usize) -> Result<Lattice> {
    Lattice::new(vec![0.0; axes], &vec![1.0; axes], vec![n; axes], vec![true; axes])
}

/// `f_hom^δ(M)` from the cell problem on `Q_1 × I`, over a resolution ladder.
pub fn cell_formula_delta(
    density: &dyn Density,
    delta: f64,
    slope: &Matrix,
    ladder: &[usize],
    opts: &SolverOptions,
) -> Result<HomogenizationEstimate> {
    require_convex(density)?;
    check_ladder(ladder)?;
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::invalid("regime.delta", "must be positive and finite"));
    }
    let d = density.meta().d;
    let spec = PeriodicClassSpec {
        slope: slope.clone(),
        vertical_slope: None,
        free_b: false,
        cell: CellKind::Slab,
    };
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &n in ladder {
        let start = Instant::now();
        let lat = Arc::new(slab_lattice(d, n, delta)?);
        let st = build_stencil(density.support(), 1.0, 1.0 / delta, &lat, f64::INFINITY)?;
        let rep = minimize_periodic_cell(density, delta, &spec, lat, &st, opts)?;
        warnings.extend(rep.warnings.iter().cloned());
        rows.push(entry(n as f64, &rep, 1.0, start));
    }
    let grid = format!("Q_1 × I, planar h = 1/n, vertical h = δ/n, n ∈ {ladder:?}");
    Ok(finish(slope, Regime::Delta(delta), grid, rows, None, warnings))
}

/// `f_hom^0(M) = 2 inf_b` of the `d`-dimensional cell problem on `Q_1^d`,
/// with `b` minimized jointly with the corrector.
pub fn cell_formula_zero(density: &dyn Density, slope: &Matrix, ladder: &[usize], opts: &SolverOptions) -> Result<HomogenizationEstimate> {
    require_convex(density)?;
    check_ladder(ladder)?;
    let meta = density.meta();
    if meta.depends_on_x && meta.x_periodic_cell != Some(crate::densities::PeriodicCell::Full) {
        return Err(Error::Unsupported("zero regime needs an x-independent or fully periodic density".into()));
    }
    let d = meta.d;
    let spec = PeriodicClassSpec {
        slope: slope.clone(),
        vertical_slope: None,
        free_b: true,
        cell: CellKind::Torus,
    };
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let mut b = None;
    for &n in ladder {
        let start = Instant::now();
        let lat = Arc::new(torus_lattice(d, n)?);
        let st = build_stencil(density.support(), 1.0, 1.0, &lat, f64::INFINITY)?;
        let rep = minimize_periodic_cell(density, 1.0, &spec, lat, &st, opts)?;
        warnings.extend(rep.warnings.iter().cloned());
        b = rep.slope_b.clone();
        rows.push(entry(n as f64, &rep, 2.0, start));
    }
    let grid = format!("Q_1^d, h = 1/n, n ∈ {ladder:?}");
    Ok(finish(slope, Regime::Zero, grid, rows, b, warnings))
}

/// `f_hom^∞(M) = 4 f_surf(M)` from the `(d−1)`-dimensional cell problem.
pub fn cell_formula_infinity(density: &dyn Density, slope: &Matrix, ladder: &[usize], opts: &SolverOptions) -> Result<HomogenizationEstimate> {
    if !density.meta().is_planar() {
        return Err(Error::Unsupported("requires planar density".into()));
    }
    require_convex(density)?;
    check_ladder(ladder)?;
    let d = density.meta().d;
    let spec = PeriodicClassSpec {
        slope: slope.clone(),
        vertical_slope: None,
        free_b: false,
        cell: CellKind::Planar,
    };
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &n in ladder {
        let start = Instant::now();
        let lat = Arc::new(torus_lattice(d - 1, n)?);
        let st = build_stencil(density.support(), 1.0, 1.0, &lat, f64::INFINITY)?;
        let rep = minimize_periodic_cell(density, 1.0, &spec, lat, &st, opts)?;
        warnings.extend(rep.warnings.iter().cloned());
        rows.push(entry(n as f64, &rep, 4.0, start));
    }
    let grid = format!("Q_1^(d-1), h = 1/n, n ∈ {ladder:?}");
    Ok(finish(slope, Regime::Infinity, grid, rows, None, warnings))
}

/// `R^{1−d}` times the Dirichlet minimum over `D^1_M(Q_R)` with unit
/// interactions and vertical scale `δ`, for each `R`.
pub fn asymptotic_formula(
    density: &dyn Density,
    delta: f64,
    slope: &Matrix,
    r_values: &[f64],
    h: f64,
    opts: &SolverOptions,
) -> Result<Vec<LadderEntry>> {
    if r_values.is_empty() || r_values.windows(2).any(|w| w[1] <= w[0]) || r_values[0] <= 2.0 {
        return Err(Error::invalid("r_values", "expected an increasing sequence above 2"));
    }
    if !(h > 0.0 && h <= 1.0) {
        return Err(Error::invalid("h", "must lie in (0, 1]"));
    }
    let d = density.meta().d;
    let scale = ScaleParams::unit_cell(delta)?;
    let mut out = Vec::new();
    for &r in r_values {
        let start = Instant::now();
        let n = (r / h).round() as usize + 1;
        let nd = (2.0 / (delta * h)).round() as usize + 1;
        let mut origin = vec![0.0; d - 1];
        origin.push(-1.0);
        let mut extent = vec![r; d - 1];
        extent.push(2.0);
        let mut counts = vec![n; d - 1];
        counts.push(nd.max(3));
        let lat = Arc::new(Lattice::new(origin, &extent, counts, vec![false; d])?);
        let st = build_stencil(density.support(), scale.eps(), scale.gamma(), &lat, f64::INFINITY)?;
        let spec = DirichletClassSpec {
            datum: BoundaryDatum::Affine(slope.clone()),
            collar: 1.0,
        };
        let rep = minimize_dirichlet(density, &scale, lat, &spec, &st, opts)?;
        let norm = r.powi(d as i32 - 1);
        out.push(entry(r, &rep, 1.0 / norm, start));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// scaling probes

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub eps: f64,
    pub gamma: f64,
    /// Unscaled energy of the test field.
    pub raw: f64,
    /// Energy of the same field with planar interactions only.
    pub planar: f64,
    /// `raw / planar`.
    pub vertical_factor: f64,
    /// Exact vertical factor (indicator kernels) or the predicted power law.
    pub predicted: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    /// Fitted exponent of `raw/(γ·planar)` against `ε/γ` (singular kernels).
    pub fitted_exponent: Option<f64>,
    pub expected_exponent: Option<f64>,
}

/// Exact `∫_{−1}^{1} (2γ − ε|t|)_+ dt`.
pub fn vertical_factor_exact(eps: f64, gamma: f64) -> f64 {
    if 2.0 * gamma < eps {
        4.0 * gamma * gamma / eps
    } else {
        4.0 * gamma - eps
    }
}

fn sinusoid(lat: &Arc<Lattice>) -> Field {
    Field::from_fn(lat.clone(), 1, |x| vec![(2.0 * PI * x[0]).sin()])
}

fn raw_energy(density: &dyn Density, stencil: &crate::lattice::InteractionStencil, field: &Field) -> Result<f64> {
    let f = Functional::new(density, stencil, &field.lattice, 1.0, None)?;
    Ok(f.evaluate(&field.values, None, None, None)?.total)
}

fn planar_factor(kernel: &Kernel, p: f64, eps: f64, n: usize) -> Result<f64> {
    let d = kernel.dim;
    let lat = Arc::new(Lattice::new(vec![0.0; d - 1], &vec![1.0; d - 1], vec![n; d - 1], vec![true; d - 1])?);
    let dens = homogeneous_convex(kernel.clone(), 1, p)?;
    let st = build_stencil_physical(kernel, eps, 1.0, &lat, f64::INFINITY)?;
    raw_energy(&dens, &st, &sinusoid(&lat))
}

fn film_lattice(d: usize, n: usize, gamma: f64, nd: usize) -> Result<Arc<Lattice>> {
    let mut origin = vec![0.0; d - 1];
    origin.push(-gamma);
    let mut extent = vec![1.0; d - 1];
    extent.push(2.0 * gamma);
    let mut counts = vec![n; d - 1];
    counts.push(nd);
    let mut periodic = vec![true; d - 1];
    periodic.push(false);
    Ok(Arc::new(Lattice::new(origin, &extent, counts, periodic)?))
}

/// Unscaled energy of `sin(2πx₁)` on `(0,1)^{d−1} × (−γ, γ)` for the
/// indicator `χ_{C_1}`, spacing `1/n` on every axis.
pub fn scaling_probe(d: usize, p: f64, pairs: &[(f64, f64)], n: usize) -> Result<ScalingTable> {
    let kernel = Kernel::cylinder_indicator(d, 1.0);
    let dens = homogeneous_convex(kernel.clone(), 1, p)?;
    let mut rows = Vec::new();
    for &(eps, gamma) in pairs {
        let nd = (2.0 * gamma * n as f64).round() as usize + 1;
        if nd < 3 || ((nd - 1) as f64 - 2.0 * gamma * n as f64).abs() > 1e-9 {
            return Err(Error::invalid("pairs", format!("2γn must be an integer ≥ 2 (γ = {gamma})")));
        }
        let lat = film_lattice(d, n, gamma, nd)?;
        let st = build_stencil_physical(&kernel, eps, gamma, &lat, f64::INFINITY)?;
        let raw = raw_energy(&dens, &st, &sinusoid(&lat))?;
        let planar = planar_factor(&kernel, p, eps, n)?;
        let vf = raw / planar;
        let pred = vertical_factor_exact(eps, gamma);
        rows.push(ScalingRow {
            eps,
            gamma,
            raw,
            planar,
            vertical_factor: vf,
            predicted: pred,
            ratio: vf / pred,
        });
    }
    Ok(ScalingTable {
        rows,
        fitted_exponent: None,
        expected_exponent: None,
    })
}

/// Probe of the singular kernel `|ξ_d|^{−β}` at fixed `ε` for the given
/// ratios `ε/γ`; fits the exponent of `raw/(γ·planar)` in `ε/γ`.
pub fn scaling_probe_singular(d: usize, beta: f64, p: f64, eps: f64, ratios: &[f64], n: usize) -> Result<ScalingTable> {
    if ratios.len() < 2 {
        return Err(Error::invalid("ratios", "need at least two ratios to fit an exponent"));
    }
    let kernel = Kernel::vertical_singular(d, beta);
    kernel.validate()?;
    let unit = homogeneous_convex(Kernel::unit(d), 1, p)?;
    let planar = planar_factor(&Kernel::cylinder_indicator(d, 1.0), p, eps, n)?;
    let mut rows = Vec::new();
    for &q in ratios {
        let gamma = eps / q;
        let nd = n + 1;
        let lat = film_lattice(d, n, gamma, nd)?;
        let st = build_stencil_physical(&kernel, eps, gamma, &lat, f64::INFINITY)?.kernel_weighted(&kernel);
        let raw = raw_energy(&unit, &st, &sinusoid(&lat))?;
        let scaled = raw / (gamma * planar);
        let pred = q.max(1.0).powf(beta - 1.0);
        rows.push(ScalingRow {
            eps,
            gamma,
            raw,
            planar,
            vertical_factor: raw / planar,
            predicted: pred,
            ratio: scaled / pred,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.eps / r.gamma).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| (r.raw / (r.gamma * r.planar)).ln()).collect();
    Ok(ScalingTable {
        rows,
        fitted_exponent: Some(fit_slope(&xs, &ys)),
        expected_exponent: Some(beta - 1.0),
    })
}

fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

// ---------------------------------------------------------------------------
// minimum problems along (ε, γ) trajectories

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    /// `γ = ε/δ`.
    ConstantDelta(f64),
    /// `ε = γ²`, so `δ → 0`.
    EpsGammaSquared,
    /// `γ = ε²`, so `δ → ∞`.
    GammaEpsSquared,
}

impl Trajectory {
    pub fn gamma(&self, eps: f64) -> f64 {
        match self {
            Trajectory::ConstantDelta(d) => eps / d,
            Trajectory::EpsGammaSquared => eps.sqrt(),
            Trajectory::GammaEpsSquared => eps * eps,
        }
    }

    pub fn regime(&self) -> Regime {
        match self {
            Trajectory::ConstantDelta(d) => Regime::Delta(*d),
            Trajectory::EpsGammaSquared => Regime::Zero,
            Trajectory::GammaEpsSquared => Regime::Infinity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub gamma: f64,
    pub delta: f64,
    pub min_over_area: f64,
    pub oracle: f64,
    pub rel_gap: f64,
    pub runtime_s: f64,
}

/// Discrete Dirichlet minima on `A × I`, `A = (0,1)^{d−1}`, with datum
/// `g = Mx_α` on a collar `rε`, compared against the pure-convolution oracle
/// of the regime the trajectory tends to.
pub fn gamma_min_sweep(
    density: &PowerDensity,
    slope: &Matrix,
    trajectory: Trajectory,
    eps_values: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<SweepRow>> {
    let meta = density.meta();
    let d = meta.d;
    let (r, is_pure) = match &density.kernel().family {
        KernelFamily::Cylinder {
            radius,
            half_height: Some(h),
            center,
        } if radius == h && center.iter().all(|&c| c == 0.0) => (*radius, true),
        _ => (density.kernel().planar_support_radius().unwrap_or(1.0), false),
    };
    if eps_values.is_empty() || eps_values.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
        return Err(Error::invalid("sweep.eps", "values must lie in (0, 1]"));
    }
    let oracle = if is_pure {
        oracle_pure_conv(slope, r, meta.p, trajectory.regime())?
    } else {
        f64::NAN
    };
    let mut rows = Vec::new();
    for &eps in eps_values {
        let start = Instant::now();
        let gamma = trajectory.gamma(eps);
        let scale = ScaleParams::new(eps, gamma.min(1.0))?;
        let delta = scale.delta();
        let n = (8.0 / eps).round() as usize + 1;
        let nd = ((16.0 / delta).round() as usize + 1).clamp(3, 129);
        let mut origin = vec![0.0; d - 1];
        origin.push(-1.0);
        let mut extent = vec![1.0; d - 1];
        extent.push(2.0);
        let mut counts = vec![n; d - 1];
        counts.push(nd);
        let lat = Arc::new(Lattice::new(origin, &extent, counts, vec![false; d])?);
        let st = build_stencil(density.support(), eps, scale.gamma(), &lat, f64::INFINITY)?;
        let spec = DirichletClassSpec {
            datum: BoundaryDatum::Affine(slope.clone()),
            collar: r * eps,
        };
        let rep = minimize_dirichlet(density, &scale, lat, &spec, &st, opts)?;
        let v = rep.value;
        let gap = if oracle == 0.0 { v.abs() } else { (v - oracle).abs() / oracle.abs() };
        rows.push(SweepRow {
            eps,
            gamma: scale.gamma(),
            delta,
            min_over_area: v,
            oracle,
            rel_gap: gap,
            runtime_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// rotation example

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceCheck {
    pub slope_scale: f64,
    pub rotations: Vec<[[f64; 3]; 3]>,
    /// Value at `M` first, then at `RM` for each rotation.
    pub values: Vec<f64>,
    pub max_rel_spread: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationReport {
    pub delta: f64,
    pub eta: f64,
    pub p: f64,
    pub resolution: usize,
    pub bump_norm: f64,
    pub value_plus: Option<f64>,
    pub start_values: Vec<f64>,
    pub analytic_upper: f64,
    pub value_minus_lower_bound: Option<f64>,
    pub b_minus: Option<Vec<f64>>,
    pub analytic_lower: f64,
    /// Convex part alone at `−M`, a lower bound for the full cell value there.
    pub convex_part_minus: Option<f64>,
    pub verdict: Option<String>,
    pub invariance_check: Option<InvarianceCheck>,
    pub warnings: Vec<String>,
    pub runtime_s: f64,
}

fn identity_32(scale: f64) -> Matrix {
    vec![vec![scale, 0.0], vec![0.0, scale], vec![0.0, 0.0]]
}

fn rotate(r: &[[f64; 3]; 3], v: &[f64]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = (0..3).map(|j| r[i][j] * v[j]).sum();
    }
    out
}

/// Seeded uniform rotations of `ℝ³` from normalized Gaussian quaternions.
pub fn random_rotations(count: usize, seed: u64) -> Vec<[[f64; 3]; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let q: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = q.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
            let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
            [
                [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
                [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
                [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
            ]
        })
        .collect()
}

struct ShiftedPower {
    p: f64,
    targets: Vec<[f64; 3]>,
}

impl Objective for ShiftedPower {
    fn len(&self) -> usize {
        3
    }

    fn value_grad(&self, b: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        let mut g = [0.0; 3];
        let mut v = 0.0;
        for t in &self.targets {
            let diff: Vec<f64> = (0..3).map(|i| b[i] - t[i]).collect();
            let n = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
            v += n.powf(self.p);
            if n > 0.0 {
                for i in 0..3 {
                    g[i] += self.p * n.powf(self.p - 2.0) * diff[i];
                }
            }
        }
        if let Some(out) = grad {
            out.copy_from_slice(&g);
        }
        Ok(v)
    }

    fn project(&self, _x: &mut [f64]) {}

    fn project_grad(&self, _g: &mut [f64]) {}
}

/// `inf_b Σ_i |b − 2e_i|^p` over `b ∈ ℝ³`, `i = 1, 2`.
pub fn minus_slope_infimum(p: f64) -> Result<(Vec<f64>, f64)> {
    let obj = ShiftedPower {
        p,
        targets: vec![[2.0, 0.0, 0.0], [0.0, 2.0, 0.0]],
    };
    let r = minimize_bb(&obj, vec![0.0; 3], 1e-12, 10_000)?;
    Ok((r.x, r.value))
}

/// Discrete measure of one bump cylinder `C_η(e_1 + e_d)` under the stencil
/// of `lat`.
fn discrete_bump_measure(eta: f64, delta: f64, lat: &Lattice) -> Result<f64> {
    let c = vec![1.0, 0.0, 1.0];
    let st = build_stencil(&Kernel::cylinder(3, eta, eta, c), 1.0, 1.0 / delta, lat, f64::INFINITY)?;
    let w = st.total_weight();
    if !(w > 0.0) {
        return Err(Error::invalid("rotation.resolution", "bump cylinder contains no stencil point"));
    }
    Ok(w)
}

fn corrector_start(lat: &Lattice, delta: f64, r: &[[f64; 3]; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(lat.num_nodes() * 3);
    let mut x = vec![0.0; 3];
    for node in 0..lat.num_nodes() {
        lat.coords_into(node, &mut x);
        out.extend(rotate(r, &[0.0, 0.0, x[2] / delta]));
    }
    out
}

fn rotation_starts(lat: &Lattice, delta: f64, r: &[[f64; 3]; 3], extra: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut starts = vec![corrector_start(lat, delta, r)];
    for k in 0..extra {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1 + k as u64));
        let mut v = Vec::with_capacity(lat.num_nodes() * 3);
        for _ in 0..lat.num_nodes() {
            let z: Vec<f64> = (0..3).map(|_| { let g: f64 = StandardNormal.sample(&mut rng); scale * g }).collect();
            v.extend(rotate(r, &z));
        }
        starts.push(v);
    }
    starts
}

/// Upper bound at `+I_{3,2}` against the convex lower bound at `−I_{3,2}`
/// (for `δ < 1`), and the invariance check at `2·I_{3,2}` under seeded
/// rotations (for `δ > 4`). `opts.multistart − 1` seeded perturbations are
/// tried after the affine and corrector starts.
pub fn rotation_invariance_experiment(eta: f64, p: f64, delta: f64, resolution: usize, opts: &SolverOptions) -> Result<RotationReport> {
    let clock = Instant::now();
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::invalid("rotation.delta", "must be positive and finite"));
    }
    let base = RotationDensity::new(3, eta, p)?;
    // vertical ξ-step 1/4 below δ = 4, 1/32 above
    let nd = if delta < 4.0 { 17 } else { 9 };
    let n = resolution;
    let lat = Arc::new(Lattice::new(vec![0.0, 0.0, -1.0], &[1.0, 1.0, 2.0], vec![n, n, nd], vec![true, true, false])?);
    let mut warnings = Vec::new();
    let bump_measure = discrete_bump_measure(eta, delta, &lat).unwrap_or(f64::NAN);
    let density = if bump_measure.is_finite() {
        base.with_bump_norm(1.0 / bump_measure)
    } else {
        base.clone()
    };
    let st = build_stencil(density.support(), 1.0, 1.0 / delta, &lat, f64::INFINITY)?;
    let extra = opts.multistart.saturating_sub(1);
    let inner_opts = SolverOptions {
        multistart: 1,
        ..opts.clone()
    };
    let ident = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let analytic_upper = 4.0 + 8.0 * p * eta * (1.0 + 2.0 * eta).powf(p - 1.0);
    let analytic_lower = (1.0 - eta) * 2f64.powf(2.0 + p / 2.0);
    let mut report = RotationReport {
        delta,
        eta,
        p,
        resolution,
        bump_norm: density.bump_norm(),
        value_plus: None,
        start_values: vec![],
        analytic_upper,
        value_minus_lower_bound: None,
        b_minus: None,
        analytic_lower,
        convex_part_minus: None,
        verdict: None,
        invariance_check: None,
        warnings: vec![],
        runtime_s: 0.0,
    };
    if delta < 1.0 {
        let cls = PeriodicClassSpec {
            slope: identity_32(1.0),
            vertical_slope: None,
            free_b: false,
            cell: CellKind::Slab,
        };
        let starts = rotation_starts(&lat, delta, &ident, extra, opts.perturbation, opts.seed);
        let rep = minimize_periodic_cell_from(&density, delta, &cls, lat.clone(), &st, &inner_opts, &starts)?;
        warnings.extend(rep.warnings.iter().cloned());
        report.value_plus = Some(rep.value);
        report.start_values = rep.start_values.clone();
        let (b, inf) = minus_slope_infimum(p)?;
        // both vertical bump cylinders C_η(e_i ± e_d) contribute
        let lower = 2.0 * (2.0 - delta * (1.0 + eta)) * inf;
        report.value_minus_lower_bound = Some(lower);
        report.b_minus = Some(b);
        let convex = density.convex_part();
        let cst = build_stencil(convex.support(), 1.0, 1.0 / delta, &lat, f64::INFINITY)?;
        let minus = PeriodicClassSpec {
            slope: identity_32(-1.0),
            ..cls
        };
        let crep = minimize_periodic_cell(&convex, delta, &minus, lat.clone(), &cst, &inner_opts)?;
        report.convex_part_minus = Some(crep.value);
        report.verdict = Some(if rep.value < lower { "asymmetric" } else { "inconclusive" }.into());
    }
    if delta > 4.0 {
        let scale = 2.0;
        let rotations = random_rotations(3, opts.seed);
        let mut values = Vec::new();
        for r in std::iter::once(&ident).chain(rotations.iter()) {
            let slope: Matrix = (0..3).map(|i| (0..2).map(|j| r[i][j] * scale).collect()).collect();
            let cls = PeriodicClassSpec {
                slope,
                vertical_slope: None,
                free_b: false,
                cell: CellKind::Slab,
            };
            let starts = rotation_starts(&lat, delta, r, extra, opts.perturbation, opts.seed);
            let rep = minimize_periodic_cell_from(&density, delta, &cls, lat.clone(), &st, &inner_opts, &starts)?;
            warnings.extend(rep.warnings.iter().cloned());
            values.push(rep.value);
        }
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let spread = if hi > 0.0 { (hi - lo) / hi } else { 0.0 };
        report.invariance_check = Some(InvarianceCheck {
            slope_scale: scale,
            rotations,
            values,
            max_rel_spread: spread,
            pass: spread <= 0.05,
        });
    }
    warnings.sort();
    warnings.dedup();
    report.warnings = warnings;
    report.runtime_s = clock.elapsed().as_secs_f64();
    Ok(report)
}

// ---------------------------------------------------------------------------
// output

/// Ladder or sequence CSV: `resolution,value,runtime_s,grad_norm`.
pub fn write_ladder_csv(path: &Path, rows: &[LadderEntry]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{CSV_VERSION}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["resolution", "value", "runtime_s", "grad_norm"])?;
    for r in rows {
        w.write_record([r.resolution.to_string(), r.value.to_string(), r.runtime_s.to_string(), r.grad_norm.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{CSV_VERSION}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["eps", "gamma", "delta", "min_over_area", "oracle", "rel_gap", "runtime_s"])?;
    for r in rows {
        w.write_record([
            r.eps.to_string(),
            r.gamma.to_string(),
            r.delta.to_string(),
            r.min_over_area.to_string(),
            r.oracle.to_string(),
            r.rel_gap.to_string(),
            r.runtime_s.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scaling_csv(path: &Path, table: &ScalingTable) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{CSV_VERSION}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["eps", "gamma", "raw", "planar", "vertical_factor", "predicted", "ratio"])?;
    for r in &table.rows {
        w.write_record([
            r.eps.to_string(),
            r.gamma.to_string(),
            r.raw.to_string(),
            r.planar.to_string(),
            r.vertical_factor.to_string(),
            r.predicted.to_string(),
            r.ratio.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::pure_convolution;

    #[test]
    fn theta_closed_forms() {
        assert_eq!(theta(0.0, 2.5), 10.0);
        assert_eq!(theta(f64::INFINITY, 0.3), 4.0);
        assert_eq!(theta(1.0, 1.0), 3.0);
        // r beyond the vertical reach 2/δ
        assert_eq!(theta(4.0, 1.0), 4.0 * 0.5 * 2.0);
    }

    #[test]
    fn pure_conv_oracles() {
        let m = vec![vec![1.0]];
        let z = oracle_pure_conv(&m, 2.0, 2.0, Regime::Zero).unwrap();
        assert!((z - 128.0 / 3.0).abs() < 1e-12);
        let i = oracle_pure_conv(&m, 2.0, 2.0, Regime::Infinity).unwrap();
        assert!((i - 64.0 / 3.0).abs() < 1e-12);
        for reg in [Regime::Zero, Regime::Infinity, Regime::Delta(0.7)] {
            assert_eq!(oracle_pure_conv(&vec![vec![0.0]], 1.0, 3.0, reg).unwrap(), 0.0);
        }
    }

    #[test]
    fn planar_integral_general_p_matches_closed_forms() {
        // n = 1: 2|M|^p r^{p+1}/(p+1)
        let v = planar_power_integral(&vec![vec![2.0]], 1.5, 3.0).unwrap();
        assert!((v - 2.0 * 8.0 * 1.5f64.powi(4) / 4.0).abs() < 1e-12);
        // n = 2, M = I: 2π r^{p+2}/(p+2)
        let v = planar_power_integral(&vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1.0, 3.0).unwrap();
        assert!((v - 2.0 * PI / 5.0).abs() < 1e-10);
        // p = 2 branch agrees with the quadrature branch
        let m = vec![vec![1.0, 0.5], vec![-0.3, 2.0]];
        let closed = planar_power_integral(&m, 1.2, 2.0).unwrap();
        let apply = |t: f64| {
            let (c, s) = (t.cos(), t.sin());
            (m[0][0] * c + m[0][1] * s).powi(2) + (m[1][0] * c + m[1][1] * s).powi(2)
        };
        let k = 2000;
        let ang: f64 = (0..k).map(|i| apply(2.0 * PI * i as f64 / k as f64)).sum::<f64>() * 2.0 * PI / k as f64;
        assert!((closed - 1.2f64.powi(4) / 4.0 * ang).abs() < 1e-10);
    }

    #[test]
    fn richardson_rates() {
        let mk = |n: f64, v: f64| LadderEntry {
            resolution: n,
            value: v,
            runtime_s: 0.0,
            grad_norm: 0.0,
            iterations: 0,
            affine_value: v,
            converged: true,
            history: vec![],
        };
        // v = 2 + 1/n
        let l: Vec<_> = [8.0, 16.0, 32.0].iter().map(|&n| mk(n, 2.0 + 1.0 / n)).collect();
        let (x, r) = richardson(&l);
        assert!((x.unwrap() - 2.0).abs() < 1e-12);
        assert!((r.unwrap() - 1.0).abs() < 1e-12);
        // alternating differences: skipped
        let l = vec![mk(8.0, 2.0), mk(16.0, 2.1), mk(32.0, 2.0)];
        assert_eq!(richardson(&l).0, None);
        let l = vec![mk(8.0, 2.0), mk(16.0, 1.5)];
        assert!((richardson(&l).0.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cell_delta_small_ladder() {
        let f = pure_convolution(2, 1, 1.0, 2.0).unwrap();
        let est = cell_formula_delta(&f, 1.0, &vec![vec![1.0]], &[8, 16], &SolverOptions::default()).unwrap();
        assert!((est.value - 2.0).abs() < 0.06, "{est:?}");
        assert!(est.ladder.iter().all(|e| e.value <= e.affine_value));
        let zero = cell_formula_delta(&f, 1.0, &vec![vec![0.0]], &[8, 16], &SolverOptions::default()).unwrap();
        assert!(zero.ladder.iter().all(|e| e.value == 0.0));
    }

    #[test]
    fn infinity_needs_planar_density() {
        let f = pure_convolution(2, 1, 1.0, 2.0).unwrap();
        let err = cell_formula_infinity(&f, &vec![vec![1.0]], &[8], &SolverOptions::default()).unwrap_err();
        assert!(err.to_string().contains("requires planar density"));
    }

    #[test]
    fn vertical_factor_branches() {
        assert_eq!(vertical_factor_exact(0.5, 0.125), 0.125);
        assert_eq!(vertical_factor_exact(0.125, 0.5), 15.0 / 8.0);
    }

    #[test]
    fn minus_slope_infimum_is_four_for_p2() {
        let (b, v) = minus_slope_infimum(2.0).unwrap();
        assert!((v - 4.0).abs() < 1e-10);
        assert!((b[0] - 1.0).abs() < 1e-6 && (b[1] - 1.0).abs() < 1e-6 && b[2].abs() < 1e-6);
    }

    #[test]
    fn rotations_are_orthogonal() {
        for r in random_rotations(5, 7) {
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                    assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
        }
    }
}
