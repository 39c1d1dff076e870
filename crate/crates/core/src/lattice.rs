//! Tensor lattices over thin cylinders and periodic cells, nodal fields, and
//! lattice-matched interaction stencils.
//!
//! Node indexing is row-major: the last axis varies fastest. On a lattice
//! built from a [`CylinderSpec`] the planar axes come first and the vertical
//! (thickness) axis is last.
//!
//! A stencil entry with integer shift `k` stands for the interaction variable
//! `ξ_α = k_α h_α / ε` in the planar axes and `ξ_d = k_d h_d γ / ε` in the
//! vertical axis, so every difference `u(x + shift) − u(x)` lands on a node.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Kernel;

/// Geometry of `ω × (−h, h)` with `ω` a box, together with the codomain
/// dimension of the fields living on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylinderSpec {
    pub planar_box: Vec<(f64, f64)>,
    /// γ for the physical film, 1 for the rescaled domain.
    pub half_thickness: f64,
    pub ambient_dim: usize,
    pub codomain_dim: usize,
}

impl CylinderSpec {
    pub fn new(planar_box: Vec<(f64, f64)>, half_thickness: f64, codomain_dim: usize) -> Result<Self> {
        let spec = CylinderSpec {
            ambient_dim: planar_box.len() + 1,
            planar_box,
            half_thickness,
            codomain_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The rescaled domain `(0,1)^{d−1} × (−1,1)`.
    pub fn unit(d: usize, m: usize) -> Result<Self> {
        Self::new(vec![(0.0, 1.0); d.saturating_sub(1)], 1.0, m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ambient_dim < 2 || self.planar_box.len() + 1 != self.ambient_dim {
            return Err(Error::invalid("cylinder.ambient_dim", "need d ≥ 2 and d − 1 planar intervals"));
        }
        if self.codomain_dim < 1 {
            return Err(Error::invalid("cylinder.codomain_dim", "need m ≥ 1"));
        }
        for (i, &(a, b)) in self.planar_box.iter().enumerate() {
            if !(a.is_finite() && b.is_finite() && b > a) {
                return Err(Error::invalid(format!("cylinder.planar_box[{i}]"), "non-positive extent"));
            }
        }
        if !(self.half_thickness > 0.0 && self.half_thickness.is_finite()) {
            return Err(Error::invalid("cylinder.half_thickness", "must be positive"));
        }
        Ok(())
    }

    pub fn planar_area(&self) -> f64 {
        self.planar_box.iter().map(|(a, b)| b - a).product()
    }
}

/// Tensor grid with per-axis spacing and periodicity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub spacing: Vec<f64>,
    pub node_counts: Vec<usize>,
    pub periodic: Vec<bool>,
    pub origin: Vec<f64>,
}

impl Lattice {
    /// Grid over the box `[origin, origin + extent]`. Non-periodic axes place
    /// nodes on both end points; periodic axes treat the extent as one period.
    pub fn new(origin: Vec<f64>, extent: &[f64], node_counts: Vec<usize>, periodic: Vec<bool>) -> Result<Self> {
        let n = origin.len();
        if extent.len() != n || node_counts.len() != n || periodic.len() != n || n == 0 {
            return Err(Error::invalid("lattice", "axis arrays must have equal nonzero length"));
        }
        let mut spacing = Vec::with_capacity(n);
        for a in 0..n {
            if node_counts[a] < 2 {
                return Err(Error::invalid(format!("lattice.resolution[{a}]"), "resolution below 2"));
            }
            if !(extent[a] > 0.0 && extent[a].is_finite()) {
                return Err(Error::invalid(format!("lattice.extent[{a}]"), "non-positive extent"));
            }
            let cells = if periodic[a] { node_counts[a] } else { node_counts[a] - 1 };
            spacing.push(extent[a] / cells as f64);
        }
        Ok(Lattice {
            spacing,
            node_counts,
            periodic,
            origin,
        })
    }

    pub fn ndim(&self) -> usize {
        self.spacing.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_counts.iter().product()
    }

    pub fn extent(&self, axis: usize) -> f64 {
        let cells = if self.periodic[axis] {
            self.node_counts[axis]
        } else {
            self.node_counts[axis] - 1
        };
        self.spacing[axis] * cells as f64
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.ndim()];
        for a in (0..self.ndim().saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.node_counts[a + 1];
        }
        s
    }

    pub fn index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.node_counts)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn multi_index(&self, mut node: usize) -> Vec<usize> {
        let mut out = vec![0; self.ndim()];
        for a in (0..self.ndim()).rev() {
            out[a] = node % self.node_counts[a];
            node /= self.node_counts[a];
        }
        out
    }

    pub fn coords_into(&self, node: usize, out: &mut [f64]) {
        let mut rest = node;
        for a in (0..self.ndim()).rev() {
            let i = rest % self.node_counts[a];
            rest /= self.node_counts[a];
            out[a] = self.origin[a] + i as f64 * self.spacing[a];
        }
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.ndim()];
        self.coords_into(node, &mut out);
        out
    }

    /// Quadrature cell volume of the x-sum (product of spacings).
    pub fn node_measure(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Index range `[lo, hi]` of nodes whose coordinate along `axis` lies in
    /// `[a, b]` (closed, with a small relative tolerance).
    pub fn index_range(&self, axis: usize, a: f64, b: f64) -> Option<(usize, usize)> {
        let h = self.spacing[axis];
        let tol = 1e-9 * h;
        let lo = ((a - self.origin[axis] - tol) / h).ceil().max(0.0) as usize;
        let hi_f = ((b - self.origin[axis] + tol) / h).floor();
        if hi_f < 0.0 {
            return None;
        }
        let hi = (hi_f as usize).min(self.node_counts[axis] - 1);
        (lo <= hi).then_some((lo, hi))
    }
}

/// Lattice covering a [`CylinderSpec`]: planar axes followed by the vertical
/// axis `(−half_thickness, half_thickness)`.
pub fn build_lattice(spec: &CylinderSpec, resolution: &[usize], periodic: &[bool]) -> Result<Lattice> {
    spec.validate()?;
    let d = spec.ambient_dim;
    if resolution.len() != d {
        return Err(Error::invalid("lattice.resolution", format!("expected {d} entries")));
    }
    if periodic.len() != d {
        return Err(Error::invalid("lattice.periodic", format!("expected {d} entries")));
    }
    if let Some(a) = resolution.iter().position(|&n| n < 2) {
        return Err(Error::invalid(format!("lattice.resolution[{a}]"), "resolution below 2"));
    }
    let mut origin: Vec<f64> = spec.planar_box.iter().map(|p| p.0).collect();
    let mut extent: Vec<f64> = spec.planar_box.iter().map(|p| p.1 - p.0).collect();
    origin.push(-spec.half_thickness);
    extent.push(2.0 * spec.half_thickness);
    Lattice::new(origin, &extent, resolution.to_vec(), periodic.to_vec())
}

/// Planar sub-box restricting both end points of every interacting pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Per-axis source/target node offsets and trapezoid factors for one shift.
#[derive(Clone, Debug, Default)]
pub(crate) struct AxisPairs {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub tau: Vec<f64>,
}

/// Admissible pairs for `offset`, one [`AxisPairs`] per axis; `None` when
/// the set is empty.
///
/// Wrapped axes pair every node with weight one. On bounded axes the
/// admissible source range gets half weights at both ends, so the x-sum of a
/// constant equals the exact length of `I ∩ (I − shift)`.
pub(crate) fn pair_plan(lattice: &Lattice, offset: &[i64], region: Option<&PlanarRegion>) -> Option<Vec<AxisPairs>> {
    let strides = lattice.strides();
    let mut axes = Vec::with_capacity(lattice.ndim());
    for a in 0..lattice.ndim() {
        let n = lattice.node_counts[a];
        let k = offset[a];
        let restricted = region.and_then(|r| (a < r.lo.len()).then(|| (r.lo[a], r.hi[a])));
        let mut ap = AxisPairs::default();
        if lattice.periodic[a] && restricted.is_none() {
            let kk = k.rem_euclid(n as i64) as usize;
            for i in 0..n {
                ap.src.push(i * strides[a]);
                ap.tgt.push(((i + kk) % n) * strides[a]);
                ap.tau.push(1.0);
            }
        } else {
            let (lo, hi) = match restricted {
                Some((x0, x1)) => lattice.index_range(a, x0, x1)?,
                None => (0, n - 1),
            };
            let (lo, hi) = (lo as i64, hi as i64);
            let first = lo.max(lo - k);
            let last = hi.min(hi - k);
            if last <= first {
                return None;
            }
            for i in first..=last {
                ap.src.push(i as usize * strides[a]);
                ap.tgt.push((i + k) as usize * strides[a]);
                ap.tau.push(if i == first || i == last { 0.5 } else { 1.0 });
            }
        }
        axes.push(ap);
    }
    Some(axes)
}

/// Visit every admissible `(source, target, trapezoid factor)` triple in
/// lexicographic source order.
#[inline]
pub(crate) fn for_each_pair<F: FnMut(usize, usize, f64)>(axes: &[AxisPairs], f: &mut F) {
    fn rec<F: FnMut(usize, usize, f64)>(axes: &[AxisPairs], s: usize, t: usize, tau: f64, f: &mut F) {
        let (first, rest) = axes.split_first().expect("nonempty");
        if rest.is_empty() {
            for i in 0..first.src.len() {
                f(s + first.src[i], t + first.tgt[i], tau * first.tau[i]);
            }
        } else {
            for i in 0..first.src.len() {
                rec(rest, s + first.src[i], t + first.tgt[i], tau * first.tau[i], f);
            }
        }
    }
    if !axes.is_empty() {
        rec(axes, 0, 0, 1.0, f);
    }
}

/// Nodes `x` such that `x + offset` is still a node (inside `region` when
/// given), wrapping on periodic axes.
pub fn admissible_nodes(lattice: &Lattice, offset: &[i64], region: Option<&PlanarRegion>) -> Vec<usize> {
    let mut out = Vec::new();
    if offset.len() != lattice.ndim() {
        return out;
    }
    // a single-point range still counts as admissible here, so build it by hand
    let strides = lattice.strides();
    let mut ranges: Vec<Vec<usize>> = Vec::with_capacity(lattice.ndim());
    for a in 0..lattice.ndim() {
        let n = lattice.node_counts[a] as i64;
        let k = offset[a];
        let restricted = region.and_then(|r| (a < r.lo.len()).then(|| (r.lo[a], r.hi[a])));
        if lattice.periodic[a] && restricted.is_none() {
            ranges.push((0..n as usize).collect());
        } else {
            let (lo, hi) = match restricted {
                Some((x0, x1)) => match lattice.index_range(a, x0, x1) {
                    Some((l, h)) => (l as i64, h as i64),
                    None => return out,
                },
                None => (0, n - 1),
            };
            let first = lo.max(lo - k);
            let last = hi.min(hi - k);
            if last < first {
                return out;
            }
            ranges.push((first..=last).map(|i| i as usize).collect());
        }
    }
    let mut idx = vec![0usize; ranges.len()];
    loop {
        out.push((0..ranges.len()).map(|a| ranges[a][idx[a]] * strides[a]).sum());
        let mut a = ranges.len();
        loop {
            if a == 0 {
                return out;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < ranges[a].len() {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// Whether the vertical ξ-coordinate of a stencil is measured in the
/// rescaled frame (`ξ_d = k h_d γ/ε`) or the physical one (`ξ_d = k h_d/ε`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StencilFrame {
    Rescaled,
    Physical,
}

/// Lattice-matched quadrature of the ξ-integral.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionStencil {
    pub offsets: Vec<Vec<i64>>,
    pub xi_points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub eps: f64,
    pub gamma: f64,
    pub truncation: f64,
    pub frame: StencilFrame,
    /// Spacing of the lattice the stencil was built for.
    pub spacing: Vec<f64>,
    pub warning: Option<String>,
}

impl InteractionStencil {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Keep entries with `|ξ_α| < T`; entries on `|ξ_α| = T` keep the part
    /// of their cell inside the truncation ball.
    pub fn truncated(&self, kernel: &Kernel, t: f64) -> InteractionStencil {
        let mut out = self.clone();
        out.offsets.clear();
        out.xi_points.clear();
        out.weights.clear();
        out.truncation = self.truncation.min(t);
        let vol: f64 = self.xi_steps().iter().product();
        for i in 0..self.len() {
            let w = vol * kernel.support_weight_truncated(&self.xi_points[i], out.truncation);
            if w > 0.0 {
                out.offsets.push(self.offsets[i].clone());
                out.xi_points.push(self.xi_points[i].clone());
                out.weights.push(w);
            }
        }
        out
    }

    /// Replace support fractions by cell averages of `kernel`, for
    /// convolution energies whose weight sits in the stencil rather than in
    /// the density.
    pub fn kernel_weighted(&self, kernel: &Kernel) -> InteractionStencil {
        let mut out = self.clone();
        out.offsets.clear();
        out.xi_points.clear();
        out.weights.clear();
        let d = kernel.dim;
        let mut half = vec![0.0; d];
        for (a, h) in self.xi_steps().iter().enumerate() {
            half[a] = 0.5 * h;
        }
        let vol: f64 = self.xi_steps().iter().product();
        for i in 0..self.len() {
            let w = vol * kernel.cell_average(&self.xi_points[i], &half);
            if w > 0.0 {
                out.offsets.push(self.offsets[i].clone());
                out.xi_points.push(self.xi_points[i].clone());
                out.weights.push(w);
            }
        }
        out
    }

    /// ξ-spacing along each lattice axis.
    pub fn xi_steps(&self) -> Vec<f64> {
        let n = self.spacing.len();
        let planar = self.xi_points.first().map(|x| x.len()).unwrap_or(n + 1) - 1;
        (0..n)
            .map(|a| {
                if a < planar {
                    self.spacing[a] / self.eps
                } else {
                    match self.frame {
                        StencilFrame::Rescaled => self.spacing[a] * self.gamma / self.eps,
                        StencilFrame::Physical => self.spacing[a] / self.eps,
                    }
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Stencil for the rescaled functional on `lattice` (planar axes first, the
/// vertical axis last). A lattice with `d − 1` axes yields a planar stencil
/// whose ξ-points have `ξ_d = 0`.
pub fn build_stencil(kernel: &Kernel, eps: f64, gamma: f64, lattice: &Lattice, truncation_t: f64) -> Result<InteractionStencil> {
    stencil_impl(kernel, eps, gamma, lattice, truncation_t, StencilFrame::Rescaled)
}

/// Stencil for the physical functional on `Ω^γ`: vertical shifts are `εξ_d`
/// with no γ-rescaling.
pub fn build_stencil_physical(kernel: &Kernel, eps: f64, gamma: f64, lattice: &Lattice, truncation_t: f64) -> Result<InteractionStencil> {
    stencil_impl(kernel, eps, gamma, lattice, truncation_t, StencilFrame::Physical)
}

fn stencil_impl(
    kernel: &Kernel,
    eps: f64,
    gamma: f64,
    lattice: &Lattice,
    truncation_t: f64,
    frame: StencilFrame,
) -> Result<InteractionStencil> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid("scale.eps", "must be positive"));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid("scale.gamma", "must be positive"));
    }
    if truncation_t.is_nan() {
        return Err(Error::invalid("truncation", "NaN"));
    }
    let d = kernel.dim;
    let nd = lattice.ndim();
    let has_vertical = if nd == d {
        true
    } else if nd + 1 == d {
        false
    } else {
        return Err(Error::Mismatch(format!("kernel dimension {d} vs lattice with {nd} axes")));
    };
    let planar = d - 1;
    let mut step = vec![0.0; nd];
    for a in 0..nd {
        step[a] = if a < planar {
            lattice.spacing[a] / eps
        } else {
            match frame {
                StencilFrame::Rescaled => lattice.spacing[a] * gamma / eps,
                StencilFrame::Physical => lattice.spacing[a] / eps,
            }
        };
    }
    let planar_reach = match (kernel.planar_support_radius(), truncation_t.is_finite()) {
        (Some(r), true) => r.min(truncation_t.max(0.0)),
        (Some(r), false) => r,
        (None, true) => truncation_t.max(0.0),
        (None, false) => {
            return Err(Error::invalid(
                "truncation",
                "kernel has unbounded planar support; a finite truncation radius is required",
            ))
        }
    };
    let mut bound = vec![0i64; nd];
    for a in 0..nd {
        let reach = if a < planar {
            Some(planar_reach)
        } else {
            kernel.vertical_support_halfheight()
        };
        let by_support = reach.map(|r| ((r / step[a]) * (1.0 + 1e-12)).floor() as i64);
        let n = lattice.node_counts[a] as i64;
        let by_lattice = if lattice.periodic[a] { None } else { Some(n - 2) };
        bound[a] = match (by_support, by_lattice) {
            (Some(s), Some(l)) => s.min(l),
            (Some(s), None) => s,
            (None, Some(l)) => l,
            (None, None) => {
                return Err(Error::invalid(
                    "kernel",
                    "unbounded vertical support on a periodic vertical axis",
                ))
            }
        };
        bound[a] = bound[a].max(0);
    }
    let cell_volume: f64 = step.iter().product();
    let mut offsets = Vec::new();
    let mut xi_points = Vec::new();
    let mut weights = Vec::new();
    let mut k: Vec<i64> = bound.iter().map(|b| -b).collect();
    let mut xi = vec![0.0; d];
    loop {
        if k.iter().any(|&v| v != 0) {
            for a in 0..nd {
                xi[a] = k[a] as f64 * step[a];
            }
            if !has_vertical {
                xi[d - 1] = 0.0;
            }
            let w = kernel.support_weight_truncated(&xi, truncation_t);
            if w > 0.0 {
                offsets.push(k.clone());
                xi_points.push(xi.clone());
                weights.push(cell_volume * w);
            }
        }
        let mut a = nd;
        let done = loop {
            if a == 0 {
                break true;
            }
            a -= 1;
            k[a] += 1;
            if k[a] <= bound[a] {
                break false;
            }
            k[a] = -bound[a];
        };
        if done {
            break;
        }
    }
    let warning = weights
        .is_empty()
        .then(|| "empty stencil: kernel support smaller than one lattice cell".to_string());
    Ok(InteractionStencil {
        offsets,
        xi_points,
        weights,
        eps,
        gamma,
        truncation: truncation_t,
        frame,
        spacing: lattice.spacing.clone(),
        warning,
    })
}

/// Nodal values of an `ℝ^m`-valued field; node `i` owns
/// `values[i*m .. (i+1)*m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub lattice: Arc<Lattice>,
    pub m: usize,
    pub values: Vec<f64>,
}

impl Field {
    pub fn zeros(lattice: Arc<Lattice>, m: usize) -> Self {
        let n = lattice.num_nodes() * m;
        Field {
            lattice,
            m,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(lattice: Arc<Lattice>, m: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.num_nodes() * m {
            return Err(Error::invalid(
                "field.values",
                format!("expected {} entries, got {}", lattice.num_nodes() * m, values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid("field.values", format!("entry {i} is not finite")));
        }
        Ok(Field { lattice, m, values })
    }

    /// Sample `f(x)` at every node.
    pub fn from_fn(lattice: Arc<Lattice>, m: usize, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Self {
        let mut values = Vec::with_capacity(lattice.num_nodes() * m);
        let mut x = vec![0.0; lattice.ndim()];
        for node in 0..lattice.num_nodes() {
            lattice.coords_into(node, &mut x);
            let v = f(&x);
            values.extend_from_slice(&v[..m]);
        }
        Field { lattice, m, values }
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    /// CSV with one row per node: `node, x_0..x_{D-1}, u_0..u_{m-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["node".to_string()];
        header.extend((0..self.lattice.ndim()).map(|a| format!("x{a}")));
        header.extend((0..self.m).map(|c| format!("u{c}")));
        w.write_record(&header)?;
        for node in 0..self.lattice.num_nodes() {
            let mut row = vec![node.to_string()];
            row.extend(self.lattice.coords(node).iter().map(|v| format!("{v:?}")));
            row.extend(self.node(node).iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(lattice: Arc<Lattice>, m: usize, path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let skip = 1 + lattice.ndim();
        let mut values = Vec::with_capacity(lattice.num_nodes() * m);
        for rec in r.records() {
            let rec = rec?;
            for c in 0..m {
                let s = rec.get(skip + c).ok_or_else(|| Error::invalid("field.csv", "short row"))?;
                values.push(
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::invalid("field.csv", e.to_string()))?,
                );
            }
        }
        Field::from_values(lattice, m, values)
    }

    /// Raw little-endian `f64` values in node order.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(lattice: Arc<Lattice>, m: usize, path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::invalid("field.binary", "length is not a multiple of 8"));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Field::from_values(lattice, m, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cyl() -> CylinderSpec {
        CylinderSpec::new(vec![(0.0, 1.0)], 1.0, 1).unwrap()
    }

    #[test]
    fn five_by_five_grid() {
        let lat = build_lattice(&unit_cyl(), &[5, 5], &[false, false]).unwrap();
        assert_eq!(lat.num_nodes(), 25);
        assert_eq!(lat.spacing, vec![0.25, 0.5]);
        assert_eq!(lat.coords(24), vec![1.0, 1.0]);
        assert_eq!(lat.coords(0), vec![0.0, -1.0]);
    }

    #[test]
    fn periodic_axis_spacing() {
        let lat = build_lattice(&unit_cyl(), &[4, 3], &[true, false]).unwrap();
        assert_eq!(lat.spacing[0], 0.25);
        assert_eq!(lat.extent(0), 1.0);
    }

    #[test]
    fn low_resolution_rejected() {
        let err = build_lattice(&unit_cyl(), &[1, 3], &[false, false]).unwrap_err();
        assert!(err.to_string().contains("resolution below 2"));
        assert!(err.is_validation());
    }

    #[test]
    fn bad_extent_rejected() {
        assert!(CylinderSpec::new(vec![(1.0, 1.0)], 1.0, 1).is_err());
        assert!(CylinderSpec::new(vec![(0.0, 1.0)], 0.0, 1).is_err());
    }

    #[test]
    fn row_major_roundtrip() {
        let lat = Lattice::new(vec![0.0; 3], &[1.0; 3], vec![3, 4, 5], vec![false; 3]).unwrap();
        for node in 0..lat.num_nodes() {
            assert_eq!(lat.index(&lat.multi_index(node)), node);
        }
        assert_eq!(lat.strides(), vec![20, 5, 1]);
    }

    #[test]
    fn admissible_index_arithmetic() {
        let lat = Lattice::new(vec![0.0], &[1.0], vec![5], vec![false]).unwrap();
        assert_eq!(admissible_nodes(&lat, &[2], None), vec![0, 1, 2]);
        assert_eq!(admissible_nodes(&lat, &[-2], None), vec![2, 3, 4]);
        assert!(admissible_nodes(&lat, &[5], None).is_empty());
        let per = Lattice::new(vec![0.0], &[1.0], vec![5], vec![true]).unwrap();
        assert_eq!(admissible_nodes(&per, &[7], None), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn admissible_region_restricts_both_ends() {
        let lat = Lattice::new(vec![0.0, -1.0], &[1.0, 2.0], vec![5, 3], vec![false, false]).unwrap();
        let region = PlanarRegion {
            lo: vec![0.25],
            hi: vec![0.75],
        };
        let nodes = admissible_nodes(&lat, &[1, 0], Some(&region));
        let xs: Vec<f64> = nodes.iter().map(|&n| lat.coords(n)[0]).collect();
        assert!(xs.iter().all(|&x| x == 0.25 || x == 0.5));
        assert_eq!(nodes.len(), 6);
    }

    #[test]
    fn pair_plan_lengths_are_exact() {
        // the x-sum of 1 over admissible pairs equals |I ∩ (I − k h)|
        let lat = Lattice::new(vec![-1.0], &[2.0], vec![9], vec![false]).unwrap();
        for k in -7i64..=7 {
            let plan = pair_plan(&lat, &[k], None).unwrap();
            let mut s = 0.0;
            for_each_pair(&plan, &mut |_, _, tau| s += tau);
            let exact = 2.0 - (k.abs() as f64) * 0.25;
            assert!((s * 0.25 - exact).abs() < 1e-14, "k={k}");
        }
        assert!(pair_plan(&lat, &[8], None).is_none());
    }

    #[test]
    fn stencil_small_example() {
        let spec = CylinderSpec::new(vec![(0.0, 1.0)], 1.0, 1).unwrap();
        let lat = build_lattice(&spec, &[5, 9], &[false, false]).unwrap();
        let k = Kernel::cylinder_indicator(2, 1.0);
        let st = build_stencil(&k, 0.5, 0.5, &lat, 1.0).unwrap();
        let planar: std::collections::BTreeSet<i64> = st.offsets.iter().map(|o| o[0]).collect();
        assert_eq!(planar.into_iter().collect::<Vec<_>>(), vec![-2, -1, 0, 1, 2]);
        for (o, xi) in st.offsets.iter().zip(&st.xi_points) {
            assert_eq!(xi[0], o[0] as f64 * 0.5);
            assert_eq!(xi[1], o[1] as f64 * 0.25);
            assert!(o.iter().any(|&v| v != 0));
        }
        assert!(st.weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn stencil_sorted_lexicographically() {
        let lat = Lattice::new(vec![0.0, -1.0], &[1.0, 2.0], vec![17, 33], vec![false, false]).unwrap();
        let st = build_stencil(&Kernel::cylinder_indicator(2, 1.0), 0.25, 0.25, &lat, f64::INFINITY).unwrap();
        let mut sorted = st.offsets.clone();
        sorted.sort();
        assert_eq!(sorted, st.offsets);
    }

    #[test]
    fn stencil_volume_converges_to_cylinder() {
        let mut errs = Vec::new();
        for n in [8usize, 16, 32] {
            let lat = Lattice::new(vec![0.0, -1.0], &[4.0, 2.0], vec![4 * n + 1, 2 * n + 1], vec![false, false]).unwrap();
            let st = build_stencil(&Kernel::cylinder_indicator(2, 1.0), 1.0, 1.0, &lat, f64::INFINITY).unwrap();
            // zero offset is excluded, add its cell back
            let h = 1.0 / n as f64;
            errs.push((st.total_weight() + h * h - 4.0).abs());
        }
        assert!(errs[2] <= errs[0] && errs[2] < 1e-12 + 0.05);
    }

    #[test]
    fn coarse_stencil_warns() {
        let lat = Lattice::new(vec![0.0, -1.0], &[1.0, 2.0], vec![3, 3], vec![false, false]).unwrap();
        let st = build_stencil(&Kernel::cylinder_indicator(2, 0.1), 1.0, 1.0, &lat, f64::INFINITY).unwrap();
        assert!(st.is_empty());
        assert!(st.warning.as_deref().unwrap().contains("empty stencil"));
    }

    #[test]
    fn truncation_matches_planar_cut_kernel() {
        let lat = Lattice::new(vec![0.0, -1.0], &[1.0, 2.0], vec![21, 21], vec![true, false]).unwrap();
        let full = build_stencil(&Kernel::cylinder_indicator(2, 1.0), 0.5, 0.5, &lat, 0.3).unwrap();
        let cut = Kernel::cylinder(2, 0.3, 1.0, vec![0.0, 0.0]);
        let other = build_stencil(&cut, 0.5, 0.5, &lat, f64::INFINITY).unwrap();
        assert_eq!(full.offsets, other.offsets);
        assert_eq!(full.weights, other.weights);
    }

    #[test]
    fn field_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let lat = Arc::new(Lattice::new(vec![0.0, -1.0], &[1.0, 2.0], vec![3, 4], vec![false, false]).unwrap());
        let f = Field::from_fn(lat.clone(), 2, |x| vec![x[0].sin(), x[1] * 0.1]);
        let p = dir.path().join("f.bin");
        f.write_binary(&p).unwrap();
        assert_eq!(Field::read_binary(lat.clone(), 2, &p).unwrap(), f);
        let q = dir.path().join("f.csv");
        f.write_csv(&q).unwrap();
        assert_eq!(Field::read_csv(lat, 2, &q).unwrap(), f);
    }
}
