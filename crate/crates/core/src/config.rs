//! JSON experiment configuration.
//!
//! Every section is optional at parse time; each subcommand checks for the
//! sections it needs. Unknown fields are rejected with their path.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use serde_json::Value;

use crate::densities::{homogeneous_convex, pure_convolution, Density, PlanarCut, PowerDensity, RotationDensity};
use crate::error::{Error, Result};
use crate::homogenization::{Regime, Trajectory};
use crate::kernels::{Kernel, Profile};
use crate::solvers::{Matrix, SolverOptions};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimSpec {
    #[serde(default = "two")]
    pub d: usize,
    #[serde(default = "one")]
    pub m: usize,
}

fn two() -> usize {
    2
}

fn one() -> usize {
    1
}

impl Default for DimSpec {
    fn default() -> Self {
        DimSpec { d: 2, m: 1 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Zero,
    Unit,
    CylinderIndicator {
        r: f64,
    },
    Cylinder {
        radius: f64,
        half_height: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
    PlanarDisk {
        r: f64,
    },
    CylinderOverNormP {
        r: f64,
        p: f64,
    },
    MollifierOverNormP {
        p: f64,
    },
    Separable {
        planar: Profile,
        vertical: Profile,
        p: f64,
    },
    VerticalSingular {
        beta: f64,
    },
    PlanarCut {
        inner: Box<KernelSpec>,
    },
    Sum {
        parts: Vec<(f64, KernelSpec)>,
    },
}

impl KernelSpec {
    pub fn build(&self, d: usize) -> Result<Kernel> {
        let k = match self {
            KernelSpec::Zero => Kernel::zero(d),
            KernelSpec::Unit => Kernel::unit(d),
            KernelSpec::CylinderIndicator { r } => Kernel::cylinder_indicator(d, *r),
            KernelSpec::Cylinder {
                radius,
                half_height,
                center,
            } => Kernel::cylinder(d, *radius, *half_height, center.clone().unwrap_or_else(|| vec![0.0; d])),
            KernelSpec::PlanarDisk { r } => Kernel::planar_disk(d, *r),
            KernelSpec::CylinderOverNormP { r, p } => Kernel::cylinder_over_norm_p(d, *r, *p),
            KernelSpec::MollifierOverNormP { p } => Kernel::mollifier_over_norm_p(d, *p),
            KernelSpec::Separable { planar, vertical, p } => Kernel::separable(d, planar.clone(), vertical.clone(), *p),
            KernelSpec::VerticalSingular { beta } => Kernel::vertical_singular(d, *beta),
            KernelSpec::PlanarCut { inner } => inner.build(d)?.planar_cut(),
            KernelSpec::Sum { parts } => Kernel::sum(
                d,
                parts.iter().map(|(w, k)| Ok((*w, k.build(d)?))).collect::<Result<Vec<_>>>()?,
            ),
        };
        k.validate()?;
        Ok(k)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    PureConvolution { r: f64, p: f64 },
    HomogeneousConvex { kernel: KernelSpec, p: f64 },
    RotationExample { eta: f64, p: f64 },
    PlanarCut { inner: Box<DensitySpec> },
}

impl DensitySpec {
    pub fn build(&self, dim: &DimSpec) -> Result<Arc<dyn Density>> {
        Ok(match self {
            DensitySpec::RotationExample { eta, p } => {
                if dim.m != dim.d {
                    return Err(Error::invalid("dim.m", "rotation example needs m = d"));
                }
                Arc::new(RotationDensity::new(dim.d, *eta, *p)?)
            }
            DensitySpec::PlanarCut { inner } => Arc::new(PlanarCut::new(inner.build(dim)?)?),
            other => Arc::new(other.build_power(dim)?),
        })
    }

    /// The `a(ξ)|z|^p` families.
    pub fn build_power(&self, dim: &DimSpec) -> Result<PowerDensity> {
        match self {
            DensitySpec::PureConvolution { r, p } => pure_convolution(dim.d, dim.m, *r, *p),
            DensitySpec::HomogeneousConvex { kernel, p } => homogeneous_convex(kernel.build(dim.d)?, dim.m, *p),
            _ => Err(Error::invalid("density.family", "expected pure_convolution or homogeneous_convex")),
        }
    }

    pub fn p(&self) -> f64 {
        match self {
            DensitySpec::PureConvolution { p, .. }
            | DensitySpec::HomogeneousConvex { p, .. }
            | DensitySpec::RotationExample { p, .. } => *p,
            DensitySpec::PlanarCut { inner } => inner.p(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSpec {
    pub eps: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Planar box `[(lo, hi); d−1]`; defaults to the unit box.
    #[serde(default)]
    pub planar_box: Option<Vec<(f64, f64)>>,
    /// Nodes per axis, planar axes first.
    pub resolution: Vec<usize>,
    #[serde(default)]
    pub periodic: Option<Vec<bool>>,
    #[serde(default)]
    pub truncation: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    /// `u(x) = M x_α`.
    Affine { slope: Matrix },
    /// `u_i(x) = amplitude · sin(2π k x_1)` in every component.
    Sinusoid {
        #[serde(default = "unit_f64")]
        amplitude: f64,
        #[serde(default = "unit_f64")]
        wavenumber: f64,
    },
    /// Nodal CSV written by [`crate::lattice::Field::write_csv`].
    Csv { path: PathBuf },
}

fn unit_f64() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeSpec {
    Zero,
    Infinity,
    Delta(f64),
}

impl From<&RegimeSpec> for Regime {
    fn from(r: &RegimeSpec) -> Self {
        match r {
            RegimeSpec::Zero => Regime::Zero,
            RegimeSpec::Infinity => Regime::Infinity,
            RegimeSpec::Delta(d) => Regime::Delta(*d),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectorySpec {
    ConstantDelta(f64),
    EpsGammaSquared,
    GammaEpsSquared,
}

impl From<&TrajectorySpec> for Trajectory {
    fn from(t: &TrajectorySpec) -> Self {
        match t {
            TrajectorySpec::ConstantDelta(d) => Trajectory::ConstantDelta(*d),
            TrajectorySpec::EpsGammaSquared => Trajectory::EpsGammaSquared,
            TrajectorySpec::GammaEpsSquared => Trajectory::GammaEpsSquared,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub trajectory: TrajectorySpec,
    pub eps: Vec<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingularSpec {
    pub beta: f64,
    pub eps: f64,
    pub ratios: Vec<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationSpec {
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_p")]
    pub p: f64,
    pub delta: f64,
    #[serde(default = "default_rotation_resolution")]
    pub resolution: usize,
}

fn default_eta() -> f64 {
    0.05
}

fn default_p() -> f64 {
    2.0
}

fn default_rotation_resolution() -> usize {
    16
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub json: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dim: DimSpec,
    #[serde(default)]
    pub kernel: Option<KernelSpec>,
    #[serde(default)]
    pub density: Option<DensitySpec>,
    /// Exponent for `audit` and `scaling`.
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub scale: Option<ScaleSpec>,
    #[serde(default)]
    pub domain: Option<DomainSpec>,
    #[serde(default)]
    pub field: Option<FieldSpec>,
    #[serde(default)]
    pub slope: Option<Matrix>,
    #[serde(default)]
    pub regime: Option<RegimeSpec>,
    #[serde(default)]
    pub ladder: Option<Vec<usize>>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub pairs: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    pub singular: Option<SingularSpec>,
    #[serde(default)]
    pub resolution: Option<usize>,
    #[serde(default)]
    pub r_values: Option<Vec<f64>>,
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default)]
    pub rotation: Option<RotationSpec>,
    #[serde(default)]
    pub solver: Option<SolverOptions>,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(path_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text, overrides)
    }

    fn validate(&self) -> Result<()> {
        if self.dim.d < 2 {
            return Err(Error::invalid("dim.d", "must be at least 2"));
        }
        if self.dim.m == 0 {
            return Err(Error::invalid("dim.m", "must be at least 1"));
        }
        if let Some(s) = &self.solver {
            s.validate()?;
        }
        Ok(())
    }

    /// Solver options with the top-level seed applied unless the solver
    /// section sets its own.
    pub fn solver_options(&self) -> SolverOptions {
        match &self.solver {
            Some(s) => s.clone(),
            None => SolverOptions {
                seed: self.seed,
                ..Default::default()
            },
        }
    }

    pub fn require<'a, T>(&self, section: &'a Option<T>, name: &str) -> Result<&'a T> {
        section.as_ref().ok_or_else(|| Error::invalid(name, "missing section"))
    }

    pub fn density(&self) -> Result<Arc<dyn Density>> {
        self.require(&self.density, "density")?.build(&self.dim)
    }

    pub fn slope(&self) -> Result<Matrix> {
        let s = self.require(&self.slope, "slope")?;
        if s.len() != self.dim.m || s.iter().any(|r| r.len() != self.dim.d - 1) {
            return Err(Error::invalid(
                "slope",
                format!("expected a {}×{} matrix", self.dim.m, self.dim.d - 1),
            ));
        }
        Ok(s.clone())
    }
}

/// Turn a missing-field error at `a.b` into the full path `a.b.field`.
fn path_error(e: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let path = e.path().to_string();
    let msg = e.inner().to_string();
    if let Some(rest) = msg.strip_prefix("missing field `") {
        let field = rest.split('`').next().unwrap_or("");
        let full = if path == "." || path.is_empty() {
            field.to_string()
        } else {
            format!("{path}.{field}")
        };
        return Error::invalid(full, "missing field");
    }
    let field = if path == "." { "config".to_string() } else { path };
    Error::invalid(field, msg)
}

/// Apply `a.b.c=value`; the value is parsed as JSON when possible and
/// taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::invalid("--set", format!("expected key=value, got {assignment:?}")))?;
    let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::invalid("--set", format!("empty path segment in {key:?}")));
        }
        let obj = match cur {
            Value::Object(map) => map,
            _ => return Err(Error::invalid(key, "path does not lead to an object")),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_p_names_full_path() {
        let err = ExperimentConfig::from_json_str(r#"{"density": {"family": "pure_convolution", "r": 1.0}}"#, &[]).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("density.p"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected_with_path() {
        let err = ExperimentConfig::from_json_str(r#"{"solver": {"tol_g": 1e-6, "bogus": 1}}"#, &[]).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("solver"), "{err}");
    }

    #[test]
    fn overrides_and_defaults() {
        let cfg = ExperimentConfig::from_json_str(
            r#"{"density": {"family": "pure_convolution", "r": 1.0, "p": 2.0}, "regime": {"delta": 1.0}, "slope": [[1.0]]}"#,
            &["density.r=2".into(), "seed=7".into(), "regime=\"zero\"".into()],
        )
        .unwrap();
        assert!(matches!(cfg.density, Some(DensitySpec::PureConvolution { r, .. }) if r == 2.0));
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.solver_options().seed, 7);
        assert!(matches!(cfg.regime, Some(RegimeSpec::Zero)));
        assert_eq!(cfg.dim.d, 2);
    }

    #[test]
    fn nested_kernels_build() {
        let cfg = ExperimentConfig::from_json_str(
            r#"{"dim": {"d": 3, "m": 1}, "kernel": {"family": "sum", "parts": [[1.0, {"family": "cylinder_indicator", "r": 1.0}], [0.5, {"family": "planar_cut", "inner": {"family": "vertical_singular", "beta": 0.5}}]]}}"#,
            &[],
        )
        .unwrap();
        let k = cfg.kernel.unwrap().build(3).unwrap();
        assert_eq!(k.dim, 3);
    }
}
