//! Command-line experiment runner.
//!
//! Exit codes: 0 on success, 2 on validation errors (bad config, unknown
//! fields, unsupported combinations), 3 on numerical failures.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, FieldSpec};
use crate::energy::{energy_rescaled, ScaleParams};
use crate::error::{Error, Result};
use crate::homogenization::{
    asymptotic_formula, cell_formula_delta, cell_formula_infinity, cell_formula_zero, gamma_min_sweep, oracle_pure_conv,
    rotation_invariance_experiment, scaling_probe, scaling_probe_singular, theta, write_ladder_csv, write_scaling_csv,
    write_sweep_csv, Regime, CSV_VERSION,
};
use crate::kernels::audit_hypotheses;
use crate::lattice::{build_lattice, build_stencil, CylinderSpec, Field};

#[derive(Debug, Parser)]
#[command(name = "nlthin", version, about = "Nonlocal thin-film energies, cell problems and homogenization experiments")]
pub struct Cli {
    /// Cap on worker threads (falls back to NLTHIN_THREADS).
    #[arg(long, global = true, env = "NLTHIN_THREADS")]
    pub threads: Option<usize>,

    /// Include per-iteration solver histories in JSON reports.
    #[arg(long, global = true)]
    pub trace: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,

    /// Override a config field, e.g. `--set density.p=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the kernel hypotheses.
    Audit(ConfigArgs),
    /// Evaluate one energy with its per-offset breakdown.
    Energy(ConfigArgs),
    /// Scaling probes of the unscaled energy.
    Scaling(ConfigArgs),
    /// Homogenized density from the cell formula of the configured regime.
    Cell(ConfigArgs),
    /// Normalized Dirichlet minima on growing cubes.
    Asymptotic(ConfigArgs),
    /// Dirichlet minima along an (ε, γ) trajectory against the limit oracle.
    GammaMin(ConfigArgs),
    /// Rotation example: asymmetry bounds and invariance check.
    Rotation(ConfigArgs),
    /// Closed-form values.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// θ(δ, r); δ may be `inf`.
    #[arg(long, num_args = 2, value_names = ["DELTA", "R"], allow_negative_numbers = true)]
    pub theta: Option<Vec<String>>,

    /// Pure-convolution oracle for M = 1 (d = 2, m = 1); REGIME is `zero`,
    /// `infinity` or a δ value.
    #[arg(long = "pure-conv", num_args = 3, value_names = ["R", "P", "REGIME"])]
    pub pure_conv: Option<Vec<String>>,
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                3
            }
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Oracle(a) => oracle(a),
        Command::Audit(a) => audit(&load(a)?),
        Command::Energy(a) => energy(&load(a)?),
        Command::Scaling(a) => scaling(&load(a)?),
        Command::Cell(a) => cell(&load(a)?, cli.trace),
        Command::Asymptotic(a) => asymptotic(&load(a)?, cli.trace),
        Command::GammaMin(a) => gamma_min(&load(a)?),
        Command::Rotation(a) => rotation(&load(a)?),
    }
}

fn load(a: &ConfigArgs) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&a.config, &a.set)
}

fn emit<T: Serialize>(cfg: &ExperimentConfig, report: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    match &cfg.output.json {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn parse_f64(s: &str, field: &str) -> Result<f64> {
    match s {
        "inf" | "infinity" => Ok(f64::INFINITY),
        _ => s.parse().map_err(|_| Error::invalid(field, format!("not a number: {s:?}"))),
    }
}

fn oracle(a: &OracleArgs) -> Result<()> {
    if a.theta.is_none() && a.pure_conv.is_none() {
        return Err(Error::invalid("oracle", "pass --theta DELTA R or --pure-conv R P REGIME"));
    }
    if let Some(v) = &a.theta {
        let delta = parse_f64(&v[0], "theta.delta")?;
        let r = parse_f64(&v[1], "theta.r")?;
        if !(delta >= 0.0) || !(r > 0.0 && r.is_finite()) {
            return Err(Error::invalid("theta", "need δ ≥ 0 and r > 0"));
        }
        println!("{:?}", theta(delta, r));
    }
    if let Some(v) = &a.pure_conv {
        let r = parse_f64(&v[0], "pure_conv.r")?;
        let p = parse_f64(&v[1], "pure_conv.p")?;
        let regime = Regime::parse(&v[2])?;
        println!("{:?}", oracle_pure_conv(&vec![vec![1.0]], r, p, regime)?);
    }
    Ok(())
}

fn audit(cfg: &ExperimentConfig) -> Result<()> {
    let kernel = cfg.require(&cfg.kernel, "kernel")?.build(cfg.dim.d)?;
    let p = cfg
        .p
        .or_else(|| cfg.density.as_ref().map(|d| d.p()))
        .ok_or_else(|| Error::invalid("p", "missing field"))?;
    let report = audit_hypotheses(&kernel, p);
    if let Some(path) = &cfg.output.csv {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{CSV_VERSION}")?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["hypothesis", "pass", "statistic", "tolerance", "divergent"])?;
        for (name, h) in [("H0", &report.h0), ("H1", &report.h1), ("H2", &report.h2), ("H3", &report.h3), ("H4", &report.h4)] {
            w.write_record([
                name.to_string(),
                h.pass.to_string(),
                h.statistic.to_string(),
                h.tolerance.to_string(),
                h.divergent.to_string(),
            ])?;
        }
        w.flush()?;
    }
    emit(cfg, &json!({ "all_pass": report.all_pass(), "report": report }))
}

fn energy(cfg: &ExperimentConfig) -> Result<()> {
    let density = cfg.density()?;
    let scale_spec = cfg.require(&cfg.scale, "scale")?;
    let scale = ScaleParams::new(scale_spec.eps, scale_spec.gamma)?;
    let domain = cfg.require(&cfg.domain, "domain")?;
    let d = cfg.dim.d;
    let planar_box = domain.planar_box.clone().unwrap_or_else(|| vec![(0.0, 1.0); d - 1]);
    let spec = CylinderSpec::new(planar_box, 1.0, cfg.dim.m)?;
    let periodic = domain.periodic.clone().unwrap_or_else(|| vec![false; d]);
    let lat = Arc::new(build_lattice(&spec, &domain.resolution, &periodic)?);
    let field = build_field(cfg, &lat)?;
    let stencil = build_stencil(density.support(), scale.eps(), scale.gamma(), &lat, domain.truncation.unwrap_or(f64::INFINITY))?;
    let br = energy_rescaled(&field, density.as_ref(), &scale, &stencil, None)?;
    if let Some(path) = &cfg.output.csv {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{CSV_VERSION}")?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["offset", "xi", "value"])?;
        for t in &br.per_offset {
            let join = |v: Vec<String>| v.join(" ");
            w.write_record([
                join(t.offset.iter().map(|k| k.to_string()).collect()),
                join(t.xi.iter().map(|k| k.to_string()).collect()),
                t.value.to_string(),
            ])?;
        }
        w.flush()?;
    }
    emit(
        cfg,
        &json!({
            "total": br.total,
            "prefactor": br.prefactor,
            "node_measure": br.node_measure,
            "offsets": br.per_offset.len(),
            "stencil_warning": stencil.warning,
        }),
    )
}

fn build_field(cfg: &ExperimentConfig, lat: &Arc<crate::lattice::Lattice>) -> Result<Field> {
    let m = cfg.dim.m;
    let d = cfg.dim.d;
    match cfg.require(&cfg.field, "field")? {
        FieldSpec::Affine { slope } => {
            if slope.len() != m || slope.iter().any(|r| r.len() != d - 1) {
                return Err(Error::invalid("field.slope", format!("expected a {m}×{} matrix", d - 1)));
            }
            Ok(Field::from_fn(lat.clone(), m, |x| {
                slope.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
            }))
        }
        FieldSpec::Sinusoid { amplitude, wavenumber } => Ok(Field::from_fn(lat.clone(), m, |x| {
            vec![amplitude * (2.0 * std::f64::consts::PI * wavenumber * x[0]).sin(); m]
        })),
        FieldSpec::Csv { path } => Field::read_csv(lat.clone(), m, path),
    }
}

const DEFAULT_PAIRS: [(f64, f64); 6] = [
    (0.5, 0.125),
    (0.125, 0.5),
    (0.5, 0.03125),
    (0.25, 0.0625),
    (0.25, 0.25),
    (0.0625, 0.125),
];

fn scaling(cfg: &ExperimentConfig) -> Result<()> {
    let p = cfg.p.unwrap_or(2.0);
    let n = cfg.resolution.unwrap_or(64);
    let pairs = cfg.pairs.clone().unwrap_or_else(|| DEFAULT_PAIRS.to_vec());
    let table = scaling_probe(cfg.dim.d, p, &pairs, n)?;
    let singular = match &cfg.singular {
        Some(s) => Some(scaling_probe_singular(cfg.dim.d, s.beta, p, s.eps, &s.ratios, n)?),
        None => None,
    };
    if let Some(path) = &cfg.output.csv {
        write_scaling_csv(path, &table)?;
        if let Some(s) = &singular {
            write_scaling_csv(&sibling(path, "singular"), s)?;
        }
    }
    emit(cfg, &json!({ "indicator": table, "singular": singular }))
}

fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}.{tag}.{ext}"))
}

fn cell(cfg: &ExperimentConfig, trace: bool) -> Result<()> {
    let density = cfg.density()?;
    let slope = cfg.slope()?;
    let regime: Regime = cfg.require(&cfg.regime, "regime")?.into();
    let ladder = cfg.ladder.clone().unwrap_or_else(|| vec![8, 16, 32]);
    let opts = cfg.solver_options();
    let mut est = match regime {
        Regime::Delta(d) => cell_formula_delta(density.as_ref(), d, &slope, &ladder, &opts)?,
        Regime::Zero => cell_formula_zero(density.as_ref(), &slope, &ladder, &opts)?,
        Regime::Infinity => cell_formula_infinity(density.as_ref(), &slope, &ladder, &opts)?,
    };
    if !trace {
        est.ladder.iter_mut().for_each(|e| e.history.clear());
    }
    if let Some(path) = &cfg.output.csv {
        write_ladder_csv(path, &est.ladder)?;
    }
    emit(cfg, &est)
}

fn asymptotic(cfg: &ExperimentConfig, trace: bool) -> Result<()> {
    let density = cfg.density()?;
    let slope = cfg.slope()?;
    let delta = match cfg.require(&cfg.regime, "regime")?.into() {
        Regime::Delta(d) => d,
        _ => return Err(Error::invalid("regime", "asymptotic formula needs a finite δ")),
    };
    let r_values = cfg.r_values.clone().unwrap_or_else(|| vec![4.0, 8.0, 16.0]);
    let h = cfg.h.unwrap_or(0.125);
    let mut rows = asymptotic_formula(density.as_ref(), delta, &slope, &r_values, h, &cfg.solver_options())?;
    if !trace {
        rows.iter_mut().for_each(|e| e.history.clear());
    }
    if let Some(path) = &cfg.output.csv {
        write_ladder_csv(path, &rows)?;
    }
    emit(cfg, &rows)
}

fn gamma_min(cfg: &ExperimentConfig) -> Result<()> {
    let density = cfg.require(&cfg.density, "density")?.build_power(&cfg.dim)?;
    let slope = cfg.slope()?;
    let sweep = cfg.require(&cfg.sweep, "sweep")?;
    let rows = gamma_min_sweep(&density, &slope, (&sweep.trajectory).into(), &sweep.eps, &cfg.solver_options())?;
    if let Some(path) = &cfg.output.csv {
        write_sweep_csv(path, &rows)?;
    }
    emit(cfg, &rows)
}

fn rotation(cfg: &ExperimentConfig) -> Result<()> {
    let spec = cfg.require(&cfg.rotation, "rotation")?;
    let opts = match &cfg.solver {
        Some(s) => s.clone(),
        None => crate::solvers::SolverOptions {
            max_iters: 300,
            multistart: 2,
            seed: cfg.seed,
            ..Default::default()
        },
    };
    let report = rotation_invariance_experiment(spec.eta, spec.p, spec.delta, spec.resolution, &opts)?;
    if let Some(path) = &cfg.output.csv {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{CSV_VERSION}")?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["quantity", "value"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        w.write_record(["value_plus".to_string(), opt(report.value_plus)])?;
        w.write_record(["analytic_upper".to_string(), report.analytic_upper.to_string()])?;
        w.write_record(["value_minus_lower_bound".to_string(), opt(report.value_minus_lower_bound)])?;
        w.write_record(["analytic_lower".to_string(), report.analytic_lower.to_string()])?;
        if let Some(inv) = &report.invariance_check {
            for (i, v) in inv.values.iter().enumerate() {
                w.write_record([format!("invariance_value_{i}"), v.to_string()])?;
            }
        }
        w.flush()?;
    }
    emit(cfg, &report)
}
