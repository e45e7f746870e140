//! Command-line front end: TOML run configurations, figure presets and dataset writers.
//!
//! A config document may name a `figure` preset; every other key overrides
//! the preset (or the generic defaults). Frequencies are ordinary MHz, times
//! μs. The fully resolved document is echoed as `resolved_config.toml`, and
//! running that file again reproduces the datasets bit for bit.
//!
//! Datasets (CSV with a header row, or JSON arrays of records):
//!
//! | file | written when | columns |
//! |------|--------------|---------|
//! | `chern_raw` | `mean_p` | delta2_MHz, dx, mean_p, beta, corrected |
//! | `chern_corrected` | `mean_p_corrected` | delta2_MHz, dx, mean_p, beta, corrected |
//! | `chern_ideal` | `chern_ideal` | delta2_MHz, chern |
//! | `beta_law` | figure f1d | dx, mean_p, beta, rel_dev |
//! | `std_p` | `std_p` | delta2_MHz, dx, std_p |
//! | `optimal_dx` | `std_p`, several Δx | delta2_MHz, dx_opt, std_p_min |
//! | `transition` | `std_p`, triple, ≥ 3 Δ₂ | dx, transition_MHz, low_plateau, high_plateau, crossings, status |
//! | `snapshots` | snapshots requested | delta2_MHz, dx, t_us, theta_over_pi, mean_p, std_p |
//! | `curvature` | `curvature_series` | delta2_MHz, dx, x, t_us, theta_over_pi, b_x |
//! | `chern_partials` | `curvature_series` | delta2_MHz, dx, x, segment, partial (running sum after the segment) |
//! | `bloch_series` | `bloch_series` | delta2_MHz, dx, x, t_us, theta_over_pi, sigma_x, sigma_y, sigma_z, r_plus_x, r_plus_y, r_plus_z, branch |
//! | `phases` | `phase_decomposition` | delta2_MHz, dx, x, t_us, theta_over_pi, gamma_total, gamma_d, gamma_g, overlap, valid |
//! | `momentum_density` | `momentum_density` | delta2_MHz, delta2_over_delta1, dx, p, density, density_e, density_g |
//!
//! `theta_over_pi` is the cumulative sweep angle kπ + θ in units of π.
//! Alongside the datasets: `diagnostics.json` (integrator diagnostics, wall
//! time) and, when points fail, `errors.json`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::error::ExperimentError;
use crate::experiments::{
    self, default_delta2_grid, transition_from_series, ExperimentResult, GridSpec, Observable, PointRecord,
    PositionSeries, ProtocolKind, SweepSpec,
};
use crate::meter::HalfWidthPolicy;
use crate::model::{CouplingLaw, DriveParams, TWO_PI};
use crate::propagator::{IntegratorConfig, Method};

/// Significant digits of every number written to a dataset.
pub const SIGNIFICANT_DIGITS: usize = 12;

const FIG1_POSITIONS: [f64; 7] = [-0.5, -0.35, -0.1, 0.0, 0.1, 0.35, 0.5];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("all {0} sweep points failed")]
    AllPointsFailed(usize),
    #[error("could not encode {what}: {message}")]
    Encode { what: &'static str, message: String },
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Parse { .. } => "parse",
            CliError::Invalid { .. } => "invalid_config",
            CliError::Experiment(_) => "experiment",
            CliError::AllPointsFailed(_) => "all_points_failed",
            CliError::Encode { .. } => "encode",
        }
    }

    /// Machine-readable error report.
    pub fn report(&self) -> Value {
        let mut v = json!({ "status": "error", "kind": self.kind(), "message": self.to_string() });
        if let CliError::Invalid { key, .. } = self {
            v["key"] = json!(key);
        }
        v
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Invalid { .. } => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Figure {
    F1a,
    F1b,
    F1c,
    F1d,
    F2a,
    F2b,
    F2c,
    F3a,
    F3b,
    F3c,
    F3d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Verbosity {
    Error,
    #[default]
    Warn,
    Info,
    Debug,
    Trace,
}

impl Verbosity {
    fn filter(self) -> &'static str {
        match self {
            Verbosity::Error => "error",
            Verbosity::Warn => "warn",
            Verbosity::Info => "info",
            Verbosity::Debug => "debug",
            Verbosity::Trace => "trace",
        }
    }
}

/// A configuration document as written by hand; absent keys take defaults.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub figure: Option<Figure>,
    pub protocol: Option<ProtocolKind>,
    pub coupling: Option<CouplingLaw>,
    pub tq_us: Option<f64>,
    pub delta1_mhz: Option<f64>,
    pub omega1_mhz: Option<f64>,
    /// Drive phase φ in radians.
    pub phi: Option<f64>,
    pub delta2_mhz: Option<Vec<f64>>,
    /// Alternative to `delta2_mhz`, in units of Δ₁.
    pub delta2_over_delta1: Option<Vec<f64>>,
    pub dx: Option<Vec<f64>>,
    pub positions: Option<Vec<f64>>,
    pub outputs: Option<Vec<Observable>>,
    pub grid_n: Option<usize>,
    /// Largest N an aliasing point may be retried at.
    pub grid_max_n: Option<usize>,
    pub half_width: Option<HalfWidthPolicy>,
    pub steps_per_tq: Option<usize>,
    pub samples_per_tq: Option<usize>,
    pub strict: Option<bool>,
    pub snapshots_per_segment: Option<usize>,
    pub convergence_check: Option<bool>,
    pub out: Option<PathBuf>,
    pub format: Option<OutputFormat>,
    pub workers: Option<usize>,
    pub verbosity: Option<Verbosity>,
}

/// Every key filled in. Serialized as the resolved-config echo.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub figure: Option<Figure>,
    pub protocol: ProtocolKind,
    pub coupling: CouplingLaw,
    pub tq_us: f64,
    pub delta1_mhz: f64,
    pub omega1_mhz: f64,
    pub phi: f64,
    pub delta2_mhz: Vec<f64>,
    pub dx: Vec<f64>,
    pub positions: Vec<f64>,
    pub outputs: Vec<Observable>,
    pub grid_n: usize,
    pub grid_max_n: usize,
    pub steps_per_tq: usize,
    pub samples_per_tq: usize,
    pub strict: bool,
    pub snapshots_per_segment: usize,
    pub convergence_check: bool,
    pub out: PathBuf,
    pub format: OutputFormat,
    pub workers: usize,
    pub verbosity: Verbosity,
    pub half_width: HalfWidthPolicy,
}

impl ResolvedConfig {
    fn generic() -> Self {
        Self {
            figure: None,
            protocol: ProtocolKind::Single,
            coupling: CouplingLaw::BerryWeighted,
            tq_us: 1.0,
            delta1_mhz: 30.0,
            omega1_mhz: 10.0,
            phi: 0.0,
            delta2_mhz: default_delta2_grid(30.0),
            dx: vec![1.0],
            positions: vec![0.0],
            outputs: vec![Observable::MeanP, Observable::MeanPCorrected, Observable::StdP],
            grid_n: 1024,
            grid_max_n: 4096,
            steps_per_tq: 20_000,
            samples_per_tq: 1001,
            strict: false,
            snapshots_per_segment: 9,
            convergence_check: true,
            out: PathBuf::from("out"),
            format: OutputFormat::Csv,
            workers: 0,
            verbosity: Verbosity::Warn,
            half_width: HalfWidthPolicy::Default,
        }
    }

    /// Parameters of one figure panel at the default drive (t_q = 1 μs, Δ₁/2π = 30 MHz, Ω₁/2π = 10 MHz).
    pub fn preset(figure: Figure) -> Self {
        use Observable::*;
        let g = Self::generic();
        let near_zero = vec![0.01 * g.delta1_mhz];
        let five = vec![0.1, 0.5, 1.0, 2.0, 3.0];
        let base = Self { figure: Some(figure), out: PathBuf::from("out").join(figure.id()), ..g };
        match figure {
            Figure::F1a | Figure::F1b => Self {
                delta2_mhz: vec![0.3],
                dx: vec![0.5],
                positions: FIG1_POSITIONS.to_vec(),
                outputs: vec![if figure == Figure::F1a { BlochSeries } else { CurvatureSeries }],
                snapshots_per_segment: 0,
                ..base
            },
            Figure::F1c => Self {
                dx: vec![0.01, 0.1, 0.5, 1.0, 2.0, 3.0],
                outputs: vec![ChernIdeal, MeanP, MeanPCorrected],
                snapshots_per_segment: 0,
                ..base
            },
            Figure::F1d => Self {
                delta2_mhz: vec![-10.0],
                dx: vec![
                    0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75, 3.0,
                ],
                outputs: vec![MeanP],
                snapshots_per_segment: 0,
                ..base
            },
            Figure::F2a => Self {
                dx: vec![0.05, 0.1, 0.15, 0.2, 0.225, 0.25, 0.3, 0.4, 0.5, 0.75, 1.0, 1.5, 2.0, 2.5, 3.0],
                outputs: vec![StdP],
                snapshots_per_segment: 0,
                ..base
            },
            Figure::F2b => {
                let mut d2 = vec![-10.0];
                d2.extend(default_delta2_grid(base.delta1_mhz));
                Self { delta2_mhz: d2, dx: five, outputs: vec![StdP], snapshots_per_segment: 0, ..base }
            }
            Figure::F2c => Self {
                delta2_mhz: [0.0, 0.5, 0.9, 1.1, 1.5, 2.0].iter().map(|r| r * base.delta1_mhz).collect(),
                dx: vec![1.0],
                outputs: vec![MomentumDensity, StdP],
                snapshots_per_segment: 0,
                ..base
            },
            Figure::F3a | Figure::F3b => Self {
                protocol: ProtocolKind::Triple,
                coupling: CouplingLaw::Off,
                delta2_mhz: near_zero,
                dx: vec![1.0],
                positions: vec![0.0],
                outputs: vec![if figure == Figure::F3a { BlochSeries } else { CurvatureSeries }],
                snapshots_per_segment: 0,
                ..base
            },
            Figure::F3c => Self {
                protocol: ProtocolKind::Triple,
                delta2_mhz: near_zero,
                dx: vec![1.0],
                positions: FIG1_POSITIONS.to_vec(),
                outputs: vec![CurvatureSeries],
                snapshots_per_segment: 0,
                ..base
            },
            Figure::F3d => Self {
                protocol: ProtocolKind::Triple,
                dx: five,
                outputs: vec![StdP],
                snapshots_per_segment: 0,
                ..base
            },
        }
    }

    /// Translate to the internal (rad/μs) sweep description.
    pub fn to_spec(&self) -> Result<SweepSpec, CliError> {
        let base = DriveParams::new(TWO_PI * self.delta1_mhz, 0.0, TWO_PI * self.omega1_mhz, self.tq_us)
            .map_err(|e| CliError::Invalid { key: "drive", reason: e.to_string() })?
            .with_phi(self.phi);
        let spec = SweepSpec {
            base,
            protocol_kind: self.protocol,
            coupling: self.coupling,
            delta2_values: self.delta2_mhz.iter().map(|d| TWO_PI * d).collect(),
            dx_values: self.dx.clone(),
            grid: GridSpec { max_n: Some(self.grid_max_n), ..GridSpec::new(self.grid_n, self.half_width) },
            integrator: IntegratorConfig {
                steps_per_tq: self.steps_per_tq,
                samples_per_tq: self.samples_per_tq,
                method: Method::FixedRk4,
                strict: self.strict,
            },
            outputs: self.outputs.clone(),
            positions: self.positions.clone(),
            snapshots_per_segment: self.snapshots_per_segment,
            convergence_check: self.convergence_check,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<(), CliError> {
        let invalid = |key, reason: String| Err(CliError::Invalid { key, reason });
        if !(self.tq_us.is_finite() && self.tq_us > 0.0) {
            return invalid("tq_us", format!("quench time must be positive (got {} μs)", self.tq_us));
        }
        if !(self.delta1_mhz.is_finite() && self.delta1_mhz != 0.0) {
            return invalid("delta1_mhz", format!("must be finite and non-zero (got {} MHz)", self.delta1_mhz));
        }
        if !(self.omega1_mhz.is_finite() && self.omega1_mhz > 0.0) {
            return invalid("omega1_mhz", format!("must be positive (got {} MHz)", self.omega1_mhz));
        }
        if !self.phi.is_finite() {
            return invalid("phi", "must be finite".into());
        }
        if self.delta2_mhz.is_empty() || self.delta2_mhz.iter().any(|d| !d.is_finite()) {
            return invalid("delta2_mhz", "needs at least one finite value".into());
        }
        if self.dx.is_empty() || self.dx.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return invalid("dx", "needs at least one positive width".into());
        }
        if self.positions.iter().any(|x| !x.is_finite()) {
            return invalid("positions", "must be finite".into());
        }
        if self.outputs.is_empty() {
            return invalid("outputs", "request at least one observable".into());
        }
        if self.grid_n < 256 || !self.grid_n.is_power_of_two() {
            return invalid("grid_n", format!("must be a power of two ≥ 256 (got {})", self.grid_n));
        }
        if !self.grid_max_n.is_power_of_two() {
            return invalid("grid_max_n", format!("must be a power of two (got {})", self.grid_max_n));
        }
        if let HalfWidthPolicy::Fixed(l) = self.half_width {
            if !(l.is_finite() && l > 0.0) {
                return invalid("half_width", format!("fixed half-width must be positive (got {l})"));
            }
        }
        let probe = IntegratorConfig {
            steps_per_tq: self.steps_per_tq,
            samples_per_tq: self.samples_per_tq,
            method: Method::FixedRk4,
            strict: self.strict,
        };
        probe.validate().map_err(|e| CliError::Invalid { key: "steps_per_tq", reason: e.to_string() })?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Encode { what: "resolved config", message: e.to_string() })
    }
}

impl Figure {
    pub fn id(self) -> &'static str {
        match self {
            Figure::F1a => "f1a",
            Figure::F1b => "f1b",
            Figure::F1c => "f1c",
            Figure::F1d => "f1d",
            Figure::F2a => "f2a",
            Figure::F2b => "f2b",
            Figure::F2c => "f2c",
            Figure::F3a => "f3a",
            Figure::F3b => "f3b",
            Figure::F3c => "f3c",
            Figure::F3d => "f3d",
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Parse { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Apply the document on top of its preset (or the generic defaults) and validate.
    pub fn resolve(self) -> Result<ResolvedConfig, CliError> {
        let mut r = self.figure.map_or_else(ResolvedConfig::generic, ResolvedConfig::preset);
        macro_rules! take {
            ($($field:ident),*) => { $( if let Some(v) = self.$field { r.$field = v; } )* };
        }
        take!(
            protocol, coupling, tq_us, delta1_mhz, omega1_mhz, phi, dx, positions, outputs, grid_n, grid_max_n,
            half_width,
            steps_per_tq, samples_per_tq, strict, snapshots_per_segment, convergence_check, out, format, workers,
            verbosity
        );
        // the preset's default Δ₂ grid follows Δ₁
        if self.delta2_mhz.is_none() && r.delta2_mhz == default_delta2_grid(30.0) {
            r.delta2_mhz = default_delta2_grid(r.delta1_mhz);
        }
        match (self.delta2_mhz, self.delta2_over_delta1) {
            (Some(_), Some(_)) => {
                return Err(CliError::Invalid {
                    key: "delta2_over_delta1",
                    reason: "give either delta2_mhz or delta2_over_delta1, not both".into(),
                })
            }
            (Some(d), None) => r.delta2_mhz = d,
            (None, Some(ratios)) => r.delta2_mhz = ratios.iter().map(|q| q * r.delta1_mhz).collect(),
            (None, None) => {}
        }
        r.validate()?;
        Ok(r)
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    RunConfig::from_toml_str(&text, path)
}

/// Command-line flags that override the resolved config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub format: Option<OutputFormat>,
    pub workers: Option<usize>,
    pub strict: bool,
}

impl Overrides {
    pub fn apply(&self, mut r: ResolvedConfig) -> ResolvedConfig {
        if let Some(out) = &self.out {
            r.out = out.clone();
        }
        if let Some(f) = self.format {
            r.format = f;
        }
        if let Some(w) = self.workers {
            r.workers = w;
        }
        r.strict |= self.strict;
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out: PathBuf,
    pub files: Vec<PathBuf>,
    pub points: usize,
    pub failed: usize,
}

/// Echo the resolved config, run the sweep unless `dry_run`, and write every dataset.
pub fn run(config: &ResolvedConfig, dry_run: bool) -> Result<RunSummary, CliError> {
    let out = &config.out;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut files = vec![write_text(out, "resolved_config.toml", &config.to_toml()?)?];
    if dry_run {
        return Ok(RunSummary { out: out.clone(), files, points: 0, failed: 0 });
    }
    let spec = config.to_spec()?;
    log::info!("running {} points (spec {})", spec.delta2_values.len() * spec.dx_values.len(), spec.hash());
    let start = Instant::now();
    let result = experiments::with_workers(config.workers, || experiments::run(&spec))?;
    let wall = start.elapsed().as_secs_f64();

    for table in datasets(config, &result) {
        files.push(write_table(out, &table, config.format)?);
    }
    files.push(write_json(out, "diagnostics.json", &diagnostics(config, &result, wall))?);
    if !result.failures.is_empty() {
        let report = json!({
            "status": if result.records.is_empty() { "error" } else { "partial" },
            "spec_hash": result.spec_hash,
            "failures": result.failures,
        });
        files.push(write_json(out, "errors.json", &report)?);
    }
    let total = result.records.len() + result.failures.len();
    if result.records.is_empty() {
        return Err(CliError::AllPointsFailed(total));
    }
    Ok(RunSummary { out: out.clone(), files, points: total, failed: result.failures.len() })
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

fn write_json(dir: &Path, name: &str, value: &Value) -> Result<PathBuf, CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Encode { what: "JSON", message: e.to_string() })?;
    write_text(dir, name, &(text + "\n"))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    fn new(name: &'static str, columns: &[&'static str]) -> Self {
        Self { name, columns: columns.to_vec(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

/// Round to [`SIGNIFICANT_DIGITS`] significant digits.
pub fn round_sig(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, v).parse().unwrap_or(v)
}

/// Text form of a number with [`SIGNIFICANT_DIGITS`] significant digits.
pub fn format_number(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let r = round_sig(v);
    if r == 0.0 || (1e-5..1e15).contains(&r.abs()) {
        format!("{r}")
    } else {
        format!("{r:e}")
    }
}

pub fn write_table(dir: &Path, table: &Table, format: OutputFormat) -> Result<PathBuf, CliError> {
    match format {
        OutputFormat::Csv => {
            let path = dir.join(format!("{}.csv", table.name));
            let encode = |e: csv::Error| CliError::Encode { what: "CSV", message: e.to_string() };
            let mut w = csv::Writer::from_path(&path).map_err(encode)?;
            w.write_record(&table.columns).map_err(encode)?;
            for row in &table.rows {
                w.write_record(row.iter().map(|c| match c {
                    Cell::Num(v) => format_number(*v),
                    Cell::Text(s) => s.clone(),
                }))
                .map_err(encode)?;
            }
            w.flush().map_err(io_err(&path))?;
            Ok(path)
        }
        OutputFormat::Json => {
            let records: Vec<Value> = table
                .rows
                .iter()
                .map(|row| {
                    let obj = table.columns.iter().zip(row).map(|(k, c)| {
                        let v = match c {
                            Cell::Num(v) => serde_json::Number::from_f64(round_sig(*v)).map_or(Value::Null, Value::Number),
                            Cell::Text(s) => Value::String(s.clone()),
                        };
                        (k.to_string(), v)
                    });
                    Value::Object(obj.collect())
                })
                .collect();
            write_json(dir, &format!("{}.json", table.name), &Value::Array(records))
        }
    }
}

fn mhz(rad: f64) -> f64 {
    rad / TWO_PI
}

/// Records ordered by (Δx, Δ₂) so each Δx forms one contiguous curve.
fn sorted_records(result: &ExperimentResult) -> Vec<&PointRecord> {
    let mut recs: Vec<&PointRecord> = result.records.iter().collect();
    recs.sort_by(|a, b| a.dx.total_cmp(&b.dx).then(a.delta2.total_cmp(&b.delta2)));
    recs
}

fn series_table(
    name: &'static str,
    leading: &[&'static str],
    records: &[&PointRecord],
    pick: impl Fn(&PointRecord) -> &[PositionSeries],
) -> Table {
    let Some(first) = records.iter().flat_map(|r| pick(r)).next() else {
        return Table::new(name, leading);
    };
    let mut columns: Vec<&'static str> = [leading, &["x", "t_us", "theta_over_pi"]].concat();
    let value_names: Vec<&'static str> = first.columns.iter().map(|c| column_name(c)).collect();
    columns.extend(&value_names);
    let with_valid = first.valid.is_some();
    if with_valid {
        columns.push("valid");
    }
    let mut t = Table { name, columns, rows: Vec::new() };
    for r in records {
        for s in pick(r) {
            for sample in &s.samples {
                let mut row: Vec<Cell> = vec![mhz(r.delta2).into(), r.dx.into(), s.x.into(), sample.t.into()];
                row.push((sample.sweep_angle / std::f64::consts::PI).into());
                row.extend(sample.values.iter().map(|&v| Cell::Num(v)));
                if let Some(valid) = s.valid {
                    row.push(Cell::Text(valid.to_string()));
                }
                t.push(row);
            }
        }
    }
    t
}

fn column_name(c: &str) -> &'static str {
    const KNOWN: [&str; 12] = [
        "sigma_x", "sigma_y", "sigma_z", "r_plus_x", "r_plus_y", "r_plus_z", "branch", "gamma_total", "gamma_d",
        "gamma_g", "overlap", "b_x",
    ];
    KNOWN.into_iter().find(|k| *k == c).unwrap_or("value")
}

/// Every dataset the config asks for, in a fixed order.
pub fn datasets(config: &ResolvedConfig, result: &ExperimentResult) -> Vec<Table> {
    use Observable::*;
    let wants = |o| config.outputs.contains(&o);
    let recs = sorted_records(result);
    let mut tables = Vec::new();

    let chern_columns = ["delta2_MHz", "dx", "mean_p", "beta", "corrected"];
    for (obs, name) in [(MeanP, "chern_raw"), (MeanPCorrected, "chern_corrected")] {
        if wants(obs) {
            let mut t = Table::new(name, &chern_columns);
            for r in &recs {
                t.push(vec![mhz(r.delta2).into(), r.dx.into(), r.mean_p.into(), r.beta.into(), r.mean_p_corrected.into()]);
            }
            tables.push(t);
        }
    }

    if wants(ChernIdeal) {
        let mut t = Table::new("chern_ideal", &["delta2_MHz", "chern"]);
        let mut by_d2: Vec<&PointRecord> = result.records.iter().collect();
        by_d2.sort_by(|a, b| a.delta2.total_cmp(&b.delta2).then(a.dx.total_cmp(&b.dx)));
        by_d2.dedup_by(|a, b| a.delta2 == b.delta2);
        for r in by_d2 {
            if let Some(c) = &r.chern_ideal {
                t.push(vec![mhz(r.delta2).into(), c.total.into()]);
            }
        }
        tables.push(t);
    }

    if config.figure == Some(Figure::F1d) && wants(MeanP) {
        let mut t = Table::new("beta_law", &["dx", "mean_p", "beta", "rel_dev"]);
        for r in &recs {
            t.push(vec![r.dx.into(), r.mean_p.into(), r.beta.into(), (r.mean_p / r.beta - 1.0).into()]);
        }
        tables.push(t);
    }

    if wants(StdP) {
        let mut t = Table::new("std_p", &["delta2_MHz", "dx", "std_p"]);
        for r in &recs {
            t.push(vec![mhz(r.delta2).into(), r.dx.into(), r.std_p.into()]);
        }
        tables.push(t);

        if config.dx.len() >= 2 {
            let mut t = Table::new("optimal_dx", &["delta2_MHz", "dx_opt", "std_p_min"]);
            let mut d2: Vec<f64> = result.records.iter().map(|r| r.delta2).collect();
            d2.sort_by(f64::total_cmp);
            d2.dedup();
            for d in d2 {
                let best = result
                    .records
                    .iter()
                    .filter(|r| r.delta2 == d)
                    .min_by(|a, b| a.std_p.total_cmp(&b.std_p).then(a.dx.total_cmp(&b.dx)));
                if let Some(b) = best {
                    t.push(vec![mhz(d).into(), b.dx.into(), b.std_p.into()]);
                }
            }
            tables.push(t);
        }

        if config.protocol == ProtocolKind::Triple && config.delta2_mhz.len() >= 3 {
            let mut t = Table::new(
                "transition",
                &["dx", "transition_MHz", "low_plateau", "high_plateau", "crossings", "status"],
            );
            let mut dxs = config.dx.clone();
            dxs.sort_by(f64::total_cmp);
            dxs.dedup();
            for dx in dxs {
                let (d, s): (Vec<f64>, Vec<f64>) =
                    result.records.iter().filter(|r| r.dx == dx).map(|r| (r.delta2, r.std_p)).unzip();
                if d.len() < 2 {
                    continue;
                }
                let rep = transition_from_series(dx, &d, &s);
                // a gap in the Δ₂ series can move or fake the crossing
                let gaps = result.failures.iter().any(|f| f.dx == dx);
                let (est, status) = match rep.estimate() {
                    Ok(_) if gaps => (f64::NAN, "incomplete"),
                    Ok(v) => (mhz(v), "ok"),
                    Err(_) => (f64::NAN, "indeterminate"),
                };
                t.push(vec![
                    dx.into(),
                    est.into(),
                    rep.low_plateau.into(),
                    rep.high_plateau.into(),
                    (rep.crossings.len() as f64).into(),
                    status.into(),
                ]);
            }
            tables.push(t);
        }
    }

    if config.snapshots_per_segment > 0 {
        let mut t = Table::new("snapshots", &["delta2_MHz", "dx", "t_us", "theta_over_pi", "mean_p", "std_p"]);
        for r in &recs {
            for s in &r.snapshots {
                t.push(vec![
                    mhz(r.delta2).into(),
                    r.dx.into(),
                    s.t.into(),
                    (s.sweep_angle / std::f64::consts::PI).into(),
                    s.mean_p.into(),
                    s.std_p.into(),
                ]);
            }
        }
        tables.push(t);
    }

    let lead = ["delta2_MHz", "dx"];
    if wants(CurvatureSeries) {
        tables.push(series_table("curvature", &lead, &recs, |r| &r.curvature));
        let mut t = Table::new("chern_partials", &["delta2_MHz", "dx", "x", "segment", "partial"]);
        for r in &recs {
            for s in &r.curvature {
                for (k, p) in s.chern_partials.iter().flatten().enumerate() {
                    t.push(vec![mhz(r.delta2).into(), r.dx.into(), s.x.into(), ((k + 1) as f64).into(), (*p).into()]);
                }
            }
        }
        tables.push(t);
    }
    if wants(BlochSeries) {
        tables.push(series_table("bloch_series", &lead, &recs, |r| &r.bloch));
    }
    if wants(PhaseDecomposition) {
        tables.push(series_table("phases", &lead, &recs, |r| &r.phases));
    }
    if wants(MomentumDensity) {
        let mut t = Table::new(
            "momentum_density",
            &["delta2_MHz", "delta2_over_delta1", "dx", "p", "density", "density_e", "density_g"],
        );
        for r in &recs {
            if let Some(m) = &r.momentum {
                for ((p, e), g) in m.p.iter().zip(&m.density_e).zip(&m.density_g) {
                    t.push(vec![
                        mhz(r.delta2).into(),
                        (r.delta2 / result.spec.base.delta1).into(),
                        r.dx.into(),
                        (*p).into(),
                        (e + g).into(),
                        (*e).into(),
                        (*g).into(),
                    ]);
                }
            }
        }
        tables.push(t);
    }
    tables
}

fn diagnostics(config: &ResolvedConfig, result: &ExperimentResult, wall_time_s: f64) -> Value {
    let max_of = |f: &dyn Fn(&PointRecord) -> Option<f64>| {
        result.records.iter().filter_map(f).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
    };
    let per_point: Vec<Value> = sorted_records(result)
        .into_iter()
        .map(|r| json!({ "delta2_MHz": mhz(r.delta2), "dx": r.dx, "diagnostics": r.diagnostics }))
        .collect();
    json!({
        "spec_hash": result.spec_hash,
        "figure": config.figure.map(Figure::id),
        "wall_time_s": wall_time_s,
        "workers": config.workers,
        "points": result.records.len() + result.failures.len(),
        "failed": result.failures.len(),
        "max_norm_drift": max_of(&|r| Some(r.diagnostics.max_norm_drift)),
        "max_convergence_delta": max_of(&|r| {
            let d = &r.diagnostics;
            match (d.convergence_delta_center, d.convergence_delta_edge) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            }
        }),
        "max_density_defect": max_of(&|r| Some(r.diagnostics.density_defect)),
        "step_size_required": result.records.iter().filter_map(|r| r.diagnostics.step_size_required).max(),
        "per_point": per_point,
        "failures": result.failures,
    })
}

#[derive(Debug, Parser)]
#[command(name = "berry-meter", version, about = "Chern-number readout through a continuous-variable meter")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<OutputFormat>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Treat a too-coarse step size as an error.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Write the resolved config and stop.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a TOML configuration.
    Run { config: PathBuf },
    /// Run a figure preset.
    Preset {
        #[arg(value_enum)]
        figure: Figure,
    },
    /// Run the invariant suite at reduced size.
    Selftest,
}

fn init_logging(v: Verbosity) {
    let env = env_logger::Env::default().default_filter_or(v.filter());
    let _ = env_logger::Builder::from_env(env).try_init();
}

/// Entry point shared by the binary and the tests; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let overrides = Overrides { out: cli.out, format: cli.format, workers: cli.workers, strict: cli.strict };
    let resolved = match cli.command {
        Command::Selftest => {
            init_logging(Verbosity::Warn);
            let n = overrides.workers.unwrap_or(0);
            let checks = experiments::with_workers(n, crate::selftest::run);
            for c in &checks {
                println!("{} {} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return if checks.iter().all(|c| c.pass) { 0 } else { 1 };
        }
        Command::Run { config } => parse_config(&config).and_then(RunConfig::resolve),
        Command::Preset { figure } => Ok(ResolvedConfig::preset(figure)),
    };
    let outcome = resolved.map(|r| overrides.apply(r)).and_then(|r| {
        init_logging(r.verbosity);
        run(&r, cli.dry_run)
    });
    match outcome {
        Ok(summary) => {
            let report = json!({
                "status": if summary.failed == 0 { "ok" } else { "partial" },
                "out": summary.out,
                "points": summary.points,
                "failed": summary.failed,
                "files": summary.files,
            });
            println!("{report}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.report());
            e.exit_code()
        }
    }
}
