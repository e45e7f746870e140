//! Parameter sweeps over (Δ₂, Δx) with provenance and integrator diagnostics.
//!
//! Everything here is concrete `f64`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    beta_closed_form, berry_curvature, chern_integral, corrected_chern, heisenberg_mean_p,
};
use crate::error::{ExperimentError, MeterError};
use crate::meter::{
    assemble, make_grid, mean_p_derivative, momentum_transform, propagate_grid, GridRunOptions, HalfWidthPolicy,
    MeterGrid,
};
use crate::model::{adiabatic_eigensystem, CouplingLaw, DriveParams, Protocol};
use crate::propagator::{Branch, IntegratorConfig, Propagator, QubitAmplitudes, SampleLayout};
use crate::{analysis, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Single,
    Triple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    ChernIdeal,
    MeanP,
    MeanPCorrected,
    StdP,
    CurvatureSeries,
    MomentumDensity,
    PhaseDecomposition,
    BlochSeries,
}

impl Observable {
    pub const ALL: [Observable; 8] = [
        Observable::ChernIdeal,
        Observable::MeanP,
        Observable::MeanPCorrected,
        Observable::StdP,
        Observable::CurvatureSeries,
        Observable::MomentumDensity,
        Observable::PhaseDecomposition,
        Observable::BlochSeries,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n: usize,
    pub half_width: HalfWidthPolicy,
    /// Ceiling for aliasing retries. A point whose momentum density reaches the
    /// grid edge is rerun with N doubled at the same half-width, up to this size.
    #[serde(default)]
    pub max_n: Option<usize>,
}

impl GridSpec {
    pub fn new(n: usize, half_width: HalfWidthPolicy) -> Self {
        Self { n, half_width, max_n: None }
    }

    fn ceiling(&self) -> usize {
        self.max_n.unwrap_or(self.n).max(self.n)
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::new(1024, HalfWidthPolicy::Default)
    }
}

/// A complete, hashable description of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: DriveParams<f64>,
    pub protocol_kind: ProtocolKind,
    pub coupling: CouplingLaw,
    /// rad/μs.
    pub delta2_values: Vec<f64>,
    pub dx_values: Vec<f64>,
    pub grid: GridSpec,
    pub integrator: IntegratorConfig,
    pub outputs: Vec<Observable>,
    /// Meter positions for per-trajectory series (curvature, Bloch, phases).
    pub positions: Vec<f64>,
    /// Joint-state snapshots between segment boundaries.
    pub snapshots_per_segment: usize,
    /// Repeat the x = 0 and grid-edge trajectories with doubled steps.
    pub convergence_check: bool,
}

impl SweepSpec {
    pub fn new(base: DriveParams<f64>, protocol_kind: ProtocolKind) -> Self {
        Self {
            base,
            protocol_kind,
            coupling: CouplingLaw::BerryWeighted,
            delta2_values: default_delta2_grid(base.delta1),
            dx_values: vec![1.0],
            grid: GridSpec::default(),
            integrator: IntegratorConfig::default(),
            outputs: vec![Observable::MeanP, Observable::StdP],
            positions: vec![0.0],
            snapshots_per_segment: 9,
            convergence_check: true,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidSpec(m));
        if self.delta2_values.is_empty() {
            return bad("delta2_values is empty".into());
        }
        if self.dx_values.is_empty() {
            return bad("dx_values is empty".into());
        }
        if let Some(d) = self.delta2_values.iter().find(|d| !d.is_finite()) {
            return bad(format!("non-finite Δ₂ value {d}"));
        }
        if let Some(d) = self.dx_values.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return bad(format!("Δx values must be positive, got {d}"));
        }
        if let Some(x) = self.positions.iter().find(|x| !x.is_finite()) {
            return bad(format!("non-finite position {x}"));
        }
        self.base.validated()?;
        self.integrator.validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(bytes))
    }

    fn wants(&self, o: Observable) -> bool {
        self.outputs.contains(&o)
    }

    fn protocol(&self, delta2: f64, coupling: CouplingLaw) -> Result<Protocol<f64>, ExperimentError> {
        let params = self.base.with_delta2(delta2).validated()?;
        Ok(match self.protocol_kind {
            ProtocolKind::Single => Protocol::single(params, coupling)?,
            ProtocolKind::Triple => Protocol::triple(params, coupling)?,
        })
    }
}

/// 41 uniform points on [0, 2Δ₁] plus 5 refinements within ±10% of Δ₁, sorted.
pub fn default_delta2_grid(delta1: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..=40).map(|i| 2.0 * delta1.abs() * i as f64 / 40.0).collect();
    v.extend([0.925, 0.975, 1.01, 1.025, 1.075].iter().map(|r| r * delta1.abs()));
    v.sort_by(f64::total_cmp);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChernSummary {
    pub total: f64,
    pub partials: Vec<f64>,
}

/// Joint-state statistics at one snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotStats {
    pub t: f64,
    /// kπ + θ for the k-th segment.
    pub sweep_angle: f64,
    pub mean_p: f64,
    pub std_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSample {
    pub t: f64,
    pub sweep_angle: f64,
    pub values: Vec<f64>,
}

/// Per-position time series, `columns` naming the entries of each sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionSeries {
    pub x: f64,
    pub columns: Vec<String>,
    pub samples: Vec<SeriesSample>,
    /// Running -∫B dθ after each segment (curvature series only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chern_partials: Option<Vec<f64>>,
    /// Adiabatic-regime flag (phase decomposition only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumRecord {
    pub p: Vec<f64>,
    pub density_e: Vec<f64>,
    pub density_g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub max_norm_drift: f64,
    /// max |Δc| of the final x = 0 state under doubled steps.
    pub convergence_delta_center: Option<f64>,
    /// Same at the grid edge x = -L.
    pub convergence_delta_edge: Option<f64>,
    pub mean_p_derivative: f64,
    pub mean_p_heisenberg: f64,
    /// max_j | |Ψ_e|²+|Ψ_g|² - |φ|² | at the final time.
    pub density_defect: f64,
    pub momentum_total: f64,
    pub half_width: f64,
    pub n: usize,
    /// Steps per t_q the step-size rule asked for, when breached.
    pub step_size_required: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub spec_hash: String,
    /// rad/μs.
    pub delta2: f64,
    pub dx: f64,
    pub mean_p: f64,
    pub std_p: f64,
    pub beta: f64,
    pub mean_p_corrected: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chern_ideal: Option<ChernSummary>,
    pub snapshots: Vec<SnapshotStats>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub curvature: Vec<PositionSeries>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub bloch: Vec<PositionSeries>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub phases: Vec<PositionSeries>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<MomentumRecord>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointFailure {
    pub spec_hash: String,
    pub delta2: f64,
    pub dx: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub spec_hash: String,
    pub spec: SweepSpec,
    pub records: Vec<PointRecord>,
    pub failures: Vec<PointFailure>,
}

impl ExperimentResult {
    pub fn record(&self, delta2: f64, dx: f64) -> Option<&PointRecord> {
        self.records.iter().find(|r| r.delta2 == delta2 && r.dx == dx)
    }
}

fn sweep_angle(layout: &SampleLayout<f64>, i: usize) -> f64 {
    let k = layout.owner(i);
    std::f64::consts::PI * k as f64 + layout.local_theta(k, i)
}

fn max_amp_delta(a: &QubitAmplitudes<f64>, b: &QubitAmplitudes<f64>) -> f64 {
    (a.ce - b.ce).norm().max((a.cg - b.cg).norm())
}

fn convergence_delta(protocol: &Protocol<f64>, cfg: &IntegratorConfig, x: f64) -> Result<f64, ExperimentError> {
    let fine = IntegratorConfig { steps_per_tq: 2 * cfg.steps_per_tq, strict: false, ..*cfg };
    let coarse = IntegratorConfig { strict: false, ..*cfg };
    let a = Propagator::new(protocol, &coarse)?.run(x, QubitAmplitudes::excited(), |_, _| {});
    let b = Propagator::new(protocol, &fine)?.run(x, QubitAmplitudes::excited(), |_, _| {});
    Ok(max_amp_delta(&a, &b))
}

fn snapshot_indices(layout: &SampleLayout<f64>, per_segment: usize) -> Vec<usize> {
    let mut out = vec![0];
    for span in &layout.segments {
        let n = span.last - span.first;
        for s in 1..=per_segment + 1 {
            out.push(span.first + (n * s) / (per_segment + 1));
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn curvature_series(traj: &Trajectory, protocol: &Protocol<f64>) -> Result<PositionSeries, ExperimentError> {
    let cs = berry_curvature(traj, protocol);
    let chern = chern_integral(&cs)?;
    let flat = cs.flattened();
    let samples = flat
        .iter()
        .zip(&traj.times)
        .map(|((angle, b), t)| SeriesSample { t: *t, sweep_angle: *angle, values: vec![*b] })
        .collect();
    Ok(PositionSeries {
        x: traj.x,
        columns: vec!["b_x".into()],
        samples,
        chern_partials: Some(chern.partials),
        valid: None,
    })
}

fn bloch_series(traj: &Trajectory, protocol: &Protocol<f64>, layout: &SampleLayout<f64>) -> PositionSeries {
    let x_frame = if protocol.coupling == CouplingLaw::Off { 0.0 } else { traj.x };
    let samples = traj
        .bloch
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let d = protocol.drive_at_theta(traj.theta[i]);
            let rp = adiabatic_eigensystem(d.delta, d.omega, x_frame).map(|f| f.r_plus).unwrap_or([f64::NAN; 3]);
            let branch = match traj.branch[i] {
                Branch::Plus => 1.0,
                Branch::Minus => -1.0,
            };
            SeriesSample {
                t: traj.times[i],
                sweep_angle: sweep_angle(layout, i),
                values: vec![r[0], r[1], r[2], rp[0], rp[1], rp[2], branch],
            }
        })
        .collect();
    PositionSeries {
        x: traj.x,
        columns: ["sigma_x", "sigma_y", "sigma_z", "r_plus_x", "r_plus_y", "r_plus_z", "branch"]
            .map(String::from)
            .to_vec(),
        samples,
        chern_partials: None,
        valid: None,
    }
}

fn phase_series(traj: &Trajectory, protocol: &Protocol<f64>, layout: &SampleLayout<f64>) -> Result<PositionSeries, ExperimentError> {
    let d = analysis::phase_decompose(traj, protocol)?;
    let samples = (0..d.times.len())
        .map(|i| SeriesSample {
            t: d.times[i],
            sweep_angle: sweep_angle(layout, i),
            values: vec![d.gamma_total[i], d.gamma_d[i], d.gamma_g[i], d.overlap[i]],
        })
        .collect();
    Ok(PositionSeries {
        x: traj.x,
        columns: ["gamma_total", "gamma_d", "gamma_g", "overlap"].map(String::from).to_vec(),
        samples,
        chern_partials: None,
        valid: Some(d.valid),
    })
}

fn run_point(spec: &SweepSpec, hash: &str, delta2: f64, dx: f64) -> Result<PointRecord, ExperimentError> {
    let mut grid: MeterGrid<f64> = make_grid(dx, spec.grid.n, spec.grid.half_width)?;
    loop {
        match run_point_on(spec, hash, delta2, dx, &grid) {
            Err(ExperimentError::Meter(MeterError::Aliasing { edge_mass })) if 2 * grid.n <= spec.grid.ceiling() => {
                log::info!("Δ₂ = {delta2}, Δx = {dx}: aliasing at N = {} (edge mass {edge_mass:e}), doubling", grid.n);
                grid = make_grid(dx, 2 * grid.n, HalfWidthPolicy::Fixed(grid.half_width))?;
            }
            other => return other,
        }
    }
}

fn run_point_on(
    spec: &SweepSpec,
    hash: &str,
    delta2: f64,
    dx: f64,
    grid: &MeterGrid<f64>,
) -> Result<PointRecord, ExperimentError> {
    let protocol = spec.protocol(delta2, spec.coupling)?;
    let prop = Propagator::new(&protocol, &spec.integrator)?;
    let layout = prop.layout().clone();
    let opts = GridRunOptions {
        snapshots: snapshot_indices(&layout, spec.snapshots_per_segment),
        record_sigma_y: true,
        no_mirror: false,
    };
    let run = propagate_grid(&protocol, grid, &spec.integrator, &opts)?;
    let t_end = layout.times[layout.len() - 1];
    let final_js = assemble(grid, run.final_states(), t_end)?;
    let final_m = momentum_transform(&final_js)?;
    let mut snapshots = Vec::with_capacity(run.snapshot_indices.len());
    for (s, &i) in run.snapshot_indices.iter().enumerate() {
        let js = assemble(grid, &run.snapshots[s], layout.times[i])?;
        let m = momentum_transform(&js)?;
        snapshots.push(SnapshotStats { t: layout.times[i], sweep_angle: sweep_angle(&layout, i), mean_p: m.mean_p, std_p: m.std_p });
    }
    let heisenberg = heisenberg_mean_p(&run, &protocol)?;

    let chern_ideal = if spec.wants(Observable::ChernIdeal) {
        let bare = spec.protocol(delta2, CouplingLaw::Off)?;
        let traj = Propagator::new(&bare, &IntegratorConfig { strict: false, ..spec.integrator })?
            .evolve(0.0, QubitAmplitudes::excited())?;
        let c = chern_integral(&berry_curvature(&traj, &bare))?;
        Some(ChernSummary { total: c.total, partials: c.partials })
    } else {
        None
    };

    let per_position = spec.wants(Observable::CurvatureSeries)
        || spec.wants(Observable::BlochSeries)
        || spec.wants(Observable::PhaseDecomposition);
    let (mut curvature, mut bloch, mut phases) = (Vec::new(), Vec::new(), Vec::new());
    if per_position {
        for &x in &spec.positions {
            let traj = prop.evolve(x, QubitAmplitudes::excited())?;
            if spec.wants(Observable::CurvatureSeries) {
                curvature.push(curvature_series(&traj, &protocol)?);
            }
            if spec.wants(Observable::BlochSeries) {
                bloch.push(bloch_series(&traj, &protocol, &layout));
            }
            if spec.wants(Observable::PhaseDecomposition) {
                phases.push(phase_series(&traj, &protocol, &layout)?);
            }
        }
    }

    let momentum = spec.wants(Observable::MomentumDensity).then(|| MomentumRecord {
        p: final_m.p_grid.clone(),
        density_e: final_m.density_e.clone(),
        density_g: final_m.density_g.clone(),
    });

    let (conv_c, conv_e) = if spec.convergence_check {
        (
            Some(convergence_delta(&protocol, &spec.integrator, 0.0)?),
            Some(convergence_delta(&protocol, &spec.integrator, grid.points[0])?),
        )
    } else {
        (None, None)
    };

    let beta = beta_closed_form(dx);
    Ok(PointRecord {
        spec_hash: hash.to_string(),
        delta2,
        dx,
        mean_p: final_m.mean_p,
        std_p: final_m.std_p,
        beta,
        mean_p_corrected: corrected_chern(final_m.mean_p, dx),
        chern_ideal,
        snapshots,
        curvature,
        bloch,
        phases,
        momentum,
        diagnostics: Diagnostics {
            max_norm_drift: run.max_norm_drift,
            convergence_delta_center: conv_c,
            convergence_delta_edge: conv_e,
            mean_p_derivative: mean_p_derivative(&final_js),
            mean_p_heisenberg: heisenberg[heisenberg.len() - 1],
            density_defect: final_js.density_defect(),
            momentum_total: final_m.total(),
            half_width: grid.half_width,
            n: grid.n,
            step_size_required: run.step_size_warning,
        },
    })
}

fn run_sweep(spec: &SweepSpec) -> Result<ExperimentResult, ExperimentError> {
    spec.validate()?;
    let hash = spec.hash();
    let points: Vec<(f64, f64)> = spec
        .delta2_values
        .iter()
        .flat_map(|&d| spec.dx_values.iter().map(move |&x| (d, x)))
        .collect();
    let outcomes: Vec<Result<PointRecord, ExperimentError>> =
        points.par_iter().map(|&(d, x)| run_point(spec, &hash, d, x)).collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for ((delta2, dx), outcome) in points.into_iter().zip(outcomes) {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => {
                let keyed = ExperimentError::Point { delta2, dx, source: Box::new(e) };
                log::error!("{keyed}");
                failures.push(PointFailure { spec_hash: hash.clone(), delta2, dx, error: keyed.to_string() });
            }
        }
    }
    Ok(ExperimentResult { spec_hash: hash, spec: spec.clone(), records, failures })
}

/// Sweep a single quench over every (Δ₂, Δx) pair.
pub fn run_single_quench(spec: &SweepSpec) -> Result<ExperimentResult, ExperimentError> {
    if spec.protocol_kind != ProtocolKind::Single {
        return Err(ExperimentError::InvalidSpec("run_single_quench needs protocol_kind = single".into()));
    }
    run_sweep(spec)
}

/// Sweep the (t_q, 2t_q, t_q) sequence, qubit not reinitialized between quenches.
pub fn run_triple_quench(spec: &SweepSpec) -> Result<ExperimentResult, ExperimentError> {
    if spec.protocol_kind != ProtocolKind::Triple {
        return Err(ExperimentError::InvalidSpec("run_triple_quench needs protocol_kind = triple".into()));
    }
    run_sweep(spec)
}

/// Dispatch on `protocol_kind`.
pub fn run(spec: &SweepSpec) -> Result<ExperimentResult, ExperimentError> {
    match spec.protocol_kind {
        ProtocolKind::Single => run_single_quench(spec),
        ProtocolKind::Triple => run_triple_quench(spec),
    }
}

/// std_p(Δ₂) at one Δx and where it crosses the midpoint of its end plateaus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub dx: f64,
    pub delta2: Vec<f64>,
    pub std_p: Vec<f64>,
    pub low_plateau: f64,
    pub high_plateau: f64,
    /// Every midpoint crossing, interpolated linearly; several appear when std_p oscillates.
    pub crossings: Vec<f64>,
}

impl TransitionReport {
    /// First midpoint crossing.
    pub fn estimate(&self) -> Result<f64, ExperimentError> {
        self.crossings.first().copied().ok_or(ExperimentError::IndeterminateTransition)
    }
}

/// Relative plateau contrast below which no transition is reported.
pub const MIN_TRANSITION_CONTRAST: f64 = 1e-6;

pub fn transition_from_series(dx: f64, delta2: &[f64], std_p: &[f64]) -> TransitionReport {
    let mut pairs: Vec<(f64, f64)> = delta2.iter().copied().zip(std_p.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (d, s): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let low = s[0];
    let high = s[s.len() - 1];
    let mid = 0.5 * (low + high);
    let contrast = (high - low).abs() / low.abs().max(high.abs()).max(f64::MIN_POSITIVE);
    let mut crossings = Vec::new();
    if contrast > MIN_TRANSITION_CONTRAST {
        for i in 1..s.len() {
            let (a, b) = (s[i - 1] - mid, s[i] - mid);
            if a == 0.0 {
                crossings.push(d[i - 1]);
            } else if a * b < 0.0 {
                crossings.push(d[i - 1] + (d[i] - d[i - 1]) * a / (a - b));
            }
        }
    }
    TransitionReport { dx, delta2: d, std_p: s, low_plateau: low, high_plateau: high, crossings }
}

/// Run the triple-quench sweep and locate the std_p step for each Δx.
pub fn transition_indicator(spec: &SweepSpec) -> Result<(ExperimentResult, Vec<TransitionReport>), ExperimentError> {
    let result = run_triple_quench(spec)?;
    let reports = spec
        .dx_values
        .iter()
        .map(|&dx| {
            let (d, s): (Vec<f64>, Vec<f64>) =
                result.records.iter().filter(|r| r.dx == dx).map(|r| (r.delta2, r.std_p)).unzip();
            if d.len() < 2 {
                return Err(ExperimentError::IndeterminateTransition);
            }
            Ok(transition_from_series(dx, &d, &s))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((result, reports))
}

/// Run `f` on a dedicated pool of `workers` threads (0 = one per core).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            log::warn!("could not build a {workers}-thread pool ({e}); using the global pool");
            f()
        }
    }
}

/// Meter grid of a spec at one Δx (for callers that need point positions).
pub fn grid_for(spec: &SweepSpec, dx: f64) -> Result<MeterGrid<f64>, ExperimentError> {
    Ok(make_grid(dx, spec.grid.n, spec.grid.half_width)?)
}
