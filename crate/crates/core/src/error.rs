use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid drive parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("time {t} lies outside the protocol timeline [0, {total}]")]
    OutOfRange { t: f64, total: f64 },
    #[error("degenerate spectrum: detuning and effective Rabi frequency both vanish")]
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PropagationError {
    #[error("invalid integrator configuration: {0}")]
    Config(String),
    #[error("initial state is not normalized (norm² = {0})")]
    NotNormalized(f64),
    #[error(
        "step size too coarse: {steps_per_tq} steps per t_q, at least {required} needed \
         for ω_max = {omega_max} rad/μs"
    )]
    StepSize { steps_per_tq: usize, required: usize, omega_max: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeterError {
    #[error("invalid meter grid: {0}")]
    InvalidGrid(String),
    #[error("grid too narrow: truncated probability {truncation:e} exceeds 1e-12 at L = {half_width}")]
    GridTooNarrow { truncation: f64, half_width: f64 },
    #[error("incomplete trajectory data: expected {expected} grid points, got {got}")]
    IncompleteData { expected: usize, got: usize },
    #[error("momentum grid aliasing: {edge_mass:e} of the density lies within two cells of the edge")]
    Aliasing { edge_mass: f64 },
    #[error(transparent)]
    Propagation(#[from] PropagationError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("curvature samples are not uniform in θ (segment {segment})")]
    NonUniformSampling { segment: usize },
    #[error("series lengths disagree: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error("invalid sweep specification: {0}")]
    InvalidSpec(String),
    #[error("point (Δ₂ = {delta2} rad/μs, Δx = {dx}): {source}")]
    Point {
        delta2: f64,
        dx: f64,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error("no std_p crossing of the plateau midpoint; transition indeterminate")]
    IndeterminateTransition,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Meter(#[from] MeterError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}
