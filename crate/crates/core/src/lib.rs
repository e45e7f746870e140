//! Simulator for reading out the Chern number of a swept qubit through the
//! momentum of a continuous-variable meter.
//!
//! The numerical core (`model`, `propagator`, `meter`, `analysis`) is generic
//! over [`scalar::Real`]; the aliases below fix the scalar to `f64` (plain
//! names) or `f32` (`…F32`). Sweeps and the command line work in `f64`.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod meter;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod propagator;
pub mod scalar;
pub mod selftest;

pub use error::{AnalysisError, ExperimentError, MeterError, ModelError, PropagationError};

pub type DriveParams = model::DriveParams<f64>;
pub type Protocol = model::Protocol<f64>;
pub type AdiabaticFrame = model::AdiabaticFrame<f64>;
pub type QubitAmplitudes = propagator::QubitAmplitudes<f64>;
pub type Trajectory = propagator::Trajectory<f64>;
pub type MeterGrid = meter::MeterGrid<f64>;
pub type JointState<'g> = meter::JointState<'g, f64>;
pub type MomentumDistribution = meter::MomentumDistribution<f64>;
pub type CurvatureSeries = analysis::CurvatureSeries<f64>;
pub type PhaseDecomposition = analysis::PhaseDecomposition<f64>;

pub type DriveParamsF32 = model::DriveParams<f32>;
pub type ProtocolF32 = model::Protocol<f32>;
pub type QubitAmplitudesF32 = propagator::QubitAmplitudes<f32>;
pub type TrajectoryF32 = propagator::Trajectory<f32>;
pub type MeterGridF32 = meter::MeterGrid<f32>;
pub type MomentumDistributionF32 = meter::MomentumDistribution<f32>;
