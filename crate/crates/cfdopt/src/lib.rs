//! Trajectory-driven fixed-time signal timing optimization for an isolated
//! intersection.
//!
//! The pipeline: sparse connected-vehicle trajectories are folded into
//! per-cycle arrival profiles, per-phase demand is estimated by weighted
//! maximum likelihood over queued-vehicle observations, a cumulative flow
//! diagram model turns candidate timing plans into queue and delay measures,
//! and a bi-level PSO searches cycle length, green splits and the reference
//! point under NEMA dual-ring constraints. A built-in point-queue simulator
//! provides ground truth for closed-loop evaluation.
//!
//! The numeric core ([`profile`], [`cfd`], [`estimate`], [`ring`],
//! [`optimizer`]) is generic over the scalar type via [`scalar::Scalar`];
//! the aliases below pin everything to `f64`, which is what the I/O,
//! simulation and CLI layers use.

pub mod cfd;
pub mod cli;
pub mod config;
pub mod error;
pub mod estimate;
pub mod io;
pub mod optimizer;
pub mod pipeline;
pub mod profile;
pub mod ring;
pub mod scalar;
pub mod sim;

pub use error::{Error, Result};

/// `f64` aliases for the generic core types.
pub type ArrivalProfile = profile::ArrivalProfile<f64>;
pub type CycleHistogram = profile::CycleHistogram<f64>;
pub type FitParams = profile::FitParams<f64>;
pub type WaveProfile = cfd::WaveProfile<f64>;
pub type ArrivalCurve = cfd::ArrivalCurve<f64>;
pub type PhaseTiming = cfd::PhaseTiming<f64>;
pub type PhasePerformance = cfd::PhasePerformance<f64>;
pub type LostTime = cfd::LostTime<f64>;
pub type DischargeFit = estimate::DischargeFit<f64>;
pub type PhaseDemand = estimate::PhaseDemand<f64>;
pub type DualRingPlan = ring::DualRingPlan<f64>;
pub type SplitVector = ring::SplitVector<f64>;
pub type ObjectiveValue = optimizer::ObjectiveValue<f64>;
pub type PhaseModel = optimizer::PhaseModel<f64>;
