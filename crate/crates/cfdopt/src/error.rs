//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("no CV arrivals for phase {0}")]
    NoCvArrivals(u8),

    #[error("no queued CVs for phase {0}")]
    NoQueuedCv(u8),

    #[error("all observation weights are zero for phase {0}")]
    DegenerateWeights(u8),

    #[error("estimation impossible: all phases of the intersection have no queued CVs")]
    EstimationImpossible,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate discharge fit: fitted wave speed {0} is not positive")]
    DegenerateDischarge(f64),

    #[error(
        "arrival rate exceeds jam capacity in segment {segment}: \
         d0*lambda0*alpha = {flow} >= v = {v}"
    )]
    ArrivalExceedsJamCapacity { segment: usize, flow: f64, v: f64 },

    #[error("cycle length {c} infeasible: ring green {ring_green} < {required} required")]
    CycleInfeasible { c: f64, ring_green: f64, required: f64 },

    #[error("no feasible cycle length in [{c_min}, {c_max}]: {detail}")]
    NoFeasibleCycle { c_min: f64, c_max: f64, detail: String },

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),
}

impl Error {
    /// Process exit code for the CLI: 1 I/O, 2 estimation, 3 optimization,
    /// 4 simulation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Config(_) => 1,
            Error::NoCvArrivals(_)
            | Error::NoQueuedCv(_)
            | Error::DegenerateWeights(_)
            | Error::EstimationImpossible
            | Error::InsufficientData(_)
            | Error::DegenerateDischarge(_) => 2,
            Error::Domain(_)
            | Error::ArrivalExceedsJamCapacity { .. }
            | Error::CycleInfeasible { .. }
            | Error::NoFeasibleCycle { .. } => 3,
            Error::Simulation(_) => 4,
            Error::Evaluation(_) => 2,
        }
    }
}
