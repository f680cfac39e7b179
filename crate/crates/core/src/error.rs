use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("expectation value has a non-negligible imaginary part ({0:e})")]
    NonNegligibleImaginaryPart(f64),

    #[error("grid is not symmetric about x = 0")]
    AsymmetricGrid,

    #[error("grid too coarse: {points_per_period:.2} points per potential period (need >= 16)")]
    GridTooCoarse { points_per_period: f64 },

    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("Fock truncation leak: population {population:e} in the top two levels exceeds 1e-4")]
    TruncationLeak { population: f64 },

    #[error("state positivity violated: eigenvalue {0:e} below -1e-8")]
    StatePositivityViolation(f64),

    #[error("measurement strength must be positive, got {0}")]
    NonPositiveGamma(f64),

    #[error("grid does not resolve the density: {0}")]
    GridUnderResolved(String),

    #[error("density became negative ({0:e}) beyond tolerance")]
    NegativeDensity(f64),

    #[error("covariance trace {trace:e} exceeded bound {bound:e}")]
    CovarianceBlowup { trace: f64, bound: f64 },

    #[error("pair (A, B) is not stabilizable")]
    NotStabilizable,

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("cost minimum lies on the {edge} edge of the search range (gamma = {gamma:e})")]
    MinimumOnBoundary { gamma: f64, edge: &'static str },

    #[error("{unreached} of {total} trajectories did not reach the target purity")]
    TargetNotReached { unreached: usize, total: usize },

    #[error("segments too coarse: {mean_photons:.3} mean photons per segment (max 0.1)")]
    SegmentTooCoarse { mean_photons: f64 },

    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("missing key `{0}`")]
    MissingKey(String),

    #[error("unknown key `{0}`")]
    UnknownKey(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("scenario `{scenario}`: {source}")]
    Scenario {
        scenario: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Strips trajectory and scenario context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Trajectory { source, .. } | Error::Scenario { source, .. } => source.root(),
            other => other,
        }
    }

    /// Short machine-readable tag used on the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::NonNegligibleImaginaryPart(_) => "NonNegligibleImaginaryPart",
            Error::AsymmetricGrid => "AsymmetricGrid",
            Error::GridTooCoarse { .. } => "GridTooCoarse",
            Error::InvalidBasis(_) => "InvalidBasis",
            Error::InvalidState(_) => "InvalidState",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::TruncationLeak { .. } => "TruncationLeak",
            Error::StatePositivityViolation(_) => "StatePositivityViolation",
            Error::NonPositiveGamma(_) => "NonPositiveGamma",
            Error::GridUnderResolved(_) => "GridUnderResolved",
            Error::NegativeDensity(_) => "NegativeDensity",
            Error::CovarianceBlowup { .. } => "CovarianceBlowup",
            Error::NotStabilizable => "NotStabilizable",
            Error::NoConvergence(_) => "NoConvergence",
            Error::MinimumOnBoundary { .. } => "MinimumOnBoundary",
            Error::TargetNotReached { .. } => "TargetNotReached",
            Error::SegmentTooCoarse { .. } => "SegmentTooCoarse",
            Error::FileNotFound(_) => "FileNotFound",
            Error::UnknownScenario(_) => "UnknownScenario",
            Error::MissingKey(_) => "MissingKey",
            Error::UnknownKey(_) => "UnknownKey",
            Error::Config(_) => "Config",
            Error::Io(_) => "IoError",
            Error::Trajectory { .. } | Error::Scenario { .. } => unreachable!(),
        }
    }
}
