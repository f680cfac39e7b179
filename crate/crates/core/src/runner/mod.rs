//! Config-driven batch runs of the registered scenarios.

mod config;
mod drift;
mod output;
mod scenarios;

pub use config::{parse_config, parse_config_str, RunConfig, ScenarioKind};
pub use drift::{drift_check, refined, DriftEntry, DriftReport};
pub use output::{curve_csv, write_results, Metadata, Scalar, ScenarioResult, Series, TrajectoryTable};
pub use scenarios::{
    ode_steady_cost, run_scenario, AtomParams, DolinarParams, GammaScanParams, PurificationParams, ResonatorParams,
    ScanSimulation, ScenarioParams, SmeVsLindbladParams,
};
