//! Adaptive measurement: rapid qubit purification and adaptive coherent-state discrimination.
mod dolinar;
mod purification;

pub use dolinar::{
    dolinar_simulate, helstrom_bound, helstrom_coherent, optimal_static_receiver, static_simulate, DolinarConfig,
    ErrorEstimate, StaticReceiver,
};
pub use purification::{
    adaptive_hitting_time, fit_decay, fixed_mean_hitting_time, purification_experiment, rapid_purify_step, DecayFit,
    PurificationStats, PurificationStepper, QubitFeedbackPolicy, QubitTrajectory, Sampling,
};
