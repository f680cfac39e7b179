//! Feedback cooling of a measured resonator (LQG) and of a lattice-trapped atom (bang-bang).
mod atom;
mod resonator;

pub use atom::{
    bang_bang_decision, decide_level, label_for, lowering_indicator, run_atom_cooling, AtomInitial,
    AtomLatticeScenario, AtomModel, AtomTrajectory, CoolingOutcome, FactoredState, Level, OutcomeLabel,
    LABEL_THRESHOLD, SPECTRAL_TAIL_TOL,
};
pub use resonator::{
    open_loop_moments, run_resonator_cooling, ResonatorOutcome, ResonatorScenario, ResonatorStepper,
    ResonatorTrajectory, ThermalBath,
};
