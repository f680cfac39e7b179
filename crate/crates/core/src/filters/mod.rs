//! Conditioned-state propagators: the quantum stochastic master equation,
//! the classical Kushner–Stratonovich equation on a phase-space grid, and the
//! Kalman–Bucy filter both reduce to for linear dynamics.

mod equivalence;
mod kalman;
mod ks_grid;
pub(crate) mod sme;

pub use equivalence::{compare_sme_kalman, relaxation_time, FilterComparison, FilterComparisonSetup};
pub use kalman::{
    backaction_diffusion, kalman_bucy_step, riccati_flow, thermal_diffusion, GaussianBelief, LinearMeasuredModel,
};
pub use ks_grid::{ks_advect_unnormalized, ks_grid_step, GridBelief, PhaseGrid};
pub use sme::{evolve_unconditional, lindblad_rhs, sme_step, SmeIntegrator, SmeNoise, SmeState, SmeStepper};
