//! Simulation toolkit for continuously measured quantum systems under feedback.

pub mod adaptive;
pub mod cooling;
pub mod engine;
pub mod error;
pub mod filters;
pub mod lqg;
pub mod runner;
pub mod state;

pub use error::{Error, Result};
