use serde::Serialize;
use toml::Value;

use super::config::{RunConfig, ScenarioKind};
use super::output::Scalar;
use super::scenarios::run_scenario;
use crate::error::Result;

/// Outcome of rerunning a scenario at half the step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftEntry {
    pub name: String,
    pub coarse: Scalar,
    pub fine: Scalar,
    /// `3·√(se_c² + se_f²) + abs + rel·|coarse|`.
    pub allowed: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftReport {
    pub scenario: ScenarioKind,
    pub entries: Vec<DriftEntry>,
}

impl DriftReport {
    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.pass)
    }
}

struct Tolerance {
    prefix: &'static str,
    abs: f64,
    rel: f64,
}

const fn tol(prefix: &'static str, abs: f64, rel: f64) -> Tolerance {
    Tolerance { prefix, abs, rel }
}

fn tolerances(kind: ScenarioKind) -> Vec<Tolerance> {
    match kind {
        ScenarioKind::SmeVsLindblad => {
            vec![tol("final_x", 0.01, 0.0), tol("final_y", 0.01, 0.0), tol("final_z", 0.01, 0.0)]
        }
        ScenarioKind::FilterEquivalence => vec![tol("mean_rms_error", 0.02, 0.0), tol("cov_rms_error", 0.02, 0.0)],
        ScenarioKind::RapidPurification => vec![
            tol("entropy_rate_fixed", 0.0, 0.05),
            tol("entropy_rate_adaptive", 0.0, 0.05),
            tol("hitting_time_fixed", 0.0, 0.02),
            tol("hitting_time_adaptive", 0.0, 0.02),
        ],
        ScenarioKind::Dolinar => vec![tol("dolinar_error", 0.0, 0.0)],
        ScenarioKind::ResonatorCooling => vec![tol("steady_energy", 0.0, 0.03)],
        ScenarioKind::AtomCooling => vec![tol("ground_share", 0.0, 0.0), tol("median_final_purity", 0.02, 0.0)],
        ScenarioKind::GammaScan => vec![tol("cost_star_ode", 0.0, 1e-6), tol("simulated_energy", 0.0, 0.03)],
    }
}

fn halve_dt(v: &mut Value) {
    match v {
        Value::Float(x) => *x *= 0.5,
        Value::Integer(i) => *v = Value::Float(*i as f64 * 0.5),
        Value::Array(a) => a.iter_mut().for_each(halve_dt),
        _ => {}
    }
}

fn refine_table(t: &mut toml::Table) {
    for (k, v) in t.iter_mut() {
        if k == "dt" {
            halve_dt(v);
        } else if let Value::Table(inner) = v {
            refine_table(inner);
        }
    }
}

/// The same run with every time step halved; Dolinar doubles its segments.
pub fn refined(cfg: &RunConfig) -> RunConfig {
    let mut out = cfg.clone();
    if cfg.scenario == ScenarioKind::Dolinar {
        let n = cfg.parameters.get("n_segments").and_then(Value::as_integer).unwrap_or(200);
        out.parameters.insert("n_segments".into(), Value::Integer(2 * n));
    } else {
        refine_table(&mut out.parameters);
    }
    out
}

/// Runs `cfg` and its refinement and compares the resolution-sensitive scalars.
pub fn drift_check(cfg: &RunConfig) -> Result<DriftReport> {
    let coarse = run_scenario(cfg)?;
    let fine = run_scenario(&refined(cfg))?;
    let mut entries = Vec::new();
    for s in tolerances(cfg.scenario) {
        for (name, c) in coarse.scalars.iter().filter(|(k, _)| k.starts_with(s.prefix)) {
            let Some(f) = fine.scalar(name) else { continue };
            let se = (c.stderr.unwrap_or(0.0).powi(2) + f.stderr.unwrap_or(0.0).powi(2)).sqrt();
            let allowed = 3.0 * se + s.abs + s.rel * c.value.abs();
            entries.push(DriftEntry {
                name: name.clone(),
                coarse: *c,
                fine: f,
                allowed,
                pass: (c.value - f.value).abs() <= allowed,
            });
        }
    }
    Ok(DriftReport { scenario: cfg.scenario, entries })
}
