use nalgebra::{Matrix2, Vector2};
use serde::Serialize;

use crate::engine::{run_ensemble, Curve, Observable, Stepper, TrajectoryConfig};
use crate::error::{Error, Result};
use crate::filters::{
    kalman_bucy_step, thermal_diffusion, GaussianBelief, LinearMeasuredModel, SmeIntegrator, SmeNoise, SmeState,
};
use crate::lqg::{synthesize_lqg, ControlLaw, QuadraticCost};
use crate::state::{
    build_oscillator, coherent_state, top_level_population, BasisSpec, DensityMatrix, Oscillator, PhysicalConstants,
    C64,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ThermalBath {
    /// Coupling rate `Γ`.
    pub coupling: f64,
    pub n_bar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResonatorScenario {
    pub mass: f64,
    pub omega: f64,
    /// Number of Fock levels kept.
    pub levels: usize,
    pub gamma: f64,
    pub control_weight: f64,
    pub feedback: bool,
    pub bath: Option<ThermalBath>,
    /// Initial coherent amplitude; zero starts in the ground state.
    pub initial_alpha: f64,
    /// Start of the averaging window for steady-state quantities.
    pub steady_from: f64,
    pub constants: PhysicalConstants,
}

impl ResonatorScenario {
    pub fn validate(&self) -> Result<()> {
        self.constants.validate()?;
        if !(self.gamma > 0.0) {
            return Err(Error::NonPositiveGamma(self.gamma));
        }
        for (name, v) in [("mass", self.mass), ("omega", self.omega), ("control weight", self.control_weight)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(b) = self.bath {
            if !(b.coupling >= 0.0 && b.n_bar >= 0.0) {
                return Err(Error::InvalidParameter("bath coupling and occupation must be non-negative".into()));
            }
        }
        if self.steady_from < 0.0 {
            return Err(Error::InvalidParameter("steady window start must be non-negative".into()));
        }
        Ok(())
    }

    pub fn thermal(&self) -> f64 {
        self.bath.map_or(0.0, |b| thermal_diffusion(b.coupling, self.mass, self.omega, self.constants.hbar, b.n_bar))
    }

    pub fn model(&self) -> Result<LinearMeasuredModel> {
        LinearMeasuredModel::measured_oscillator(self.mass, self.omega, self.gamma, self.constants.hbar, self.thermal())
    }

    pub fn cost(&self) -> Result<QuadraticCost> {
        QuadraticCost::oscillator_energy(self.mass, self.omega, self.control_weight)
    }

    pub fn oscillator(&self) -> Result<Oscillator> {
        build_oscillator(&BasisSpec::Fock { n_max: self.levels, mass: self.mass, omega: self.omega }, self.constants)
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self { gamma, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResonatorOutcome {
    pub times: Vec<f64>,
    pub energy: Curve,
    pub mean_x: Curve,
    /// Ensemble mean of per-trajectory time averages of `⟨H⟩` over the steady window.
    pub steady_energy: f64,
    pub steady_energy_stderr: f64,
    /// `Tr(QΣx)` from the LQG design (feedback runs only).
    pub predicted_energy: Option<f64>,
    /// Full LQG cost including control effort (feedback runs only).
    pub predicted_cost: Option<f64>,
    pub gain: Option<[f64; 2]>,
    /// Largest population seen in the top two Fock levels.
    pub max_leak: f64,
}

pub struct ResonatorTrajectory {
    sme: SmeState,
    belief: GaussianBelief,
    t: f64,
    energy_sum: f64,
    energy_samples: usize,
    max_leak: f64,
}

impl ResonatorTrajectory {
    pub fn energy(&self, osc: &Oscillator) -> f64 {
        self.sme.expect(&osc.hamiltonian)
    }

    pub fn sme(&self) -> &SmeState {
        &self.sme
    }

    pub fn belief(&self) -> &GaussianBelief {
        &self.belief
    }
}

pub struct ResonatorStepper {
    osc: Oscillator,
    integrator: SmeIntegrator,
    model: LinearMeasuredModel,
    gain: Option<Vector2<f64>>,
    initial: DensityMatrix,
    initial_belief: GaussianBelief,
    steady_from: f64,
    check_every: u64,
}

impl ResonatorStepper {
    pub fn new(s: &ResonatorScenario, dt: f64) -> Result<(Self, Option<ControlLaw>)> {
        s.validate()?;
        let osc = s.oscillator()?;
        let hbar = s.constants.hbar;
        let kappa = s.thermal() / (hbar * hbar);
        let control = osc.position.scaled(-1.0);
        let integrator = SmeIntegrator::new(&osc.hamiltonian, &osc.position, s.gamma, dt, s.constants)?
            .with_bath(kappa)?
            .with_control(&control)?;
        let model = s.model()?;
        let law = if s.feedback { Some(synthesize_lqg(&model, &s.cost()?)?) } else { None };
        let alpha = C64::new(s.initial_alpha, 0.0);
        let initial = DensityMatrix::from_pure(&coherent_state(alpha, s.levels))?;
        let x0 = (2.0 * hbar / (s.mass * s.omega)).sqrt() * s.initial_alpha;
        let initial_belief = GaussianBelief::coherent(x0, 0.0, s.mass, s.omega, hbar);
        let stepper = Self {
            osc,
            integrator,
            model,
            gain: law.as_ref().map(|l| l.gain),
            initial,
            initial_belief,
            steady_from: s.steady_from,
            check_every: 1,
        };
        Ok((stepper, law))
    }

    pub fn oscillator(&self) -> &Oscillator {
        &self.osc
    }

    fn control(&self, b: &GaussianBelief) -> f64 {
        self.gain.map_or(0.0, |k| -k.dot(&b.mean))
    }
}

impl Stepper for ResonatorStepper {
    type State = ResonatorTrajectory;

    fn initial_state(&self, _index: usize) -> Result<ResonatorTrajectory> {
        Ok(ResonatorTrajectory {
            sme: SmeState::new(&self.initial),
            belief: self.initial_belief,
            t: 0.0,
            energy_sum: 0.0,
            energy_samples: 0,
            max_leak: top_level_population(self.initial.matrix()),
        })
    }

    fn step(&self, s: &mut ResonatorTrajectory, dw: f64, _t: f64, dt: f64) -> Result<()> {
        let u = self.control(&s.belief);
        let mean = self.integrator.step(&mut s.sme, SmeNoise::Innovation(dw), u)?;
        let dr = dw / self.model.gamma.sqrt() + mean * dt;
        s.belief = kalman_bucy_step(&s.belief, &self.model, dr, dt, u)?;
        s.t += dt;
        if s.sme.steps() % self.check_every == 0 {
            let leak = top_level_population(s.sme.matrix());
            s.max_leak = s.max_leak.max(leak);
            if leak > crate::state::TRUNCATION_LEAK_TOL {
                return Err(Error::TruncationLeak { population: leak });
            }
        }
        if s.t >= self.steady_from - 1e-12 {
            s.energy_sum += s.energy(&self.osc);
            s.energy_samples += 1;
        }
        Ok(())
    }

    fn summarize(&self, s: &ResonatorTrajectory) -> Vec<f64> {
        let avg = if s.energy_samples > 0 { s.energy_sum / s.energy_samples as f64 } else { f64::NAN };
        vec![avg, s.max_leak]
    }
}

/// Co-simulates the conditioned oscillator and the Kalman–Bucy estimate driving `u = −K·x̂`.
///
/// The SME state plays the role of the true system; the filter is fed the
/// record it generates. The top-two-level population is checked every step.
pub fn run_resonator_cooling(s: &ResonatorScenario, config: &TrajectoryConfig) -> Result<ResonatorOutcome> {
    if s.steady_from > config.t_final {
        return Err(Error::InvalidParameter("steady window starts after the end of the run".into()));
    }
    let (stepper, law) = ResonatorStepper::new(s, config.dt)?;
    let osc = stepper.oscillator().clone();
    let observables = [
        Observable::new("energy", |t: &ResonatorTrajectory| t.energy(&osc)),
        Observable::new("mean_x", |t: &ResonatorTrajectory| t.sme.expect(&osc.position)),
    ];
    let res = run_ensemble(&stepper, config, &observables)?;
    let avgs: Vec<f64> = res.trajectories.iter().map(|t| t.values[0]).collect();
    let n = avgs.len() as f64;
    let steady = avgs.iter().sum::<f64>() / n;
    let var = if n > 1.0 { avgs.iter().map(|a| (a - steady).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let max_leak = res.trajectories.iter().map(|t| t.values[1]).fold(0.0, f64::max);
    Ok(ResonatorOutcome {
        energy: res.curve("energy").cloned().expect("registered"),
        mean_x: res.curve("mean_x").cloned().expect("registered"),
        times: res.times,
        steady_energy: steady,
        steady_energy_stderr: (var / n).sqrt(),
        predicted_energy: law.as_ref().map(|l| l.predicted_state_cost),
        predicted_cost: law.as_ref().map(|l| l.predicted_steady_cost),
        gain: law.as_ref().map(|l| [l.gain[0], l.gain[1]]),
        max_leak,
    })
}

/// Second moments `Σ` of the open-loop oscillator, `Σ̇ = AΣ + ΣAᵀ + D`, stepped with RK4.
pub fn open_loop_moments(model: &LinearMeasuredModel, sigma0: &Matrix2<f64>, t: f64, dt: f64) -> Matrix2<f64> {
    let f = |s: &Matrix2<f64>| model.a * s + s * model.a.transpose() + model.diffusion;
    let steps = (t / dt).ceil().max(1.0) as usize;
    let h = t / steps as f64;
    (0..steps).fold(*sigma0, |s, _| {
        let k1 = f(&s);
        let k2 = f(&(s + k1 * (0.5 * h)));
        let k3 = f(&(s + k2 * (0.5 * h)));
        let k4 = f(&(s + k3 * h));
        s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario() -> ResonatorScenario {
        ResonatorScenario {
            mass: 1.0,
            omega: 1.0,
            levels: 30,
            gamma: 1.0,
            control_weight: 0.01,
            feedback: true,
            bath: Some(ThermalBath { coupling: 0.05, n_bar: 10.0 }),
            initial_alpha: 0.0,
            steady_from: 0.5,
            constants: PhysicalConstants::default(),
        }
    }

    #[test]
    fn filter_tracks_sme_moments() {
        let s = scenario();
        let (stepper, _) = ResonatorStepper::new(&s, 1e-3).unwrap();
        let mut st = stepper.initial_state(0).unwrap();
        let mut noise = crate::engine::NoiseStream::new(4, 1e-3).unwrap();
        for k in 0..2000 {
            stepper.step(&mut st, noise.next_increment(), k as f64 * 1e-3, 1e-3).unwrap();
        }
        let x = st.sme.expect(&stepper.osc.position);
        let p = st.sme.expect(&stepper.osc.momentum);
        assert!((x - st.belief.mean[0]).abs() < 0.02, "{x} vs {}", st.belief.mean[0]);
        assert!((p - st.belief.mean[1]).abs() < 0.02, "{p} vs {}", st.belief.mean[1]);
    }

    #[test]
    fn hot_state_trips_leak_check() {
        let mut s = scenario();
        s.levels = 12;
        s.initial_alpha = 2.0;
        s.feedback = false;
        let cfg = TrajectoryConfig::new(1e-3, 2.0, 1, 1).unwrap();
        let err = run_resonator_cooling(&s, &cfg).unwrap_err();
        assert!(matches!(err.root(), Error::TruncationLeak { .. }), "{err}");
    }

    #[test]
    fn rejects_nonpositive_gamma() {
        let s = scenario().with_gamma(0.0);
        let cfg = TrajectoryConfig::new(1e-3, 1.0, 1, 1).unwrap();
        assert!(matches!(run_resonator_cooling(&s, &cfg), Err(Error::NonPositiveGamma(_))));
    }

    #[test]
    fn open_loop_moments_grow_linearly_in_energy() {
        let model = LinearMeasuredModel::measured_oscillator(1.0, 1.0, 2.0, 1.0, 0.3).unwrap();
        let s0 = Matrix2::new(0.5, 0.0, 0.0, 0.5);
        let s1 = open_loop_moments(&model, &s0, 3.0, 1e-3);
        let e = |s: &Matrix2<f64>| 0.5 * (s[(0, 0)] + s[(1, 1)]);
        // d⟨H⟩/dt = D_pp / 2m
        assert!((e(&s1) - e(&s0) - 3.0 * (0.5 + 0.3) / 2.0).abs() < 1e-9);
    }
}
