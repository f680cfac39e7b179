use nalgebra::Matrix2;
use serde::Serialize;

use crate::engine::{run_ensemble, EnsembleResult, Observable, Stepper, TrajectoryConfig, Weighting};
use crate::error::{Error, Result};
use crate::filters::sme::measurement_polynomial;
use crate::filters::sme_step;
use crate::state::{CMatrix, DensityMatrix, ObservableOperator, PhysicalConstants, C64};

/// Feedback applied while measuring `σz` on a qubit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum QubitFeedbackPolicy {
    Fixed,
    /// Rotation about `σy` toward the `x` axis; `None` is an instantaneous rotation.
    RapidPurification {
        rate: Option<f64>,
    },
}

impl QubitFeedbackPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            QubitFeedbackPolicy::RapidPurification { rate: Some(r) } if !(r > 0.0) => {
                Err(Error::InvalidParameter(format!("feedback rate must be positive, got {r}")))
            }
            _ => Ok(()),
        }
    }
}

/// How trajectories are sampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Sampling {
    /// Records drawn from their physical distribution.
    Physical,
    /// Records drawn as pure Wiener noise and weighted by their likelihood
    /// ratio, averaged as `Σ w f / N`. This keeps the rare, slowly purifying
    /// records well represented at late times.
    Reference,
}

/// Angle of the `σy` rotation that takes `(x, z)` onto the positive `x` axis.
fn alignment_angle(x: f64, z: f64) -> f64 {
    if x == 0.0 && z == 0.0 {
        0.0
    } else {
        z.atan2(x)
    }
}

fn ry(angle: f64) -> Matrix2<C64> {
    let (s, c) = (0.5 * angle).sin_cos();
    Matrix2::new(C64::new(c, 0.0), C64::new(-s, 0.0), C64::new(s, 0.0), C64::new(c, 0.0))
}

fn bloch_xz(rho: &Matrix2<C64>) -> (f64, f64) {
    (2.0 * rho[(1, 0)].re, (rho[(0, 0)] - rho[(1, 1)]).re)
}

/// One step of the measured qubit under `policy`.
///
/// `Fixed` is the SME step with `X = σz`, `H = 0`. The instantaneous policy
/// follows it with the rotation about `σy` that puts the Bloch vector on the
/// `+x` axis (length unchanged; a zero vector is left alone). A finite rate
/// adds `H = ħuσy/2` during the step with `u` clamped to `±rate`.
pub fn rapid_purify_step(
    rho: &DensityMatrix,
    policy: QubitFeedbackPolicy,
    gamma: f64,
    dw: f64,
    dt: f64,
    constants: PhysicalConstants,
) -> Result<DensityMatrix> {
    policy.validate()?;
    let [x, _, z] = rho.bloch()?;
    let sz = ObservableOperator::pauli_z();
    let h = match policy {
        QubitFeedbackPolicy::RapidPurification { rate: Some(rate) } => {
            let u = (alignment_angle(x, z) / dt).clamp(-rate, rate);
            ObservableOperator::pauli_y().scaled(0.5 * constants.hbar * u)
        }
        _ => sz.scaled(0.0),
    };
    let (next, _) = sme_step(rho, &h, &sz, gamma, dw, dt, constants)?;
    if let QubitFeedbackPolicy::RapidPurification { rate: None } = policy {
        let [x, _, z] = next.bloch()?;
        let u = ry(alignment_angle(x, z));
        let cu = CMatrix::from_fn(2, 2, |i, j| u[(i, j)]);
        return next.transformed(&cu);
    }
    Ok(next)
}

/// Qubit trajectory state used by the ensemble runs.
#[derive(Clone, Debug)]
pub struct QubitTrajectory {
    pub rho: Matrix2<C64>,
    pub log_weight: f64,
    pub hit_time: Option<f64>,
    t: f64,
}

impl QubitTrajectory {
    pub fn new(rho: &DensityMatrix) -> Result<Self> {
        let m = rho.matrix();
        if m.nrows() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, found: m.nrows() });
        }
        Ok(Self {
            rho: Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]),
            log_weight: 0.0,
            hit_time: None,
            t: 0.0,
        })
    }

    /// `1 − r² = 4 det ρ`.
    pub fn linear_impurity(&self) -> f64 {
        let r = &self.rho;
        (4.0 * (r[(0, 0)].re * r[(1, 1)].re - r[(0, 1)].norm_sqr())).max(0.0)
    }

    pub fn purity(&self) -> f64 {
        1.0 - 0.5 * self.linear_impurity()
    }

    /// Entropy from the smaller eigenvalue `λ = (1 − r)/2`, computed without cancellation.
    pub fn entropy(&self) -> f64 {
        let d = 0.25 * self.linear_impurity();
        let small = 2.0 * d / (1.0 + (1.0 - 4.0 * d).max(0.0).sqrt());
        let big = 1.0 - small;
        let term = |l: f64| if l > 0.0 { -l * l.ln() } else { 0.0 };
        term(small) + term(big)
    }

    pub fn bloch_z(&self) -> f64 {
        bloch_xz(&self.rho).1
    }
}

/// Ensemble stepper for the purification experiments.
pub struct PurificationStepper {
    pub policy: QubitFeedbackPolicy,
    pub gamma: f64,
    pub sampling: Sampling,
    pub target_purity: f64,
    pub initial: DensityMatrix,
}

impl Stepper for PurificationStepper {
    type State = QubitTrajectory;

    fn initial_state(&self, _index: usize) -> Result<QubitTrajectory> {
        QubitTrajectory::new(&self.initial)
    }

    fn step(&self, s: &mut QubitTrajectory, dw: f64, _t: f64, dt: f64) -> Result<()> {
        let sg = self.gamma.sqrt();
        let (x, z) = bloch_xz(&s.rho);
        let dy = match self.sampling {
            Sampling::Physical => dw + sg * z * dt,
            Sampling::Reference => dw,
        };
        let one = C64::new(1.0, 0.0);
        let f = measurement_polynomial(self.gamma, dy, dt);
        let th = match self.policy {
            QubitFeedbackPolicy::RapidPurification { rate: Some(rate) } => {
                0.5 * (alignment_angle(x, z) / dt).clamp(-rate, rate) * dt
            }
            _ => 0.0,
        };
        // M = f(σz)·e^{−iθσy}; σz² = I folds the polynomial onto its ±1 values

        let (sn, cs) = th.sin_cos();
        let (p, q) = (f[0] + f[1] + f[2] + f[3] + f[4], f[0] - f[1] + f[2] - f[3] + f[4]);
        let m = Matrix2::new(one * (p * cs), -one * (p * sn), one * (q * sn), one * (q * cs));
        let mut next = m * s.rho * m.adjoint();
        let tr = (next[(0, 0)] + next[(1, 1)]).re;
        if !(tr > 0.0 && tr.is_finite()) {
            return Err(Error::InvalidState(format!("trace {tr} after step")));
        }
        if self.sampling == Sampling::Reference {
            s.log_weight += tr.ln();
        }
        next /= C64::new(tr, 0.0);
        let off = 0.5 * (next[(0, 1)] + next[(1, 0)].conj());
        next[(0, 1)] = off;
        next[(1, 0)] = off.conj();
        next[(0, 0)].im = 0.0;
        next[(1, 1)].im = 0.0;
        if let QubitFeedbackPolicy::RapidPurification { rate: None } = self.policy {
            let (x, z) = bloch_xz(&next);
            let u = ry(alignment_angle(x, z));
            next = u * next * u.adjoint();
        }
        let before = s.purity();
        s.rho = next;
        let after = s.purity();
        if s.hit_time.is_none() && after >= self.target_purity {
            let frac =
                if after > before { ((self.target_purity - before) / (after - before)).clamp(0.0, 1.0) } else { 1.0 };
            s.hit_time = Some(s.t + frac * dt);
        }
        s.t += dt;
        Ok(())
    }

    fn log_weight(&self, s: &QubitTrajectory) -> f64 {
        s.log_weight
    }

    fn weighting(&self) -> Weighting {
        match self.sampling {
            Sampling::Physical => Weighting::SelfNormalized,
            Sampling::Reference => Weighting::UnitMean,
        }
    }

    fn summarize(&self, s: &QubitTrajectory) -> Vec<f64> {
        vec![s.hit_time.unwrap_or(f64::NAN)]
    }
}

/// Decay-rate estimates over the final half of a curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DecayFit {
    /// `−d ln y / dt` from a straight-line fit.
    pub linear: f64,
    /// `κ` from `ln y = a − κt + b ln t`, which absorbs power-law prefactors.
    pub corrected: f64,
    /// Fitted power `b` of the corrected fit.
    pub power: f64,
}

/// Fits the decay of `values` over points with `t ≥ from · t_max`.
pub fn fit_decay(times: &[f64], values: &[f64], from: f64) -> Result<DecayFit> {
    let t_max = times.iter().cloned().fold(0.0, f64::max);
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, v)| **t >= from * t_max && **t > 0.0 && **v > 0.0)
        .map(|(t, v)| (*t, v.ln()))
        .collect();
    if pts.len() < 4 {
        return Err(Error::InvalidParameter("too few positive points for a decay fit".into()));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sty: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let linear = -sty / stt;
    // least squares on [1, t, ln t]
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut aty = nalgebra::Vector3::<f64>::zeros();
    for &(t, y) in &pts {
        let row = nalgebra::Vector3::new(1.0, t, t.ln());
        ata += row * row.transpose();
        aty += row * y;
    }
    let coef = ata.lu().solve(&aty).ok_or_else(|| Error::NoConvergence("singular decay fit".into()))?;
    Ok(DecayFit { linear, corrected: -coef[1], power: coef[2] })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PurificationStats {
    pub policy: QubitFeedbackPolicy,
    pub sampling: Sampling,
    pub times: Vec<f64>,
    pub avg_entropy: Vec<f64>,
    pub entropy_stderr: Vec<f64>,
    pub entropy_variance: Vec<f64>,
    pub avg_log_impurity: Vec<f64>,
    pub avg_impurity: Vec<f64>,
    pub avg_purity: Vec<f64>,
    pub purity_stderr: Vec<f64>,
    /// Physical sampling only; empty under reference sampling.
    pub hitting_times: Vec<f64>,
    pub entropy_decay: DecayFit,
    pub impurity_decay: DecayFit,
    pub effective_sample_size: f64,
}

impl PurificationStats {
    pub fn mean_hitting_time(&self) -> (f64, f64) {
        let n = self.hitting_times.len() as f64;
        let mean = self.hitting_times.iter().sum::<f64>() / n;
        let var = self.hitting_times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }
}

/// Runs an ensemble from the maximally mixed state and collects the purification statistics.
///
/// Under physical sampling every trajectory must reach `target_purity` by the
/// end of the run, otherwise [`Error::TargetNotReached`] is returned.
pub fn purification_experiment(
    policy: QubitFeedbackPolicy,
    gamma: f64,
    config: &TrajectoryConfig,
    target_purity: f64,
    sampling: Sampling,
) -> Result<PurificationStats> {
    policy.validate()?;
    if !(gamma > 0.0) {
        return Err(Error::NonPositiveGamma(gamma));
    }
    if !(target_purity > 0.5 && target_purity < 1.0) {
        return Err(Error::InvalidParameter(format!("target purity must lie in (0.5, 1), got {target_purity}")));
    }
    let stepper =
        PurificationStepper { policy, gamma, sampling, target_purity, initial: DensityMatrix::maximally_mixed(2) };
    let observables = [
        Observable::new("entropy", |s: &QubitTrajectory| s.entropy()),
        Observable::new("log_impurity", |s: &QubitTrajectory| (0.5 * s.linear_impurity()).max(1e-300).ln()),
        Observable::new("impurity", |s: &QubitTrajectory| 0.5 * s.linear_impurity()),
        Observable::new("purity", |s: &QubitTrajectory| s.purity()),
    ];
    let res: EnsembleResult = run_ensemble(&stepper, config, &observables)?;
    let curve = |name: &str| res.curve(name).expect("registered observable");
    let entropy = curve("entropy");
    let impurity = curve("impurity");
    let w = res.normalized_weights();
    let ess = 1.0 / w.iter().map(|x| x * x).sum::<f64>();
    let hitting_times: Vec<f64> = match sampling {
        Sampling::Physical => {
            let hits: Vec<f64> = res.trajectories.iter().map(|t| t.values[0]).collect();
            let unreached = hits.iter().filter(|h| h.is_nan()).count();
            if unreached > 0 {
                return Err(Error::TargetNotReached { unreached, total: hits.len() });
            }
            hits
        }
        Sampling::Reference => Vec::new(),
    };
    Ok(PurificationStats {
        policy,
        sampling,
        entropy_decay: fit_decay(&res.times, &entropy.mean, 0.5)?,
        impurity_decay: fit_decay(&res.times, &impurity.mean, 0.5)?,
        times: res.times.clone(),
        avg_entropy: entropy.mean.clone(),
        entropy_stderr: entropy.stderr.clone(),
        entropy_variance: entropy.variance.clone(),
        avg_log_impurity: curve("log_impurity").mean.clone(),
        avg_impurity: impurity.mean.clone(),
        avg_purity: curve("purity").mean.clone(),
        purity_stderr: curve("purity").stderr.clone(),
        hitting_times,
        effective_sample_size: ess,
    })
}

/// Mean time for the unassisted measurement to reach purity `p` from the mixed state.
///
/// With `u = atanh z`, `du = √γ dW + γ tanh(u) dt`; the exit time of
/// `|u| < a`, `a = atanh√(2p − 1)`, has mean `(a/γ) tanh a`.
pub fn fixed_mean_hitting_time(purity: f64, gamma: f64) -> f64 {
    let a = (2.0 * purity - 1.0).sqrt().atanh();
    a * a.tanh() / gamma
}

/// Deterministic time for the instantaneous policy: `1 − r² = e^{−γt}`.
pub fn adaptive_hitting_time(purity: f64, gamma: f64) -> f64 {
    -(2.0 * (1.0 - purity)).ln() / gamma
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::NoiseStream;

    #[test]
    fn rotation_is_noop_on_mixed_state() {
        let rho = DensityMatrix::maximally_mixed(2);
        let out = rapid_purify_step(
            &rho,
            QubitFeedbackPolicy::RapidPurification { rate: None },
            1.0,
            0.0,
            1e-3,
            PhysicalConstants::default(),
        )
        .unwrap();
        assert!((out.matrix() - rho.matrix()).norm() < 1e-15);
    }

    #[test]
    fn rotation_preserves_bloch_length_and_lands_on_x_axis() {
        let c = PhysicalConstants::default();
        let mut rho = DensityMatrix::from_bloch([0.1, 0.0, 0.4]).unwrap();
        let mut noise = NoiseStream::new(8, 1e-3).unwrap();
        for _ in 0..200 {
            let dw = noise.next_increment();
            let (measured, _) = sme_step(
                &rho,
                &ObservableOperator::pauli_z().scaled(0.0),
                &ObservableOperator::pauli_z(),
                1.0,
                dw,
                1e-3,
                c,
            )
            .unwrap();
            let [x, y, z] = measured.bloch().unwrap();
            let len = (x * x + y * y + z * z).sqrt();
            let cu = {
                let u = ry(alignment_angle(x, z));
                CMatrix::from_fn(2, 2, |i, j| u[(i, j)])
            };
            let rotated = measured.transformed(&cu).unwrap();
            let [x2, y2, z2] = rotated.bloch().unwrap();
            assert!(((x2 * x2 + y2 * y2 + z2 * z2).sqrt() - len).abs() <= 1e-12);
            assert!(z2.abs() < 1e-12 && x2 >= 0.0);
            rho = rapid_purify_step(&rho, QubitFeedbackPolicy::RapidPurification { rate: None }, 1.0, dw, 1e-3, c)
                .unwrap();
            assert!((rho.matrix() - rotated.matrix()).norm() < 1e-12);
        }
    }

    #[test]
    fn fast_stepper_matches_public_step() {
        let c = PhysicalConstants::default();
        for policy in [
            QubitFeedbackPolicy::Fixed,
            QubitFeedbackPolicy::RapidPurification { rate: None },
            QubitFeedbackPolicy::RapidPurification { rate: Some(30.0) },
        ] {
            let stepper = PurificationStepper {
                policy,
                gamma: 2.0,
                sampling: Sampling::Physical,
                target_purity: 0.99,
                initial: DensityMatrix::from_bloch([0.2, 0.0, 0.3]).unwrap(),
            };
            let mut fast = stepper.initial_state(0).unwrap();
            let mut rho = stepper.initial.clone();
            let mut noise = NoiseStream::new(17, 1e-3).unwrap();
            for k in 0..1000 {
                let dw = noise.next_increment();
                stepper.step(&mut fast, dw, k as f64 * 1e-3, 1e-3).unwrap();
                rho = rapid_purify_step(&rho, policy, 2.0, dw, 1e-3, c).unwrap();
            }
            let slow = rho.matrix();
            let diff: f64 = (0..2)
                .flat_map(|i| (0..2).map(move |j| (i, j)))
                .map(|(i, j)| (fast.rho[(i, j)] - slow[(i, j)]).norm())
                .fold(0.0, f64::max);
            assert!(diff < 1e-9, "{policy:?}: {diff}");
        }
    }

    #[test]
    fn entropy_helpers_agree_with_eigenvalues() {
        let rho = DensityMatrix::from_bloch([0.3, 0.0, -0.5]).unwrap();
        let t = QubitTrajectory::new(&rho).unwrap();
        assert!((t.entropy() - crate::state::von_neumann_entropy(&rho)).abs() < 1e-12);
        assert!((t.purity() - crate::state::purity(&rho)).abs() < 1e-12);
    }

    #[test]
    fn decay_fit_recovers_exponent_and_power() {
        let times: Vec<f64> = (1..200).map(|k| k as f64 * 0.05).collect();
        let values: Vec<f64> = times.iter().map(|t| 3.0 * t.powf(-0.5) * (-0.7 * t).exp()).collect();
        let fit = fit_decay(&times, &values, 0.5).unwrap();
        assert!((fit.corrected - 0.7).abs() < 1e-9);
        assert!((fit.power + 0.5).abs() < 1e-9);
        assert!(fit.linear > 0.7);
    }

    #[test]
    fn hitting_time_formulas() {
        assert!((adaptive_hitting_time(0.99, 1.0) - 50f64.ln()).abs() < 1e-12);
        let a = 0.98f64.sqrt().atanh();
        assert!((fixed_mean_hitting_time(0.99, 2.0) - a * a.tanh() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_arguments() {
        let cfg = TrajectoryConfig::new(0.01, 1.0, 1, 2).unwrap();
        assert!(purification_experiment(QubitFeedbackPolicy::Fixed, 1.0, &cfg, 0.4, Sampling::Physical).is_err());
        assert!(purification_experiment(
            QubitFeedbackPolicy::RapidPurification { rate: Some(-1.0) },
            1.0,
            &cfg,
            0.9,
            Sampling::Physical
        )
        .is_err());
    }
}
