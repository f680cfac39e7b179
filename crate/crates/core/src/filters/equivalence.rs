use nalgebra::{Matrix2, Vector2};
use serde::Serialize;

use super::kalman::{kalman_bucy_step, GaussianBelief, LinearMeasuredModel};
use super::sme::{SmeIntegrator, SmeNoise, SmeState};
use crate::engine::NoiseStream;
use crate::error::{Error, Result};
use crate::lqg::steady_filter_covariance;
use crate::state::{
    build_oscillator, coherent_state, BasisSpec, DensityMatrix, ObservableOperator, PhysicalConstants, C64,
};

/// Measured oscillator followed by both the SME on a Fock basis and the
/// Kalman–Bucy filter, fed from one noise stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FilterComparisonSetup {
    pub mass: f64,
    pub omega: f64,
    pub gamma: f64,
    pub levels: usize,
    pub initial_x: f64,
    pub initial_p: f64,
    pub dt: f64,
    /// Run length in relaxation times.
    pub duration: f64,
    /// Agreement is measured from this many relaxation times on.
    pub settle: f64,
    pub record_every: usize,
    pub seed: u64,
    pub constants: PhysicalConstants,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FilterComparison {
    pub relaxation_time: f64,
    pub times: Vec<f64>,
    pub sme_mean: Vec<[f64; 2]>,
    pub kb_mean: Vec<[f64; 2]>,
    /// `[Vxx, Vxp, Vpp]`, symmetrized.
    pub sme_cov: Vec<[f64; 3]>,
    pub kb_cov: Vec<[f64; 3]>,
    /// RMS over the comparison window of the mean offsets in units of the conditional widths.
    pub mean_rms_error: f64,
    /// RMS over the window of `|ΔV_ij| / √(V_ii V_jj)`.
    pub cov_rms_error: f64,
    pub max_leak: f64,
}

/// Slowest decay time of the steady filter error dynamics `A − γVccᵀ`.
pub fn relaxation_time(model: &LinearMeasuredModel) -> Result<f64> {
    let v = steady_filter_covariance(model)?;
    let m = model.a - model.gain(&v) * model.c.transpose();
    let (tr, det) = (m.trace(), m.determinant());
    let disc = tr * tr / 4.0 - det;
    let slowest = if disc >= 0.0 { tr / 2.0 + disc.sqrt() } else { tr / 2.0 };
    if !(slowest < 0.0) {
        return Err(Error::InvalidParameter("filter error dynamics are not stable".into()));
    }
    Ok(-1.0 / slowest)
}

struct Moments {
    x: ObservableOperator,
    p: ObservableOperator,
    xx: ObservableOperator,
    pp: ObservableOperator,
    xp: ObservableOperator,
}

impl Moments {
    fn eval(&self, s: &SmeState) -> ([f64; 2], [f64; 3]) {
        let (x, p) = (s.expect(&self.x), s.expect(&self.p));
        let cov = [s.expect(&self.xx) - x * x, s.expect(&self.xp) - x * p, s.expect(&self.pp) - p * p];
        ([x, p], cov)
    }
}

pub fn compare_sme_kalman(setup: &FilterComparisonSetup) -> Result<FilterComparison> {
    let hbar = setup.constants.hbar;
    let osc = build_oscillator(
        &BasisSpec::Fock { n_max: setup.levels, mass: setup.mass, omega: setup.omega },
        setup.constants,
    )?;
    let model = LinearMeasuredModel::measured_oscillator(setup.mass, setup.omega, setup.gamma, hbar, 0.0)?;
    let tau = relaxation_time(&model)?;
    if !(setup.duration > setup.settle && setup.settle >= 0.0) {
        return Err(Error::InvalidParameter("comparison window is empty".into()));
    }
    let integ = SmeIntegrator::new(&osc.hamiltonian, &osc.position, setup.gamma, setup.dt, setup.constants)?
        .with_leak_check(true);
    let x_scale = (hbar / (2.0 * setup.mass * setup.omega)).sqrt();
    let p_scale = (hbar * setup.mass * setup.omega / 2.0).sqrt();
    let alpha = C64::new(setup.initial_x / (2.0 * x_scale), setup.initial_p / (2.0 * p_scale));
    let mut sme = SmeState::new(&DensityMatrix::from_pure(&coherent_state(alpha, setup.levels))?);
    let (xm, pm) = (osc.position.matrix(), osc.momentum.matrix());
    let xp = (xm * pm + pm * xm) * C64::new(0.5, 0.0);
    let moments = Moments {
        x: osc.position.clone(),
        p: osc.momentum.clone(),
        xx: ObservableOperator::from_hermitian_part("XX", xm * xm),
        pp: ObservableOperator::from_hermitian_part("PP", pm * pm),
        xp: ObservableOperator::from_hermitian_part("XP", xp),
    };
    let (m0, c0) = moments.eval(&sme);
    let mut kb = GaussianBelief::new(Vector2::new(m0[0], m0[1]), Matrix2::new(c0[0], c0[1], c0[1], c0[2]))?;
    let mut noise = NoiseStream::new(setup.seed, setup.dt)?;
    let n_steps = (setup.duration * tau / setup.dt).ceil() as usize;
    let every = setup.record_every.max(1);

    let mut out = FilterComparison {
        relaxation_time: tau,
        times: vec![0.0],
        sme_mean: vec![m0],
        kb_mean: vec![m0],
        sme_cov: vec![c0],
        kb_cov: vec![c0],
        mean_rms_error: 0.0,
        cov_rms_error: 0.0,
        max_leak: crate::state::top_level_population(sme.matrix()),
    };
    for k in 1..=n_steps {
        let dw = noise.next_increment();
        let mean_x = integ.step(&mut sme, SmeNoise::Innovation(dw), 0.0)?;
        let dr = mean_x * setup.dt + dw / setup.gamma.sqrt();
        kb = kalman_bucy_step(&kb, &model, dr, setup.dt, 0.0)?;
        out.max_leak = out.max_leak.max(crate::state::top_level_population(sme.matrix()));
        if k % every == 0 || k == n_steps {
            let (m, c) = moments.eval(&sme);
            out.times.push(k as f64 * setup.dt);
            out.sme_mean.push(m);
            out.sme_cov.push(c);
            out.kb_mean.push([kb.mean[0], kb.mean[1]]);
            out.kb_cov.push([kb.cov[(0, 0)], kb.cov[(0, 1)], kb.cov[(1, 1)]]);
        }
    }

    let from = setup.settle * tau;
    let (mut se_mean, mut se_cov, mut n) = (0.0, 0.0, 0usize);
    for i in 0..out.times.len() {
        if out.times[i] < from - 1e-12 {
            continue;
        }
        let (sm, km, sc, kc) = (out.sme_mean[i], out.kb_mean[i], out.sme_cov[i], out.kb_cov[i]);
        let (sx, sp) = (kc[0].sqrt(), kc[2].sqrt());
        se_mean += ((sm[0] - km[0]) / sx).powi(2) + ((sm[1] - km[1]) / sp).powi(2);
        se_cov += ((sc[0] - kc[0]) / kc[0]).powi(2)
            + ((sc[1] - kc[1]) / (sx * sp)).powi(2)
            + ((sc[2] - kc[2]) / kc[2]).powi(2);
        n += 1;
    }
    out.mean_rms_error = (se_mean / (2 * n) as f64).sqrt();
    out.cov_rms_error = (se_cov / (3 * n) as f64).sqrt();
    Ok(out)
}
