use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::Serialize;

use crate::engine::{run_ensemble, Curve, Observable, Stepper, TrajectoryConfig};
use crate::error::{Error, Result};
use crate::state::{build_lattice, BasisSpec, CVector, DensityMatrix, Lattice, PhysicalConstants, C64};

/// Lattice depth currently applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Level {
    Low,
    High,
}

/// Switching rule on the indicator `g = d⟨cos²kX⟩/dt`.
///
/// With `H = P²/2m + V₀cos²(kX)` a depth change `ΔV` shifts the energy by
/// `ΔV⟨cos²kX⟩`. Raising the lattice while the atom climbs out of a well
/// (`g > h`) and lowering it while it falls back (`g < −h`) removes energy on
/// every half oscillation. Inside the deadband the level is kept.
pub fn decide_level(g: f64, current: Level, hysteresis: f64) -> Level {
    if g > hysteresis {
        Level::High
    } else if g < -hysteresis {
        Level::Low
    } else {
        current
    }
}

/// `d⟨cos²kX⟩/dt = (i/ħ)Tr(ρ[T, cos²kX])` for a grid state.
pub fn lowering_indicator(rho: &DensityMatrix, lattice: &Lattice, constants: PhysicalConstants) -> Result<f64> {
    crate::state::check_dims(lattice.grid.len(), rho.dim())?;
    let t = lattice.kinetic.matrix();
    let v = lattice.potential_shape.matrix();
    let comm = t * v - v * t;
    let val = crate::state::trace_product(rho.matrix(), &comm) * C64::new(0.0, 1.0 / constants.hbar);
    Ok(val.re)
}

/// Bang-bang choice of lattice depth for the state `rho`; see [`decide_level`].
pub fn bang_bang_decision(
    rho: &DensityMatrix,
    lattice: &Lattice,
    current: Level,
    hysteresis: f64,
    constants: PhysicalConstants,
) -> Result<Level> {
    Ok(decide_level(lowering_indicator(rho, lattice, constants)?, current, hysteresis))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum AtomInitial {
    /// Equal mixture of the `n` lowest eigenstates of the low lattice.
    LowestMixture(usize),
    /// A single eigenstate of the low lattice.
    Eigenstate(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AtomLatticeScenario {
    pub v_low: f64,
    pub v_high: f64,
    pub k: f64,
    pub grid: BasisSpec,
    pub gamma: f64,
    pub hysteresis: f64,
    pub initial: AtomInitial,
    /// Steps between spectral-tail checks.
    pub resolution_check_every: usize,
    pub constants: PhysicalConstants,
}

impl AtomLatticeScenario {
    pub fn validate(&self) -> Result<()> {
        self.constants.validate()?;
        if !(0.0 < self.v_low && self.v_low < self.v_high) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < v_low < v_high, got {} and {}",
                self.v_low, self.v_high
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::NonPositiveGamma(self.gamma));
        }
        if !(self.hysteresis >= 0.0) {
            return Err(Error::InvalidParameter(format!("hysteresis must be non-negative, got {}", self.hysteresis)));
        }
        match self.initial {
            AtomInitial::LowestMixture(0) => Err(Error::InvalidParameter("mixture needs at least one state".into())),
            _ => Ok(()),
        }
    }
}

/// Outcome label of a finished trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum OutcomeLabel {
    Ground,
    FirstExcited,
    Other,
}

pub const LABEL_THRESHOLD: f64 = 0.9;

pub fn label_for(ground_pop: f64, excited_pop: f64) -> OutcomeLabel {
    if ground_pop > LABEL_THRESHOLD {
        OutcomeLabel::Ground
    } else if excited_pop > LABEL_THRESHOLD {
        OutcomeLabel::FirstExcited
    } else {
        OutcomeLabel::Other
    }
}

/// Tail weight in the top quarter of the momentum grid above which the grid is too coarse.
pub const SPECTRAL_TAIL_TOL: f64 = 1e-6;

/// Low-rank state `ρ = Σ_j |φ_j⟩⟨φ_j|` on the grid, stored row-major by component.
#[derive(Clone, Debug)]
pub struct FactoredState {
    n: usize,
    comps: Vec<C64>,
}

impl FactoredState {
    pub fn new(vectors: &[CVector], weights: &[f64]) -> Result<Self> {
        let n = vectors.first().map_or(0, |v| v.len());
        if vectors.len() != weights.len() || n == 0 {
            return Err(Error::InvalidState("need matching, non-empty vectors and weights".into()));
        }
        let total: f64 = weights.iter().sum();
        let mut comps = Vec::with_capacity(n * vectors.len());
        for (v, &w) in vectors.iter().zip(weights) {
            crate::state::check_dims(n, v.len())?;
            if w < 0.0 {
                return Err(Error::InvalidState("negative mixture weight".into()));
            }
            let s = (w / total).sqrt() / v.norm();
            comps.extend(v.iter().map(|z| z * s));
        }
        Ok(Self { n, comps })
    }

    pub fn rank(&self) -> usize {
        self.comps.len() / self.n
    }

    pub fn component(&self, j: usize) -> &[C64] {
        &self.comps[j * self.n..(j + 1) * self.n]
    }

    pub fn density(&self) -> Result<DensityMatrix> {
        let mut m = crate::state::CMatrix::zeros(self.n, self.n);
        for j in 0..self.rank() {
            let v = CVector::from_column_slice(self.component(j));
            m += &v * v.adjoint();
        }
        DensityMatrix::new(m)
    }

    fn expect_diag(&self, f: &[f64]) -> f64 {
        self.comps.chunks(self.n).map(|c| c.iter().zip(f).map(|(z, f)| z.norm_sqr() * f).sum::<f64>()).sum()
    }

    /// `Σ_j |⟨e|φ_j⟩|²`.
    pub fn population(&self, e: &CVector) -> f64 {
        self.comps
            .chunks(self.n)
            .map(|c| c.iter().zip(e.iter()).map(|(z, e)| e.conj() * z).sum::<C64>().norm_sqr())
            .sum()
    }

    pub fn purity(&self) -> f64 {
        let r = self.rank();
        let mut p = 0.0;
        for a in 0..r {
            for b in 0..r {
                let o: C64 = self.component(a).iter().zip(self.component(b)).map(|(x, y)| x.conj() * y).sum();
                p += o.norm_sqr();
            }
        }
        p
    }

    /// Rotates to orthogonal components and drops those carrying less than `tol` of the trace.
    /// The represented state changes by at most the dropped weight.
    pub fn compress(&mut self, tol: f64) {
        let r = self.rank();
        if r <= 1 {
            return;
        }
        let gram = crate::state::CMatrix::from_fn(r, r, |a, b| {
            self.component(a).iter().zip(self.component(b)).map(|(x, y)| x.conj() * y).sum()
        });
        let eig = nalgebra::SymmetricEigen::new(gram);
        let total: f64 = eig.eigenvalues.iter().sum();
        let keep: Vec<usize> = (0..r).filter(|&i| eig.eigenvalues[i] > tol * total).collect();
        let mut comps = vec![C64::new(0.0, 0.0); keep.len() * self.n];
        for (slot, &i) in keep.iter().enumerate() {
            let out = &mut comps[slot * self.n..(slot + 1) * self.n];
            for a in 0..r {
                let w = eig.eigenvectors[(a, i)];
                for (o, z) in out.iter_mut().zip(self.component(a)) {
                    *o += z * w;
                }
            }
        }
        self.comps = comps;
    }

    fn normalize(&mut self) -> Result<f64> {
        let tr: f64 = self.comps.iter().map(|z| z.norm_sqr()).sum();
        if !(tr > 0.0 && tr.is_finite()) {
            return Err(Error::InvalidState(format!("trace {tr} after step")));
        }
        let s = 1.0 / tr.sqrt();
        self.comps.iter_mut().for_each(|z| *z *= s);
        Ok(tr)
    }
}

const COMPRESS_EVERY: usize = 200;
const COMPRESS_TOL: f64 = 1e-14;

/// Precomputed split-step factors for one scenario.
pub struct AtomModel {
    scenario: AtomLatticeScenario,
    lattice: Lattice,
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    shape: Vec<f64>,
    slope: Vec<f64>,
    /// `ħk_j/m` on the FFT grid.
    velocity: Vec<f64>,
    kinetic_energy: Vec<f64>,
    reflect: Vec<usize>,
    low_states: Vec<CVector>,
    initial: FactoredState,
    dt: f64,
    kin_phase: Vec<C64>,
    half_low: Vec<C64>,
    half_high: Vec<C64>,
}

impl AtomModel {
    pub fn new(s: &AtomLatticeScenario, dt: f64) -> Result<Self> {
        s.validate()?;
        let lattice = build_lattice(s.v_low, s.k, &s.grid, s.constants)?;
        lattice.grid.check_symmetric()?;
        let n = lattice.grid.len();
        let hbar = s.constants.hbar;
        let m = lattice.grid.mass();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let shape = lattice.shape_values();
        let slope = lattice.shape_slope_values();
        let ks = lattice.grid.wavenumbers().to_vec();
        let nyq = n / 2;
        let velocity: Vec<f64> =
            ks.iter().enumerate().map(|(j, k)| if n % 2 == 0 && j == nyq { 0.0 } else { hbar * k / m }).collect();
        let kinetic_energy: Vec<f64> = ks.iter().map(|k| hbar * hbar * k * k / (2.0 * m)).collect();
        let kin_phase = kinetic_energy.iter().map(|e| C64::from_polar(1.0, -e * dt / hbar)).collect();
        let half = |v0: f64| shape.iter().map(|c| C64::from_polar(1.0, -v0 * c * dt / (2.0 * hbar))).collect();
        let reflect = (0..n).map(|j| lattice.grid.reflect_index(j)).collect();
        let (_, states) = lattice.eigenstates();
        let initial = match s.initial {
            AtomInitial::LowestMixture(r) => {
                if r > states.len() {
                    return Err(Error::InvalidParameter(format!("grid has only {} states", states.len())));
                }
                FactoredState::new(&states[..r], &vec![1.0; r])?
            }
            AtomInitial::Eigenstate(j) => {
                let v = states.get(j).ok_or_else(|| Error::InvalidParameter(format!("no eigenstate {j}")))?;
                FactoredState::new(std::slice::from_ref(v), &[1.0])?
            }
        };
        Ok(Self {
            half_low: half(s.v_low),
            half_high: half(s.v_high),
            scenario: s.clone(),
            lattice,
            n,
            fwd,
            inv,
            shape,
            slope,
            velocity,
            kinetic_energy,
            reflect,
            low_states: states.into_iter().take(2).collect(),
            initial,
            dt,
            kin_phase,
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    /// `g = Σ_j Re⟨φ_j| c′(X) P/m |φ_j⟩ = d⟨cos²kX⟩/dt`.
    pub fn indicator(&self, st: &FactoredState, buf: &mut [C64]) -> f64 {
        let inv_n = 1.0 / self.n as f64;
        let mut g = 0.0;
        for c in st.comps.chunks(self.n) {
            buf.copy_from_slice(c);
            self.fwd.process(buf);
            buf.iter_mut().zip(&self.velocity).for_each(|(z, v)| *z *= v * inv_n);
            self.inv.process(buf);
            g += c.iter().zip(buf.iter()).zip(&self.slope).map(|((z, pz), s)| (z.conj() * pz).re * s).sum::<f64>();
        }
        g
    }

    /// `⟨H⟩` with the lattice depth `v0`.
    pub fn energy(&self, st: &FactoredState, v0: f64, buf: &mut [C64]) -> f64 {
        let mut kin = 0.0;
        for c in st.comps.chunks(self.n) {
            buf.copy_from_slice(c);
            self.fwd.process(buf);
            kin += buf.iter().zip(&self.kinetic_energy).map(|(z, e)| z.norm_sqr() * e).sum::<f64>() / self.n as f64;
        }
        kin + v0 * st.expect_diag(&self.shape)
    }

    pub fn parity(&self, st: &FactoredState) -> f64 {
        st.comps
            .chunks(self.n)
            .map(|c| c.iter().enumerate().map(|(j, z)| (z.conj() * c[self.reflect[j]]).re).sum::<f64>())
            .sum()
    }

    /// Weight of the top quarter of `|k|` modes.
    pub fn spectral_tail(&self, st: &FactoredState, buf: &mut [C64]) -> f64 {
        let kmax = self.lattice.grid.wavenumbers().iter().fold(0.0f64, |a, k| a.max(k.abs()));
        let mut tail = 0.0;
        let mut total = 0.0;
        for c in st.comps.chunks(self.n) {
            buf.copy_from_slice(c);
            self.fwd.process(buf);
            for (z, k) in buf.iter().zip(self.lattice.grid.wavenumbers()) {
                total += z.norm_sqr();
                if k.abs() > 0.75 * kmax {
                    tail += z.norm_sqr();
                }
            }
        }
        tail / total
    }

    /// One conditioned step `U_V(dt/2)·U_T(dt)·U_V(dt/2)·M(dy)` at the given level.
    ///
    /// Returns the indicator `g` of the new state. `buf` needs room for two
    /// grid vectors. The velocity of `uχ` after the last half kick is taken
    /// as `u(P/m χ − V₀c′dt/2m · χ)`, which saves a transform pair.
    pub fn step(&self, st: &mut FactoredState, level: Level, dw: f64, buf: &mut [C64]) -> Result<f64> {
        let s = &self.scenario;
        let dt = self.dt;
        let sg = s.gamma.sqrt();
        let mean = st.expect_diag(&self.shape);
        let dy = dw + sg * mean * dt;
        let (half, depth) = match level {
            Level::Low => (&self.half_low, s.v_low),
            Level::High => (&self.half_high, s.v_high),
        };
        let kick = depth * dt / (2.0 * self.lattice.grid.mass());
        let inv_n = 1.0 / self.n as f64;
        let (chi, vel) = buf.split_at_mut(self.n);
        let mut g = 0.0;
        for c in st.comps.chunks_mut(self.n) {
            for ((z, u), cc) in c.iter_mut().zip(half).zip(&self.shape) {
                // the measurement is diagonal on the grid, so its Kraus factor is exact
                *z *= u * (0.5 * sg * cc * dy - 0.25 * s.gamma * cc * cc * dt).exp();
            }
            chi.copy_from_slice(c);
            self.fwd.process(chi);
            for ((z, v), (p, w)) in chi.iter_mut().zip(vel.iter_mut()).zip(self.kin_phase.iter().zip(&self.velocity)) {
                *z *= p * inv_n;
                *v = *z * w;
            }
            self.inv.process(chi);
            self.inv.process(vel);
            for (((z, x), v), (sl, u)) in c.iter_mut().zip(chi.iter()).zip(vel.iter()).zip(self.slope.iter().zip(half))
            {
                *z = x * u;
                g += (x.conj() * (v - x * (kick * sl))).re * sl;
            }
        }
        let tr = st.normalize()?;
        Ok(g / tr)
    }
}

pub struct AtomTrajectory {
    pub state: FactoredState,
    pub level: Level,
    t: f64,
    last_switch: Option<f64>,
    min_dwell: f64,
    switches: usize,
    last_g: Option<f64>,
    max_dg: f64,
    buf: Vec<C64>,
}

impl AtomTrajectory {
    /// Lower bound on any dwell implied by the deadband: consecutive switches
    /// need `g` to cross `2h`, and `g` moved at most `max_dg` per step.
    pub fn dwell_bound(&self, hysteresis: f64, dt: f64) -> f64 {
        if self.max_dg > 0.0 {
            2.0 * hysteresis * dt / self.max_dg
        } else {
            f64::INFINITY
        }
    }
}

impl Stepper for AtomModel {
    type State = AtomTrajectory;

    fn initial_state(&self, _index: usize) -> Result<AtomTrajectory> {
        Ok(AtomTrajectory {
            state: self.initial.clone(),
            level: Level::Low,
            t: 0.0,
            last_switch: None,
            min_dwell: f64::INFINITY,
            switches: 0,
            last_g: None,
            max_dg: 0.0,
            buf: vec![C64::new(0.0, 0.0); 2 * self.n],
        })
    }

    fn step(&self, tr: &mut AtomTrajectory, dw: f64, _t: f64, _dt: f64) -> Result<()> {
        let AtomTrajectory { state, buf, .. } = tr;
        let g = self.step(state, tr.level, dw, buf)?;
        tr.t += self.dt;
        if let Some(prev) = tr.last_g {
            tr.max_dg = tr.max_dg.max((g - prev).abs());
        }
        tr.last_g = Some(g);
        let next = decide_level(g, tr.level, self.scenario.hysteresis);
        if next != tr.level {
            if let Some(last) = tr.last_switch {
                tr.min_dwell = tr.min_dwell.min(tr.t - last);
            }
            tr.last_switch = Some(tr.t);
            tr.switches += 1;
            tr.level = next;
        }
        let step_index = (tr.t / self.dt).round() as usize;
        if step_index % COMPRESS_EVERY == 0 {
            tr.state.compress(COMPRESS_TOL);
        }
        let every = self.scenario.resolution_check_every;
        if every > 0 && step_index % every == 0 {
            let tail = self.spectral_tail(&tr.state, &mut tr.buf[..self.n]);
            if tail > SPECTRAL_TAIL_TOL {
                return Err(Error::GridUnderResolved(format!(
                    "momentum tail weight {tail:e} exceeds {SPECTRAL_TAIL_TOL:e}"
                )));
            }
        }
        Ok(())
    }

    fn summarize(&self, tr: &AtomTrajectory) -> Vec<f64> {
        vec![
            tr.state.population(&self.low_states[0]),
            tr.state.population(&self.low_states[1]),
            tr.state.purity(),
            tr.min_dwell,
            tr.switches as f64,
            tr.dwell_bound(self.scenario.hysteresis, self.dt),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoolingOutcome {
    pub times: Vec<f64>,
    /// `⟨H⟩` with the low lattice depth.
    pub energy: Curve,
    pub ground_population: Curve,
    pub excited_population: Curve,
    pub parity: Curve,
    pub purity: Curve,
    pub labels: Vec<OutcomeLabel>,
    pub final_purities: Vec<f64>,
    pub ground_count: usize,
    pub excited_count: usize,
    pub other_count: usize,
    pub median_final_purity: f64,
    /// Shortest time between consecutive switches over all trajectories.
    pub min_dwell: f64,
    /// Trajectories whose shortest dwell undercuts their deadband bound.
    pub dwell_violations: usize,
    pub mean_switches: f64,
}

/// Conditioned atom under bang-bang lattice switching with measurement of `cos²(kX)`.
pub fn run_atom_cooling(s: &AtomLatticeScenario, config: &TrajectoryConfig) -> Result<CoolingOutcome> {
    let model = AtomModel::new(s, config.dt)?;
    if model.spectral_tail(&model.initial, &mut vec![C64::new(0.0, 0.0); model.n]) > SPECTRAL_TAIL_TOL {
        return Err(Error::GridUnderResolved("initial state".into()));
    }
    let v_low = s.v_low;
    let m = &model;
    let observables = [
        Observable::new("energy", move |t: &AtomTrajectory| {
            m.energy(&t.state, v_low, &mut vec![C64::new(0.0, 0.0); m.n])
        }),
        Observable::new("ground_population", move |t: &AtomTrajectory| t.state.population(&m.low_states[0])),
        Observable::new("excited_population", move |t: &AtomTrajectory| t.state.population(&m.low_states[1])),
        Observable::new("parity", move |t: &AtomTrajectory| m.parity(&t.state)),
        Observable::new("purity", |t: &AtomTrajectory| t.state.purity()),
    ];
    let res = run_ensemble(&model, config, &observables)?;
    let labels: Vec<OutcomeLabel> = res.trajectories.iter().map(|t| label_for(t.values[0], t.values[1])).collect();
    let count = |l: OutcomeLabel| labels.iter().filter(|x| **x == l).count();
    let final_purities: Vec<f64> = res.trajectories.iter().map(|t| t.values[2]).collect();
    let mut sorted = final_purities.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = if sorted.is_empty() {
        f64::NAN
    } else if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let curve = |name: &str| res.curve(name).cloned().expect("registered");
    Ok(CoolingOutcome {
        energy: curve("energy"),
        ground_population: curve("ground_population"),
        excited_population: curve("excited_population"),
        parity: curve("parity"),
        purity: curve("purity"),
        ground_count: count(OutcomeLabel::Ground),
        excited_count: count(OutcomeLabel::FirstExcited),
        other_count: count(OutcomeLabel::Other),
        labels,
        median_final_purity: median,
        final_purities,
        min_dwell: res.trajectories.iter().map(|t| t.values[3]).fold(f64::INFINITY, f64::min),
        dwell_violations: res.trajectories.iter().filter(|t| t.values[3] < t.values[5]).count(),
        mean_switches: res.trajectories.iter().map(|t| t.values[4]).sum::<f64>() / res.trajectories.len() as f64,
        times: res.times,
    })
}
