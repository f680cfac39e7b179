//! Seeded Wiener noise, measurement records and the parallel ensemble runner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of trajectory `index` under a master seed.
pub fn trajectory_seed(master: u64, index: u64) -> u64 {
    mix64(mix64(master) ^ mix64(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}

/// Gaussian increments with variance `dt`, addressable by step index.
///
/// Each increment consumes exactly two 64-bit words from a ChaCha8 stream,
/// so `seek` can jump to any step without replaying the prefix.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    seed: u64,
    dt: f64,
    counter: u64,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { seed, dt, counter: 0, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn seek(&mut self, counter: u64) {
        self.counter = counter;
        self.rng.set_word_pos(counter as u128 * 4);
    }

    /// Standard normal draw (Box–Muller, cosine branch only).
    pub fn next_standard(&mut self) -> f64 {
        self.counter += 1;
        let a: u64 = self.rng.random();
        let b: u64 = self.rng.random();
        // u1 in (0, 1], u2 in [0, 1)
        let u1 = ((a >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn next_increment(&mut self) -> f64 {
        self.next_standard() * self.dt.sqrt()
    }
}

pub fn wiener_increments(stream: &mut NoiseStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| stream.next_increment()).collect()
}

/// `dr = ⟨x⟩dt + dW/√γ`.
pub fn synthesize_record(mean_x: f64, gamma: f64, dw: f64, dt: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::NonPositiveGamma(gamma));
    }
    Ok(mean_x * dt + dw / gamma.sqrt())
}

/// `dW = √γ(dr − ⟨x⟩dt)`.
pub fn innovation(dr: f64, mean_x: f64, gamma: f64, dt: f64) -> f64 {
    gamma.sqrt() * (dr - mean_x * dt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    dt: f64,
    gamma: f64,
    increments: Vec<f64>,
}

impl MeasurementRecord {
    pub fn new(dt: f64, gamma: f64, increments: Vec<f64>) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::NonPositiveGamma(gamma));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if let Some(bad) = increments.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("record increment {bad} is not finite")));
        }
        Ok(Self { dt, gamma, increments })
    }

    pub fn empty(dt: f64, gamma: f64) -> Result<Self> {
        Self::new(dt, gamma, Vec::new())
    }

    pub fn push(&mut self, dr: f64) -> Result<()> {
        if !dr.is_finite() {
            return Err(Error::InvalidParameter("record increment is not finite".into()));
        }
        self.increments.push(dr);
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub dt: f64,
    pub t_final: f64,
    pub seed: u64,
    pub n_trajectories: usize,
    /// Observables are recorded every this many steps (and at the end).
    pub record_every: usize,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl TrajectoryConfig {
    pub fn new(dt: f64, t_final: f64, seed: u64, n_trajectories: usize) -> Result<Self> {
        let cfg = Self { dt, t_final, seed, n_trajectories, record_every: 1, workers: None };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_record_every(mut self, every: usize) -> Self {
        self.record_every = every.max(1);
        self
    }

    pub fn with_workers(mut self, workers: Option<usize>) -> Self {
        self.workers = workers;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_final >= self.dt * (1.0 - 1e-9)) {
            return Err(Error::InvalidParameter(format!("t_final {} shorter than dt", self.t_final)));
        }
        if self.n_trajectories < 1 {
            return Err(Error::InvalidParameter("need at least one trajectory".into()));
        }
        if self.record_every < 1 {
            return Err(Error::InvalidParameter("record_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt).round().max(1.0) as usize
    }

    /// Step indices at which observables are recorded.
    pub fn record_steps(&self) -> Vec<usize> {
        let n = self.n_steps();
        let mut steps: Vec<usize> = (0..=n).step_by(self.record_every).collect();
        if *steps.last().unwrap() != n {
            steps.push(n);
        }
        steps
    }

    pub fn times(&self) -> Vec<f64> {
        self.record_steps().into_iter().map(|s| s as f64 * self.dt).collect()
    }
}

/// One trajectory's dynamics.
///
/// `step` receives the Wiener increment for the step. Steppers that sample
/// under a reference measure report the accumulated log-likelihood ratio via
/// `log_weight`; ensemble averages are then self-normalized.
pub trait Stepper: Sync {
    type State: Send;

    fn initial_state(&self, index: usize) -> Result<Self::State>;

    fn step(&self, state: &mut Self::State, dw: f64, t: f64, dt: f64) -> Result<()>;

    fn log_weight(&self, _state: &Self::State) -> f64 {
        0.0
    }

    fn weighting(&self) -> Weighting {
        Weighting::SelfNormalized
    }

    /// Per-trajectory scalars reported after the last step.
    fn summarize(&self, _state: &Self::State) -> Vec<f64> {
        Vec::new()
    }
}

/// How per-trajectory log-weights enter ensemble averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Weighting {
    /// `Σ w f / Σ w`.
    #[default]
    SelfNormalized,
    /// `Σ w f / N`, for exact likelihood ratios with `E[w] = 1`.
    /// Bounded when `w f` is bounded even if `w` alone is heavy-tailed.
    UnitMean,
}

/// Named per-step functional.
pub struct Observable<'a, S> {
    pub name: String,
    pub eval: Box<dyn Fn(&S) -> f64 + Sync + 'a>,
}

impl<'a, S> Observable<'a, S> {
    pub fn new(name: impl Into<String>, eval: impl Fn(&S) -> f64 + Sync + 'a) -> Self {
        Self { name: name.into(), eval: Box::new(eval) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub index: usize,
    pub seed: u64,
    pub log_weight: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub times: Vec<f64>,
    pub curves: Vec<Curve>,
    pub trajectories: Vec<TrajectorySummary>,
}

impl EnsembleResult {
    pub fn curve(&self, name: &str) -> Option<&Curve> {
        self.curves.iter().find(|c| c.name == name)
    }

    /// Self-normalized weights `w_i / Σw` of the final log-weights.
    pub fn normalized_weights(&self) -> Vec<f64> {
        normalized_weights(&self.trajectories.iter().map(|t| t.log_weight).collect::<Vec<_>>())
    }
}

pub fn normalized_weights(log_weights: &[f64]) -> Vec<f64> {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Weighted mean and standard error of `values` under normalized weights.
pub fn weighted_mean_stderr(values: &[f64], weights: &[f64]) -> (f64, f64) {
    let mut acc = WeightedAccumulator::default();
    for (&v, &w) in values.iter().zip(weights) {
        acc.push(w.ln(), v);
    }
    (acc.mean(), acc.stderr())
}

/// Streaming self-normalized mean with log-domain weights.
#[derive(Clone, Debug, Default)]
struct WeightedAccumulator {
    max_log: Option<f64>,
    n: usize,
    sw: f64,
    sw2: f64,
    swf: f64,
    swf2: f64,
    sw2f: f64,
    sw2f2: f64,
}

impl WeightedAccumulator {
    fn push(&mut self, log_w: f64, f: f64) {
        let m = match self.max_log {
            Some(m) if log_w <= m => m,
            Some(m) => {
                let s = (m - log_w).exp();
                let s2 = s * s;
                self.sw *= s;
                self.swf *= s;
                self.swf2 *= s;
                self.sw2 *= s2;
                self.sw2f *= s2;
                self.sw2f2 *= s2;
                self.max_log = Some(log_w);
                log_w
            }
            None => {
                self.max_log = Some(log_w);
                log_w
            }
        };
        let w = (log_w - m).exp();
        self.n += 1;
        self.sw += w;
        self.sw2 += w * w;
        self.swf += w * f;
        self.swf2 += w * f * f;
        self.sw2f += w * w * f;
        self.sw2f2 += w * w * f * f;
    }

    fn mean(&self) -> f64 {
        self.swf / self.sw
    }

    fn variance(&self) -> f64 {
        let m = self.mean();
        (self.swf2 / self.sw - m * m).max(0.0)
    }

    fn scale(&self) -> f64 {
        self.max_log.map_or(0.0, f64::exp) / self.n as f64
    }

    fn unit_mean(&self) -> f64 {
        self.swf * self.scale()
    }

    fn unit_variance(&self) -> f64 {
        let m = self.unit_mean();
        (self.swf2 * self.scale() - m * m).max(0.0)
    }

    fn unit_stderr(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let m = self.unit_mean();
        let e = self.max_log.map_or(0.0, f64::exp);
        let second = self.sw2f2 * e * e / n;
        ((second - m * m).max(0.0) / (n - 1.0)).sqrt()
    }

    fn summary(&self, weighting: Weighting) -> (f64, f64, f64) {
        match weighting {
            Weighting::SelfNormalized => (self.mean(), self.stderr(), self.variance()),
            Weighting::UnitMean => (self.unit_mean(), self.unit_stderr(), self.unit_variance()),
        }
    }

    fn stderr(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let m = self.mean();
        let num = (self.sw2f2 - 2.0 * m * self.sw2f + m * m * self.sw2).max(0.0);
        let bessel = self.n as f64 / (self.n as f64 - 1.0);
        (num * bessel).sqrt() / self.sw
    }
}

struct TrajectoryOutput {
    rows: Vec<(f64, Vec<f64>)>,
    summary: TrajectorySummary,
}

const CHUNK: usize = 256;

/// Runs `config.n_trajectories` independent trajectories of `stepper`.
///
/// Trajectory `i` draws its noise from `NoiseStream(trajectory_seed(seed, i))`.
/// Results are reduced sequentially in index order, so the output does not
/// depend on the number of workers.
pub fn run_ensemble<S: Stepper>(
    stepper: &S,
    config: &TrajectoryConfig,
    observables: &[Observable<'_, S::State>],
) -> Result<EnsembleResult> {
    config.validate()?;
    match config.workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::InvalidParameter(format!("cannot build worker pool: {e}")))?;
            pool.install(|| run_ensemble_inner(stepper, config, observables))
        }
        None => run_ensemble_inner(stepper, config, observables),
    }
}

fn run_ensemble_inner<S: Stepper>(
    stepper: &S,
    config: &TrajectoryConfig,
    observables: &[Observable<'_, S::State>],
) -> Result<EnsembleResult> {
    let record_steps = config.record_steps();
    let times = config.times();
    let mut acc = vec![vec![WeightedAccumulator::default(); observables.len()]; record_steps.len()];
    let mut trajectories = Vec::with_capacity(config.n_trajectories);
    let mut start = 0;
    while start < config.n_trajectories {
        let end = (start + CHUNK).min(config.n_trajectories);
        let outputs: Vec<Result<TrajectoryOutput>> = (start..end)
            .into_par_iter()
            .map(|i| {
                run_trajectory(stepper, config, observables, &record_steps, i)
                    .map_err(|e| Error::Trajectory { index: i, source: Box::new(e) })
            })
            .collect();
        for out in outputs {
            let out = out?;
            for (slot, (lw, values)) in acc.iter_mut().zip(&out.rows) {
                for (a, &v) in slot.iter_mut().zip(values) {
                    a.push(*lw, v);
                }
            }
            trajectories.push(out.summary);
        }
        start = end;
    }
    let weighting = stepper.weighting();
    let curves = observables
        .iter()
        .enumerate()
        .map(|(k, obs)| {
            let stats: Vec<(f64, f64, f64)> = acc.iter().map(|row| row[k].summary(weighting)).collect();
            Curve {
                name: obs.name.clone(),
                mean: stats.iter().map(|s| s.0).collect(),
                stderr: stats.iter().map(|s| s.1).collect(),
                variance: stats.iter().map(|s| s.2).collect(),
            }
        })
        .collect();
    Ok(EnsembleResult { times, curves, trajectories })
}

fn run_trajectory<S: Stepper>(
    stepper: &S,
    config: &TrajectoryConfig,
    observables: &[Observable<'_, S::State>],
    record_steps: &[usize],
    index: usize,
) -> Result<TrajectoryOutput> {
    let seed = trajectory_seed(config.seed, index as u64);
    let mut noise = NoiseStream::new(seed, config.dt)?;
    let mut state = stepper.initial_state(index)?;
    let mut rows = Vec::with_capacity(record_steps.len());
    let observe = |state: &S::State| -> (f64, Vec<f64>) {
        (stepper.log_weight(state), observables.iter().map(|o| (o.eval)(state)).collect())
    };
    let mut next = 0;
    let n = config.n_steps();
    for step in 0..=n {
        if next < record_steps.len() && record_steps[next] == step {
            rows.push(observe(&state));
            next += 1;
        }
        if step == n {
            break;
        }
        let dw = noise.next_increment();
        stepper.step(&mut state, dw, step as f64 * config.dt, config.dt)?;
    }
    let summary =
        TrajectorySummary { index, seed, log_weight: stepper.log_weight(&state), values: stepper.summarize(&state) };
    Ok(TrajectoryOutput { rows, summary })
}
