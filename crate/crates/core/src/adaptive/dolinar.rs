use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::engine::trajectory_seed;
use crate::error::{Error, Result};
use crate::state::{check_dims, hermitian_eigenvalues, DensityMatrix, C64};

/// Minimum error probability for discriminating `ρ0` and `ρ1` with prior `p1` on `ρ1`:
/// `½(1 − ‖p1ρ1 − p0ρ0‖₁)`.
pub fn helstrom_bound(rho0: &DensityMatrix, rho1: &DensityMatrix, p1: f64) -> Result<f64> {
    check_prior(p1)?;
    check_dims(rho0.dim(), rho1.dim())?;
    let diff = rho1.matrix() * C64::new(p1, 0.0) - rho0.matrix() * C64::new(1.0 - p1, 0.0);
    let norm: f64 = hermitian_eigenvalues(&diff).iter().map(|l| l.abs()).sum();
    Ok((0.5 * (1.0 - norm)).max(0.0))
}

/// Helstrom bound for vacuum against a coherent state with `|α|²` mean photons.
pub fn helstrom_coherent(mean_photons: f64, p1: f64) -> f64 {
    let x = 4.0 * p1 * (1.0 - p1) * (-mean_photons).exp();
    0.5 * (1.0 - (1.0 - x).max(0.0).sqrt())
}

fn check_prior(p1: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p1) {
        return Err(Error::InvalidParameter(format!("prior must lie in [0, 1], got {p1}")));
    }
    Ok(())
}

/// Vacuum (H0) against a coherent pulse of amplitude `alpha` (H1) over `[0, duration]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DolinarConfig {
    pub alpha: C64,
    pub duration: f64,
    pub n_segments: usize,
    /// Prior probability of H1.
    pub prior_one: f64,
}

impl DolinarConfig {
    pub fn new(alpha: C64, n_segments: usize) -> Self {
        Self { alpha, duration: 1.0, n_segments, prior_one: 0.5 }
    }

    pub fn mean_photons(&self) -> f64 {
        self.alpha.norm_sqr()
    }

    pub fn validate(&self) -> Result<()> {
        check_prior(self.prior_one)?;
        if !(self.duration > 0.0) || self.n_segments == 0 {
            return Err(Error::InvalidParameter("duration and segment count must be positive".into()));
        }
        let per = self.mean_photons() / self.n_segments as f64;
        if per > 0.1 {
            return Err(Error::SegmentTooCoarse { mean_photons: per });
        }
        Ok(())
    }

    fn amplitudes(&self) -> [C64; 2] {
        [C64::new(0.0, 0.0), self.alpha / self.duration.sqrt()]
    }
}

/// Error rate and its binomial standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErrorEstimate {
    pub error: f64,
    pub stderr: f64,
    pub trials: usize,
}

impl ErrorEstimate {
    fn from_count(errors: usize, trials: usize) -> Self {
        let p = errors as f64 / trials as f64;
        Self { error: p, stderr: (p * (1.0 - p) / trials as f64).sqrt(), trials }
    }
}

/// Posterior of the favored hypothesis on the ideal no-click curve `q(1 − q) = p0·p1·e^{−|α|²t/T}`.
fn favored_posterior(t: f64, cfg: &DolinarConfig) -> f64 {
    let rate = cfg.mean_photons() / cfg.duration;
    let x = cfg.prior_one * (1.0 - cfg.prior_one) * (-rate * t).exp();
    0.5 * (1.0 + (1.0 - 4.0 * x).max(0.0).sqrt())
}

/// Local oscillator amplitude that nulls the favored hypothesis to the degree set by `q`.
fn feedback_amplitude(q: f64, favored: usize, amps: &[C64; 2]) -> C64 {
    let (a_f, a_o) = (amps[favored], amps[1 - favored]);
    if a_f == a_o {
        return -a_o;
    }
    let big_o = (a_o - a_f) * (q / (2.0 * q - 1.0));
    big_o - a_o
}

fn exponential(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    if rate <= 0.0 {
        return f64::INFINITY;
    }
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}

fn decide(log_post: [f64; 2]) -> usize {
    // ties go to H0
    if log_post[1] > log_post[0] {
        1
    } else {
        0
    }
}

/// One adaptive trial with true hypothesis `truth`; returns the decision.
fn dolinar_trial(cfg: &DolinarConfig, truth: usize, rng: &mut ChaCha8Rng) -> usize {
    let amps = cfg.amplitudes();
    let p1 = cfg.prior_one;
    let mut favored = if 1.0 - p1 >= p1 { 0 } else { 1 };
    let mut log_post = [(1.0 - p1).ln(), p1.ln()];
    let seg = cfg.duration / cfg.n_segments as f64;
    for j in 0..cfg.n_segments {
        let (t0, t1) = (j as f64 * seg, (j + 1) as f64 * seg);
        let q = favored_posterior(0.5 * (t0 + t1), cfg);
        let mut t = t0;
        loop {
            let beta = feedback_amplitude(q, favored, &amps);
            let lam = [(amps[0] + beta).norm_sqr(), (amps[1] + beta).norm_sqr()];
            let tau = exponential(rng, lam[truth]);
            if t + tau < t1 {
                for h in 0..2 {
                    log_post[h] += -lam[h] * tau + lam[h].max(1e-300).ln();
                }
                t += tau;
                favored = 1 - favored;
            } else {
                for h in 0..2 {
                    log_post[h] -= lam[h] * (t1 - t);
                }
                break;
            }
        }
    }
    decide(log_post)
}

fn count_errors(seed: u64, trials: usize, p1: f64, run: impl Fn(usize, &mut ChaCha8Rng) -> usize + Sync) -> usize {
    const CHUNK: usize = 4096;
    let chunks: Vec<usize> = (0..trials.div_ceil(CHUNK)).collect();
    chunks
        .par_iter()
        .map(|&c| {
            (c * CHUNK..((c + 1) * CHUNK).min(trials))
                .filter(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(trajectory_seed(seed, i as u64));
                    let truth = usize::from(rng.random::<f64>() < p1);
                    run(truth, &mut rng) != truth
                })
                .count()
        })
        .sum()
}

/// Monte Carlo error rate of the adaptive receiver with piecewise-constant feedback.
///
/// Within a segment the amplitude uses the favored posterior at the segment
/// midpoint; each click flips the favored hypothesis. The decision is the
/// larger exact posterior, with ties going to H0.
pub fn dolinar_simulate(cfg: &DolinarConfig, seed: u64, trials: usize) -> Result<ErrorEstimate> {
    cfg.validate()?;
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be positive".into()));
    }
    let errors = count_errors(seed, trials, cfg.prior_one, |truth, rng| dolinar_trial(cfg, truth, rng));
    Ok(ErrorEstimate::from_count(errors, trials))
}

fn poisson_pmf(n: u64, mean: f64) -> f64 {
    if mean == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    let ln_fact: f64 = (1..=n).map(|k| (k as f64).ln()).sum();
    (n as f64 * mean.ln() - mean - ln_fact).exp()
}

fn static_error(cfg: &DolinarConfig, b: f64) -> f64 {
    let (mu0, mu1) = static_means(cfg, b);
    let p1 = cfg.prior_one;
    let n_max = (mu0.max(mu1) + 12.0 * mu0.max(mu1).sqrt() + 30.0) as u64;
    let correct: f64 = (0..=n_max).map(|n| ((1.0 - p1) * poisson_pmf(n, mu0)).max(p1 * poisson_pmf(n, mu1))).sum();
    1.0 - correct
}

/// Mean counts under each hypothesis for a real displacement `b` along the phase of `α`.
fn static_means(cfg: &DolinarConfig, b: f64) -> (f64, f64) {
    let a = cfg.alpha.norm();
    (b * b, (a + b) * (a + b))
}

/// Constant displacement receiver with the displacement chosen to minimize the exact error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StaticReceiver {
    /// Displacement along the phase of `α`, in units of total amplitude.
    pub displacement: f64,
    pub error: f64,
}

pub fn optimal_static_receiver(cfg: &DolinarConfig) -> Result<StaticReceiver> {
    check_prior(cfg.prior_one)?;
    let a = cfg.alpha.norm();
    let span = 3.0 * a + 2.0;
    let n = 600;
    let grid: Vec<f64> = (0..=n).map(|k| -span + 2.0 * span * k as f64 / n as f64).collect();
    let (mut best, mut best_err) = (0.0, f64::INFINITY);
    for &b in &grid {
        let e = static_error(cfg, b);
        if e < best_err {
            best = b;
            best_err = e;
        }
    }
    let h = 2.0 * span / n as f64;
    let (mut lo, mut hi) = (best - h, best + h);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let m1 = hi - g * (hi - lo);
        let m2 = lo + g * (hi - lo);
        if static_error(cfg, m1) < static_error(cfg, m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let b = 0.5 * (lo + hi);
    let e = static_error(cfg, b);
    Ok(if e < best_err {
        StaticReceiver { displacement: b, error: e }
    } else {
        StaticReceiver { displacement: best, error: best_err }
    })
}

fn sample_poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    // inversion; means here are a few photons at most
    let mut n = 0u64;
    let mut p = (-mean).exp();
    let mut cdf = p;
    let u: f64 = rng.random();
    while u > cdf && p > 0.0 {
        n += 1;
        p *= mean / n as f64;
        cdf += p;
    }
    n
}

/// Monte Carlo error rate of a constant displacement receiver.
pub fn static_simulate(
    cfg: &DolinarConfig,
    receiver: &StaticReceiver,
    seed: u64,
    trials: usize,
) -> Result<ErrorEstimate> {
    check_prior(cfg.prior_one)?;
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be positive".into()));
    }
    let (mu0, mu1) = static_means(cfg, receiver.displacement);
    let p1 = cfg.prior_one;
    let errors = count_errors(seed, trials, p1, |truth, rng| {
        let n = sample_poisson(rng, if truth == 1 { mu1 } else { mu0 });
        let l0 = (1.0 - p1) * poisson_pmf(n, mu0);
        let l1 = p1 * poisson_pmf(n, mu1);
        usize::from(l1 > l0)
    });
    Ok(ErrorEstimate::from_count(errors, trials))
}
