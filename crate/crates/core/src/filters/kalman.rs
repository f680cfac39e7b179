use nalgebra::{Matrix2, SymmetricEigen, Vector2};

use crate::error::{Error, Result};

/// Mean `(x, p)` and covariance of a Gaussian state of knowledge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

impl GaussianBelief {
    pub fn new(mean: Vector2<f64>, cov: Matrix2<f64>) -> Result<Self> {
        if (cov[(0, 1)] - cov[(1, 0)]).abs() > 1e-12 {
            return Err(Error::InvalidState("covariance is not symmetric".into()));
        }
        let min = SymmetricEigen::new(cov).eigenvalues.min();
        if min < -1e-10 {
            return Err(Error::InvalidState(format!("covariance eigenvalue {min:e} is negative")));
        }
        Ok(Self { mean, cov })
    }

    /// Minimum-uncertainty state of an oscillator: `Vxx = ħ/2mω`, `Vpp = ħmω/2`.
    pub fn coherent(x: f64, p: f64, mass: f64, omega: f64, hbar: f64) -> Self {
        Self {
            mean: Vector2::new(x, p),
            cov: Matrix2::new(hbar / (2.0 * mass * omega), 0.0, 0.0, hbar * mass * omega / 2.0),
        }
    }
}

/// `d(x,p) = A(x,p)dt + B u dt + noise`, `dr = c·(x,p) dt + dW/√γ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearMeasuredModel {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
    pub c: Vector2<f64>,
    pub gamma: f64,
    /// Process-noise intensity, including measurement back-action.
    pub diffusion: Matrix2<f64>,
    /// Trace above which a covariance is treated as diverged.
    pub covariance_bound: f64,
}

impl LinearMeasuredModel {
    pub fn new(a: Matrix2<f64>, b: Vector2<f64>, c: Vector2<f64>, gamma: f64, diffusion: Matrix2<f64>) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::NonPositiveGamma(gamma));
        }
        let min = SymmetricEigen::new(diffusion).eigenvalues.min();
        if min < -1e-12 || (diffusion[(0, 1)] - diffusion[(1, 0)]).abs() > 1e-12 {
            return Err(Error::InvalidParameter("diffusion must be symmetric positive semidefinite".into()));
        }
        Ok(Self { a, b, c, gamma, diffusion, covariance_bound: 1e12 })
    }

    /// Position-measured oscillator driven by a force `u`.
    ///
    /// The double-commutator term `−(γ/8)[X,[X,ρ]]` maps to momentum diffusion
    /// `ħ²γ/4`; `thermal` adds further momentum diffusion.
    pub fn measured_oscillator(mass: f64, omega: f64, gamma: f64, hbar: f64, thermal: f64) -> Result<Self> {
        Self::new(
            Matrix2::new(0.0, 1.0 / mass, -mass * omega * omega, 0.0),
            Vector2::new(0.0, 1.0),
            Vector2::new(1.0, 0.0),
            gamma,
            Matrix2::new(0.0, 0.0, 0.0, backaction_diffusion(gamma, hbar) + thermal),
        )
    }

    pub fn with_covariance_bound(mut self, bound: f64) -> Self {
        self.covariance_bound = bound;
        self
    }

    fn riccati_rhs(&self, v: &Matrix2<f64>) -> Matrix2<f64> {
        let vc = v * self.c;
        self.a * v + v * self.a.transpose() + self.diffusion - vc * vc.transpose() * self.gamma
    }

    /// Kalman gain `γVcᵀ`.
    pub fn gain(&self, cov: &Matrix2<f64>) -> Vector2<f64> {
        cov * self.c * self.gamma
    }
}

/// Momentum diffusion generated by measuring position at strength `γ`.
pub fn backaction_diffusion(gamma: f64, hbar: f64) -> f64 {
    hbar * hbar * gamma / 4.0
}

/// Thermal momentum diffusion `Γ m ħω (2n̄ + 1)`.
pub fn thermal_diffusion(coupling: f64, mass: f64, omega: f64, hbar: f64, n_bar: f64) -> f64 {
    coupling * mass * hbar * omega * (2.0 * n_bar + 1.0)
}

/// One Kalman–Bucy step driven by the record increment `dr` with control `u`.
///
/// The covariance is advanced with RK4 on the Riccati equation
/// `V̇ = AV + VAᵀ + D − γVcᵀcV`.
pub fn kalman_bucy_step(
    b: &GaussianBelief,
    model: &LinearMeasuredModel,
    dr: f64,
    dt: f64,
    u: f64,
) -> Result<GaussianBelief> {
    let innovation = dr - model.c.dot(&b.mean) * dt;
    let mean = b.mean + (model.a * b.mean + model.b * u) * dt + model.gain(&b.cov) * innovation;
    let cov = riccati_rk4(model, &b.cov, dt);
    let trace = cov.trace();
    if !(trace <= model.covariance_bound) {
        return Err(Error::CovarianceBlowup { trace, bound: model.covariance_bound });
    }
    Ok(GaussianBelief { mean, cov })
}

pub(crate) fn riccati_rk4(model: &LinearMeasuredModel, v: &Matrix2<f64>, dt: f64) -> Matrix2<f64> {
    let k1 = model.riccati_rhs(v);
    let k2 = model.riccati_rhs(&(v + k1 * (0.5 * dt)));
    let k3 = model.riccati_rhs(&(v + k2 * (0.5 * dt)));
    let k4 = model.riccati_rhs(&(v + k3 * dt));
    let mut out = v + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let off = 0.5 * (out[(0, 1)] + out[(1, 0)]);
    out[(0, 1)] = off;
    out[(1, 0)] = off;
    out
}

/// Integrates the filter Riccati equation from `v0` for time `t`.
pub fn riccati_flow(model: &LinearMeasuredModel, v0: &Matrix2<f64>, t: f64, dt: f64) -> Matrix2<f64> {
    let steps = (t / dt).ceil() as usize;
    let h = t / steps as f64;
    (0..steps).fold(*v0, |v, _| riccati_rk4(model, &v, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::NoiseStream;

    #[test]
    fn zero_innovation_follows_drift() {
        let model = LinearMeasuredModel::measured_oscillator(1.0, 2.0, 1.0, 1.0, 0.0).unwrap();
        let mut b = GaussianBelief::coherent(1.0, 0.0, 1.0, 2.0, 1.0);
        let dt = 1e-4;
        let mut mean = b.mean;
        for _ in 0..10_000 {
            let dr = model.c.dot(&b.mean) * dt;
            b = kalman_bucy_step(&b, &model, dr, dt, 0.0).unwrap();
            mean += model.a * mean * dt;
        }
        assert!((b.mean - mean).norm() < 1e-12);
        // exact rotation for comparison
        assert!((b.mean[0] - (2.0f64).cos()).abs() < 1e-3);
    }

    #[test]
    fn covariance_stays_psd_and_symmetric() {
        let model = LinearMeasuredModel::measured_oscillator(1.0, 1.0, 5.0, 1.0, 0.3).unwrap();
        let mut b = GaussianBelief::coherent(0.0, 0.0, 1.0, 1.0, 1.0);
        let mut noise = NoiseStream::new(3, 1e-3).unwrap();
        for _ in 0..5000 {
            let dr = model.c.dot(&b.mean) * 1e-3 + noise.next_increment() / 5f64.sqrt();
            b = kalman_bucy_step(&b, &model, dr, 1e-3, 0.1).unwrap();
            assert!(GaussianBelief::new(b.mean, b.cov).is_ok());
        }
    }

    #[test]
    fn blowup_is_reported() {
        // unmeasurable unstable mode
        let model = LinearMeasuredModel::new(
            Matrix2::new(0.0, 0.0, 0.0, 5.0),
            Vector2::new(0.0, 1.0),
            Vector2::new(1.0, 0.0),
            1.0,
            Matrix2::identity(),
        )
        .unwrap()
        .with_covariance_bound(1e3);
        let mut b = GaussianBelief::new(Vector2::zeros(), Matrix2::identity()).unwrap();
        let mut err = None;
        for _ in 0..10_000 {
            match kalman_bucy_step(&b, &model, 0.0, 1e-2, 0.0) {
                Ok(next) => b = next,
                Err(e) => {
                    err = Some(e);
                    break;
                }
            }
        }
        assert!(matches!(err, Some(Error::CovarianceBlowup { .. })));
    }

    #[test]
    fn rejects_bad_models() {
        assert!(matches!(
            LinearMeasuredModel::measured_oscillator(1.0, 1.0, 0.0, 1.0, 0.0),
            Err(Error::NonPositiveGamma(_))
        ));
        assert!(LinearMeasuredModel::new(
            Matrix2::zeros(),
            Vector2::zeros(),
            Vector2::zeros(),
            1.0,
            Matrix2::new(-1.0, 0.0, 0.0, 0.0)
        )
        .is_err());
    }
}
