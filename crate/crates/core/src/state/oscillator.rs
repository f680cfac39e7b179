use super::{BasisSpec, CMatrix, CVector, ObservableOperator, PhysicalConstants, C64};
use crate::error::{Error, Result};

/// Truncated-Fock operators of a harmonic oscillator.
#[derive(Clone, Debug)]
pub struct Oscillator {
    pub mass: f64,
    pub omega: f64,
    pub hamiltonian: ObservableOperator,
    pub position: ObservableOperator,
    pub momentum: ObservableOperator,
}

impl Oscillator {
    pub fn dim(&self) -> usize {
        self.position.dim()
    }

    /// Fock state `|n⟩`.
    pub fn fock(&self, n: usize) -> Result<CVector> {
        if n >= self.dim() {
            return Err(Error::InvalidParameter(format!("level {n} outside truncation {}", self.dim())));
        }
        let mut v = CVector::zeros(self.dim());
        v[n] = C64::new(1.0, 0.0);
        Ok(v)
    }
}

/// Builds `X`, `P` from truncated ladder operators and `H = P²/2m + ½mω²X²`.
///
/// The equations of motion are `Ẋ = P/m`, `Ṗ = −mω²X`. (The frequently quoted
/// `Ṗ = −mωX` is dimensionally inconsistent with the Hamiltonian.)
pub fn build_oscillator(basis: &BasisSpec, constants: PhysicalConstants) -> Result<Oscillator> {
    basis.validate()?;
    let BasisSpec::Fock { n_max, mass, omega } = *basis else {
        return Err(Error::InvalidBasis("oscillator needs a Fock basis".into()));
    };
    let hbar = constants.hbar;
    let mut a = CMatrix::zeros(n_max, n_max);
    for n in 1..n_max {
        a[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    let ad = a.adjoint();
    let x_scale = (hbar / (2.0 * mass * omega)).sqrt();
    let p_scale = (hbar * mass * omega / 2.0).sqrt();
    let x = (&a + &ad) * C64::new(x_scale, 0.0);
    let p = (&ad - &a) * C64::new(0.0, p_scale);
    let h = &p * &p * C64::new(1.0 / (2.0 * mass), 0.0) + &x * &x * C64::new(0.5 * mass * omega * omega, 0.0);
    Ok(Oscillator {
        mass,
        omega,
        hamiltonian: ObservableOperator::from_hermitian_part("H", h),
        position: ObservableOperator::from_hermitian_part("X", x),
        momentum: ObservableOperator::from_hermitian_part("P", p),
    })
}

/// Coherent state `|α⟩` truncated to `dim` levels and renormalized.
pub fn coherent_state(alpha: C64, dim: usize) -> CVector {
    let mut v = CVector::zeros(dim);
    let mut coeff = C64::new((-0.5 * alpha.norm_sqr()).exp(), 0.0);
    for n in 0..dim {
        v[n] = coeff;
        coeff = coeff * alpha / ((n + 1) as f64).sqrt();
    }
    let norm = v.norm();
    v / C64::new(norm, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{expectation, DensityMatrix};

    fn fock(n_max: usize, mass: f64, omega: f64) -> BasisSpec {
        BasisSpec::Fock { n_max, mass, omega }
    }

    #[test]
    fn diagonal_matches_ladder_energies() {
        let c = PhysicalConstants::new(0.7).unwrap();
        let osc = build_oscillator(&fock(20, 1.3, 2.1), c).unwrap();
        let h = osc.hamiltonian.matrix();
        for n in 0..19 {
            let expected = 0.7 * 2.1 * (n as f64 + 0.5);
            assert!((h[(n, n)].re - expected).abs() < 1e-12, "level {n}");
        }
    }

    #[test]
    fn canonical_commutator_below_truncation_edge() {
        let c = PhysicalConstants::new(1.7).unwrap();
        let n = 30;
        let osc = build_oscillator(&fock(n, 0.4, 3.0), c).unwrap();
        let x = osc.position.matrix();
        let p = osc.momentum.matrix();
        let comm = x * p - p * x;
        let target = CMatrix::identity(n, n) * C64::new(0.0, 1.7);
        let diff = (comm - target).view((0, 0), (n - 2, n - 2)).norm();
        assert!(diff <= 1e-9, "{diff}");
    }

    #[test]
    fn ground_state_position_variance() {
        let c = PhysicalConstants::new(1.0).unwrap();
        let (m, w) = (2.0, 0.5);
        let osc = build_oscillator(&fock(12, m, w), c).unwrap();
        let ground = DensityMatrix::from_pure(&osc.fock(0).unwrap()).unwrap();
        let x2 = ObservableOperator::new("X2", osc.position.matrix() * osc.position.matrix()).unwrap();
        let mean = expectation(&ground, &osc.position).unwrap();
        let var = expectation(&ground, &x2).unwrap() - mean * mean;
        assert!((var - 1.0 / (2.0 * m * w)).abs() < 1e-12);
    }

    #[test]
    fn rejects_tiny_truncation() {
        assert!(build_oscillator(&fock(1, 1.0, 1.0), PhysicalConstants::default()).is_err());
        assert!(build_oscillator(&BasisSpec::Qubit, PhysicalConstants::default()).is_err());
    }

    #[test]
    fn coherent_state_mean_number() {
        let v = coherent_state(C64::new(1.2, -0.4), 40);
        let mean: f64 = v.iter().enumerate().map(|(n, z)| n as f64 * z.norm_sqr()).sum();
        assert!((mean - 1.6).abs() < 1e-10);
    }
}
