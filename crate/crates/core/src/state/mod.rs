//! Quantum states, observables and the scalar functionals built on them.
//!
//! Three bases are supported: a qubit, a truncated Fock ladder for the
//! harmonic oscillator, and a uniform periodic position grid for the
//! optical-lattice atom. Matrices are dense `nalgebra` complex matrices;
//! [`SparseOp`] gives a compressed view used by the time steppers.

mod lattice;
mod oscillator;
mod sparse;

pub use lattice::{build_lattice, Grid, Lattice};
pub use oscillator::{build_oscillator, coherent_state, Oscillator};
pub use sparse::{SparseOp, SparseSum};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

pub(crate) const HERMITIAN_TOL: f64 = 1e-10;
pub(crate) const TRACE_TOL: f64 = 1e-10;
pub(crate) const PSD_TOL: f64 = 1e-8;
const IMAG_TOL: f64 = 1e-8;

/// Physical constants threaded through every dynamical routine.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    pub hbar: f64,
}

impl PhysicalConstants {
    pub fn new(hbar: f64) -> Result<Self> {
        if !(hbar > 0.0 && hbar.is_finite()) {
            return Err(Error::InvalidParameter(format!("hbar must be positive, got {hbar}")));
        }
        Ok(Self { hbar })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.hbar).map(|_| ())
    }
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self { hbar: 1.0 }
    }
}

/// Which representation a state or operator lives in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BasisSpec {
    Qubit,
    /// `n_max` is the number of retained levels.
    Fock {
        n_max: usize,
        mass: f64,
        omega: f64,
    },
    /// Periodic grid of `n_points` on `[x_min, x_max)`.
    Grid {
        x_min: f64,
        x_max: f64,
        n_points: usize,
        mass: f64,
    },
}

impl BasisSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BasisSpec::Qubit => Ok(()),
            BasisSpec::Fock { n_max, mass, omega } => {
                if n_max < 2 {
                    return Err(Error::InvalidBasis(format!("n_max must be >= 2, got {n_max}")));
                }
                if !(mass > 0.0 && omega > 0.0) {
                    return Err(Error::InvalidBasis("mass and omega must be positive".into()));
                }
                Ok(())
            }
            BasisSpec::Grid { x_min, x_max, n_points, mass } => {
                if n_points < 16 || !n_points.is_power_of_two() {
                    return Err(Error::InvalidBasis(format!("n_points must be a power of two >= 16, got {n_points}")));
                }
                if !(x_max > x_min) {
                    return Err(Error::InvalidBasis("x_max must exceed x_min".into()));
                }
                if !(mass > 0.0) {
                    return Err(Error::InvalidBasis("mass must be positive".into()));
                }
                Ok(())
            }
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            BasisSpec::Qubit => 2,
            BasisSpec::Fock { n_max, .. } => n_max,
            BasisSpec::Grid { n_points, .. } => n_points,
        }
    }
}

/// Hermitian observable with a display label.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservableOperator {
    label: String,
    entries: CMatrix,
}

impl ObservableOperator {
    pub fn new(label: impl Into<String>, entries: CMatrix) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::DimensionMismatch { expected: entries.nrows(), found: entries.ncols() });
        }
        let dev = hermitian_deviation(&entries);
        if dev > HERMITIAN_TOL {
            return Err(Error::InvalidState(format!("operator deviates from Hermitian by {dev:e}")));
        }
        Ok(Self { label: label.into(), entries })
    }

    /// Builds from a matrix that is Hermitian up to roundoff, symmetrizing it.
    pub(crate) fn from_hermitian_part(label: impl Into<String>, entries: CMatrix) -> Self {
        let sym = (&entries + entries.adjoint()) * C64::new(0.5, 0.0);
        Self { label: label.into(), entries: sym }
    }

    pub fn diagonal(label: impl Into<String>, values: &[f64]) -> Self {
        let d = DVector::from_iterator(values.len(), values.iter().map(|&v| C64::new(v, 0.0)));
        Self { label: label.into(), entries: CMatrix::from_diagonal(&d) }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.entries
    }

    pub fn identity(dim: usize) -> Self {
        Self { label: "I".into(), entries: CMatrix::identity(dim, dim) }
    }

    pub fn pauli_x() -> Self {
        let z = C64::new(0.0, 0.0);
        let o = C64::new(1.0, 0.0);
        Self { label: "sigma_x".into(), entries: CMatrix::from_row_slice(2, 2, &[z, o, o, z]) }
    }

    pub fn pauli_y() -> Self {
        let z = C64::new(0.0, 0.0);
        let i = C64::new(0.0, 1.0);
        Self { label: "sigma_y".into(), entries: CMatrix::from_row_slice(2, 2, &[z, -i, i, z]) }
    }

    pub fn pauli_z() -> Self {
        Self::diagonal("sigma_z", &[1.0, -1.0])
    }

    /// `a * self + b * other`, relabelled.
    pub fn combine(&self, a: f64, other: &ObservableOperator, b: f64, label: impl Into<String>) -> Self {
        let m = &self.entries * C64::new(a, 0.0) + &other.entries * C64::new(b, 0.0);
        Self { label: label.into(), entries: m }
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { label: self.label.clone(), entries: &self.entries * C64::new(a, 0.0) }
    }
}

/// The observer's conditioned state: Hermitian, unit trace, positive semidefinite.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    entries: CMatrix,
}

impl DensityMatrix {
    /// Validates all three invariants.
    pub fn new(entries: CMatrix) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::DimensionMismatch { expected: entries.nrows(), found: entries.ncols() });
        }
        let dev = hermitian_deviation(&entries);
        if dev > HERMITIAN_TOL {
            return Err(Error::InvalidState(format!("not Hermitian (deviation {dev:e})")));
        }
        let tr = entries.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::InvalidState(format!("trace {tr} differs from 1")));
        }
        let rho = Self { entries };
        let min = rho.eigenvalues().into_iter().fold(f64::INFINITY, f64::min);
        if min < -PSD_TOL {
            return Err(Error::StatePositivityViolation(min));
        }
        Ok(rho)
    }

    /// Wraps a matrix the caller guarantees is a valid state.
    pub(crate) fn from_trusted(entries: CMatrix) -> Self {
        Self { entries }
    }

    pub fn from_pure(psi: &CVector) -> Result<Self> {
        let norm = psi.norm();
        if !(norm > 0.0) {
            return Err(Error::InvalidState("zero state vector".into()));
        }
        let v = psi / C64::new(norm, 0.0);
        Ok(Self { entries: &v * v.adjoint() })
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self { entries: CMatrix::identity(dim, dim) / C64::new(dim as f64, 0.0) }
    }

    /// Equal-weight mixture of the given (normalized on entry) vectors.
    pub fn mixture(vectors: &[CVector], weights: &[f64]) -> Result<Self> {
        if vectors.is_empty() || vectors.len() != weights.len() {
            return Err(Error::InvalidState("mixture needs one weight per vector".into()));
        }
        let dim = vectors[0].len();
        let total: f64 = weights.iter().sum();
        let mut m = CMatrix::zeros(dim, dim);
        for (v, &w) in vectors.iter().zip(weights) {
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: v.len() });
            }
            if w < 0.0 {
                return Err(Error::InvalidState("negative mixture weight".into()));
            }
            let n = v.norm();
            let u = v / C64::new(n, 0.0);
            m += (&u * u.adjoint()) * C64::new(w / total, 0.0);
        }
        Ok(Self { entries: m })
    }

    /// Qubit state with the given Bloch vector.
    pub fn from_bloch(r: [f64; 3]) -> Result<Self> {
        let len = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
        if len > 1.0 + 1e-12 {
            return Err(Error::InvalidState(format!("Bloch vector length {len} exceeds 1")));
        }
        let half = C64::new(0.5, 0.0);
        let m = CMatrix::from_row_slice(
            2,
            2,
            &[half * (1.0 + r[2]), C64::new(r[0], -r[1]) * half, C64::new(r[0], r[1]) * half, half * (1.0 - r[2])],
        );
        Ok(Self { entries: m })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.entries
    }

    pub fn into_matrix(self) -> CMatrix {
        self.entries
    }

    /// Real eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        hermitian_eigenvalues(&self.entries)
    }

    /// Bloch vector of a qubit state.
    pub fn bloch(&self) -> Result<[f64; 3]> {
        if self.dim() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, found: self.dim() });
        }
        let m = &self.entries;
        Ok([2.0 * m[(1, 0)].re, 2.0 * m[(1, 0)].im, (m[(0, 0)] - m[(1, 1)]).re])
    }

    /// `U ρ U†` for a unitary `U`.
    pub fn transformed(&self, u: &CMatrix) -> Result<Self> {
        if u.nrows() != self.dim() || u.ncols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: u.nrows() });
        }
        Ok(Self { entries: u * &self.entries * u.adjoint() })
    }

    /// Trace distance `½‖ρ − σ‖₁`.
    pub fn trace_distance(&self, other: &DensityMatrix) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        let diff = &self.entries - &other.entries;
        Ok(0.5 * hermitian_eigenvalues(&diff).iter().map(|l| l.abs()).sum::<f64>())
    }

    /// Overlap `⟨ψ|ρ|ψ⟩` with a normalized vector.
    pub fn population(&self, psi: &CVector) -> Result<f64> {
        check_dims(self.dim(), psi.len())?;
        Ok((psi.adjoint() * &self.entries * psi)[(0, 0)].re)
    }
}

/// Restores the density-matrix invariants after a numerical step.
///
/// Hermiticity and trace are enforced exactly. Eigenvalues in `[-1e-8, 0)`
/// are clipped to zero and the state renormalized; anything more negative
/// is reported as [`Error::StatePositivityViolation`].
pub fn repair_state(mut m: CMatrix) -> Result<DensityMatrix> {
    hermitize(&mut m);
    let tr = m.trace().re;
    if !(tr > 0.0 && tr.is_finite()) {
        return Err(Error::InvalidState(format!("trace {tr} is not positive")));
    }
    m /= C64::new(tr, 0.0);
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOL {
        return Err(Error::StatePositivityViolation(min));
    }
    if min < 0.0 {
        let clipped =
            DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| C64::new(l.max(0.0), 0.0)));
        let v = &eig.eigenvectors;
        let mut rebuilt = v * CMatrix::from_diagonal(&clipped) * v.adjoint();
        hermitize(&mut rebuilt);
        let tr = rebuilt.trace().re;
        rebuilt /= C64::new(tr, 0.0);
        m = rebuilt;
    }
    Ok(DensityMatrix { entries: m })
}

/// Largest tolerated population in the top two Fock levels.
pub const TRUNCATION_LEAK_TOL: f64 = 1e-4;

/// Population of the top two basis levels of a Fock-basis state.
pub fn top_level_population(rho: &CMatrix) -> f64 {
    let n = rho.nrows();
    (n.saturating_sub(2)..n).map(|k| rho[(k, k)].re).sum()
}

/// Errors with [`Error::TruncationLeak`] once the top two levels hold more than 1e-4.
pub fn check_truncation(rho: &CMatrix) -> Result<()> {
    let population = top_level_population(rho);
    if population > TRUNCATION_LEAK_TOL {
        return Err(Error::TruncationLeak { population });
    }
    Ok(())
}

/// `Re Tr[ρA]`; errors when the imaginary part exceeds 1e-8.
pub fn expectation(rho: &DensityMatrix, op: &ObservableOperator) -> Result<f64> {
    check_dims(rho.dim(), op.dim())?;
    let v = trace_product(rho.matrix(), op.matrix());
    if v.im.abs() > IMAG_TOL {
        return Err(Error::NonNegligibleImaginaryPart(v.im));
    }
    Ok(v.re)
}

/// `S = −Σ λ ln λ` with `0 ln 0 = 0`.
pub fn von_neumann_entropy(rho: &DensityMatrix) -> f64 {
    entropy_of_spectrum(&rho.eigenvalues())
}

pub(crate) fn entropy_of_spectrum(eigs: &[f64]) -> f64 {
    eigs.iter().filter(|&&l| l > 0.0).map(|&l| -l * l.ln()).sum::<f64>().max(0.0)
}

/// `Tr[ρ²]`.
pub fn purity(rho: &DensityMatrix) -> f64 {
    rho.matrix().iter().map(|z| z.norm_sqr()).sum()
}

/// `Tr[ρΠ]` with `Π` the reflection `x → −x` on a symmetric periodic grid.
pub fn parity_expectation(rho: &DensityMatrix, grid: &Grid) -> Result<f64> {
    check_dims(rho.dim(), grid.len())?;
    grid.check_symmetric()?;
    let m = rho.matrix();
    let n = grid.len();
    // Tr[ρΠ] = Σ_j ρ_{j, π(j)} with π(j) = (n − j) mod n
    let mut acc = C64::new(0.0, 0.0);
    for j in 0..n {
        acc += m[(j, grid.reflect_index(j))];
    }
    Ok(acc.re)
}

/// `Tr[AB]` without forming the product.
pub(crate) fn trace_product(a: &CMatrix, b: &CMatrix) -> C64 {
    let n = a.nrows();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        for k in 0..n {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

pub(crate) fn hermitian_deviation(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut dev: f64 = 0.0;
    for i in 0..n {
        for j in 0..=i {
            dev = dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    dev
}

pub(crate) fn hermitize(m: &mut CMatrix) {
    let n = m.nrows();
    for i in 0..n {
        m[(i, i)].im = 0.0;
        for j in 0..i {
            let avg = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
    }
}

pub(crate) fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    let mut eigs: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().cloned().collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eigs
}

pub(crate) fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}
