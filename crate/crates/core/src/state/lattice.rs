use std::f64::consts::PI;

use nalgebra::{DVector, SymmetricEigen};

use super::{BasisSpec, CMatrix, CVector, ObservableOperator, PhysicalConstants, C64};
use crate::error::{Error, Result};

/// Uniform periodic position grid `x_j = x_min + j·Δ`, `j = 0..n`.
#[derive(Clone, Debug)]
pub struct Grid {
    x_min: f64,
    x_max: f64,
    mass: f64,
    positions: Vec<f64>,
    wavenumbers: Vec<f64>,
}

impl Grid {
    pub fn from_basis(basis: &BasisSpec) -> Result<Self> {
        basis.validate()?;
        let BasisSpec::Grid { x_min, x_max, n_points, mass } = *basis else {
            return Err(Error::InvalidBasis("expected a grid basis".into()));
        };
        let dx = (x_max - x_min) / n_points as f64;
        let positions = (0..n_points).map(|j| x_min + j as f64 * dx).collect();
        let wavenumbers = (0..n_points)
            .map(|j| {
                let m = if j < n_points / 2 { j as i64 } else { j as i64 - n_points as i64 };
                2.0 * PI * m as f64 / (x_max - x_min)
            })
            .collect();
        Ok(Self { x_min, x_max, mass, positions, wavenumbers })
    }

    /// Grid of `n_points` spanning `[-L/2, L/2)`.
    pub fn symmetric(length: f64, n_points: usize, mass: f64) -> Result<Self> {
        Self::from_basis(&BasisSpec::Grid { x_min: -0.5 * length, x_max: 0.5 * length, n_points, mass })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn length(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn spacing(&self) -> f64 {
        self.length() / self.len() as f64
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    /// Angular wavenumbers in FFT order.
    pub fn wavenumbers(&self) -> &[f64] {
        &self.wavenumbers
    }

    pub fn check_symmetric(&self) -> Result<()> {
        if (self.x_min + self.x_max).abs() > 1e-12 * self.length() {
            return Err(Error::AsymmetricGrid);
        }
        Ok(())
    }

    /// Index of `−x_j` under periodic wrap-around.
    pub fn reflect_index(&self, j: usize) -> usize {
        (self.len() - j) % self.len()
    }

    pub fn parity_matrix(&self) -> Result<CMatrix> {
        self.check_symmetric()?;
        let n = self.len();
        let mut m = CMatrix::zeros(n, n);
        for j in 0..n {
            m[(self.reflect_index(j), j)] = C64::new(1.0, 0.0);
        }
        Ok(m)
    }

    /// `F† diag(f(k)) F` with `F` the unitary DFT.
    pub fn spectral_operator(&self, f: impl Fn(f64) -> f64) -> CMatrix {
        let n = self.len();
        let diag: Vec<f64> = self.wavenumbers.iter().map(|&k| f(k)).collect();
        // (F† D F)_{ab} = (1/n) Σ_j d_j e^{2πi j (a − b)/n}; depends only on a − b
        let kernel: Vec<C64> = (0..n)
            .map(|delta| {
                let mut acc = C64::new(0.0, 0.0);
                for (j, &d) in diag.iter().enumerate() {
                    acc += C64::from_polar(d, 2.0 * PI * (j * delta % n) as f64 / n as f64);
                }
                acc / n as f64
            })
            .collect();
        CMatrix::from_fn(n, n, |a, b| kernel[(a + n - b) % n])
    }

    pub fn kinetic_matrix(&self, constants: PhysicalConstants) -> CMatrix {
        let hbar = constants.hbar;
        let mass = self.mass;
        self.spectral_operator(|k| hbar * hbar * k * k / (2.0 * mass))
    }

    /// Spectral momentum `−iħ∂ₓ` with the Nyquist mode removed so that `ΠPΠ = −P`.
    pub fn momentum_matrix(&self, constants: PhysicalConstants) -> CMatrix {
        let hbar = constants.hbar;
        let nyquist = PI / self.spacing();
        self.spectral_operator(|k| if (k.abs() - nyquist).abs() < 1e-9 * nyquist { 0.0 } else { hbar * k })
    }

    /// Normalized Gaussian wavepacket sampled on the grid (periodic images summed).
    pub fn gaussian(&self, center: f64, width: f64, momentum: f64, constants: PhysicalConstants) -> CVector {
        let l = self.length();
        let mut v = CVector::from_iterator(
            self.len(),
            self.positions.iter().map(|&x| {
                let mut acc = C64::new(0.0, 0.0);
                for image in -2..=2 {
                    let d = x - center + image as f64 * l;
                    let amp = (-d * d / (4.0 * width * width)).exp();
                    acc += C64::from_polar(amp, momentum * d / constants.hbar);
                }
                acc
            }),
        );
        let norm = v.norm();
        v /= C64::new(norm, 0.0);
        v
    }
}

/// Optical-lattice Hamiltonian `H = P²/2m + V₀cos²(kx)` and the operator `cos²(kX)`.
#[derive(Clone, Debug)]
pub struct Lattice {
    pub grid: Grid,
    pub depth: f64,
    pub wavenumber: f64,
    pub hamiltonian: ObservableOperator,
    pub kinetic: ObservableOperator,
    /// `cos²(kX)`, diagonal on the grid.
    pub potential_shape: ObservableOperator,
}

impl Lattice {
    /// Eigenvalues (ascending) and the matching normalized eigenvectors.
    pub fn eigenstates(&self) -> (Vec<f64>, Vec<CVector>) {
        eigenstates_of(self.hamiltonian.matrix())
    }

    /// Values of `cos²(kx)` on the grid.
    pub fn shape_values(&self) -> Vec<f64> {
        self.grid.positions().iter().map(|&x| (self.wavenumber * x).cos().powi(2)).collect()
    }

    /// Values of `d/dx cos²(kx) = −k sin(2kx)` on the grid.
    pub fn shape_slope_values(&self) -> Vec<f64> {
        self.grid.positions().iter().map(|&x| -self.wavenumber * (2.0 * self.wavenumber * x).sin()).collect()
    }

    /// Harmonic frequency at the bottom of a well of depth `v0`.
    pub fn well_frequency(&self, v0: f64) -> f64 {
        self.wavenumber * (2.0 * v0.abs() / self.grid.mass()).sqrt()
    }

    /// Same grid and kinetic term with a different depth.
    pub fn with_depth(&self, v0: f64) -> Lattice {
        let shape = self.potential_shape.matrix();
        let h = self.kinetic.matrix() + shape * C64::new(v0, 0.0);
        Lattice {
            grid: self.grid.clone(),
            depth: v0,
            wavenumber: self.wavenumber,
            hamiltonian: ObservableOperator::from_hermitian_part("H", h),
            kinetic: self.kinetic.clone(),
            potential_shape: self.potential_shape.clone(),
        }
    }
}

pub(crate) fn eigenstates_of(m: &CMatrix) -> (Vec<f64>, Vec<CVector>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    (values, vectors)
}

pub fn build_lattice(v0: f64, k: f64, basis: &BasisSpec, constants: PhysicalConstants) -> Result<Lattice> {
    let grid = Grid::from_basis(basis)?;
    if !(k > 0.0) {
        return Err(Error::InvalidParameter(format!("wavenumber must be positive, got {k}")));
    }
    let period = PI / k;
    let periods = grid.length() / period;
    if periods < 1.0 - 1e-9 || (periods - periods.round()).abs() > 1e-9 * periods.max(1.0) {
        return Err(Error::InvalidBasis(format!(
            "grid length must be a whole number (>= 1) of lattice periods, got {periods}"
        )));
    }
    let points_per_period = grid.len() as f64 / periods.round();
    if points_per_period < 16.0 {
        return Err(Error::GridTooCoarse { points_per_period });
    }
    let shape: Vec<f64> = grid.positions().iter().map(|&x| (k * x).cos().powi(2)).collect();
    let vop = ObservableOperator::diagonal("cos2kx", &shape);
    let kinetic = ObservableOperator::from_hermitian_part("T", grid.kinetic_matrix(constants));
    let diag = DVector::from_iterator(shape.len(), shape.iter().map(|&s| C64::new(v0 * s, 0.0)));
    let h = kinetic.matrix() + CMatrix::from_diagonal(&diag);
    Ok(Lattice {
        grid,
        depth: v0,
        wavenumber: k,
        hamiltonian: ObservableOperator::from_hermitian_part("H", h),
        kinetic,
        potential_shape: vop,
    })
}
