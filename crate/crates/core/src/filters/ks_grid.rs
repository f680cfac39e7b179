use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};

/// Cell-centred phase-space grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseGrid {
    x: Vec<f64>,
    p: Vec<f64>,
    dx: f64,
    dp: f64,
}

impl PhaseGrid {
    pub fn new(x_range: (f64, f64), nx: usize, p_range: (f64, f64), np: usize) -> Result<Self> {
        if nx < 4 || np < 4 || !(x_range.1 > x_range.0) || !(p_range.1 > p_range.0) {
            return Err(Error::InvalidBasis("phase grid needs >= 4 cells per axis and increasing ranges".into()));
        }
        let dx = (x_range.1 - x_range.0) / nx as f64;
        let dp = (p_range.1 - p_range.0) / np as f64;
        Ok(Self {
            x: (0..nx).map(|i| x_range.0 + (i as f64 + 0.5) * dx).collect(),
            p: (0..np).map(|j| p_range.0 + (j as f64 + 0.5) * dp).collect(),
            dx,
            dp,
        })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dp
    }
}

/// Conditioned phase-space density, stored row-major as `density[ix·np + ip]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridBelief {
    grid: PhaseGrid,
    density: Vec<f64>,
}

const NEG_TOL: f64 = 1e-9;

impl GridBelief {
    pub fn new(grid: PhaseGrid, density: Vec<f64>) -> Result<Self> {
        if density.len() != grid.x.len() * grid.p.len() {
            return Err(Error::DimensionMismatch { expected: grid.x.len() * grid.p.len(), found: density.len() });
        }
        if let Some(&v) = density.iter().find(|&&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::NegativeDensity(v));
        }
        let b = Self { grid, density };
        let total = b.total();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidState(format!("density integrates to {total}")));
        }
        Ok(b)
    }

    /// Sampled Gaussian, normalized on the grid.
    pub fn gaussian(grid: PhaseGrid, mean: Vector2<f64>, cov: Matrix2<f64>) -> Result<Self> {
        let inv = cov.try_inverse().ok_or_else(|| Error::InvalidState("singular covariance".into()))?;
        let mut density = Vec::with_capacity(grid.x.len() * grid.p.len());
        for &x in &grid.x {
            for &p in &grid.p {
                let d = Vector2::new(x, p) - mean;
                density.push((-0.5 * d.dot(&(inv * d))).exp());
            }
        }
        let total: f64 = density.iter().sum::<f64>() * grid.cell_area();
        density.iter_mut().for_each(|v| *v /= total);
        Self::new(grid, density)
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    /// Riemann sum of the density.
    pub fn total(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.grid.cell_area()
    }

    /// Mean and covariance of `(x, p)`.
    pub fn moments(&self) -> (Vector2<f64>, Matrix2<f64>) {
        let np = self.grid.p.len();
        let (mut s, mut sx, mut sp, mut sxx, mut spp, mut sxp) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for (i, &x) in self.grid.x.iter().enumerate() {
            for (j, &p) in self.grid.p.iter().enumerate() {
                let w = self.density[i * np + j];
                s += w;
                sx += w * x;
                sp += w * p;
                sxx += w * x * x;
                spp += w * p * p;
                sxp += w * x * p;
            }
        }
        let m = Vector2::new(sx / s, sp / s);
        let vxp = sxp / s - m[0] * m[1];
        (m, Matrix2::new(sxx / s - m[0] * m[0], vxp, vxp, spp / s - m[1] * m[1]))
    }

    fn check_resolution(&self) -> Result<()> {
        let (_, cov) = self.moments();
        let sx = cov[(0, 0)].max(0.0).sqrt() / self.grid.dx;
        let sp = cov[(1, 1)].max(0.0).sqrt() / self.grid.dp;
        if sx < 8.0 || sp < 8.0 {
            return Err(Error::GridUnderResolved(format!("{sx:.2} cells per sigma in x, {sp:.2} in p (need >= 8)")));
        }
        Ok(())
    }
}

fn van_leer(r: f64) -> f64 {
    (r + r.abs()) / (1.0 + r.abs())
}

/// Flux-form advection of `u` (stride `stride`, `n` cells) with constant velocity `v`
/// over a cell of width `h`; zero flux through the outer walls.
fn advect_line(u: &mut [f64], start: usize, stride: usize, n: usize, v: f64, dt: f64, h: f64, flux: &mut Vec<f64>) {
    if v == 0.0 {
        return;
    }
    let nu = v.abs() * dt / h;
    let at = |i: isize| -> f64 {
        if i < 0 || i >= n as isize {
            0.0
        } else {
            u[start + i as usize * stride]
        }
    };
    flux.clear();
    flux.resize(n + 1, 0.0);
    for f in 1..n {
        // interface between cells f−1 and f
        let (up, down, upup) = if v > 0.0 {
            (at(f as isize - 1), at(f as isize), at(f as isize - 2))
        } else {
            (at(f as isize), at(f as isize - 1), at(f as isize + 1))
        };
        let jump = down - up;
        let limited = if jump.abs() > 0.0 { van_leer((up - upup) / jump) } else { 0.0 };
        flux[f] = v * (up + 0.5 * (1.0 - nu) * limited * jump);
    }
    for i in 0..n {
        u[start + i * stride] -= dt / h * (flux[i + 1] - flux[i]);
    }
}

/// One Kushner–Stratonovich step for `dP = [−(p/m)∂x − F∂p]P dt + √γ(x − ⟨x⟩)P dW`.
///
/// Advection is Strang-split into upwind sweeps in `x` and `p`; the measurement
/// update multiplies by `exp(√γ(x−⟨x⟩)dW − ½γ(x−⟨x⟩)²dt)` and renormalizes.
#[allow(clippy::too_many_arguments)]
pub fn ks_grid_step(
    b: &GridBelief,
    force: impl Fn(f64, f64) -> f64,
    mass: f64,
    gamma: f64,
    dw: f64,
    dt: f64,
    t: f64,
) -> Result<GridBelief> {
    if gamma < 0.0 {
        return Err(Error::NonPositiveGamma(gamma));
    }
    b.check_resolution()?;
    let g = &b.grid;
    let (nx, np) = (g.x.len(), g.p.len());
    let vmax_x = g.p.iter().map(|p| (p / mass).abs()).fold(0.0, f64::max);
    let forces: Vec<f64> = g.x.iter().map(|&x| force(x, t + 0.5 * dt)).collect();
    let vmax_p = forces.iter().map(|f| f.abs()).fold(0.0, f64::max);
    let cfl = (vmax_x * dt / g.dx).max(vmax_p * dt / g.dp);
    if cfl > 1.0 {
        return Err(Error::InvalidParameter(format!("CFL number {cfl:.3} exceeds 1")));
    }
    let mut u = b.density.clone();
    let mut flux = Vec::new();
    let sweep_x = |u: &mut Vec<f64>, h: f64, flux: &mut Vec<f64>| {
        for (j, &p) in g.p.iter().enumerate() {
            advect_line(u, j, np, nx, p / mass, h, g.dx, flux);
        }
    };
    sweep_x(&mut u, 0.5 * dt, &mut flux);
    for (i, &f) in forces.iter().enumerate() {
        advect_line(&mut u, i * np, 1, np, f, dt, g.dp, &mut flux);
    }
    sweep_x(&mut u, 0.5 * dt, &mut flux);
    for v in u.iter_mut() {
        if *v < 0.0 {
            if *v < -NEG_TOL {
                return Err(Error::NegativeDensity(*v));
            }
            *v = 0.0;
        }
    }
    if gamma > 0.0 {
        let total: f64 = u.iter().sum();
        let mean_x: f64 = (0..nx).map(|i| g.x[i] * u[i * np..(i + 1) * np].iter().sum::<f64>()).sum::<f64>() / total;
        let sg = gamma.sqrt();
        for (i, &x) in g.x.iter().enumerate() {
            let d = x - mean_x;
            let factor = (sg * d * dw - 0.5 * gamma * d * d * dt).exp();
            u[i * np..(i + 1) * np].iter_mut().for_each(|v| *v *= factor);
        }
    }
    let total: f64 = u.iter().sum::<f64>() * g.cell_area();
    u.iter_mut().for_each(|v| *v /= total);
    Ok(GridBelief { grid: g.clone(), density: u })
}

/// Advection only, without renormalization; exposes the conservation property.
pub fn ks_advect_unnormalized(
    b: &GridBelief,
    force: impl Fn(f64, f64) -> f64,
    mass: f64,
    dt: f64,
    t: f64,
) -> Result<f64> {
    let g = &b.grid;
    let (nx, np) = (g.x.len(), g.p.len());
    let mut u = b.density.clone();
    let mut flux = Vec::new();
    for (j, &p) in g.p.iter().enumerate() {
        advect_line(&mut u, j, np, nx, p / mass, dt, g.dx, &mut flux);
    }
    for (i, &x) in g.x.iter().enumerate() {
        advect_line(&mut u, i * np, 1, np, force(x, t), dt, g.dp, &mut flux);
    }
    Ok(u.iter().sum::<f64>() * g.cell_area())
}
