use crate::engine::Stepper;
use crate::error::{Error, Result};
use crate::state::{
    check_dims, check_truncation, hermitize, repair_state, CMatrix, DensityMatrix, ObservableOperator,
    PhysicalConstants, SparseOp, SparseSum, C64,
};

/// How the per-step noise argument is interpreted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SmeNoise {
    /// Innovation `dW`; the record increment is `dW + √γ⟨X⟩dt`.
    Innovation(f64),
    /// Record increment drawn as pure Wiener noise. The state is propagated
    /// with the linear equation and the likelihood ratio accumulates in the
    /// log-weight.
    Reference(f64),
    /// Raw record increment `dr`, as in `dr = ⟨x⟩dt + dW/√γ`.
    Record(f64),
}

/// One step is `ρ → M ρ M†`, normalized, with
/// `M = [f(X) − iεF − ½ε²F²] e^{−iH dt/ħ}`, `ε = u dt/ħ`, and
/// `f(X) = e^{(√γ/2) X dy − (γ/4) X² dt}` expanded through `dt²`.
///
/// `f` is the exact conditional update of a pure `X` measurement, so the
/// expansion stays accurate for broad or displaced states where the usual
/// `I − (γ/8)X²dt + (√γ/2)X dy` form is biased by `O(γ dt ⟨X²⟩)`. The free part is
/// exact. An optional unmonitored dephasing at rate `κ` (a thermal momentum
/// diffusion when `X` is position) is applied afterwards as the average of
/// `e^{±i√(κdt) X}`, which leaves the `X` distribution untouched. Every piece is
/// a sandwich, so the map is positive by construction.
#[derive(Clone, Debug)]
pub struct SmeIntegrator {
    dim: usize,
    gamma: f64,
    dt: f64,
    hbar: f64,
    /// `e^{−iH dt/ħ}`.
    free: CMatrix,
    x: CMatrix,
    measured: SparseOp,
    bath_rate: f64,
    control: Option<CMatrix>,
    leak_check: bool,
    psd_check_every: u64,
    /// Drift, measurement and control parts of `M` on one pattern.
    kraus: SparseSum,
    bath_even: SparseSum,
    bath_odd: SparseSum,
    bath_even_vals: Vec<C64>,
    bath_odd_vals: Vec<C64>,
}

/// Per-trajectory conditioned state and scratch buffers.
#[derive(Clone, Debug)]
pub struct SmeState {
    rho: CMatrix,
    log_weight: f64,
    steps: u64,
    work: CMatrix,
    next: CMatrix,
    bath: CMatrix,
    vals: Vec<C64>,
}

impl SmeState {
    pub fn new(rho: &DensityMatrix) -> Self {
        let n = rho.dim();
        Self {
            rho: rho.matrix().clone(),
            log_weight: 0.0,
            steps: 0,
            work: CMatrix::zeros(n, n),
            next: CMatrix::zeros(n, n),
            bath: CMatrix::zeros(0, 0),
            vals: Vec::new(),
        }
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.rho
    }

    pub fn density(&self) -> DensityMatrix {
        DensityMatrix::from_trusted(self.rho.clone())
    }

    pub fn log_weight(&self) -> f64 {
        self.log_weight
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// `Re Tr[ρA]` without validation.
    pub fn expect(&self, op: &ObservableOperator) -> f64 {
        crate::state::trace_product(&self.rho, op.matrix()).re
    }
}

impl SmeIntegrator {
    pub fn new(
        h: &ObservableOperator,
        x: &ObservableOperator,
        gamma: f64,
        dt: f64,
        constants: PhysicalConstants,
    ) -> Result<Self> {
        check_dims(h.dim(), x.dim())?;
        if gamma < 0.0 || !gamma.is_finite() {
            return Err(Error::NonPositiveGamma(gamma));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let mut s = Self {
            dim: h.dim(),
            gamma,
            dt,
            hbar: constants.hbar,
            free: propagator(h.matrix(), dt / constants.hbar),
            x: x.matrix().clone(),
            measured: SparseOp::from_dense_tol(x.matrix(), 1e-14),
            bath_rate: 0.0,
            control: None,
            leak_check: false,
            psd_check_every: 0,
            kraus: SparseSum::new(&[]),
            bath_even: SparseSum::new(&[]),
            bath_odd: SparseSum::new(&[]),
            bath_even_vals: Vec::new(),
            bath_odd_vals: Vec::new(),
        };
        s.rebuild();
        Ok(s)
    }

    fn rebuild(&mut self) {
        let n = self.dim;
        let sparse = |m: &CMatrix| SparseOp::from_dense_tol(m, 1e-14);
        let mut ops = Vec::with_capacity(7);
        let mut power = CMatrix::identity(n, n);
        for k in 0..=4 {
            if k > 0 {
                power = &power * &self.x;
            }
            ops.push(sparse(&(&power * &self.free)));
        }
        if let Some(f) = &self.control {
            ops.push(sparse(&(f * &self.free)));
            ops.push(sparse(&(f * f * &self.free)));
        }
        self.kraus = SparseSum::new(&ops.iter().collect::<Vec<_>>());
        // Dephasing as the even/odd parts of e^{±iA}, A = √(κdt)X, to fourth order.
        let a = &self.x * C64::new((self.bath_rate * self.dt).sqrt(), 0.0);
        let a2 = &a * &a;
        let half = C64::new(0.5, 0.0);
        let even = CMatrix::identity(n, n) - &a2 * half + &a2 * &a2 * C64::new(1.0 / 24.0, 0.0);
        let odd = &a - &a * &a2 * C64::new(1.0 / 6.0, 0.0);
        self.bath_even = SparseSum::new(&[&sparse(&even)]);
        self.bath_odd = SparseSum::new(&[&sparse(&odd)]);
        let one = [C64::new(1.0, 0.0)];
        self.bath_even.combine_into(&one, &mut self.bath_even_vals);
        self.bath_odd.combine_into(&one, &mut self.bath_odd_vals);
    }

    /// Adds unmonitored `X`-dephasing at rate `κ`; momentum diffusion `κħ²` when `X` is position.
    pub fn with_bath(mut self, kappa: f64) -> Result<Self> {
        if kappa < 0.0 {
            return Err(Error::InvalidParameter(format!("bath rate must be non-negative, got {kappa}")));
        }
        self.bath_rate = kappa;
        self.rebuild();
        Ok(self)
    }

    /// Control Hamiltonian `u·F` applied through [`SmeIntegrator::step`].
    pub fn with_control(mut self, f: &ObservableOperator) -> Result<Self> {
        check_dims(self.dim, f.dim())?;
        self.control = Some(f.matrix().clone());
        self.rebuild();
        Ok(self)
    }

    /// Enables the Fock truncation check after every step.
    pub fn with_leak_check(mut self, on: bool) -> Self {
        self.leak_check = on;
        self
    }

    /// Runs the full eigenvalue repair every `n` steps (0 disables it).
    pub fn with_psd_check_every(mut self, n: u64) -> Self {
        self.psd_check_every = n;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn mean_x(&self, state: &SmeState) -> f64 {
        self.measured.trace_with(&state.rho).re
    }

    /// Advances one step with control amplitude `u`. Returns `⟨X⟩` before the step.
    pub fn step(&self, state: &mut SmeState, noise: SmeNoise, u: f64) -> Result<f64> {
        let mean = self.mean_x(state);
        let sg = self.gamma.sqrt();
        let dy = match noise {
            SmeNoise::Innovation(dw) => dw + sg * mean * self.dt,
            SmeNoise::Reference(dy) => dy,
            SmeNoise::Record(dr) => sg * dr,
        };
        let f = measurement_polynomial(self.gamma, dy, self.dt);
        let eps = u * self.dt / self.hbar;
        let re = |v: f64| C64::new(v, 0.0);
        let coeffs = [re(f[0]), re(f[1]), re(f[2]), re(f[3]), re(f[4]), C64::new(0.0, -eps), re(-0.5 * eps * eps)];
        let SmeState { rho, work, next, bath, vals, .. } = state;
        self.kraus.combine_into(&coeffs, vals);
        self.kraus.sandwich_hermitian(vals, rho, work, next);
        if self.bath_rate > 0.0 {
            if bath.nrows() != self.dim {
                *bath = CMatrix::zeros(self.dim, self.dim);
            }
            self.bath_even.sandwich_hermitian(&self.bath_even_vals, next, work, bath);
            self.bath_odd.sandwich_hermitian(&self.bath_odd_vals, next, work, rho);
            next.copy_from(&*bath);
            *next += &*rho;
        }
        let tr = next.trace().re;
        if !(tr > 0.0 && tr.is_finite()) {
            return Err(Error::InvalidState(format!("trace {tr} after step")));
        }
        if matches!(noise, SmeNoise::Reference(_)) {
            state.log_weight += tr.ln();
        }
        *next /= C64::new(tr, 0.0);
        hermitize(next);
        std::mem::swap(&mut state.rho, &mut state.next);
        state.steps += 1;
        if self.leak_check {
            check_truncation(&state.rho)?;
        }
        if self.psd_check_every > 0 && state.steps % self.psd_check_every == 0 {
            state.rho = repair_state(state.rho.clone())?.into_matrix();
        }
        Ok(mean)
    }
}

/// Coefficients of `1, X, …, X⁴` in `e^{cX + bX²}` through `dt²`, with
/// `c = (√γ/2) dy` and `b = −(γ/4) dt`.
pub(crate) fn measurement_polynomial(gamma: f64, dy: f64, dt: f64) -> [f64; 5] {
    let c = 0.5 * gamma.sqrt() * dy;
    let b = -0.25 * gamma * dt;
    let c2 = c * c;
    [1.0, c, b + 0.5 * c2, c * b + c * c2 / 6.0, 0.5 * b * b + 0.5 * c2 * b + c2 * c2 / 24.0]
}

/// `e^{−iH τ}` for Hermitian `H`; diagonal `H` skips the eigendecomposition.
fn propagator(h: &CMatrix, tau: f64) -> CMatrix {
    let n = h.nrows();
    let scale = h.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let off_diagonal = (0..n).any(|i| (0..n).any(|j| i != j && h[(i, j)].norm() > 1e-14 * scale));
    if !off_diagonal {
        return CMatrix::from_diagonal(&h.diagonal().map(|d| C64::new(0.0, -d.re * tau).exp()));
    }
    let eig = nalgebra::SymmetricEigen::new(h.clone());
    let phases = eig.eigenvalues.map(|l| C64::new(0.0, -l * tau).exp());
    &eig.eigenvectors * CMatrix::from_diagonal(&phases) * eig.eigenvectors.adjoint()
}

/// One conditioned step in the innovation picture. Returns `(ρ', ⟨X⟩)` with
/// `⟨X⟩ = Tr[ρX]` before the step; `ρ'` has passed the PSD repair.
pub fn sme_step(
    rho: &DensityMatrix,
    h: &ObservableOperator,
    x: &ObservableOperator,
    gamma: f64,
    dw: f64,
    dt: f64,
    constants: PhysicalConstants,
) -> Result<(DensityMatrix, f64)> {
    check_dims(rho.dim(), h.dim())?;
    let integ = SmeIntegrator::new(h, x, gamma, dt, constants)?;
    let mut st = SmeState::new(rho);
    let mean = integ.step(&mut st, SmeNoise::Innovation(dw), 0.0)?;
    Ok((repair_state(st.rho)?, mean))
}

/// `dρ/dt = −(i/ħ)[H,ρ] − (γ/8)[X,[X,ρ]]`.
pub fn lindblad_rhs(rho: &CMatrix, h: &CMatrix, x: &CMatrix, gamma: f64, hbar: f64) -> CMatrix {
    let comm = |a: &CMatrix, b: &CMatrix| a * b - b * a;
    comm(h, rho) * C64::new(0.0, -1.0 / hbar) - comm(x, &comm(x, rho)) * C64::new(gamma / 8.0, 0.0)
}

/// Integrates the unconditional master equation with classical RK4.
pub fn evolve_unconditional(
    rho: &DensityMatrix,
    h: &ObservableOperator,
    x: &ObservableOperator,
    gamma: f64,
    t: f64,
    dt: f64,
    constants: PhysicalConstants,
) -> Result<DensityMatrix> {
    check_dims(rho.dim(), h.dim())?;
    check_dims(rho.dim(), x.dim())?;
    let steps = (t / dt).round().max(1.0) as usize;
    let h_ = t / steps as f64;
    let (hm, xm) = (h.matrix(), x.matrix());
    let f = |r: &CMatrix| lindblad_rhs(r, hm, xm, gamma, constants.hbar);
    let mut r = rho.matrix().clone();
    let half = C64::new(0.5 * h_, 0.0);
    let full = C64::new(h_, 0.0);
    for _ in 0..steps {
        let k1 = f(&r);
        let k2 = f(&(&r + &k1 * half));
        let k3 = f(&(&r + &k2 * half));
        let k4 = f(&(&r + &k3 * full));
        r += (k1 + k2 * C64::new(2.0, 0.0) + k3 * C64::new(2.0, 0.0) + k4) * C64::new(h_ / 6.0, 0.0);
    }
    repair_state(r)
}

/// Ensemble stepper for a fixed Hamiltonian and measured observable.
pub struct SmeStepper {
    pub integrator: SmeIntegrator,
    pub initial: DensityMatrix,
}

impl Stepper for SmeStepper {
    type State = SmeState;

    fn initial_state(&self, _index: usize) -> Result<SmeState> {
        Ok(SmeState::new(&self.initial))
    }

    fn step(&self, state: &mut SmeState, dw: f64, _t: f64, _dt: f64) -> Result<()> {
        self.integrator.step(state, SmeNoise::Innovation(dw), 0.0).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::NoiseStream;
    use crate::state::{expectation, purity};

    fn qubit_h(omega: f64, hbar: f64) -> ObservableOperator {
        ObservableOperator::pauli_z().scaled(0.5 * hbar * omega)
    }

    #[test]
    fn free_precession_without_measurement() {
        let c = PhysicalConstants::new(0.6).unwrap();
        let omega = 2.0;
        let dt = 1e-4 / omega;
        let h = qubit_h(omega, c.hbar);
        let x = ObservableOperator::pauli_z();
        let mut rho = DensityMatrix::from_bloch([1.0, 0.0, 0.0]).unwrap();
        let steps = (std::f64::consts::PI / omega / dt).round() as usize;
        for _ in 0..steps {
            rho = sme_step(&rho, &h, &x, 0.0, 0.0, dt, c).unwrap().0;
        }
        let sx = expectation(&rho, &ObservableOperator::pauli_x()).unwrap();
        assert!((sx - (omega * steps as f64 * dt).cos()).abs() < 1e-4, "{sx}");
    }

    #[test]
    fn step_keeps_hermitian_unit_trace_state() {
        let c = PhysicalConstants::default();
        let h = ObservableOperator::pauli_x().scaled(0.3);
        let x = ObservableOperator::pauli_z();
        let mut rho = DensityMatrix::maximally_mixed(2);
        let mut noise = NoiseStream::new(4, 1e-3).unwrap();
        for _ in 0..2000 {
            let (next, mean) = sme_step(&rho, &h, &x, 2.0, noise.next_increment(), 1e-3, c).unwrap();
            assert!(mean.abs() <= 1.0 + 1e-12);
            let m = next.matrix();
            assert!((m.trace().re - 1.0).abs() <= 1e-12);
            assert!(crate::state::hermitian_deviation(m) == 0.0);
            rho = next;
        }
        // rebuilding through the validating constructor succeeds
        assert!(DensityMatrix::new(rho.matrix().clone()).is_ok());
    }

    #[test]
    fn integrator_matches_free_function() {
        let c = PhysicalConstants::new(1.3).unwrap();
        let h = ObservableOperator::pauli_y().scaled(0.7);
        let x = ObservableOperator::pauli_z();
        let integ = SmeIntegrator::new(&h, &x, 1.5, 1e-3, c).unwrap();
        let rho0 = DensityMatrix::from_bloch([0.3, -0.2, 0.5]).unwrap();
        let mut st = SmeState::new(&rho0);
        let mut rho = rho0;
        let mut noise = NoiseStream::new(9, 1e-3).unwrap();
        for _ in 0..500 {
            let dw = noise.next_increment();
            integ.step(&mut st, SmeNoise::Innovation(dw), 0.0).unwrap();
            rho = sme_step(&rho, &h, &x, 1.5, dw, 1e-3, c).unwrap().0;
        }
        assert!((st.matrix() - rho.matrix()).norm() < 1e-10);
    }

    #[test]
    fn record_and_innovation_modes_agree() {
        let c = PhysicalConstants::default();
        let h = ObservableOperator::pauli_x();
        let x = ObservableOperator::pauli_z();
        let gamma = 2.5;
        let dt = 1e-3;
        let integ = SmeIntegrator::new(&h, &x, gamma, dt, c).unwrap();
        let rho0 = DensityMatrix::maximally_mixed(2);
        let (mut a, mut b) = (SmeState::new(&rho0), SmeState::new(&rho0));
        let mut noise = NoiseStream::new(1, dt).unwrap();
        for _ in 0..300 {
            let dw = noise.next_increment();
            let mean = integ.mean_x(&b);
            let dr = crate::engine::synthesize_record(mean, gamma, dw, dt).unwrap();
            integ.step(&mut a, SmeNoise::Innovation(dw), 0.0).unwrap();
            integ.step(&mut b, SmeNoise::Record(dr), 0.0).unwrap();
        }
        assert!((a.matrix() - b.matrix()).norm() < 1e-12);
    }

    #[test]
    fn euler_form_loses_positivity_where_kraus_form_does_not() {
        // a pure state on the equator, measured along z; one large kick
        let gamma: f64 = 1.0;
        let dt: f64 = 1e-2;
        let x = ObservableOperator::pauli_z();
        let h = ObservableOperator::pauli_z().scaled(0.0);
        let rho = DensityMatrix::from_bloch([1.0, 0.0, 0.0]).unwrap();
        let dw = 3.0 * dt.sqrt();
        let xm = x.matrix();
        let r = rho.matrix();
        let mean = 0.0;
        let shifted = xm - CMatrix::identity(2, 2) * C64::new(mean, 0.0);
        let comm = |a: &CMatrix, b: &CMatrix| a * b - b * a;
        let euler = r - comm(xm, &comm(xm, r)) * C64::new(gamma / 8.0 * dt, 0.0)
            + (&shifted * r + r * &shifted) * C64::new(0.5 * gamma.sqrt() * dw, 0.0);
        let min_euler = crate::state::hermitian_eigenvalues(&euler)[0];
        assert!(min_euler < -1e-8);
        let (kraus, _) = sme_step(&rho, &h, &x, gamma, dw, dt, PhysicalConstants::default()).unwrap();
        assert!(kraus.eigenvalues()[0] >= -1e-12);
        assert!((purity(&kraus) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rk4_matches_closed_form_dephasing() {
        // H = 0: coherences decay as exp(−γt/2) for X = σz
        let gamma = 0.8;
        let rho = DensityMatrix::from_bloch([1.0, 0.0, 0.0]).unwrap();
        let h = ObservableOperator::pauli_z().scaled(0.0);
        let out = evolve_unconditional(
            &rho,
            &h,
            &ObservableOperator::pauli_z(),
            gamma,
            2.0,
            1e-3,
            PhysicalConstants::default(),
        )
        .unwrap();
        let sx = out.bloch().unwrap()[0];
        assert!((sx - (-gamma * 2.0 / 2.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn reference_mode_trace_tracks_likelihood() {
        // with H = 0 and X = σz the linear equation is diagonal; the weight of
        // a record Y is the ratio of the two Gaussian likelihoods (z = ±1)
        let gamma: f64 = 1.0;
        let dt = 1e-3;
        let h = ObservableOperator::pauli_z().scaled(0.0);
        let integ =
            SmeIntegrator::new(&h, &ObservableOperator::pauli_z(), gamma, dt, PhysicalConstants::default()).unwrap();
        let mut st = SmeState::new(&DensityMatrix::maximally_mixed(2));
        let mut noise = NoiseStream::new(2, dt).unwrap();
        let mut y = 0.0;
        let n = 2000;
        for _ in 0..n {
            let dy = noise.next_increment();
            y += dy;
            integ.step(&mut st, SmeNoise::Reference(dy), 0.0).unwrap();
        }
        let t = n as f64 * dt;
        let s = gamma.sqrt();
        let expected = 0.5 * ((s * y - 0.5 * gamma * t).exp() + (-s * y - 0.5 * gamma * t).exp());
        assert!((st.log_weight() - expected.ln()).abs() < 0.02, "{} vs {}", st.log_weight(), expected.ln());
        let z = st.density().bloch().unwrap()[2];
        assert!((z - (s * y).tanh()).abs() < 0.02);
    }
}
