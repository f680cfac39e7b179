//! Riccati solutions, LQG synthesis and the search over measurement strength.

use nalgebra::{Complex, Matrix2, Matrix4, SymmetricEigen, Vector2, SVD};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::filters::LinearMeasuredModel;

type C = Complex<f64>;

/// Weights of the average cost `lim (1/T) E∫(xᵀQx + R u²) dt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraticCost {
    pub q: Matrix2<f64>,
    pub r: f64,
}

impl QuadraticCost {
    pub fn new(q: Matrix2<f64>, r: f64) -> Result<Self> {
        if (q[(0, 1)] - q[(1, 0)]).abs() > 1e-12 || SymmetricEigen::new(q).eigenvalues.min() < -1e-12 {
            return Err(Error::InvalidParameter("Q must be symmetric positive semidefinite".into()));
        }
        if !(r > 0.0) {
            return Err(Error::InvalidParameter(format!("R must be positive, got {r}")));
        }
        Ok(Self { q, r })
    }

    /// Oscillator energy `p²/2m + ½mω²x²` with control weight `r`.
    pub fn oscillator_energy(mass: f64, omega: f64, r: f64) -> Result<Self> {
        Self::new(Matrix2::new(0.5 * mass * omega * omega, 0.0, 0.0, 0.5 / mass), r)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { q: self.q * c, r: self.r * c }
    }
}

/// Optimal output feedback `u = −K x̂` with its steady-state predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlLaw {
    pub gain: Vector2<f64>,
    /// Control Riccati solution.
    pub control_riccati: Matrix2<f64>,
    /// Steady conditional covariance of the filter.
    pub filter_cov: Matrix2<f64>,
    /// Covariance of the estimate `x̂` about zero.
    pub estimate_cov: Matrix2<f64>,
    /// Covariance of the true state, `estimate_cov + filter_cov`.
    pub predicted_steady_cov: Matrix2<f64>,
    /// `Tr[QΣx] + R·KΣx̂Kᵀ`.
    pub predicted_steady_cost: f64,
    /// `Tr[QΣx]`, the state part of the cost.
    pub predicted_state_cost: f64,
    pub closed_loop_eigenvalues: [C; 2],
}

/// Residual `AᵀP + PA − PBR⁻¹BᵀP + Q`.
pub fn care_residual(a: &Matrix2<f64>, b: &Vector2<f64>, q: &Matrix2<f64>, r: f64, p: &Matrix2<f64>) -> Matrix2<f64> {
    let pb = p * b;
    a.transpose() * p + p * a - pb * pb.transpose() / r + q
}

/// Solves `A X + X Aᵀ + W = 0`.
pub fn solve_lyapunov(a: &Matrix2<f64>, w: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    let i = Matrix2::<f64>::identity();
    let mut k = Matrix4::zeros();
    // vec is column-major: vec(AX) = (I⊗A)vec X, vec(XAᵀ) = (A⊗I)vec X
    for r in 0..2 {
        for c in 0..2 {
            for rr in 0..2 {
                for cc in 0..2 {
                    k[(2 * r + rr, 2 * c + cc)] = i[(r, c)] * a[(rr, cc)] + a[(r, c)] * i[(rr, cc)];
                }
            }
        }
    }
    let rhs = nalgebra::Vector4::new(-w[(0, 0)], -w[(1, 0)], -w[(0, 1)], -w[(1, 1)]);
    let x = k.lu().solve(&rhs).ok_or_else(|| Error::NoConvergence("singular Lyapunov operator".into()))?;
    let mut out = Matrix2::new(x[0], x[2], x[1], x[3]);
    out = (out + out.transpose()) * 0.5;
    Ok(out)
}

fn eigenvalues2(m: &Matrix2<f64>) -> [C; 2] {
    let tr = m.trace();
    let det = m.determinant();
    let disc = C::new(tr * tr / 4.0 - det, 0.0).sqrt();
    [C::new(tr / 2.0, 0.0) + disc, C::new(tr / 2.0, 0.0) - disc]
}

fn is_stabilizable(a: &Matrix2<f64>, b: &Vector2<f64>) -> bool {
    eigenvalues2(a).iter().filter(|l| l.re >= -1e-12).all(|&l| {
        // PBH: rank [A − λI, B] = 2
        let mut m = nalgebra::Matrix2x3::<C>::zeros();
        for r in 0..2 {
            for c in 0..2 {
                m[(r, c)] = C::new(a[(r, c)], 0.0) - if r == c { l } else { C::new(0.0, 0.0) };
            }
            m[(r, 2)] = C::new(b[r], 0.0);
        }
        let sv = SVD::new(m, false, false).singular_values;
        sv.min() > 1e-10 * sv.max().max(1.0)
    })
}

/// Stable invariant subspace of the Hamiltonian matrix.
fn hamiltonian_guess(a: &Matrix2<f64>, b: &Vector2<f64>, q: &Matrix2<f64>, r: f64) -> Option<Matrix2<f64>> {
    let s = b * b.transpose() / r;
    let mut h = Matrix4::<f64>::zeros();
    h.fixed_view_mut::<2, 2>(0, 0).copy_from(a);
    h.fixed_view_mut::<2, 2>(0, 2).copy_from(&(-s));
    h.fixed_view_mut::<2, 2>(2, 0).copy_from(&(-q));
    h.fixed_view_mut::<2, 2>(2, 2).copy_from(&(-a.transpose()));
    let scale = h.norm().max(1.0);
    // Hamiltonian spectra are symmetric under λ → −λ, so the characteristic
    // polynomial is z² + e₂z + det H in z = λ²
    let e2 = -0.5 * (h * h).trace();
    let disc = C::new(e2 * e2 - 4.0 * h.determinant(), 0.0).sqrt();
    let mut stable = Vec::with_capacity(2);
    for z in [(-disc - e2) * 0.5, (disc - e2) * 0.5] {
        let root = z.sqrt();
        let l = if root.re > 0.0 { -root } else { root };
        if l.re >= -1e-9 * scale {
            return None;
        }
        stable.push(l);
    }
    stable.sort_by(|x, y| x.im.partial_cmp(&y.im).unwrap());
    let hc = h.map(|v| C::new(v, 0.0));
    let mut basis: Vec<nalgebra::Vector4<C>> = Vec::new();
    let mut i = 0;
    while i < stable.len() {
        // cluster numerically repeated eigenvalues
        let mut mult = 1;
        while i + mult < stable.len() && (stable[i + mult] - stable[i]).norm() < 1e-6 * scale {
            mult += 1;
        }
        let shifted = hc - Matrix4::<C>::identity() * stable[i];
        let svd = SVD::new(shifted, false, true);
        let vt = svd.v_t?;
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&x, &y| svd.singular_values[x].partial_cmp(&svd.singular_values[y]).unwrap());
        for &k in order.iter().take(mult) {
            basis.push(vt.row(k).adjoint());
        }
        i += mult;
    }
    let mut u1 = nalgebra::Matrix2::<C>::zeros();
    let mut u2 = nalgebra::Matrix2::<C>::zeros();
    for (col, v) in basis.iter().enumerate() {
        for r in 0..2 {
            u1[(r, col)] = v[r];
            u2[(r, col)] = v[r + 2];
        }
    }
    let p = u2 * u1.try_inverse()?;
    let p = p.map(|z| z.re);
    Some((p + p.transpose()) * 0.5)
}

/// Stabilizing solution of `AᵀP + PA − PBR⁻¹BᵀP + Q = 0`.
///
/// The stable invariant subspace of the Hamiltonian matrix gives the initial
/// solution, which Newton–Kleinman iterations then polish to a residual below 1e-8.
pub fn solve_care(a: &Matrix2<f64>, b: &Vector2<f64>, q: &Matrix2<f64>, r: f64) -> Result<Matrix2<f64>> {
    if !(r > 0.0) {
        return Err(Error::InvalidParameter(format!("R must be positive, got {r}")));
    }
    if !is_stabilizable(a, b) {
        return Err(Error::NotStabilizable);
    }
    let mut p = hamiltonian_guess(a, b, q, r)
        .ok_or_else(|| Error::NoConvergence("Hamiltonian matrix has eigenvalues on the imaginary axis".into()))?;
    let scale = q.norm().max(p.norm()).max(1.0);
    for _ in 0..50 {
        let k = b.transpose() * p / r;
        let acl = a - b * k;
        if eigenvalues2(&acl).iter().any(|l| l.re >= 0.0) {
            break;
        }
        let next = solve_lyapunov(&acl.transpose(), &(q + k.transpose() * k * r))?;
        let change = (next - p).norm();
        p = next;
        if change <= 1e-15 * scale {
            break;
        }
    }
    let res = care_residual(a, b, q, r, &p).norm();
    if !(res <= 1e-8) {
        return Err(Error::NoConvergence(format!("CARE residual {res:e}")));
    }
    if SymmetricEigen::new(p).eigenvalues.min() < -1e-9 * scale {
        return Err(Error::NoConvergence("CARE solution is not positive semidefinite".into()));
    }
    Ok(p)
}

/// Steady conditional covariance of the Kalman–Bucy filter for `model`.
pub fn steady_filter_covariance(model: &LinearMeasuredModel) -> Result<Matrix2<f64>> {
    solve_care(&model.a.transpose(), &model.c, &model.diffusion, 1.0 / model.gamma)
}

/// Separation-principle LQG design.
pub fn synthesize_lqg(model: &LinearMeasuredModel, cost: &QuadraticCost) -> Result<ControlLaw> {
    let p = solve_care(&model.a, &model.b, &cost.q, cost.r)?;
    let gain = (model.b.transpose() * p / cost.r).transpose();
    let v = steady_filter_covariance(model)?;
    let acl = model.a - model.b * gain.transpose();
    let closed_loop_eigenvalues = eigenvalues2(&acl);
    if closed_loop_eigenvalues.iter().any(|l| l.re >= 0.0) {
        return Err(Error::NoConvergence("closed loop is not Hurwitz".into()));
    }
    let vc = v * model.c;
    let estimate_cov = solve_lyapunov(&acl, &(vc * vc.transpose() * model.gamma))?;
    let total = estimate_cov + v;
    let state_cost = (cost.q * total).trace();
    let control_cost = cost.r * (gain.transpose() * estimate_cov * gain)[(0, 0)];
    Ok(ControlLaw {
        gain,
        control_riccati: p,
        filter_cov: v,
        estimate_cov,
        predicted_steady_cov: total,
        predicted_steady_cost: state_cost + control_cost,
        predicted_state_cost: state_cost,
        closed_loop_eigenvalues,
    })
}

/// Outcome of [`optimize_measurement_strength`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GammaScan {
    pub gamma_star: f64,
    pub cost_star: f64,
    pub gammas: Vec<f64>,
    pub costs: Vec<f64>,
}

/// Minimizes the predicted LQG cost over `γ ∈ range`.
///
/// A log-spaced grid brackets the minimum, golden-section search in `ln γ`
/// refines it to 1e-3 relative.
pub fn optimize_measurement_strength(
    family: impl Fn(f64) -> Result<LinearMeasuredModel>,
    cost: &QuadraticCost,
    range: (f64, f64),
    n_grid: usize,
) -> Result<GammaScan> {
    let (lo, hi) = range;
    if !(lo > 0.0 && hi > lo) || n_grid < 3 {
        return Err(Error::InvalidParameter("need 0 < lo < hi and at least 3 grid points".into()));
    }
    let eval = |g: f64| -> Result<f64> { Ok(synthesize_lqg(&family(g)?, cost)?.predicted_steady_cost) };
    let step = (hi / lo).ln() / (n_grid - 1) as f64;
    let gammas: Vec<f64> = (0..n_grid).map(|i| lo * (step * i as f64).exp()).collect();
    let costs = gammas.iter().map(|&g| eval(g)).collect::<Result<Vec<_>>>()?;
    let best = costs.iter().enumerate().min_by(|a, b| a.1.partial_cmp(b.1).unwrap()).map(|(i, _)| i).unwrap();
    if best == 0 {
        return Err(Error::MinimumOnBoundary { gamma: gammas[0], edge: "lower" });
    }
    if best == n_grid - 1 {
        return Err(Error::MinimumOnBoundary { gamma: gammas[n_grid - 1], edge: "upper" });
    }
    let (mut a, mut b) = (gammas[best - 1].ln(), gammas[best + 1].ln());
    let invphi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - invphi * (b - a);
    let mut d = a + invphi * (b - a);
    let mut fc = eval(c.exp())?;
    let mut fd = eval(d.exp())?;
    while b - a > 1e-4 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - invphi * (b - a);
            fc = eval(c.exp())?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * (b - a);
            fd = eval(d.exp())?;
        }
    }
    let gamma_star = (0.5 * (a + b)).exp();
    Ok(GammaScan { gamma_star, cost_star: eval(gamma_star)?, gammas, costs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::{backaction_diffusion, LinearMeasuredModel};

    fn osc_family(hbar: f64, thermal: f64) -> impl Fn(f64) -> Result<LinearMeasuredModel> {
        move |g| LinearMeasuredModel::measured_oscillator(1.0, 1.0, g, hbar, thermal)
    }

    #[test]
    fn scalar_like_instance() {
        // decoupled second mode: a = 0, b = 1, q = r = 1 gives P = 1 in the first block
        let a = Matrix2::new(0.0, 0.0, 0.0, -1.0);
        let b = Vector2::new(1.0, 0.0);
        let q = Matrix2::new(1.0, 0.0, 0.0, 0.0);
        let p = solve_care(&a, &b, &q, 1.0).unwrap();
        // oracle: scalar CARE 2ap − p²b²/r + q = 0 → p = r(a + √(a² + b²q/r))/b²
        assert!((p[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(p[(1, 1)].abs() < 1e-12 && p[(0, 1)].abs() < 1e-12);
        let k = b.transpose() * p;
        assert!((k[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_cost_with_hurwitz_drift() {
        let a = Matrix2::new(-1.0, 0.3, -0.2, -2.0);
        let p = solve_care(&a, &Vector2::new(0.0, 1.0), &Matrix2::zeros(), 0.5).unwrap();
        assert!(p.norm() < 1e-12);
    }

    #[test]
    fn unstabilizable_pair_rejected() {
        let a = Matrix2::new(1.0, 0.0, 0.0, -1.0);
        let b = Vector2::new(0.0, 1.0);
        assert!(matches!(solve_care(&a, &b, &Matrix2::identity(), 1.0), Err(Error::NotStabilizable)));
    }

    #[test]
    fn lyapunov_solution_satisfies_equation() {
        let a = Matrix2::new(-0.5, 1.0, -2.0, -0.3);
        let w = Matrix2::new(1.0, 0.2, 0.2, 0.7);
        let x = solve_lyapunov(&a, &w).unwrap();
        assert!((a * x + x * a.transpose() + w).norm() < 1e-12);
    }

    #[test]
    fn gain_invariant_under_joint_scaling() {
        let model = LinearMeasuredModel::measured_oscillator(1.0, 1.0, 2.0, 1.0, 0.1).unwrap();
        let cost = QuadraticCost::oscillator_energy(1.0, 1.0, 0.05).unwrap();
        let a = synthesize_lqg(&model, &cost).unwrap();
        let b = synthesize_lqg(&model, &cost.scaled(7.3)).unwrap();
        assert!((a.gain - b.gain).norm() <= 1e-10);
        assert!((b.predicted_steady_cost - 7.3 * a.predicted_steady_cost).abs() < 1e-9);
    }

    #[test]
    fn noiseless_limit_has_vanishing_cost() {
        let cost = QuadraticCost::oscillator_energy(1.0, 1.0, 0.1).unwrap();
        let mut last = f64::INFINITY;
        for eps in [1e-1, 1e-2, 1e-3, 1e-4] {
            let mut model = LinearMeasuredModel::measured_oscillator(1.0, 1.0, 1.0 / eps, 1.0, 0.0).unwrap();
            model.diffusion = Matrix2::new(0.0, 0.0, 0.0, eps);
            let j = synthesize_lqg(&model, &cost).unwrap().predicted_steady_cost;
            assert!(j < last);
            last = j;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn filter_covariance_is_fixed_point_of_flow() {
        let model = LinearMeasuredModel::measured_oscillator(1.0, 1.0, 3.0, 1.0, 0.2).unwrap();
        let v = steady_filter_covariance(&model).unwrap();
        let flowed = crate::filters::riccati_flow(&model, &Matrix2::new(0.5, 0.0, 0.0, 0.5), 60.0, 1e-3);
        assert!((flowed - v).norm() < 1e-9);
    }

    #[test]
    fn quantum_cost_curve_is_u_shaped() {
        let cost = QuadraticCost::oscillator_energy(1.0, 1.0, 0.01).unwrap();
        let scan = optimize_measurement_strength(osc_family(1.0, 1.05), &cost, (1e-3, 1e4), 57).unwrap();
        let n = scan.costs.len();
        assert!(scan.costs[0] > 10.0 * scan.cost_star);
        assert!(scan.costs[n - 1] > 10.0 * scan.cost_star);
        let gs = scan.gamma_star;
        assert!(
            scan.cost_star
                <= synthesize_lqg(&osc_family(1.0, 1.05)(gs * 1.01).unwrap(), &cost).unwrap().predicted_steady_cost
        );
        assert!(
            scan.cost_star
                <= synthesize_lqg(&osc_family(1.0, 1.05)(gs / 1.01).unwrap(), &cost).unwrap().predicted_steady_cost
        );
    }

    #[test]
    fn classical_limit_prefers_strongest_measurement() {
        let cost = QuadraticCost::oscillator_energy(1.0, 1.0, 0.01).unwrap();
        let family = |g: f64| {
            let mut m = LinearMeasuredModel::measured_oscillator(1.0, 1.0, g, 1.0, 1.05)?;
            m.diffusion[(1, 1)] -= backaction_diffusion(g, 1.0);
            Ok(m)
        };
        match optimize_measurement_strength(family, &cost, (1e-2, 1e3), 21) {
            Err(Error::MinimumOnBoundary { edge: "upper", .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn optimum_invariant_under_cost_scaling() {
        let cost = QuadraticCost::oscillator_energy(1.0, 1.0, 0.01).unwrap();
        let a = optimize_measurement_strength(osc_family(1.0, 1.05), &cost, (1e-2, 1e3), 31).unwrap();
        let b = optimize_measurement_strength(osc_family(1.0, 1.05), &cost.scaled(2.0), (1e-2, 1e3), 31).unwrap();
        assert!((a.gamma_star / b.gamma_star - 1.0).abs() < 1e-3);
        assert!((b.cost_star - 2.0 * a.cost_star).abs() < 1e-9 * b.cost_star.max(1.0));
    }
}
