use qfeedback::adaptive::*;
use qfeedback::engine::TrajectoryConfig;
use qfeedback::state::{DensityMatrix, C64};

const INF: QubitFeedbackPolicy = QubitFeedbackPolicy::RapidPurification { rate: None };

fn run(policy: QubitFeedbackPolicy, gamma: f64, t: f64, n: usize, sampling: Sampling) -> PurificationStats {
    let cfg = TrajectoryConfig::new(1e-3 / gamma, t / gamma, 21, n).unwrap().with_record_every(50);
    purification_experiment(policy, gamma, &cfg, 0.55, sampling).unwrap()
}

#[test]
fn instantaneous_policy_purifies_deterministically() {
    let fixed = run(QubitFeedbackPolicy::Fixed, 1.0, 2.0, 400, Sampling::Physical);
    let adapt = run(INF, 1.0, 2.0, 400, Sampling::Physical);
    let k = fixed.times.len() / 2;
    assert!(adapt.entropy_variance[k] <= 0.01 * fixed.entropy_variance[k]);
    for (t, imp) in adapt.times.iter().zip(&adapt.avg_impurity) {
        assert!((imp - 0.5 * (-t).exp()).abs() < 2e-3, "{t}: {imp}");
    }
}

#[test]
fn average_purity_never_decreases() {
    for policy in [QubitFeedbackPolicy::Fixed, INF, QubitFeedbackPolicy::RapidPurification { rate: Some(20.0) }] {
        let s = run(policy, 1.0, 3.0, 1000, Sampling::Physical);
        for k in 1..s.times.len() {
            let drop = s.avg_purity[k - 1] - s.avg_purity[k];
            let tol = 3.0 * (s.purity_stderr[k].powi(2) + s.purity_stderr[k - 1].powi(2)).sqrt();
            assert!(drop <= tol + 1e-12, "{policy:?} at {}: drop {drop}", s.times[k]);
        }
    }
}

#[test]
fn fixed_measurement_is_an_unbiased_walk() {
    let stepper = PurificationStepper {
        policy: QubitFeedbackPolicy::Fixed,
        gamma: 1.0,
        sampling: Sampling::Physical,
        target_purity: 0.99,
        initial: DensityMatrix::maximally_mixed(2),
    };
    let cfg = TrajectoryConfig::new(1e-3, 1.0, 5, 2000).unwrap().with_record_every(100);
    let obs = [qfeedback::engine::Observable::new("z", |s: &QubitTrajectory| s.bloch_z())];
    let res = qfeedback::engine::run_ensemble(&stepper, &cfg, &obs).unwrap();
    let z = res.curve("z").unwrap();
    for (m, e) in z.mean.iter().zip(&z.stderr) {
        assert!(m.abs() <= 3.0 * e + 1e-12);
    }
}

#[test]
fn curves_collapse_under_rate_rescaling() {
    for policy in [QubitFeedbackPolicy::Fixed, INF] {
        let a = run(policy, 1.0, 3.0, 500, Sampling::Physical);
        let b = run(policy, 4.0, 3.0, 500, Sampling::Physical);
        let dev = a.avg_entropy.iter().zip(&b.avg_entropy).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(dev <= 0.02 * a.avg_entropy[0], "{policy:?}: {dev}");
    }
}

#[test]
fn unreached_target_is_reported() {
    let cfg = TrajectoryConfig::new(1e-3, 0.05, 1, 50).unwrap();
    let err = purification_experiment(QubitFeedbackPolicy::Fixed, 1.0, &cfg, 0.99, Sampling::Physical).unwrap_err();
    assert!(matches!(err, qfeedback::Error::TargetNotReached { unreached: 50, total: 50 }));
}

#[test]
fn helstrom_is_symmetric_and_vanishes_for_orthogonal_states() {
    let r0 = DensityMatrix::from_bloch([0.2, -0.3, 0.5]).unwrap();
    let r1 = DensityMatrix::from_bloch([-0.6, 0.1, 0.0]).unwrap();
    for p in [0.1, 0.5, 0.73] {
        let a = helstrom_bound(&r0, &r1, p).unwrap();
        let b = helstrom_bound(&r1, &r0, 1.0 - p).unwrap();
        assert!((a - b).abs() < 1e-12);
        let up = DensityMatrix::from_bloch([0.0, 0.0, 1.0]).unwrap();
        let down = DensityMatrix::from_bloch([0.0, 0.0, -1.0]).unwrap();
        assert!(helstrom_bound(&up, &down, p).unwrap().abs() < 1e-12);
    }
    assert!(helstrom_bound(&r0, &DensityMatrix::maximally_mixed(3), 0.5).is_err());
}

#[test]
fn finer_segments_approach_helstrom_from_above() {
    let trials = 40_000;
    let h = helstrom_coherent(1.0, 0.5);
    let mut prev: Option<ErrorEstimate> = None;
    for n in [25, 50, 100, 200] {
        let est = dolinar_simulate(&DolinarConfig::new(C64::new(1.0, 0.0), n), 9, trials).unwrap();
        assert!(est.error >= h - 3.0 * est.stderr, "{n}: {} below {h}", est.error);
        if let Some(p) = prev {
            let tol = 3.0 * (p.stderr.powi(2) + est.stderr.powi(2)).sqrt();
            assert!(est.error <= p.error + tol, "{n}: {} after {}", est.error, p.error);
        }
        prev = Some(est);
    }
}
