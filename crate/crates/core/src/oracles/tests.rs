use super::*;
use proptest::prelude::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn q_filter_cases() {
    assert_eq!(q_filter(0.0, 0.01, 37), 0.37);
    // Single step is just η.
    assert!((q_filter(3.0, 0.1, 1) - 0.1).abs() < 1e-15);
    // Explicit geometric sum.
    let (l, eta, s): (f64, f64, i32) = (0.7, 0.2, 9);
    let direct: f64 = (0..s).map(|k| eta * (1.0 - eta * l).powi(k)).sum();
    assert!((q_filter(l, eta, s as usize) - direct).abs() < 1e-14);
    // Tiny curvature stays close to ηS without cancellation.
    let tiny = q_filter(1e-12, 0.1, 100);
    assert!((tiny - 10.0).abs() < 1e-9);
    // Many steps approach 1/λ.
    assert!((q_filter(2.0, 0.25, 10_000) - 0.5).abs() < 1e-15);
}

#[test]
fn spectral_norm_matches_eigenvalues() {
    let mut r = rng(1);
    for dim in [1, 3, 10, 25] {
        let p = QuadraticProblem::random(dim, 10, 0.0, &mut r).unwrap();
        let (eig, _) = symmetric_eigen(&p.h).unwrap();
        let top = eig.iter().copied().fold(0.0, f64::max);
        let est = spectral_norm(&p.h).unwrap();
        assert!((est - top).abs() <= 1e-6 * top.max(1.0), "{est} vs {top}");
    }
    assert_eq!(spectral_norm(&Matrix::zeros(3, 3)).unwrap(), 0.0);
    assert!(spectral_norm(&Matrix::zeros(2, 3)).is_err());
}

#[test]
fn eigen_reconstructs_matrix() {
    let mut r = rng(2);
    let p = QuadraticProblem::random(12, 1, 0.0, &mut r).unwrap();
    let (eig, v) = symmetric_eigen(&p.h).unwrap();
    let rebuilt = Matrix::from_fn(12, 12, |i, j| (0..12).map(|k| v.get(i, k) * eig[k] * v.get(j, k)).sum());
    for (a, b) in rebuilt.data().iter().zip(p.h.data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn closed_form_matches_gd() {
    let mut r = rng(3);
    for (dim, steps) in [(1, 1), (2, 50), (16, 200), (40, 7)] {
        let p = QuadraticProblem::random(dim, steps, 0.0, &mut r).unwrap();
        let err = relative_error(&closed_form_displacement(&p).unwrap(), &simulate_gd(&p).unwrap());
        assert!(err <= 1e-8, "d={dim} S={steps}: {err}");
    }
}

#[test]
fn problem_validation() {
    let mut r = rng(4);
    let mut p = QuadraticProblem::random(4, 5, 0.0, &mut r).unwrap();
    p.eta *= 5.0;
    assert!(simulate_gd(&p).is_err(), "η ≥ 2/‖H‖ must be refused");
    let mut q = QuadraticProblem::random(3, 5, 0.0, &mut r).unwrap();
    q.h.set(0, 1, q.h.get(0, 1) + 1.0);
    assert!(q.validate().is_err());
    let neg = QuadraticProblem {
        h: Matrix::from_vec(1, 1, vec![-1.0]).unwrap(),
        g: vec![1.0],
        eta: 0.1,
        steps: 2,
    };
    assert!(neg.validate().is_err());
}

#[test]
fn solve_spd_cases() {
    let h = Matrix::from_vec(2, 2, vec![4.0, 2.0, 2.0, 3.0]).unwrap();
    let x = solve_spd(&h, &[2.0, 1.0]).unwrap();
    assert!((x[0] - 0.5).abs() < 1e-15 && x[1].abs() < 1e-15);
    assert!(solve_spd(&Matrix::zeros(2, 2), &[1.0, 1.0]).is_err());
}

#[test]
fn relative_error_cases() {
    assert_eq!(relative_error(&[3.0, 4.0], &[3.0, 4.0]), 0.0);
    assert_eq!(relative_error(&[0.0, 0.0], &[3.0, 4.0]), 1.0);
    assert_eq!(relative_error(&[3.0, 4.0], &[0.0, 0.0]), 5.0);
}

#[test]
fn gradcheck_on_known_function() {
    // f(θ) = θ₀² sin θ₁, ∇f = (2θ₀ sin θ₁, θ₀² cos θ₁).
    let theta = [1.3, 0.4];
    let f = |t: &[f64]| Ok(Some(t[0] * t[0] * t[1].sin()));
    let good = [2.0 * 1.3 * 0.4f64.sin(), 1.69 * 0.4f64.cos()];
    let err = gradcheck(&theta, &good, &[0, 1], 1e-5, f).unwrap().unwrap();
    assert!(err < 1e-9, "{err}");
    let bad = [good[0], good[1] * 1.01];
    let err = gradcheck(&theta, &bad, &[0, 1], 1e-5, f).unwrap().unwrap();
    assert!(err > 5e-3);
    assert!(gradcheck(&theta, &good, &[0], 1e-5, |_| Ok(None)).unwrap().is_none());
    assert!(gradcheck(&theta, &good[..1], &[0], 1e-5, f).is_err());
}

#[test]
fn tiny_model_gradients_are_correct() {
    let reports = tiny_gradcheck(0, 1e-5).unwrap();
    assert_eq!(reports.len(), 2 * 3 + 1);
    for r in &reports {
        assert!(r.max_rel_error < 1e-4, "{}: {}", r.group, r.max_rel_error);
    }
    assert_eq!(reports.last().unwrap().group, "router");
}

#[test]
fn closed_form_check_passes_small() {
    let r = verify_closed_form(10, 5, Exec::Sequential).unwrap();
    assert!(r.passes(), "{r:?}");
    assert_eq!(r, verify_closed_form(10, 5, Exec::default()).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn closed_form_agrees_with_gd(seed in any::<u64>(), dim in 1usize..20, steps in 1usize..120) {
        let p = QuadraticProblem::random(dim, steps, 0.0, &mut rng(seed)).unwrap();
        let err = relative_error(&closed_form_displacement(&p).unwrap(), &simulate_gd(&p).unwrap());
        prop_assert!(err <= 1e-8);
    }

    #[test]
    fn q_filter_bounded(l in 0.0f64..10.0, s in 1usize..500) {
        let eta = 0.09;
        let q = q_filter(l, eta, s);
        prop_assert!(q >= 0.0);
        prop_assert!(q <= eta * s as f64 * (1.0 + 1e-12));
        if l > 0.0 {
            prop_assert!(q <= (1.0 / l) * (1.0 + 1e-12));
        }
    }
}
