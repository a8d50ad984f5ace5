mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trop_core::baselines::{did, sc, sdid};
use trop_core::linalg;
use trop_core::panel::Panel;
use trop_core::theory::*;
use trop_core::Error;

#[test]
fn rank_one_representation_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for _ in 0..500 {
        let y = normal_matrix(&mut rng, 6, 5);
        let lhat = normal_matrix(&mut rng, 6, 5);
        let theta = random_simplex(&mut rng, 4);
        let omega = random_simplex(&mut rng, 5);
        let cf = balancing_counterfactual(&y, &lhat, &theta, &omega).unwrap();
        let m = rank_one_mask(&theta, &omega, 6, 5).unwrap();
        assert!((cf - (y[(5, 4)] + linalg::inner(&(&y - &lhat), &m))).abs() < 1e-10);
    }
}

#[test]
fn mask_has_rank_one_outer_structure() {
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let theta = random_simplex(&mut rng, 4);
    let omega = random_simplex(&mut rng, 5);
    let m = rank_one_mask(&theta, &omega, 6, 5).unwrap();
    let s = nalgebra::SVD::new(m.clone(), false, false).singular_values;
    let mut v: Vec<f64> = s.iter().copied().collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    assert!(v[1] < 1e-12 * v[0]);
    // rows and columns of M sum to zero
    assert!(m.row_sum().amax() < 1e-12 && m.column_sum().amax() < 1e-12);
}

#[test]
fn triple_robustness_on_random_factor_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for _ in 0..200 {
        let (gt, theta, omega) = random_instance(&mut rng, 2);
        let r = triple_robustness_check(&gt, &theta, &omega).unwrap();
        assert!((r.realized - r.formula).abs() < 1e-10);
        assert!(r.realized.abs() <= r.bound + 1e-10);
        assert!(r.spectral_bound <= r.bound + 1e-12);

        let mut exact = gt.clone();
        exact.b.fill(0.0);
        assert!(triple_robustness_check(&exact, &theta, &omega).unwrap().realized.abs() < 1e-10);
        let mut ub = gt.clone();
        balance_units(&mut ub, &omega);
        assert!(triple_robustness_check(&ub, &theta, &omega).unwrap().realized.abs() < 1e-10);
        let mut tb = gt.clone();
        balance_periods(&mut tb, &theta);
        assert!(triple_robustness_check(&tb, &theta, &omega).unwrap().realized.abs() < 1e-10);
    }
}

/// Noiseless panel Y = ΓΛᵀ with the cell (N, T) treated by effect `tau`.
fn noiseless_panel(gt: &FactorGroundTruth, tau: f64) -> Panel {
    let (n, t) = (gt.n_units(), gt.n_periods());
    let mut y = gt.l();
    y[(n - 1, t - 1)] += tau;
    Panel::from_matrices(y, block_w(n, t, 1, 1)).unwrap()
}

#[test]
fn classical_estimator_errors_match_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(203);
    for _ in 0..100 {
        let k = rng.random_range(1..4);
        let (gt, _, _) = random_instance(&mut rng, k);
        let tau = rng.random_range(-2.0..2.0);
        let p = noiseless_panel(&gt, tau);
        let (n, t) = (gt.n_units(), gt.n_periods());

        let d = did(&p).unwrap();
        let uniform_t = DVector::from_element(t - 1, 1.0 / (t - 1) as f64);
        let uniform_u = DVector::from_element(n - 1, 1.0 / (n - 1) as f64);
        let base = bias_formulas(&gt, &uniform_t, &uniform_u).unwrap();
        assert!((d.att - tau - base.did).abs() < 1e-9, "did {} vs {}", d.att - tau, base.did);

        let s = sc(&p, false).unwrap();
        let omega = s.unit_weights[0].1.clone();
        let f = bias_formulas(&gt, &uniform_t, &omega).unwrap();
        assert!((s.att - tau - f.sc).abs() < 1e-9, "sc {} vs {}", s.att - tau, f.sc);

        let sd = sdid(&p).unwrap();
        let omega = sd.unit_weights[0].1.clone();
        let theta = sd.time_weights.clone().unwrap();
        let f = bias_formulas(&gt, &theta, &omega).unwrap();
        assert!((sd.att - tau - f.sdid).abs() < 1e-9, "sdid {} vs {}", sd.att - tau, f.sdid);
    }
}

#[test]
fn covariate_decomposition_without_remainder() {
    let mut rng = ChaCha8Rng::seed_from_u64(204);
    for _ in 0..100 {
        let (gt, theta, omega) = random_instance(&mut rng, 2);
        let (n, t) = (gt.n_units(), gt.n_periods());
        let p = rng.random_range(1..4);
        let x: Vec<DMatrix<f64>> = (0..p).map(|_| normal_matrix(&mut rng, n, t)).collect();
        let beta = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let dbeta = DVector::from_fn(p, |_, _| rng.random_range(-0.5..0.5));
        let r = covariate_bias_check(&gt, &x, &beta, &dbeta, &DMatrix::zeros(n, t), &theta, &omega).unwrap();
        assert!((r.realized - r.formula).abs() < 1e-9);
        assert_eq!(r.remainder_bound, 0.0);
    }
}

#[test]
fn covariate_remainder_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(205);
    for _ in 0..100 {
        let (gt, theta, omega) = random_instance(&mut rng, 2);
        let (n, t) = (gt.n_units(), gt.n_periods());
        let x = vec![normal_matrix(&mut rng, n, t)];
        let e = normal_matrix(&mut rng, n, t) * 0.1;
        let r = covariate_bias_check(&gt, &x, &DVector::from_element(1, 0.7), &DVector::from_element(1, 0.2), &e, &theta, &omega).unwrap();
        assert!((r.realized - r.formula).abs() <= r.remainder_bound + 1e-12);
    }
}

#[test]
fn noise_identity_and_error_decomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(206);
    for _ in 0..100 {
        let (gt, theta, omega) = random_instance(&mut rng, 2);
        let (n, t) = (gt.n_units(), gt.n_periods());
        let eps = normal_matrix(&mut rng, n, t);
        let lhat = gt.biased_adjustment();
        let (lhs, rhs) = error_decomposition(&gt.l(), &lhat, &eps, &theta, &omega).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}

#[test]
fn unnormalized_weights_are_rejected() {
    let y = DMatrix::from_element(3, 3, 1.0);
    let theta = DVector::from_vec(vec![0.5, 0.6]);
    let omega = DVector::from_vec(vec![0.5, 0.5]);
    assert!(matches!(balancing_counterfactual(&y, &y, &theta, &omega), Err(Error::WeightsNotNormalized(_))));
}

#[test]
fn battery_reports_all_passed() {
    let mut rng = ChaCha8Rng::seed_from_u64(207);
    let checks = theory_battery(&mut rng, 100).unwrap();
    assert!(checks.len() >= 7);
    assert!(checks.iter().all(|c| c.passed), "{checks:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bias_is_rotation_invariant(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..4);
        let (gt, theta, omega) = random_instance(&mut rng, k);
        let q = random_orthogonal(&mut rng, k);
        let a = triple_robustness_check(&gt, &theta, &omega).unwrap();
        let b = triple_robustness_check(&gt.rotate(&q), &theta, &omega).unwrap();
        prop_assert!((a.realized - b.realized).abs() < 1e-9);
        prop_assert!((a.formula - b.formula).abs() < 1e-9);
        prop_assert!((a.bound - b.bound).abs() < 1e-9 * a.bound.max(1.0));
    }

    #[test]
    fn simplex_draws_are_normalized(seed in 0u64..100_000, m in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_simplex(&mut rng, m);
        prop_assert!((v.sum() - 1.0).abs() < 1e-12);
        prop_assert!(v.iter().all(|x| *x >= 0.0));
    }
}
