mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trop_core::baselines::Method;
use trop_core::inference::{bootstrap_variance, BootstrapOptions};
use trop_core::panel::Panel;
use trop_core::weights::TuningTriple;
use trop_core::Error;

#[test]
fn requires_lambda_for_tuned_methods() {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let p = random_block_panel(&mut rng, 8, 6, 2, 2);
    let opts = BootstrapOptions::default();
    assert!(bootstrap_variance(&p, Method::TROP, 5, 1, None, &opts).is_err());
    assert!(bootstrap_variance(&p, Method::TROP, 5, 1, Some(TuningTriple::did()), &opts).is_ok());
}

#[test]
fn variance_is_mean_squared_deviation() {
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    let p = random_block_panel(&mut rng, 10, 6, 3, 2);
    let r = bootstrap_variance(&p, Method::Did, 40, 9, None, &BootstrapOptions::default()).unwrap();
    let mean = r.draws.iter().sum::<f64>() / 40.0;
    let v = r.draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 40.0;
    assert!((r.variance - v).abs() < 1e-12);
    assert!(r.variance > 0.0);
    assert!((r.se() - v.sqrt()).abs() < 1e-12);
}

#[test]
fn too_few_controls_or_non_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(502);
    let y = normal_matrix(&mut rng, 3, 4);
    let p = Panel::from_matrices(y.clone(), block_w(3, 4, 2, 1)).unwrap();
    assert!(matches!(bootstrap_variance(&p, Method::Did, 3, 1, None, &BootstrapOptions::default()), Err(Error::InsufficientControls(_))));
    let mut w = block_w(3, 4, 1, 1);
    w[(1, 2)] = 1.0;
    let q = Panel::from_matrices(y, w).unwrap();
    assert!(bootstrap_variance(&q, Method::Did, 3, 1, None, &BootstrapOptions::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn deterministic_given_seed(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_block_panel(&mut rng, 9, 6, 2, 2);
        let l = Some(TuningTriple::new(0.1, 0.2, f64::INFINITY).unwrap());
        let a = bootstrap_variance(&p, Method::TROP, 15, seed, l, &BootstrapOptions::default()).unwrap();
        let b = bootstrap_variance(&p, Method::TROP, 15, seed, l, &BootstrapOptions::default()).unwrap();
        prop_assert_eq!(a.variance.to_bits(), b.variance.to_bits());
        prop_assert_eq!(a.draws, b.draws);
    }
}
