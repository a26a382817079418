use gmm_guidance::harness::verify::{fd_gradient, random_model, relative_error};
use gmm_guidance::MixtureModel;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64, d: usize, k: usize) -> MixtureModel {
    random_model(&mut ChaCha8Rng::seed_from_u64(seed), d, k).unwrap()
}

fn point(xs: &[f64], d: usize) -> DVector<f64> {
    DVector::from_iterator(d, xs.iter().copied().cycle().take(d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posterior_is_a_distribution(
        seed in any::<u64>(), d in 1usize..8, k in 1usize..6,
        xs in prop::collection::vec(-20.0f64..20.0, 8), t in 0.0f64..8.0,
    ) {
        let model = setup(seed, d, k);
        let q = model.posterior(&point(&xs, d), t).unwrap();
        prop_assert_eq!(q.len(), k);
        prop_assert!(q.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_decomposes_into_unconditional_plus_classifier(
        seed in any::<u64>(), d in 1usize..8, k in 1usize..6, y in 0usize..5,
        xs in prop::collection::vec(-5.0f64..5.0, 8), t in 0.0f64..5.0,
    ) {
        let model = setup(seed, d, k);
        let y = y % k;
        let x = point(&xs, d);
        let lhs = model.conditional_score(&x, y, t).unwrap();
        let rhs = model.unconditional_score(&x, t).unwrap() + model.classifier_gradient(&x, y, t).unwrap();
        prop_assert!(relative_error(&lhs, &rhs) < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences(
        seed in any::<u64>(), d in 1usize..6, k in 1usize..6, y in 0usize..5,
        xs in prop::collection::vec(-3.0f64..3.0, 6), t in 0.0f64..5.0,
    ) {
        let model = setup(seed, d, k);
        let y = y % k;
        let x = point(&xs, d);
        let score = model.conditional_score(&x, y, t).unwrap();
        let fd = fd_gradient(|p| model.marginal_log_density(p, t, Some(y)), &x, 1e-3).unwrap();
        prop_assert!(relative_error(&score, &fd) < 1e-6);
        let grad = model.classifier_gradient(&x, y, t).unwrap();
        let fd = fd_gradient(|p| Ok(model.log_posterior(p, t)?[y]), &x, 1e-3).unwrap();
        prop_assert!(relative_error(&grad, &fd) < 1e-6);
        let uncond = model.unconditional_score(&x, t).unwrap();
        let fd = fd_gradient(|p| model.marginal_log_density(p, t, None), &x, 1e-3).unwrap();
        prop_assert!(relative_error(&uncond, &fd) < 1e-6);
    }

    #[test]
    fn confidence_is_invariant_to_the_guided_strength_of_a_single_component(
        xs in prop::collection::vec(-5.0f64..5.0, 3), eta in 0.0f64..50.0, tau in 0.0f64..10.0,
    ) {
        let model = MixtureModel::isotropic(vec![1.0], vec![DVector::from_vec(vec![1.0, 0.0, -1.0])]).unwrap();
        let x = DVector::from_vec(xs);
        let guided = model.guided_drift_ddim(&x, 0, eta, tau).unwrap();
        let plain = model.guided_drift_ddim(&x, 0, 0.0, tau).unwrap();
        prop_assert!((guided.drift - plain.drift).amax() < 1e-12);
        prop_assert!(guided.guidance_term.amax() < 1e-12);
    }
}
