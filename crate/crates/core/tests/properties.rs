use idfree_core::analysis::{
    beta_decompose, lemma3_prob, misattribution_mc, pairwise_gap_check, posterior_argmax, theorem2_bound,
    uniform_prior, verify_nonidentifiability,
};
use idfree_core::cloud::{collect, AnonymousRecord};
use idfree_core::dist::{EmbeddingDist, Mixture, ParamGrad};
use idfree_core::model::{Mlp, ModelDims};
use idfree_core::synth::{generate_synthetic, SyntheticTaskSpec};
use idfree_core::trainer::{clip, train_device, TrainerConfig};
use idfree_core::wire::{decode_record, encode_record, scan_keys};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn record() -> impl Strategy<Value = AnonymousRecord<f64>> {
    (
        prop::collection::vec(-1e6f64..1e6, 1..6),
        prop::collection::vec(-1e6f64..1e6, 0..6),
        0usize..10,
    )
        .prop_map(|(e, x, y)| AnonymousRecord { e, x, y })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wire_round_trip_is_exact(r in record()) {
        let line = encode_record(&r).unwrap();
        prop_assert_eq!(scan_keys(&line).unwrap(), 1);
        prop_assert_eq!(decode_record::<f64>(&line).unwrap(), r);
    }

    #[test]
    fn collect_ignores_arrival_order(seed in any::<u64>(), rot in 0usize..5) {
        let sessions: Vec<Vec<AnonymousRecord<f64>>> = (0..5)
            .map(|s| (0..4).map(|i| AnonymousRecord { e: vec![s as f64, i as f64 * 0.5], x: vec![1.0], y: i % 2 }).collect())
            .collect();
        let mut moved = sessions.clone();
        moved.rotate_left(rot);
        moved.reverse();
        prop_assert_eq!(collect(sessions, seed).unwrap(), collect(moved, seed).unwrap());
    }

    #[test]
    fn clipped_norm_never_exceeds_bound(v in prop::collection::vec(-100.0f64..100.0, 1..20), g in 0.01f64..10.0) {
        let c = clip(ParamGrad::Mean(v.clone()), g);
        let n = c.norm();
        prop_assert!(n <= g * (1.0 + 1e-12));
        let orig = ParamGrad::Mean(v).norm();
        if orig <= g {
            prop_assert!((n - orig).abs() <= 1e-12 * orig.max(1.0));
        }
    }

    #[test]
    fn theorem2_bound_is_a_probability_decreasing_in_drift(
        eta in 1e-5f64..1e-2, t in 1usize..500, g in 0.1f64..10.0, sigma in 0.01f64..2.0, n in 2usize..200,
    ) {
        let b = theorem2_bound(eta, t, g, sigma, n).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
        let wider = theorem2_bound(eta, t, g, sigma * 2.0, n).unwrap();
        prop_assert!(wider >= b - 1e-15);
    }

    #[test]
    fn lemma3_probability_in_upper_half(dist in 0.0f64..10.0, sigma in 0.01f64..5.0) {
        let p = lemma3_prob(dist, sigma);
        prop_assert!((0.5..=1.0).contains(&p));
    }

    #[test]
    fn beta_decomposition_keeps_weights_and_density(
        a in 0.5f64..5.0, b in 0.5f64..5.0, a2 in 0.5f64..5.0, b2 in 0.5f64..5.0, dim in 0usize..2, comp in 0usize..2,
    ) {
        let mix = Mixture::uniform(vec![
            EmbeddingDist::beta(vec![a, b2], vec![b, a2]).unwrap(),
            EmbeddingDist::beta(vec![a2, a], vec![b2, b]).unwrap(),
        ]).unwrap();
        let split = beta_decompose(&mix, comp, dim).unwrap();
        prop_assert_eq!(split.len(), 3);
        let total: f64 = split.components().iter().map(|(w, _)| *w).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let r = verify_nonidentifiability(&mix, &split, 25, 1e-9).unwrap();
        prop_assert!(r.pass, "{:?}", r);
    }

    #[test]
    fn posterior_argmax_recovers_separated_means(k in 0usize..4, jitter in -0.1f64..0.1) {
        let dists: Vec<_> = (0..4)
            .map(|i| EmbeddingDist::gaussian(vec![i as f64 * 10.0, 0.0], 0.5).unwrap())
            .collect();
        let u = [k as f64 * 10.0 + jitter, jitter];
        prop_assert_eq!(posterior_argmax(&dists, &uniform_prior(4), &u).unwrap(), k);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn device_drift_stays_within_eta_t_g(seed in any::<u64>(), eta in 1e-3f64..5e-2, t in 1usize..30, g in 0.1f64..5.0) {
        let spec = SyntheticTaskSpec { users: 2, per_user: 20, d_x: 3, classes: 3, seed, ..Default::default() };
        let task = generate_synthetic::<f64>(&spec).unwrap();
        let dims = ModelDims { d_u: 3, d_x: 3, d_h: 5, classes: 3 };
        let model = Mlp::init(dims, 10.0, &mut ChaCha8Rng::seed_from_u64(seed)).frozen();
        let mut cfg = TrainerConfig::gaussian(3);
        cfg.eta = eta;
        cfg.t_max = t;
        cfg.clip_norm = g;
        cfg.batch_size = 4;
        cfg.mc_samples = 2;
        cfg.seed = seed;
        let trained: Vec<_> = task.devices.iter().map(|d| train_device(d, &model, &cfg).unwrap()).collect();
        for tr in &trained {
            prop_assert!(tr.param_drift <= eta * t as f64 * g * (1.0 + 1e-9));
        }
        let dists: Vec<_> = trained.into_iter().map(|t| t.dist).collect();
        prop_assert!(pairwise_gap_check(&dists, eta, t, g).unwrap().pass);
    }
}

#[test]
fn identical_users_are_misattributed_like_chance() {
    let dists = vec![EmbeddingDist::gaussian(vec![0.0; 4], 0.3).unwrap(); 5];
    let r = misattribution_mc(&dists, &uniform_prior(5), 2000, &mut ChaCha8Rng::seed_from_u64(2), None).unwrap();
    assert!(
        (r.empirical_misattribution - 0.8).abs() < 0.03,
        "{}",
        r.empirical_misattribution
    );
}

#[test]
fn point_masses_are_never_misattributed() {
    let dists: Vec<_> = (0..6)
        .map(|i| EmbeddingDist::gaussian(vec![i as f64 * 1e-3, 0.0], 0.0).unwrap())
        .collect();
    let r = misattribution_mc(&dists, &uniform_prior(6), 100, &mut ChaCha8Rng::seed_from_u64(3), None).unwrap();
    assert_eq!(r.empirical_misattribution, 0.0);
}
