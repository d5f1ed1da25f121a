use std::collections::HashSet;

use idfree_core::trainer::EmbeddingMode;
use idfree_harness::config::ExperimentConfig;
use idfree_harness::protocol::{
    baseline_no_id, baseline_on_device, baseline_on_device_from, baseline_static_embedding, evaluate_zero, prepare,
    run_pipeline, run_protocol,
};

fn small(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    c.task.users = 10;
    c.task.per_user = 60;
    c.trainer.t_max = 30;
    c.attack.m = 200;
    c.entropy.k = 5;
    c
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn metrics_files_are_byte_identical_across_runs() {
    let cfg = small(7);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_protocol(&cfg, Some(a.path())).unwrap();
    run_protocol(&cfg, Some(b.path())).unwrap();
    for f in ["metrics.json", "model.json", "cloud_dataset.jsonl"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn socket_transport_gives_the_same_run() {
    let cfg = small(8);
    let mut sock = cfg.clone();
    sock.transport = "socket:127.0.0.1:0".into();
    let a = run_pipeline(&cfg).unwrap();
    let b = run_pipeline(&sock).unwrap();
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn zero_kappa_gives_no_lift() {
    let mut cfg = ExperimentConfig::default();
    cfg.task.kappa = 0.0;
    let m = run_protocol(&cfg, None).unwrap();
    let lift = m.accuracy_personalized - m.accuracy_bootstrap;
    assert!(lift.abs() <= 0.01, "lift {lift}");
}

#[test]
fn no_id_baseline_is_the_bootstrap_field() {
    let cfg = small(6);
    assert_eq!(
        baseline_no_id(&cfg).unwrap(),
        run_pipeline(&cfg).unwrap().metrics.accuracy_bootstrap
    );
}

#[test]
fn no_id_baseline_near_the_no_user_oracle() {
    let mut cfg = ExperimentConfig::default();
    cfg.task.kappa = 0.0;
    cfg.task.per_user = 1000;
    let p = prepare(&cfg).unwrap();
    let acc = evaluate_zero(&p.bootstrap, &p.task).unwrap().micro_accuracy;
    let oracle = p.task.oracle_accuracy_without_user(1, 3);
    assert!((acc - oracle).abs() <= 0.02, "no-id {acc} vs oracle {oracle}");
}

#[test]
fn zero_on_device_epochs_equal_no_id() {
    let mut cfg = small(9);
    cfg.on_device.epochs = 0;
    let p = prepare(&cfg).unwrap();
    let od = baseline_on_device_from(&cfg, &p).unwrap();
    assert_eq!(od.micro_accuracy, baseline_no_id(&cfg).unwrap());
}

#[test]
fn on_device_with_plenty_of_data_beats_no_id() {
    let mut cfg = ExperimentConfig::default();
    cfg.task.users = 20;
    cfg.task.per_user = 500;
    let od = baseline_on_device(&cfg).unwrap();
    assert!(od.micro_accuracy >= baseline_no_id(&cfg).unwrap());
}

/// Expected to fail with the synthetic generator; see README.
#[test]
#[ignore = "known failure: local fine-tuning does not overfit this generator"]
fn on_device_with_four_examples_falls_below_no_id() {
    let mut od = Vec::new();
    let mut no_id = Vec::new();
    for seed in 0..5 {
        let mut cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        cfg.task.per_user = 4;
        let p = prepare(&cfg).unwrap();
        od.push(baseline_on_device_from(&cfg, &p).unwrap().micro_accuracy);
        no_id.push(baseline_no_id(&cfg).unwrap());
    }
    assert!(
        median(od.clone()) < median(no_id.clone()),
        "on-device {od:?} vs no-id {no_id:?}"
    );
}

#[test]
fn static_embeddings_are_never_misattributed() {
    let m = baseline_static_embedding(&small(10)).unwrap();
    assert_eq!(m.attack.empirical_misattribution, 0.0);
}

#[test]
fn uploads_from_different_users_never_collide() {
    let p = run_pipeline(&small(11)).unwrap();
    let mut seen = HashSet::new();
    for s in &p.sessions {
        for r in s {
            let key: Vec<u64> = r.e.iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert(key), "duplicate embedding across uploads");
        }
    }
    assert_eq!(p.metrics.uploads, seen.len());
}

#[test]
fn cached_embeddings_reuse_a_fixed_pool() {
    let mut cfg = small(12);
    cfg.embedding_mode = EmbeddingMode::Cached { pool: 3 };
    let p = run_pipeline(&cfg).unwrap();
    for s in &p.sessions {
        let distinct: HashSet<Vec<u64>> = s.iter().map(|r| r.e.iter().map(|v| v.to_bits()).collect()).collect();
        assert_eq!(distinct.len(), 3);
    }
}

#[test]
fn later_rounds_retrain_on_the_updated_model() {
    let mut cfg = small(13);
    cfg.rounds = 2;
    let two = run_pipeline(&cfg).unwrap();
    cfg.rounds = 1;
    let one = run_pipeline(&cfg).unwrap();
    assert_eq!(two.metrics.rounds, 2);
    assert_ne!(two.metrics.model_checksum, one.metrics.model_checksum);
}

#[test]
fn beta_mode_runs_end_to_end() {
    let mut cfg = small(14);
    cfg.trainer.mode = idfree_core::trainer::Family::Beta;
    cfg.trainer.eta = 0.05;
    let m = run_protocol(&cfg, None).unwrap();
    assert!(m.pairwise_gap.is_none());
    assert!(m.attack.theoretical_bound.is_none());
    assert!((0.0..=1.0).contains(&m.accuracy_personalized));
}
