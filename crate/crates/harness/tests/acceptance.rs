//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if a criterion fails that is not listed in
//! `KNOWN_FAILURES` (see README). `ACCEPTANCE_STRICT=1` makes every
//! failure fatal. Positional arguments select criteria by number.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use idfree_core::analysis::{lemma3_monte_carlo, lemma3_prob, theorem2_bound};
use idfree_core::dist::{EmbeddingDist, Mixture};
use idfree_core::wire::{scan_keys, transfer, write_session, Transport};
use idfree_harness::config::ExperimentConfig;
use idfree_harness::experiments::{entropy_report, export_embedding_projection, sweep_variance};
use idfree_harness::protocol::{baseline_on_device_from, run_pipeline, Pipeline};
use idfree_harness::verify::{
    adjacency_permutation_test, chained_decompositions, compare_beta_gradients, crn_fd_gaussian, fd_check_embedding,
    fd_check_model, random_beta_mixture, random_instance, source_positions, TestFn,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{Beta, Continuous, ContinuousCDF, Normal};

const KNOWN_FAILURES: &[u32] = &[6];
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

#[derive(Default)]
struct Cache {
    pipelines: HashMap<u64, Pipeline>,
}

impl Cache {
    fn default_run(&mut self, seed: u64) -> &Pipeline {
        self.pipelines.entry(seed).or_insert_with(|| {
            let cfg = ExperimentConfig {
                seed,
                ..ExperimentConfig::default()
            };
            run_pipeline(&cfg).expect("default protocol run")
        })
    }
}

fn phi(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gradients(_: &mut Cache) -> Outcome {
    let dims = ExperimentConfig::default().dims();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_e = 0.0f64;
    let mut worst_m = 0.0f64;
    for _ in 0..100 {
        let (m, u, x, y) = random_instance(dims, &mut rng);
        worst_e = worst_e.max(fd_check_embedding(&m, &u, &x, y).unwrap());
    }
    for _ in 0..100 {
        let (m, u, x, y) = random_instance(dims, &mut rng);
        worst_m = worst_m.max(fd_check_model(&m, &u, &x, y).unwrap());
    }
    let (m, mean, x, y) = random_instance(dims, &mut rng);
    let crn = crn_fd_gaussian(&m, &mean, 0.2, &x, y, 10_000, &mut rng).unwrap();
    outcome(
        worst_e < 1e-5 && worst_m < 1e-5 && crn < 1e-3,
        format!("max rel err: embedding {worst_e:.2e}, weights {worst_m:.2e}; reparam CRN (S=1e4) {crn:.2e}"),
    )
}

fn beta_gradient(_: &mut Cache) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let triples: Vec<(f64, f64, TestFn, u64)> = (0..10)
        .map(|k| {
            let a = rng.random_range(0.8..6.0);
            let b = rng.random_range(0.8..6.0);
            let f = match k % 3 {
                0 => TestFn::Sin(rng.random_range(1.0..5.0)),
                1 => TestFn::Pow(rng.random_range(1.0..3.0)),
                _ => TestFn::Quad(rng.random_range(0.0..1.0)),
            };
            (a, b, f, rng.random())
        })
        .collect();
    let zs: Vec<f64> = triples
        .par_iter()
        .map(|&(a, b, f, seed)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            compare_beta_gradients(a, b, f, 100_000, &mut r).unwrap().max_z()
        })
        .collect();
    let worst = zs.iter().copied().fold(0.0, f64::max);
    outcome(
        worst < 3.0,
        format!("10 triples, 1e5 draws: max |implicit − score| = {worst:.2} combined SE"),
    )
}

fn lemma3(_: &mut Cache) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let anchor = lemma3_prob(0.1, 0.2);
    let mut cases: Vec<(f64, f64, usize)> = [1, 8, 64].iter().map(|&d| (0.1, 0.2, d)).collect();
    for k in 0..9 {
        cases.push((
            rng.random_range(0.01..1.0),
            rng.random_range(0.05..1.0),
            [1, 8, 64][k % 3],
        ));
    }
    let mut worst = 0.0f64;
    let mut oracle_gap = 0.0f64;
    for (dist, sigma, d) in cases {
        let closed = lemma3_prob(dist, sigma);
        oracle_gap = oracle_gap.max((closed - phi(dist / (2.0 * sigma))).abs());
        let mc = lemma3_monte_carlo(dist, sigma, d, 1_000_000, &mut rng);
        worst = worst.max((closed - mc).abs());
    }
    outcome(
        worst <= 0.005 && (anchor - 0.598706).abs() < 1e-6 && oracle_gap < 1e-9,
        format!(
            "Φ(0.25) = {anchor:.6}; max |closed − MC| over 12 cases = {worst:.5}; max |Φ − oracle| = {oracle_gap:.1e}"
        ),
    )
}

fn bound(cache: &mut Cache) -> Outcome {
    let cfg = ExperimentConfig::default();
    let t = &cfg.trainer;
    let b = theorem2_bound(t.eta, t.t_max, t.clip_norm, t.sigma, cfg.task.users).unwrap();
    let oracle = 1.0 - phi(t.eta * t.t_max as f64 * t.clip_norm / t.sigma).powi(cfg.task.users as i32 - 1);
    let p = cache.default_run(0);
    let emp = p.metrics.attack.empirical_misattribution;
    let gap = p.metrics.pairwise_gap.as_ref().unwrap();
    outcome(
        (b - oracle).abs() < 1e-9
            && emp >= b - 0.01
            && gap.violations == 0
            && p.metrics.attack.samples_per_user == 1000,
        format!(
            "misattribution {emp:.4} ≥ bound {b:.5} − 0.01; max gap {:.4} ≤ {:.4} ({} violations)",
            gap.max_gap, gap.bound, gap.violations
        ),
    )
}

fn mixture_density(mix: &Mixture<f64>, u: &[f64]) -> f64 {
    mix.components()
        .iter()
        .map(|(w, d)| match d {
            EmbeddingDist::BetaPerDim { alpha, beta } => {
                w * alpha
                    .iter()
                    .zip(beta)
                    .zip(u)
                    .map(|((&a, &b), &x)| Beta::new(a, b).unwrap().pdf(x))
                    .product::<f64>()
            }
            _ => unreachable!(),
        })
        .sum()
}

fn nonidentifiability(_: &mut Cache) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mix = random_beta_mixture(3, 2, &mut rng).unwrap();
    let (pdf, cdf, pass) = chained_decompositions(&mix, 5, 200, &mut rng).unwrap();
    let mut split = mix.clone();
    for k in 0..5 {
        split = idfree_core::analysis::beta_decompose(&split, k % split.len(), k % 2).unwrap();
    }
    let mut oracle = 0.0f64;
    for i in 1..40 {
        for j in 1..40 {
            let u = [i as f64 / 40.0, j as f64 / 40.0];
            let a = mixture_density(&mix, &u);
            oracle = oracle.max((a - mixture_density(&split, &u)).abs() / a.max(1.0));
        }
    }
    outcome(
        pass && oracle < 1e-9,
        format!("5 chained splits on 200×200: max pdf diff {pdf:.2e}, max cdf diff {cdf:.2e}; independent density oracle {oracle:.2e}"),
    )
}

fn lift(cache: &mut Cache) -> Outcome {
    let lifts: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            let m = &cache.default_run(s).metrics;
            m.accuracy_personalized - m.accuracy_bootstrap
        })
        .collect();
    let med = median(lifts.clone());
    let mut pers = Vec::new();
    let mut on_device = Vec::new();
    for &s in &SEEDS {
        let mut cfg = ExperimentConfig {
            seed: s,
            ..ExperimentConfig::default()
        };
        cfg.task.per_user = 50;
        let p = run_pipeline(&cfg).unwrap();
        pers.push(p.metrics.accuracy_personalized);
        on_device.push(baseline_on_device_from(&cfg, &p.prepared).unwrap().micro_accuracy);
    }
    let (mp, mo) = (median(pers), median(on_device));
    outcome(
        med >= 0.05 && mp > mo,
        format!(
            "median lift over no-id {:.2} pts (≥ 5): {}; per_user=50 personalized {mp:.4} vs on-device {mo:.4}: {}",
            100.0 * med,
            if med >= 0.05 { "ok" } else { "short" },
            if mp > mo { "ok" } else { "on-device ahead" }
        ),
    )
}

fn tradeoff(_: &mut Cache) -> Outcome {
    let rows = sweep_variance(&ExperimentConfig::default(), &[0.0, 0.1, 0.2, 0.3]).unwrap();
    let mis: Vec<f64> = rows.iter().map(|r| r.misattribution).collect();
    let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let monotone = mis.windows(2).all(|w| w[0] <= w[1]);
    outcome(
        mis[0] == 0.0 && monotone && acc[3] <= acc[0] + 0.01,
        format!("misattribution {mis:.4?}; accuracy {acc:.4?}"),
    )
}

fn entropy(cache: &mut Cache) -> Outcome {
    let cfg0 = ExperimentConfig::default();
    let mut top = Vec::new();
    let mut bottom = Vec::new();
    for &s in &SEEDS {
        let cfg = ExperimentConfig {
            seed: s,
            ..cfg0.clone()
        };
        let r = entropy_report(&cfg, cache.default_run(s)).unwrap();
        assert_eq!(r.k, 20);
        let lifts: Vec<f64> = r.lifts().unwrap().into_iter().flatten().collect();
        bottom.push(lifts[0]);
        top.push(*lifts.last().unwrap());
    }
    let (t, b) = (median(top), median(bottom));
    outcome(
        t > b,
        format!("K=20 median lift: highest-entropy bucket {t:.4}, lowest {b:.4}"),
    )
}

fn anonymity(cache: &mut Cache) -> Outcome {
    let p = cache.default_run(0);
    let mut scanned = 0;
    for s in &p.sessions {
        let mut buf = Vec::new();
        write_session(&mut buf, s).unwrap();
        scanned += scan_keys(std::str::from_utf8(&buf).unwrap()).unwrap();
    }
    let seed = p.dataset.shuffle_seed();
    let local = transfer(&Transport::InProcess, &p.sessions, seed).unwrap();
    let socket = transfer(&Transport::Socket("127.0.0.1:0".into()), &p.sessions, seed).unwrap();
    let sources = source_positions(&p.dataset, &p.sessions).unwrap();
    let pval = adjacency_permutation_test(&sources, 1000, 909);
    let same = local == socket && local == p.dataset;
    outcome(
        scanned == p.dataset.len() && pval > 0.01 && same,
        format!("{scanned} records keyed {{e,x,y}}; position permutation p = {pval:.3}; socket == in-process: {same}"),
    )
}

fn projection(cache: &mut Cache) -> Outcome {
    let cfg = ExperimentConfig::default();
    let (_, mixed) = export_embedding_projection(&cfg, cache.default_run(0), None).unwrap();
    let mut bad = cfg.clone();
    bad.trainer.sigma = 0.05;
    bad.trainer.eta = 0.01;
    let p = run_pipeline(&bad).unwrap();
    let (_, clustered) = export_embedding_projection(&bad, &p, None).unwrap();
    let (a, b) = (mixed.between_within_ratio, clustered.between_within_ratio);
    outcome(
        a < 1.5 && b > 10.0,
        format!("between/within: defaults {a:.3} (< 1.5), σ=0.05 η=0.01 {b:.2} (> 10)"),
    )
}

type Criterion = (u32, &'static str, u64, fn(&mut Cache) -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "gradient correctness", 10, gradients),
        (2, "beta implicit vs score-function gradient", 30, beta_gradient),
        (3, "tie probability closed form vs Monte Carlo", 30, lemma3),
        (4, "misattribution lower bound", 60, bound),
        (5, "mixture non-identifiability construction", 10, nonidentifiability),
        (6, "personalization lift", 300, lift),
        (7, "privacy/accuracy tradeoff", 300, tradeoff),
        (8, "user-entropy trend", 120, entropy),
        (9, "wire anonymity", 30, anonymity),
        (10, "projection separability", 30, projection),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut cache = Cache::default();
    let mut fatal = Vec::new();
    println!();
    for (id, name, budget, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = run(&mut cache);
        let took = start.elapsed();
        let in_time = took <= Duration::from_secs(budget);
        let pass = o.pass && in_time;
        let tag = if pass {
            "PASS"
        } else if KNOWN_FAILURES.contains(&id) {
            "FAIL (known)"
        } else {
            "FAIL"
        };
        println!(
            "{tag} criterion {id:>2} {name}: {} [{:.1}s, budget {budget}s{}]",
            o.detail,
            took.as_secs_f64(),
            if in_time { "" } else { ", over budget" }
        );
        if !pass && (strict || !KNOWN_FAILURES.contains(&id)) {
            fatal.push(id);
        }
    }
    if !fatal.is_empty() {
        eprintln!("acceptance failures: {fatal:?}");
        std::process::exit(1);
    }
}
