//! One-shot verification suite: gradient checks, the Gaussian tie
//! probability, the misattribution lower bound, mixture non-identifiability
//! and the anonymity of the wire.
//!
//! The finite-difference and statistical checkers here are also what the
//! acceptance tests call.

use std::collections::HashMap;

use idfree_core::analysis::{
    beta_decompose, lemma3_monte_carlo, lemma3_prob_with, theorem2_bound_with, verify_nonidentifiability,
};
use idfree_core::cloud::{AnonymousRecord, CloudDataset};
use idfree_core::dist::{EmbeddingDist, Mixture, NoiseDraw, ParamGrad};
use idfree_core::model::{Mlp, ModelDims};
use idfree_core::special::std_normal_cdf;
use idfree_core::trainer::{estimate_obj_grad_with_noise, Family};
use idfree_core::wire::{scan_keys, transfer, write_session, Transport};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{stream, ExperimentConfig};
use crate::error::{HarnessError, Result, StageExt};
use crate::protocol::{run_pipeline, Pipeline};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-5;
pub const CRN_REL_TOL: f64 = 1e-3;
pub const LEMMA3_TOL: f64 = 0.005;
pub const BOUND_SLACK: f64 = 0.01;
pub const NONID_TOL: f64 = 1e-9;
pub const PERMUTATION_ALPHA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub pass: bool,
}

impl VerifyReport {
    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b
        .iter()
        .map(|y| y * y)
        .sum::<f64>()
        .sqrt()
        .max(a.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn model_loss(model: &Mlp<f64>, u: &[f64], x: &[f64], y: usize) -> f64 {
    let p = model.forward(u, x).expect("shapes checked by caller");
    -p[y].ln()
}

/// A random model and input, with weights large enough that the hidden
/// units leave the linear regime.
pub fn random_instance<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> (Mlp<f64>, Vec<f64>, Vec<f64>, usize) {
    let mut model = Mlp::init(dims, 3.0, rng);
    for w in model.weights_mut() {
        for v in w.iter_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let u = (0..dims.d_u).map(|_| rng.sample(StandardNormal)).collect();
    let x = (0..dims.d_x).map(|_| rng.sample(StandardNormal)).collect();
    let y = rng.random_range(0..dims.classes);
    (model.frozen(), u, x, y)
}

/// Relative error of ∂l/∂u against central differences.
pub fn fd_check_embedding(model: &Mlp<f64>, u: &[f64], x: &[f64], y: usize) -> Result<f64> {
    let g = model.grad_embedding(u, x, y).stage("grad_embedding")?;
    let mut up = u.to_vec();
    let fd: Vec<f64> = (0..u.len())
        .map(|i| {
            up[i] = u[i] + FD_STEP;
            let lp = model_loss(model, &up, x, y);
            up[i] = u[i] - FD_STEP;
            let lm = model_loss(model, &up, x, y);
            up[i] = u[i];
            (lp - lm) / (2.0 * FD_STEP)
        })
        .collect();
    Ok(rel_error(&g, &fd))
}

/// Relative error of ∂l/∂weights against central differences over every
/// weight.
pub fn fd_check_model(model: &Mlp<f64>, u: &[f64], x: &[f64], y: usize) -> Result<f64> {
    let g = model.grad_model(u, x, y).stage("grad_model")?;
    let analytic: Vec<f64> = g.values().copied().collect();
    let mut m = model.clone().unfrozen();
    let mut fd = Vec::with_capacity(analytic.len());
    for block in 0..4 {
        let len = m.weights_mut()[block].len();
        for k in 0..len {
            let orig = m.weights_mut()[block][k];
            m.weights_mut()[block][k] = orig + FD_STEP;
            let lp = model_loss(&m, u, x, y);
            m.weights_mut()[block][k] = orig - FD_STEP;
            let lm = model_loss(&m, u, x, y);
            m.weights_mut()[block][k] = orig;
            fd.push((lp - lm) / (2.0 * FD_STEP));
        }
    }
    Ok(rel_error(&analytic, &fd))
}

/// Relative error of the reparameterized mean gradient of a Gaussian
/// embedding against central differences of the same Monte Carlo
/// objective (common random numbers), with `draws` noise draws on one
/// example.
pub fn crn_fd_gaussian<R: Rng + ?Sized>(
    model: &Mlp<f64>,
    mean: &[f64],
    sigma: f64,
    x: &[f64],
    y: usize,
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    let d = mean.len();
    let noises: Vec<NoiseDraw<f64>> = (0..draws)
        .map(|_| NoiseDraw {
            values: (0..d).map(|_| rng.sample(StandardNormal)).collect(),
        })
        .collect();
    let sample = idfree_core::model::LabeledSample { x: x.to_vec(), y };
    let dist = EmbeddingDist::gaussian(mean.to_vec(), sigma).stage("crn_fd")?;
    let est = estimate_obj_grad_with_noise(&dist, model, std::slice::from_ref(&sample), &noises)
        .stage("estimate_obj_grad")?;
    let analytic = match est.grad {
        ParamGrad::Mean(g) => g,
        ParamGrad::Shape { .. } => unreachable!("gaussian gradient"),
    };
    let objective = |m: &[f64]| -> f64 {
        noises
            .iter()
            .map(|n| {
                let u: Vec<f64> = m.iter().zip(&n.values).map(|(a, z)| a + sigma * z).collect();
                model_loss(model, &u, x, y)
            })
            .sum::<f64>()
            / draws as f64
    };
    let mut mp = mean.to_vec();
    let fd: Vec<f64> = (0..d)
        .map(|i| {
            mp[i] = mean[i] + FD_STEP;
            let lp = objective(&mp);
            mp[i] = mean[i] - FD_STEP;
            let lm = objective(&mp);
            mp[i] = mean[i];
            (lp - lm) / (2.0 * FD_STEP)
        })
        .collect();
    Ok(rel_error(&analytic, &fd))
}

/// Scalar test functions for the Beta gradient comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TestFn {
    /// sin(k·u)
    Sin(f64),
    /// u^p
    Pow(f64),
    /// (u − c)²
    Quad(f64),
}

impl TestFn {
    pub fn value(self, u: f64) -> f64 {
        match self {
            TestFn::Sin(k) => (k * u).sin(),
            TestFn::Pow(p) => u.powf(p),
            TestFn::Quad(c) => (u - c).powi(2),
        }
    }

    pub fn derivative(self, u: f64) -> f64 {
        match self {
            TestFn::Sin(k) => k * (k * u).cos(),
            TestFn::Pow(p) => p * u.powf(p - 1.0),
            TestFn::Quad(c) => 2.0 * (u - c),
        }
    }
}

/// Pathwise and score-function estimates of ∂E f(u)/∂(α, β) for
/// u ~ Beta(α, β), each from its own `draws` samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaGradComparison {
    pub implicit: [f64; 2],
    pub score: [f64; 2],
    /// sqrt(se_implicit² + se_score²) per parameter.
    pub combined_se: [f64; 2],
}

impl BetaGradComparison {
    /// Largest |implicit − score| in units of the combined standard error.
    pub fn max_z(&self) -> f64 {
        (0..2)
            .map(|k| (self.implicit[k] - self.score[k]).abs() / self.combined_se[k])
            .fold(0.0, f64::max)
    }
}

fn mean_se(sum: f64, sum_sq: f64, n: usize) -> (f64, f64) {
    let n = n as f64;
    let m = sum / n;
    let var = (sum_sq / n - m * m).max(0.0) * n / (n - 1.0);
    (m, (var / n).sqrt())
}

pub fn compare_beta_gradients<R: Rng + ?Sized>(
    alpha: f64,
    beta: f64,
    f: TestFn,
    draws: usize,
    rng: &mut R,
) -> Result<BetaGradComparison> {
    let dist = EmbeddingDist::beta(vec![alpha], vec![beta]).stage("beta_gradient")?;
    let mut acc = [[0.0; 2]; 4];
    for _ in 0..draws {
        let u = dist.sample(rng);
        let rg = dist.reparam_grad_at(&u, &[f.derivative(u[0])]).stage("reparam_grad")?;
        if let ParamGrad::Shape { alpha: ga, beta: gb } = rg.grad {
            for (k, g) in [ga[0], gb[0]].into_iter().enumerate() {
                acc[k][0] += g;
                acc[k][1] += g * g;
            }
        }
        let v = dist.sample(rng);
        if let ParamGrad::Shape { alpha: sa, beta: sb } = dist.score(&v).stage("score")? {
            let fv = f.value(v[0]);
            for (k, s) in [sa[0], sb[0]].into_iter().enumerate() {
                acc[2 + k][0] += fv * s;
                acc[2 + k][1] += (fv * s).powi(2);
            }
        }
    }
    let stats: Vec<(f64, f64)> = acc.iter().map(|a| mean_se(a[0], a[1], draws)).collect();
    Ok(BetaGradComparison {
        implicit: [stats[0].0, stats[1].0],
        score: [stats[2].0, stats[3].0],
        combined_se: [
            (stats[0].1.powi(2) + stats[2].1.powi(2)).sqrt(),
            (stats[1].1.powi(2) + stats[3].1.powi(2)).sqrt(),
        ],
    })
}

/// A random 3-user Beta mixture in two dimensions.
pub fn random_beta_mixture<R: Rng + ?Sized>(users: usize, dim: usize, rng: &mut R) -> Result<Mixture<f64>> {
    let dists = (0..users)
        .map(|_| {
            let a = (0..dim).map(|_| rng.random_range(0.8..6.0)).collect();
            let b = (0..dim).map(|_| rng.random_range(0.8..6.0)).collect();
            EmbeddingDist::beta(a, b)
        })
        .collect::<idfree_core::Result<Vec<_>>>()
        .stage("beta_mixture")?;
    Mixture::uniform(dists).stage("beta_mixture")
}

/// Apply `steps` successive decompositions to random components and
/// dimensions; every intermediate representation is compared against the
/// original on a `resolution`² grid. Returns the largest density and CDF
/// differences seen and whether every step passed.
pub fn chained_decompositions<R: Rng + ?Sized>(
    mix: &Mixture<f64>,
    steps: usize,
    resolution: usize,
    rng: &mut R,
) -> Result<(f64, f64, bool)> {
    let mut cur = mix.clone();
    let (mut pdf, mut cdf, mut pass) = (0.0f64, 0.0f64, true);
    for _ in 0..steps {
        let n = rng.random_range(0..cur.len());
        let i = rng.random_range(0..cur.dim());
        cur = beta_decompose(&cur, n, i).stage("beta_decompose")?;
        let r = verify_nonidentifiability(mix, &cur, resolution, NONID_TOL).stage("verify_nonidentifiability")?;
        pdf = pdf.max(r.max_pdf_diff);
        cdf = cdf.max(r.max_cdf_diff);
        pass &= r.pass;
    }
    Ok((pdf, cdf, pass))
}

fn record_key(r: &AnonymousRecord<f64>) -> Vec<u64> {
    r.e.iter()
        .chain(&r.x)
        .map(|v| v.to_bits())
        .chain(std::iter::once(r.y as u64))
        .collect()
}

/// Ground-truth source device of every collected record, by exact match
/// against the sessions that were sent. Fails if a record is ambiguous.
pub fn source_positions(dataset: &CloudDataset<f64>, sessions: &[Vec<AnonymousRecord<f64>>]) -> Result<Vec<usize>> {
    let mut owner: HashMap<Vec<u64>, Option<usize>> = HashMap::new();
    for (u, s) in sessions.iter().enumerate() {
        for r in s {
            owner
                .entry(record_key(r))
                .and_modify(|o| {
                    if *o != Some(u) {
                        *o = None
                    }
                })
                .or_insert(Some(u));
        }
    }
    dataset
        .records()
        .iter()
        .map(|r| match owner.get(&record_key(r)) {
            Some(Some(u)) => Ok(*u),
            Some(None) => Err(HarnessError::Verification("record shared by several devices".into())),
            None => Err(HarnessError::Verification("collected record was never sent".into())),
        })
        .collect()
}

fn adjacent_same(sources: &[usize]) -> usize {
    sources.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Permutation test for order leakage: the statistic is the number of
/// neighbouring records that came from the same device; the p-value is
/// the fraction of random orderings with at least as many.
pub fn adjacency_permutation_test(sources: &[usize], permutations: usize, seed: u64) -> f64 {
    let observed = adjacent_same(sources);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = sources.to_vec();
    let mut hits = 0;
    for _ in 0..permutations {
        perm.shuffle(&mut rng);
        hits += usize::from(adjacent_same(&perm) >= observed);
    }
    (hits + 1) as f64 / (permutations + 1) as f64
}

fn check(name: &str, outcome: Result<(bool, String)>) -> CheckResult {
    match outcome {
        Ok((pass, detail)) => CheckResult {
            name: name.into(),
            pass,
            detail,
        },
        Err(e) => CheckResult {
            name: name.into(),
            pass: false,
            detail: e.to_string(),
        },
    }
}

fn gradient_checks(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let dims = cfg.dims();
    let mut worst_e = 0.0f64;
    let mut worst_m = 0.0f64;
    for _ in 0..20 {
        let (m, u, x, y) = random_instance(dims, rng);
        worst_e = worst_e.max(fd_check_embedding(&m, &u, &x, y)?);
        worst_m = worst_m.max(fd_check_model(&m, &u, &x, y)?);
    }
    let (m, u, x, y) = random_instance(dims, rng);
    let crn = crn_fd_gaussian(&m, &u, 0.2, &x, y, 2_000, rng)?;
    let pass = worst_e < GRAD_REL_TOL && worst_m < GRAD_REL_TOL && crn < CRN_REL_TOL;
    Ok((
        pass,
        format!("embedding rel {worst_e:.2e}, weights rel {worst_m:.2e}, reparam CRN rel {crn:.2e}"),
    ))
}

fn beta_gradient_check(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let cases = [
        (2.0, 2.0, TestFn::Sin(3.0)),
        (0.7, 1.5, TestFn::Pow(2.0)),
        (4.0, 1.2, TestFn::Quad(0.3)),
    ];
    let mut worst = 0.0f64;
    for (a, b, f) in cases {
        worst = worst.max(compare_beta_gradients(a, b, f, 20_000, rng)?.max_z());
    }
    Ok((worst < 3.0, format!("max |implicit − score| = {worst:.2} combined SE")))
}

fn lemma3_check(rng: &mut ChaCha8Rng, phi: fn(f64) -> f64) -> Result<(bool, String)> {
    let cases = [(0.1, 0.2, 8), (0.3, 0.2, 1), (0.05, 0.1, 64)];
    let mut worst = 0.0f64;
    for (dist, sigma, d) in cases {
        let mc = lemma3_monte_carlo(dist, sigma, d, 1_000_000, rng);
        worst = worst.max((lemma3_prob_with(dist, sigma, phi) - mc).abs());
    }
    Ok((worst <= LEMMA3_TOL, format!("max |closed form − MC| = {worst:.5}")))
}

fn bound_check(cfg: &ExperimentConfig, p: &Pipeline, phi: fn(f64) -> f64) -> Result<(bool, String)> {
    if cfg.trainer.mode != Family::Gaussian {
        return Ok((true, "not applicable in beta mode".into()));
    }
    let t = &cfg.trainer;
    let bound =
        theorem2_bound_with(t.eta, t.t_max, t.clip_norm, t.sigma, cfg.task.users, phi).stage("theorem2_bound")?;
    let emp = p.metrics.attack.empirical_misattribution;
    let gap = p.metrics.pairwise_gap.as_ref().map_or(0, |g| g.violations);
    Ok((
        emp >= bound - BOUND_SLACK && gap == 0,
        format!("misattribution {emp:.4} vs bound {bound:.4}; gap violations {gap}"),
    ))
}

fn nonid_check(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mix = random_beta_mixture(3, 2, rng)?;
    let (pdf, cdf, pass) = chained_decompositions(&mix, 5, 200, rng)?;
    Ok((
        pass,
        format!("5 chained splits, max pdf diff {pdf:.2e}, max cdf diff {cdf:.2e}"),
    ))
}

fn anonymity_check(cfg: &ExperimentConfig, p: &Pipeline) -> Result<(bool, String)> {
    let mut scanned = 0;
    for s in &p.sessions {
        let mut buf = Vec::new();
        write_session(&mut buf, s).stage("write_session")?;
        let text = String::from_utf8(buf).map_err(|e| HarnessError::Verification(e.to_string()))?;
        scanned += scan_keys(&text).stage("scan_keys")?;
    }
    let seed = p.dataset.shuffle_seed();
    let local = transfer(&Transport::InProcess, &p.sessions, seed).stage("transfer")?;
    let socket = transfer(&Transport::Socket("127.0.0.1:0".into()), &p.sessions, seed).stage("transfer")?;
    let same = local == socket;
    let sources = source_positions(&local, &p.sessions)?;
    let pval = adjacency_permutation_test(&sources, 1000, stream(cfg.seed, "permutation", 0));
    Ok((
        same && pval > PERMUTATION_ALPHA,
        format!("{scanned} records with keys {{e,x,y}}; transports agree: {same}; order p = {pval:.3}"),
    ))
}

/// Run every check with the standard normal CDF.
pub fn verify_all(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    verify_all_with(cfg, std_normal_cdf::<f64>)
}

/// [`verify_all`] with the normal CDF used by the closed forms supplied by
/// the caller.
pub fn verify_all_with(cfg: &ExperimentConfig, phi: fn(f64) -> f64) -> Result<VerifyReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, "verify", 0));
    let mut checks = vec![
        check("gradients", gradient_checks(cfg, &mut rng)),
        check("beta_gradient", beta_gradient_check(&mut rng)),
        check("lemma3", lemma3_check(&mut rng, phi)),
        check("nonidentifiability", nonid_check(&mut rng)),
    ];
    match run_pipeline(cfg) {
        Ok(p) => {
            checks.push(check("misattribution_bound", bound_check(cfg, &p, phi)));
            checks.push(check("anonymity", anonymity_check(cfg, &p)));
        }
        Err(e) => {
            for name in ["misattribution_bound", "anonymity"] {
                checks.push(CheckResult {
                    name: name.into(),
                    pass: false,
                    detail: e.to_string(),
                });
            }
        }
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(VerifyReport { checks, pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_checks_catch_a_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = ModelDims {
            d_u: 3,
            d_x: 2,
            d_h: 4,
            classes: 3,
        };
        let (m, u, x, y) = random_instance(dims, &mut rng);
        assert!(fd_check_embedding(&m, &u, &x, y).unwrap() < GRAD_REL_TOL);
        assert!(fd_check_model(&m, &u, &x, y).unwrap() < GRAD_REL_TOL);
        let g = m.grad_embedding(&u, &x, y).unwrap();
        let wrong: Vec<f64> = g.iter().map(|v| v * 1.01).collect();
        assert!(rel_error(&wrong, &g) > GRAD_REL_TOL);
    }

    #[test]
    fn permutation_test_flags_unshuffled_order() {
        let blocks: Vec<usize> = (0..20).flat_map(|u| std::iter::repeat_n(u, 10)).collect();
        assert!(adjacency_permutation_test(&blocks, 200, 3) < 0.01);
        let mut mixed = blocks.clone();
        mixed.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
        assert!(adjacency_permutation_test(&mixed, 200, 3) > 0.01);
    }

    #[test]
    fn beta_gradient_estimators_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = compare_beta_gradients(2.5, 1.5, TestFn::Pow(1.0), 20_000, &mut rng).unwrap();
        // d/dα of α/(α+β) = β/(α+β)²
        assert!((c.implicit[0] - 1.5 / 16.0).abs() < 4.0 * c.combined_se[0]);
        assert!(c.max_z() < 4.0);
    }

    #[test]
    fn source_positions_reject_unknown_records() {
        let s = vec![vec![AnonymousRecord {
            e: vec![0.5],
            x: vec![1.0],
            y: 0,
        }]];
        let data = idfree_core::cloud::collect(s.clone(), 1).unwrap();
        assert_eq!(source_positions(&data, &s).unwrap(), vec![0]);
        let other = vec![vec![AnonymousRecord {
            e: vec![0.25],
            x: vec![1.0],
            y: 0,
        }]];
        assert!(source_positions(&data, &other).is_err());
    }
}
