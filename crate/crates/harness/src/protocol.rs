//! End-to-end protocol: bootstrap, on-device distribution training,
//! anonymous upload, cloud fine-tuning, evaluation and attack.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use idfree_core::analysis::{
    misattribution_mc, pairwise_gap_check, uniform_prior, AttackReport, BoundParams, GapReport,
};
use idfree_core::cloud::{bootstrap_train, evaluate_with, finetune_from, AnonymousRecord, CloudDataset, EvalReport};
use idfree_core::dist::EmbeddingDist;
use idfree_core::model::{LabeledSample, Mlp};
use idfree_core::synth::{generate_synthetic, SyntheticTask};
use idfree_core::trainer::{emit_uploads_from, train_device, EmbeddingSampler, Family, TrainedDistribution};
use idfree_core::wire::{transfer, write_session};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{stream, ExperimentConfig, PriorMode};
use crate::error::{Result, StageExt};

/// Synthetic data plus the frozen bootstrap model every device downloads.
pub struct Prepared {
    pub task: SyntheticTask<f64>,
    pub bootstrap: Mlp<f64>,
    pub bootstrap_losses: Vec<f64>,
}

/// Generate the task and train the bootstrap model on all (x, y) pairs with
/// zero embeddings.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let task = generate_synthetic::<f64>(&cfg.task_spec()).stage("generate")?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, "model_init", 0));
    let mut model = Mlp::init(cfg.dims(), cfg.model.embed_scale, &mut rng);
    let pooled: Vec<LabeledSample<f64>> = task.devices.iter().flat_map(|d| d.train.iter().cloned()).collect();
    let bootstrap_losses = bootstrap_train(&mut model, &pooled, &cfg.bootstrap_sgd()).stage("bootstrap_train")?;
    Ok(Prepared {
        task,
        bootstrap: model.frozen(),
        bootstrap_losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMetrics {
    pub accuracy_personalized: f64,
    pub accuracy_bootstrap: f64,
    pub per_user_personalized: Vec<f64>,
    pub attack: AttackReport,
    /// Gaussian mode only.
    pub pairwise_gap: Option<GapReport>,
    pub rounds: usize,
    pub uploads: usize,
    pub mean_initial_device_loss: f64,
    pub mean_final_device_loss: f64,
    pub bootstrap_losses: Vec<f64>,
    pub finetune_losses: Vec<f64>,
    pub model_checksum: u64,
}

/// Everything a protocol run produced, for callers that inspect internals
/// (tests, the verification suite, exports).
pub struct Pipeline {
    pub prepared: Prepared,
    pub model: Mlp<f64>,
    pub trained: Vec<TrainedDistribution<f64>>,
    /// Device-side upload sessions of the last round, in device order.
    pub sessions: Vec<Vec<AnonymousRecord<f64>>>,
    pub dataset: CloudDataset<f64>,
    pub metrics: ProtocolMetrics,
}

impl Pipeline {
    pub fn dists(&self) -> Vec<EmbeddingDist<f64>> {
        self.trained.iter().map(|t| t.dist.clone()).collect()
    }
}

fn attack_prior(cfg: &ExperimentConfig, sessions: &[Vec<AnonymousRecord<f64>>]) -> Vec<f64> {
    match cfg.attack.prior {
        PriorMode::Uniform => uniform_prior(sessions.len()),
        PriorMode::Weighted => {
            let total: usize = sessions.iter().map(Vec::len).sum();
            sessions.iter().map(|s| s.len() as f64 / total as f64).collect()
        }
    }
}

/// Run the protocol and keep every intermediate product.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Pipeline> {
    let prepared = prepare(cfg)?;
    let devices = &prepared.task.devices;
    let n = devices.len();
    let transport = cfg.transport()?;
    let mut cloud_model = prepared.bootstrap.clone();
    let mut trained = Vec::new();
    let mut samplers = Vec::new();
    let mut sessions = Vec::new();
    let mut dataset = None;
    let mut finetune_losses = Vec::new();
    for round in 0..cfg.rounds {
        let device_model = cloud_model.clone().frozen();
        trained = cfg
            .with_pool(|| {
                devices
                    .par_iter()
                    .enumerate()
                    .map(|(u, dev)| {
                        let mut tc = cfg.trainer_config(u);
                        tc.seed = stream(tc.seed, "round", round as u64);
                        train_device(dev, &device_model, &tc)
                    })
                    .collect::<idfree_core::Result<Vec<_>>>()
            })?
            .stage("train_device")?;
        samplers = trained
            .iter()
            .enumerate()
            .map(|(u, t)| {
                EmbeddingSampler::new(
                    t.dist.clone(),
                    cfg.embedding_mode,
                    stream(cfg.seed, "embed", (round * n + u) as u64),
                )
            })
            .collect::<idfree_core::Result<Vec<_>>>()
            .stage("emit_uploads")?;
        sessions = samplers
            .iter_mut()
            .zip(devices)
            .map(|(s, d)| emit_uploads_from(s, d))
            .collect::<Vec<_>>();
        let data = transfer(&transport, &sessions, stream(cfg.seed, "shuffle", round as u64)).stage("collect")?;
        let fresh = cfg.cloud.from_scratch.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, "scratch_init", round as u64));
            Mlp::init(cfg.dims(), cfg.model.embed_scale, &mut rng)
        });
        let (model, losses) = finetune_from(&cloud_model, fresh, &data, &cfg.finetune_sgd(round)).stage("finetune")?;
        cloud_model = model;
        finetune_losses = losses;
        dataset = Some(data);
    }
    let model = cloud_model;
    let personalized = evaluate_with(&model, devices, |u, _| Ok(samplers[u].next_embedding())).stage("evaluate")?;
    let bootstrap_eval = evaluate_zero(&prepared.bootstrap, &prepared.task)?;
    let dists: Vec<EmbeddingDist<f64>> = trained.iter().map(|t| t.dist.clone()).collect();
    let prior = attack_prior(cfg, &sessions);
    let bound = (cfg.trainer.mode == Family::Gaussian && cfg.trainer.sigma > 0.0).then_some(BoundParams {
        eta: cfg.trainer.eta,
        t_max: cfg.trainer.t_max,
        clip_norm: cfg.trainer.clip_norm,
        sigma: cfg.trainer.sigma,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, "attack", 0));
    let attack = cfg
        .with_pool(|| misattribution_mc(&dists, &prior, cfg.attack.m, &mut rng, bound))?
        .stage("misattribution_mc")?;
    let pairwise_gap = match cfg.trainer.mode {
        Family::Gaussian => Some(
            pairwise_gap_check(&dists, cfg.trainer.eta, cfg.trainer.t_max, cfg.trainer.clip_norm)
                .stage("pairwise_gap_check")?,
        ),
        Family::Beta => None,
    };
    let mean = |f: fn(&TrainedDistribution<f64>) -> f64| trained.iter().map(f).sum::<f64>() / trained.len() as f64;
    let dataset = dataset.expect("at least one round");
    let metrics = ProtocolMetrics {
        accuracy_personalized: personalized.micro_accuracy,
        accuracy_bootstrap: bootstrap_eval.micro_accuracy,
        per_user_personalized: personalized.per_user_accuracy,
        attack,
        pairwise_gap,
        rounds: cfg.rounds,
        uploads: dataset.len(),
        mean_initial_device_loss: mean(|t| t.initial_train_loss),
        mean_final_device_loss: mean(|t| t.final_train_loss),
        bootstrap_losses: prepared.bootstrap_losses.clone(),
        finetune_losses,
        model_checksum: model.checksum(),
    };
    Ok(Pipeline {
        prepared,
        model,
        trained,
        sessions,
        dataset,
        metrics,
    })
}

/// Accuracy of `model` with the embedding slot held at zero.
pub fn evaluate_zero(model: &Mlp<f64>, task: &SyntheticTask<f64>) -> Result<EvalReport> {
    let zeros = vec![0.0; model.dims().d_u];
    evaluate_with(model, &task.devices, |_, _| Ok(zeros.clone())).stage("evaluate")
}

/// Run the protocol and, when `out` is given, write `metrics.json`,
/// `model.json` and the collected `cloud_dataset.jsonl` there.
pub fn run_protocol(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ProtocolMetrics> {
    let p = run_pipeline(cfg)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("metrics.json"), &p.metrics)?;
        write_json(&dir.join("model.json"), &p.model)?;
        let f = BufWriter::new(fs::File::create(dir.join("cloud_dataset.jsonl"))?);
        write_session(f, p.dataset.records()).stage("write dataset")?;
    }
    Ok(p.metrics)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Accuracy of the bootstrap model with zero embeddings: the cloud model
/// trained without any personal information.
pub fn baseline_no_id(cfg: &ExperimentConfig) -> Result<f64> {
    let p = prepare(cfg)?;
    Ok(evaluate_zero(&p.bootstrap, &p.task)?.micro_accuracy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnDeviceReport {
    pub micro_accuracy: f64,
    pub per_user_accuracy: Vec<f64>,
}

/// Every device copies the bootstrap model and fine-tunes all of its
/// weights on local data only (embedding slot at zero).
pub fn baseline_on_device(cfg: &ExperimentConfig) -> Result<OnDeviceReport> {
    let p = prepare(cfg)?;
    baseline_on_device_from(cfg, &p)
}

pub fn baseline_on_device_from(cfg: &ExperimentConfig, p: &Prepared) -> Result<OnDeviceReport> {
    let zeros = vec![0.0; cfg.model.d_u];
    let per_user = cfg
        .with_pool(|| {
            p.task
                .devices
                .par_iter()
                .enumerate()
                .map(|(u, dev)| -> idfree_core::Result<(usize, usize)> {
                    let mut local = p.bootstrap.clone().unfrozen();
                    if cfg.on_device.epochs > 0 {
                        bootstrap_train(&mut local, &dev.train, &cfg.on_device_sgd(u))?;
                    }
                    let mut hit = 0;
                    for s in &dev.test {
                        hit += usize::from(idfree_core::cloud::serve(&local, &zeros, &s.x)?.0 == s.y);
                    }
                    Ok((hit, dev.test.len()))
                })
                .collect::<idfree_core::Result<Vec<_>>>()
        })?
        .stage("on_device")?;
    let (hit, total) = per_user.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(OnDeviceReport {
        micro_accuracy: hit as f64 / total as f64,
        per_user_accuracy: per_user.iter().map(|&(h, t)| h as f64 / t as f64).collect(),
    })
}

/// Static embeddings: the same protocol with σ = 0, so each user always
/// sends the mean of its distribution.
pub fn baseline_static_embedding(cfg: &ExperimentConfig) -> Result<ProtocolMetrics> {
    let mut c = cfg.clone();
    c.trainer.mode = Family::Gaussian;
    c.trainer.sigma = 0.0;
    run_protocol(&c, None)
}
