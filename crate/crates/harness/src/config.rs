//! Experiment configuration, read from a single TOML document.
//!
//! Every field has a default and unknown keys are rejected. All randomness
//! flows from the top-level `seed` through named streams (see [`stream`]).

use std::path::Path;

use idfree_core::cloud::SgdConfig;
use idfree_core::dist::EmbeddingDist;
use idfree_core::model::ModelDims;
use idfree_core::synth::SyntheticTaskSpec;
use idfree_core::trainer::{EmbeddingMode, Family, TrainerConfig};
use idfree_core::wire::Transport;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub users: usize,
    pub per_user: usize,
    pub d_x: usize,
    pub classes: usize,
    pub kappa: f64,
    pub label_noise: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        let s = SyntheticTaskSpec::default();
        TaskSection {
            users: s.users,
            per_user: s.per_user,
            d_x: s.d_x,
            classes: s.classes,
            kappa: s.kappa,
            label_noise: s.label_noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_u: usize,
    pub d_h: usize,
    /// Scale applied to the initial weights reading the embedding slot.
    pub embed_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_u: 16,
            d_h: 32,
            embed_scale: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub eta: f64,
    pub t_max: usize,
    pub clip_norm: f64,
    pub mc_samples: usize,
    pub mode: Family,
    pub sigma: f64,
    /// Gaussian shared initial mean (every coordinate).
    pub init_mean: f64,
    /// Beta shared initial shapes (every coordinate).
    pub init_alpha: f64,
    pub init_beta: f64,
    pub batch_size: usize,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            eta: 1e-3,
            t_max: 100,
            clip_norm: 5.0,
            mc_samples: 8,
            mode: Family::Gaussian,
            sigma: 0.2,
            init_mean: 0.0,
            init_alpha: 2.0,
            init_beta: 2.0,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloudSection {
    pub bootstrap_epochs: usize,
    pub finetune_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fine-tune from a fresh initialization instead of the bootstrap weights.
    pub from_scratch: bool,
    /// L2 penalty applied during fine-tuning only.
    pub finetune_weight_decay: f64,
}

impl Default for CloudSection {
    fn default() -> Self {
        CloudSection {
            bootstrap_epochs: 20,
            finetune_epochs: 20,
            lr: 0.1,
            batch_size: 32,
            from_scratch: false,
            finetune_weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnDeviceSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for OnDeviceSection {
    fn default() -> Self {
        OnDeviceSection {
            epochs: 20,
            lr: 0.1,
            batch_size: 32,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    Uniform,
    /// Weights proportional to each user's upload count.
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// Draws per user.
    pub m: usize,
    pub prior: PriorMode,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            m: 1000,
            prior: PriorMode::Uniform,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropySection {
    pub k: usize,
    /// Bucket edges; empty means six equal intervals over [0, ln min(K, C)].
    pub edges: Vec<f64>,
}

impl Default for EntropySection {
    fn default() -> Self {
        EntropySection {
            k: 20,
            edges: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionSection {
    pub samples_per_user: usize,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        ProjectionSection { samples_per_user: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// `inprocess` or `socket:ADDR`.
    pub transport: String,
    pub rounds: usize,
    /// Worker threads for device training and attacks; 0 uses all cores.
    pub workers: usize,
    pub embedding_mode: EmbeddingMode,
    pub task: TaskSection,
    pub model: ModelSection,
    pub trainer: TrainerSection,
    pub cloud: CloudSection,
    pub on_device: OnDeviceSection,
    pub attack: AttackSection,
    pub entropy: EntropySection,
    pub projection: ProjectionSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            transport: "inprocess".into(),
            rounds: 1,
            workers: 0,
            embedding_mode: EmbeddingMode::Fresh,
            task: TaskSection::default(),
            model: ModelSection::default(),
            trainer: TrainerSection::default(),
            cloud: CloudSection::default(),
            on_device: OnDeviceSection::default(),
            attack: AttackSection::default(),
            entropy: EntropySection::default(),
            projection: ProjectionSection::default(),
        }
    }
}

/// Seed of the named random stream `name` (optionally indexed) under the
/// master seed.
pub fn stream(master: u64, name: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = master ^ h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.task_spec()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.transport()?;
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.model.d_u == 0 || self.model.d_h == 0 {
            return bad("model.d_u and model.d_h must be positive".into());
        }
        self.trainer_config(0)
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        for (name, lr, batch) in [
            ("cloud", self.cloud.lr, self.cloud.batch_size),
            ("on_device", self.on_device.lr, self.on_device.batch_size),
        ] {
            if !(lr > 0.0) || batch == 0 {
                return bad(format!("{name}.lr and {name}.batch_size must be positive"));
            }
        }
        if self.attack.m == 0 {
            return bad("attack.m must be at least 1".into());
        }
        if self.entropy.k < 2 || self.entropy.k > self.task.users {
            return bad(format!("entropy.k must lie in 2..={}", self.task.users));
        }
        if !self.entropy.edges.is_empty()
            && (self.entropy.edges.len() < 2 || self.entropy.edges.windows(2).any(|w| !(w[0] < w[1])))
        {
            return bad("entropy.edges must be strictly increasing with at least two entries".into());
        }
        if self.projection.samples_per_user == 0 {
            return bad("projection.samples_per_user must be at least 1".into());
        }
        if let EmbeddingMode::Cached { pool: 0 } = self.embedding_mode {
            return bad("cached embedding pool must be non-empty".into());
        }
        Ok(())
    }

    pub fn transport(&self) -> Result<Transport> {
        self.transport
            .parse()
            .map_err(|e: idfree_core::Error| HarnessError::Config(e.to_string()))
    }

    pub fn task_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            users: self.task.users,
            per_user: self.task.per_user,
            d_x: self.task.d_x,
            classes: self.task.classes,
            kappa: self.task.kappa,
            label_noise: self.task.label_noise,
            seed: stream(self.seed, "task", 0),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_u: self.model.d_u,
            d_x: self.task.d_x,
            d_h: self.model.d_h,
            classes: self.task.classes,
        }
    }

    pub fn shared_init(&self) -> EmbeddingDist<f64> {
        let d = self.model.d_u;
        match self.trainer.mode {
            Family::Gaussian => EmbeddingDist::DiagGaussian {
                mean: vec![self.trainer.init_mean; d],
                sigma: self.trainer.sigma,
            },
            Family::Beta => EmbeddingDist::BetaPerDim {
                alpha: vec![self.trainer.init_alpha; d],
                beta: vec![self.trainer.init_beta; d],
            },
        }
    }

    /// Trainer settings for device `user`.
    pub fn trainer_config(&self, user: usize) -> TrainerConfig<f64> {
        let t = &self.trainer;
        TrainerConfig {
            eta: t.eta,
            t_max: t.t_max,
            clip_norm: t.clip_norm,
            mc_samples: t.mc_samples,
            mode: t.mode,
            sigma: t.sigma,
            shared_init: self.shared_init(),
            batch_size: t.batch_size,
            seed: stream(self.seed, "device", user as u64),
        }
    }

    pub fn bootstrap_sgd(&self) -> SgdConfig {
        SgdConfig {
            epochs: self.cloud.bootstrap_epochs,
            lr: self.cloud.lr,
            batch_size: self.cloud.batch_size,
            seed: stream(self.seed, "bootstrap", 0),
            weight_decay: 0.0,
        }
    }

    pub fn finetune_sgd(&self, round: usize) -> SgdConfig {
        SgdConfig {
            epochs: self.cloud.finetune_epochs,
            lr: self.cloud.lr,
            batch_size: self.cloud.batch_size,
            seed: stream(self.seed, "finetune", round as u64),
            weight_decay: self.cloud.finetune_weight_decay,
        }
    }

    pub fn on_device_sgd(&self, user: usize) -> SgdConfig {
        SgdConfig {
            epochs: self.on_device.epochs,
            lr: self.on_device.lr,
            batch_size: self.on_device.batch_size,
            seed: stream(self.seed, "on_device", user as u64),
            weight_decay: self.on_device.weight_decay,
        }
    }

    pub fn entropy_edges(&self) -> Vec<f64> {
        if self.entropy.edges.is_empty() {
            idfree_core::analysis::default_entropy_edges(self.entropy.k, self.task.classes)
        } else {
            self.entropy.edges.clone()
        }
    }

    /// Run `f` on a pool with `workers` threads (all cores when 0).
    pub fn with_pool<R: Send>(&self, f: impl FnOnce() -> R + Send) -> Result<R> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;
        Ok(pool.install(f))
    }
}
