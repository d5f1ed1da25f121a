//! On-device fitting of a user's embedding distribution against the frozen
//! bootstrap model, and generation of the anonymous uploads.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::AnonymousRecord;
use crate::dist::{EmbeddingDist, NoiseDraw, ParamGrad};
use crate::error::{shape_err, Error, Result};
use crate::model::{LabeledSample, Mlp};
use crate::scalar::Real;
use crate::synth::DeviceDataset;

/// Which family a device trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Beta,
}

/// Hyperparameters of the on-device loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig<T> {
    /// Step size η.
    pub eta: T,
    /// Number of SGD steps T_max.
    pub t_max: usize,
    /// Gradient clipping norm G.
    pub clip_norm: T,
    /// Reparameterized draws per example, S.
    pub mc_samples: usize,
    pub mode: Family,
    /// Shared Gaussian standard deviation; unused in Beta mode.
    pub sigma: T,
    /// θ_0, identical on every device.
    pub shared_init: EmbeddingDist<T>,
    pub batch_size: usize,
    pub seed: u64,
}

impl<T: Real> TrainerConfig<T> {
    /// Gaussian mode, N(0, 0.2² I) initialization.
    pub fn gaussian(d_u: usize) -> Self {
        let sigma = T::lit(0.2);
        TrainerConfig {
            eta: T::lit(1e-3),
            t_max: 100,
            clip_norm: T::lit(5.0),
            mc_samples: 8,
            mode: Family::Gaussian,
            sigma,
            shared_init: EmbeddingDist::DiagGaussian {
                mean: vec![T::zero(); d_u],
                sigma,
            },
            batch_size: 32,
            seed: 0,
        }
    }

    /// Beta mode, Beta(2, 2) marginals at initialization.
    pub fn beta(d_u: usize) -> Self {
        TrainerConfig {
            mode: Family::Beta,
            shared_init: EmbeddingDist::BetaPerDim {
                alpha: vec![T::lit(2.0); d_u],
                beta: vec![T::lit(2.0); d_u],
            },
            ..Self::gaussian(d_u)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.mode, &self.shared_init) {
            (Family::Gaussian, EmbeddingDist::DiagGaussian { sigma, .. }) => {
                if *sigma != self.sigma {
                    return Err(Error::Config(format!(
                        "shared_init sigma {sigma} differs from configured sigma {}",
                        self.sigma
                    )));
                }
                if !(self.sigma >= T::zero()) {
                    return Err(Error::Config("sigma must be nonnegative".into()));
                }
            }
            (Family::Beta, EmbeddingDist::BetaPerDim { .. }) => {}
            _ => {
                return Err(Error::Config(format!(
                    "mode {:?} does not match the family of shared_init",
                    self.mode
                )))
            }
        }
        if !(self.eta > T::zero()) || !(self.clip_norm > T::zero()) {
            return Err(Error::Config("eta and clip_norm must be positive".into()));
        }
        if self.mc_samples == 0 || self.batch_size == 0 {
            return Err(Error::Config("mc_samples and batch_size must be positive".into()));
        }
        Ok(())
    }

    /// η·T·G, the largest distance θ can move from θ_0.
    pub fn drift_bound(&self) -> T {
        self.eta * T::from_count(self.t_max) * self.clip_norm
    }
}

/// Result of on-device training. Stays on the device.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedDistribution<T> {
    pub local_user_id: usize,
    pub dist: EmbeddingDist<T>,
    pub iterations_used: usize,
    /// Monte Carlo estimate of the objective at θ_0 on the full train split.
    pub initial_train_loss: T,
    /// Same estimate, same draws, at the returned θ.
    pub final_train_loss: T,
    /// Norm of the trained parameter displacement (mean, or softplus
    /// pre-images of the Beta shapes).
    pub param_drift: T,
}

/// Averaged objective and its gradient estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjGrad<T> {
    pub loss: T,
    pub grad: ParamGrad<T>,
    /// Coordinate contributions dropped by the Beta implicit gradient.
    pub skipped: usize,
}

/// Reparameterized estimate of ∇_θ (1/|B|) Σ_{(x,y)∈B} E_{u~F(θ)} l(h([u; x]), y)
/// with `mc_samples` draws per example.
pub fn estimate_obj_grad<T: Real, R: Rng + ?Sized>(
    dist: &EmbeddingDist<T>,
    model: &Mlp<T>,
    batch: &[LabeledSample<T>],
    mc_samples: usize,
    rng: &mut R,
) -> Result<ObjGrad<T>> {
    let noises: Vec<NoiseDraw<T>> = (0..batch.len() * mc_samples).map(|_| dist.draw_noise(rng)).collect();
    estimate_obj_grad_with_noise(dist, model, batch, &noises)
}

/// [`estimate_obj_grad`] with the base noise supplied: `noises` holds
/// `mc_samples` consecutive draws for each example of `batch` in order.
pub fn estimate_obj_grad_with_noise<T: Real>(
    dist: &EmbeddingDist<T>,
    model: &Mlp<T>,
    batch: &[LabeledSample<T>],
    noises: &[NoiseDraw<T>],
) -> Result<ObjGrad<T>> {
    if batch.is_empty() || !noises.len().is_multiple_of(batch.len()) || noises.is_empty() {
        return Err(shape_err("noise draws", batch.len().max(1), noises.len()));
    }
    let per = noises.len() / batch.len();
    let mut grad = ParamGrad::zeros_like(dist);
    let mut loss = T::zero();
    let mut skipped = 0;
    for (k, noise) in noises.iter().enumerate() {
        let s = &batch[k / per];
        let u = dist.reparam_sample(noise)?;
        let (l, g_u) = model.loss_and_grad_embedding(&u, &s.x, s.y)?;
        let rg = dist.reparam_grad_at(&u, &g_u)?;
        loss = loss + l;
        skipped += rg.skipped.len();
        grad.accumulate(&rg.grad);
    }
    let inv = T::one() / T::from_count(noises.len());
    grad.scale(inv);
    Ok(ObjGrad {
        loss: loss * inv,
        grad,
        skipped,
    })
}

/// Rescale `grad` to norm `max_norm` if it is longer.
pub fn clip<T: Real>(mut grad: ParamGrad<T>, max_norm: T) -> ParamGrad<T> {
    let n = grad.norm();
    if n > max_norm {
        grad.scale(max_norm / n);
    }
    grad
}

fn softplus<T: Real>(r: T) -> T {
    if r > T::lit(30.0) {
        r
    } else {
        r.exp().ln_1p()
    }
}

fn softplus_inv<T: Real>(a: T) -> T {
    if a > T::lit(30.0) {
        a
    } else {
        a + (-(-a).exp()).ln_1p()
    }
}

fn sigmoid<T: Real>(r: T) -> T {
    T::one() / (T::one() + (-r).exp())
}

/// Unconstrained parameters actually updated by SGD.
enum Params<T> {
    Mean(Vec<T>, T),
    Raw { alpha: Vec<T>, beta: Vec<T> },
}

impl<T: Real> Params<T> {
    fn from_dist(d: &EmbeddingDist<T>) -> Self {
        match d {
            EmbeddingDist::DiagGaussian { mean, sigma } => Params::Mean(mean.clone(), *sigma),
            EmbeddingDist::BetaPerDim { alpha, beta } => Params::Raw {
                alpha: alpha.iter().map(|&a| softplus_inv(a)).collect(),
                beta: beta.iter().map(|&b| softplus_inv(b)).collect(),
            },
        }
    }

    fn to_dist(&self) -> Result<EmbeddingDist<T>> {
        match self {
            Params::Mean(m, s) => EmbeddingDist::gaussian(m.clone(), *s),
            Params::Raw { alpha, beta } => EmbeddingDist::beta(
                alpha.iter().map(|&r| softplus(r)).collect(),
                beta.iter().map(|&r| softplus(r)).collect(),
            ),
        }
    }

    /// Chain rule from the natural parameters to the unconstrained ones.
    fn pull_back(&self, g: ParamGrad<T>) -> ParamGrad<T> {
        match (self, g) {
            (Params::Raw { alpha, beta }, ParamGrad::Shape { alpha: ga, beta: gb }) => ParamGrad::Shape {
                alpha: ga.iter().zip(alpha).map(|(&g, &r)| g * sigmoid(r)).collect(),
                beta: gb.iter().zip(beta).map(|(&g, &r)| g * sigmoid(r)).collect(),
            },
            (_, g) => g,
        }
    }

    fn step(&mut self, g: &ParamGrad<T>, eta: T) {
        let upd = |p: &mut [T], g: &[T]| {
            for (pi, &gi) in p.iter_mut().zip(g) {
                *pi = *pi - eta * gi;
            }
        };
        match (self, g) {
            (Params::Mean(m, _), ParamGrad::Mean(g)) => upd(m, g),
            (Params::Raw { alpha, beta }, ParamGrad::Shape { alpha: ga, beta: gb }) => {
                upd(alpha, ga);
                upd(beta, gb);
            }
            _ => unreachable!("gradient family always matches the parameters"),
        }
    }

    fn flat(&self) -> Vec<T> {
        match self {
            Params::Mean(m, _) => m.clone(),
            Params::Raw { alpha, beta } => alpha.iter().chain(beta).copied().collect(),
        }
    }
}

const EVAL_STREAM: u64 = 0x5eed_e7a1_0b1e_c7ed;

fn full_objective<T: Real>(
    dist: &EmbeddingDist<T>,
    model: &Mlp<T>,
    data: &[LabeledSample<T>],
    cfg: &TrainerConfig<T>,
) -> Result<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_STREAM);
    let mut total = T::zero();
    for s in data {
        for _ in 0..cfg.mc_samples {
            let u = dist.reparam_sample(&dist.draw_noise(&mut rng))?;
            let p = model.forward(&u, &s.x)?;
            total = total + crate::model::loss(&p, s.y);
        }
    }
    Ok(total / T::from_count(data.len() * cfg.mc_samples))
}

/// Fit θ on the device's train split by clipped SGD on the reparameterized
/// objective, starting from `cfg.shared_init`. The model must be frozen.
pub fn train_device<T: Real>(
    dataset: &DeviceDataset<T>,
    model: &Mlp<T>,
    cfg: &TrainerConfig<T>,
) -> Result<TrainedDistribution<T>> {
    cfg.validate()?;
    if model.is_trainable() {
        return Err(Error::Config("device training requires a frozen model".into()));
    }
    if cfg.shared_init.dim() != model.dims().d_u {
        return Err(shape_err("shared_init", model.dims().d_u, cfg.shared_init.dim()));
    }
    if dataset.train.is_empty() {
        return Err(Error::Config("device has no training data".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Params::from_dist(&cfg.shared_init);
    let start = params.flat();
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut cursor = order.len();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.t_max {
        batch.clear();
        while batch.len() < cfg.batch_size.min(order.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(dataset.train[order[cursor]].clone());
            cursor += 1;
        }
        let dist = params.to_dist()?;
        let est = estimate_obj_grad(&dist, model, &batch, cfg.mc_samples, &mut rng)?;
        let g = clip(params.pull_back(est.grad), cfg.clip_norm);
        params.step(&g, cfg.eta);
    }
    let drift = params
        .flat()
        .iter()
        .zip(&start)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<T>()
        .sqrt();
    if drift > cfg.drift_bound() * (T::one() + T::lit(1e-9)) {
        return Err(Error::Numerical(format!(
            "parameter drift {drift} exceeds eta*T*G = {}",
            cfg.drift_bound()
        )));
    }
    let dist = if cfg.t_max == 0 {
        cfg.shared_init.clone()
    } else {
        params.to_dist()?
    };
    Ok(TrainedDistribution {
        local_user_id: dataset.local_user_id,
        initial_train_loss: full_objective(&cfg.shared_init, model, &dataset.train, cfg)?,
        final_train_loss: full_objective(&dist, model, &dataset.train, cfg)?,
        dist,
        iterations_used: cfg.t_max,
        param_drift: drift,
    })
}

/// How query and upload embeddings are produced on a device.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum EmbeddingMode {
    /// A new draw from F(θ_n) every time.
    Fresh,
    /// Cycle through a fixed pool of draws made once.
    Cached { pool: usize },
}

/// Per-device source of embeddings.
pub struct EmbeddingSampler<T> {
    dist: EmbeddingDist<T>,
    rng: ChaCha8Rng,
    pool: Vec<Vec<T>>,
    next: usize,
}

impl<T: Real> EmbeddingSampler<T> {
    pub fn new(dist: EmbeddingDist<T>, mode: EmbeddingMode, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = match mode {
            EmbeddingMode::Fresh => Vec::new(),
            EmbeddingMode::Cached { pool: 0 } => {
                return Err(Error::Config("cached embedding pool must be non-empty".into()))
            }
            EmbeddingMode::Cached { pool } => (0..pool).map(|_| dist.sample(&mut rng)).collect(),
        };
        Ok(EmbeddingSampler {
            dist,
            rng,
            pool,
            next: 0,
        })
    }

    pub fn next_embedding(&mut self) -> Vec<T> {
        if self.pool.is_empty() {
            return self.dist.sample(&mut self.rng);
        }
        let e = self.pool[self.next].clone();
        self.next = (self.next + 1) % self.pool.len();
        e
    }
}

/// One anonymous record (e ~ F(θ_n), x, y) per training example.
pub fn emit_uploads<T: Real, R: Rng + ?Sized>(
    trained: &TrainedDistribution<T>,
    dataset: &DeviceDataset<T>,
    rng: &mut R,
) -> Vec<AnonymousRecord<T>> {
    dataset
        .train
        .iter()
        .map(|s| AnonymousRecord {
            e: trained.dist.sample(rng),
            x: s.x.clone(),
            y: s.y,
        })
        .collect()
}

/// [`emit_uploads`] drawing embeddings from a sampler.
pub fn emit_uploads_from<T: Real>(
    sampler: &mut EmbeddingSampler<T>,
    dataset: &DeviceDataset<T>,
) -> Vec<AnonymousRecord<T>> {
    dataset
        .train
        .iter()
        .map(|s| AnonymousRecord {
            e: sampler.next_embedding(),
            x: s.x.clone(),
            y: s.y,
        })
        .collect()
}
