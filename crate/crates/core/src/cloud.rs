//! Cloud side: pooling anonymous uploads, bootstrap training on zero
//! embeddings, fine-tuning on sampled embeddings, and serving.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::EmbeddingDist;
use crate::error::{shape_err, Error, Result};
use crate::model::{argmax, LabeledSample, Mlp, ModelDims, ModelGrad};
use crate::scalar::Real;
use crate::synth::DeviceDataset;

/// One anonymous training example (e, x, y). There is deliberately no user
/// field: the cloud cannot tell which device sent it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
pub struct AnonymousRecord<T> {
    pub e: Vec<T>,
    pub x: Vec<T>,
    pub y: usize,
}

/// The pooled upload set D = ∪_n D_n, in a canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudDataset<T> {
    records: Vec<AnonymousRecord<T>>,
    shuffle_seed: u64,
}

impl<T: Real> CloudDataset<T> {
    pub fn records(&self) -> &[AnonymousRecord<T>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.shuffle_seed
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn record_key<T: Real>(r: &AnonymousRecord<T>, seed: u64) -> u64 {
    let mut h = splitmix(seed);
    for v in r.e.iter().chain(&r.x) {
        h = splitmix(h ^ v.as_f64().to_bits());
    }
    splitmix(h ^ r.y as u64)
}

fn content_cmp<T: Real>(a: &AnonymousRecord<T>, b: &AnonymousRecord<T>) -> std::cmp::Ordering {
    let fa = a.e.iter().chain(&a.x).map(|v| v.as_f64());
    let fb = b.e.iter().chain(&b.x).map(|v| v.as_f64());
    for (x, y) in fa.zip(fb) {
        let o = x.total_cmp(&y);
        if o.is_ne() {
            return o;
        }
    }
    a.y.cmp(&b.y)
}

/// Union of every device's uploads. Records are ordered by a keyed hash of
/// their content, so the result does not depend on which device's batch
/// arrived first.
pub fn collect<T, I>(uploads: I, shuffle_seed: u64) -> Result<CloudDataset<T>>
where
    T: Real,
    I: IntoIterator<Item = Vec<AnonymousRecord<T>>>,
{
    let mut keyed: Vec<(u64, AnonymousRecord<T>)> = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    for batch in uploads {
        for r in batch {
            let s = (r.e.len(), r.x.len());
            match shape {
                None => shape = Some(s),
                Some(expected) if expected != s => {
                    return Err(Error::Shape(format!(
                        "record with (|e|, |x|) = {s:?}, expected {expected:?}"
                    )))
                }
                _ => {}
            }
            if r.e.iter().chain(&r.x).any(|v| !v.is_finite()) {
                return Err(Error::Numerical("record with non-finite entries".into()));
            }
            keyed.push((record_key(&r, shuffle_seed), r));
        }
    }
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| content_cmp(&a.1, &b.1)));
    Ok(CloudDataset {
        records: keyed.into_iter().map(|(_, r)| r).collect(),
        shuffle_seed,
    })
}

/// Plain minibatch SGD settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// L2 penalty coefficient λ: each step also subtracts lr·λ·w.
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            epochs: 20,
            lr: 0.1,
            batch_size: 32,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

impl SgdConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.lr * self.weight_decay < 1.0) {
            return Err(Error::Config(
                "weight_decay must satisfy 0 <= lr * weight_decay < 1".into(),
            ));
        }
        Ok(())
    }
}

/// Mean training loss per epoch.
pub type EpochLosses<T> = Vec<T>;

fn sgd<'a, T, F>(model: &mut Mlp<T>, n: usize, cfg: &SgdConfig, example: F) -> Result<EpochLosses<T>>
where
    T: Real,
    F: Fn(usize) -> (&'a [T], &'a [T], usize),
{
    cfg.validate()?;
    if !model.is_trainable() {
        return Err(Error::Config("cloud training needs a trainable model".into()));
    }
    if n == 0 {
        return Err(Error::Config("cloud training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lr = T::lit(cfg.lr);
    let decay = T::lit(cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = ModelGrad::zeros(model.dims());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = T::zero();
        for batch in order.chunks(cfg.batch_size) {
            grad.fill_zero();
            for &i in batch {
                let (u, x, y) = example(i);
                total = total + model.accumulate_grad_model(u, x, y, &mut grad)?;
            }
            let scale = lr / T::from_count(batch.len());
            if decay > T::zero() {
                model.shrink_weights(T::one() - lr * decay)?;
            }
            model.sgd_step(&grad, scale)?;
        }
        losses.push(total / T::from_count(n));
    }
    Ok(losses)
}

/// Train `model` on (x, y) pairs with the embedding slot held at zero.
pub fn bootstrap_train<T: Real>(
    model: &mut Mlp<T>,
    samples: &[LabeledSample<T>],
    cfg: &SgdConfig,
) -> Result<EpochLosses<T>> {
    let zeros = vec![T::zero(); model.dims().d_u];
    for s in samples {
        if s.x.len() != model.dims().d_x {
            return Err(shape_err("bootstrap features", model.dims().d_x, s.x.len()));
        }
    }
    sgd(model, samples.len(), cfg, |i| {
        (&zeros[..], &samples[i].x[..], samples[i].y)
    })
}

/// Train `model` on the pooled anonymous records.
pub fn finetune<T: Real>(model: &mut Mlp<T>, data: &CloudDataset<T>, cfg: &SgdConfig) -> Result<EpochLosses<T>> {
    let dims = model.dims();
    if let Some(r) = data.records.first() {
        if r.e.len() != dims.d_u {
            return Err(shape_err("record embedding", dims.d_u, r.e.len()));
        }
        if r.x.len() != dims.d_x {
            return Err(shape_err("record features", dims.d_x, r.x.len()));
        }
    }
    let recs = &data.records;
    sgd(model, recs.len(), cfg, |i| (&recs[i].e[..], &recs[i].x[..], recs[i].y))
}

/// Fine-tune starting either from the bootstrap model or from a fresh
/// initialization with the same dimensions.
pub fn finetune_from<T: Real>(
    bootstrap: &Mlp<T>,
    fresh: Option<Mlp<T>>,
    data: &CloudDataset<T>,
    cfg: &SgdConfig,
) -> Result<(Mlp<T>, EpochLosses<T>)> {
    let mut model = match fresh {
        Some(m) => {
            if m.dims() != bootstrap.dims() {
                return Err(Error::Config("fresh model dimensions differ from bootstrap".into()));
            }
            m
        }
        None => bootstrap.clone(),
    }
    .unfrozen();
    let losses = finetune(&mut model, data, cfg)?;
    Ok((model.frozen(), losses))
}

/// Predicted class and class probabilities for one query.
pub fn serve<T: Real>(model: &Mlp<T>, e: &[T], x: &[T]) -> Result<(usize, Vec<T>)> {
    let p = model.forward(e, x)?;
    Ok((argmax(&p), p))
}

/// Test accuracy summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Correct predictions over all test samples of all users.
    pub micro_accuracy: f64,
    pub per_user_accuracy: Vec<f64>,
    pub correct: usize,
    pub total: usize,
}

impl EvalReport {
    pub fn macro_accuracy(&self) -> f64 {
        if self.per_user_accuracy.is_empty() {
            return 0.0;
        }
        self.per_user_accuracy.iter().sum::<f64>() / self.per_user_accuracy.len() as f64
    }
}

/// Evaluate on every device's test split, asking `embedding(user, i)` for
/// the embedding attached to user `user`'s i-th test query.
pub fn evaluate_with<T, F>(model: &Mlp<T>, devices: &[DeviceDataset<T>], mut embedding: F) -> Result<EvalReport>
where
    T: Real,
    F: FnMut(usize, usize) -> Result<Vec<T>>,
{
    let mut per_user = Vec::with_capacity(devices.len());
    let (mut correct, mut total) = (0usize, 0usize);
    for (n, dev) in devices.iter().enumerate() {
        let mut hit = 0usize;
        for (i, s) in dev.test.iter().enumerate() {
            let e = embedding(n, i)?;
            let (pred, _) = serve(model, &e, &s.x)?;
            hit += usize::from(pred == s.y);
        }
        correct += hit;
        total += dev.test.len();
        per_user.push(if dev.test.is_empty() {
            0.0
        } else {
            hit as f64 / dev.test.len() as f64
        });
    }
    Ok(EvalReport {
        micro_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        per_user_accuracy: per_user,
        correct,
        total,
    })
}

/// Evaluate with a fresh draw e ~ F(θ_n) for every query of user n.
pub fn evaluate<T: Real, R: rand::Rng + ?Sized>(
    model: &Mlp<T>,
    devices: &[DeviceDataset<T>],
    dists: &[EmbeddingDist<T>],
    rng: &mut R,
) -> Result<EvalReport> {
    if dists.len() != devices.len() {
        return Err(shape_err("per-user distributions", devices.len(), dists.len()));
    }
    evaluate_with(model, devices, |n, _| Ok(dists[n].sample(rng)))
}

/// Model dimensions check shared by the harness.
pub fn check_dims<T: Real>(model: &Mlp<T>, expected: ModelDims) -> Result<()> {
    if model.dims() != expected {
        return Err(Error::Config(format!(
            "model dimensions {:?} differ from expected {:?}",
            model.dims(),
            expected
        )));
    }
    Ok(())
}
