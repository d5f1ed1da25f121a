//! Synthetic personalized classification task.
//!
//! Each user n carries a hidden bias direction b_n on the unit sphere in R^8.
//! Labels follow argmax_c (w_c·x + κ v_c·b_n), optionally flipped to another
//! class, so a classifier that knows something about b_n can beat one that
//! only sees x.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, LabeledSample};
use crate::scalar::Real;

/// Width of the hidden per-user bias vector.
pub const BIAS_DIM: usize = 8;

/// Generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    /// Number of users N.
    pub users: usize,
    /// Samples generated per user, before the train/test split.
    pub per_user: usize,
    pub d_x: usize,
    pub classes: usize,
    /// Strength of the per-user term relative to the feature term.
    pub kappa: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            users: 50,
            per_user: 200,
            d_x: 16,
            classes: 4,
            kappa: 3.0,
            label_noise: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.users < 2 {
            return Err(Error::Config("synthetic task needs at least 2 users".into()));
        }
        if self.per_user < 4 {
            return Err(Error::Config("synthetic task needs at least 4 samples per user".into()));
        }
        if self.d_x == 0 || self.classes < 2 {
            return Err(Error::Config(
                "synthetic task needs d_x >= 1 and at least 2 classes".into(),
            ));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::Config("kappa must be nonnegative".into()));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must lie in [0, 0.5)".into()));
        }
        Ok(())
    }

    /// Number of training samples per user (the first 80%, at least one
    /// sample left for testing).
    pub fn train_len(&self) -> usize {
        (self.per_user * 4 / 5).clamp(1, self.per_user - 1)
    }
}

/// One device's local data. `local_user_id` and `true_bias` never leave the
/// device; nothing in the wire format carries them.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceDataset<T> {
    pub local_user_id: usize,
    pub train: Vec<LabeledSample<T>>,
    pub test: Vec<LabeledSample<T>>,
    pub true_bias: Vec<T>,
}

impl<T: Real> DeviceDataset<T> {
    /// Local dump, one `{"x":[...],"y":k}` object per line.
    pub fn dump_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for s in self.train.iter().chain(&self.test) {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Class prototypes shared by all users.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes<T> {
    /// `classes × d_x`, entries N(0, 1/d_x) so w_c·x has unit scale.
    pub feature: Vec<Vec<T>>,
    /// `classes × BIAS_DIM`, entries N(0, 1).
    pub user: Vec<Vec<T>>,
}

/// Generated datasets plus the generator's ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask<T> {
    pub spec: SyntheticTaskSpec,
    pub devices: Vec<DeviceDataset<T>>,
    pub prototypes: Prototypes<T>,
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn normal_vec<T: Real, R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::lit(scale * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

impl<T: Real> Prototypes<T> {
    /// Noise-free class scores given features and a user bias.
    pub fn scores(&self, x: &[T], bias: &[T], kappa: T) -> Vec<T> {
        self.feature
            .iter()
            .zip(&self.user)
            .map(|(w, v)| dot(w, x) + kappa * dot(v, bias))
            .collect()
    }
}

/// Generate every user's dataset deterministically from `spec.seed`.
pub fn generate_synthetic<T: Real>(spec: &SyntheticTaskSpec) -> Result<SyntheticTask<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let feature_scale = (1.0 / spec.d_x as f64).sqrt();
    let prototypes = Prototypes {
        feature: (0..spec.classes)
            .map(|_| normal_vec(&mut rng, spec.d_x, feature_scale))
            .collect(),
        user: (0..spec.classes).map(|_| normal_vec(&mut rng, BIAS_DIM, 1.0)).collect(),
    };
    let kappa = T::lit(spec.kappa);
    let n_train = spec.train_len();
    let mut devices = Vec::with_capacity(spec.users);
    for user in 0..spec.users {
        let raw: Vec<f64> = normal_vec(&mut rng, BIAS_DIM, 1.0);
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bias: Vec<T> = raw.iter().map(|v| T::lit(v / norm)).collect();
        let mut samples = Vec::with_capacity(spec.per_user);
        for _ in 0..spec.per_user {
            let x: Vec<T> = normal_vec(&mut rng, spec.d_x, 1.0);
            let mut y = argmax(&prototypes.scores(&x, &bias, kappa));
            let flip: f64 = rng.random();
            if flip < spec.label_noise {
                let other = rng.random_range(0..spec.classes - 1);
                y = if other >= y { other + 1 } else { other };
            }
            samples.push(LabeledSample { x, y });
        }
        let test = samples.split_off(n_train);
        devices.push(DeviceDataset {
            local_user_id: user,
            train: samples,
            test,
            true_bias: bias,
        });
    }
    Ok(SyntheticTask {
        spec: spec.clone(),
        devices,
        prototypes,
    })
}

impl<T: Real> SyntheticTask<T> {
    /// Test accuracy of the classifier that knows each user's true bias.
    pub fn oracle_accuracy_with_bias(&self) -> f64 {
        let kappa = T::lit(self.spec.kappa);
        let (mut hit, mut total) = (0usize, 0usize);
        for dev in &self.devices {
            for s in &dev.test {
                hit += usize::from(argmax(&self.prototypes.scores(&s.x, &dev.true_bias, kappa)) == s.y);
                total += 1;
            }
        }
        hit as f64 / total.max(1) as f64
    }

    /// Bayes-optimal prediction without the user: the class most likely to
    /// win when the bias is integrated over the sphere (Monte Carlo with
    /// `draws` bias samples from `rng`).
    pub fn oracle_predict_without_user<R: Rng + ?Sized>(&self, x: &[T], draws: usize, rng: &mut R) -> usize {
        let kappa = T::lit(self.spec.kappa);
        let mut wins = vec![0usize; self.spec.classes];
        for _ in 0..draws {
            let raw: Vec<f64> = normal_vec(rng, BIAS_DIM, 1.0);
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let b: Vec<T> = raw.iter().map(|v| T::lit(v / norm)).collect();
            wins[argmax(&self.prototypes.scores(x, &b, kappa))] += 1;
        }
        let mut best = 0;
        for c in 1..wins.len() {
            if wins[c] > wins[best] {
                best = c;
            }
        }
        best
    }

    /// Test accuracy of [`Self::oracle_predict_without_user`].
    pub fn oracle_accuracy_without_user(&self, draws: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut hit, mut total) = (0usize, 0usize);
        for dev in &self.devices {
            for s in &dev.test {
                hit += usize::from(self.oracle_predict_without_user(&s.x, draws, &mut rng) == s.y);
                total += 1;
            }
        }
        hit as f64 / total.max(1) as f64
    }
}
