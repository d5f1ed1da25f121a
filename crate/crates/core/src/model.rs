//! The classifier h([u; x]): one tanh hidden layer and a softmax head, with
//! hand-written gradients for the embedding slot and for every weight.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;

/// Smallest probability fed to the log in [`loss`].
pub const PROB_FLOOR: f64 = 1e-12;

/// A labelled example (x, y).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LabeledSample<T> {
    pub x: Vec<T>,
    pub y: usize,
}

/// Layer widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_u: usize,
    pub d_x: usize,
    pub d_h: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn input(&self) -> usize {
        self.d_u + self.d_x
    }
}

/// Single-hidden-layer network over the flat input [u; x].
///
/// `w1` is row-major `(d_u + d_x) × d_h`, `w2` is row-major `d_h × classes`.
/// When `trainable` is false every mutating method refuses to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelCheckpoint<T>", into = "ModelCheckpoint<T>", bound = "T: Real")]
pub struct Mlp<T> {
    dims: ModelDims,
    w1: Vec<T>,
    b1: Vec<T>,
    w2: Vec<T>,
    b2: Vec<T>,
    trainable: bool,
}

/// On-disk layout of a model.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
struct ModelCheckpoint<T> {
    d_u: usize,
    d_x: usize,
    d_h: usize,
    classes: usize,
    trainable: bool,
    w1: Vec<T>,
    b1: Vec<T>,
    w2: Vec<T>,
    b2: Vec<T>,
}

impl<T: Real> TryFrom<ModelCheckpoint<T>> for Mlp<T> {
    type Error = Error;

    fn try_from(c: ModelCheckpoint<T>) -> Result<Self> {
        let dims = ModelDims {
            d_u: c.d_u,
            d_x: c.d_x,
            d_h: c.d_h,
            classes: c.classes,
        };
        let m = Mlp {
            dims,
            w1: c.w1,
            b1: c.b1,
            w2: c.w2,
            b2: c.b2,
            trainable: c.trainable,
        };
        m.check_layout()?;
        Ok(m)
    }
}

impl<T: Real> From<Mlp<T>> for ModelCheckpoint<T> {
    fn from(m: Mlp<T>) -> Self {
        ModelCheckpoint {
            d_u: m.dims.d_u,
            d_x: m.dims.d_x,
            d_h: m.dims.d_h,
            classes: m.dims.classes,
            trainable: m.trainable,
            w1: m.w1,
            b1: m.b1,
            w2: m.w2,
            b2: m.b2,
        }
    }
}

/// Gradient of the loss with respect to every weight, laid out like [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

impl<T: Real> ModelGrad<T> {
    pub fn zeros(dims: ModelDims) -> Self {
        ModelGrad {
            w1: vec![T::zero(); dims.input() * dims.d_h],
            b1: vec![T::zero(); dims.d_h],
            w2: vec![T::zero(); dims.d_h * dims.classes],
            b2: vec![T::zero(); dims.classes],
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    pub fn norm(&self) -> T {
        self.values().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn fill_zero(&mut self) {
        for v in self
            .w1
            .iter_mut()
            .chain(&mut self.b1)
            .chain(&mut self.w2)
            .chain(&mut self.b2)
        {
            *v = T::zero();
        }
    }
}

/// Hidden activations and output probabilities for one input.
#[derive(Clone, Debug)]
struct Activations<T> {
    input: Vec<T>,
    hidden: Vec<T>,
    probs: Vec<T>,
}

/// Cross-entropy −ln p_y with the probability floored at [`PROB_FLOOR`].
pub fn loss<T: Real>(probs: &[T], y: usize) -> T {
    -probs[y].max(T::lit(PROB_FLOOR)).ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_in_place<T: Real>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

impl<T: Real> Mlp<T> {
    /// All-zero weights.
    pub fn zeros(dims: ModelDims) -> Self {
        Mlp {
            dims,
            w1: vec![T::zero(); dims.input() * dims.d_h],
            b1: vec![T::zero(); dims.d_h],
            w2: vec![T::zero(); dims.d_h * dims.classes],
            b2: vec![T::zero(); dims.classes],
            trainable: true,
        }
    }

    /// Glorot-uniform weights, zero biases. Rows of `w1` that read the
    /// embedding slot are additionally multiplied by `embed_scale`.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, embed_scale: T, rng: &mut R) -> Self {
        let mut m = Self::zeros(dims);
        let l1 = (6.0 / (dims.input() + dims.d_h) as f64).sqrt();
        for (idx, w) in m.w1.iter_mut().enumerate() {
            let v = T::lit(rng.random_range(-l1..l1));
            *w = if idx / dims.d_h < dims.d_u { v * embed_scale } else { v };
        }
        let l2 = (6.0 / (dims.d_h + dims.classes) as f64).sqrt();
        for w in m.w2.iter_mut() {
            *w = T::lit(rng.random_range(-l2..l2));
        }
        m
    }

    /// Build from explicit weight arrays.
    pub fn from_parts(dims: ModelDims, w1: Vec<T>, b1: Vec<T>, w2: Vec<T>, b2: Vec<T>) -> Result<Self> {
        let m = Mlp {
            dims,
            w1,
            b1,
            w2,
            b2,
            trainable: true,
        };
        m.check_layout()?;
        Ok(m)
    }

    fn check_layout(&self) -> Result<()> {
        let d = self.dims;
        if d.input() == 0 || d.d_h == 0 || d.classes < 2 {
            return Err(Error::Config(format!("degenerate model dimensions {d:?}")));
        }
        let checks = [
            ("w1", d.input() * d.d_h, self.w1.len()),
            ("b1", d.d_h, self.b1.len()),
            ("w2", d.d_h * d.classes, self.w2.len()),
            ("b2", d.classes, self.b2.len()),
        ];
        for (what, want, got) in checks {
            if want != got {
                return Err(shape_err(what, want, got));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Mark the weights read-only.
    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    /// Mark the weights writable.
    pub fn unfrozen(mut self) -> Self {
        self.trainable = true;
        self
    }

    pub fn w1(&self) -> &[T] {
        &self.w1
    }
    pub fn b1(&self) -> &[T] {
        &self.b1
    }
    pub fn w2(&self) -> &[T] {
        &self.w2
    }
    pub fn b2(&self) -> &[T] {
        &self.b2
    }

    /// Stable 64-bit fingerprint of the weights (FNV-1a over the f64 bits).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2) {
            for byte in v.as_f64().to_bits().to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    fn check_inputs(&self, u: &[T], x: &[T]) -> Result<()> {
        if u.len() != self.dims.d_u {
            return Err(shape_err("embedding", self.dims.d_u, u.len()));
        }
        if x.len() != self.dims.d_x {
            return Err(shape_err("features", self.dims.d_x, x.len()));
        }
        Ok(())
    }

    fn activations(&self, u: &[T], x: &[T]) -> Activations<T> {
        let d = self.dims;
        let mut input = Vec::with_capacity(d.input());
        input.extend_from_slice(u);
        input.extend_from_slice(x);
        let mut hidden = self.b1.clone();
        for (i, &zi) in input.iter().enumerate() {
            if zi == T::zero() {
                continue;
            }
            let row = &self.w1[i * d.d_h..(i + 1) * d.d_h];
            for (h, &w) in hidden.iter_mut().zip(row) {
                *h = *h + zi * w;
            }
        }
        for h in hidden.iter_mut() {
            *h = h.tanh();
        }
        let mut probs = self.b2.clone();
        for (j, &hj) in hidden.iter().enumerate() {
            let row = &self.w2[j * d.classes..(j + 1) * d.classes];
            for (p, &w) in probs.iter_mut().zip(row) {
                *p = *p + hj * w;
            }
        }
        softmax_in_place(&mut probs);
        Activations { input, hidden, probs }
    }

    /// Class probabilities softmax(W2ᵀ tanh(W1ᵀ [u; x] + b1) + b2).
    pub fn forward(&self, u: &[T], x: &[T]) -> Result<Vec<T>> {
        self.check_inputs(u, x)?;
        Ok(self.activations(u, x).probs)
    }

    /// Backpropagate from the logits to the hidden pre-activations.
    fn hidden_delta(&self, act: &Activations<T>, y: usize) -> (Vec<T>, Vec<T>) {
        let d = self.dims;
        let mut out_delta = act.probs.clone();
        out_delta[y] = out_delta[y] - T::one();
        let mut pre_delta = vec![T::zero(); d.d_h];
        for (j, pd) in pre_delta.iter_mut().enumerate() {
            let row = &self.w2[j * d.classes..(j + 1) * d.classes];
            let back: T = row.iter().zip(&out_delta).map(|(&w, &g)| w * g).sum();
            let h = act.hidden[j];
            *pd = back * (T::one() - h * h);
        }
        (out_delta, pre_delta)
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.dims.classes {
            return Err(Error::Shape(format!(
                "label {y} out of range for {} classes",
                self.dims.classes
            )));
        }
        Ok(())
    }

    /// Loss and ∂loss/∂u in one pass.
    pub fn loss_and_grad_embedding(&self, u: &[T], x: &[T], y: usize) -> Result<(T, Vec<T>)> {
        self.check_inputs(u, x)?;
        self.check_label(y)?;
        let act = self.activations(u, x);
        let (_, pre_delta) = self.hidden_delta(&act, y);
        let d_h = self.dims.d_h;
        let grad = (0..self.dims.d_u)
            .map(|i| {
                let row = &self.w1[i * d_h..(i + 1) * d_h];
                row.iter().zip(&pre_delta).map(|(&w, &g)| w * g).sum()
            })
            .collect();
        Ok((loss(&act.probs, y), grad))
    }

    /// ∂loss(forward(u, x), y)/∂u.
    pub fn grad_embedding(&self, u: &[T], x: &[T], y: usize) -> Result<Vec<T>> {
        self.loss_and_grad_embedding(u, x, y).map(|(_, g)| g)
    }

    /// Add ∂loss/∂weights for one example into `acc`; returns the loss.
    pub fn accumulate_grad_model(&self, u: &[T], x: &[T], y: usize, acc: &mut ModelGrad<T>) -> Result<T> {
        self.check_inputs(u, x)?;
        self.check_label(y)?;
        let d = self.dims;
        let act = self.activations(u, x);
        let (out_delta, pre_delta) = self.hidden_delta(&act, y);
        for (j, &hj) in act.hidden.iter().enumerate() {
            let row = &mut acc.w2[j * d.classes..(j + 1) * d.classes];
            for (g, &od) in row.iter_mut().zip(&out_delta) {
                *g = *g + hj * od;
            }
        }
        for (g, &od) in acc.b2.iter_mut().zip(&out_delta) {
            *g = *g + od;
        }
        for (i, &zi) in act.input.iter().enumerate() {
            if zi == T::zero() {
                continue;
            }
            let row = &mut acc.w1[i * d.d_h..(i + 1) * d.d_h];
            for (g, &pd) in row.iter_mut().zip(&pre_delta) {
                *g = *g + zi * pd;
            }
        }
        for (g, &pd) in acc.b1.iter_mut().zip(&pre_delta) {
            *g = *g + pd;
        }
        Ok(loss(&act.probs, y))
    }

    /// ∂loss(forward(u, x), y)/∂weights.
    pub fn grad_model(&self, u: &[T], x: &[T], y: usize) -> Result<ModelGrad<T>> {
        let mut g = ModelGrad::zeros(self.dims);
        self.accumulate_grad_model(u, x, y, &mut g)?;
        Ok(g)
    }

    /// weights ← weights − lr · grad.
    pub fn sgd_step(&mut self, grad: &ModelGrad<T>, lr: T) -> Result<()> {
        if !self.trainable {
            return Err(Error::Config("attempted to update a frozen model".into()));
        }
        let pairs = [
            (&mut self.w1, &grad.w1),
            (&mut self.b1, &grad.b1),
            (&mut self.w2, &grad.w2),
            (&mut self.b2, &grad.b2),
        ];
        for (w, g) in pairs {
            if w.len() != g.len() {
                return Err(shape_err("gradient", w.len(), g.len()));
            }
            for (wi, &gi) in w.iter_mut().zip(g) {
                *wi = *wi - lr * gi;
            }
        }
        Ok(())
    }

    /// Multiply every weight matrix (not the biases) by `factor`.
    pub fn shrink_weights(&mut self, factor: T) -> Result<()> {
        if !self.trainable {
            return Err(Error::Config("attempted to update a frozen model".into()));
        }
        for w in self.w1.iter_mut().chain(self.w2.iter_mut()) {
            *w = *w * factor;
        }
        Ok(())
    }

    /// Zero every weight that reads the embedding slot.
    pub fn zero_embedding_rows(&mut self) -> Result<()> {
        if !self.trainable {
            return Err(Error::Config("attempted to update a frozen model".into()));
        }
        let n = self.dims.d_u * self.dims.d_h;
        self.w1[..n].iter_mut().for_each(|w| *w = T::zero());
        Ok(())
    }

    /// Mutable access for tests and perturbation oracles.
    #[doc(hidden)]
    pub fn weights_mut(&mut self) -> [&mut Vec<T>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}
