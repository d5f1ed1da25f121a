//! Per-user embedding distributions.
//!
//! Two families are supported: a diagonal Gaussian with one shared standard
//! deviation, and independent per-dimension Beta marginals. Both expose
//! ancestral sampling, densities, marginal CDFs, and a reparameterized
//! sampler `u = g_θ(ξ)` with pathwise parameter gradients.

use rand::Rng;
use rand_distr::{Distribution, Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;
use crate::special::{
    beta_pdf_with_lbeta, digamma, inverse_reg_inc_beta, ln_beta, reg_inc_beta, reg_inc_beta_with_lbeta, std_normal_cdf,
};

/// Beta samples are kept this far from the support edges.
pub const BETA_EDGE: f64 = 1e-9;
/// Densities below this make the implicit gradient unusable.
pub const MIN_IMPLICIT_PDF: f64 = 1e-12;

/// A user's local sampling law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DistWire<T>", into = "DistWire<T>", bound = "T: Real")]
pub enum EmbeddingDist<T> {
    /// N(mean, sigma² I). `sigma == 0` is a point mass at `mean`.
    DiagGaussian { mean: Vec<T>, sigma: T },
    /// Independent Beta(alpha_i, beta_i) marginals on (0, 1).
    BetaPerDim { alpha: Vec<T>, beta: Vec<T> },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields, bound = "T: Real")]
enum DistWire<T> {
    Gaussian {
        d: usize,
        mean: Vec<T>,
        sigma: T,
    },
    Beta {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        d: Option<usize>,
        alpha: Vec<T>,
        beta: Vec<T>,
    },
}

impl<T: Real> TryFrom<DistWire<T>> for EmbeddingDist<T> {
    type Error = Error;

    fn try_from(w: DistWire<T>) -> Result<Self> {
        match w {
            DistWire::Gaussian { d, mean, sigma } => {
                if d != mean.len() {
                    return Err(shape_err("gaussian mean", d, mean.len()));
                }
                Self::gaussian(mean, sigma)
            }
            DistWire::Beta { d, alpha, beta } => {
                if let Some(d) = d {
                    if d != alpha.len() {
                        return Err(shape_err("beta alpha", d, alpha.len()));
                    }
                }
                Self::beta(alpha, beta)
            }
        }
    }
}

impl<T: Real> From<EmbeddingDist<T>> for DistWire<T> {
    fn from(d: EmbeddingDist<T>) -> Self {
        match d {
            EmbeddingDist::DiagGaussian { mean, sigma } => DistWire::Gaussian {
                d: mean.len(),
                mean,
                sigma,
            },
            EmbeddingDist::BetaPerDim { alpha, beta } => DistWire::Beta { d: None, alpha, beta },
        }
    }
}

/// Base noise ξ for the reparameterized sampler: standard normal draws in
/// Gaussian mode, uniform (0, 1) draws in Beta mode.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw<T> {
    pub values: Vec<T>,
}

/// Gradient with respect to the distribution parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad<T> {
    /// Gaussian: the mean is the only trained parameter.
    Mean(Vec<T>),
    Shape {
        alpha: Vec<T>,
        beta: Vec<T>,
    },
}

/// Pathwise gradient plus the coordinates whose contribution was dropped
/// because the sample sat where the density vanishes.
#[derive(Clone, Debug, PartialEq)]
pub struct ReparamGrad<T> {
    pub grad: ParamGrad<T>,
    pub skipped: Vec<usize>,
}

impl<T: Real> ParamGrad<T> {
    pub fn zeros_like(dist: &EmbeddingDist<T>) -> Self {
        let d = dist.dim();
        match dist {
            EmbeddingDist::DiagGaussian { .. } => ParamGrad::Mean(vec![T::zero(); d]),
            EmbeddingDist::BetaPerDim { .. } => ParamGrad::Shape {
                alpha: vec![T::zero(); d],
                beta: vec![T::zero(); d],
            },
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &T> {
        let (a, b): (&[T], &[T]) = match self {
            ParamGrad::Mean(m) => (m, &[]),
            ParamGrad::Shape { alpha, beta } => (alpha, beta),
        };
        a.iter().chain(b.iter())
    }

    fn values_mut(&mut self) -> Box<dyn Iterator<Item = &mut T> + '_> {
        match self {
            ParamGrad::Mean(m) => Box::new(m.iter_mut()),
            ParamGrad::Shape { alpha, beta } => Box::new(alpha.iter_mut().chain(beta.iter_mut())),
        }
    }

    pub fn norm(&self) -> T {
        self.values().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn scale(&mut self, k: T) {
        for v in self.values_mut() {
            *v = *v * k;
        }
    }

    /// `self += other`. Panics if the two gradients have different layouts.
    pub fn accumulate(&mut self, other: &ParamGrad<T>) {
        match (self, other) {
            (ParamGrad::Mean(a), ParamGrad::Mean(b)) => add_into(a, b),
            (ParamGrad::Shape { alpha, beta }, ParamGrad::Shape { alpha: oa, beta: ob }) => {
                add_into(alpha, oa);
                add_into(beta, ob);
            }
            _ => panic!("accumulating gradients of different distribution families"),
        }
    }
}

fn add_into<T: Real>(acc: &mut [T], v: &[T]) {
    assert_eq!(acc.len(), v.len());
    for (a, &b) in acc.iter_mut().zip(v) {
        *a = *a + b;
    }
}

impl<T: Real> EmbeddingDist<T> {
    pub fn gaussian(mean: Vec<T>, sigma: T) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::Config("embedding dimension must be at least 1".into()));
        }
        if !(sigma >= T::zero()) || !sigma.is_finite() {
            return Err(Error::Config(format!("gaussian sigma must be >= 0, got {sigma}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("gaussian mean must be finite".into()));
        }
        Ok(EmbeddingDist::DiagGaussian { mean, sigma })
    }

    pub fn beta(alpha: Vec<T>, beta: Vec<T>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Config("embedding dimension must be at least 1".into()));
        }
        if alpha.len() != beta.len() {
            return Err(shape_err("beta shape vector", alpha.len(), beta.len()));
        }
        if alpha.iter().chain(&beta).any(|v| !(*v > T::zero()) || !v.is_finite()) {
            return Err(Error::Config(
                "beta shape parameters must be positive and finite".into(),
            ));
        }
        Ok(EmbeddingDist::BetaPerDim { alpha, beta })
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingDist::DiagGaussian { mean, .. } => mean.len(),
            EmbeddingDist::BetaPerDim { alpha, .. } => alpha.len(),
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, EmbeddingDist::DiagGaussian { .. })
    }

    /// Ancestral sample. Beta coordinates are drawn from gamma variates and
    /// kept within [`BETA_EDGE`] of the support.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        match self {
            EmbeddingDist::DiagGaussian { mean, sigma } => mean
                .iter()
                .map(|&m| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + *sigma * T::lit(z)
                })
                .collect(),
            EmbeddingDist::BetaPerDim { alpha, beta } => alpha
                .iter()
                .zip(beta)
                .map(|(&a, &b)| {
                    let law = rand_distr::Beta::new(a.as_f64(), b.as_f64()).expect("validated beta shapes");
                    clamp_unit(T::lit(law.sample(rng)))
                })
                .collect(),
        }
    }

    /// Draw base noise for [`Self::reparam_sample`].
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> NoiseDraw<T> {
        let d = self.dim();
        let values = match self {
            EmbeddingDist::DiagGaussian { .. } => {
                (0..d).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect()
            }
            EmbeddingDist::BetaPerDim { .. } => (0..d).map(|_| T::lit(rng.sample::<f64, _>(Open01))).collect(),
        };
        NoiseDraw { values }
    }

    /// Sum of per-dimension log densities.
    pub fn log_pdf(&self, u: &[T]) -> Result<T> {
        if u.len() != self.dim() {
            return Err(shape_err("embedding", self.dim(), u.len()));
        }
        match self {
            EmbeddingDist::DiagGaussian { mean, sigma } => {
                if *sigma == T::zero() {
                    let at_mean = mean.iter().zip(u).all(|(m, x)| m == x);
                    return Ok(if at_mean { T::infinity() } else { T::neg_infinity() });
                }
                let sq: T = mean.iter().zip(u).map(|(&m, &x)| (x - m) * (x - m)).sum();
                let d = T::from_count(mean.len());
                Ok(-sq / (T::lit(2.0) * *sigma * *sigma) - d * (sigma.ln() + T::lit(0.5) * T::TAU().ln()))
            }
            EmbeddingDist::BetaPerDim { alpha, beta } => {
                let mut acc = T::zero();
                for ((&a, &b), &x) in alpha.iter().zip(beta).zip(u) {
                    if !(x > T::zero() && x < T::one()) {
                        return Err(Error::Domain(format!("beta coordinate {x} outside (0, 1)")));
                    }
                    acc = acc + (a - T::one()) * x.ln() + (b - T::one()) * (-x).ln_1p() - ln_beta(a, b);
                }
                Ok(acc)
            }
        }
    }

    /// Marginal CDF of coordinate `dim` at `x`.
    pub fn cdf_marginal(&self, dim: usize, x: T) -> Result<T> {
        if dim >= self.dim() {
            return Err(Error::Shape(format!(
                "dimension index {dim} out of range for d={}",
                self.dim()
            )));
        }
        match self {
            EmbeddingDist::DiagGaussian { mean, sigma } => {
                let m = mean[dim];
                if *sigma == T::zero() {
                    return Ok(if x >= m { T::one() } else { T::zero() });
                }
                Ok(std_normal_cdf((x - m) / *sigma))
            }
            EmbeddingDist::BetaPerDim { alpha, beta } => reg_inc_beta(x, alpha[dim], beta[dim]),
        }
    }

    /// `u = g_θ(ξ)`: affine map for Gaussians, inverse CDF for Beta marginals.
    pub fn reparam_sample(&self, noise: &NoiseDraw<T>) -> Result<Vec<T>> {
        if noise.values.len() != self.dim() {
            return Err(shape_err("noise draw", self.dim(), noise.values.len()));
        }
        match self {
            EmbeddingDist::DiagGaussian { mean, sigma } => {
                Ok(mean.iter().zip(&noise.values).map(|(&m, &z)| m + *sigma * z).collect())
            }
            EmbeddingDist::BetaPerDim { alpha, beta } => alpha
                .iter()
                .zip(beta)
                .zip(&noise.values)
                .map(|((&a, &b), &p)| inverse_reg_inc_beta(p, a, b).map(clamp_unit))
                .collect(),
        }
    }

    /// Pathwise gradient of a loss through `u = g_θ(ξ)`, given `upstream = ∂l/∂u`.
    ///
    /// Beta coordinates use the implicit rule ∂u/∂θ = −(∂I_u/∂θ) / pdf(u).
    /// Coordinates where the density is below [`MIN_IMPLICIT_PDF`] contribute
    /// zero and are listed in `skipped`.
    pub fn reparam_grad_params(&self, noise: &NoiseDraw<T>, upstream: &[T]) -> Result<ReparamGrad<T>> {
        let d = self.dim();
        if noise.values.len() != d {
            return Err(shape_err("noise draw", d, noise.values.len()));
        }
        match self {
            EmbeddingDist::DiagGaussian { .. } => self.reparam_grad_at(&noise.values, upstream),
            EmbeddingDist::BetaPerDim { alpha, beta } => {
                let u = (0..d)
                    .map(|i| inverse_reg_inc_beta(noise.values[i], alpha[i], beta[i]))
                    .collect::<Result<Vec<T>>>()?;
                self.reparam_grad_at(&u, upstream)
            }
        }
    }

    /// Same as [`Self::reparam_grad_params`] when the sample `u = g_θ(ξ)` is
    /// already known, which saves inverting the Beta CDF a second time.
    /// Gaussian gradients do not depend on `u`.
    pub fn reparam_grad_at(&self, u: &[T], upstream: &[T]) -> Result<ReparamGrad<T>> {
        let d = self.dim();
        if u.len() != d {
            return Err(shape_err("embedding", d, u.len()));
        }
        if upstream.len() != d {
            return Err(shape_err("upstream gradient", d, upstream.len()));
        }
        if upstream.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite upstream gradient".into()));
        }
        match self {
            EmbeddingDist::DiagGaussian { .. } => Ok(ReparamGrad {
                grad: ParamGrad::Mean(upstream.to_vec()),
                skipped: Vec::new(),
            }),
            EmbeddingDist::BetaPerDim { alpha, beta } => {
                let mut ga = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                let mut skipped = Vec::new();
                for i in 0..d {
                    match beta_implicit_derivs(u[i], alpha[i], beta[i]) {
                        Ok((du_da, du_db)) => {
                            ga[i] = upstream[i] * du_da;
                            gb[i] = upstream[i] * du_db;
                        }
                        Err(Error::Numerical(_)) => skipped.push(i),
                        Err(e) => return Err(e),
                    }
                }
                Ok(ReparamGrad {
                    grad: ParamGrad::Shape { alpha: ga, beta: gb },
                    skipped,
                })
            }
        }
    }

    /// Score function ∇_θ log p(u), the likelihood-ratio counterpart of the
    /// pathwise gradient.
    pub fn score(&self, u: &[T]) -> Result<ParamGrad<T>> {
        if u.len() != self.dim() {
            return Err(shape_err("embedding", self.dim(), u.len()));
        }
        match self {
            EmbeddingDist::DiagGaussian { mean, sigma } => {
                if *sigma == T::zero() {
                    return Err(Error::Numerical("score of a point mass".into()));
                }
                let s2 = *sigma * *sigma;
                Ok(ParamGrad::Mean(
                    mean.iter().zip(u).map(|(&m, &x)| (x - m) / s2).collect(),
                ))
            }
            EmbeddingDist::BetaPerDim { alpha, beta } => {
                let mut ga = Vec::with_capacity(u.len());
                let mut gb = Vec::with_capacity(u.len());
                for ((&a, &b), &x) in alpha.iter().zip(beta).zip(u) {
                    if !(x > T::zero() && x < T::one()) {
                        return Err(Error::Domain(format!("beta coordinate {x} outside (0, 1)")));
                    }
                    let common = digamma(a + b);
                    ga.push(x.ln() - digamma(a) + common);
                    gb.push((-x).ln_1p() - digamma(b) + common);
                }
                Ok(ParamGrad::Shape { alpha: ga, beta: gb })
            }
        }
    }

    /// Per-dimension mean and variance.
    pub fn moments(&self, dim: usize) -> (T, T) {
        match self {
            EmbeddingDist::DiagGaussian { mean, sigma } => (mean[dim], *sigma * *sigma),
            EmbeddingDist::BetaPerDim { alpha, beta } => {
                let (a, b) = (alpha[dim], beta[dim]);
                let s = a + b;
                (a / s, a * b / (s * s * (s + T::one())))
            }
        }
    }
}

/// (∂u/∂a, ∂u/∂b) for u = I⁻¹(ξ; a, b) at fixed ξ, by the implicit function
/// rule with central differences of I in the shape parameters
/// (step 1e-5·max(1, shape)).
pub fn beta_implicit_derivs<T: Real>(u: T, a: T, b: T) -> Result<(T, T)> {
    let lbeta = ln_beta(a, b);
    let pdf = beta_pdf_with_lbeta(u, a, b, lbeta);
    if !(pdf >= T::lit(MIN_IMPLICIT_PDF)) || !pdf.is_finite() {
        return Err(Error::Numerical(format!(
            "beta density {pdf} at u={u} too small for the implicit gradient"
        )));
    }
    let step = |s: T| T::lit(1e-5) * s.max(T::one());
    let ha = step(a);
    let hb = step(b);
    let di_da = (reg_inc_beta_with_lbeta(u, a + ha, b, ln_beta(a + ha, b))?
        - reg_inc_beta_with_lbeta(u, a - ha, b, ln_beta(a - ha, b))?)
        / (T::lit(2.0) * ha);
    let di_db = (reg_inc_beta_with_lbeta(u, a, b + hb, ln_beta(a, b + hb))?
        - reg_inc_beta_with_lbeta(u, a, b - hb, ln_beta(a, b - hb))?)
        / (T::lit(2.0) * hb);
    Ok((-di_da / pdf, -di_db / pdf))
}

fn clamp_unit<T: Real>(x: T) -> T {
    let e = T::lit(BETA_EDGE);
    x.max(e).min(T::one() - e)
}

/// A finite mixture Σ w_m F(·; θ_m) over one of the families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Mixture<T> {
    components: Vec<(T, EmbeddingDist<T>)>,
}

impl<T: Real> Mixture<T> {
    pub fn new(components: Vec<(T, EmbeddingDist<T>)>) -> Result<Self> {
        let Some((_, first)) = components.first() else {
            return Err(Error::Config("mixture needs at least one component".into()));
        };
        let d = first.dim();
        if let Some((_, bad)) = components.iter().find(|(_, c)| c.dim() != d) {
            return Err(shape_err("mixture component", d, bad.dim()));
        }
        if components.iter().any(|(w, _)| !(*w >= T::zero())) {
            return Err(Error::Config("mixture weights must be nonnegative".into()));
        }
        let total: T = components.iter().map(|(w, _)| *w).sum();
        let tol = T::lit(1e-12).max(T::epsilon() * T::from_count(4 * components.len()));
        if (total - T::one()).abs() > tol {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Mixture { components })
    }

    /// Equal-weight mixture of the given distributions.
    pub fn uniform(dists: Vec<EmbeddingDist<T>>) -> Result<Self> {
        let w = T::one() / T::from_count(dists.len().max(1));
        Self::new(dists.into_iter().map(|d| (w, d)).collect())
    }

    pub fn components(&self) -> &[(T, EmbeddingDist<T>)] {
        &self.components
    }

    pub fn into_components(self) -> Vec<(T, EmbeddingDist<T>)> {
        self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].1.dim()
    }

    pub fn pdf(&self, u: &[T]) -> Result<T> {
        let mut acc = T::zero();
        for (w, c) in &self.components {
            acc = acc + *w * c.log_pdf(u)?.exp();
        }
        Ok(acc)
    }

    pub fn cdf_marginal(&self, dim: usize, x: T) -> Result<T> {
        let mut acc = T::zero();
        for (w, c) in &self.components {
            acc = acc + *w * c.cdf_marginal(dim, x)?;
        }
        Ok(acc)
    }

    /// Mean and variance of coordinate `dim` under the mixture.
    pub fn moments(&self, dim: usize) -> (T, T) {
        let mut mean = T::zero();
        let mut second = T::zero();
        for (w, c) in &self.components {
            let (m, v) = c.moments(dim);
            mean = mean + *w * m;
            second = second + *w * (v + m * m);
        }
        (mean, second - mean * mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_sigma_sample_is_the_mean() {
        let d = EmbeddingDist::gaussian(vec![0.3_f64, -0.1], 0.0).unwrap();
        assert_eq!(d.sample(&mut rng(1)), vec![0.3, -0.1]);
    }

    #[test]
    fn uniform_beta_sample_mean() {
        let d = EmbeddingDist::beta(vec![1.0_f64], vec![1.0]).unwrap();
        let mut r = rng(2);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| d.sample(&mut r)[0]).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "{mean}");
    }

    #[test]
    fn gaussian_sample_variance() {
        let d = EmbeddingDist::gaussian(vec![0.0_f64; 8], 0.2).unwrap();
        let mut r = rng(3);
        let n = 100_000;
        let mut sq = [0.0; 8];
        let mut s = [0.0; 8];
        for _ in 0..n {
            for (i, v) in d.sample(&mut r).into_iter().enumerate() {
                s[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..8 {
            let m = s[i] / n as f64;
            let var = sq[i] / n as f64 - m * m;
            assert!((var - 0.04).abs() < 0.002, "dim {i}: {var}");
        }
    }

    #[test]
    fn log_pdf_examples() {
        let u = EmbeddingDist::beta(vec![1.0_f64], vec![1.0]).unwrap();
        assert!(u.log_pdf(&[0.3]).unwrap().abs() < 1e-14);
        let g = EmbeddingDist::gaussian(vec![0.0_f64], 1.0).unwrap();
        assert!((g.log_pdf(&[0.0]).unwrap() + 0.918_938_533_204_672_8).abs() < 1e-14);
        let b = EmbeddingDist::beta(vec![2.0_f64], vec![3.0]).unwrap();
        // direct formula: Γ(5)/(Γ(2)Γ(3)) · 0.4 · 0.6² = 12 · 0.144
        let direct = (12.0_f64 * 0.4 * 0.36).ln();
        assert!((b.log_pdf(&[0.4]).unwrap() - direct).abs() < 1e-13);
        assert!((direct - 0.547).abs() < 1e-3);
        assert!(matches!(b.log_pdf(&[1.2]), Err(Error::Domain(_))));
        assert!(matches!(b.log_pdf(&[0.1, 0.2]), Err(Error::Shape(_))));
    }

    #[test]
    fn cdf_examples() {
        let u = EmbeddingDist::beta(vec![1.0_f64], vec![1.0]).unwrap();
        assert!((u.cdf_marginal(0, 0.3).unwrap() - 0.3).abs() < 1e-15);
        let g = EmbeddingDist::gaussian(vec![0.0_f64], 1.0).unwrap();
        assert_eq!(g.cdf_marginal(0, 0.0).unwrap(), 0.5);
        let b = EmbeddingDist::beta(vec![2.0_f64], vec![2.0]).unwrap();
        assert!((b.cdf_marginal(0, 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(b.cdf_marginal(0, -1.0).unwrap(), 0.0);
        assert_eq!(b.cdf_marginal(0, 2.0).unwrap(), 1.0);
        assert!(b.cdf_marginal(1, 0.5).is_err());
    }

    #[test]
    fn reparam_examples() {
        let g = EmbeddingDist::gaussian(vec![0.1_f64], 0.2).unwrap();
        let u = g.reparam_sample(&NoiseDraw { values: vec![1.5] }).unwrap();
        assert!((u[0] - 0.4).abs() < 1e-15);
        let b = EmbeddingDist::beta(vec![1.0_f64], vec![1.0]).unwrap();
        let noise = NoiseDraw { values: vec![0.7] };
        let u = b.reparam_sample(&noise).unwrap();
        assert!((u[0] - 0.7).abs() < 1e-14);
        assert_eq!(u, b.reparam_sample(&noise).unwrap());
    }

    #[test]
    fn gaussian_pathwise_grad_is_identity() {
        let g = EmbeddingDist::gaussian(vec![0.0_f64, 1.0], 0.3).unwrap();
        let noise = NoiseDraw {
            values: vec![0.4, -2.0],
        };
        let r = g.reparam_grad_params(&noise, &[1.25, -0.5]).unwrap();
        assert_eq!(r.grad, ParamGrad::Mean(vec![1.25, -0.5]));
    }

    #[test]
    fn symmetric_beta_implicit_derivs_are_antisymmetric() {
        let (da, db) = beta_implicit_derivs(0.5_f64, 2.0, 2.0).unwrap();
        // more α mass pushes the quantile right
        assert!(da > 0.0);
        assert!((da + db).abs() < 1e-8, "{da} {db}");
        let b = EmbeddingDist::beta(vec![2.0_f64], vec![2.0]).unwrap();
        assert!((b.reparam_sample(&NoiseDraw { values: vec![0.5] }).unwrap()[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn implicit_derivative_matches_difference_of_inverses() {
        let (a, b, xi) = (2.0_f64, 3.0, 0.4);
        let h = 1e-5;
        let u = inverse_reg_inc_beta(xi, a, b).unwrap();
        let fd_a =
            (inverse_reg_inc_beta(xi, a + h, b).unwrap() - inverse_reg_inc_beta(xi, a - h, b).unwrap()) / (2.0 * h);
        let fd_b =
            (inverse_reg_inc_beta(xi, a, b + h).unwrap() - inverse_reg_inc_beta(xi, a, b - h).unwrap()) / (2.0 * h);
        let (da, db) = beta_implicit_derivs(u, a, b).unwrap();
        assert!(((da - fd_a) / fd_a).abs() < 1e-4, "{da} vs {fd_a}");
        assert!(((db - fd_b) / fd_b).abs() < 1e-4, "{db} vs {fd_b}");
    }

    #[test]
    fn implicit_gradient_rejects_vanishing_density() {
        assert!(matches!(
            beta_implicit_derivs(1e-12_f64, 30.0, 2.0),
            Err(Error::Numerical(_))
        ));
        let b = EmbeddingDist::beta(vec![30.0_f64, 2.0], vec![2.0, 2.0]).unwrap();
        let r = b
            .reparam_grad_params(
                &NoiseDraw {
                    values: vec![1e-300, 0.5],
                },
                &[1.0, 1.0],
            )
            .unwrap();
        assert_eq!(r.skipped, vec![0]);
    }

    #[test]
    fn serialization_layout() {
        let g = EmbeddingDist::gaussian(vec![0.5_f64, 1.0], 0.2).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        assert_eq!(s, r#"{"kind":"gaussian","d":2,"mean":[0.5,1.0],"sigma":0.2}"#);
        let b = EmbeddingDist::beta(vec![2.0_f64], vec![3.0]).unwrap();
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, r#"{"kind":"beta","alpha":[2.0],"beta":[3.0]}"#);
        let back: EmbeddingDist<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<EmbeddingDist<f64>>(r#"{"kind":"beta","alpha":[0.0],"beta":[3.0]}"#).is_err());
        assert!(
            serde_json::from_str::<EmbeddingDist<f64>>(r#"{"kind":"gaussian","d":3,"mean":[0.0],"sigma":1.0}"#)
                .is_err()
        );
    }

    #[test]
    fn constructor_validation() {
        assert!(EmbeddingDist::<f64>::gaussian(vec![], 1.0).is_err());
        assert!(EmbeddingDist::gaussian(vec![0.0_f64], -1.0).is_err());
        assert!(EmbeddingDist::beta(vec![1.0_f64], vec![1.0, 2.0]).is_err());
        assert!(Mixture::new(vec![(0.5_f64, EmbeddingDist::beta(vec![1.0], vec![1.0]).unwrap())]).is_err());
    }

    #[test]
    fn mixture_moments_of_a_single_component() {
        let b = EmbeddingDist::beta(vec![2.0_f64], vec![3.0]).unwrap();
        let m = Mixture::new(vec![(1.0, b)]).unwrap();
        let (mean, var) = m.moments(0);
        assert!((mean - 0.4).abs() < 1e-15);
        assert!((var - 0.04).abs() < 1e-15);
    }
}
