//! Attacker-side analysis: posterior-argmax attribution, Monte Carlo
//! misattribution, the closed-form bounds for Gaussian users, mixture
//! non-identifiability for Beta users, and the user-entropy breakdown.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::serve;
use crate::dist::{EmbeddingDist, Mixture};
use crate::error::{shape_err, Error, Result};
use crate::model::Mlp;
use crate::scalar::Real;
use crate::special::std_normal_cdf;
use crate::synth::DeviceDataset;

/// Tolerance on the prior summing to one.
pub const PRIOR_TOL: f64 = 1e-9;

fn check_prior<T: Real>(n: usize, prior: &[T]) -> Result<()> {
    if prior.len() != n {
        return Err(shape_err("prior", n, prior.len()));
    }
    let total: f64 = prior.iter().map(|p| p.as_f64()).sum();
    if (total - 1.0).abs() > PRIOR_TOL || prior.iter().any(|p| !(p.as_f64() >= 0.0)) {
        return Err(Error::Config(format!(
            "prior must be a probability vector (sum {total})"
        )));
    }
    Ok(())
}

pub fn uniform_prior<T: Real>(n: usize) -> Vec<T> {
    vec![T::one() / T::from_count(n); n]
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Equal-σ Gaussians under a uniform prior: the posterior argmax is the
/// nearest mean.
fn nearest_mean_case<T: Real>(dists: &[EmbeddingDist<T>], prior: &[T]) -> bool {
    let sigma0 = match dists.first() {
        Some(EmbeddingDist::DiagGaussian { sigma, .. }) => *sigma,
        _ => return false,
    };
    dists
        .iter()
        .all(|d| matches!(d, EmbeddingDist::DiagGaussian { sigma, .. } if *sigma == sigma0))
        && prior.iter().all(|&p| p == prior[0])
}

fn argmax_by<T: Real>(n: usize, mut score: impl FnMut(usize) -> Result<T>) -> Result<(usize, T)> {
    let mut best = 0;
    let mut best_score = T::neg_infinity();
    for k in 0..n {
        let mut s = score(k)?;
        if s.is_nan() {
            s = T::neg_infinity();
        }
        if k == 0 || s > best_score {
            best = k;
            best_score = s;
        }
    }
    Ok((best, best_score))
}

fn posterior_argmax_unchecked<T: Real>(
    dists: &[EmbeddingDist<T>],
    prior: &[T],
    u: &[T],
    nearest: bool,
) -> Result<usize> {
    if nearest {
        let (k, _) = argmax_by(dists.len(), |k| match &dists[k] {
            EmbeddingDist::DiagGaussian { mean, .. } => Ok(-sq_dist(mean, u)),
            EmbeddingDist::BetaPerDim { .. } => unreachable!(),
        })?;
        return Ok(k);
    }
    let (k, best) = argmax_by(dists.len(), |k| {
        let lp = match dists[k].log_pdf(u) {
            Ok(v) => v,
            Err(Error::Domain(_)) => T::neg_infinity(),
            Err(e) => return Err(e),
        };
        Ok(prior[k].ln() + lp)
    })?;
    if best == T::neg_infinity() && dists.iter().all(|d| !d.is_gaussian()) {
        return Err(Error::Domain("embedding lies outside every Beta support".into()));
    }
    Ok(k)
}

/// argmax_k [ln prior_k + ln p_k(u)], ties to the lowest index.
pub fn posterior_argmax<T: Real>(dists: &[EmbeddingDist<T>], prior: &[T], u: &[T]) -> Result<usize> {
    if dists.is_empty() {
        return Err(Error::Config("no candidate distributions".into()));
    }
    check_prior(dists.len(), prior)?;
    for d in dists {
        if d.dim() != u.len() {
            return Err(shape_err("embedding", d.dim(), u.len()));
        }
    }
    posterior_argmax_unchecked(dists, prior, u, nearest_mean_case(dists, prior))
}

/// Parameters of the Gaussian construction the closed-form bound applies to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub eta: f64,
    pub t_max: usize,
    pub clip_norm: f64,
    pub sigma: f64,
}

/// Monte Carlo attribution outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub empirical_misattribution: f64,
    /// Absent unless the Gaussian construction parameters were supplied.
    pub theoretical_bound: Option<f64>,
    pub samples_per_user: usize,
    pub per_user_rates: Vec<f64>,
    pub misattributed: usize,
    pub total: usize,
}

fn stream_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draw `m` embeddings from every user's distribution and count how often
/// the posterior-argmax attacker names somebody else. Users run in
/// parallel on independent streams derived from one draw of `rng`.
pub fn misattribution_mc<T: Real, R: Rng + ?Sized>(
    dists: &[EmbeddingDist<T>],
    prior: &[T],
    m: usize,
    rng: &mut R,
    bound: Option<BoundParams>,
) -> Result<AttackReport> {
    if m == 0 {
        return Err(Error::Config("misattribution needs at least one draw per user".into()));
    }
    if dists.is_empty() {
        return Err(Error::Config("no candidate distributions".into()));
    }
    check_prior(dists.len(), prior)?;
    let d = dists[0].dim();
    if dists.iter().any(|x| x.dim() != d) {
        return Err(Error::Shape("distributions of different dimension".into()));
    }
    let nearest = nearest_mean_case(dists, prior);
    let base = rng.next_u64();
    let counts = (0..dists.len())
        .into_par_iter()
        .map(|n| {
            let mut r = ChaCha8Rng::seed_from_u64(stream_seed(base, n as u64));
            let mut wrong = 0usize;
            for _ in 0..m {
                let u = dists[n].sample(&mut r);
                if posterior_argmax_unchecked(dists, prior, &u, nearest)? != n {
                    wrong += 1;
                }
            }
            Ok(wrong)
        })
        .collect::<Result<Vec<usize>>>()?;
    let total = m * dists.len();
    let misattributed: usize = counts.iter().sum();
    let theoretical_bound = match bound {
        Some(b) => Some(theorem2_bound(b.eta, b.t_max, b.clip_norm, b.sigma, dists.len())?),
        None => None,
    };
    Ok(AttackReport {
        empirical_misattribution: misattributed as f64 / total as f64,
        theoretical_bound,
        samples_per_user: m,
        per_user_rates: counts.iter().map(|&c| c as f64 / m as f64).collect(),
        misattributed,
        total,
    })
}

/// 1 − Φ(ηTG/σ)^{N−1}: lower bound on the misattribution probability when
/// every user starts from the same mean and takes T clipped steps.
pub fn theorem2_bound(eta: f64, t_max: usize, clip_norm: f64, sigma: f64, users: usize) -> Result<f64> {
    theorem2_bound_with(eta, t_max, clip_norm, sigma, users, std_normal_cdf::<f64>)
}

/// [`theorem2_bound`] with the normal CDF supplied by the caller.
pub fn theorem2_bound_with(
    eta: f64,
    t_max: usize,
    clip_norm: f64,
    sigma: f64,
    users: usize,
    phi: impl Fn(f64) -> f64,
) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Config("the bound needs sigma > 0".into()));
    }
    if users <= 1 {
        return Ok(0.0);
    }
    let radius = eta * t_max as f64 * clip_norm;
    Ok(1.0 - phi(radius / sigma).powi(users as i32 - 1))
}

/// Φ(distance / 2σ): probability that a draw from N(μ_n, σ²I) is at least
/// as close to μ_n as to a mean `distance` away.
pub fn lemma3_prob(distance: f64, sigma: f64) -> f64 {
    lemma3_prob_with(distance, sigma, std_normal_cdf::<f64>)
}

pub fn lemma3_prob_with(distance: f64, sigma: f64, phi: impl Fn(f64) -> f64) -> f64 {
    if distance == f64::INFINITY {
        return 1.0;
    }
    phi(distance / (2.0 * sigma))
}

/// Monte Carlo counterpart of [`lemma3_prob`] in `d` dimensions: μ_n = 0,
/// μ_k at `distance` along a random direction, and the fraction of `draws`
/// samples of N(0, σ²I) that are no farther from μ_n than from μ_k.
pub fn lemma3_monte_carlo<R: Rng + ?Sized>(distance: f64, sigma: f64, d: usize, draws: usize, rng: &mut R) -> f64 {
    let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v *= distance / norm);
    let base = rng.next_u64();
    const CHUNK: usize = 1 << 14;
    let chunks = draws.div_ceil(CHUNK);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = ChaCha8Rng::seed_from_u64(stream_seed(base, c as u64));
            let len = CHUNK.min(draws - c * CHUNK);
            let mut u = vec![0.0; d];
            let mut hit = 0usize;
            for _ in 0..len {
                u.iter_mut()
                    .for_each(|v| *v = sigma * r.sample::<f64, _>(StandardNormal));
                let own: f64 = u.iter().map(|v| v * v).sum();
                let other = sq_dist(&u, &dir);
                hit += usize::from(own <= other);
            }
            hit
        })
        .sum();
    hits as f64 / draws as f64
}

/// Largest pairwise mean gap against 2ηTG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub max_gap: f64,
    pub bound: f64,
    pub violations: usize,
    pub pass: bool,
}

/// Absolute slack on the pairwise gap comparison.
pub const GAP_TOL: f64 = 1e-9;

pub fn pairwise_gap_check<T: Real>(
    dists: &[EmbeddingDist<T>],
    eta: f64,
    t_max: usize,
    clip_norm: f64,
) -> Result<GapReport> {
    let means = dists
        .iter()
        .map(|d| match d {
            EmbeddingDist::DiagGaussian { mean, .. } => Ok(mean.iter().map(|v| v.as_f64()).collect::<Vec<f64>>()),
            EmbeddingDist::BetaPerDim { .. } => Err(Error::Config("pairwise gap check needs Gaussian users".into())),
        })
        .collect::<Result<Vec<_>>>()?;
    let bound = 2.0 * eta * t_max as f64 * clip_norm;
    let mut max_gap = 0.0f64;
    let mut violations = 0;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let g = sq_dist(&means[i], &means[j]).sqrt();
            max_gap = max_gap.max(g);
            violations += usize::from(g > bound + GAP_TOL);
        }
    }
    Ok(GapReport {
        max_gap,
        bound,
        violations,
        pass: violations == 0,
    })
}

/// Split component `n` of a Beta mixture along dimension `i`:
/// w·f(α, β) = w·c₁·f(α + e_i, β) + w·c₂·f(α, β + e_i) with
/// c₁ = α_i / (α_i + β_i), c₂ = β_i / (α_i + β_i). The two new components
/// take positions n and n + 1.
pub fn beta_decompose<T: Real>(mix: &Mixture<T>, n: usize, i: usize) -> Result<Mixture<T>> {
    let comps = mix.components();
    let (w, comp) = comps
        .get(n)
        .ok_or_else(|| Error::Config(format!("component {n} out of range for {} components", comps.len())))?;
    let (alpha, beta) = match comp {
        EmbeddingDist::BetaPerDim { alpha, beta } => (alpha, beta),
        EmbeddingDist::DiagGaussian { .. } => {
            return Err(Error::Config("only Beta components can be decomposed".into()))
        }
    };
    if i >= alpha.len() {
        return Err(Error::Config(format!(
            "dimension {i} out of range for d = {}",
            alpha.len()
        )));
    }
    let (a, b) = (alpha[i], beta[i]);
    let c1 = a / (a + b);
    let c2 = b / (a + b);
    let mut a1 = alpha.clone();
    a1[i] = a1[i] + T::one();
    let mut b2 = beta.clone();
    b2[i] = b2[i] + T::one();
    let mut out = Vec::with_capacity(comps.len() + 1);
    out.extend_from_slice(&comps[..n]);
    out.push((*w * c1, EmbeddingDist::beta(a1, beta.clone())?));
    out.push((*w * c2, EmbeddingDist::beta(alpha.clone(), b2)?));
    out.extend_from_slice(&comps[n + 1..]);
    Mixture::new(out)
}

/// Grid comparison of two mixture representations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonIdReport {
    pub max_pdf_diff: f64,
    pub max_cdf_diff: f64,
    /// The two representations differ in parameters or weights.
    pub representations_differ: bool,
    pub pass: bool,
}

/// Largest joint-grid dimension [`verify_nonidentifiability`] evaluates.
pub const MAX_GRID_DIM: usize = 3;

fn representation_key<T: Real>(mix: &Mixture<T>) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = mix
        .components()
        .iter()
        .map(|(w, d)| {
            let mut row = vec![w.as_f64()];
            match d {
                EmbeddingDist::DiagGaussian { mean, sigma } => {
                    row.push(0.0);
                    row.extend(mean.iter().map(|v| v.as_f64()));
                    row.push(sigma.as_f64());
                }
                EmbeddingDist::BetaPerDim { alpha, beta } => {
                    row.push(1.0);
                    row.extend(alpha.iter().chain(beta).map(|v| v.as_f64()));
                }
            }
            row
        })
        .collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or_else(|| a.len().cmp(&b.len()))
    });
    rows
}

fn grid_axis<T: Real>(mixes: [&Mixture<T>; 2], dim: usize, resolution: usize) -> Vec<T> {
    let beta_only = mixes
        .iter()
        .all(|m| m.components().iter().all(|(_, d)| !d.is_gaussian()));
    let (lo, hi) = if beta_only {
        (1e-3, 1.0 - 1e-3)
    } else {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for m in mixes {
            for (_, d) in m.components() {
                let (mu, var) = d.moments(dim);
                let s = var.as_f64().sqrt();
                lo = lo.min(mu.as_f64() - 5.0 * s);
                hi = hi.max(mu.as_f64() + 5.0 * s);
            }
        }
        (lo, hi)
    };
    if resolution == 1 {
        return vec![T::lit(0.5 * (lo + hi))];
    }
    (0..resolution)
        .map(|k| T::lit(lo + (hi - lo) * k as f64 / (resolution - 1) as f64))
        .collect()
}

/// Compare the joint densities (full grid, d ≤ 3) and the per-dimension
/// marginal CDFs of two mixtures. Beta dimensions use the grid
/// [1e-3, 1 − 1e-3]; Gaussian dimensions span ±5 standard deviations.
pub fn verify_nonidentifiability<T: Real>(
    m1: &Mixture<T>,
    m2: &Mixture<T>,
    resolution: usize,
    tol: f64,
) -> Result<NonIdReport> {
    let d = m1.dim();
    if m2.dim() != d {
        return Err(shape_err("mixture dimension", d, m2.dim()));
    }
    if d == 0 || d > MAX_GRID_DIM {
        return Err(Error::Config(format!(
            "joint grid supports 1..={MAX_GRID_DIM} dimensions, got {d}"
        )));
    }
    if resolution == 0 {
        return Err(Error::Config("grid resolution must be positive".into()));
    }
    let axes: Vec<Vec<T>> = (0..d).map(|k| grid_axis([m1, m2], k, resolution)).collect();
    let mut max_cdf = 0.0f64;
    for (k, axis) in axes.iter().enumerate() {
        for &x in axis {
            let diff = (m1.cdf_marginal(k, x)? - m2.cdf_marginal(k, x)?).as_f64().abs();
            max_cdf = max_cdf.max(diff);
        }
    }
    let mut max_pdf = 0.0f64;
    let total = resolution.pow(d as u32);
    let mut point = vec![T::zero(); d];
    for flat in 0..total {
        let mut rest = flat;
        for (k, p) in point.iter_mut().enumerate() {
            *p = axes[k][rest % resolution];
            rest /= resolution;
        }
        let diff = (m1.pdf(&point)? - m2.pdf(&point)?).as_f64().abs();
        max_pdf = max_pdf.max(diff);
    }
    let differ = representation_key(m1) != representation_key(m2);
    Ok(NonIdReport {
        max_pdf_diff: max_pdf,
        max_cdf_diff: max_cdf,
        representations_differ: differ,
        pass: differ && max_pdf <= tol && max_cdf <= tol,
    })
}

/// Per-bucket accuracy keyed by prediction entropy across users.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyBucketReport {
    pub bucket_edges: Vec<f64>,
    /// `None` for empty buckets.
    pub per_bucket_accuracy: Vec<Option<f64>>,
    pub per_bucket_count: Vec<usize>,
    /// Accuracy of the baseline model on the same items, when one was given.
    pub per_bucket_baseline_accuracy: Option<Vec<Option<f64>>>,
    #[serde(rename = "K")]
    pub k: usize,
}

impl EntropyBucketReport {
    /// Personalized minus baseline accuracy per bucket.
    pub fn lifts(&self) -> Option<Vec<Option<f64>>> {
        let base = self.per_bucket_baseline_accuracy.as_ref()?;
        Some(
            self.per_bucket_accuracy
                .iter()
                .zip(base)
                .map(|(a, b)| Some((*a)? - (*b)?))
                .collect(),
        )
    }
}

/// Six equal intervals over [0, ln min(K, C)], the attainable entropy range
/// of K predictions over C classes.
pub fn default_entropy_edges(k: usize, classes: usize) -> Vec<f64> {
    let top = (k.min(classes).max(1) as f64).ln();
    (0..=6).map(|i| top * i as f64 / 6.0).collect()
}

/// Shannon entropy (nats) of the empirical distribution of `labels`.
pub fn label_entropy(labels: &[usize], classes: usize) -> f64 {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

fn bucket_of(edges: &[f64], h: f64) -> usize {
    let last = edges.len() - 2;
    (0..=last).find(|&b| h < edges[b + 1]).unwrap_or(last)
}

/// For each test item of each user, serve it once under an embedding from
/// each of K randomly chosen users, bucket the item by the entropy of those
/// K predictions, and record whether the model is right under the owner's
/// own embedding (and, optionally, whether `baseline` is right with a zero
/// embedding).
pub fn user_entropy_analysis<T: Real, R: Rng + ?Sized>(
    model: &Mlp<T>,
    dists: &[EmbeddingDist<T>],
    devices: &[DeviceDataset<T>],
    k: usize,
    edges: &[f64],
    rng: &mut R,
    baseline: Option<&Mlp<T>>,
) -> Result<EntropyBucketReport> {
    if dists.len() != devices.len() {
        return Err(shape_err("per-user distributions", devices.len(), dists.len()));
    }
    if k < 2 || k > dists.len() {
        return Err(Error::Config(format!("K = {k} needs 2 <= K <= {}", dists.len())));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("bucket edges must be strictly increasing".into()));
    }
    let buckets = edges.len() - 1;
    let classes = model.dims().classes;
    let zeros = vec![T::zero(); model.dims().d_u];
    let mut count = vec![0usize; buckets];
    let mut hit = vec![0usize; buckets];
    let mut base_hit = vec![0usize; buckets];
    let mut preds = Vec::with_capacity(k);
    for (n, dev) in devices.iter().enumerate() {
        for s in &dev.test {
            preds.clear();
            for j in sample_indices(rng, dists.len(), k) {
                let e = dists[j].sample(rng);
                preds.push(serve(model, &e, &s.x)?.0);
            }
            let b = bucket_of(edges, label_entropy(&preds, classes));
            count[b] += 1;
            let own = dists[n].sample(rng);
            hit[b] += usize::from(serve(model, &own, &s.x)?.0 == s.y);
            if let Some(bm) = baseline {
                base_hit[b] += usize::from(serve(bm, &zeros, &s.x)?.0 == s.y);
            }
        }
    }
    let ratio = |h: &[usize]| -> Vec<Option<f64>> {
        h.iter()
            .zip(&count)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect()
    };
    let per_bucket_accuracy = ratio(&hit);
    let per_bucket_baseline_accuracy = baseline.map(|_| ratio(&base_hit));
    Ok(EntropyBucketReport {
        bucket_edges: edges.to_vec(),
        per_bucket_accuracy,
        per_bucket_count: count,
        per_bucket_baseline_accuracy,
        k,
    })
}
