//! Two-dimensional PCA projection of sampled user embeddings.

use std::io::Write;
use std::path::Path;

use idfree_core::dist::EmbeddingDist;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const POWER_TOL: f64 = 1e-9;
pub const POWER_MAX_ITER: usize = 10_000;

/// Projected samples. `users[i]` tags row i for plotting only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    pub users: Vec<usize>,
    /// Principal directions in embedding space.
    pub components: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
}

fn covariance(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            let ci = r[i] - mean[i];
            for j in i..d {
                cov[i][j] += ci * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= n;
            cov[j][i] = cov[i][j];
        }
    }
    (mean, cov)
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Leading eigenpair of a symmetric positive semidefinite matrix by power
/// iteration, stopping when successive unit vectors differ by less than
/// `tol` (up to sign).
pub fn power_iteration(m: &[Vec<f64>], start: &[f64], tol: f64, max_iter: usize) -> Result<(f64, Vec<f64>)> {
    let mut v = start.to_vec();
    if normalize(&mut v) == 0.0 {
        return Err(HarnessError::Config(
            "power iteration needs a nonzero start vector".into(),
        ));
    }
    for _ in 0..max_iter {
        let mut w = mat_vec(m, &v);
        let norm = normalize(&mut w);
        if norm == 0.0 {
            return Ok((0.0, v));
        }
        let s = if dot(&w, &v) < 0.0 { -1.0 } else { 1.0 };
        let delta = w.iter().zip(&v).map(|(a, b)| (a - s * b).abs()).fold(0.0, f64::max);
        v = w;
        if delta < tol {
            let lambda = dot(&v, &mat_vec(m, &v));
            return Ok((lambda, v));
        }
    }
    Err(HarnessError::Stage {
        stage: "power_iteration",
        source: idfree_core::Error::Convergence {
            what: "power iteration",
            iterations: max_iter,
        },
    })
}

/// Principal directions, their variances, and the projected rows.
pub type Pca2 = ([Vec<f64>; 2], [f64; 2], Vec<[f64; 2]>);

/// Top-two principal components of `rows` (with deflation) and the centered
/// projections onto them.
pub fn pca2(rows: &[Vec<f64>], seed: u64) -> Result<Pca2> {
    if rows.len() < 2 {
        return Err(HarnessError::Config("PCA needs at least two rows".into()));
    }
    let d = rows[0].len();
    if d < 2 {
        return Err(HarnessError::Config("PCA to 2-D needs at least two dimensions".into()));
    }
    let (mean, mut cov) = covariance(rows);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut vars = [0.0; 2];
    for k in 0..2 {
        let start: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let (lambda, v) = power_iteration(&cov, &start, POWER_TOL, POWER_MAX_ITER)?;
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        vars[k] = lambda;
        comps.push(v);
    }
    let points = rows
        .iter()
        .map(|r| {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(a, b)| a - b).collect();
            [dot(&c, &comps[0]), dot(&c, &comps[1])]
        })
        .collect();
    let c1 = comps.pop().expect("two components");
    let c0 = comps.pop().expect("two components");
    Ok(([c0, c1], vars, points))
}

/// Draw `samples_per_user` embeddings from each distribution and project
/// them onto the top two principal components.
pub fn project_embeddings(dists: &[EmbeddingDist<f64>], samples_per_user: usize, seed: u64) -> Result<Projection> {
    if samples_per_user == 0 {
        return Err(HarnessError::Config("samples_per_user must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(dists.len() * samples_per_user);
    let mut users = Vec::with_capacity(rows.capacity());
    for (u, d) in dists.iter().enumerate() {
        for _ in 0..samples_per_user {
            rows.push(d.sample(&mut rng));
            users.push(u);
        }
    }
    let (components, explained_variance, points) = pca2(&rows, rng.random())?;
    Ok(Projection {
        points,
        users,
        components,
        explained_variance,
    })
}

/// Variance of the per-user centroids divided by the pooled within-user
/// variance, both summed over the two projected axes.
pub fn between_within_ratio(points: &[[f64; 2]], users: &[usize]) -> f64 {
    let n_users = users.iter().copied().max().map_or(0, |m| m + 1);
    let mut sums = vec![[0.0; 2]; n_users];
    let mut counts = vec![0usize; n_users];
    for (p, &u) in points.iter().zip(users) {
        sums[u][0] += p[0];
        sums[u][1] += p[1];
        counts[u] += 1;
    }
    let centroids: Vec<[f64; 2]> = sums
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64])
        .collect();
    let k = centroids.len() as f64;
    let grand = [
        centroids.iter().map(|c| c[0]).sum::<f64>() / k,
        centroids.iter().map(|c| c[1]).sum::<f64>() / k,
    ];
    let between = centroids
        .iter()
        .map(|c| (c[0] - grand[0]).powi(2) + (c[1] - grand[1]).powi(2))
        .sum::<f64>()
        / (k - 1.0);
    let mut within = 0.0;
    for (p, &u) in points.iter().zip(users) {
        let c = [sums[u][0] / counts[u] as f64, sums[u][1] / counts[u] as f64];
        within += (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
    }
    let dof = points.len() as f64 - k;
    between / (within / dof)
}

/// CSV with header `x,y,user`.
pub fn write_projection_csv(proj: &Projection, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "x,y,user")?;
    for (p, u) in proj.points.iter().zip(&proj.users) {
        writeln!(out, "{},{},{}", p[0], p[1], u)?;
    }
    out.flush()?;
    Ok(())
}
