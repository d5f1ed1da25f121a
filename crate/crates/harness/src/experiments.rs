//! Variance sweep, entropy buckets and the embedding projection export.

use std::io::Write;
use std::path::Path;

use idfree_core::analysis::{user_entropy_analysis, EntropyBucketReport};
use idfree_core::trainer::Family;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{stream, ExperimentConfig};
use crate::error::{HarnessError, Result, StageExt};
use crate::projection::{between_within_ratio, project_embeddings, write_projection_csv, Projection};
use crate::protocol::{run_pipeline, Pipeline};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub accuracy: f64,
    pub misattribution: f64,
}

/// One full protocol run per sigma, all with the same seeds. Rows follow
/// the order of `sigmas`.
pub fn sweep_variance(cfg: &ExperimentConfig, sigmas: &[f64]) -> Result<Vec<SweepRow>> {
    if cfg.trainer.mode != Family::Gaussian {
        return Err(HarnessError::Config("the variance sweep needs gaussian mode".into()));
    }
    if sigmas.is_empty() {
        return Err(HarnessError::Config("no sigmas requested".into()));
    }
    sigmas
        .iter()
        .map(|&sigma| {
            let mut c = cfg.clone();
            c.trainer.sigma = sigma;
            let p = run_pipeline(&c)?;
            Ok(SweepRow {
                sigma,
                accuracy: p.metrics.accuracy_personalized,
                misattribution: p.metrics.attack.empirical_misattribution,
            })
        })
        .collect()
}

/// CSV with header `sigma,accuracy,misattribution`.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "sigma,accuracy,misattribution")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.sigma, r.accuracy, r.misattribution)?;
    }
    out.flush()?;
    Ok(())
}

/// Entropy-bucketed accuracy of the personalized model, with the bootstrap
/// model (zero embeddings) as the per-bucket baseline.
pub fn entropy_report(cfg: &ExperimentConfig, p: &Pipeline) -> Result<EntropyBucketReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, "entropy", 0));
    user_entropy_analysis(
        &p.model,
        &p.dists(),
        &p.prepared.task.devices,
        cfg.entropy.k,
        &cfg.entropy_edges(),
        &mut rng,
        Some(&p.prepared.bootstrap),
    )
    .stage("user_entropy_analysis")
}

/// CSV with header `bucket_lo,bucket_hi,count,accuracy`. Empty buckets
/// leave the accuracy field blank.
pub fn write_entropy_csv(report: &EntropyBucketReport, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "bucket_lo,bucket_hi,count,accuracy")?;
    for (i, w) in report.bucket_edges.windows(2).enumerate() {
        let acc = report.per_bucket_accuracy[i].map(|a| a.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", w[0], w[1], report.per_bucket_count[i], acc)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSummary {
    pub samples_per_user: usize,
    pub between_within_ratio: f64,
    pub explained_variance: [f64; 2],
}

/// Project the trained distributions of a pipeline and, when `out` is
/// given, write the CSV there.
pub fn export_embedding_projection(
    cfg: &ExperimentConfig,
    p: &Pipeline,
    out: Option<&Path>,
) -> Result<(Projection, ProjectionSummary)> {
    let spu = cfg.projection.samples_per_user;
    let proj = project_embeddings(&p.dists(), spu, stream(cfg.seed, "projection", 0))?;
    if let Some(path) = out {
        write_projection_csv(&proj, path)?;
    }
    let summary = ProjectionSummary {
        samples_per_user: spu,
        between_within_ratio: between_within_ratio(&proj.points, &proj.users),
        explained_variance: proj.explained_variance,
    };
    Ok((proj, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.task.users = 6;
        c.task.per_user = 30;
        c.trainer.t_max = 10;
        c.cloud.bootstrap_epochs = 3;
        c.cloud.finetune_epochs = 3;
        c.attack.m = 50;
        c.entropy.k = 4;
        c
    }

    #[test]
    fn sweep_rows_follow_request_order() {
        let rows = sweep_variance(&small(), &[0.3, 0.0, 0.1]).unwrap();
        let s: Vec<f64> = rows.iter().map(|r| r.sigma).collect();
        assert_eq!(s, vec![0.3, 0.0, 0.1]);
        assert_eq!(rows[1].misattribution, 0.0);
        for r in &rows {
            assert!((0.0..=1.0).contains(&r.accuracy) && (0.0..=1.0).contains(&r.misattribution));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("sigma,accuracy,misattribution\n"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn sweep_rejects_beta_mode() {
        let mut c = small();
        c.trainer.mode = Family::Beta;
        assert!(matches!(sweep_variance(&c, &[0.1]), Err(HarnessError::Config(_))));
    }

    #[test]
    fn entropy_csv_layout() {
        let c = small();
        let p = run_pipeline(&c).unwrap();
        let r = entropy_report(&c, &p).unwrap();
        let items: usize = p.prepared.task.devices.iter().map(|d| d.test.len()).sum();
        assert_eq!(r.per_bucket_count.iter().sum::<usize>(), items);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("entropy.csv");
        write_entropy_csv(&r, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("bucket_lo,bucket_hi,count,accuracy\n"));
        assert_eq!(text.lines().count(), r.bucket_edges.len());
    }
}
