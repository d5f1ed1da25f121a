use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use idfree_harness::experiments::{
    entropy_report, export_embedding_projection, sweep_variance, write_entropy_csv, write_sweep_csv,
};
use idfree_harness::protocol::{
    baseline_no_id, baseline_on_device, baseline_static_embedding, run_pipeline, run_protocol, write_json,
};
use idfree_harness::verify::verify_all;
use idfree_harness::{ExperimentConfig, HarnessError, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "idfree", version, about = "Identity-free personalization experiments")]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// `inprocess` or `socket:ADDR`.
    #[arg(long, global = true)]
    transport: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full protocol: metrics.json, model.json, cloud_dataset.jsonl.
    Run,
    /// Protocol once per sigma: sweep.csv.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3")]
        sigmas: Vec<f64>,
    },
    /// Misattribution and entropy analysis: attack.json, entropy.csv, entropy.json.
    Attack,
    /// Run the verification suite: verify.json. Exits 3 on failure.
    Verify,
    /// 2-D projection of trained embeddings: projection.csv, projection.json.
    ExportProj,
    /// Baseline accuracy: baseline.json.
    Baseline {
        #[arg(long, value_enum)]
        kind: BaselineKind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    NoId,
    OnDevice,
    StaticEmbedding,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = &cli.transport {
        cfg.transport = t.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out: &Path = &cli.out;
    std::fs::create_dir_all(out)?;
    match &cli.command {
        Command::Run => {
            let m = run_protocol(&cfg, Some(out))?;
            println!(
                "accuracy personalized {:.4}  bootstrap {:.4}  misattribution {:.4}",
                m.accuracy_personalized, m.accuracy_bootstrap, m.attack.empirical_misattribution
            );
        }
        Command::Sweep { sigmas } => {
            let rows = sweep_variance(&cfg, sigmas)?;
            write_sweep_csv(&rows, &out.join("sweep.csv"))?;
            println!("sigma,accuracy,misattribution");
            for r in &rows {
                println!("{},{:.4},{:.4}", r.sigma, r.accuracy, r.misattribution);
            }
        }
        Command::Attack => {
            let p = run_pipeline(&cfg)?;
            write_json(
                &out.join("attack.json"),
                &json!({ "attack": p.metrics.attack, "pairwise_gap": p.metrics.pairwise_gap }),
            )?;
            let ent = entropy_report(&cfg, &p)?;
            write_entropy_csv(&ent, &out.join("entropy.csv"))?;
            write_json(&out.join("entropy.json"), &ent)?;
            let a = &p.metrics.attack;
            match a.theoretical_bound {
                Some(b) => println!("misattribution {:.4}  bound {:.4}", a.empirical_misattribution, b),
                None => println!("misattribution {:.4}", a.empirical_misattribution),
            }
        }
        Command::Verify => {
            let report = verify_all(&cfg)?;
            write_json(&out.join("verify.json"), &report)?;
            for c in &report.checks {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if !report.pass {
                let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
                return Err(HarnessError::Verification(names.join(", ")));
            }
        }
        Command::ExportProj => {
            let p = run_pipeline(&cfg)?;
            let (_, summary) = export_embedding_projection(&cfg, &p, Some(&out.join("projection.csv")))?;
            write_json(&out.join("projection.json"), &summary)?;
            println!("between/within ratio {:.4}", summary.between_within_ratio);
        }
        Command::Baseline { kind } => {
            let value = match kind {
                BaselineKind::NoId => {
                    let acc = baseline_no_id(&cfg)?;
                    println!("no-id accuracy {acc:.4}");
                    json!({ "kind": "no-id", "accuracy": acc })
                }
                BaselineKind::OnDevice => {
                    let r = baseline_on_device(&cfg)?;
                    println!("on-device accuracy {:.4}", r.micro_accuracy);
                    json!({ "kind": "on-device", "accuracy": r.micro_accuracy, "per_user_accuracy": r.per_user_accuracy })
                }
                BaselineKind::StaticEmbedding => {
                    let m = baseline_static_embedding(&cfg)?;
                    println!("static-embedding accuracy {:.4}", m.accuracy_personalized);
                    json!({ "kind": "static-embedding", "accuracy": m.accuracy_personalized, "metrics": m })
                }
            };
            write_json(&out.join("baseline.json"), &value)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
