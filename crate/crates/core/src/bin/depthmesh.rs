use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use depthmesh::losses_metrics::write_json;
use depthmesh::pipeline::{
    ablation_suite, dataset_hash, evaluate, generate, grad_check_model, load_checkpoint,
    seq_length_sweep, tiny_config, train, write_csv, Model, RunConfig,
};
use depthmesh::{Error, Result};

#[derive(Parser)]
#[command(name = "depthmesh", version, about = "Depth-guided human mesh recovery on synthetic sequences")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-phase training, then evaluation on the eval split.
    Train,
    /// Evaluate a checkpoint (or the initialisation) on the eval split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth as the prediction.
        #[arg(long)]
        oracle: bool,
    },
    /// All six ablation cells over the configured seeds.
    Ablate,
    /// Complete model at each configured sequence length.
    Sweep,
    /// Write the dataset as text files.
    GenData,
    /// Finite-difference check of every learned block.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 4)]
        per_block: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.ablation_seeds = vec![s];
        cfg.sweep.seeds = vec![s];
    }
    cfg.output_dir = Some(cli.out.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn timing(out: &Path, start: Instant) -> Result<()> {
    write_json(
        &out.join("timing.json"),
        &json!({ "wall_clock_seconds": start.elapsed().as_secs_f64() }),
    )
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    let start = Instant::now();
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out)?;
    let result = match &cli.command {
        Command::Train => {
            let data = generate(&cfg)?;
            let (_, report, rows) = train(&cfg, &data)?;
            write_csv(&out.join("metrics.csv"), &rows)?;
            write_csv(&out.join("loss_curve.csv"), &report.curve)?;
            let mut summary = serde_json::to_value(&report)?;
            if let Some(o) = summary.as_object_mut() {
                o.remove("wall_clock_seconds");
            }
            write_json(&out.join("summary.json"), &summary)?;
            json!({ "command": "train", "summary": report.summary })
        }
        Command::Eval { checkpoint, oracle } => {
            let data = generate(&cfg)?;
            let mut model = Model::init(&cfg, data.template.clone())?;
            let path = checkpoint.clone().or_else(|| {
                let p = out.join("checkpoint.json");
                p.exists().then_some(p)
            });
            if let Some(p) = &path {
                model.load_params(load_checkpoint(p)?.params)?;
            }
            let (rows, summary) = evaluate(&model, &data.eval, &cfg, *oracle)?;
            write_csv(&out.join("metrics.csv"), &rows)?;
            write_json(
                &out.join("summary.json"),
                &json!({
                    "summary": summary,
                    "checkpoint": path,
                    "oracle": oracle,
                    "config": cfg,
                    "config_hash": cfg.content_hash(),
                    "dataset_hash": dataset_hash(&data),
                }),
            )?;
            json!({ "command": "eval", "summary": summary })
        }
        Command::Ablate => {
            let report = ablation_suite(&cfg, &cfg.ablation_seeds)?;
            write_csv(&out.join("table2.csv"), &report.table)?;
            let runs: Vec<_> = report
                .runs
                .iter()
                .map(|r| {
                    json!({
                        "cell": r.cell,
                        "seed": r.seed,
                        "mpjpe": r.summary.mpjpe,
                        "pa_mpjpe": r.summary.pa_mpjpe,
                        "mpvpe": r.summary.mpvpe,
                        "accel": r.summary.accel,
                        "dataset_hash": r.dataset_hash,
                    })
                })
                .collect();
            write_json(
                &out.join("summary.json"),
                &json!({
                    "table": report.table,
                    "runs": runs,
                    "config": cfg,
                    "config_hash": cfg.content_hash(),
                }),
            )?;
            json!({ "command": "ablate", "cells": report.table.len() })
        }
        Command::Sweep => {
            let report = seq_length_sweep(&cfg, &cfg.sweep.lengths, &cfg.sweep.seeds)?;
            write_csv(&out.join("sweep.csv"), &report.rows)?;
            write_json(
                &out.join("summary.json"),
                &json!({
                    "medians": report.medians,
                    "config": cfg,
                    "config_hash": cfg.content_hash(),
                }),
            )?;
            json!({ "command": "sweep", "medians": report.medians })
        }
        Command::GenData => {
            let data = generate(&cfg)?;
            let dir = out.join("data");
            for (split, samples) in [("train", &data.train), ("eval", &data.eval)] {
                let d = dir.join(split);
                std::fs::create_dir_all(&d)?;
                for (i, s) in samples.iter().enumerate() {
                    std::fs::write(d.join(format!("{i:04}.txt")), s.to_text())?;
                }
            }
            std::fs::write(dir.join("template.txt"), data.template.to_text())?;
            let hash = dataset_hash(&data);
            write_json(
                &out.join("summary.json"),
                &json!({
                    "train": data.train.len(),
                    "eval": data.eval.len(),
                    "dataset_hash": hash,
                    "config": cfg,
                    "config_hash": cfg.content_hash(),
                }),
            )?;
            json!({ "command": "gen-data", "dataset_hash": hash })
        }
        Command::GradCheck {
            instances,
            per_block,
        } => {
            let mut checks = Vec::new();
            let mut worst = 0.0f64;
            for i in 0..*instances {
                let seed = cfg.seed.wrapping_add(i as u64);
                let small = tiny_config(seed);
                let data = generate(&small)?;
                for c in grad_check_model(&small, &data, 0, *per_block, seed, 1e-5)? {
                    worst = worst.max(c.max_rel_error);
                    checks.push(json!({ "instance": i, "check": c }));
                }
            }
            let passed = worst < 1e-4;
            write_json(
                &out.join("summary.json"),
                &json!({ "passed": passed, "max_rel_error": worst, "checks": checks }),
            )?;
            if !passed {
                return Err(Error::CheckFailed(format!(
                    "max relative gradient error {worst:e}"
                )));
            }
            json!({ "command": "grad-check", "max_rel_error": worst })
        }
    };
    timing(out, start)?;
    Ok(result)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            println!(
                "{}",
                json!({ "error": { "kind": "usage", "message": e.to_string() } })
            );
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!(
                "{}",
                json!({ "error": { "kind": e.kind(), "message": e.to_string() } })
            );
            ExitCode::FAILURE
        }
    }
}
