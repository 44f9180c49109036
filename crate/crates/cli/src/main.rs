use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cod_core::harness::ablate::{ablate, parse_variants};
use cod_core::harness::config::TrainConfig;
use cod_core::harness::dataset::load_dataset;
use cod_core::harness::train::{evaluate, load_checkpoint, prepare_dataset, save_predictions, train};
use cod_core::metrics::{evaluate_dataset, MetricReport};

#[derive(Parser)]
#[command(name = "codnet", version, about = "Multi-scale camouflaged object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; checkpoints and logs go to `output.dir`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Extra `key=value` overrides applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Predict a dataset folder with a checkpoint and score the maps.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Folder with `Image/` and `GT/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a folder of predicted maps against ground truth.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report file; `.json` gives the machine-readable record, anything
        /// else the text table.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate ablation variants against the baseline.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated variants, e.g. `M1,M2,M3,M9`.
        #[arg(long, default_value = "")]
        variants: String,
        /// Report folder; defaults to `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_report(path: &Path, report: &MetricReport, title: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let body = if path.extension().is_some_and(|e| e == "json") {
        report.to_json()?
    } else {
        report.to_table(title)
    };
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            overrides,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            for kv in &overrides {
                let Some((k, v)) = kv.split_once('=') else {
                    bail!("override `{kv}` is not key=value");
                };
                cfg.set(k.trim(), v)?;
            }
            cfg.validate()?;
            let data = prepare_dataset(&cfg)?;
            let out = train(&cfg, &data, Some(&cfg.output_dir))?;
            let ev = evaluate(&out.net, &out.store, &data, cfg.threads)?;
            println!("{}", ev.report.to_table("train"));
            println!(
                "{} steps; checkpoints in {}",
                out.steps,
                cfg.output_dir.display()
            );
        }
        Command::Eval { checkpoint, data, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&data, Some(ck.config.model.input_size))?;
            let ev = evaluate(&ck.net, &ck.store, &ds, ck.config.threads)?;
            save_predictions(&out, &ds, &ev.predictions)?;
            let report = evaluate_dataset(&out, &data.join("GT"))?;
            write_report(&out.join("report.txt"), &report, "eval")?;
            write_report(&out.join("report.json"), &report, "eval")?;
            print!("{}", report.to_table("eval"));
        }
        Command::Score { pred, gt, out } => {
            if !gt.is_dir() {
                bail!("ground-truth folder {} does not exist", gt.display());
            }
            let report = evaluate_dataset(&pred, &gt)?;
            write_report(&out, &report, "score")?;
            print!("{}", report.to_table("score"));
        }
        Command::Ablate { config, variants, out } => {
            let cfg = TrainConfig::load(&config)?;
            let list = parse_variants(&variants)?;
            let report = ablate(&cfg, &list)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            report.write(&dir)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
