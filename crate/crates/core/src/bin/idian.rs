use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use idian::data::{load_csv, write_csv, write_mask_csv, Domain};
use idian::error::{IdianError, Result};
use idian::experiment::{prepare_data, run_experiment, run_one, summary_csv, ExperimentConfig};
use idian::gradcheck::oracle_suite;
use idian::io::{write_atomic, write_string_atomic};
use idian::metrics::evaluate;
use idian::model::{load_checkpoint, save_checkpoint, CheckpointMeta};
use idian::trainer::Variant;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "idian", version, about = "Domain adaptation with an incomplete target domain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the target missing rate.
    #[arg(long = "missing-rate")]
    missing_rate: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the prepared (normalized, masked, shuffled) datasets as CSV.
    Prepare(Common),
    /// Train and evaluate one variant; writes the record and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Run every configured variant and repeat.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Restrict the run to one variant.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Evaluate a checkpoint on a target test CSV.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Seed of the evaluation noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the metrics JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every loss and routed gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.master_seed = seed;
    }
    if let Some(rate) = common.missing_rate {
        cfg.data.missing_rate = rate;
    }
    if let Some(out) = &common.out {
        cfg.run.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| IdianError::Data(e.to_string()))
}

fn write_dataset(path: &Path, ds: &idian::DomainDataset, mask: bool) -> Result<()> {
    write_atomic(path, |w| {
        let res = if mask { write_mask_csv(ds, w) } else { write_csv(ds, w) };
        res.map_err(|e| std::io::Error::other(e.to_string()))
    })
}

fn prepare(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = match &common.out {
        Some(out) => out.clone(),
        None => cfg.run.out_dir.join(&cfg.name).join("data"),
    };
    let data = prepare_data(&cfg, cfg.repeat_seed(0))?;
    write_dataset(&dir.join("source.csv"), &data.source, false)?;
    write_dataset(&dir.join("target_train.csv"), &data.target_train, false)?;
    write_dataset(&dir.join("target_train_mask.csv"), &data.target_train, true)?;
    write_dataset(&dir.join("test.csv"), &data.test, false)?;
    write_dataset(&dir.join("test_mask.csv"), &data.test, true)?;
    write_string_atomic(&dir.join("permutation.json"), &to_json(&data.permutation)?)?;
    println!("wrote prepared data to {}", dir.display());
    Ok(())
}

fn train_one(common: &Common, variant: &str) -> Result<()> {
    let variant: Variant = variant.parse()?;
    let cfg = load_config(common)?;
    let dir = match &common.out {
        Some(out) => out.clone(),
        None => cfg.run.out_dir.join(&cfg.name).join(variant.name()),
    };
    let data = prepare_data(&cfg, cfg.repeat_seed(0))?;
    let (record, history, model) = run_one(&cfg, &data, variant, 0)?;
    write_string_atomic(&dir.join("seed0.json"), &to_json(&record)?)?;
    write_string_atomic(&dir.join("history.json"), &to_json(&history)?)?;
    let meta = CheckpointMeta {
        master_seed: record.seed,
        config_hash: record.config_hash.clone(),
    };
    save_checkpoint(&model, &meta, dir.join("model.ckpt"))?;
    println!(
        "{variant}: acc {:.4} f1 {:.4} ({} skipped steps) -> {}",
        record.eval.acc,
        record.eval.f1,
        record.skipped_steps,
        dir.display()
    );
    Ok(())
}

fn experiment(common: &Common, variant: Option<&str>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(v) = variant {
        cfg.run.variants = vec![v.parse()?];
    }
    let out = run_experiment(&cfg)?;
    print!("{}", summary_csv(&out.summary));
    eprintln!("results in {}", out.dir.display());
    Ok(())
}

fn evaluate_checkpoint(checkpoint: &Path, test: &Path, seed: u64, out: Option<&Path>) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let test = load_csv(test, Domain::Target, model.n_classes)?;
    let report = evaluate(&model, &test, seed)?;
    let json = to_json(&report)?;
    match out {
        Some(path) => write_string_atomic(path, &json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Result<()> {
    let mut worst: f64 = 0.0;
    for (name, report) in oracle_suite(seed, 1e-6)? {
        let ok = report.max_relative_error < GRADCHECK_TOLERANCE;
        println!(
            "{} {name}: max relative error {:.3e} over {} entries",
            if ok { "ok  " } else { "FAIL" },
            report.max_relative_error,
            report.checked
        );
        worst = worst.max(report.max_relative_error);
    }
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(IdianError::numeric(format!(
            "gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE:e}"
        )))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(common) => prepare(&common),
        Command::Train { common, variant } => train_one(&common, &variant),
        Command::Experiment { common, variant } => experiment(&common, variant.as_deref()),
        Command::Evaluate {
            checkpoint,
            test,
            seed,
            out,
        } => evaluate_checkpoint(&checkpoint, &test, seed, out.as_deref()),
        Command::Gradcheck { seed } => gradcheck(seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
