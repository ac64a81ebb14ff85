use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ibp_fewshot::episodes::{Dataset, TaskSpec};
use ibp_fewshot::harness::{self, RunConfig};
use ibp_fewshot::learners::EvalSettings;
use ibp_fewshot::tensor::Checkpoint;
use ibp_fewshot::{Error, Result};

#[derive(Parser)]
#[command(name = "fsl", about = "Few-shot learners with interval bound propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (train, synth, report) or JSON file (eval,
    /// compactness, transfer).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of evaluation tasks; defaults to the config's `eval_tasks`.
    #[arg(long)]
    tasks: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one config, or every run of its sweep grid.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Mean test accuracy with a 95% interval.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ck: CheckpointArgs,
        /// Split to evaluate on.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Mean nearest same-class distance of query embeddings.
    Compactness {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ck: CheckpointArgs,
        /// Query instances per task, spread evenly over the ways.
        #[arg(long, default_value_t = 100)]
        queries: usize,
    },
    /// Evaluate on another dataset file without retraining.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long)]
        target: PathBuf,
    },
    /// Merge run summaries into one table.
    Report {
        #[arg(long)]
        out: PathBuf,
        summaries: Vec<PathBuf>,
    },
    /// Write the config's synthetic pools as dataset files.
    Synth {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn settings_of(ck: &Checkpoint, cfg: &RunConfig) -> Result<EvalSettings> {
    match ck.meta.get("eval") {
        Some(v) => Ok(serde_json::from_value(v.clone())?),
        None => Ok(cfg.eval_settings()),
    }
}

fn emit(value: serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(&value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn split<'a>(splits: &'a harness::Splits, name: &str) -> Result<&'a Dataset> {
    match name {
        "train" => Ok(&splits.train),
        "validation" => splits
            .validation
            .as_ref()
            .ok_or_else(|| Error::Config("config has no validation split".into())),
        "test" => Ok(&splits.test),
        other => Err(Error::Config(format!("unknown split {other:?}"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let mut cfg = load_config(&common)?;
            let out = common
                .out
                .or_else(|| cfg.out.clone())
                .unwrap_or_else(|| PathBuf::from("runs").join(cfg.run_name()));
            cfg.out = Some(out.clone());
            if cfg.sweep.is_some() {
                let runs = harness::run_sweep(&cfg, &out)?;
                emit(json!({ "runs": runs.len(), "out": out }), None)
            } else {
                let s = harness::run_to_dir(&cfg, &out)?;
                emit(
                    json!({ "run": s.run, "test_accuracy": s.test_accuracy, "test_ci95": s.test_ci95, "out": out }),
                    None,
                )
            }
        }
        Command::Eval { common, ck, split: name } => {
            let cfg = load_config(&common)?;
            let checkpoint = Checkpoint::load(&ck.checkpoint)?;
            let splits = cfg.data.load()?;
            let n = ck.tasks.unwrap_or(cfg.eval_tasks);
            let r = harness::evaluate(
                &checkpoint.network,
                &settings_of(&checkpoint, &cfg)?,
                split(&splits, &name)?,
                cfg.eval_task,
                n,
                cfg.seed,
            )?;
            emit(json!({ "split": name, "accuracy": r.mean, "ci95": r.ci95, "tasks": r.n_tasks }), common.out.as_deref())
        }
        Command::Compactness { common, ck, queries } => {
            let cfg = load_config(&common)?;
            let checkpoint = Checkpoint::load(&ck.checkpoint)?;
            let splits = cfg.data.load()?;
            let ways = cfg.eval_task.ways;
            let spec = TaskSpec::new(ways, cfg.eval_task.shots, (queries / ways).max(1))?;
            let r = harness::compactness(&checkpoint.network, &splits.test, spec, ck.tasks.unwrap_or(cfg.eval_tasks), cfg.seed)?;
            emit(json!({ "mean": r.mean, "std": r.std, "tasks": r.n_tasks }), common.out.as_deref())
        }
        Command::Transfer { common, ck, target } => {
            let cfg = load_config(&common)?;
            let checkpoint = Checkpoint::load(&ck.checkpoint)?;
            let dataset = Dataset::load(&target)?;
            let r = harness::transfer_eval(
                &checkpoint.network,
                &settings_of(&checkpoint, &cfg)?,
                &dataset,
                cfg.eval_task,
                ck.tasks.unwrap_or(cfg.eval_tasks),
                cfg.seed,
            )?;
            emit(
                json!({ "target": target, "accuracy": r.mean, "ci95": r.ci95, "tasks": r.n_tasks }),
                common.out.as_deref(),
            )
        }
        Command::Report { out, summaries } => {
            let t = harness::report(&summaries, &out)?;
            emit(json!({ "rows": t.rows.len(), "out": out }), None)
        }
        Command::Synth { common } => {
            let cfg = load_config(&common)?;
            let out = common.out.unwrap_or_else(|| PathBuf::from("data"));
            std::fs::create_dir_all(&out)?;
            let splits = cfg.data.load()?;
            splits.train.save(out.join("train.fsds"))?;
            if let Some(v) = &splits.validation {
                v.save(out.join("validation.fsds"))?;
            }
            splits.test.save(out.join("test.fsds"))?;
            emit(json!({ "out": out }), None)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
