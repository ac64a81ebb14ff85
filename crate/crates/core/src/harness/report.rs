//! Run directories, JSON summaries and consolidated tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Objective, RunConfig};
use super::eval::{evaluate, mean_box_width};
use super::train::{train, write_metrics_csv, TrainOutcome};
use crate::error::{Error, Result};
use crate::learners::LearnerKind;
use crate::objective::{LossTriple, WeightTriple};
use crate::tensor::Checkpoint;

/// Version of the summary and report layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Tasks used for the box-width diagnostic.
pub const WIDTH_TASKS: usize = 100;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.fsck";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub run: String,
    pub learner: LearnerKind,
    pub objective: Objective,
    pub seed: u64,
    pub steps: usize,
    pub final_losses: LossTriple,
    pub final_weights: WeightTriple,
    pub best_validation_step: Option<usize>,
    pub best_validation_accuracy: Option<f64>,
    pub test_accuracy: f64,
    pub test_ci95: f64,
    pub test_tasks: usize,
    /// Mean width of query boxes at layer `S` on test tasks at the target ε.
    pub mean_box_width: f64,
    pub wall_clock_seconds: f64,
    pub config: RunConfig,
}

/// Test-split figures and the summary of a finished run.
pub fn summarize(config: &RunConfig, outcome: &TrainOutcome, test: &crate::episodes::Dataset) -> Result<RunSummary> {
    let last = outcome
        .records
        .last()
        .ok_or_else(|| Error::invalid("run produced no metrics"))?;
    let acc = evaluate(&outcome.network, &config.eval_settings(), test, config.eval_task, config.eval_tasks, config.seed)?;
    let width = mean_box_width(
        &outcome.network,
        test,
        config.eval_task,
        WIDTH_TASKS.min(config.eval_tasks),
        config.epsilon,
        config.seed,
    )?;
    Ok(RunSummary {
        schema_version: SCHEMA_VERSION,
        run: config.run_name(),
        learner: config.learner,
        objective: config.objective,
        seed: config.seed,
        steps: config.steps,
        final_losses: LossTriple::new(last.l_ce, last.l_lb, last.l_ub)?,
        final_weights: WeightTriple::fixed([last.w_ce, last.w_lb, last.w_ub])?,
        best_validation_step: outcome.best_validation.map(|b| b.0),
        best_validation_accuracy: outcome.best_validation.map(|b| b.1),
        test_accuracy: acc.mean,
        test_ci95: acc.ci95,
        test_tasks: acc.n_tasks,
        mean_box_width: width,
        wall_clock_seconds: outcome.wall_clock_seconds,
        config: config.clone(),
    })
}

/// Trains one config and writes metrics, summary and checkpoint into `dir`.
pub fn run_to_dir(config: &RunConfig, dir: &Path) -> Result<RunSummary> {
    let splits = config.data.load()?;
    let outcome = train(config, &splits)?;
    fs::create_dir_all(dir)?;
    write_metrics_csv(&outcome.records, fs::File::create(dir.join(METRICS_FILE))?)?;
    let summary = summarize(config, &outcome, &splits.test)?;
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    let mut ck = Checkpoint::new(outcome.network);
    ck.rng = Some(outcome.rng);
    ck.meta = serde_json::json!({
        "eval": config.eval_settings(),
        "fingerprint": config.fingerprint(),
        "steps": config.steps,
        "epsilon": config.epsilon,
        "best_validation_step": summary.best_validation_step,
    });
    ck.save(dir.join(CHECKPOINT_FILE))?;
    Ok(summary)
}

/// Runs every config of the sweep grid into `root/<run name>` and writes
/// the consolidated tables next to them.
pub fn run_sweep(config: &RunConfig, root: &Path) -> Result<Vec<RunSummary>> {
    let mut summaries = Vec::new();
    for c in config.expand() {
        let dir = root.join(c.run_name());
        let mut c = c;
        c.out = Some(dir.clone());
        summaries.push(run_to_dir(&c, &dir)?);
    }
    fs::create_dir_all(root)?;
    write_rows(&report_rows(&summaries), &root.join("report.csv"))?;
    write_rows(&delta_table(&summaries), &root.join("deltas.csv"))?;
    write_rows(&mode_table(&summaries), &root.join("modes.csv"))?;
    Ok(summaries)
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    match v.get("schema_version").and_then(|s| s.as_u64()) {
        Some(s) if s == SCHEMA_VERSION as u64 => Ok(serde_json::from_value(v)?),
        Some(s) => Err(Error::Format(format!(
            "{}: schema version {s}, expected {SCHEMA_VERSION}",
            path.display()
        ))),
        None => Err(Error::Format(format!("{}: missing schema_version", path.display()))),
    }
}

/// Ordered column names and string cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per run with its config fingerprint, in input order.
pub fn report_rows(summaries: &[RunSummary]) -> Table {
    let columns = [
        "run",
        "learner",
        "objective",
        "seed",
        "steps",
        "test_accuracy",
        "test_ci95",
        "test_tasks",
        "best_validation_step",
        "best_validation_accuracy",
        "mean_box_width",
        "final_l_ce",
        "final_l_lb",
        "final_l_ub",
        "wall_clock_seconds",
        "fingerprint",
    ];
    let rows = summaries
        .iter()
        .map(|s| {
            vec![
                s.run.clone(),
                learner_name(s.learner).to_string(),
                s.objective.name().to_string(),
                s.seed.to_string(),
                s.steps.to_string(),
                s.test_accuracy.to_string(),
                s.test_ci95.to_string(),
                s.test_tasks.to_string(),
                opt(s.best_validation_step),
                opt(s.best_validation_accuracy),
                s.mean_box_width.to_string(),
                s.final_losses.l_ce.to_string(),
                s.final_losses.l_lb.to_string(),
                s.final_losses.l_ub.to_string(),
                s.wall_clock_seconds.to_string(),
                s.config.fingerprint(),
            ]
        })
        .collect();
    Table {
        columns: columns.iter().map(|c| c.to_string()).collect(),
        rows,
    }
}

fn learner_name(l: LearnerKind) -> &'static str {
    match l {
        LearnerKind::ProtoNet => "protonet",
        LearnerKind::Maml => "maml",
    }
}

/// Accuracy of each non-vanilla run minus the vanilla run of the same
/// learner and seed (in points), plus one mean row per learner and
/// objective.
pub fn delta_table(summaries: &[RunSummary]) -> Table {
    let mut base: BTreeMap<(&str, u64), f64> = BTreeMap::new();
    for s in summaries.iter().filter(|s| s.objective == Objective::Vanilla) {
        base.insert((learner_name(s.learner), s.seed), s.test_accuracy);
    }
    let mut rows = Vec::new();
    let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for s in summaries.iter().filter(|s| s.objective != Objective::Vanilla) {
        let l = learner_name(s.learner);
        if let Some(b) = base.get(&(l, s.seed)) {
            let d = 100.0 * (s.test_accuracy - b);
            rows.push(vec![
                l.to_string(),
                s.objective.name().to_string(),
                s.seed.to_string(),
                (100.0 * b).to_string(),
                (100.0 * s.test_accuracy).to_string(),
                d.to_string(),
            ]);
            groups.entry((l, s.objective.name())).or_default().push(d);
        }
    }
    for ((l, o), ds) in groups {
        let mean = ds.iter().sum::<f64>() / ds.len() as f64;
        rows.push(vec![l.into(), o.into(), "mean".into(), String::new(), String::new(), mean.to_string()]);
    }
    Table {
        columns: ["learner", "objective", "seed", "vanilla_accuracy", "accuracy", "delta_points"]
            .map(String::from)
            .to_vec(),
        rows,
    }
}

/// Mean accuracy and box width per learner and objective across seeds.
pub fn mode_table(summaries: &[RunSummary]) -> Table {
    let mut groups: BTreeMap<(&str, &str), Vec<&RunSummary>> = BTreeMap::new();
    for s in summaries {
        groups.entry((learner_name(s.learner), s.objective.name())).or_default().push(s);
    }
    let rows = groups
        .into_iter()
        .map(|((l, o), ss)| {
            let n = ss.len() as f64;
            let acc = ss.iter().map(|s| s.test_accuracy).sum::<f64>() / n;
            let width = ss.iter().map(|s| s.mean_box_width).sum::<f64>() / n;
            vec![l.into(), o.into(), ss.len().to_string(), (100.0 * acc).to_string(), width.to_string()]
        })
        .collect();
    Table {
        columns: ["learner", "objective", "runs", "mean_accuracy", "mean_box_width"]
            .map(String::from)
            .to_vec(),
        rows,
    }
}

pub fn write_rows(table: &Table, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&table.columns)?;
    for r in &table.rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Merges run summaries into `report.csv` and `report.json` under `out`.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<Table> {
    if inputs.is_empty() {
        return Err(Error::invalid("report needs at least one summary"));
    }
    let summaries = inputs.iter().map(|p| read_summary(p)).collect::<Result<Vec<_>>>()?;
    let table = report_rows(&summaries);
    fs::create_dir_all(out)?;
    write_rows(&table, &out.join("report.csv"))?;
    let json: Vec<BTreeMap<&str, &str>> = table
        .rows
        .iter()
        .map(|r| table.columns.iter().map(String::as_str).zip(r.iter().map(String::as_str)).collect())
        .collect();
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&json)?)?;
    Ok(table)
}
