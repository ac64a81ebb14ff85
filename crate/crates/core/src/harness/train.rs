//! Training loops for both learners with the bound objective and task
//! interpolation.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Splits};
use super::eval::evaluate;
use crate::episodes::{sample_task, Dataset, Task};
use crate::error::{Error, Result};
use crate::ibpi::{interpolated_set_on, should_interpolate, InterpolationMode, MixPlan};
use crate::interval::prefix_bounds_on;
use crate::learners::{
    classifier_loss_on, cross_entropy_on, maml_outer_step, protonet_logits_on, prototypes_on, AdaptedParams,
    LearnerKind, MamlObjective,
};
use crate::objective::{bound_losses_on, epsilon_schedule, total_loss_on, LossTriple, LossVars, WeightTriple};
use crate::tensor::{Network, Optimizer, RngDescriptor, Tape, Var};

/// One row of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epsilon: f64,
    pub l_ce: f64,
    pub l_lb: f64,
    pub l_ub: f64,
    pub w_ce: f64,
    pub w_lb: f64,
    pub w_ub: f64,
    pub total: f64,
    /// Tasks of this step that had an artificial counterpart.
    pub interpolated: usize,
    pub val_accuracy: Option<f64>,
    pub val_ci95: Option<f64>,
    pub seed: u64,
}

/// Losses and weights of one task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub losses: LossTriple,
    pub weights: WeightTriple,
    pub total: f64,
}

impl StepLog {
    fn mean(logs: &[StepLog]) -> Result<StepLog> {
        let n = logs.len() as f64;
        let avg = |f: &dyn Fn(&StepLog) -> f64| logs.iter().map(f).sum::<f64>() / n;
        let losses = LossTriple::new(avg(&|l| l.losses.l_ce), avg(&|l| l.losses.l_lb), avg(&|l| l.losses.l_ub))?;
        let mut w = [avg(&|l| l.weights.w_ce), avg(&|l| l.weights.w_lb), avg(&|l| l.weights.w_ub)];
        // renormalize away rounding from averaging
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        Ok(StepLog {
            losses,
            weights: WeightTriple::fixed(w)?,
            total: avg(&|l| l.total),
        })
    }
}

/// Combines the three losses into the weighted total. Without bound losses
/// in the objective the total is the cross-entropy alone and the measured
/// bound losses, if any, are only logged.
fn combine(tape: &mut Tape, config: &RunConfig, ce: Var, bounds: Option<(Var, Var)>) -> Result<(Var, StepLog)> {
    let vars = LossVars {
        ce,
        lb: bounds.map(|b| b.0),
        ub: bounds.map(|b| b.1),
    };
    let losses = vars.values(tape)?;
    let (vars, weights) = if config.objective.bound_losses() {
        (vars, config.weight_mode().weights(&losses)?)
    } else {
        (LossVars { ce, lb: None, ub: None }, WeightTriple::fixed([1.0, 0.0, 0.0])?)
    };
    let total = total_loss_on(tape, vars, &weights)?;
    let log = StepLog {
        losses,
        weights,
        total: tape.value(total).item()?,
    };
    Ok((total, log))
}

fn half_sum(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let s = tape.add(a, b)?;
    tape.scale(s, 0.5)
}

/// Artificial-task ingredients drawn for one task.
#[derive(Clone, Debug)]
struct MixDraw {
    mode: InterpolationMode,
    plan: MixPlan,
    pair: Option<Task>,
}

fn draw_mix<R: Rng + ?Sized>(config: &RunConfig, train: &Dataset, mode: InterpolationMode, rng: &mut R) -> Result<MixDraw> {
    let plan = MixPlan::sample(config.train_task.ways, config.alpha, config.beta, config.shared_mix, rng)?;
    let pair = if mode.needs_pair() {
        Some(sample_task(train, config.train_task, rng)?)
    } else {
        None
    };
    Ok(MixDraw { mode, plan, pair })
}

fn interpolated_halves(
    tape: &mut Tape,
    network: &Network,
    params: &[Var],
    task: &Task,
    mix: &MixDraw,
    epsilon: f64,
) -> Result<(Var, Var)> {
    let pair = mix.pair.as_ref();
    let s = interpolated_set_on(
        tape,
        network,
        params,
        &task.support,
        pair.map(|p| &p.support),
        epsilon,
        mix.mode,
        &mix.plan.support,
    )?;
    let q = interpolated_set_on(
        tape,
        network,
        params,
        &task.query,
        pair.map(|p| &p.query),
        epsilon,
        mix.mode,
        &mix.plan.query,
    )?;
    Ok((s, q))
}

/// One ProtoNet update. Returns the step log and whether an artificial task
/// was used.
pub fn protonet_step<R: Rng + ?Sized>(
    config: &RunConfig,
    network: &mut Network,
    optimizer: &mut Optimizer,
    train: &Dataset,
    epsilon: f64,
    rng: &mut R,
) -> Result<(StepLog, bool)> {
    let interp = match config.objective.interpolation() {
        Some(mode) if should_interpolate(LearnerKind::ProtoNet, 1, config.interpolation_prob, rng)?[0] => Some(mode),
        _ => None,
    };
    let task = sample_task(train, config.train_task, rng)?;
    let mix = interp.map(|m| draw_mix(config, train, m, rng)).transpose()?;
    let ways = task.ways();

    let mut tape = Tape::new();
    let theta = network.bind(&mut tape);
    let sx = tape.constant(network.batch_input(&task.support.x)?);
    let se = network.forward_on(&mut tape, &theta, sx)?;
    let protos = prototypes_on(&mut tape, se, &task.support.labels, ways)?;
    let (qe, bounds) = if config.objective.propagates_bounds() {
        let b = prefix_bounds_on(&mut tape, network, &theta, &task.query.x, epsilon)?;
        let qe = network.head_on(&mut tape, &theta, b.center)?;
        (qe, Some(bound_losses_on(&mut tape, b)?))
    } else {
        let qx = tape.constant(network.batch_input(&task.query.x)?);
        (network.forward_on(&mut tape, &theta, qx)?, None)
    };
    let logits = protonet_logits_on(&mut tape, qe, protos, config.distance)?;
    let mut ce = cross_entropy_on(&mut tape, logits, &task.query.labels)?;
    if let Some(mix) = &mix {
        let (hs, hq) = interpolated_halves(&mut tape, network, &theta, &task, mix, epsilon)?;
        let fs = network.head_on(&mut tape, &theta, hs)?;
        let protos2 = prototypes_on(&mut tape, fs, &task.support.labels, ways)?;
        let fq = network.head_on(&mut tape, &theta, hq)?;
        let logits2 = protonet_logits_on(&mut tape, fq, protos2, config.distance)?;
        let ce2 = cross_entropy_on(&mut tape, logits2, &task.query.labels)?;
        ce = half_sum(&mut tape, ce, ce2)?;
    }
    let (total, log) = combine(&mut tape, config, ce, bounds)?;
    let grads = tape.gradients(total, &theta)?;
    optimizer.step(network.params_mut(), &grads)?;
    Ok((log, mix.is_some()))
}

/// MAML objective for one meta-batch: cross-entropy on support and query,
/// query bound losses, and the artificial task at the marked position.
struct MetaObjective<'a> {
    config: &'a RunConfig,
    epsilon: f64,
    mixes: Vec<Option<MixDraw>>,
    /// Embedding-space artificial support and query of the current task,
    /// built once from the meta-parameters.
    cache: Option<(usize, Var, Var)>,
    logs: Vec<StepLog>,
}

impl MetaObjective<'_> {
    fn artificial(&mut self, tape: &mut Tape, network: &Network, theta: &[Var], task: &Task, index: usize) -> Result<Option<(Var, Var)>> {
        let Some(mix) = &self.mixes[index] else {
            return Ok(None);
        };
        if let Some((i, s, q)) = self.cache {
            if i == index {
                return Ok(Some((s, q)));
            }
        }
        let (s, q) = interpolated_halves(tape, network, theta, task, mix, self.epsilon)?;
        self.cache = Some((index, s, q));
        Ok(Some((s, q)))
    }
}

impl MamlObjective for MetaObjective<'_> {
    fn support_loss(&mut self, tape: &mut Tape, network: &Network, params: &[Var], task: &Task, index: usize) -> Result<Var> {
        let ce = classifier_loss_on(tape, network, params, &task.support)?;
        // the first call sees the meta-parameters themselves
        match self.artificial(tape, network, params, task, index)? {
            Some((hs, _)) => {
                let logits = network.head_on(tape, params, hs)?;
                let ce2 = cross_entropy_on(tape, logits, &task.support.labels)?;
                half_sum(tape, ce, ce2)
            }
            None => Ok(ce),
        }
    }

    fn query_loss(
        &mut self,
        tape: &mut Tape,
        network: &Network,
        theta: &[Var],
        adapted: &AdaptedParams,
        task: &Task,
        index: usize,
    ) -> Result<Var> {
        let phi = &adapted.params;
        let (logits, bounds) = if self.config.objective.propagates_bounds() {
            let prefix = if self.config.bounds_on_adapted { phi } else { theta };
            let b = prefix_bounds_on(tape, network, prefix, &task.query.x, self.epsilon)?;
            let logits = if self.config.bounds_on_adapted {
                network.head_on(tape, phi, b.center)?
            } else {
                let qx = tape.constant(network.batch_input(&task.query.x)?);
                network.forward_on(tape, phi, qx)?
            };
            (logits, Some(bound_losses_on(tape, b)?))
        } else {
            let qx = tape.constant(network.batch_input(&task.query.x)?);
            (network.forward_on(tape, phi, qx)?, None)
        };
        let mut ce = cross_entropy_on(tape, logits, &task.query.labels)?;
        if let Some((_, hq)) = self.artificial(tape, network, theta, task, index)? {
            let logits2 = network.head_on(tape, phi, hq)?;
            let ce2 = cross_entropy_on(tape, logits2, &task.query.labels)?;
            ce = half_sum(tape, ce, ce2)?;
        }
        let (total, log) = combine(tape, self.config, ce, bounds)?;
        self.logs.push(log);
        Ok(total)
    }
}

/// One MAML meta-update over `meta_batch` tasks.
pub fn maml_step<R: Rng + ?Sized>(
    config: &RunConfig,
    network: &mut Network,
    optimizer: &mut Optimizer,
    train: &Dataset,
    epsilon: f64,
    rng: &mut R,
) -> Result<(StepLog, usize)> {
    let b = config.meta_batch;
    let marks = match config.objective.interpolation() {
        Some(_) => should_interpolate(LearnerKind::Maml, b, config.interpolation_prob, rng)?,
        None => vec![false; b],
    };
    let tasks = (0..b)
        .map(|_| sample_task(train, config.train_task, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut mixes = Vec::with_capacity(b);
    for &m in &marks {
        mixes.push(match config.objective.interpolation() {
            Some(mode) if m => Some(draw_mix(config, train, mode, rng)?),
            _ => None,
        });
    }
    let interpolated = mixes.iter().filter(|m| m.is_some()).count();
    let mut objective = MetaObjective {
        config,
        epsilon,
        mixes,
        cache: None,
        logs: Vec::with_capacity(b),
    };
    maml_outer_step(network, &tasks, &config.inner_loop(), &mut objective, optimizer)?;
    Ok((StepLog::mean(&objective.logs)?, interpolated))
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub records: Vec<MetricsRecord>,
    /// Step and accuracy of the best validation evaluation.
    pub best_validation: Option<(usize, f64)>,
    pub rng: RngDescriptor,
    pub wall_clock_seconds: f64,
}

/// Seed offset separating validation task streams from test ones.
pub const VALIDATION_SEED_OFFSET: u64 = 0x5EED_0001;

/// Runs the configured loop for `steps` updates.
pub fn train(config: &RunConfig, splits: &Splits) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut network = config.build_network(splits.train.instance_shape(), &mut rng)?;
    let mut optimizer = Optimizer::adam(config.lr);
    let settings = config.eval_settings();
    let mut records = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for t in 1..=config.steps {
        let epsilon = epsilon_schedule(t, config.steps, config.epsilon)?;
        let step = match config.learner {
            LearnerKind::ProtoNet => protonet_step(config, &mut network, &mut optimizer, &splits.train, epsilon, &mut rng)
                .map(|(log, i)| (log, i as usize)),
            LearnerKind::Maml => maml_step(config, &mut network, &mut optimizer, &splits.train, epsilon, &mut rng),
        };
        let (log, interpolated) = step.map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("step {t}: {m}")),
            other => other,
        })?;
        let mut val = None;
        if let (Some(vset), true) = (&splits.validation, config.validation_every > 0 && t % config.validation_every == 0) {
            let r = evaluate(
                &network,
                &settings,
                vset,
                config.eval_task,
                config.validation_tasks,
                config.seed.wrapping_add(VALIDATION_SEED_OFFSET),
            )?;
            if best.is_none_or(|(_, a)| r.mean > a) {
                best = Some((t, r.mean));
            }
            val = Some(r);
        }
        if t % config.log_every == 0 || t == config.steps || val.is_some() {
            records.push(MetricsRecord {
                step: t,
                epsilon,
                l_ce: log.losses.l_ce,
                l_lb: log.losses.l_lb,
                l_ub: log.losses.l_ub,
                w_ce: log.weights.w_ce,
                w_lb: log.weights.w_lb,
                w_ub: log.weights.w_ub,
                total: log.total,
                interpolated,
                val_accuracy: val.map(|r| r.mean),
                val_ci95: val.map(|r| r.ci95),
                seed: config.seed,
            });
        }
    }
    Ok(TrainOutcome {
        network,
        records,
        best_validation: best,
        rng: RngDescriptor {
            algorithm: "chacha8".into(),
            seed: config.seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        },
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Writes records as CSV, one row per logging interval.
pub fn write_metrics_csv<W: std::io::Write>(records: &[MetricsRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricsRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}
