//! Artificial tasks built inside propagated boxes, and the mixup
//! variants used for comparison.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::episodes::{LabeledSet, Task};
use crate::error::{Error, Result};
use crate::interval::{prefix_bounds_on, BoundVars, IntervalTensor};
use crate::learners::LearnerKind;
use crate::tensor::{Network, Tape, Tensor, Var};

/// Where and how the artificial task is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationMode {
    Ibpi,
    MixupInput,
    MixupEmbedding,
    IbpiNoBoundLoss,
}

impl InterpolationMode {
    pub const ALL: [InterpolationMode; 4] = [
        InterpolationMode::Ibpi,
        InterpolationMode::MixupInput,
        InterpolationMode::MixupEmbedding,
        InterpolationMode::IbpiNoBoundLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InterpolationMode::Ibpi => "ibpi",
            InterpolationMode::MixupInput => "mixup_input",
            InterpolationMode::MixupEmbedding => "mixup_embedding",
            InterpolationMode::IbpiNoBoundLoss => "ibpi_no_bound_loss",
        }
    }

    pub fn needs_pair(self) -> bool {
        matches!(self, InterpolationMode::MixupInput | InterpolationMode::MixupEmbedding)
    }

    pub fn uses_bounds(self) -> bool {
        matches!(self, InterpolationMode::Ibpi | InterpolationMode::IbpiNoBoundLoss)
    }
}

/// One `(λ_k, ν_k)` per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixCoefficients {
    pub lambda: Vec<f64>,
    /// `true` selects the upper bound.
    pub nu: Vec<bool>,
    /// Beta parameters of the draw; zero for fixed coefficients.
    pub alpha: f64,
    pub beta: f64,
}

impl MixCoefficients {
    /// The same `(λ, ν)` for every class.
    pub fn uniform(ways: usize, lambda: f64, nu: bool) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(MixCoefficients {
            lambda: vec![lambda; ways],
            nu: vec![nu; ways],
            alpha: 0.0,
            beta: 0.0,
        })
    }

    pub fn ways(&self) -> usize {
        self.lambda.len()
    }
}

/// Coefficients for the support and query halves of one artificial task.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub support: MixCoefficients,
    pub query: MixCoefficients,
}

impl MixPlan {
    pub fn shared(c: MixCoefficients) -> Self {
        MixPlan {
            support: c.clone(),
            query: c,
        }
    }

    /// With `shared`, one draw serves both halves; otherwise the query half
    /// gets its own draw.
    pub fn sample<R: Rng + ?Sized>(ways: usize, alpha: f64, beta: f64, shared: bool, rng: &mut R) -> Result<Self> {
        let support = sample_mix(ways, alpha, beta, rng)?;
        if shared {
            Ok(MixPlan::shared(support))
        } else {
            let query = sample_mix(ways, alpha, beta, rng)?;
            Ok(MixPlan { support, query })
        }
    }
}

/// Independent `λ_k ~ Beta(α, β)` and fair coins `ν_k`.
pub fn sample_mix<R: Rng + ?Sized>(ways: usize, alpha: f64, beta: f64, rng: &mut R) -> Result<MixCoefficients> {
    if !(alpha > 0.0 && beta > 0.0) || !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::invalid(format!("Beta parameters must be positive, got ({alpha}, {beta})")));
    }
    let dist = Beta::new(alpha, beta).map_err(|e| Error::invalid(e.to_string()))?;
    let mut lambda = Vec::with_capacity(ways);
    let mut nu = Vec::with_capacity(ways);
    for _ in 0..ways {
        lambda.push(dist.sample(rng).clamp(0.0, 1.0));
        nu.push(rng.random_bool(0.5));
    }
    Ok(MixCoefficients { lambda, nu, alpha, beta })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// `(1 − λ)·center + λ·(lower if ν = 0 else upper)`.
pub fn interpolate(center: &Tensor, bounds: &IntervalTensor, lambda: f64, nu: bool) -> Result<Tensor> {
    check_lambda(lambda)?;
    if center.shape() != bounds.shape() {
        return Err(Error::shape("interpolate", bounds.shape(), center.shape()));
    }
    let target = if nu { bounds.upper() } else { bounds.lower() };
    center.zip_map(target, |c, b| c + lambda * (b - c))
}

fn row_coefficients(shape: &[usize], labels: &[usize], per_class: impl Fn(usize) -> f64) -> Result<Tensor> {
    let n = shape.first().copied().unwrap_or(0);
    if n != labels.len() {
        return Err(Error::shape("rows vs labels", &[labels.len()], shape));
    }
    let width: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(n * width);
    for &l in labels {
        data.extend(std::iter::repeat_n(per_class(l), width));
    }
    Tensor::new(shape.to_vec(), data)
}

fn check_labels(labels: &[usize], mix: &MixCoefficients) -> Result<()> {
    match labels.iter().find(|&&l| l >= mix.ways()) {
        Some(l) => Err(Error::invalid(format!("label {l} has no mix coefficient ({} classes)", mix.ways()))),
        None => Ok(()),
    }
}

/// Per-row interpolation of batched centers toward a chosen bound, with
/// the row's class selecting `(λ, ν)`.
pub fn interpolate_on(tape: &mut Tape, bounds: BoundVars, labels: &[usize], mix: &MixCoefficients) -> Result<Var> {
    check_labels(labels, mix)?;
    for &l in &mix.lambda {
        check_lambda(l)?;
    }
    let shape = tape.shape(bounds.center).to_vec();
    let to_lower = row_coefficients(&shape, labels, |k| if mix.nu[k] { 0.0 } else { mix.lambda[k] })?;
    let to_upper = row_coefficients(&shape, labels, |k| if mix.nu[k] { mix.lambda[k] } else { 0.0 })?;
    let dl = tape.sub(bounds.lower, bounds.center)?;
    let dl = tape.mul_const(dl, to_lower)?;
    let du = tape.sub(bounds.upper, bounds.center)?;
    let du = tape.mul_const(du, to_upper)?;
    let h = tape.add(bounds.center, dl)?;
    tape.add(h, du)
}

/// `(1 − λ_k)·a + λ_k·b` row by row, with `k` the label of `a`'s row.
pub fn mix_rows_on(tape: &mut Tape, a: Var, b: Var, labels: &[usize], mix: &MixCoefficients) -> Result<Var> {
    check_labels(labels, mix)?;
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape("mixup pair", tape.shape(a), tape.shape(b)));
    }
    let shape = tape.shape(a).to_vec();
    let lam = row_coefficients(&shape, labels, |k| mix.lambda[k])?;
    let d = tape.sub(b, a)?;
    let d = tape.mul_const(d, lam)?;
    tape.add(a, d)
}

fn check_pair(a: &LabeledSet, b: &LabeledSet) -> Result<()> {
    if a.x.shape() != b.x.shape() {
        return Err(Error::shape("mixup pair task", a.x.shape(), b.x.shape()));
    }
    Ok(())
}

/// Embedding-space instances of one half of an artificial task.
pub fn interpolated_set_on(
    tape: &mut Tape,
    network: &Network,
    params: &[Var],
    set: &LabeledSet,
    pair: Option<&LabeledSet>,
    epsilon: f64,
    mode: InterpolationMode,
    mix: &MixCoefficients,
) -> Result<Var> {
    match mode {
        InterpolationMode::Ibpi | InterpolationMode::IbpiNoBoundLoss => {
            let b = prefix_bounds_on(tape, network, params, &set.x, epsilon)?;
            interpolate_on(tape, b, &set.labels, mix)
        }
        InterpolationMode::MixupInput => {
            let other = pair.ok_or_else(|| Error::invalid("mixup_input needs a pair task"))?;
            check_pair(set, other)?;
            let a = tape.constant(network.batch_input(&set.x)?);
            let b = tape.constant(network.batch_input(&other.x)?);
            let x = mix_rows_on(tape, a, b, &set.labels, mix)?;
            network.prefix_on(tape, params, x)
        }
        InterpolationMode::MixupEmbedding => {
            let other = pair.ok_or_else(|| Error::invalid("mixup_embedding needs a pair task"))?;
            check_pair(set, other)?;
            let a = tape.constant(network.batch_input(&set.x)?);
            let b = tape.constant(network.batch_input(&other.x)?);
            let ha = network.prefix_on(tape, params, a)?;
            let hb = network.prefix_on(tape, params, b)?;
            mix_rows_on(tape, ha, hb, &set.labels, mix)
        }
    }
}

/// Artificial task in embedding space; labels are the source task's.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolatedTask {
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    pub mode: InterpolationMode,
}

/// Builds the artificial version of `task` with the network's prefix.
/// Mixup modes pair each instance with the same position of `pair`.
pub fn make_interpolated_task(
    task: &Task,
    network: &Network,
    epsilon: f64,
    mode: InterpolationMode,
    plan: &MixPlan,
    pair: Option<&Task>,
) -> Result<InterpolatedTask> {
    if mode.needs_pair() && pair.is_none() {
        return Err(Error::invalid(format!("{} needs a pair task", mode.name())));
    }
    let mut tape = Tape::new();
    let params = network.bind_constant(&mut tape);
    let s = interpolated_set_on(
        &mut tape,
        network,
        &params,
        &task.support,
        pair.map(|p| &p.support),
        epsilon,
        mode,
        &plan.support,
    )?;
    let q = interpolated_set_on(
        &mut tape,
        network,
        &params,
        &task.query,
        pair.map(|p| &p.query),
        epsilon,
        mode,
        &plan.query,
    )?;
    Ok(InterpolatedTask {
        support: tape.value(s).clone(),
        support_labels: task.support.labels.clone(),
        query: tape.value(q).clone(),
        query_labels: task.query.labels.clone(),
        mode,
    })
}

/// Which tasks of a step get an artificial counterpart: for MAML exactly one
/// uniformly chosen position of the meta-batch, for ProtoNet the single
/// task with probability `probability`.
pub fn should_interpolate<R: Rng + ?Sized>(
    learner: LearnerKind,
    batch: usize,
    probability: f64,
    rng: &mut R,
) -> Result<Vec<bool>> {
    match learner {
        LearnerKind::Maml => {
            if batch == 0 {
                return Err(Error::invalid("meta-batch must hold at least one task"));
            }
            let m = rng.random_range(0..batch);
            Ok((0..batch).map(|i| i == m).collect())
        }
        LearnerKind::ProtoNet => {
            if !(0.0..=1.0).contains(&probability) {
                return Err(Error::invalid(format!("probability must lie in [0, 1], got {probability}")));
            }
            Ok(vec![rng.random_bool(probability)])
        }
    }
}
