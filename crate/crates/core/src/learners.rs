//! Prototype-based metric learning and gradient-based meta-learning.

use serde::{Deserialize, Serialize};

use crate::episodes::{LabeledSet, Task};
use crate::error::{Error, Result};
use crate::tensor::{Network, Optimizer, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    #[serde(alias = "protonet")]
    ProtoNet,
    Maml,
}

/// Distance between embeddings and prototypes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

/// Per-class mean embeddings, `[ways, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    centers: Tensor,
}

impl Prototypes {
    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn ways(&self) -> usize {
        self.centers.shape()[0]
    }
}

/// Averaging matrix `A[k, r] = 1/|class k|` for rows labelled `k`.
fn class_means_matrix(labels: &[usize], ways: usize) -> Result<Tensor> {
    let mut counts = vec![0usize; ways];
    for &l in labels {
        if l >= ways {
            return Err(Error::invalid(format!("label {l} out of range for {ways} ways")));
        }
        counts[l] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("class {k} has no support embedding")));
    }
    let n = labels.len();
    let mut a = vec![0.0; ways * n];
    for (r, &l) in labels.iter().enumerate() {
        a[l * n + r] = 1.0 / counts[l] as f64;
    }
    Ok(Tensor::from_raw(vec![ways, n], a))
}

fn flatten_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() == 2 {
        return Ok(x);
    }
    let n = s.first().copied().unwrap_or(1);
    tape.reshape(x, &[n, s[1..].iter().product()])
}

/// Class prototypes from batched embeddings `[n, ...]`, as a `[ways, d]`
/// node.
pub fn prototypes_on(tape: &mut Tape, embeddings: Var, labels: &[usize], ways: usize) -> Result<Var> {
    let e = flatten_rows(tape, embeddings)?;
    if tape.shape(e)[0] != labels.len() {
        return Err(Error::shape("prototype labels", &[labels.len()], tape.shape(e)));
    }
    let a = class_means_matrix(labels, ways)?;
    let a = tape.constant(a);
    tape.matmul(a, e)
}

pub fn compute_prototypes(embeddings: &Tensor, labels: &[usize], ways: usize) -> Result<Prototypes> {
    let mut tape = Tape::new();
    let e = tape.constant(embeddings.clone());
    let p = prototypes_on(&mut tape, e, labels, ways)?;
    Ok(Prototypes {
        centers: tape.value(p).clone(),
    })
}

/// Pairwise distances `[m, k]` between query rows and prototype rows.
pub fn distances_on(tape: &mut Tape, queries: Var, prototypes: Var, metric: Distance) -> Result<Var> {
    let q = flatten_rows(tape, queries)?;
    let (m, d) = (tape.shape(q)[0], tape.shape(q)[1]);
    let ps = tape.shape(prototypes).to_vec();
    if ps.len() != 2 || ps[1] != d {
        return Err(Error::shape("prototype dimension", &[ps.first().copied().unwrap_or(0), d], &ps));
    }
    let k = ps[0];
    let qsq = tape.square(q)?;
    let qn = tape.row_sum(qsq)?;
    let qn = tape.expand_cols(qn, k)?;
    let psq = tape.square(prototypes)?;
    let pn = tape.row_sum(psq)?;
    let pn = tape.channel_expand(pn, &[m, k])?;
    let pt = tape.transpose(prototypes)?;
    let cross = tape.matmul(q, pt)?;
    let cross = tape.scale(cross, -2.0)?;
    let s = tape.add(qn, pn)?;
    let sq = tape.add(s, cross)?;
    // cancellation can leave tiny negatives
    let sq = tape.relu(sq)?;
    match metric {
        Distance::SquaredEuclidean => Ok(sq),
        Distance::Euclidean => tape.sqrt(sq),
    }
}

/// Negative distances, i.e. the logits of the prototype classifier.
pub fn protonet_logits_on(tape: &mut Tape, queries: Var, prototypes: Var, metric: Distance) -> Result<Var> {
    let d = distances_on(tape, queries, prototypes, metric)?;
    tape.neg(d)
}

/// Softmax over negative distances from one query embedding to every
/// prototype, with max shift.
pub fn protonet_probs(query: &Tensor, prototypes: &Prototypes, metric: Distance) -> Result<Vec<f64>> {
    let c = prototypes.centers();
    let d = c.shape()[1];
    if query.len() != d {
        return Err(Error::shape("query embedding", &[d], query.shape()));
    }
    let dists: Vec<f64> = (0..prototypes.ways())
        .map(|k| {
            let sq: f64 = query
                .data()
                .iter()
                .zip(&c.data()[k * d..(k + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            match metric {
                Distance::SquaredEuclidean => sq,
                Distance::Euclidean => sq.sqrt(),
            }
        })
        .collect();
    Ok(softmax_neg(&dists))
}

/// `softmax(-d)` with max shift.
pub fn softmax_neg(dists: &[f64]) -> Vec<f64> {
    let lo = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = dists.iter().map(|d| (-(d - lo)).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean cross-entropy of `[m, k]` logits against labels.
pub fn cross_entropy_on(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape("cross_entropy logits", &[labels.len(), 0], &shape));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::invalid(format!("label {bad} out of range for {} classes", shape[1])));
    }
    let ls = tape.log_softmax(logits)?;
    let picked = tape.pick(ls, labels)?;
    let m = tape.mean(picked)?;
    tape.neg(m)
}

/// Mean `−ln p[label]` over rows of probabilities.
pub fn cross_entropy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::invalid("cross_entropy needs one label per probability row"));
    }
    let mut total = 0.0;
    for (p, &l) in probs.iter().zip(labels) {
        let v = *p
            .get(l)
            .ok_or_else(|| Error::invalid(format!("label {l} out of range for {} classes", p.len())))?;
        total -= v.ln();
    }
    let out = total / labels.len() as f64;
    if !out.is_finite() {
        return Err(Error::NonFinite("cross_entropy".into()));
    }
    Ok(out)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    correct as f64 / labels.len() as f64
}

/// Support prototypes (through the full network) and query logits for a
/// ProtoNet episode.
pub fn protonet_episode_on(
    tape: &mut Tape,
    network: &Network,
    params: &[Var],
    task: &Task,
    metric: Distance,
) -> Result<(Var, Var)> {
    let sx = tape.constant(network.batch_input(&task.support.x)?);
    let se = network.forward_on(tape, params, sx)?;
    let protos = prototypes_on(tape, se, &task.support.labels, task.ways())?;
    let qx = tape.constant(network.batch_input(&task.query.x)?);
    let qe = network.forward_on(tape, params, qx)?;
    let logits = protonet_logits_on(tape, qe, protos, metric)?;
    Ok((protos, logits))
}

/// Inner-loop settings: `steps` full-batch gradient-descent updates with
/// rate `lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerLoop {
    pub lr: f64,
    pub steps: usize,
    pub first_order: bool,
}

impl Default for InnerLoop {
    fn default() -> Self {
        InnerLoop {
            lr: 0.01,
            steps: 5,
            first_order: true,
        }
    }
}

/// Task-adapted parameters `φ` on a tape.
#[derive(Clone, Debug)]
pub struct AdaptedParams {
    pub params: Vec<Var>,
    /// Gradient steps taken from the originating parameters.
    pub steps: usize,
    /// Whether `params` stay connected to the originating parameters.
    pub connected: bool,
}

/// Runs the inner loop on a tape. `support_loss` builds the scalar loss for
/// a parameter set. With `first_order` each step produces fresh leaves;
/// otherwise the update chain is recorded so that gradients flow back to
/// `theta` through every step.
pub fn adapt_on<F>(
    tape: &mut Tape,
    network: &Network,
    theta: &[Var],
    inner: &InnerLoop,
    mut support_loss: F,
) -> Result<AdaptedParams>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !inner.first_order && !network.is_dense() {
        return Err(Error::Unsupported(
            "second-order adaptation needs a network of linear and relu layers only".into(),
        ));
    }
    let mut phi = theta.to_vec();
    for _ in 0..inner.steps {
        if inner.lr == 0.0 {
            break;
        }
        let loss = support_loss(tape, &phi)?;
        let grads = tape.grad(loss, &phi)?;
        phi = if inner.first_order {
            phi.iter()
                .zip(&grads)
                .map(|(&p, &g)| {
                    let next = tape.value(p).sub(&tape.value(g).scale(inner.lr))?;
                    next.ensure_finite("inner-loop update")?;
                    Ok(tape.param(next))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            phi.iter()
                .zip(&grads)
                .map(|(&p, &g)| {
                    let step = tape.scale(g, inner.lr)?;
                    tape.sub(p, step)
                })
                .collect::<Result<Vec<_>>>()?
        };
    }
    Ok(AdaptedParams {
        params: phi,
        steps: inner.steps,
        connected: !inner.first_order,
    })
}

/// Cross-entropy of the full network on a labelled set.
pub fn classifier_loss_on(tape: &mut Tape, network: &Network, params: &[Var], set: &LabeledSet) -> Result<Var> {
    let x = tape.constant(network.batch_input(&set.x)?);
    let logits = network.forward_on(tape, params, x)?;
    cross_entropy_on(tape, logits, &set.labels)
}

/// Adapts the network's parameters to `support` and returns the values of
/// `φ`.
pub fn maml_adapt(network: &Network, support: &LabeledSet, inner: &InnerLoop) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let theta = network.bind(&mut tape);
    let phi = adapt_on(&mut tape, network, &theta, inner, |t, p| {
        classifier_loss_on(t, network, p, support)
    })?;
    Ok(phi.params.iter().map(|&v| tape.value(v).clone()).collect())
}

/// Per-task losses for the meta-update.
pub trait MamlObjective {
    /// Loss minimized by the inner loop.
    fn support_loss(&mut self, tape: &mut Tape, network: &Network, params: &[Var], task: &Task, index: usize) -> Result<Var>;

    /// Loss on the query set, given the meta-parameters and their
    /// task-adapted counterpart.
    fn query_loss(
        &mut self,
        tape: &mut Tape,
        network: &Network,
        theta: &[Var],
        adapted: &AdaptedParams,
        task: &Task,
        index: usize,
    ) -> Result<Var>;
}

/// Plain MAML: cross-entropy on support and query.
#[derive(Clone, Copy, Debug, Default)]
pub struct CrossEntropyObjective;

impl MamlObjective for CrossEntropyObjective {
    fn support_loss(&mut self, tape: &mut Tape, network: &Network, params: &[Var], task: &Task, _: usize) -> Result<Var> {
        classifier_loss_on(tape, network, params, &task.support)
    }

    fn query_loss(
        &mut self,
        tape: &mut Tape,
        network: &Network,
        _theta: &[Var],
        adapted: &AdaptedParams,
        task: &Task,
        _: usize,
    ) -> Result<Var> {
        classifier_loss_on(tape, network, &adapted.params, &task.query)
    }
}

/// Meta-gradient of one task: the query loss differentiated with respect
/// to `θ`. In first-order mode the gradient at `φ` is applied to `θ`'s
/// slots as well.
pub fn maml_task_gradient<O: MamlObjective + ?Sized>(
    network: &Network,
    task: &Task,
    index: usize,
    inner: &InnerLoop,
    objective: &mut O,
) -> Result<(Vec<Tensor>, f64)> {
    let mut tape = Tape::new();
    let theta = network.bind(&mut tape);
    let adapted = adapt_on(&mut tape, network, &theta, inner, |t, p| {
        objective.support_loss(t, network, p, task, index)
    })?;
    let loss = objective.query_loss(&mut tape, network, &theta, &adapted, task, index)?;
    let loss_value = tape.value(loss).item()?;
    if !tape.requires_grad(loss) {
        return Ok((network.params().iter().map(|p| Tensor::zeros(p.shape())).collect(), loss_value));
    }
    let mut grads = tape.gradients(loss, &theta)?;
    if !adapted.connected && adapted.params != theta {
        let via_phi = tape.gradients(loss, &adapted.params)?;
        for (g, h) in grads.iter_mut().zip(&via_phi) {
            *g = g.add(h)?;
        }
    }
    Ok((grads, loss_value))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OuterReport {
    pub mean_query_loss: f64,
}

/// One meta-update: per task adapt on support, evaluate the objective on
/// query, average the meta-gradients over the batch and take one optimizer
/// step on `θ`.
pub fn maml_outer_step<O: MamlObjective + ?Sized>(
    network: &mut Network,
    tasks: &[Task],
    inner: &InnerLoop,
    objective: &mut O,
    optimizer: &mut Optimizer,
) -> Result<OuterReport> {
    if tasks.is_empty() {
        return Err(Error::invalid("meta-batch must hold at least one task"));
    }
    let mut sum: Option<Vec<Tensor>> = None;
    let mut loss_sum = 0.0;
    for (i, task) in tasks.iter().enumerate() {
        let (g, l) = maml_task_gradient(network, task, i, inner, objective)?;
        loss_sum += l;
        sum = Some(match sum {
            None => g,
            Some(acc) => acc.iter().zip(&g).map(|(a, b)| a.add(b)).collect::<Result<_>>()?,
        });
    }
    let b = tasks.len() as f64;
    let mean: Vec<Tensor> = sum.expect("nonempty batch").iter().map(|g| g.scale(1.0 / b)).collect();
    optimizer.step(network.params_mut(), &mean)?;
    Ok(OuterReport {
        mean_query_loss: loss_sum / b,
    })
}

/// Test-time settings shared by both learners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub learner: LearnerKind,
    pub distance: Distance,
    pub inner_lr: f64,
    /// Fine-tuning steps on each test task's support set (MAML only).
    pub eval_steps: usize,
}

impl EvalSettings {
    pub fn protonet() -> Self {
        EvalSettings {
            learner: LearnerKind::ProtoNet,
            distance: Distance::SquaredEuclidean,
            inner_lr: 0.01,
            eval_steps: 10,
        }
    }

    pub fn maml() -> Self {
        EvalSettings {
            learner: LearnerKind::Maml,
            ..EvalSettings::protonet()
        }
    }
}

/// Fraction of query instances classified correctly.
pub fn predict_accuracy(settings: &EvalSettings, network: &Network, task: &Task) -> Result<f64> {
    if task.query.is_empty() {
        return Err(Error::invalid("task has an empty query set"));
    }
    if task.support.is_empty() {
        return Err(Error::invalid("task has an empty support set"));
    }
    match settings.learner {
        LearnerKind::ProtoNet => {
            let mut tape = Tape::new();
            let params = network.bind_constant(&mut tape);
            let (_, logits) = protonet_episode_on(&mut tape, network, &params, task, settings.distance)?;
            Ok(accuracy_from_logits(tape.value(logits), &task.query.labels))
        }
        LearnerKind::Maml => {
            let out = network.output_shape();
            if out != [task.ways()] {
                return Err(Error::shape("classifier output vs task ways", &[task.ways()], &out));
            }
            let inner = InnerLoop {
                lr: settings.inner_lr,
                steps: settings.eval_steps,
                first_order: true,
            };
            let phi = maml_adapt(network, &task.support, &inner)?;
            let adapted = network.with_params(phi)?;
            let logits = adapted.forward(&task.query.x)?;
            Ok(accuracy_from_logits(&logits, &task.query.labels))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{sample_task, synth_dataset, Role, SynthSpec, TaskSpec};
    use crate::tensor::LayerSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prototype_means() {
        let e = Tensor::matrix(&[&[0.0, 0.0], &[2.0, 2.0], &[5.0, -1.0]]).unwrap();
        let p = compute_prototypes(&e, &[0, 0, 1], 2).unwrap();
        assert_eq!(p.centers().data(), &[1.0, 1.0, 5.0, -1.0]);
        assert!(compute_prototypes(&e, &[0, 0, 1], 5).is_err());
    }

    #[test]
    fn one_shot_prototype_is_the_embedding() {
        let e = Tensor::matrix(&[&[0.3, -1.2], &[4.0, 0.5]]).unwrap();
        let p = compute_prototypes(&e, &[1, 0], 2).unwrap();
        assert_eq!(p.centers().data(), &[4.0, 0.5, 0.3, -1.2]);
    }

    #[test]
    fn equidistant_query_is_uniform() {
        let c = Tensor::matrix(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]]).unwrap();
        let p = compute_prototypes(&c, &[0, 1, 2, 3], 4).unwrap();
        let probs = protonet_probs(&Tensor::vector(&[0.0, 0.0]).unwrap(), &p, Distance::SquaredEuclidean).unwrap();
        for v in probs {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn far_prototype_probability() {
        let p = softmax_neg(&[0.0, 100.0]);
        let e = (-100.0f64).exp();
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[1] - e / (1.0 + e)).abs() < 1e-50);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = vec![vec![0.2; 5]];
        assert!((cross_entropy(&uniform, &[3]).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&uniform, &[3]).unwrap() - 1.60944).abs() < 1e-5);
        assert_eq!(cross_entropy(&[vec![0.0, 1.0]], &[1]).unwrap(), 0.0);
        let a = -(0.5f64.ln());
        let b = -(0.25f64.ln());
        let m = cross_entropy(&[vec![0.5, 0.5], vec![0.75, 0.25]], &[0, 1]).unwrap();
        assert!((m - (a + b) / 2.0).abs() < 1e-15);
        assert!(cross_entropy(&uniform, &[5]).is_err());
    }

    #[test]
    fn tape_cross_entropy_matches_probabilities() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(&[&[0.1, 2.0, -1.0], &[0.0, 0.0, 0.0]]).unwrap());
        let l = cross_entropy_on(&mut tape, z, &[1, 2]).unwrap();
        let p0 = softmax_neg(&[-0.1, -2.0, 1.0]);
        let expect = cross_entropy(&[p0, vec![1.0 / 3.0; 3]], &[1, 2]).unwrap();
        assert!((tape.value(l).item().unwrap() - expect).abs() < 1e-14);
        assert!(cross_entropy_on(&mut tape, z, &[1, 3]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    fn scalar_model(w: f64) -> Network {
        let layers = vec![LayerSpec::Linear { inputs: 1, outputs: 1 }];
        Network::from_parts(vec![1], layers, 1, vec![Tensor::new(vec![1, 1], vec![w]).unwrap(), Tensor::zeros(&[1])]).unwrap()
    }

    #[test]
    fn one_step_on_squared_loss() {
        // loss (w x - y)^2 with x = 1, y = 0: gradient 2 w x^2 = 2
        let net = scalar_model(1.0);
        let mut tape = Tape::new();
        let theta = net.bind(&mut tape);
        let inner = InnerLoop { lr: 0.1, steps: 1, first_order: true };
        let phi = adapt_on(&mut tape, &net, &theta, &inner, |t, p| {
            let x = t.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
            let y = net.forward_on(t, p, x)?;
            let s = t.square(y)?;
            t.sum(s)
        })
        .unwrap();
        assert!((tape.value(phi.params[0]).item().unwrap() - 0.8).abs() < 1e-15);
    }

    fn small_task(seed: u64) -> (Network, Task) {
        let d = synth_dataset(&SynthSpec::new(6, 10, vec![4], 2.0, 0.5, seed), Role::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = sample_task(&d, TaskSpec::new(3, 2, 3).unwrap(), &mut rng).unwrap();
        (Network::mlp(4, &[5], 3, 1, &mut rng).unwrap(), t)
    }

    #[test]
    fn zero_steps_or_rate_is_identity() {
        let (net, t) = small_task(1);
        for inner in [
            InnerLoop { lr: 0.0, steps: 5, first_order: true },
            InnerLoop { lr: 0.5, steps: 0, first_order: true },
        ] {
            assert_eq!(maml_adapt(&net, &t.support, &inner).unwrap(), net.params());
        }
    }

    #[test]
    fn adaptation_composes() {
        let (net, t) = small_task(2);
        let inner = |steps| InnerLoop { lr: 0.3, steps, first_order: true };
        let direct = maml_adapt(&net, &t.support, &inner(5)).unwrap();
        let mid = net.with_params(maml_adapt(&net, &t.support, &inner(2)).unwrap()).unwrap();
        let chained = maml_adapt(&mid, &t.support, &inner(3)).unwrap();
        assert_eq!(direct, chained);
    }

    #[test]
    fn second_order_rejects_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::conv([1, 4, 4], 2, 1, Some(2), 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let theta = net.bind(&mut tape);
        let inner = InnerLoop { lr: 0.1, steps: 1, first_order: false };
        let r = adapt_on(&mut tape, &net, &theta, &inner, |t, _| Ok(t.constant(Tensor::scalar(0.0))));
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    struct Frozen;
    impl MamlObjective for Frozen {
        fn support_loss(&mut self, t: &mut Tape, n: &Network, p: &[Var], task: &Task, _: usize) -> Result<Var> {
            classifier_loss_on(t, n, p, &task.support)
        }
        fn query_loss(&mut self, t: &mut Tape, _: &Network, _: &[Var], _: &AdaptedParams, _: &Task, _: usize) -> Result<Var> {
            Ok(t.constant(Tensor::scalar(1.5)))
        }
    }

    #[test]
    fn frozen_objective_leaves_theta() {
        let (mut net, t) = small_task(3);
        let before = net.clone();
        let mut opt = Optimizer::adam(0.001);
        maml_outer_step(&mut net, &[t.clone(), t], &InnerLoop::default(), &mut Frozen, &mut opt).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn single_task_batch_is_unaveraged_step() {
        let (net, t) = small_task(4);
        let inner = InnerLoop::default();
        let (g, _) = maml_task_gradient(&net, &t, 0, &inner, &mut CrossEntropyObjective).unwrap();
        let mut manual = net.clone();
        Optimizer::sgd(0.1).step(manual.params_mut(), &g).unwrap();
        let mut stepped = net.clone();
        maml_outer_step(&mut stepped, &[t], &inner, &mut CrossEntropyObjective, &mut Optimizer::sgd(0.1)).unwrap();
        assert_eq!(manual, stepped);
    }

    #[test]
    fn separable_clusters_classify_perfectly() {
        let d = synth_dataset(&SynthSpec::new(5, 20, vec![3], 10.0, 0.01, 8), Role::Test).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layers = vec![LayerSpec::Linear { inputs: 3, outputs: 3 }];
        let id = Tensor::matrix(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap();
        let net = Network::from_parts(vec![3], layers, 1, vec![id, Tensor::zeros(&[3])]).unwrap();
        for _ in 0..20 {
            let t = sample_task(&d, TaskSpec::new(5, 1, 5).unwrap(), &mut rng).unwrap();
            assert_eq!(predict_accuracy(&EvalSettings::protonet(), &net, &t).unwrap(), 1.0);
        }
    }

    #[test]
    fn empty_query_is_an_error() {
        let (net, mut t) = small_task(5);
        t.query.labels.clear();
        t.query.x = Tensor::zeros(&[0, 4]);
        assert!(predict_accuracy(&EvalSettings::protonet(), &net, &t).is_err());
    }
}
