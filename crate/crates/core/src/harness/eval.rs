//! Episode-level evaluation, representation compactness and transfer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episodes::{sample_task, Dataset, Task, TaskSpec};
use crate::error::{Error, Result};
use crate::interval::task_bounds;
use crate::learners::{predict_accuracy, EvalSettings};
use crate::tensor::{Network, Tensor};

/// Mean accuracy over evaluation tasks with its 95% half-width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub mean: f64,
    pub ci95: f64,
    pub n_tasks: usize,
}

/// Mean and `1.96 · s / √n` with `s` the sample standard deviation; the
/// half-width is zero when `n = 1`.
pub fn mean_ci95(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("no values to summarize"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    Ok((mean, 1.96 * sample_std(values, mean) / n.sqrt()))
}

fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Random stream of evaluation task `index`; independent of thread count
/// and of every other task.
pub fn task_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Evaluation task `index` of a run seeded with `seed`.
pub fn eval_task(dataset: &Dataset, spec: TaskSpec, seed: u64, index: usize) -> Result<Task> {
    sample_task(dataset, spec, &mut task_rng(seed, index))
}

/// Applies `f` to each of `n_tasks` evaluation tasks in parallel and
/// returns results in task order.
pub fn map_tasks<T, F>(dataset: &Dataset, spec: TaskSpec, n_tasks: usize, seed: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Task) -> Result<T> + Sync,
{
    spec.validate()?;
    if n_tasks == 0 {
        return Err(Error::invalid("need at least one evaluation task"));
    }
    (0..n_tasks)
        .into_par_iter()
        .map(|i| f(&eval_task(dataset, spec, seed, i)?))
        .collect()
}

pub fn evaluate(
    network: &Network,
    settings: &EvalSettings,
    dataset: &Dataset,
    spec: TaskSpec,
    n_tasks: usize,
    seed: u64,
) -> Result<AccuracyRecord> {
    check_shape(network, dataset)?;
    let acc = map_tasks(dataset, spec, n_tasks, seed, |t| predict_accuracy(settings, network, t))?;
    let (mean, ci95) = mean_ci95(&acc)?;
    Ok(AccuracyRecord { mean, ci95, n_tasks })
}

fn check_shape(network: &Network, dataset: &Dataset) -> Result<()> {
    if network.input_shape() != dataset.instance_shape() {
        return Err(Error::shape("dataset instances vs network input", network.input_shape(), dataset.instance_shape()));
    }
    Ok(())
}

/// Evaluates a network trained on one pool on another pool with the
/// standard protocol; the network itself is not retrained.
pub fn transfer_eval(
    network: &Network,
    settings: &EvalSettings,
    target: &Dataset,
    spec: TaskSpec,
    n_tasks: usize,
    seed: u64,
) -> Result<AccuracyRecord> {
    evaluate(network, settings, target, spec, n_tasks, seed)
}

/// Mean Euclidean distance from each row to its nearest other row with the
/// same label.
pub fn nearest_same_class_distance(embeddings: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if embeddings.rows() != n {
        return Err(Error::shape("embeddings vs labels", &[n], embeddings.shape()));
    }
    let d = embeddings.len() / n.max(1);
    let x = embeddings.data();
    let mut total = 0.0;
    for i in 0..n {
        let mut best = f64::INFINITY;
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                let sq: f64 = (0..d).map(|k| (x[i * d + k] - x[j * d + k]).powi(2)).sum();
                best = best.min(sq);
            }
        }
        if best.is_infinite() {
            return Err(Error::Insufficient(format!("instance {i} has no same-class neighbour")));
        }
        total += best.sqrt();
    }
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompactnessRecord {
    pub mean: f64,
    pub std: f64,
    pub n_tasks: usize,
}

/// Per task, the query instances are embedded through the prefix and
/// reduced to their mean nearest same-class distance; the record holds
/// the mean and sample standard deviation over tasks.
pub fn compactness(network: &Network, dataset: &Dataset, spec: TaskSpec, n_tasks: usize, seed: u64) -> Result<CompactnessRecord> {
    check_shape(network, dataset)?;
    if spec.queries < 2 {
        return Err(Error::Insufficient("compactness needs at least two queries per class".into()));
    }
    let per_task = map_tasks(dataset, spec, n_tasks, seed, |t| {
        let e = network.embed(&network.batch_input(&t.query.x)?)?;
        nearest_same_class_distance(&e, &t.query.labels)
    })?;
    let (mean, _) = mean_ci95(&per_task)?;
    Ok(CompactnessRecord {
        mean,
        std: sample_std(&per_task, mean),
        n_tasks,
    })
}

/// Average box width at layer `S` over the query instances of evaluation
/// tasks, with the batch of each task's queries providing batchnorm
/// statistics.
pub fn mean_box_width(network: &Network, dataset: &Dataset, spec: TaskSpec, n_tasks: usize, epsilon: f64, seed: u64) -> Result<f64> {
    check_shape(network, dataset)?;
    let widths = map_tasks(dataset, spec, n_tasks, seed, |t| {
        let b = task_bounds(network, &t.query.x, epsilon)?;
        Ok(b.iter().map(|r| r.bounds.mean_width()).sum::<f64>() / b.len() as f64)
    })?;
    Ok(widths.iter().sum::<f64>() / widths.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{synth_dataset, Role, SynthSpec};
    use crate::learners::EvalSettings;
    use crate::tensor::LayerSpec;

    fn identity_net(d: usize) -> Network {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        let layers = vec![LayerSpec::Linear { inputs: d, outputs: d }];
        Network::from_parts(vec![d], layers, 1, vec![Tensor::new(vec![d, d], w).unwrap(), Tensor::zeros(&[d])]).unwrap()
    }

    #[test]
    fn ci_conventions() {
        assert_eq!(mean_ci95(&[0.4]).unwrap(), (0.4, 0.0));
        let (m, c) = mean_ci95(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        assert!((c - 1.96 * 0.5f64.sqrt() / 2f64.sqrt()).abs() < 1e-15);
        assert!(mean_ci95(&[]).is_err());
    }

    #[test]
    fn separable_pool_is_perfect() {
        let d = synth_dataset(&SynthSpec::new(8, 20, vec![4], 20.0, 0.01, 2), Role::Test).unwrap();
        let r = evaluate(&identity_net(4), &EvalSettings::protonet(), &d, TaskSpec::new(5, 1, 5).unwrap(), 50, 0).unwrap();
        assert_eq!((r.mean, r.ci95), (1.0, 0.0));
    }

    #[test]
    fn nn_distance_pair() {
        let e = Tensor::matrix(&[&[0.0, 0.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(nearest_same_class_distance(&e, &[0, 0]).unwrap(), 5.0);
        assert!(nearest_same_class_distance(&e, &[0, 1]).is_err());
        let same = Tensor::matrix(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]).unwrap();
        assert_eq!(nearest_same_class_distance(&same, &[2, 2, 2]).unwrap(), 0.0);
    }

    #[test]
    fn transfer_to_self_equals_evaluate() {
        let d = synth_dataset(&SynthSpec::new(8, 10, vec![4], 1.0, 1.0, 5), Role::Test).unwrap();
        let spec = TaskSpec::new(3, 1, 3).unwrap();
        let net = identity_net(4);
        let a = evaluate(&net, &EvalSettings::protonet(), &d, spec, 40, 7).unwrap();
        let b = transfer_eval(&net, &EvalSettings::protonet(), &d, spec, 40, 7).unwrap();
        assert_eq!(a, b);
        let other = synth_dataset(&SynthSpec::new(8, 10, vec![5], 1.0, 1.0, 5), Role::Test).unwrap();
        assert!(transfer_eval(&net, &EvalSettings::protonet(), &other, spec, 40, 7).is_err());
    }

    #[test]
    fn results_do_not_depend_on_threads() {
        let d = synth_dataset(&SynthSpec::new(8, 10, vec![4], 1.0, 1.0, 6), Role::Test).unwrap();
        let spec = TaskSpec::new(3, 1, 3).unwrap();
        let net = identity_net(4);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| evaluate(&net, &EvalSettings::protonet(), &d, spec, 64, 1).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn compactness_needs_pairs() {
        let d = synth_dataset(&SynthSpec::new(8, 10, vec![4], 1.0, 1.0, 6), Role::Test).unwrap();
        let net = identity_net(4);
        assert!(compactness(&net, &d, TaskSpec::new(3, 1, 1).unwrap(), 5, 0).is_err());
        let r = compactness(&net, &d, TaskSpec::new(3, 1, 4).unwrap(), 5, 0).unwrap();
        assert!(r.mean > 0.0 && r.std >= 0.0);
    }
}
