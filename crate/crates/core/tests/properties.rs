//! Property tests over randomly drawn networks, losses and tasks.

mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{normal_tensor, random_layers, randomize};
use ibp_fewshot::episodes::{sample_task, synth_dataset, Dataset, Role, SynthSpec, Task, TaskSpec};
use ibp_fewshot::ibpi::{interpolate, make_interpolated_task, InterpolationMode, MixCoefficients, MixPlan};
use ibp_fewshot::interval::{propagate_layer, propagate_prefix, task_bounds, IntervalTensor};
use ibp_fewshot::learners::{argmax, compute_prototypes, maml_adapt, protonet_probs, softmax_neg, Distance, InnerLoop};
use ibp_fewshot::objective::{dynamic_weights, epsilon_schedule, LossTriple};
use ibp_fewshot::tensor::{Checkpoint, LayerSpec, Network, Tensor};

fn random_network(seed: u64, max_layers: usize) -> (Network, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_layers);
    let (input, layers) = random_layers(&mut rng, n);
    let split = layers.len();
    let mut net = Network::new(input, layers, split, &mut rng).unwrap();
    randomize(&mut net, &mut rng);
    (net, rng)
}

/// Conv block with batchnorm followed by a linear embedding.
fn bn_network(seed: u64) -> (Network, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::conv([1, 6, 6], 3, 1, Some(4), 1, &mut rng).unwrap();
    let n = net.layers().len();
    net = net.with_split(n).unwrap();
    (net, rng)
}

fn batch(net: &Network, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut shape = vec![n];
    shape.extend_from_slice(net.input_shape());
    normal_tensor(&shape, 1.0, rng)
}

fn pool(seed: u64) -> Dataset {
    let mut s = SynthSpec::new(8, 12, vec![6], 1.5, 1.0, seed);
    s.informative_dims = Some(4);
    synth_dataset(&s, Role::Train).unwrap()
}

fn embed_net(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Network::mlp(6, &[8], 5, 1, &mut rng).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn boxes_grow_with_epsilon(seed in any::<u64>(), e1 in 0.0..0.5f64, e2 in 0.0..0.5f64, with_bn in any::<bool>()) {
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let (net, mut rng) = if with_bn { bn_network(seed) } else { random_network(seed, 4) };
        let x = batch(&net, 3, &mut rng);
        let small = task_bounds(&net, &x, lo).unwrap();
        let large = task_bounds(&net, &x, hi).unwrap();
        for (a, b) in small.iter().zip(&large) {
            prop_assert!(a.bounds.is_within(&b.bounds, 1e-12));
            prop_assert_eq!(a.center.data(), b.center.data());
        }
    }

    #[test]
    fn zero_epsilon_has_zero_width(seed in any::<u64>(), with_bn in any::<bool>()) {
        let (net, mut rng) = if with_bn { bn_network(seed) } else { random_network(seed, 4) };
        let x = batch(&net, 3, &mut rng);
        for r in task_bounds(&net, &x, 0.0).unwrap() {
            prop_assert_eq!(r.bounds.lower().data(), r.bounds.upper().data());
            prop_assert_eq!(r.bounds.mean_width(), 0.0);
        }
    }

    #[test]
    fn perturbed_outputs_stay_in_the_box(seed in any::<u64>(), eps in 0.0..0.5f64) {
        let (net, mut rng) = random_network(seed, 4);
        let x = normal_tensor(net.input_shape(), 1.0, &mut rng);
        let r = propagate_prefix(&net, &x, eps).unwrap();
        prop_assert!(r.bounds.contains(&r.center, 1e-9));
        let mut points = Vec::new();
        for _ in 0..32 {
            let noise: Vec<f64> = (0..x.len()).map(|_| if eps > 0.0 { rng.random_range(-eps..=eps) } else { 0.0 }).collect();
            points.push(x.add(&Tensor::new(x.shape().to_vec(), noise).unwrap()).unwrap());
        }
        let out = net.forward(&Tensor::stack(&points).unwrap()).unwrap();
        for i in 0..points.len() {
            prop_assert!(r.bounds.contains(&out.row(i).unwrap(), 1e-9));
        }
    }

    #[test]
    fn relu_and_pool_faces_are_attained(seed in any::<u64>(), w in 0.0..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lower = normal_tensor(&[2, 4, 4], 1.0, &mut rng);
        let upper = lower.map(|v| v + w);
        let input = IntervalTensor::new(lower.clone(), upper.clone()).unwrap();
        let pool = LayerSpec::MaxPool2d { window: [2, 2], stride: [2, 2] };
        for layer in [LayerSpec::Relu, pool] {
            let out = propagate_layer(&layer, &[], &input).unwrap();
            let at = |x: &Tensor| ibp_fewshot::tensor::forward(std::slice::from_ref(&layer), &[], &x.reshape(&[1, 2, 4, 4]).unwrap(), None).unwrap();
            prop_assert!(at(&lower).data() == out.lower().data());
            prop_assert!(at(&upper).data() == out.upper().data());
        }
    }

    #[test]
    fn dynamic_weights_lie_on_the_simplex(l in prop::array::uniform3(0.0..1e3f64), gamma in 1e-2..1e2f64, shift in -50.0..50.0f64) {
        let w = dynamic_weights(&LossTriple::new(l[0], l[1], l[2]).unwrap(), gamma).unwrap().as_array();
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let moved = LossTriple::new(l[0] + shift + 100.0, l[1] + shift + 100.0, l[2] + shift + 100.0).unwrap();
        let v = dynamic_weights(&moved, gamma).unwrap().as_array();
        for (a, b) in w.iter().zip(&v) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn weight_grows_with_its_own_loss(l in prop::array::uniform3(0.0..10.0f64), gamma in 0.2..10.0f64, delta in 0.01..5.0f64, e in 0usize..3) {
        let before = dynamic_weights(&LossTriple::new(l[0], l[1], l[2]).unwrap(), gamma).unwrap().as_array();
        let mut m = l;
        m[e] += delta;
        let after = dynamic_weights(&LossTriple::new(m[0], m[1], m[2]).unwrap(), gamma).unwrap().as_array();
        prop_assert!(after[e] > before[e]);
    }

    #[test]
    fn schedule_is_monotone_and_continuous(total in 1usize..3000, eps in 0.0..1.0f64) {
        let step = eps / (0.9 * total as f64);
        let mut prev = epsilon_schedule(0, total, eps).unwrap();
        prop_assert_eq!(prev, 0.0);
        for t in 1..=total {
            let e = epsilon_schedule(t, total, eps).unwrap();
            prop_assert!(e >= prev);
            prop_assert!(e - prev <= step * (1.0 + 1e-12));
            prev = e;
        }
        prop_assert_eq!(prev, eps);
    }

    #[test]
    fn probabilities_ignore_a_common_distance_shift(d in prop::collection::vec(0.0..50.0f64, 2..8), c in -100.0..100.0f64) {
        let p = softmax_neg(&d);
        let shifted: Vec<f64> = d.iter().map(|v| v + c).collect();
        for (a, b) in p.iter().zip(softmax_neg(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn most_probable_class_is_the_nearest_prototype(seed in any::<u64>(), ways in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = normal_tensor(&[2 * ways, 4], 1.0, &mut rng);
        let labels: Vec<usize> = (0..2 * ways).map(|i| i % ways).collect();
        let protos = compute_prototypes(&emb, &labels, ways).unwrap();
        for _ in 0..10 {
            let q = normal_tensor(&[4], 1.5, &mut rng);
            let p = protonet_probs(&q, &protos, Distance::SquaredEuclidean).unwrap();
            let d: Vec<f64> = (0..ways)
                .map(|k| {
                    let c = protos.centers().row(k).unwrap();
                    q.data().iter().zip(c.data()).map(|(a, b)| (a - b) * (a - b)).sum()
                })
                .collect();
            let nearest = (0..ways).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
            prop_assert_eq!(argmax(&p), nearest);
        }
    }

    #[test]
    fn adaptation_steps_compose(seed in any::<u64>(), s1 in 0usize..4, s2 in 0usize..4, lr in 0.0..0.5f64) {
        let data = pool(seed % 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let task = sample_task(&data, TaskSpec::new(5, 2, 2).unwrap(), &mut rng).unwrap();
        let net = embed_net(seed);
        let step = |n: usize| InnerLoop { lr, steps: n, first_order: true };
        let whole = maml_adapt(&net, &task.support, &step(s1 + s2)).unwrap();
        let half = net.with_params(maml_adapt(&net, &task.support, &step(s1)).unwrap()).unwrap();
        let parts = maml_adapt(&half, &task.support, &step(s2)).unwrap();
        for (a, b) in whole.iter().zip(&parts) {
            prop_assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn interpolation_uses_one_coefficient_per_class(seed in any::<u64>(), eps in 0.0..0.5f64, shared in any::<bool>()) {
        let data = pool(seed % 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let task = sample_task(&data, TaskSpec::new(5, 2, 3).unwrap(), &mut rng).unwrap();
        let net = embed_net(seed);
        let plan = MixPlan::sample(5, 0.5, 0.5, shared, &mut rng).unwrap();
        if shared {
            prop_assert_eq!(&plan.support, &plan.query);
        }
        let it = make_interpolated_task(&task, &net, eps, InterpolationMode::Ibpi, &plan, None).unwrap();
        for (set, h, mix) in [(&task.support, &it.support, &plan.support), (&task.query, &it.query, &plan.query)] {
            let boxes = task_bounds(&net, &set.x, eps).unwrap();
            for (i, (b, &k)) in boxes.iter().zip(&set.labels).enumerate() {
                let expect = interpolate(&b.center, &b.bounds, mix.lambda[k], mix.nu[k]).unwrap();
                let row = h.row(i).unwrap();
                prop_assert_eq!(row.data(), expect.data());
                prop_assert!(b.bounds.contains(&row, 1e-9));
            }
        }
    }

    #[test]
    fn zero_draw_mixup_is_identity(seed in any::<u64>(), eps in 0.0..0.5f64) {
        let data = pool(seed % 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = TaskSpec::new(5, 1, 2).unwrap();
        let (task, pair) = (sample_task(&data, spec, &mut rng).unwrap(), sample_task(&data, spec, &mut rng).unwrap());
        let net = embed_net(seed);
        let zero = MixPlan::shared(MixCoefficients::uniform(5, 0.0, rng.random_bool(0.5)).unwrap());
        for mode in [InterpolationMode::MixupInput, InterpolationMode::MixupEmbedding] {
            let it = make_interpolated_task(&task, &net, eps, mode, &zero, Some(&pair)).unwrap();
            prop_assert!(it.support == net.embed(&task.support.x).unwrap());
            prop_assert!(it.query == net.embed(&task.query.x).unwrap());
        }
    }

    #[test]
    fn sampled_tasks_are_disjoint_and_relabelled(seed in any::<u64>(), ways in 2usize..8, shots in 1usize..4, queries in 1usize..5) {
        let data = pool(seed % 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let task: Task = sample_task(&data, TaskSpec::new(ways, shots, queries).unwrap(), &mut rng).unwrap();
        let s: BTreeSet<_> = task.support.sources.iter().collect();
        let q: BTreeSet<_> = task.query.sources.iter().collect();
        prop_assert_eq!(s.len(), ways * shots);
        prop_assert_eq!(q.len(), ways * queries);
        prop_assert!(s.is_disjoint(&q));
        let ids: BTreeSet<_> = task.classes.iter().collect();
        prop_assert_eq!(ids.len(), ways);
        for set in [&task.support, &task.query] {
            for (src, &l) in set.sources.iter().zip(&set.labels) {
                prop_assert_eq!(task.classes[l], src.0);
            }
        }
        for k in 0..ways {
            prop_assert_eq!(task.support.labels.iter().filter(|&&l| l == k).count(), shots);
            prop_assert_eq!(task.query.labels.iter().filter(|&&l| l == k).count(), queries);
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>()) {
        let (net, _) = random_network(seed, 4);
        let mut ck = Checkpoint::new(net);
        ck.meta = serde_json::json!({ "seed": seed });
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &ck);
        for (a, b) in back.network.params().iter().zip(ck.network.params()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn interpolation_spread_grows_with_epsilon(seed in any::<u64>(), e1 in 0.0..0.4f64, e2 in 0.0..0.4f64) {
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let data = pool(seed % 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let task = sample_task(&data, TaskSpec::new(5, 1, 2).unwrap(), &mut rng).unwrap();
        let net = embed_net(seed);
        let plans: Vec<MixPlan> = (0..64).map(|_| MixPlan::sample(5, 0.5, 0.5, true, &mut rng).unwrap()).collect();
        let centers = net.embed(&task.support.x).unwrap();
        let spread = |eps: f64| {
            let mut v = Vec::new();
            for plan in &plans {
                let it = make_interpolated_task(&task, &net, eps, InterpolationMode::Ibpi, plan, None).unwrap();
                v.extend(it.support.sub(&centers).unwrap().data().iter().copied());
            }
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
        };
        prop_assert!(spread(hi) >= spread(lo));
    }
}
