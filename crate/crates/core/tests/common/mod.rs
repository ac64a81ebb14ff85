#![allow(dead_code)]

use ibp_fewshot::interval::{input_box_on, layer_on};
use ibp_fewshot::tensor::{kernels, LayerSpec, Network, Tape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn normal_tensor<R: Rng>(shape: &[usize], scale: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Which layer kinds a random network may draw.
#[derive(Clone, Copy)]
pub enum Kind {
    Affine,
    Conv,
    Relu,
    MaxPool,
}

/// `n_layers` layers drawn from {affine, conv2d, relu, maxpool2d} on an
/// image or flat input. A flatten is inserted before the first affine
/// layer on image activations and does not count as a layer.
pub fn random_layers<R: Rng>(rng: &mut R, n_layers: usize) -> (Vec<usize>, Vec<LayerSpec>) {
    let image = rng.random_bool(0.5);
    let input = if image {
        vec![rng.random_range(1..=2), rng.random_range(4..=6), rng.random_range(4..=6)]
    } else {
        vec![rng.random_range(2..=8)]
    };
    let mut shape = input.clone();
    let mut layers = Vec::new();
    let mut count = 0;
    while count < n_layers {
        let kinds: &[Kind] = if shape.len() == 3 {
            &[Kind::Affine, Kind::Conv, Kind::Relu, Kind::MaxPool]
        } else {
            &[Kind::Affine, Kind::Relu]
        };
        let layer = match kinds[rng.random_range(0..kinds.len())] {
            Kind::Affine => {
                if shape.len() == 3 {
                    layers.push(LayerSpec::Flatten);
                    shape = LayerSpec::Flatten.output_shape(&shape).unwrap();
                }
                LayerSpec::Linear {
                    inputs: shape[0],
                    outputs: rng.random_range(2..=8),
                }
            }
            Kind::Conv => {
                let kernel = rng.random_range(1..=3usize.min(shape[1]).min(shape[2]));
                LayerSpec::Conv2d {
                    in_channels: shape[0],
                    out_channels: rng.random_range(1..=3),
                    kernel,
                    stride: rng.random_range(1..=2),
                    padding: rng.random_range(0..=1),
                }
            }
            Kind::Relu => LayerSpec::Relu,
            Kind::MaxPool => {
                if shape[1] < 2 || shape[2] < 2 {
                    continue;
                }
                LayerSpec::MaxPool2d {
                    window: [2, 2],
                    stride: [rng.random_range(1..=2), rng.random_range(1..=2)],
                }
            }
        };
        shape = layer.output_shape(&shape).unwrap();
        layers.push(layer);
        count += 1;
    }
    (input, layers)
}

/// Seeded parameters with the biases and weights redrawn from N(0, 0.5²)
/// so that relu and maxpool see both signs.
pub fn randomize<R: Rng>(network: &mut Network, rng: &mut R) {
    for p in network.params_mut() {
        *p = normal_tensor(p.shape(), 0.5, rng);
    }
}

/// Keeps the fan-in scaled weights and redraws biases from N(0, scale²).
pub fn redraw_biases<R: Rng>(network: &mut Network, scale: f64, rng: &mut R) {
    let ranges: Vec<_> = (0..network.layers().len())
        .filter(|&l| network.param_range(l).len() == 2)
        .map(|l| network.param_range(l).start + 1)
        .collect();
    for i in ranges {
        let p = &mut network.params_mut()[i];
        *p = normal_tensor(p.shape(), scale, rng);
    }
}

/// Which side of every kink the forward pass and the box propagation of
/// layers `[0, upto)` sit on: relu input signs, pooling argmaxes, and the
/// signs of the weights that the bound rules split.
pub fn kink_signature(network: &Network, x: &Tensor, epsilon: f64, upto: usize) -> Vec<usize> {
    let mut tape = Tape::new();
    let params = network.bind_constant(&mut tape);
    let mut b = input_box_on(&mut tape, x, epsilon).unwrap();
    let mut sig = Vec::new();
    for l in 0..upto {
        let layer = &network.layers()[l];
        let p = &params[network.param_range(l)];
        let all = [b.center, b.lower, b.upper];
        match layer {
            LayerSpec::Relu => {
                for v in all {
                    sig.extend(tape.value(v).data().iter().map(|z| (*z > 0.0) as usize));
                }
            }
            LayerSpec::MaxPool2d { window, stride } => {
                for v in all {
                    sig.extend(kernels::maxpool2d(tape.value(v), *window, *stride).unwrap().1);
                }
            }
            LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. } => {
                sig.extend(tape.value(p[0]).data().iter().map(|w| (*w > 0.0) as usize));
            }
            _ => {}
        }
        b = layer_on(&mut tape, layer, p, b).unwrap();
    }
    sig
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares `grads[k]` with central differences of output `k` of `f` over
/// every parameter coordinate. `f` also returns a kink signature;
/// coordinates whose two probes land on a different signature than the
/// base point are skipped, since the difference quotient there spans a
/// kink.
pub fn fd_check<F>(params: &[Tensor], grads: &[Vec<Tensor>], step: f64, floor: f64, f: F) -> FdReport
where
    F: Fn(&[Tensor]) -> (Vec<f64>, Vec<usize>),
{
    let base = f(params).1;
    let mut report = FdReport::default();
    let mut work = params.to_vec();
    for (i, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let v = p.data()[j];
            work[i] = with_entry(p, j, v + step);
            let (up, s_up) = f(&work);
            work[i] = with_entry(p, j, v - step);
            let (down, s_down) = f(&work);
            work[i] = p.clone();
            if s_up != base || s_down != base {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            for (k, g) in grads.iter().enumerate() {
                let numeric = (up[k] - down[k]) / (2.0 * step);
                report.worst = report.worst.max(rel_err(g[i].data()[j], numeric, floor));
            }
        }
    }
    report
}

pub fn with_entry(t: &Tensor, j: usize, v: f64) -> Tensor {
    let mut d = t.data().to_vec();
    d[j] = v;
    Tensor::new(t.shape().to_vec(), d).unwrap()
}
