//! Interval bound propagation of axis-aligned boxes through a network
//! prefix.
//!
//! Affine layers use the center/radius form `μ' = Wμ + b`, `ψ' = |W|ψ`
//! with `ψ = (upper − lower) / 2 ≥ 0`. Convolutions split the kernel into
//! positive and negative parts instead, which gives the same box without
//! unrolling the kernel into a matrix. Elementwise monotone layers and max
//! pooling act on each bound separately. Batchnorm is the affine map fixed
//! by the statistics of the center batch.
//!
//! Everything runs on a [`Tape`], so the bounds are differentiable in the
//! network parameters.

use crate::error::{Error, Result};
use crate::tensor::kernels::ConvGeometry;
use crate::tensor::nn::{apply_layer, linear, LayerSpec, Network};
use crate::tensor::{Tape, Tensor, Var};

/// Axis-aligned box `lower ≤ z ≤ upper`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalTensor {
    lower: Tensor,
    upper: Tensor,
}

impl IntervalTensor {
    pub fn new(lower: Tensor, upper: Tensor) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return Err(Error::shape("interval bounds", lower.shape(), upper.shape()));
        }
        lower.ensure_finite("lower bound")?;
        upper.ensure_finite("upper bound")?;
        if lower.data().iter().zip(upper.data()).any(|(l, u)| l > u) {
            return Err(Error::invalid("interval with lower > upper"));
        }
        Ok(IntervalTensor { lower, upper })
    }

    pub fn lower(&self) -> &Tensor {
        &self.lower
    }

    pub fn upper(&self) -> &Tensor {
        &self.upper
    }

    pub fn shape(&self) -> &[usize] {
        self.lower.shape()
    }

    /// `(lower + upper) / 2`.
    pub fn center(&self) -> Tensor {
        self.lower.zip_map(&self.upper, |l, u| 0.5 * (l + u)).expect("same shape")
    }

    /// `(upper − lower) / 2`, never negative.
    pub fn radius(&self) -> Tensor {
        self.lower.zip_map(&self.upper, |l, u| 0.5 * (u - l)).expect("same shape")
    }

    /// Mean of `upper − lower` over coordinates.
    pub fn mean_width(&self) -> f64 {
        self.upper.sub(&self.lower).expect("same shape").mean()
    }

    /// Whether every coordinate of `z` lies in the box, with slack `tol`.
    pub fn contains(&self, z: &Tensor, tol: f64) -> bool {
        z.shape() == self.shape()
            && z.data()
                .iter()
                .zip(self.lower.data().iter().zip(self.upper.data()))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }

    /// Whether `self ⊆ other` coordinatewise, with slack `tol`.
    pub fn is_within(&self, other: &IntervalTensor, tol: f64) -> bool {
        self.shape() == other.shape()
            && self
                .lower
                .data()
                .iter()
                .zip(other.lower.data())
                .all(|(a, b)| *a >= b - tol)
            && self
                .upper
                .data()
                .iter()
                .zip(other.upper.data())
                .all(|(a, b)| *a <= b + tol)
    }
}

/// Ordinary activation at layer `S` together with its box.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundResult {
    pub center: Tensor,
    pub bounds: IntervalTensor,
}

/// Tape handles for a batched center and its box.
#[derive(Clone, Copy, Debug)]
pub struct BoundVars {
    pub center: Var,
    pub lower: Var,
    pub upper: Var,
}

/// `[x − ε, x + ε]`.
pub fn epsilon_box(x: &Tensor, epsilon: f64) -> Result<IntervalTensor> {
    check_epsilon(epsilon)?;
    IntervalTensor::new(x.map(|v| v - epsilon), x.map(|v| v + epsilon))
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("epsilon must be finite and non-negative, got {epsilon}")));
    }
    Ok(())
}

/// Seeds a batched box around constant inputs `x`.
pub fn input_box_on(tape: &mut Tape, x: &Tensor, epsilon: f64) -> Result<BoundVars> {
    check_epsilon(epsilon)?;
    let center = tape.constant(x.clone());
    let lower = tape.constant(x.map(|v| v - epsilon));
    let upper = tape.constant(x.map(|v| v + epsilon));
    Ok(BoundVars { center, lower, upper })
}

/// Pushes a batched center and box through one layer.
pub fn layer_on(tape: &mut Tape, layer: &LayerSpec, params: &[Var], b: BoundVars) -> Result<BoundVars> {
    match *layer {
        LayerSpec::Linear { .. } => {
            let (w, bias) = (params[0], params[1]);
            let center = linear(tape, b.center, w, bias)?;
            let (mu, psi) = mid_rad(tape, b)?;
            let mu = linear(tape, mu, w, bias)?;
            let wabs = tape.abs(w)?;
            let wabs_t = tape.transpose(wabs)?;
            let psi = tape.matmul(psi, wabs_t)?;
            Ok(BoundVars {
                center,
                lower: tape.sub(mu, psi)?,
                upper: tape.add(mu, psi)?,
            })
        }
        LayerSpec::Conv2d { stride, padding, .. } => {
            let geom = ConvGeometry { stride, padding };
            let (w, bias) = (params[0], params[1]);
            let center = apply_layer(tape, layer, params, b.center)?.0;
            let wpos = tape.relu(w)?;
            let wneg = tape.sub(w, wpos)?;
            let up = tape.conv2d(b.upper, wpos, geom)?;
            let un = tape.conv2d(b.lower, wneg, geom)?;
            let upper = tape.add(up, un)?;
            let upper = tape.channel_add(upper, bias)?;
            let lp = tape.conv2d(b.lower, wpos, geom)?;
            let ln = tape.conv2d(b.upper, wneg, geom)?;
            let lower = tape.add(lp, ln)?;
            let lower = tape.channel_add(lower, bias)?;
            Ok(BoundVars { center, lower, upper })
        }
        LayerSpec::BatchNorm { .. } => {
            let (center, affine) = apply_layer(tape, layer, params, b.center)?;
            let affine = affine.expect("batchnorm yields its affine");
            let (mu, psi) = mid_rad(tape, b)?;
            let mu = tape.channel_scale(mu, affine.scale)?;
            let mu = tape.channel_add(mu, affine.shift)?;
            let sabs = tape.abs(affine.scale)?;
            let psi = tape.channel_scale(psi, sabs)?;
            Ok(BoundVars {
                center,
                lower: tape.sub(mu, psi)?,
                upper: tape.add(mu, psi)?,
            })
        }
        LayerSpec::Relu | LayerSpec::MaxPool2d { .. } | LayerSpec::Flatten => Ok(BoundVars {
            center: apply_layer(tape, layer, params, b.center)?.0,
            lower: apply_layer(tape, layer, params, b.lower)?.0,
            upper: apply_layer(tape, layer, params, b.upper)?.0,
        }),
    }
}

fn mid_rad(tape: &mut Tape, b: BoundVars) -> Result<(Var, Var)> {
    let s = tape.add(b.lower, b.upper)?;
    let mu = tape.scale(s, 0.5)?;
    let d = tape.sub(b.upper, b.lower)?;
    let psi = tape.scale(d, 0.5)?;
    Ok((mu, psi))
}

/// Center activations and boxes at layer `S` for a batch of inputs.
pub fn prefix_bounds_on(
    tape: &mut Tape,
    network: &Network,
    params: &[Var],
    x: &Tensor,
    epsilon: f64,
) -> Result<BoundVars> {
    let xb = network.batch_input(x)?;
    let mut b = input_box_on(tape, &xb, epsilon)?;
    for l in 0..network.split() {
        b = layer_on(tape, &network.layers()[l], &params[network.param_range(l)], b)?;
    }
    Ok(b)
}

/// Box after one layer. The center used for batchnorm statistics is the
/// box midpoint.
pub fn propagate_layer(layer: &LayerSpec, params: &[Tensor], input: &IntervalTensor) -> Result<IntervalTensor> {
    let shapes = layer.param_shapes();
    if shapes.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} expects {} parameter tensors, got {}",
            layer.name(),
            shapes.len(),
            params.len()
        )));
    }
    for (s, p) in shapes.iter().zip(params) {
        if s.as_slice() != p.shape() {
            return Err(Error::shape("parameter", s, p.shape()));
        }
    }
    let batched = |t: &Tensor| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.reshape(&s)
    };
    layer.output_shape(input.shape())?;
    let mut tape = Tape::new();
    let center = tape.constant(batched(&input.center())?);
    let lower = tape.constant(batched(input.lower())?);
    let upper = tape.constant(batched(input.upper())?);
    let p: Vec<Var> = params.iter().map(|t| tape.constant(t.clone())).collect();
    let out = layer_on(&mut tape, layer, &p, BoundVars { center, lower, upper })?;
    IntervalTensor::new(tape.value(out.lower).row(0)?, tape.value(out.upper).row(0)?)
}

/// Forward through the first `S` layers plus the propagated box of
/// `epsilon_box(x, ε)`. `x` is a single instance.
pub fn propagate_prefix(network: &Network, x: &Tensor, epsilon: f64) -> Result<BoundResult> {
    if x.shape() != network.input_shape() {
        return Err(Error::shape("propagate_prefix input", network.input_shape(), x.shape()));
    }
    let mut r = task_bounds(network, x, epsilon)?;
    Ok(r.remove(0))
}

/// Per-instance bounds for a batch `[n, input..]`, in input order.
/// Batchnorm statistics come from the whole center batch.
pub fn task_bounds(network: &Network, instances: &Tensor, epsilon: f64) -> Result<Vec<BoundResult>> {
    let xb = network.batch_input(instances)?;
    if xb.rows() == 0 {
        return Err(Error::invalid("task_bounds needs a nonempty batch"));
    }
    let mut tape = Tape::new();
    let params = network.bind_constant(&mut tape);
    let b = prefix_bounds_on(&mut tape, network, &params, &xb, epsilon)?;
    (0..xb.rows())
        .map(|i| {
            Ok(BoundResult {
                center: tape.value(b.center).row(i)?,
                bounds: IntervalTensor::new(tape.value(b.lower).row(i)?, tape.value(b.upper).row(i)?)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x).unwrap()
    }

    #[test]
    fn epsilon_box_definition() {
        let b = epsilon_box(&v(&[1.0, 2.0]), 0.5).unwrap();
        assert_eq!(b.lower().data(), &[0.5, 1.5]);
        assert_eq!(b.upper().data(), &[1.5, 2.5]);
        let z = epsilon_box(&v(&[1.0, 2.0]), 0.0).unwrap();
        assert_eq!(z.lower(), z.upper());
        assert!(epsilon_box(&v(&[1.0]), -0.1).is_err());
    }

    #[test]
    fn affine_box_matches_corners() {
        let layer = LayerSpec::Linear { inputs: 2, outputs: 1 };
        let params = vec![Tensor::matrix(&[&[1.0, -1.0]]).unwrap(), Tensor::zeros(&[1])];
        let input = IntervalTensor::new(v(&[0.0, 0.0]), v(&[2.0, 2.0])).unwrap();
        let out = propagate_layer(&layer, &params, &input).unwrap();
        let corners = [(0.0, 0.0), (0.0, 2.0), (2.0, 0.0), (2.0, 2.0)];
        let vals: Vec<f64> = corners.iter().map(|(a, b)| a - b).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (-2.0, 2.0));
        assert_eq!(out.lower().data(), &[lo]);
        assert_eq!(out.upper().data(), &[hi]);
    }

    #[test]
    fn relu_box() {
        let a = IntervalTensor::new(v(&[-1.0]), v(&[2.0])).unwrap();
        let out = propagate_layer(&LayerSpec::Relu, &[], &a).unwrap();
        assert_eq!((out.lower().data()[0], out.upper().data()[0]), (0.0, 2.0));
        let b = IntervalTensor::new(v(&[-3.0]), v(&[-1.0])).unwrap();
        let out = propagate_layer(&LayerSpec::Relu, &[], &b).unwrap();
        assert_eq!((out.lower().data()[0], out.upper().data()[0]), (0.0, 0.0));
    }

    #[test]
    fn maxpool_box() {
        let layer = LayerSpec::MaxPool2d {
            window: [1, 2],
            stride: [1, 2],
        };
        let a = IntervalTensor::new(
            Tensor::new(vec![1, 1, 2], vec![-1.0, 3.0]).unwrap(),
            Tensor::new(vec![1, 1, 2], vec![0.0, 5.0]).unwrap(),
        )
        .unwrap();
        let out = propagate_layer(&layer, &[], &a).unwrap();
        assert_eq!(out.lower().data(), &[3.0]);
        assert_eq!(out.upper().data(), &[5.0]);
    }

    #[test]
    fn inverted_input_box_is_rejected() {
        assert!(IntervalTensor::new(v(&[1.0]), v(&[0.0])).is_err());
    }

    #[test]
    fn zero_epsilon_collapses_to_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Network::mlp(5, &[7, 6], 3, 2, &mut rng).unwrap();
        let x = Tensor::new(vec![5], (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let r = propagate_prefix(&net, &x, 0.0).unwrap();
        assert_eq!(r.bounds.lower(), &r.center);
        assert_eq!(r.bounds.upper(), &r.center);
        assert_eq!(r.bounds.mean_width(), 0.0);
        assert_eq!(r.center, net.embed(&x).unwrap());
    }

    #[test]
    fn single_affine_prefix_equals_layer_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::mlp(3, &[], 2, 1, &mut rng).unwrap();
        let x = v(&[0.3, -0.2, 0.9]);
        let r = propagate_prefix(&net, &x, 0.1).unwrap();
        let direct = propagate_layer(&net.layers()[0], net.params(), &epsilon_box(&x, 0.1).unwrap()).unwrap();
        assert!(r.bounds.lower().max_abs_diff(direct.lower()).unwrap() < 1e-15);
        assert!(r.bounds.upper().max_abs_diff(direct.upper()).unwrap() < 1e-15);
    }

    #[test]
    fn monte_carlo_containment_three_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let layers = vec![
            LayerSpec::Linear { inputs: 4, outputs: 6 },
            LayerSpec::Relu,
            LayerSpec::Linear { inputs: 6, outputs: 3 },
        ];
        let net = Network::new(vec![4], layers, 3, &mut rng).unwrap();
        let x = Tensor::new(vec![4], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let eps = 0.1;
        let r = propagate_prefix(&net, &x, eps).unwrap();
        for _ in 0..1000 {
            let noise: Vec<f64> = (0..4).map(|_| rng.random_range(-eps..=eps)).collect();
            let xp = Tensor::new(vec![4], x.data().iter().zip(&noise).map(|(a, b)| a + b).collect()).unwrap();
            assert!(r.bounds.contains(&net.embed(&xp).unwrap(), 1e-9));
        }
    }

    #[test]
    fn task_bounds_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Network::mlp(2, &[3], 2, 1, &mut rng).unwrap();
        let row = [0.5, -0.5];
        let batch = Tensor::matrix(&[&row, &[0.1, 0.2], &row]).unwrap();
        let r = task_bounds(&net, &batch, 0.05).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r[0], r[2]);
        let single = task_bounds(&net, &Tensor::matrix(&[&row]).unwrap(), 0.05).unwrap();
        assert_eq!(single[0], propagate_prefix(&net, &v(&row), 0.05).unwrap());
    }
}
