//! Layer vocabulary and the split network `f = head ∘ prefix`.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dense::{numel, Tensor};
use super::kernels::{self, ConvGeometry};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `y = W x + b` with `W: [outputs, inputs]`.
    Linear { inputs: usize, outputs: usize },
    /// Square-kernel cross-correlation, `W: [out, in, k, k]`, `b: [out]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Normalization with current-batch statistics followed by a learned
    /// per-channel affine (`gamma`, `beta`).
    BatchNorm { channels: usize, eps: f64 },
    Relu,
    MaxPool2d { window: [usize; 2], stride: [usize; 2] },
    Flatten,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Shapes of the parameter tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Linear { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]],
            LayerSpec::BatchNorm { channels, .. } => vec![vec![channels], vec![channels]],
            _ => vec![],
        }
    }

    /// Per-instance output shape for a per-instance input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Linear { inputs, outputs } => {
                if input != [inputs] {
                    return Err(Error::shape("linear input", &[inputs], input));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(Error::shape("conv2d input", &[in_channels, 0, 0], input));
                }
                let (h, w) = kernels::conv_output_hw(input[1], input[2], kernel, ConvGeometry { stride, padding })?;
                Ok(vec![out_channels, h, w])
            }
            LayerSpec::BatchNorm { channels, eps } => {
                if input.is_empty() || input[0] != channels {
                    return Err(Error::shape("batchnorm input", &[channels], input));
                }
                if !(eps > 0.0) {
                    return Err(Error::invalid("batchnorm eps must be positive"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2d { window, stride } => {
                if input.len() != 3 {
                    return Err(Error::shape("maxpool2d input", &[0, 0, 0], input));
                }
                let (h, w) = kernels::pool_output_hw(input[1], input[2], window, stride)?;
                Ok(vec![input[0], h, w])
            }
            LayerSpec::Flatten => Ok(vec![numel(input)]),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Linear { inputs, .. } => inputs,
            LayerSpec::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
            _ => 1,
        }
    }

    /// Seeded default parameters: fan-in scaled uniform weights, zero bias,
    /// unit batchnorm scale.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor> {
        match self {
            LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. } => {
                let shapes = self.param_shapes();
                let bound = 1.0 / (self.fan_in() as f64).sqrt();
                let w: Vec<f64> = (0..numel(&shapes[0]))
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                vec![Tensor::from_raw(shapes[0].clone(), w), Tensor::zeros(&shapes[1])]
            }
            LayerSpec::BatchNorm { channels, .. } => {
                vec![Tensor::full(&[*channels], 1.0), Tensor::zeros(&[*channels])]
            }
            _ => vec![],
        }
    }

    /// Layers that second-order differentiation supports.
    pub fn is_dense(&self) -> bool {
        matches!(self, LayerSpec::Linear { .. } | LayerSpec::Relu | LayerSpec::Flatten)
    }
}

/// Per-channel affine map `x * scale + shift` that a batchnorm layer
/// reduces to once its batch statistics are frozen.
#[derive(Clone, Copy, Debug)]
pub struct FrozenAffine {
    pub scale: Var,
    pub shift: Var,
}

/// Applies one layer to a batched input. Batchnorm also returns its frozen
/// affine so interval propagation can reuse it.
pub fn apply_layer(
    tape: &mut Tape,
    layer: &LayerSpec,
    params: &[Var],
    x: Var,
) -> Result<(Var, Option<FrozenAffine>)> {
    match *layer {
        LayerSpec::Linear { .. } => Ok((linear(tape, x, params[0], params[1])?, None)),
        LayerSpec::Conv2d { stride, padding, .. } => {
            let y = tape.conv2d(x, params[0], ConvGeometry { stride, padding })?;
            Ok((tape.channel_add(y, params[1])?, None))
        }
        LayerSpec::BatchNorm { eps, .. } => {
            let affine = batchnorm_affine(tape, x, params[0], params[1], eps)?;
            let y = tape.channel_scale(x, affine.scale)?;
            Ok((tape.channel_add(y, affine.shift)?, Some(affine)))
        }
        LayerSpec::Relu => Ok((tape.relu(x)?, None)),
        LayerSpec::MaxPool2d { window, stride } => Ok((tape.maxpool2d(x, window, stride)?, None)),
        LayerSpec::Flatten => {
            let s = tape.shape(x).to_vec();
            let n = s.first().copied().unwrap_or(1);
            Ok((tape.reshape(x, &[n, numel(&s[1..])])?, None))
        }
    }
}

/// `x W^T + b` for `x: [n, in]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let wt = tape.transpose(w)?;
    let y = tape.matmul(x, wt)?;
    tape.channel_add(y, b)
}

/// Batch statistics of `x` are detached; the returned scale and shift stay
/// differentiable in `gamma` and `beta`.
pub fn batchnorm_affine(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<FrozenAffine> {
    let (mean, var) = kernels::channel_moments(tape.value(x))?;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let c = inv_std.len();
    let scale = tape.mul_const(gamma, Tensor::from_raw(vec![c], inv_std))?;
    let centred = tape.mul_const(scale, Tensor::from_raw(vec![c], mean))?;
    let shift = tape.sub(beta, centred)?;
    Ok(FrozenAffine { scale, shift })
}

/// Ordered layers with a split index `S`: layers `[0, S)` form the
/// embedding prefix, layers `[S, L)` the head.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    split: usize,
    params: Vec<Tensor>,
    offsets: Vec<usize>,
}

impl Network {
    /// Builds a network with seeded default parameters.
    pub fn new<R: Rng + ?Sized>(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        split: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let params = layers.iter().flat_map(|l| l.init_params(rng)).collect();
        Network::from_parts(input_shape, layers, split, params)
    }

    pub fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        split: usize,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        if layers.is_empty() || split == 0 || split > layers.len() {
            return Err(Error::invalid(format!(
                "split index {split} must satisfy 0 < S <= {}",
                layers.len()
            )));
        }
        let mut shape = input_shape.clone();
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut expected = Vec::new();
        for layer in &layers {
            offsets.push(expected.len());
            shape = layer.output_shape(&shape)?;
            expected.extend(layer.param_shapes());
        }
        offsets.push(expected.len());
        if expected.len() != params.len() {
            return Err(Error::invalid(format!(
                "network needs {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (e, p) in expected.iter().zip(&params) {
            if e.as_slice() != p.shape() {
                return Err(Error::shape("parameter", e, p.shape()));
            }
            p.ensure_finite("parameter")?;
        }
        Ok(Network {
            input_shape,
            layers,
            split,
            params,
            offsets,
        })
    }

    /// `hidden.len()` blocks of (linear, relu) followed by a linear output
    /// layer. `split_block` counts blocks; `hidden.len() + 1` selects the
    /// whole network.
    pub fn mlp<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        split_block: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = input_dim;
        for &h in hidden {
            layers.push(LayerSpec::Linear { inputs: width, outputs: h });
            layers.push(LayerSpec::Relu);
            width = h;
        }
        layers.push(LayerSpec::Linear {
            inputs: width,
            outputs: output_dim,
        });
        let split = if split_block > hidden.len() {
            layers.len()
        } else {
            2 * split_block
        };
        Network::new(vec![input_dim], layers, split, rng)
    }

    /// `blocks` × (conv 3×3, batchnorm, maxpool 2×2, relu), then flatten and
    /// an optional linear classifier. `split_block` counts blocks.
    pub fn conv<R: Rng + ?Sized>(
        input_shape: [usize; 3],
        channels: usize,
        blocks: usize,
        output_dim: Option<usize>,
        split_block: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut c = input_shape[0];
        for _ in 0..blocks {
            layers.push(LayerSpec::Conv2d {
                in_channels: c,
                out_channels: channels,
                kernel: 3,
                stride: 1,
                padding: 1,
            });
            layers.push(LayerSpec::BatchNorm {
                channels,
                eps: DEFAULT_BN_EPS,
            });
            layers.push(LayerSpec::MaxPool2d {
                window: [2, 2],
                stride: [2, 2],
            });
            layers.push(LayerSpec::Relu);
            c = channels;
        }
        layers.push(LayerSpec::Flatten);
        if let Some(out) = output_dim {
            let mut shape = input_shape.to_vec();
            for l in &layers {
                shape = l.output_shape(&shape)?;
            }
            layers.push(LayerSpec::Linear {
                inputs: shape[0],
                outputs: out,
            });
        }
        let split = if split_block >= blocks {
            // flatten belongs to the prefix when the split sits after the last block
            4 * blocks + 1
        } else {
            4 * split_block
        };
        let split = split.min(layers.len());
        Network::new(input_shape.to_vec(), layers, split, rng)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Same architecture with replacement parameters.
    pub fn with_params(&self, params: Vec<Tensor>) -> Result<Network> {
        Network::from_parts(self.input_shape.clone(), self.layers.clone(), self.split, params)
    }

    pub fn with_split(&self, split: usize) -> Result<Network> {
        Network::from_parts(self.input_shape.clone(), self.layers.clone(), split, self.params.clone())
    }

    /// Indices into `params()` owned by layer `l`.
    pub fn param_range(&self, l: usize) -> Range<usize> {
        self.offsets[l]..self.offsets[l + 1]
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Per-instance shape after the first `upto` layers.
    pub fn shape_after(&self, upto: usize) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for l in &self.layers[..upto] {
            shape = l.output_shape(&shape)?;
        }
        Ok(shape)
    }

    pub fn embedding_shape(&self) -> Vec<usize> {
        self.shape_after(self.split).expect("validated at construction")
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shape_after(self.layers.len()).expect("validated at construction")
    }

    pub fn is_dense(&self) -> bool {
        self.layers.iter().all(LayerSpec::is_dense)
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Registers every parameter as a constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Checks that `x` is `[n, input_shape..]`, or a single unbatched
    /// instance, and returns the batched form.
    pub fn batch_input(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() == self.input_shape.as_slice() {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            return x.reshape(&s);
        }
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape("network input", &self.input_shape, x.shape()));
        }
        Ok(x.clone())
    }

    /// Runs layers in `range` over batched `x` using parameter handles
    /// `params` (one per tensor in `params()`).
    pub fn forward_range(&self, tape: &mut Tape, params: &[Var], x: Var, range: Range<usize>) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(Error::invalid("parameter handle count does not match network"));
        }
        let mut h = x;
        for l in range {
            let p = &params[self.param_range(l)];
            h = apply_layer(tape, &self.layers[l], p, h)?.0;
        }
        Ok(h)
    }

    pub fn forward_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        self.forward_range(tape, params, x, 0..self.layers.len())
    }

    pub fn prefix_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        self.forward_range(tape, params, x, 0..self.split)
    }

    pub fn head_on(&self, tape: &mut Tape, params: &[Var], h: Var) -> Result<Var> {
        self.forward_range(tape, params, h, self.split..self.layers.len())
    }

    fn run(&self, x: &Tensor, range: Range<usize>) -> Result<Tensor> {
        let single = x.shape() == self.input_shape.as_slice();
        let xb = self.batch_input(x)?;
        let mut tape = Tape::new();
        let params = self.bind_constant(&mut tape);
        let xv = tape.constant(xb);
        let y = self.forward_range(&mut tape, &params, xv, range)?;
        let out = tape.value(y).clone();
        if single {
            out.row(0)
        } else {
            Ok(out)
        }
    }

    /// Full forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, 0..self.layers.len())
    }

    /// Embedding through the first `S` layers.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, 0..self.split)
    }
}

/// Forward over a bare layer list with its own parameters, optionally
/// recording on a caller-supplied tape.
pub fn forward(layers: &[LayerSpec], params: &[Tensor], x: &Tensor, tape: Option<&mut Tape>) -> Result<Tensor> {
    let mut scratch = Tape::new();
    let tape = tape.unwrap_or(&mut scratch);
    let mut idx = 0;
    let mut h = tape.constant(x.clone());
    for layer in layers {
        let n = layer.param_shapes().len();
        if idx + n > params.len() {
            return Err(Error::invalid("not enough parameters for layer list"));
        }
        let p: Vec<Var> = params[idx..idx + n].iter().map(|t| tape.param(t.clone())).collect();
        for (s, v) in layer.param_shapes().iter().zip(&p) {
            if s.as_slice() != tape.shape(*v) {
                return Err(Error::shape("parameter", s, tape.shape(*v)));
            }
        }
        idx += n;
        h = apply_layer(tape, layer, &p, h)?.0;
    }
    Ok(tape.value(h).clone())
}
