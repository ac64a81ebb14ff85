//! Tensor-valued reverse-mode differentiation.
//!
//! Operations are appended to a [`Tape`] in evaluation order, so node
//! indices are a topological order. [`Tape::grad`] walks the nodes once in
//! reverse and records every vector-Jacobian product as ordinary tape
//! operations. The returned gradients are therefore themselves
//! differentiable, which is what second-order meta-learning needs. A few
//! kernels (convolution and pooling backward passes) are recorded as
//! terminal nodes; differentiating through them a second time is reported
//! as [`Error::Unsupported`].

use super::dense::Tensor;
use super::kernels::{self, ConvGeometry};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Abs(Var),
    Exp(Var),
    Sqrt(Var),
    Recip(Var),
    Square(Var),
    Sum(Var),
    ExpandScalar(Var),
    RowSum(Var),
    ExpandCols(Var),
    ChannelScale(Var, Var),
    ChannelAdd(Var, Var),
    ChannelSum(Var),
    ChannelExpand(Var),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    Scatter(Var, Vec<usize>),
    Reshape(Var),
    Conv2d(Var, Var, ConvGeometry),
    MaxPool(Var, Vec<usize>),
    /// Backward kernels without a recorded derivative of their own.
    Terminal(&'static str, Vec<Var>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | ChannelScale(a, b) | ChannelAdd(a, b) => {
                vec![*a, *b]
            }
            Conv2d(a, b, _) => vec![*a, *b],
            Neg(a) | Scale(a, _) | MulConst(a, _) | Transpose(a) | Relu(a) | Abs(a) | Exp(a)
            | Sqrt(a) | Recip(a) | Square(a) | Sum(a) | ExpandScalar(a) | RowSum(a)
            | ExpandCols(a) | ChannelSum(a) | ChannelExpand(a) | LogSoftmax(a) | Pick(a, _)
            | Scatter(a, _) | Reshape(a) | MaxPool(a, _) => vec![*a],
            Terminal(_, v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: bool,
}

/// Recording of a computation. Single writer; values are immutable once
/// pushed.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Whether any parameter leaf influences `v`.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that gradients are never taken with respect to.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true, true)
    }

    /// Constant copy of `v`'s current value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool, param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(value, op, requires_grad, false))
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).scale(-1.0);
        self.push(v, Op::Neg(a), "neg")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), "scale")
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let v = self.value(a).zip_map(&c, |x, y| x * y)?;
        self.push(v, Op::MulConst(a, c), "mul_const")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = kernels::transpose(self.value(a))?;
        self.push(v, Op::Transpose(a), "transpose")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), "relu")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a), "abs")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), "exp")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::invalid("sqrt of a negative value"));
        }
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a), "sqrt")
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a), "recip")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), "square")
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    fn expand_scalar(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a).item()?;
        self.push(Tensor::full(shape, x), Op::ExpandScalar(a), "expand")
    }

    /// `[m, n] -> [m]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let v = kernels::row_sum(self.value(a))?;
        self.push(v, Op::RowSum(a), "row_sum")
    }

    /// `[m] -> [m, n]`.
    pub fn expand_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let v = kernels::expand_cols(self.value(a), n)?;
        self.push(v, Op::ExpandCols(a), "expand_cols")
    }

    /// `x[n, c, ...] * s[c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let v = kernels::channel_scale(self.value(x), self.value(s))?;
        self.push(v, Op::ChannelScale(x, s), "channel_scale")
    }

    /// `x[n, c, ...] + b[c]`. With rank-2 input this is a row bias.
    pub fn channel_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let v = kernels::channel_add(self.value(x), self.value(b))?;
        self.push(v, Op::ChannelAdd(x, b), "channel_add")
    }

    pub fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let v = kernels::channel_sum(self.value(x))?;
        self.push(v, Op::ChannelSum(x), "channel_sum")
    }

    pub fn channel_expand(&mut self, v: Var, shape: &[usize]) -> Result<Var> {
        let t = kernels::channel_expand(self.value(v), shape)?;
        self.push(t, Op::ChannelExpand(v), "channel_expand")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = kernels::log_softmax_rows(self.value(a))?;
        self.push(v, Op::LogSoftmax(a), "log_softmax")
    }

    /// `out[i] = x[i, idx[i]]` for a `[m, n]` input.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(Error::shape("pick", &[idx.len(), 0], &s));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= s[1]) {
            return Err(Error::invalid(format!("index {bad} out of range for {} columns", s[1])));
        }
        let d = self.value(x).data();
        let v: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| d[i * s[1] + j]).collect();
        self.push(Tensor::from_raw(vec![idx.len()], v), Op::Pick(x, idx.to_vec()), "pick")
    }

    fn scatter(&mut self, g: Var, idx: &[usize], cols: usize) -> Result<Var> {
        let m = idx.len();
        let mut out = vec![0.0; m * cols];
        for (i, (&j, &v)) in idx.iter().zip(self.value(g).data()).enumerate() {
            out[i * cols + j] = v;
        }
        self.push(Tensor::from_raw(vec![m, cols], out), Op::Scatter(g, idx.to_vec()), "scatter")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a), "reshape")
    }

    /// Cross-correlation of `[n, c, h, w]` input with `[o, c, k, k]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, geometry: ConvGeometry) -> Result<Var> {
        let v = kernels::conv2d(self.value(x), self.value(w), geometry)?;
        self.push(v, Op::Conv2d(x, w, geometry), "conv2d")
    }

    pub fn maxpool2d(&mut self, x: Var, window: [usize; 2], stride: [usize; 2]) -> Result<Var> {
        let (v, arg) = kernels::maxpool2d(self.value(x), window, stride)?;
        self.push(v, Op::MaxPool(x, arg), "maxpool2d")
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contrib: Var) -> Result<()> {
        if !self.nodes[target.0].requires_grad {
            return Ok(());
        }
        adj[target.0] = Some(match adj[target.0] {
            Some(prev) => self.add(prev, contrib)?,
            None => contrib,
        });
        Ok(())
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to `wrt`,
    /// recorded on the tape.
    ///
    /// `wrt` may hold parameter leaves or intermediate nodes derived from
    /// them; the gradient at an intermediate node is its total adjoint.
    /// Nodes that do not influence `loss` receive a zero gradient.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("loss node is not on this tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", &[], self.shape(loss)));
        }
        for p in wrt {
            if p.0 >= self.nodes.len() {
                return Err(Error::invalid(format!("node {} is not on this tape", p.0)));
            }
            if !self.nodes[p.0].param && !self.nodes[p.0].requires_grad {
                return Err(Error::invalid(format!("node {} does not depend on any parameter", p.0)));
            }
        }
        let mut adj: Vec<Option<Var>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            let seed = self.constant(Tensor::full(self.shape(loss), 1.0));
            adj[loss.0] = Some(seed);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.vjp(i, &op, g, &mut adj)?;
        }
        wrt.iter()
            .map(|p| match adj[p.0] {
                Some(g) => Ok(g),
                None => {
                    let z = Tensor::zeros(self.shape(*p));
                    Ok(self.constant(z))
                }
            })
            .collect()
    }

    /// Gradient values, for callers that do not differentiate further.
    pub fn gradients(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let g = self.grad(loss, wrt)?;
        Ok(g.into_iter().map(|v| self.value(v).clone()).collect())
    }

    fn vjp(&mut self, node: usize, op: &Op, g: Var, adj: &mut [Option<Var>]) -> Result<()> {
        let out = Var(node);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g)?;
                self.accumulate(adj, *b, g)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g)?;
                if self.requires_grad(*b) {
                    let n = self.neg(g)?;
                    self.accumulate(adj, *b, n)?;
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = self.mul(g, *b)?;
                    self.accumulate(adj, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let gb = self.mul(g, *a)?;
                    self.accumulate(adj, *b, gb)?;
                }
            }
            Op::Neg(a) => {
                let n = self.neg(g)?;
                self.accumulate(adj, *a, n)?;
            }
            Op::Scale(a, c) => {
                let s = self.scale(g, *c)?;
                self.accumulate(adj, *a, s)?;
            }
            Op::MulConst(a, c) => {
                let s = self.mul_const(g, c.clone())?;
                self.accumulate(adj, *a, s)?;
            }
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let bt = self.transpose(*b)?;
                    let ga = self.matmul(g, bt)?;
                    self.accumulate(adj, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let at = self.transpose(*a)?;
                    let gb = self.matmul(at, g)?;
                    self.accumulate(adj, *b, gb)?;
                }
            }
            Op::Transpose(a) => {
                let t = self.transpose(g)?;
                self.accumulate(adj, *a, t)?;
            }
            Op::Relu(a) => {
                let mask = self.value(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let s = self.mul_const(g, mask)?;
                self.accumulate(adj, *a, s)?;
            }
            Op::Abs(a) => {
                let sign = self.value(*a).map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                let s = self.mul_const(g, sign)?;
                self.accumulate(adj, *a, s)?;
            }
            Op::Exp(a) => {
                let s = self.mul(g, out)?;
                self.accumulate(adj, *a, s)?;
            }
            Op::Sqrt(a) => {
                let r = self.recip(out)?;
                let half = self.scale(r, 0.5)?;
                let s = self.mul(g, half)?;
                self.accumulate(adj, *a, s)?;
            }
            Op::Recip(a) => {
                let sq = self.square(out)?;
                let p = self.mul(g, sq)?;
                let s = self.neg(p)?;
                self.accumulate(adj, *a, s)?;
            }
            Op::Square(a) => {
                let two_a = self.scale(*a, 2.0)?;
                let s = self.mul(g, two_a)?;
                self.accumulate(adj, *a, s)?;
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                let e = self.expand_scalar(g, &shape)?;
                self.accumulate(adj, *a, e)?;
            }
            Op::ExpandScalar(a) => {
                let s = self.sum(g)?;
                let shape = self.shape(*a).to_vec();
                let s = self.reshape(s, &shape)?;
                self.accumulate(adj, *a, s)?;
            }
            Op::RowSum(a) => {
                let n = self.shape(*a)[1];
                let e = self.expand_cols(g, n)?;
                self.accumulate(adj, *a, e)?;
            }
            Op::ExpandCols(a) => {
                let s = self.row_sum(g)?;
                self.accumulate(adj, *a, s)?;
            }
            Op::ChannelScale(x, s) => {
                if self.requires_grad(*x) {
                    let gx = self.channel_scale(g, *s)?;
                    self.accumulate(adj, *x, gx)?;
                }
                if self.requires_grad(*s) {
                    let p = self.mul(g, *x)?;
                    let gs = self.channel_sum(p)?;
                    self.accumulate(adj, *s, gs)?;
                }
            }
            Op::ChannelAdd(x, b) => {
                self.accumulate(adj, *x, g)?;
                if self.requires_grad(*b) {
                    let gb = self.channel_sum(g)?;
                    self.accumulate(adj, *b, gb)?;
                }
            }
            Op::ChannelSum(x) => {
                let shape = self.shape(*x).to_vec();
                let e = self.channel_expand(g, &shape)?;
                self.accumulate(adj, *x, e)?;
            }
            Op::ChannelExpand(v) => {
                let s = self.channel_sum(g)?;
                self.accumulate(adj, *v, s)?;
            }
            Op::LogSoftmax(a) => {
                let n = self.shape(*a)[1];
                let rs = self.row_sum(g)?;
                let rs = self.expand_cols(rs, n)?;
                let p = self.exp(out)?;
                let t = self.mul(p, rs)?;
                let s = self.sub(g, t)?;
                self.accumulate(adj, *a, s)?;
            }
            Op::Pick(x, idx) => {
                let cols = self.shape(*x)[1];
                let s = self.scatter(g, idx, cols)?;
                self.accumulate(adj, *x, s)?;
            }
            Op::Scatter(x, idx) => {
                let p = self.pick(g, idx)?;
                self.accumulate(adj, *x, p)?;
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                let r = self.reshape(g, &shape)?;
                self.accumulate(adj, *a, r)?;
            }
            Op::Conv2d(x, w, geom) => {
                if self.requires_grad(*x) {
                    let shape = self.shape(*x).to_vec();
                    let v = kernels::conv2d_input_grad(self.value(g), self.value(*w), &shape, *geom)?;
                    let gx = self.push(v, Op::Terminal("conv2d input gradient", vec![g, *w]), "conv2d backward")?;
                    self.accumulate(adj, *x, gx)?;
                }
                if self.requires_grad(*w) {
                    let shape = self.shape(*w).to_vec();
                    let v = kernels::conv2d_weight_grad(self.value(g), self.value(*x), &shape, *geom)?;
                    let gw = self.push(v, Op::Terminal("conv2d weight gradient", vec![g, *x]), "conv2d backward")?;
                    self.accumulate(adj, *w, gw)?;
                }
            }
            Op::MaxPool(x, arg) => {
                let shape = self.shape(*x).to_vec();
                let v = kernels::maxpool2d_grad(self.value(g), arg, &shape)?;
                let gx = self.push(v, Op::Terminal("maxpool2d gradient", vec![g]), "maxpool backward")?;
                self.accumulate(adj, *x, gx)?;
            }
            Op::Terminal(name, _) => {
                return Err(Error::Unsupported(format!("differentiating through {name}")));
            }
        }
        Ok(())
    }
}
