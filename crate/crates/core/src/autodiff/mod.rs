//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node whose inputs are earlier nodes, so the
//! tape is always in topological order and `backward` is a single reverse
//! sweep. Values are checked for NaN/Inf as they are produced.

pub mod conv;
pub mod gradcheck;

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use conv::ConvGeometry;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(s) => {
                if v >= 0.0 {
                    v
                } else {
                    s * v
                }
            }
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => (x > 0.0) as u8 as f64,
            Activation::LeakyRelu(s) => {
                if x >= 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Backward rule for operations defined outside this module.
pub trait CustomBackward {
    fn name(&self) -> &'static str;

    /// Gradient for each input, `None` where the input receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

/// Running statistics owned by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::ones(vec![channels]),
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Sqrt(Var),
    Ln(Var),
    Act(Var, Activation),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Down2(Var),
    Up2(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GlobalAvgPool(Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Abs(..) => "abs",
            Op::Sqrt(..) => "sqrt",
            Op::Ln(..) => "ln",
            Op::Act(..) => "activation",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Down2(..) => "down2",
            Op::Up2(..) => "up2",
            Op::Dense { .. } => "dense",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Custom { rule, .. } => rule.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Abs(a)
            | Op::Sqrt(a)
            | Op::Ln(a)
            | Op::Act(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Down2(a)
            | Op::Up2(a)
            | Op::GlobalAvgPool(a) => vec![*a],
            Op::Narrow { input, .. } => vec![*input],
            Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => inputs.clone(),
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Dense {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Parameters of one network bound as tape leaves, addressable by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by the last `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "output of {} (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let v = self.push(value, Op::Leaf)?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn bind<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a String, &'a Tensor)>,
        requires_grad: bool,
    ) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in params {
            vars.insert(name.clone(), self.leaf(t.clone(), requires_grad)?);
        }
        Ok(Bound { vars })
    }

    /// Gradients for every bound parameter; parameters unreachable from
    /// the loss are absent.
    pub fn grads_of(&self, bound: &Bound) -> BTreeMap<String, Tensor> {
        bound
            .vars
            .iter()
            .filter_map(|(k, v)| self.grad(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y).map_err(|_| {
            Error::shape("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b)))
        })?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::invalid("sqrt", "negative input"));
        }
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite("ln of non-positive value".into()));
        }
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let v = self.value(a).map(|x| kind.apply(x));
        self.push(v, Op::Act(a, kind))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.activation(a, Activation::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&self.value(*v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::from_vec(shape, data)?;
        self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::from_vec(out_shape, data)?;
        self.push(t, Op::Narrow { input: a, axis, start })
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.shape(input),
            self.shape(weight),
            stride,
            padding,
            groups,
        )?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias must be [{}], got {:?}", geom.cout, self.shape(b)),
                ));
            }
        }
        let out = conv::forward(
            &geom,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        );
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        )
    }

    /// Per-channel batch normalization over `(N, H, W)`.
    ///
    /// In training mode the batch statistics are used and `running` is
    /// updated with momentum; otherwise `running` is used as is.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        training: bool,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "gamma/beta must be [{c}], got {:?} and {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if running.mean.shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats have {:?}, expected [{c}]", running.mean.shape()),
            ));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let x = self.value(input).data();
        let mut mean = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        if training {
            let mut var = vec![0.0; c];
            for ch in 0..c {
                // shifted by the first sample so a constant channel has an exact mean
                let shift = x[ch * hw];
                let mut s = 0.0;
                for b in 0..n {
                    s += x[(b * c + ch) * hw..][..hw].iter().map(|v| v - shift).sum::<f64>();
                }
                mean[ch] = shift + s / m;
                let mut q = 0.0;
                for b in 0..n {
                    q += x[(b * c + ch) * hw..][..hw]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
                var[ch] = q / m;
                inv_std[ch] = 1.0 / (var[ch] + BN_EPS).sqrt();
            }
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..c {
                let rm = &mut running.mean.data_mut()[ch];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ch];
                let rv = &mut running.var.data_mut()[ch];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[ch] * unbias;
            }
        } else {
            for ch in 0..c {
                mean[ch] = running.mean.data()[ch];
                inv_std[ch] = 1.0 / (running.var.data()[ch] + BN_EPS).sqrt();
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let t = Tensor::from_vec(vec![n, c, h, w], out)?;
        self.push(
            t,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
        )
    }

    /// 2x2 average pooling.
    pub fn down2(&mut self, a: Var) -> Result<Var> {
        let t = down2(self.value(a))?;
        self.push(t, Op::Down2(a))
    }

    /// Nearest-neighbour x2 upsampling.
    pub fn up2(&mut self, a: Var) -> Result<Var> {
        let t = up2(self.value(a))?;
        self.push(t, Op::Up2(a))
    }

    /// `input [N, D] * weight [O, D]^T + bias [O]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, d) = match *self.shape(input) {
            [n, d] => (n, d),
            ref s => return Err(Error::shape("dense", format!("input must be [N,D], got {s:?}"))),
        };
        let (o, dw) = match *self.shape(weight) {
            [o, dw] => (o, dw),
            ref s => return Err(Error::shape("dense", format!("weight must be [O,D], got {s:?}"))),
        };
        if d != dw {
            return Err(Error::shape("dense", format!("input D={d} but weight D={dw}")));
        }
        if self.shape(bias) != [o] {
            return Err(Error::shape(
                "dense",
                format!("bias must be [{o}], got {:?}", self.shape(bias)),
            ));
        }
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let bs = self.value(bias).data();
        let mut out = vec![0.0; n * o];
        for i in 0..n {
            for j in 0..o {
                out[i * o + j] = bs[j]
                    + x[i * d..(i + 1) * d]
                        .iter()
                        .zip(&wt[j * d..(j + 1) * d])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
            }
        }
        let t = Tensor::from_vec(vec![n, o], out)?;
        self.push(
            t,
            Op::Dense {
                input,
                weight,
                bias,
            },
        )
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(a).dims4("global_avg_pool")?;
        let hw = h * w;
        let data = self
            .value(a)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::from_vec(vec![n, c], data)?;
        self.push(t, Op::GlobalAvgPool(a))
    }

    /// Record an operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        rule: Box<dyn CustomBackward>,
    ) -> Result<Var> {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Populate gradients on every `requires_grad` leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {} (node {i})",
                    self.nodes[i].op.name()
                )));
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].grad = Some(g);
                continue;
            }
            for (var, contrib) in self.local_grads(i, &g) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let val = |v: &Var| &self.nodes[v.0].value;
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(b), |x, y| x * y).unwrap()),
                (*b, g.zip_map(val(a), |x, y| x * y).unwrap()),
            ],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Abs(a) => vec![(*a, g.zip_map(val(a), |gv, x| gv * sign(x)).unwrap())],
            Op::Sqrt(a) => vec![(
                *a,
                g.zip_map(&node.value, |gv, y| if y > 0.0 { gv * 0.5 / y } else { 0.0 })
                    .unwrap(),
            )],
            Op::Ln(a) => vec![(*a, g.zip_map(val(a), |gv, x| gv / x).unwrap())],
            Op::Act(a, kind) => {
                let x = val(a).data();
                let y = node.value.data();
                let d = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, gv)| gv * kind.derivative(x[k], y[k]))
                    .collect();
                vec![(*a, Tensor::from_vec(x_shape(val(a)), d).unwrap())]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(x_shape(val(a)), g.item()))],
            Op::Mean(a) => {
                let n = val(a).numel() as f64;
                vec![(*a, Tensor::full(x_shape(val(a)), g.item() / n))]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(x_shape(val(a))).unwrap())],
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for v in inputs {
                    let len = val(v).shape()[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        d.extend_from_slice(&g.data()[o * total + offset..][..len]);
                    }
                    offset += len;
                    out.push((*v, Tensor::from_vec(x_shape(val(v)), d).unwrap()));
                }
                out
            }
            Op::Narrow { input, axis, start } => {
                let src_shape = val(input).shape();
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let len = node.value.shape()[*axis] * inner;
                let mut d = vec![0.0; val(input).numel()];
                for o in 0..outer {
                    let base = (o * src_shape[*axis] + start) * inner;
                    d[base..base + len].copy_from_slice(&g.data()[o * len..(o + 1) * len]);
                }
                vec![(*input, Tensor::from_vec(src_shape.to_vec(), d).unwrap())]
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let grads = conv::backward(
                    geom,
                    val(input),
                    val(weight),
                    g,
                    (rg(input), rg(weight), bias.map(|b| rg(&b)).unwrap_or(false)),
                );
                let mut out = Vec::new();
                if let Some(t) = grads.input {
                    out.push((*input, t));
                }
                if let Some(t) = grads.weight {
                    out.push((*weight, t));
                }
                if let (Some(b), Some(t)) = (bias, grads.bias) {
                    out.push((*b, t));
                }
                out
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let [n, c, h, w] = node.value.dims4("batch_norm").unwrap();
                let hw = h * w;
                let m = (n * hw) as f64;
                let gd = g.data();
                let gam = val(gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for k in off..off + hw {
                            dgamma[ch] += gd[k] * xhat[k];
                            dbeta[ch] += gd[k];
                        }
                    }
                }
                let mut dx = vec![0.0; gd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        let scale = gam[ch] * inv_std[ch];
                        for k in off..off + hw {
                            dx[k] = if *training {
                                scale / m * (m * gd[k] - dbeta[ch] - xhat[k] * dgamma[ch])
                            } else {
                                scale * gd[k]
                            };
                        }
                    }
                }
                vec![
                    (*input, Tensor::from_vec(vec![n, c, h, w], dx).unwrap()),
                    (*gamma, Tensor::from_vec(vec![c], dgamma).unwrap()),
                    (*beta, Tensor::from_vec(vec![c], dbeta).unwrap()),
                ]
            }
            Op::Down2(a) => {
                let up = up2(g).unwrap();
                vec![(*a, up.scale(0.25))]
            }
            Op::Up2(a) => {
                let d = down2(g).unwrap();
                vec![(*a, d.scale(4.0))]
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = val(input);
                let wt = val(weight);
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let o = wt.shape()[0];
                let gd = g.data();
                let mut dx = vec![0.0; n * d];
                let mut dw = vec![0.0; o * d];
                let mut db = vec![0.0; o];
                for i in 0..n {
                    for j in 0..o {
                        let gv = gd[i * o + j];
                        db[j] += gv;
                        for k in 0..d {
                            dx[i * d + k] += gv * wt.data()[j * d + k];
                            dw[j * d + k] += gv * x.data()[i * d + k];
                        }
                    }
                }
                vec![
                    (*input, Tensor::from_vec(vec![n, d], dx).unwrap()),
                    (*weight, Tensor::from_vec(vec![o, d], dw).unwrap()),
                    (*bias, Tensor::from_vec(vec![o], db).unwrap()),
                ]
            }
            Op::GlobalAvgPool(a) => {
                let x = val(a);
                let [_, _, h, w] = x.dims4("global_avg_pool").unwrap();
                let hw = h * w;
                let mut d = Vec::with_capacity(x.numel());
                for gv in g.data() {
                    d.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                vec![(*a, Tensor::from_vec(x_shape(x), d).unwrap())]
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(val).collect();
                rule.backward(&ins, &node.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(t, v)| t.map(|t| (*v, t)))
                    .collect()
            }
        }
    }
}

fn x_shape(t: &Tensor) -> Vec<usize> {
    t.shape().to_vec()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// 2x2 average pooling on a rank-4 tensor with even extents.
pub fn down2(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("down2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "down2",
            format!("H and W must be even, got {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for y in 0..ho {
            for xx in 0..wo {
                let a = plane[2 * y * w + 2 * xx];
                let b = plane[2 * y * w + 2 * xx + 1];
                let cc = plane[(2 * y + 1) * w + 2 * xx];
                let d = plane[(2 * y + 1) * w + 2 * xx + 1];
                out.push(0.25 * (a + b + cc + d));
            }
        }
    }
    Tensor::from_vec(vec![n, c, ho, wo], out)
}

/// Nearest-neighbour x2 upsampling of a rank-4 tensor.
pub fn up2(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("up2")?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for y in 0..ho {
            for xx in 0..wo {
                out.push(plane[(y / 2) * w + xx / 2]);
            }
        }
    }
    Tensor::from_vec(vec![n, c, ho, wo], out)
}
