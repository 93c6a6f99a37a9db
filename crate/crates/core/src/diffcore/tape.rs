//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every forward op appends a node holding its output values and whatever it
//! needs for the backward pass. Nodes are only ever appended, so tape order is
//! a topological order and [`Tape::backward`] is a single reverse sweep.
//! Gradients of a node used several times accumulate additively.

use std::collections::BTreeMap;

use super::kernels::{batch_major_to_channel_major, channel_major_to_batch_major, gemm, Window};
use super::params::ParamStore;
use super::tensor::{numel, Tensor};
use crate::error::{contract_err, dim_err, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const ELU_ALPHA: f32 = 1.0;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Relu,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        window: Window,
        out_channels: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
        window: Window,
        in_channels: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        mode: Mode,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    MeanRows(Var),
    SubRows(Var, Var),
    Reshape(Var),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Named parameter handles bound onto a tape.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| contract_err!("parameter '{name}' is not bound on this tape"))
    }

    pub fn extend(&mut self, other: ParamVars) {
        self.vars.extend(other.vars);
    }
}

/// Gradients from one backward sweep, kept for leaf nodes only.
#[derive(Debug)]
pub struct Grads {
    leaf: Vec<Option<Vec<f32>>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. a leaf; `None` if the leaf does not require
    /// gradients. Unreachable leaves get zeros.
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.leaf.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every bound parameter into the matching slots
    /// of `store`.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) -> Result<()> {
        for (i, node) in tape.nodes.iter().enumerate() {
            let (Some(name), Some(g)) = (&node.param, &self.leaf[i]) else {
                continue;
            };
            if let Some(p) = store.get_mut(name) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn add_into(slot: &mut Option<Vec<f32>>, delta: Vec<f32>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
        None => *slot = Some(delta),
    }
}

fn sum_f64(values: impl Iterator<Item = f32>) -> f64 {
    values.map(f64::from).sum()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("tape nodes hold consistent shapes")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. It participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            data: t.into_data(),
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Records a named trainable leaf copied from `t`.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(name.to_string()),
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds every parameter of `store` onto the tape.
    pub fn bind(&mut self, store: &ParamStore) -> ParamVars {
        let mut vars = BTreeMap::new();
        for (name, t) in store.iter() {
            let v = self.param(name, t);
            vars.insert(name.to_string(), v);
        }
        ParamVars { vars }
    }

    fn expect_shape(&self, v: Var, rank: usize, what: &str) -> Result<&[usize]> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(dim_err!("{what} must have rank {rank}, got shape {s:?}"));
        }
        Ok(s)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    /// Unpadded 2-D convolution. `input` is `B×C×H×W`, `weight` is
    /// `O×C×kh×kw`; the output is `B×O×((H−kh)/stride+1)×((W−kw)/stride+1)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let xs = self.expect_shape(input, 4, "conv2d input")?.to_vec();
        let ws = self.expect_shape(weight, 4, "conv2d weight")?.to_vec();
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if c != wc {
            return Err(dim_err!(
                "conv2d channel mismatch: input {xs:?} vs weight {ws:?}"
            ));
        }
        if self.shape(bias) != [o] {
            return Err(dim_err!(
                "conv2d bias {:?} does not match {o} output channels",
                self.shape(bias)
            ));
        }
        if stride == 0 {
            return Err(contract_err!("conv2d stride must be positive"));
        }
        if h < kh || w < kw {
            return Err(dim_err!("conv2d input {xs:?} smaller than kernel {ws:?}"));
        }
        let window = Window {
            batch: b,
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
        };
        let (ho, wo) = (window.out_h(), window.out_w());
        let s = ho * wo;
        let cols = window.im2col(self.value(input));
        let mut out_cm = vec![0.0f32; o * b * s];
        gemm(
            o,
            window.col_rows(),
            b * s,
            self.value(weight),
            false,
            &cols,
            false,
            &mut out_cm,
            false,
        );
        let bv = self.value(bias);
        for (oi, row) in out_cm.chunks_mut(b * s).enumerate() {
            row.iter_mut().for_each(|v| *v += bv[oi]);
        }
        let out = channel_major_to_batch_major(&out_cm, b, o, s);
        Ok(self.push(
            vec![b, o, ho, wo],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                window,
                out_channels: o,
            },
            &[input, weight, bias],
        ))
    }

    /// Unpadded transposed convolution, the adjoint of [`Tape::conv2d`].
    /// `input` is `B×C×H×W`, `weight` is `C×O×kh×kw`; the output is
    /// `B×O×((H−1)·stride+kh)×((W−1)·stride+kw)`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var> {
        let xs = self.expect_shape(input, 4, "conv_transpose2d input")?.to_vec();
        let ws = self.expect_shape(weight, 4, "conv_transpose2d weight")?.to_vec();
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (wc, o, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if c != wc {
            return Err(dim_err!(
                "conv_transpose2d channel mismatch: input {xs:?} vs weight {ws:?}"
            ));
        }
        if self.shape(bias) != [o] {
            return Err(dim_err!(
                "conv_transpose2d bias {:?} does not match {o} output channels",
                self.shape(bias)
            ));
        }
        if stride == 0 {
            return Err(contract_err!("conv_transpose2d stride must be positive"));
        }
        let (ho, wo) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
        let window = Window {
            batch: b,
            channels: o,
            height: ho,
            width: wo,
            kh,
            kw,
            stride,
        };
        let x_cm = batch_major_to_channel_major(self.value(input), b, c, h * w);
        let mut cols = vec![0.0f32; window.col_rows() * b * h * w];
        gemm(
            window.col_rows(),
            c,
            b * h * w,
            self.value(weight),
            true,
            &x_cm,
            false,
            &mut cols,
            false,
        );
        let mut out = vec![0.0f32; b * o * ho * wo];
        window.col2im_add(&cols, &mut out);
        let bv = self.value(bias);
        let plane = ho * wo;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bias = bv[i % o];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        Ok(self.push(
            vec![b, o, ho, wo],
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                window,
                in_channels: c,
            },
            &[input, weight, bias],
        ))
    }

    /// Affine map `input (B×n) · weight (n×m) + bias (m)`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.expect_shape(input, 2, "dense input")?.to_vec();
        let ws = self.expect_shape(weight, 2, "dense weight")?.to_vec();
        if xs[1] != ws[0] {
            return Err(dim_err!(
                "dense inner dimensions differ: input {xs:?} vs weight {ws:?}"
            ));
        }
        if self.shape(bias) != [ws[1]] {
            return Err(dim_err!(
                "dense bias {:?} does not match output width {}",
                self.shape(bias),
                ws[1]
            ));
        }
        let (b, n, m) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0f32; b * m];
        for row in out.chunks_mut(m) {
            row.copy_from_slice(self.value(bias));
        }
        gemm(
            b,
            n,
            m,
            self.value(input),
            false,
            self.value(weight),
            false,
            &mut out,
            true,
        );
        Ok(self.push(
            vec![b, m],
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    /// Per-channel batch normalization over axis 1 of a `B×F` or `B×C×H×W`
    /// input. `running` is a `2×C` buffer holding running mean (row 0) and
    /// running variance (row 1); train mode updates it in place.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut Tensor,
        mode: Mode,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(dim_err!("batch_norm expects rank 2 or 4, got {shape:?}"));
        }
        let (b, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.shape() != [2, c] {
            return Err(dim_err!(
                "batch_norm parameters must have {c} channels (gamma {:?}, beta {:?}, running {:?})",
                self.shape(gamma),
                self.shape(beta),
                running.shape()
            ));
        }
        let x = self.value(input);
        let count = b * spatial;
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ci in 0..c {
                    let chan = || (0..b).flat_map(move |bi| &x[(bi * c + ci) * spatial..][..spatial]);
                    let mu = sum_f64(chan().copied()) / count as f64;
                    let v = chan().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / count as f64;
                    mean[ci] = mu;
                    var[ci] = v;
                }
                let (rm, rv) = running.data_mut().split_at_mut(c);
                let unbias = if count > 1 {
                    count as f64 / (count - 1) as f64
                } else {
                    1.0
                };
                for ci in 0..c {
                    rm[ci] = (1.0 - BN_MOMENTUM) * rm[ci] + BN_MOMENTUM * mean[ci] as f32;
                    rv[ci] =
                        (1.0 - BN_MOMENTUM) * rv[ci] + BN_MOMENTUM * (var[ci] * unbias) as f32;
                }
                (mean, var)
            }
            Mode::Eval => {
                let (rm, rv) = running.data().split_at(c);
                (
                    rm.iter().map(|&v| v as f64).collect(),
                    rv.iter().map(|&v| v as f64).collect(),
                )
            }
        };
        let inv_std: Vec<f32> = var
            .iter()
            .map(|v| (1.0 / (v + BN_EPS as f64).sqrt()) as f32)
            .collect();
        let g = self.value(gamma);
        let be = self.value(beta);
        let mut xhat = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * spatial;
                let mu = mean[ci] as f32;
                for s in 0..spatial {
                    let h = (x[off + s] - mu) * inv_std[ci];
                    xhat[off + s] = h;
                    out[off + s] = g[ci] * h + be[ci];
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            &[input, gamma, beta],
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let out: Vec<f32> = self
            .value(input)
            .iter()
            .map(|&x| match kind {
                Activation::Elu => {
                    if x >= 0.0 {
                        x
                    } else {
                        ELU_ALPHA * x.exp_m1()
                    }
                }
                Activation::Relu => x.max(0.0),
                Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            })
            .collect();
        let shape = self.shape(input).to_vec();
        self.push(shape, out, Op::Activation { input, kind }, &[input])
    }

    pub fn elu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Elu)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    fn zip_map(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, &[a, b]))
    }

    fn map(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f32::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// Sum of all elements as a one-element tensor, accumulated in f64.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = sum_f64(self.value(a).iter().copied()) as f32;
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    /// Mean over the leading axis; the output keeps a leading axis of 1.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let rows = shape[0];
        let width = numel(&shape[1..]);
        let x = self.value(a);
        let out = (0..width)
            .map(|j| ((0..rows).map(|i| x[i * width + j] as f64).sum::<f64>() / rows as f64) as f32)
            .collect();
        let mut out_shape = shape;
        out_shape[0] = 1;
        self.push(out_shape, out, Op::MeanRows(a), &[a])
    }

    /// Subtracts `b` (one row) from every row of `a` along the leading axis.
    pub fn sub_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = numel(&shape[1..]);
        if self.value(b).len() != width {
            return Err(dim_err!(
                "sub_rows: row of {:?} does not match rows of {shape:?}",
                self.shape(b)
            ));
        }
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(width)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x - y))
            .collect();
        Ok(self.push(shape, out, Op::SubRows(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(dim_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            ));
        }
        let data = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), &[a]))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err!(
                "narrow [{start}, {}) on axis {axis} out of range for {shape:?}",
                start + len
            ));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let x = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(out_shape, out, Op::Narrow { input: a, axis, start }, &[a]))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(dim_err!("concat shapes {base:?} and {s:?} are incompatible"));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * n..(o + 1) * n]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        Ok(self.push(
            out_shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        let mut leaf: Vec<Option<Vec<f32>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    leaf[i] = Some(vec![0.0; node.data.len()]);
                }
                continue;
            };
            self.backward_node(node, g, &mut grads, &mut leaf[i]);
        }
        // Leaves after the loss are unreachable.
        for i in loss.0 + 1..n {
            if self.nodes[i].requires_grad && matches!(self.nodes[i].op, Op::Leaf) {
                leaf[i] = Some(vec![0.0; self.nodes[i].data.len()]);
            }
        }
        Ok(Grads { leaf })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(
        &self,
        node: &Node,
        g: Vec<f32>,
        grads: &mut [Option<Vec<f32>>],
        leaf_slot: &mut Option<Vec<f32>>,
    ) {
        let mut send = |v: Var, delta: Vec<f32>| {
            if self.wants(v) {
                add_into(&mut grads[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf => *leaf_slot = Some(g),
            Op::Conv2d {
                input,
                weight,
                bias,
                window,
                out_channels,
            } => {
                let o = *out_channels;
                let s = window.out_h() * window.out_w();
                let b = window.batch;
                let g_cm = batch_major_to_channel_major(&g, b, o, s);
                if self.wants(*bias) {
                    send(
                        *bias,
                        g_cm.chunks(b * s).map(|r| sum_f64(r.iter().copied()) as f32).collect(),
                    );
                }
                if self.wants(*weight) {
                    let cols = window.im2col(self.value(*input));
                    let mut dw = vec![0.0f32; o * window.col_rows()];
                    gemm(o, b * s, window.col_rows(), &g_cm, false, &cols, true, &mut dw, false);
                    send(*weight, dw);
                }
                if self.wants(*input) {
                    let mut dcols = vec![0.0f32; window.col_rows() * b * s];
                    gemm(
                        window.col_rows(),
                        o,
                        b * s,
                        self.value(*weight),
                        true,
                        &g_cm,
                        false,
                        &mut dcols,
                        false,
                    );
                    let mut dx = vec![0.0f32; self.value(*input).len()];
                    window.col2im_add(&dcols, &mut dx);
                    send(*input, dx);
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                window,
                in_channels,
            } => {
                let c = *in_channels;
                let o = window.channels;
                let b = window.batch;
                let small = window.out_h() * window.out_w();
                if self.wants(*bias) {
                    let plane = window.height * window.width;
                    let mut db = vec![0.0f64; o];
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        db[i % o] += sum_f64(chunk.iter().copied());
                    }
                    send(*bias, db.into_iter().map(|v| v as f32).collect());
                }
                let need_w = self.wants(*weight);
                let need_x = self.wants(*input);
                if need_w || need_x {
                    let gcols = window.im2col(&g);
                    if need_w {
                        let x_cm = batch_major_to_channel_major(self.value(*input), b, c, small);
                        let mut dw = vec![0.0f32; c * window.col_rows()];
                        gemm(c, b * small, window.col_rows(), &x_cm, false, &gcols, true, &mut dw, false);
                        send(*weight, dw);
                    }
                    if need_x {
                        let mut dx_cm = vec![0.0f32; c * b * small];
                        gemm(
                            c,
                            window.col_rows(),
                            b * small,
                            self.value(*weight),
                            false,
                            &gcols,
                            false,
                            &mut dx_cm,
                            false,
                        );
                        send(*input, channel_major_to_batch_major(&dx_cm, b, c, small));
                    }
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let xs = self.shape(*input);
                let (b, n) = (xs[0], xs[1]);
                let m = self.shape(*weight)[1];
                if self.wants(*bias) {
                    let db = (0..m)
                        .map(|j| (0..b).map(|i| g[i * m + j] as f64).sum::<f64>() as f32)
                        .collect();
                    send(*bias, db);
                }
                if self.wants(*weight) {
                    let mut dw = vec![0.0f32; n * m];
                    gemm(n, b, m, self.value(*input), true, &g, false, &mut dw, false);
                    send(*weight, dw);
                }
                if self.wants(*input) {
                    let mut dx = vec![0.0f32; b * n];
                    gemm(b, m, n, &g, false, self.value(*weight), true, &mut dx, false);
                    send(*input, dx);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let shape = &node.shape;
                let (b, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let count = (b * spatial) as f64;
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * spatial;
                        for s in 0..spatial {
                            sum_g[ci] += g[off + s] as f64;
                            sum_gx[ci] += (g[off + s] * xhat[off + s]) as f64;
                        }
                    }
                }
                if self.wants(*gamma) {
                    send(*gamma, sum_gx.iter().map(|&v| v as f32).collect());
                }
                if self.wants(*beta) {
                    send(*beta, sum_g.iter().map(|&v| v as f32).collect());
                }
                if self.wants(*input) {
                    let gm = self.value(*gamma);
                    let mut dx = vec![0.0f32; g.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * spatial;
                            let k = gm[ci] * inv_std[ci];
                            for s in 0..spatial {
                                let gi = g[off + s];
                                dx[off + s] = match mode {
                                    Mode::Train => {
                                        let mg = (sum_g[ci] / count) as f32;
                                        let mgx = (sum_gx[ci] / count) as f32;
                                        k * (gi - mg - xhat[off + s] * mgx)
                                    }
                                    Mode::Eval => k * gi,
                                };
                            }
                        }
                    }
                    send(*input, dx);
                }
            }
            Op::Activation { input, kind } => {
                let y = &node.data;
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| match kind {
                        Activation::Elu => {
                            if yi >= 0.0 {
                                gi
                            } else {
                                gi * (yi + ELU_ALPHA)
                            }
                        }
                        Activation::Relu => {
                            if yi > 0.0 {
                                gi
                            } else {
                                0.0
                            }
                        }
                        Activation::Sigmoid => gi * yi * (1.0 - yi),
                    })
                    .collect();
                send(*input, dx);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::Sub(a, b) => {
                send(*b, g.iter().map(|v| -v).collect());
                send(*a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, g.iter().zip(bv).map(|(gi, y)| gi * y).collect());
                send(*b, g.iter().zip(av).map(|(gi, x)| gi * x).collect());
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) => send(*a, g),
            Op::Exp(a) => send(*a, g.iter().zip(&node.data).map(|(gi, y)| gi * y).collect()),
            Op::Square(a) => {
                let x = self.value(*a);
                send(*a, g.iter().zip(x).map(|(gi, xi)| 2.0 * gi * xi).collect());
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).len()]),
            Op::MeanRows(a) => {
                let rows = self.shape(*a)[0];
                let inv = 1.0 / rows as f32;
                let row: Vec<f32> = g.iter().map(|v| v * inv).collect();
                send(*a, row.repeat(rows));
            }
            Op::SubRows(a, b) => {
                let width = self.value(*b).len();
                if self.wants(*b) {
                    let mut db = vec![0.0f64; width];
                    for row in g.chunks(width) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d -= *v as f64);
                    }
                    send(*b, db.into_iter().map(|v| v as f32).collect());
                }
                send(*a, g);
            }
            Op::Reshape(a) => send(*a, g),
            Op::Narrow { input, axis, start } => {
                let in_shape = self.shape(*input);
                let outer = numel(&in_shape[..*axis]);
                let inner = numel(&in_shape[axis + 1..]);
                let len = node.shape[*axis];
                let mut dx = vec![0.0f32; self.value(*input).len()];
                for o in 0..outer {
                    let dst = (o * in_shape[*axis] + start) * inner;
                    dx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*input, dx);
            }
            Op::Concat { inputs, axis } => {
                let outer = numel(&node.shape[..*axis]);
                let inner = numel(&node.shape[axis + 1..]);
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(outer * n);
                        for o in 0..outer {
                            dv.extend_from_slice(&g[o * total + offset..o * total + offset + n]);
                        }
                        send(v, dv);
                    }
                    offset += n;
                }
            }
        }
    }
}
