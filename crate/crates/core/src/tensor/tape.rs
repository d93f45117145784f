//! Per-op reverse-mode tape.
//!
//! Every operation appends one node holding its output value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a valid reverse topological order because inputs
//! always precede outputs.

use super::{gemm, matmul_dims, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Powf(Var, f64),
    Softmax {
        x: Var,
        axis: AxisSplit,
    },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    Select(Var, usize),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    BceWithLogits(Var, Vec<f64>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Affine(..) => "affine",
            Op::MatMul(..) => "matmul",
            Op::Bmm(..) => "bmm",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Powf(..) => "powf",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather(..) => "gather",
            Op::Select(..) => "select",
            Op::Concat(..) => "concat",
            Op::Stack(..) => "stack",
            Op::Pick(..) => "pick",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::BceWithLogits(..) => "bce_with_logits",
        }
    }
}

/// A tensor viewed as `[outer, len, inner]` around one reduction axis.
#[derive(Debug, Clone, Copy)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisSplit {
    fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    fn index(&self, o: usize, t: usize, i: usize) -> usize {
        (o * self.len + t) * self.inner + i
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("shape recorded"))
    }

    /// Gradient as a flat slice, zeros if the node did not influence the output.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
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

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) | Op::Bmm(a, b) => {
                self.requires(*a) || self.requires(*b)
            }
            Op::Affine(x, _)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Tanh(x)
            | Op::Gelu(x)
            | Op::Exp(x)
            | Op::Powf(x, _)
            | Op::Softmax { x, .. }
            | Op::LogSoftmax(x)
            | Op::Gather(x, _)
            | Op::Select(x, _)
            | Op::Pick(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::BceWithLogits(x, _) => self.requires(*x),
            Op::LayerNorm { x, gain, bias, .. } => {
                self.requires(*x) || self.requires(*gain) || self.requires(*bias)
            }
            Op::Concat(xs) | Op::Stack(xs) => xs.iter().any(|x| self.requires(*x)),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        let v = self.push(value, Op::Leaf)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b))
    }

    /// Element-wise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = bv.numel();
        if bv.ndim() != 1 || xv.shape().last() != Some(&n) {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::AddBias(x, bias))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    /// `x · w + b` over the last axis of `x` (any leading shape).
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d_in = *shape.last().ok_or_else(|| Error::shape("linear", &shape, &[]))?;
        let rows = shape.iter().product::<usize>() / d_in.max(1);
        let flat = self.reshape(x, &[rows, d_in])?;
        let h = self.matmul(flat, weight)?;
        let h = self.add_bias(h, bias)?;
        let d_out = self.shape(h)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = d_out;
        self.reshape(h, &out_shape)
    }

    /// Batched product `[n, m, k] × [n, k, p] → [n, m, p]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (n, m, k, p) = match (x.shape(), y.shape()) {
            ([n, m, k], [n2, k2, p]) if n == n2 && k == k2 => (*n, *m, *k, *p),
            (l, r) => return Err(Error::shape("bmm", l, r)),
        };
        let mut out = vec![0.0; n * m * p];
        for i in 0..n {
            gemm(
                m,
                k,
                p,
                &x.data()[i * m * k..(i + 1) * m * k],
                false,
                &y.data()[i * k * p..(i + 1) * k * p],
                false,
                &mut out[i * m * p..(i + 1) * m * p],
                0.0,
            );
        }
        let out = Tensor::new(vec![n, m, p], out)?;
        self.push(out, Op::Bmm(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let nd = xv.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", xv.shape(), axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| xv.shape()[a]).collect();
        let data = permute_data(xv.data(), xv.shape(), axes);
        let out = Tensor::new(out_shape, data)?;
        self.push(out, Op::Permute(x, axes.to_vec()))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)));
        self.push(out, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    /// `x^p` for nonnegative `x`.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("powf of a negative base".into()));
        }
        let out = xv.map(|v| v.powf(p));
        self.push(out, Op::Powf(x, p))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.value(x).numel();
        self.softmax_impl(x, axis, None, n)
    }

    /// Softmax along the last axis where `keep[i] == false` positions get
    /// exactly zero weight. `keep` has the same number of elements as `x`.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::shape("masked_softmax", &shape, &[]));
        }
        let n = self.value(x).numel();
        if keep.len() != n {
            return Err(Error::shape("masked_softmax", &shape, &[keep.len()]));
        }
        self.softmax_impl(x, shape.len() - 1, Some(keep), n)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, keep: Option<&[bool]>, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {:?}",
                xv.shape()
            )));
        }
        let split = AxisSplit::new(xv.shape(), axis);
        if split.len == 0 {
            return Err(Error::InvalidArgument("softmax over an empty axis".into()));
        }
        let data = xv.data();
        let mut out = vec![0.0; n];
        let kept = |idx: usize| keep.is_none_or(|k| k[idx]);
        for o in 0..split.outer {
            for i in 0..split.inner {
                let mut max = f64::NEG_INFINITY;
                for t in 0..split.len {
                    let idx = split.index(o, t, i);
                    if kept(idx) {
                        max = max.max(data[idx]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::InvalidArgument(
                        "softmax with every position masked".into(),
                    ));
                }
                let mut sum = 0.0;
                for t in 0..split.len {
                    let idx = split.index(o, t, i);
                    if kept(idx) {
                        let e = (data[idx] - max).exp();
                        out[idx] = e;
                        sum += e;
                    }
                }
                for t in 0..split.len {
                    out[split.index(o, t, i)] /= sum;
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(out, Op::Softmax { x, axis: split })
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let k = match xv.shape().last() {
            Some(&k) if k > 0 => k,
            _ => return Err(Error::InvalidArgument("log_softmax over an empty axis".into())),
        };
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(out, Op::LogSoftmax(x))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = match xv.shape().last() {
            Some(&d) if d > 0 => d,
            _ => return Err(Error::InvalidArgument("layer_norm over an empty feature axis".into())),
        };
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Rows of a `[vocab, d]` table, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = match tv.shape() {
            [r, d] => (*r, *d),
            s => return Err(Error::shape("gather", s, &[ids.len()])),
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "index {bad} out of range for table with {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    /// Position `t` of every sequence in a `[b, len, d]` tensor → `[b, d]`.
    pub fn select(&mut self, x: Var, t: usize) -> Result<Var> {
        let xv = self.value(x);
        let (b, len, d) = match xv.shape() {
            [b, l, d] if t < *l => (*b, *l, *d),
            s => return Err(Error::shape("select", s, &[t])),
        };
        let mut out = Vec::with_capacity(b * d);
        for i in 0..b {
            let start = (i * len + t) * d;
            out.extend_from_slice(&xv.data()[start..start + d]);
        }
        let out = Tensor::new(vec![b, d], out)?;
        self.push(out, Op::Select(x, t))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| {
            Error::InvalidArgument("concat of zero tensors".into())
        })?)
        .to_vec();
        let lead = &first[..first.len() - 1];
        let rows: usize = lead.iter().product();
        let mut width = 0;
        for &x in xs {
            let s = self.shape(x);
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat", &first, s));
            }
            width += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &x in xs {
                let xv = self.value(x);
                let w = *xv.shape().last().unwrap();
                out.extend_from_slice(&xv.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::Concat(xs.to_vec()))
    }

    /// Stacks `n` tensors of shape `[b, d]` into `[b, n, d]`.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| {
                Error::InvalidArgument("stack of zero tensors".into())
            })?)
            .to_vec();
        let (b, d) = match first.as_slice() {
            [b, d] => (*b, *d),
            s => return Err(Error::shape("stack", s, &[])),
        };
        for &x in xs {
            if self.shape(x) != first.as_slice() {
                return Err(Error::shape("stack", &first, self.shape(x)));
            }
        }
        let n = xs.len();
        let mut out = vec![0.0; b * n * d];
        for (j, &x) in xs.iter().enumerate() {
            let xv = self.value(x).data();
            for i in 0..b {
                out[(i * n + j) * d..(i * n + j + 1) * d].copy_from_slice(&xv[i * d..(i + 1) * d]);
            }
        }
        let out = Tensor::new(vec![b, n, d], out)?;
        self.push(out, Op::Stack(xs.to_vec()))
    }

    /// `out[i] = x[i, idx[i]]` for `x` of shape `[n, k]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, k) = match xv.shape() {
            [n, k] if *n == idx.len() => (*n, *k),
            s => return Err(Error::shape("pick", s, &[idx.len()])),
        };
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(Error::InvalidArgument(format!(
                "class index {bad} out of range for {k} classes"
            )));
        }
        let out = (0..n).map(|i| xv.data()[i * k + idx[i]]).collect();
        let out = Tensor::new(vec![n], out)?;
        self.push(out, Op::Pick(x, idx.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Per-element binary cross-entropy of logits `z` against targets in
    /// `{0, 1}`, via `max(z, 0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64]) -> Result<Var> {
        let zv = self.value(z);
        if zv.numel() != targets.len() {
            return Err(Error::shape("bce_with_logits", zv.shape(), &[targets.len()]));
        }
        let out = zv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .collect();
        let out = Tensor::new(zv.shape().to_vec(), out)?;
        self.push(out, Op::BceWithLogits(z, targets.to_vec()))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut shapes: Vec<Vec<usize>> =
            self.nodes[..=output.0].iter().map(|n| n.value.shape().to_vec()).collect();
        shapes.resize(self.nodes.len(), Vec::new());
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| add_into(acc, g));
                self.accumulate(grads, *b, |acc| add_into(acc, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |acc| {
                    for ((s, gi), bi) in acc.iter_mut().zip(g).zip(bv) {
                        *s += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for ((s, gi), ai) in acc.iter_mut().zip(g).zip(av) {
                        *s += gi * ai;
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, |acc| add_into(acc, g));
                let n = self.value(*b).numel();
                self.accumulate(grads, *b, |acc| {
                    for row in g.chunks(n) {
                        add_into(acc, row);
                    }
                });
            }
            Op::Affine(x, scale) => {
                self.accumulate(grads, *x, |acc| {
                    for (s, gi) in acc.iter_mut().zip(g) {
                        *s += scale * gi;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = matmul_dims(av.shape(), bv.shape()).expect("checked in forward");
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                self.accumulate(grads, *a, |acc| gemm(m, n, k, g, false, bv.data(), true, acc, 1.0));
                self.accumulate(grads, *b, |acc| gemm(k, m, n, av.data(), true, g, false, acc, 1.0));
            }
            Op::Bmm(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bn, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let p = bv.shape()[2];
                self.accumulate(grads, *a, |acc| {
                    for i in 0..bn {
                        gemm(
                            m,
                            p,
                            k,
                            &g[i * m * p..(i + 1) * m * p],
                            false,
                            &bv.data()[i * k * p..(i + 1) * k * p],
                            true,
                            &mut acc[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for i in 0..bn {
                        gemm(
                            k,
                            m,
                            p,
                            &av.data()[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * p..(i + 1) * m * p],
                            false,
                            &mut acc[i * k * p..(i + 1) * k * p],
                            1.0,
                        );
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |acc| add_into(acc, g)),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                self.accumulate(grads, *x, |acc| add_into(acc, &back));
            }
            Op::Tanh(x) => self.accumulate(grads, *x, |acc| {
                for ((s, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                    *s += gi * (1.0 - yi * yi);
                }
            }),
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
                self.accumulate(grads, *x, |acc| {
                    for ((s, gi), &v) in acc.iter_mut().zip(g).zip(xv) {
                        let cdf = 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
                        let pdf = norm * (-0.5 * v * v).exp();
                        *s += gi * (cdf + v * pdf);
                    }
                });
            }
            Op::Exp(x) => self.accumulate(grads, *x, |acc| {
                for ((s, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                    *s += gi * yi;
                }
            }),
            Op::Powf(x, p) => {
                if *p == 0.0 {
                    return;
                }
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |acc| {
                    for ((s, gi), &v) in acc.iter_mut().zip(g).zip(xv) {
                        // 0 · ∞ at a zero base with p < 1 contributes nothing.
                        if *gi != 0.0 {
                            *s += gi * p * v.powf(p - 1.0);
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => self.accumulate(grads, *x, |acc| {
                for o in 0..axis.outer {
                    for i in 0..axis.inner {
                        let dot: f64 = (0..axis.len)
                            .map(|t| {
                                let j = axis.index(o, t, i);
                                g[j] * y[j]
                            })
                            .sum();
                        for t in 0..axis.len {
                            let j = axis.index(o, t, i);
                            acc[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }),
            Op::LogSoftmax(x) => {
                let k = *node.value.shape().last().unwrap();
                self.accumulate(grads, *x, |acc| {
                    for ((arow, grow), yrow) in acc.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                        let total: f64 = grow.iter().sum();
                        for j in 0..k {
                            arow[j] += grow[j] - yrow[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                self.accumulate(grads, *x, |acc| {
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            acc[r * d + j] += inv * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
                self.accumulate(grads, *gain, |acc| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            acc[j] += grow[j] * hrow[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |acc| {
                    for grow in g.chunks(d) {
                        add_into(acc, grow);
                    }
                });
            }
            Op::Gather(table, ids) => {
                let d = self.value(*table).shape()[1];
                self.accumulate(grads, *table, |acc| {
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(&mut acc[id * d..(id + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                });
            }
            Op::Select(x, t) => {
                let s = self.value(*x).shape();
                let (b, len, d) = (s[0], s[1], s[2]);
                self.accumulate(grads, *x, |acc| {
                    for i in 0..b {
                        let start = (i * len + t) * d;
                        add_into(&mut acc[start..start + d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::Concat(xs) => {
                let width = *node.value.shape().last().unwrap();
                let rows = node.value.numel() / width.max(1);
                let mut offset = 0;
                for &x in xs {
                    let w = *self.value(x).shape().last().unwrap();
                    self.accumulate(grads, x, |acc| {
                        for r in 0..rows {
                            add_into(
                                &mut acc[r * w..(r + 1) * w],
                                &g[r * width + offset..r * width + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Stack(xs) => {
                let s = node.value.shape();
                let (b, n, d) = (s[0], s[1], s[2]);
                for (j, &x) in xs.iter().enumerate() {
                    self.accumulate(grads, x, |acc| {
                        for i in 0..b {
                            add_into(
                                &mut acc[i * d..(i + 1) * d],
                                &g[(i * n + j) * d..(i * n + j + 1) * d],
                            );
                        }
                    });
                }
            }
            Op::Pick(x, idx) => {
                let k = self.value(*x).shape()[1];
                self.accumulate(grads, *x, |acc| {
                    for (i, &c) in idx.iter().enumerate() {
                        acc[i * k + c] += g[i];
                    }
                });
            }
            Op::Sum(x) => self.accumulate(grads, *x, |acc| acc.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                self.accumulate(grads, *x, |acc| acc.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::BceWithLogits(z, targets) => {
                let zv = self.value(*z).data();
                self.accumulate(grads, *z, |acc| {
                    for (((s, gi), &zi), &t) in acc.iter_mut().zip(g).zip(zv).zip(targets) {
                        *s += gi * (super::sigmoid(zi) - t);
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; nd];
    for _ in 0..data.len() {
        let src: usize = counter.iter().zip(&strides).map(|(c, s)| c * s).sum();
        out.push(data[src]);
        for ax in (0..nd).rev() {
            counter[ax] += 1;
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    out
}
