use rand::Rng;

use super::kernels::{self, ConvDims, ConvGrads};
use super::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    TileRows(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis0(Var),
    MeanAxis0(Var),
    SumLast(Var),
    L2NormRows(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
}

/// Every differentiable primitive the tape records, by name.
pub const PRIMITIVE_OPS: &[&str] = &[
    "matmul",
    "add",
    "add_bias",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "concat",
    "slice",
    "reshape",
    "tile_rows",
    "sigmoid",
    "tanh",
    "relu",
    "log",
    "sqrt",
    "square",
    "softmax",
    "log_softmax",
    "layer_norm",
    "dropout",
    "sum",
    "mean",
    "sum_axis0",
    "mean_axis0",
    "sum_last",
    "l2_norm_rows",
    "conv2d",
    "avg_pool2",
    "global_avg_pool",
];

impl Op {
    fn kind(&self) -> Option<&'static str> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::TileRows(..) => "tile_rows",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis0(..) => "sum_axis0",
            Op::MeanAxis0(..) => "mean_axis0",
            Op::SumLast(..) => "sum_last",
            Op::L2NormRows(..) => "l2_norm_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2(..) => "avg_pool2",
            Op::GlobalAvgPool(..) => "global_avg_pool",
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape. Nodes are created in topological order, so
/// backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let rows = shape.iter().product::<usize>().checked_div(cols).unwrap_or(0);
    (rows, cols)
}

/// (outer, axis length, inner) decomposition for axis-wise concat/slice.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
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

    /// Names of the primitives recorded on this tape.
    pub fn op_kinds(&self) -> std::collections::BTreeSet<&'static str> {
        self.nodes.iter().filter_map(|n| n.op.kind()).collect()
    }

    /// Gradient of the last `backward` call, if this node received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericFault(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect())?;
        self.push(name, value, op, &[a])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(name, value, op, &[a, b])
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a 1-D bias along the last axis; the only broadcast the graph supports.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", sa, sb));
        }
        let n = sb[0];
        let b = self.data(bias);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x + b[i % n]).collect();
        let value = Tensor::new(sa, data)?;
        self.push("add_bias", value, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let (outer, alen, inner) = split_at_axis(&shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let value = Tensor::new(&s, out)?;
        self.push("slice", value, Op::Slice { input: a, axis, start }, &[a])
    }

    /// Row `t` of a 2-D tensor as a `[1 × cols]` tensor.
    pub fn row(&mut self, a: Var, t: usize) -> Result<Var> {
        self.slice(a, 0, t, 1)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Repeat a `[1 × n]` (or `[n]`) tensor into `[rows × n]`.
    pub fn tile_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, n) = rows_cols(t.shape());
        if r != 1 {
            return Err(Error::shape("tile_rows", t.shape(), &[1, n]));
        }
        let data = t.data().repeat(rows);
        let value = Tensor::new(&[rows, n], data)?;
        self.push("tile_rows", value, Op::TileRows(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = rows_cols(t.shape());
        let mut out = t.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(t.shape(), out)?;
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = rows_cols(t.shape());
        let mut out = t.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(t.shape(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax(a), &[a])
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`, each shaped either `[n]` or like `x`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&sx);
        for p in [gain, bias] {
            let sp = self.shape(p);
            if !(sp == [cols] || sp == sx.as_slice()) {
                return Err(Error::shape("layer_norm", &sx, sp));
            }
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let (gl, bl) = (g.len(), b.len());
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let i = r * cols + c;
                xhat[i] = (row[c] - mean) * is;
                out[i] = xhat[i] * g[i % gl] + b[i % bl];
            }
        }
        let value = Tensor::new(&sx, out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Inverted dropout with keep-scaling; the mask comes from `rng`, which
    /// callers key by (seed, layer, timestep).
    pub fn dropout_mask(&mut self, a: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        let n = self.value(a).numel();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(t.shape(), data)?;
        self.push("dropout_mask", value, Op::Dropout { input: a, mask }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a);
        if d.is_empty() {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    fn reduce_axis0(&mut self, a: Var) -> Result<(Vec<usize>, Vec<f64>, usize)> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || shape[0] == 0 {
            return Err(Error::shape("reduce_axis0", &shape, &[]));
        }
        let rows = shape[0];
        let inner: usize = shape[1..].iter().product();
        let mut out = vec![0.0; inner];
        for r in 0..rows {
            kernels::axpy(&mut out, 1.0, &self.data(a)[r * inner..(r + 1) * inner]);
        }
        Ok((shape[1..].to_vec(), out, rows))
    }

    /// Sum over the leading axis, `[r × ...] -> [...]`.
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        let (shape, out, _) = self.reduce_axis0(a)?;
        self.push("sum_axis0", Tensor::new(&shape, out)?, Op::SumAxis0(a), &[a])
    }

    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let (shape, mut out, rows) = self.reduce_axis0(a)?;
        out.iter_mut().for_each(|v| *v /= rows as f64);
        self.push("mean_axis0", Tensor::new(&shape, out)?, Op::MeanAxis0(a), &[a])
    }

    /// Sum over the last axis, `[... × n] -> [...]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = rows_cols(&shape);
        let d = self.data(a);
        let out = (0..rows).map(|r| d[r * cols..(r + 1) * cols].iter().sum()).collect();
        let s = &shape[..shape.len().saturating_sub(1)];
        self.push("sum_last", Tensor::new(s, out)?, Op::SumLast(a), &[a])
    }

    /// Euclidean norm of each row of a 2-D tensor, `[t × n] -> [t]`.
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("l2_norm_rows", &shape, &[]));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let d = self.data(a);
        let out = (0..rows)
            .map(|r| kernels::dot(&d[r * cols..(r + 1) * cols], &d[r * cols..(r + 1) * cols]).sqrt())
            .collect();
        self.push("l2_norm_rows", Tensor::new(&[rows], out)?, Op::L2NormRows(a), &[a])
    }

    /// Same-padded stride-1 convolution, `x: [N,C,H,W]`, `w: [O,C,K,K]` (K odd), `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let d = self.conv_dims(x, w, b)?;
        let out = kernels::conv2d(self.data(x), self.data(w), self.data(b), d);
        let value = Tensor::new(&[d.batch, d.out_ch, d.height, d.width], out)?;
        self.push("conv2d", value, Op::Conv2d { x, w, b }, &[x, w, b])
    }

    fn conv_dims(&self, x: Var, w: Var, b: Var) -> Result<ConvDims> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let ok = sx.len() == 4 && sw.len() == 4 && sw[1] == sx[1] && sw[2] == sw[3] && sw[2] % 2 == 1 && sb == [sw[0]];
        if !ok {
            return Err(Error::shape("conv2d", sx, sw));
        }
        Ok(ConvDims {
            batch: sx[0],
            in_ch: sx[1],
            out_ch: sw[0],
            height: sx[2],
            width: sx[3],
            kernel: sw[2],
        })
    }

    /// 2×2 average pooling over the trailing two axes of `[N,C,H,W]`; odd edges are dropped.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("avg_pool2", &s, &[]));
        }
        let (h2, w2) = (s[2] / 2, s[3] / 2);
        let src = self.data(a);
        let mut out = Vec::with_capacity(s[0] * s[1] * h2 * w2);
        for p in 0..s[0] * s[1] {
            let plane = &src[p * s[2] * s[3]..];
            for y in 0..h2 {
                for x in 0..w2 {
                    let i = 2 * y * s[3] + 2 * x;
                    out.push(0.25 * (plane[i] + plane[i + 1] + plane[i + s[3]] + plane[i + s[3] + 1]));
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], h2, w2], out)?;
        self.push("avg_pool2", value, Op::AvgPool2(a), &[a])
    }

    /// `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", &s, &[]));
        }
        let plane = s[2] * s[3];
        let src = self.data(a);
        let out = (0..s[0] * s[1])
            .map(|p| src[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(&[s[0], s[1]], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(a), &[a])
    }

    // ---- composite helpers -------------------------------------------------

    /// `x · w + b` for `x: [r × i]`, `w: [i × o]`, `b: [o]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Softmax cross-entropy of a single logit row against `class`.
    pub fn cross_entropy(&mut self, logits: Var, class: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (rows, cols) = rows_cols(&shape);
        if rows != 1 {
            return Err(Error::shape("cross_entropy", &shape, &[1, cols]));
        }
        if class >= cols {
            return Err(Error::invalid(format!("class {class} out of range for {cols} classes")));
        }
        let flat = self.reshape(logits, &[1, cols])?;
        let lsm = self.log_softmax(flat)?;
        let picked = self.slice(lsm, 1, class, 1)?;
        let s = self.sum(picked)?;
        self.scale(s, -1.0)
    }

    /// Mean softmax cross-entropy of each row of `logits: [B × C]` against `classes[b]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != classes.len() || classes.is_empty() {
            return Err(Error::shape("cross_entropy_rows", &shape, &[classes.len()]));
        }
        let cols = shape[1];
        let mut onehot = vec![0.0; classes.len() * cols];
        for (b, &c) in classes.iter().enumerate() {
            if c >= cols {
                return Err(Error::invalid(format!("class {c} out of range for {cols} classes")));
            }
            onehot[b * cols + c] = 1.0;
        }
        let lsm = self.log_softmax(logits)?;
        let mask = self.constant(Tensor::new(&shape, onehot)?);
        let picked = self.mul(lsm, mask)?;
        let s = self.sum(picked)?;
        self.scale(s, -1.0 / classes.len() as f64)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across reuse.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let Graph { nodes, grads } = self;
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.requires_grad {
                propagate(nodes, grads, i, &g)?;
            }
            grads[i] = Some(g);
        }
        // Only keep gradients for nodes that track them.
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn acc_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]))
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
    if let Some(slot) = acc_slot(nodes, grads, v) {
        for (i, s) in slot.iter_mut().enumerate() {
            *s += f(i);
        }
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) -> Result<()> {
    let out = nodes[i].value.data();
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if let Some(da) = acc_slot(nodes, grads, *a) {
                kernels::matmul_grad_lhs(g, val(*b), da, m, k, n);
            }
            if let Some(db) = acc_slot(nodes, grads, *b) {
                kernels::matmul_grad_rhs(val(*a), g, db, m, k, n);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |j| g[j]);
            accumulate(nodes, grads, *b, |j| g[j]);
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |j| g[j]);
            accumulate(nodes, grads, *b, |j| -g[j]);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |j| g[j] * vb[j]);
            accumulate(nodes, grads, *b, |j| g[j] * va[j]);
        }
        Op::AddBias(a, b) => {
            accumulate(nodes, grads, *a, |j| g[j]);
            if let Some(db) = acc_slot(nodes, grads, *b) {
                let n = db.len();
                for (j, gv) in g.iter().enumerate() {
                    db[j % n] += gv;
                }
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, |j| c * g[j]),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, |j| g[j]),
        Op::Concat { inputs, axis } => {
            let shape = nodes[i].value.shape();
            let (outer, total, inner) = split_at_axis(shape, *axis);
            let mut offset = 0;
            for v in inputs {
                let len = nodes[v.0].value.shape()[*axis] * inner;
                if let Some(slot) = acc_slot(nodes, grads, *v) {
                    for o in 0..outer {
                        let src = &g[o * total * inner + offset..][..len];
                        kernels::axpy(&mut slot[o * len..(o + 1) * len], 1.0, src);
                    }
                }
                offset += len;
            }
        }
        Op::Slice { input, axis, start } => {
            let in_shape = nodes[input.0].value.shape();
            let len = nodes[i].value.shape()[*axis];
            let (outer, alen, inner) = split_at_axis(in_shape, *axis);
            if let Some(slot) = acc_slot(nodes, grads, *input) {
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    kernels::axpy(
                        &mut slot[dst..dst + len * inner],
                        1.0,
                        &g[o * len * inner..(o + 1) * len * inner],
                    );
                }
            }
        }
        Op::TileRows(a) => {
            if let Some(slot) = acc_slot(nodes, grads, *a) {
                let n = slot.len();
                for (j, gv) in g.iter().enumerate() {
                    slot[j % n] += gv;
                }
            }
        }
        Op::Sigmoid(a) => accumulate(nodes, grads, *a, |j| g[j] * out[j] * (1.0 - out[j])),
        Op::Tanh(a) => accumulate(nodes, grads, *a, |j| g[j] * (1.0 - out[j] * out[j])),
        Op::Relu(a) => {
            let va = val(*a);
            accumulate(nodes, grads, *a, |j| if va[j] > 0.0 { g[j] } else { 0.0 })
        }
        Op::Log(a) => {
            let va = val(*a);
            accumulate(nodes, grads, *a, |j| g[j] / va[j])
        }
        Op::Sqrt(a) => accumulate(
            nodes,
            grads,
            *a,
            |j| {
                if out[j] > 0.0 {
                    g[j] * 0.5 / out[j]
                } else {
                    0.0
                }
            },
        ),
        Op::Square(a) => {
            let va = val(*a);
            accumulate(nodes, grads, *a, |j| 2.0 * va[j] * g[j])
        }
        Op::Softmax(a) => {
            let (rows, cols) = rows_cols(nodes[i].value.shape());
            let mut dx = vec![0.0; g.len()];
            for r in 0..rows {
                let (y, gy) = (&out[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                let d = kernels::dot(y, gy);
                for c in 0..cols {
                    dx[r * cols + c] = y[c] * (gy[c] - d);
                }
            }
            accumulate(nodes, grads, *a, |j| dx[j]);
        }
        Op::LogSoftmax(a) => {
            let (rows, cols) = rows_cols(nodes[i].value.shape());
            let mut dx = vec![0.0; g.len()];
            for r in 0..rows {
                let gy = &g[r * cols..(r + 1) * cols];
                let s: f64 = gy.iter().sum();
                for c in 0..cols {
                    dx[r * cols + c] = gy[c] - out[r * cols + c].exp() * s;
                }
            }
            accumulate(nodes, grads, *a, |j| dx[j]);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let (rows, cols) = rows_cols(nodes[i].value.shape());
            let gd = val(*gain);
            let gl = gd.len();
            if nodes[x.0].requires_grad {
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let base = r * cols;
                    let dxhat: Vec<f64> = (0..cols).map(|c| g[base + c] * gd[(base + c) % gl]).collect();
                    let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                    let m2 = dxhat
                        .iter()
                        .zip(&xhat[base..base + cols])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / cols as f64;
                    for c in 0..cols {
                        dx[base + c] = inv_std[r] * (dxhat[c] - m1 - xhat[base + c] * m2);
                    }
                }
                accumulate(nodes, grads, *x, |j| dx[j]);
            }
            if let Some(slot) = acc_slot(nodes, grads, *gain) {
                let n = slot.len();
                for (j, gv) in g.iter().enumerate() {
                    slot[j % n] += gv * xhat[j];
                }
            }
            if let Some(slot) = acc_slot(nodes, grads, *bias) {
                let n = slot.len();
                for (j, gv) in g.iter().enumerate() {
                    slot[j % n] += gv;
                }
            }
        }
        Op::Dropout { input, mask } => accumulate(nodes, grads, *input, |j| g[j] * mask[j]),
        Op::Sum(a) => accumulate(nodes, grads, *a, |_| g[0]),
        Op::Mean(a) => {
            let n = nodes[a.0].value.numel() as f64;
            accumulate(nodes, grads, *a, |_| g[0] / n)
        }
        Op::SumAxis0(a) | Op::MeanAxis0(a) => {
            let rows = nodes[a.0].value.shape()[0] as f64;
            let c = if matches!(nodes[i].op, Op::MeanAxis0(_)) {
                1.0 / rows
            } else {
                1.0
            };
            let inner = g.len();
            accumulate(nodes, grads, *a, |j| c * g[j % inner]);
        }
        Op::SumLast(a) => {
            let cols = nodes[a.0].value.last_dim();
            accumulate(nodes, grads, *a, |j| g[j / cols]);
        }
        Op::L2NormRows(a) => {
            let cols = nodes[a.0].value.last_dim();
            let va = val(*a);
            accumulate(nodes, grads, *a, |j| {
                let n = out[j / cols];
                if n > 0.0 {
                    g[j / cols] * va[j] / n
                } else {
                    0.0
                }
            });
        }
        Op::Conv2d { x, w, b } => {
            let sx = nodes[x.0].value.shape();
            let sw = nodes[w.0].value.shape();
            let d = ConvDims {
                batch: sx[0],
                in_ch: sx[1],
                out_ch: sw[0],
                height: sx[2],
                width: sx[3],
                kernel: sw[2],
            };
            let (xv, wv) = (val(*x).to_vec(), val(*w).to_vec());
            let mut dx = nodes[x.0].requires_grad.then(|| vec![0.0; xv.len()]);
            let mut dw = nodes[w.0].requires_grad.then(|| vec![0.0; wv.len()]);
            let mut db = nodes[b.0].requires_grad.then(|| vec![0.0; sw[0]]);
            kernels::conv2d_backward(
                &xv,
                &wv,
                g,
                d,
                ConvGrads {
                    dx: dx.as_deref_mut(),
                    dw: dw.as_deref_mut(),
                    db: db.as_deref_mut(),
                },
            );
            for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                if let Some(d) = d {
                    accumulate(nodes, grads, v, |j| d[j]);
                }
            }
        }
        Op::AvgPool2(a) => {
            let s = nodes[a.0].value.shape().to_vec();
            let (h2, w2) = (s[2] / 2, s[3] / 2);
            if let Some(slot) = acc_slot(nodes, grads, *a) {
                for p in 0..s[0] * s[1] {
                    for y in 0..h2 {
                        for x in 0..w2 {
                            let gv = 0.25 * g[(p * h2 + y) * w2 + x];
                            let i = p * s[2] * s[3] + 2 * y * s[3] + 2 * x;
                            slot[i] += gv;
                            slot[i + 1] += gv;
                            slot[i + s[3]] += gv;
                            slot[i + s[3] + 1] += gv;
                        }
                    }
                }
            }
        }
        Op::GlobalAvgPool(a) => {
            let s = nodes[a.0].value.shape();
            let plane = s[2] * s[3];
            accumulate(nodes, grads, *a, |j| g[j / plane] / plane as f64);
        }
    }
    Ok(())
}
