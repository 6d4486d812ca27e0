use crate::kernels::{self, ConvGeom};
use crate::{Element, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every differentiable primitive the graph can record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Matmul,
    Conv2d,
    GlobalAvgPool,
    MaxPool,
    Relu,
    Sigmoid,
    Softmax,
    LogSoftmax,
    Concat,
    ChannelScale,
    Add,
    Sub,
    Mul,
    Div,
    Mean,
    Sum,
    Variance,
    Sqrt,
    Log,
    Exp,
    Abs,
    L2Normalize,
    Reshape,
    Gather,
    Scale,
}

impl Primitive {
    pub const ALL: [Primitive; 25] = [
        Primitive::Matmul,
        Primitive::Conv2d,
        Primitive::GlobalAvgPool,
        Primitive::MaxPool,
        Primitive::Relu,
        Primitive::Sigmoid,
        Primitive::Softmax,
        Primitive::LogSoftmax,
        Primitive::Concat,
        Primitive::ChannelScale,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Div,
        Primitive::Mean,
        Primitive::Sum,
        Primitive::Variance,
        Primitive::Sqrt,
        Primitive::Log,
        Primitive::Exp,
        Primitive::Abs,
        Primitive::L2Normalize,
        Primitive::Reshape,
        Primitive::Gather,
        Primitive::Scale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Conv2d => "conv2d",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::MaxPool => "max_pool",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Concat => "concat",
            Primitive::ChannelScale => "channel_scale",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::Variance => "variance",
            Primitive::Sqrt => "sqrt",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Abs => "abs",
            Primitive::L2Normalize => "l2_normalize",
            Primitive::Reshape => "reshape",
            Primitive::Gather => "gather",
            Primitive::Scale => "scale",
        }
    }
}

/// Reduction extent for `mean` and `sum`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    All,
    Last,
}

/// Per-primitive attributes for [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Attrs {
    None,
    Conv { stride: usize, padding: usize },
    Pool { kernel: usize, stride: usize, padding: usize },
    Axis(Axis),
    Shape(Vec<usize>),
    Indices(Vec<usize>),
    Factor(f64),
}

enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    GlobalAvgPool(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    ChannelScale(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Mean(Var, Axis),
    Sum(Var, Axis),
    Variance(Var),
    Sqrt(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    L2Normalize { x: Var, norms: Vec<T> },
    Reshape(Var),
    Gather { x: Var, idx: Vec<usize> },
    Scale(Var, T),
}

impl<T> Op<T> {
    fn kind(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf => return None,
            Op::Matmul(..) => Primitive::Matmul,
            Op::Conv2d { .. } => Primitive::Conv2d,
            Op::GlobalAvgPool(_) => Primitive::GlobalAvgPool,
            Op::MaxPool { .. } => Primitive::MaxPool,
            Op::Relu(_) => Primitive::Relu,
            Op::Sigmoid(_) => Primitive::Sigmoid,
            Op::Softmax(_) => Primitive::Softmax,
            Op::LogSoftmax(_) => Primitive::LogSoftmax,
            Op::Concat(_) => Primitive::Concat,
            Op::ChannelScale(..) => Primitive::ChannelScale,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Div(..) => Primitive::Div,
            Op::Mean(..) => Primitive::Mean,
            Op::Sum(..) => Primitive::Sum,
            Op::Variance(_) => Primitive::Variance,
            Op::Sqrt(_) => Primitive::Sqrt,
            Op::Log(_) => Primitive::Log,
            Op::Exp(_) => Primitive::Exp,
            Op::Abs(_) => Primitive::Abs,
            Op::L2Normalize { .. } => Primitive::L2Normalize,
            Op::Reshape(_) => Primitive::Reshape,
            Op::Gather { .. } => Primitive::Gather,
            Op::Scale(..) => Primitive::Scale,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    faulty: bool,
}

/// Computation tape.
///
/// Nodes are appended in evaluation order, so every input of node `k` has an
/// index below `k` and the reverse sweep in [`Graph::backward`] is a valid
/// topological order.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    warnings: Vec<String>,
    fault: Option<Primitive>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcastable(a: &[usize], b: &[usize], nb: usize) -> bool {
    nb == 1 || a == b || (b.len() < a.len() && a.ends_with(b))
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            warnings: Vec::new(),
            fault: None,
        }
    }

    /// Testing hook: nodes of `kind` recorded while the fault is set get a
    /// backward rule scaled by 1.5, so gradient checks can demonstrate they
    /// catch a broken rule.
    pub fn corrupt_backward(&mut self, kind: Option<Primitive>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Warnings raised by stabilized primitives (zero-vector normalization).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            faulty: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on `v` by the last [`Graph::backward`]. Leaves
    /// that were unreachable from the root get an all-zero gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = self.nodes.get(v.0)?;
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Some(Tensor::new(shape, g.clone()).expect("grad shape")),
            None if !self.grads.is_empty() => Some(Tensor::zeros(shape)),
            None => None,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(v.0))
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let faulty = self.fault.is_some() && op.kind() == self.fault;
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
            faulty,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Dispatches a primitive by kind. Typed methods such as
    /// [`Graph::matmul`] are equivalent and usually more convenient.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(TensorError::Attr {
                    op: kind.name(),
                    msg: format!("expected {n} inputs, got {}", inputs.len()),
                })
            }
        };
        let bad_attrs = || TensorError::Attr {
            op: kind.name(),
            msg: format!("unsupported attributes {attrs:?}"),
        };
        match kind {
            Primitive::Concat => {
                return self.concat(inputs);
            }
            Primitive::Matmul
            | Primitive::Conv2d
            | Primitive::ChannelScale
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div => arity(2)?,
            _ => arity(1)?,
        }
        let x = inputs[0];
        match kind {
            Primitive::Matmul => self.matmul(x, inputs[1]),
            Primitive::Conv2d => match *attrs {
                Attrs::Conv { stride, padding } => self.conv2d(x, inputs[1], stride, padding),
                _ => Err(bad_attrs()),
            },
            Primitive::GlobalAvgPool => self.global_avg_pool(x),
            Primitive::MaxPool => match *attrs {
                Attrs::Pool {
                    kernel,
                    stride,
                    padding,
                } => self.max_pool(x, kernel, stride, padding),
                _ => Err(bad_attrs()),
            },
            Primitive::Relu => self.relu(x),
            Primitive::Sigmoid => self.sigmoid(x),
            Primitive::Softmax => self.softmax(x),
            Primitive::LogSoftmax => self.log_softmax(x),
            Primitive::ChannelScale => self.channel_scale(x, inputs[1]),
            Primitive::Add => self.add(x, inputs[1]),
            Primitive::Sub => self.sub(x, inputs[1]),
            Primitive::Mul => self.mul(x, inputs[1]),
            Primitive::Div => self.div(x, inputs[1]),
            Primitive::Mean => match *attrs {
                Attrs::Axis(a) => self.mean(x, a),
                Attrs::None => self.mean(x, Axis::All),
                _ => Err(bad_attrs()),
            },
            Primitive::Sum => match *attrs {
                Attrs::Axis(a) => self.sum(x, a),
                Attrs::None => self.sum(x, Axis::All),
                _ => Err(bad_attrs()),
            },
            Primitive::Variance => self.variance(x),
            Primitive::Sqrt => self.sqrt(x),
            Primitive::Log => self.log(x),
            Primitive::Exp => self.exp(x),
            Primitive::Abs => self.abs(x),
            Primitive::L2Normalize => self.l2_normalize(x),
            Primitive::Reshape => match attrs {
                Attrs::Shape(s) => self.reshape(x, s),
                _ => Err(bad_attrs()),
            },
            Primitive::Gather => match attrs {
                Attrs::Indices(idx) => self.gather(x, idx),
                _ => Err(bad_attrs()),
            },
            Primitive::Scale => match *attrs {
                Attrs::Factor(f) => self.scale(x, f),
                _ => Err(bad_attrs()),
            },
            Primitive::Concat => unreachable!(),
        }
    }

    // ---- primitives ----------------------------------------------------

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", "[m, k] @ [k, n]", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        self.push(value, Op::Matmul(a, b), &[a, b], "matmul")
    }

    /// NHWC convolution with weights `[k, k, cin, cout]`, `k` in {1, 3, 7}.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sw[1] || sw[2] != sx[3] {
            return Err(TensorError::shape(
                "conv2d",
                "x [n, h, w, cin] with weights [k, k, cin, cout]",
                &[sx, sw],
            ));
        }
        let kernel = sw[0];
        if ![1, 3, 7].contains(&kernel) {
            return Err(TensorError::Attr {
                op: "conv2d",
                msg: format!("kernel {kernel}x{kernel} not in {{1, 3, 7}}"),
            });
        }
        if stride == 0 || sx[1] + 2 * padding < kernel || sx[2] + 2 * padding < kernel {
            return Err(TensorError::Attr {
                op: "conv2d",
                msg: format!("stride {stride} / padding {padding} invalid for input {sx:?}"),
            });
        }
        let geom = ConvGeom {
            batch: sx[0],
            height: sx[1],
            width: sx[2],
            in_channels: sx[3],
            out_channels: sw[3],
            kernel,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::new(
            &[geom.batch, geom.out_height(), geom.out_width(), geom.out_channels],
            out,
        )?;
        self.push(value, Op::Conv2d { x, w, geom }, &[x, w], "conv2d")
    }

    /// `[n, h, w, c] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(TensorError::shape("global_avg_pool", "[n, h, w, c]", &[s]));
        }
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let data = self.value(x).data();
        let inv = T::one() / T::of(hw as f64);
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            let o = &mut out[b * c..(b + 1) * c];
            for p in 0..hw {
                let row = &data[(b * hw + p) * c..(b * hw + p + 1) * c];
                for (acc, &v) in o.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            for v in o.iter_mut() {
                *v *= inv;
            }
        }
        let value = Tensor::new(&[n, c], out)?;
        self.push(value, Op::GlobalAvgPool(x), &[x], "global_avg_pool")
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::shape("max_pool", "[n, h, w, c]", &[&s]));
        }
        if kernel == 0 || stride == 0 || padding >= kernel || s[1] + 2 * padding < kernel || s[2] + 2 * padding < kernel {
            return Err(TensorError::Attr {
                op: "max_pool",
                msg: format!("kernel {kernel} stride {stride} padding {padding} invalid for {s:?}"),
            });
        }
        let (out, argmax, oh, ow) =
            kernels::max_pool_forward(self.value(x).data(), [s[0], s[1], s[2], s[3]], kernel, stride, padding);
        let value = Tensor::new(&[s[0], oh, ow, s[3]], out)?;
        self.push(value, Op::MaxPool { x, argmax }, &[x], "max_pool")
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>, name: &'static str) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(f);
        self.push(value, op, &[x], name)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x), "sigmoid")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::sqrt, Op::Sqrt(x), "sqrt")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::ln, Op::Log(x), "log")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::exp, Op::Exp(x), "exp")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::abs, Op::Abs(x), "abs")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        self.unary(x, |v| v * f, Op::Scale(x, f), "scale")
    }

    fn last_dim(&self, x: Var, op: &'static str) -> Result<(usize, usize)> {
        self.check(x)?;
        let s = self.shape(x);
        match s.last() {
            Some(&d) => Ok((self.value(x).numel() / d, d)),
            None => Err(TensorError::shape(op, "rank >= 1", &[s])),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.last_dim(x, "softmax")?;
        let mut out = self.value(x).data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        self.push(value, Op::Softmax(x), &[x], "softmax")
    }

    /// Log-softmax over the last axis, max-subtracted.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.last_dim(x, "log_softmax")?;
        let mut out = self.value(x).data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        self.push(value, Op::LogSoftmax(x), &[x], "log_softmax")
    }

    /// Row-wise unit normalization over the last axis. Zero rows stay zero
    /// and raise a warning.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.last_dim(x, "l2_normalize")?;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        let mut zero_rows = Vec::new();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm > T::zero() {
                for v in row.iter_mut() {
                    *v = *v / norm;
                }
            } else {
                zero_rows.push(r);
            }
            norms.push(norm);
        }
        if !zero_rows.is_empty() {
            self.warn(format!("l2_normalize: zero vector in rows {zero_rows:?}"));
        }
        let value = Tensor::new(self.shape(x), out)?;
        self.push(value, Op::L2Normalize { x, norms }, &[x], "l2_normalize")
    }

    /// Concatenation along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Attr {
            op: "concat",
            msg: "empty input list".into(),
        })?;
        for &p in parts {
            self.check(p)?;
        }
        let lead = self.shape(first).split_last().map(|(_, l)| l.to_vec()).unwrap_or_default();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            match s.split_last() {
                Some((&w, l)) if l == lead.as_slice() => widths.push(w),
                _ => {
                    let shapes: Vec<&[usize]> = parts.iter().map(|&v| self.shape(v)).collect();
                    return Err(TensorError::shape("concat", "equal leading dimensions", &shapes));
                }
            }
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::Concat(parts.to_vec()), parts, "concat")
    }

    /// `x [n, ..., c] * s [n, c]`, broadcasting over the middle axes.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check(x)?;
        self.check(s)?;
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.len() < 2 || ss.len() != 2 || ss[0] != sx[0] || ss[1] != sx[sx.len() - 1] {
            return Err(TensorError::shape("channel_scale", "x [n, ..., c] with s [n, c]", &[sx, ss]));
        }
        let (n, c) = (ss[0], ss[1]);
        let inner = self.value(x).numel() / (n * c);
        let xs = self.value(x).data();
        let sv = self.value(s).data();
        let mut out = Vec::with_capacity(xs.len());
        for b in 0..n {
            for p in 0..inner {
                let base = (b * inner + p) * c;
                for ch in 0..c {
                    out.push(xs[base + ch] * sv[b * c + ch]);
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        self.push(value, Op::ChannelScale(x, s), &[x, s], "channel_scale")
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
        name: &'static str,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let nb = self.value(b).numel();
        if !broadcastable(sa, sb, nb) {
            return Err(TensorError::shape(
                name,
                "equal shapes, a scalar, or a trailing-dimension suffix",
                &[sa, sb],
            ));
        }
        let bv = self.value(b).data();
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        let value = Tensor::new(sa, out)?;
        self.push(value, op, &[a, b], name)
    }

    /// Elementwise `a + b`; `b` may be a scalar or a trailing suffix of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b), "div")
    }

    fn reduce(&mut self, x: Var, axis: Axis, mean: bool) -> Result<Var> {
        let name = if mean { "mean" } else { "sum" };
        self.check(x)?;
        let t = self.value(x);
        let (shape, rows, d) = match axis {
            Axis::All => (Vec::new(), 1, t.numel()),
            Axis::Last => {
                let (rows, d) = self.last_dim(x, name)?;
                (t.shape()[..t.rank() - 1].to_vec(), rows, d)
            }
        };
        let scale = if mean { T::one() / T::of(d as f64) } else { T::one() };
        let out: Vec<T> = (0..rows)
            .map(|r| t.data()[r * d..(r + 1) * d].iter().copied().sum::<T>() * scale)
            .collect();
        let value = Tensor::new(&shape, out)?;
        let op = if mean { Op::Mean(x, axis) } else { Op::Sum(x, axis) };
        self.push(value, op, &[x], name)
    }

    pub fn mean(&mut self, x: Var, axis: Axis) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn sum(&mut self, x: Var, axis: Axis) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Population variance of all elements.
    pub fn variance(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let d = self.value(x).data();
        let n = T::of(d.len() as f64);
        let mean = d.iter().copied().sum::<T>() / n;
        let var = d.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        self.push(Tensor::scalar(var), Op::Variance(x), &[x], "variance")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x], "reshape")
    }

    /// Picks `x[r, idx[r]]` from each row of a `[n, k]` tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        if s.len() != 2 || s[0] != idx.len() {
            return Err(TensorError::shape("gather", format!("[{}, k]", idx.len()), &[s]));
        }
        let k = s[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(TensorError::Attr {
                op: "gather",
                msg: format!("index {bad} out of range for {k} columns"),
            });
        }
        let d = self.value(x).data();
        let out: Vec<T> = idx.iter().enumerate().map(|(r, &i)| d[r * k + i]).collect();
        let value = Tensor::new(&[idx.len()], out)?;
        self.push(value, Op::Gather { x, idx: idx.to_vec() }, &[x], "gather")
    }

    // ---- composites ----------------------------------------------------

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lp = self.log_softmax(logits)?;
        let picked = self.gather(lp, labels)?;
        let m = self.mean(picked, Axis::All)?;
        self.scale(m, -1.0)
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar root. Gradients accumulate additively
    /// across fan-out; afterwards [`Graph::grad`] reads them off leaves.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check(root)?;
        if self.value(root).numel() != 1 || self.value(root).rank() > 1 {
            return Err(TensorError::NotScalar(self.shape(root).to_vec()));
        }
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            let factor = node.faulty.then(|| T::of(1.5));
            let contributions = self.node_backward(i, &g);
            for (v, mut cg) in contributions {
                assert!(v.0 < i, "tape order violated");
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if let Some(f) = factor {
                    cg.iter_mut().for_each(|x| *x *= f);
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, &c)| *a += c),
                    slot => *slot = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn reduce_broadcast(&self, b: Var, full: impl Iterator<Item = T>) -> Vec<T> {
        let nb = self.value(b).numel();
        let mut out = vec![T::zero(); nb];
        for (i, v) in full.enumerate() {
            out[i % nb] += v;
        }
        out
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.value(v).data();
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let bt = kernels::transpose(val(*b), k, n);
                    out.push((*a, kernels::gemm(g, &bt, m, n, k)));
                }
                if self.needs(*b) {
                    let at = kernels::transpose(val(*a), m, k);
                    out.push((*b, kernels::gemm(&at, g, k, m, n)));
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    val(*x),
                    val(*w),
                    g,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let (hw, c) = (s[1] * s[2], s[3]);
                let inv = T::one() / T::of(hw as f64);
                let dx = (0..self.value(*x).numel())
                    .map(|j| {
                        let b = j / (hw * c);
                        g[b * c + j % c] * inv
                    })
                    .collect();
                out.push((*x, dx));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                out.push((*x, dx));
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::Sigmoid(x) => {
                let dx = g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                out.push((*x, dx));
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..y.len() / d {
                    let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let inner: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - inner);
                    }
                }
                out.push((*x, dx));
            }
            Op::LogSoftmax(x) => {
                let d = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..y.len() / d {
                    let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let total: T = gr.iter().copied().sum();
                    for j in 0..d {
                        dx[r * d + j] = gr[j] - yr[j].exp() * total;
                    }
                }
                out.push((*x, dx));
            }
            Op::Concat(parts) => {
                let total = *node.value.shape().last().unwrap();
                let rows = y.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        out.push((p, dp));
                    }
                    offset += w;
                }
            }
            Op::ChannelScale(x, s) => {
                let ss = self.shape(*s);
                let (n, c) = (ss[0], ss[1]);
                let inner = y.len() / (n * c);
                let (xv, sv) = (val(*x), val(*s));
                if self.needs(*x) {
                    let dx = (0..y.len())
                        .map(|j| g[j] * sv[(j / (inner * c)) * c + j % c])
                        .collect();
                    out.push((*x, dx));
                }
                if self.needs(*s) {
                    let mut ds = vec![T::zero(); n * c];
                    for (j, (&gv, &xv)) in g.iter().zip(xv).enumerate() {
                        ds[(j / (inner * c)) * c + j % c] += gv * xv;
                    }
                    out.push((*s, ds));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, self.reduce_broadcast(*b, g.iter().copied())));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, self.reduce_broadcast(*b, g.iter().map(|&v| -v))));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let nb = bv.len();
                if self.needs(*a) {
                    out.push((*a, g.iter().enumerate().map(|(j, &gv)| gv * bv[j % nb]).collect()));
                }
                if self.needs(*b) {
                    let full = g.iter().zip(av).map(|(&gv, &x)| gv * x);
                    out.push((*b, self.reduce_broadcast(*b, full)));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                let nb = bv.len();
                if self.needs(*a) {
                    out.push((*a, g.iter().enumerate().map(|(j, &gv)| gv / bv[j % nb]).collect()));
                }
                if self.needs(*b) {
                    let full = g
                        .iter()
                        .zip(y)
                        .enumerate()
                        .map(|(j, (&gv, &q))| -gv * q / bv[j % nb]);
                    out.push((*b, self.reduce_broadcast(*b, full)));
                }
            }
            Op::Mean(x, axis) | Op::Sum(x, axis) => {
                let n = self.value(*x).numel();
                let d = match axis {
                    Axis::All => n,
                    Axis::Last => *self.shape(*x).last().unwrap(),
                };
                let scale = if matches!(node.op, Op::Mean(..)) {
                    T::one() / T::of(d as f64)
                } else {
                    T::one()
                };
                out.push((*x, (0..n).map(|j| g[j / d] * scale).collect()));
            }
            Op::Variance(x) => {
                let xv = val(*x);
                let n = T::of(xv.len() as f64);
                let mean = xv.iter().copied().sum::<T>() / n;
                let two = T::of(2.0);
                out.push((*x, xv.iter().map(|&v| g[0] * two * (v - mean) / n).collect()));
            }
            Op::Sqrt(x) => {
                let two = T::of(2.0);
                out.push((*x, g.iter().zip(y).map(|(&gv, &r)| gv / (two * r)).collect()));
            }
            Op::Log(x) => {
                out.push((*x, g.iter().zip(val(*x)).map(|(&gv, &v)| gv / v).collect()));
            }
            Op::Exp(x) => {
                out.push((*x, g.iter().zip(y).map(|(&gv, &e)| gv * e).collect()));
            }
            Op::Abs(x) => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&gv, &v)| {
                        if v > T::zero() {
                            gv
                        } else if v < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((*x, dx));
            }
            Op::L2Normalize { x, norms } => {
                let d = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    if norm == T::zero() {
                        continue;
                    }
                    let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let inner: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * inner) / norm;
                    }
                }
                out.push((*x, dx));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Gather { x, idx } => {
                let k = self.shape(*x)[1];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (r, &c) in idx.iter().enumerate() {
                    dx[r * k + c] += g[r];
                }
                out.push((*x, dx));
            }
            Op::Scale(x, f) => out.push((*x, g.iter().map(|&gv| gv * *f).collect())),
        }
        out
    }
}
