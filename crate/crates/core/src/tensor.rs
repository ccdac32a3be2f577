//! Dense `f64` tensors and a define-by-run tape for reverse-mode
//! differentiation.
//!
//! Every value produced during a forward pass lives on a [`Tape`] and is
//! addressed by a [`Var`]. Operations append nodes in evaluation order, so
//! the node list is already a topological order of the computation graph and
//! [`Tape::backward`] only has to walk it from the loss back to index 0.
//!
//! Tensors are rank 1 (`[n]`) or rank 2 (`[batch, n]`). Operations act on
//! the trailing feature axis and treat leading rows independently, which is
//! what lets a whole mini-batch flow through one tape.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("clamp bounds inverted: lo = {lo}, hi = {hi}")]
    InvalidBounds { lo: f64, hi: f64 },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        check_finite("tensor", &data)?;
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    /// Rank-1 tensor holding `data`.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                detail: format!("{} vs {}", delta.len(), self.data.len()),
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        grad.iter_mut().zip(delta).for_each(|(g, d)| *g += d);
        Ok(())
    }

    /// Scales the gradient buffer in place, if there is one.
    pub fn scale_grad(&mut self, factor: f64) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation that produced a tape node, together with the context its
/// backward rule needs.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Concat { parts: Vec<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Relu { x: Var },
    Prelu { x: Var, slopes: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    SoftmaxNll { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Concat { .. } => "concat",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Relu { .. } => "relu",
            Op::Prelu { .. } => "prelu",
            Op::Clamp { .. } => "clamp",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::SoftmaxNll { .. } => "softmax_nll",
        }
    }

    pub fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Concat { parts } => parts.clone(),
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Prelu { x, slopes } => vec![*x, *slopes],
            Op::Relu { x }
            | Op::Clamp { x, .. }
            | Op::Sigmoid { x }
            | Op::Tanh { x }
            | Op::Scale { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::SoftmaxNll { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
pub struct TapeNode {
    pub op: Op,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

/// Define-by-run record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

fn feature_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

/// `c = a · b + beta · c` for row-major operands described by explicit
/// strides, so transposes come for free.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
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

    pub fn node(&self, var: Var) -> &TapeNode {
        &self.nodes[var.0]
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].grad.as_deref()
    }

    /// Copies the node's value out as a standalone tensor.
    pub fn tensor(&self, var: Var) -> Tensor {
        let n = &self.nodes[var.0];
        Tensor { shape: n.shape.clone(), data: n.value.clone(), requires_grad: false, grad: None }
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        check_finite(op.kind(), &value)?;
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(TapeNode { op, shape, value, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a tensor as a leaf; gradients are kept only if the tensor
    /// requires them.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(TapeNode {
            op: Op::Leaf,
            shape: tensor.shape.clone(),
            value: tensor.data.clone(),
            requires_grad: tensor.requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input (never differentiated).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// `x · Wᵀ + b` over the trailing axis of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let n_in = feature_dim(xs);
        if ws.len() != 2 || ws[1] != n_in || bs != [ws[0]] || xs.is_empty() || xs.len() > 2 {
            return Err(TensorError::ShapeMismatch { op: "affine", detail: format!("x {xs:?}, W {ws:?}, b {bs:?}") });
        }
        let n_out = ws[0];
        let rows = self.value(x).len().checked_div(n_in).unwrap_or(xs[0]);
        let shape = with_last(xs, n_out);
        let mut out = Vec::with_capacity(rows * n_out);
        for _ in 0..rows {
            out.extend_from_slice(self.value(b));
        }
        gemm(rows, n_in, n_out, self.value(x), (n_in as isize, 1), self.value(w), (1, n_in as isize), 1.0, &mut out);
        self.push(Op::Affine { x, w, b }, shape, out)
    }

    /// Joins tensors along the trailing axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first =
            parts.first().ok_or_else(|| TensorError::ShapeMismatch { op: "concat", detail: "no inputs".into() })?;
        let lead = self.shape(*first).to_vec();
        let rank = lead.len();
        let rows = if rank == 2 { lead[0] } else { 1 };
        let mut width = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != rank || (rank == 2 && s[0] != rows) || rank == 0 || rank > 2 {
                return Err(TensorError::ShapeMismatch { op: "concat", detail: format!("{:?} vs {:?}", lead, s) });
            }
            width += feature_dim(s);
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                let d = feature_dim(self.shape(*p));
                out.extend_from_slice(&self.value(*p)[r * d..(r + 1) * d]);
            }
        }
        let shape = with_last(&lead, width);
        self.push(Op::Concat { parts: parts.to_vec() }, shape, out)
    }

    fn binary(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(op, shape, out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(TensorError::InvalidBounds { lo, hi });
        }
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// Per-channel parametric ReLU: `x` where positive, `slope_i · x` otherwise.
    pub fn prelu(&mut self, x: Var, slopes: Var) -> Result<Var> {
        let n = feature_dim(self.shape(x));
        if self.shape(slopes) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "prelu",
                detail: format!("x {:?}, slopes {:?}", self.shape(x), self.shape(slopes)),
            });
        }
        let a = self.value(slopes);
        let out = self.value(x).iter().enumerate().map(|(i, &v)| if v > 0.0 { v } else { a[i % n] * v }).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Prelu { x, slopes }, shape, out)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary(x, |v| v * factor, Op::Scale { x, factor })
    }

    /// Sum of every entry, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(Op::Sum { x }, vec![1], vec![s])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    ///
    /// `logits` is `[C]` with one label or `[B, C]` with `B` labels. The
    /// log-sum-exp is shifted by the row maximum.
    pub fn softmax_nll(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        let classes = feature_dim(shape);
        let rows = if shape.len() == 2 { shape[0] } else { 1 };
        if shape.is_empty() || shape.len() > 2 || labels.len() != rows || classes == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_nll",
                detail: format!("logits {shape:?}, {} labels", labels.len()),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let z = self.value(logits);
        let mut probs = Vec::with_capacity(z.len());
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &z[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        loss /= rows as f64;
        self.push(Op::SoftmaxNll { logits, labels: labels.to_vec(), probs }, vec![1], vec![loss])
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient,
    /// adding into whatever earlier calls left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar { shape: self.nodes[loss.0].shape.clone() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backward_node(idx, &upstream, &mut grads);
                let node = &mut self.nodes[idx];
                match node.grad.as_mut() {
                    Some(g) => g.iter_mut().zip(&upstream).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(upstream),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut add = |v: Var, delta: Vec<f64>| match grads[v.0].as_mut() {
            Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            None => grads[v.0] = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let ws = self.shape(*w);
                let (n_out, n_in) = (ws[0], ws[1]);
                let rows = g.len() / n_out.max(1);
                if wants(*x) {
                    let mut dx = vec![0.0; rows * n_in];
                    gemm(rows, n_out, n_in, g, (n_out as isize, 1), self.value(*w), (n_in as isize, 1), 0.0, &mut dx);
                    add(*x, dx);
                }
                if wants(*w) {
                    let mut dw = vec![0.0; n_out * n_in];
                    gemm(n_out, rows, n_in, g, (1, n_out as isize), self.value(*x), (n_in as isize, 1), 0.0, &mut dw);
                    add(*w, dw);
                }
                if wants(*b) {
                    let mut db = vec![0.0; n_out];
                    for row in g.chunks(n_out.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    add(*b, db);
                }
            }
            Op::Concat { parts } => {
                let width = feature_dim(&node.shape);
                let rows = g.len().checked_div(width).unwrap_or(0);
                let mut offset = 0;
                for p in parts {
                    let d = feature_dim(self.shape(*p));
                    if wants(*p) {
                        let mut dp = Vec::with_capacity(rows * d);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * width + offset..r * width + offset + d]);
                        }
                        add(*p, dp);
                    }
                    offset += d;
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    add(*a, g.to_vec());
                }
                if wants(*b) {
                    add(*b, g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    add(*a, g.to_vec());
                }
                if wants(*b) {
                    add(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    add(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    add(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::Relu { x } => {
                let d = g.iter().zip(self.value(*x)).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                add(*x, d);
            }
            Op::Prelu { x, slopes } => {
                let n = self.shape(*slopes)[0];
                let (vx, va) = (self.value(*x), self.value(*slopes));
                if wants(*x) {
                    let d = g
                        .iter()
                        .zip(vx)
                        .enumerate()
                        .map(|(i, (g, &v))| if v > 0.0 { *g } else { g * va[i % n] })
                        .collect();
                    add(*x, d);
                }
                if wants(*slopes) {
                    let mut da = vec![0.0; n];
                    for (i, (g, &v)) in g.iter().zip(vx).enumerate() {
                        if v <= 0.0 {
                            da[i % n] += g * v;
                        }
                    }
                    add(*slopes, da);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let d = g.iter().zip(self.value(*x)).map(|(g, &v)| if v > *lo && v < *hi { *g } else { 0.0 }).collect();
                add(*x, d);
            }
            Op::Sigmoid { x } => {
                let d = g.iter().zip(&node.value).map(|(g, s)| g * s * (1.0 - s)).collect();
                add(*x, d);
            }
            Op::Tanh { x } => {
                let d = g.iter().zip(&node.value).map(|(g, t)| g * (1.0 - t * t)).collect();
                add(*x, d);
            }
            Op::Scale { x, factor } => {
                add(*x, g.iter().map(|v| v * factor).collect());
            }
            Op::Sum { x } => {
                add(*x, vec![g[0]; self.value(*x).len()]);
            }
            Op::SoftmaxNll { logits, labels, probs } => {
                let classes = feature_dim(self.shape(*logits));
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    d[r * classes + label] -= scale;
                }
                add(*logits, d);
            }
        }
    }

    /// Smallest distance from any ReLU / PReLU input to 0 or clamp input to
    /// its bounds over the whole tape (infinity when there are none). Clamp
    /// inputs sitting exactly on a bound are skipped: they arise from exact
    /// ReLU zeros upstream, which the ReLU term already covers.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .map(|node| match node.op {
                Op::Relu { x } | Op::Prelu { x, .. } => {
                    self.value(x).iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min)
                }
                Op::Clamp { x, lo, hi } => self
                    .value(x)
                    .iter()
                    .filter(|&&v| v != lo && v != hi)
                    .map(|v| (v - lo).abs().min((v - hi).abs()))
                    .fold(f64::INFINITY, f64::min),
                _ => f64::INFINITY,
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Adds the gradient recorded for `var` into `target`'s gradient buffer.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor) -> Result<()> {
        match self.grad(var) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.len()]),
        }
    }
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Index of the parameter with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    pub fn max_abs_error(&self) -> f64 {
        self.analytic.iter().zip(&self.numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max)
    }

    /// Largest relative error over coordinates with `|a| + |n| >= floor`.
    ///
    /// A central difference of a loss near 1 carries an absolute error of a
    /// few `ulp / h` (about 1e-11 at `h = 1e-5`), so gradients much smaller
    /// than 1e-7 cannot be resolved to 1e-4 relative accuracy.
    pub fn max_rel_error_above(&self, floor: f64) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .filter(|(a, n)| a.abs() + n.abs() >= floor)
            .map(|(a, n)| relative_error(*a, *n))
            .fold(0.0, f64::max)
    }

    pub fn count_below(&self, floor: f64) -> usize {
        self.analytic.iter().zip(&self.numeric).filter(|(a, n)| a.abs() + n.abs() < floor).count()
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Relative error with the `1e-8` floor used throughout the gradient tests.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `f` against central finite
/// differences with step [`GRAD_CHECK_STEP`].
///
/// `f` maps a flat parameter vector to `(loss, d loss / d params)`.
pub fn grad_check<F, E>(params: &[f64], mut f: F) -> std::result::Result<GradCheck, E>
where
    F: FnMut(&[f64]) -> std::result::Result<(f64, Vec<f64>), E>,
{
    let (_, analytic) = f(params)?;
    let mut probe = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + GRAD_CHECK_STEP;
        let (up, _) = f(&probe)?;
        probe[i] = orig - GRAD_CHECK_STEP;
        let (down, _) = f(&probe)?;
        probe[i] = orig;
        numeric.push((up - down) / (2.0 * GRAD_CHECK_STEP));
    }
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck { max_rel_error, worst_index, analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true)
    }

    fn naive_affine(x: &[f64], w: &[f64], b: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
        let rows = x.len() / n_in;
        let mut out = vec![0.0; rows * n_out];
        for r in 0..rows {
            for o in 0..n_out {
                let mut acc = b[o];
                for i in 0..n_in {
                    acc += w[o * n_in + i] * x[r * n_in + i];
                }
                out[r * n_out + o] = acc;
            }
        }
        out
    }

    /// Gradient of a scalar-valued tape program w.r.t. one input tensor,
    /// checked against central differences.
    fn check_unary_input<F>(x: Vec<f64>, shape: &[usize], build: F) -> f64
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let eval = |xs: &[f64]| -> std::result::Result<(f64, Vec<f64>), TensorError> {
            let mut tape = Tape::new();
            let v = tape.leaf(&param(shape, xs.to_vec()));
            let out = build(&mut tape, v);
            let loss = tape.sum(out)?;
            tape.backward(loss)?;
            Ok((tape.value(loss)[0], tape.grad(v).unwrap().to_vec()))
        };
        grad_check(&x, eval).unwrap().max_rel_error
    }

    #[test]
    fn affine_identity_and_zero_weights() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![3.0, -1.0]).unwrap();
        let w = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[3.0, -1.0]);

        let w0 = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let b5 = tape.constant(vec![2], vec![5.0, 5.0]).unwrap();
        let y = tape.affine(x, w0, b5).unwrap();
        assert_eq!(tape.value(y), &[5.0, 5.0]);
    }

    #[test]
    fn affine_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for rows in [None, Some(5)] {
            let xs: Vec<usize> = rows.map_or(vec![4], |r| vec![r, 4]);
            let n: usize = xs.iter().product();
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let vx = tape.constant(xs, x.clone()).unwrap();
            let vw = tape.constant(vec![3, 4], w.clone()).unwrap();
            let vb = tape.constant(vec![3], b.clone()).unwrap();
            let y = tape.affine(vx, vw, vb).unwrap();
            let expected = naive_affine(&x, &w, &b, 4, 3);
            for (a, e) in tape.value(y).iter().zip(&expected) {
                assert!((a - e).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn affine_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![0.0; 3]).unwrap();
        let w = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let b = tape.constant(vec![2], vec![0.0; 2]).unwrap();
        assert!(matches!(tape.affine(x, w, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut flat = x.clone();
        flat.extend(&w);
        flat.extend(&b);
        let check = grad_check(&flat, |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut tape = Tape::new();
            let vx = tape.leaf(&param(&[2, 4], p[..8].to_vec()));
            let vw = tape.leaf(&param(&[3, 4], p[8..20].to_vec()));
            let vb = tape.leaf(&param(&[3], p[20..].to_vec()));
            let y = tape.affine(vx, vw, vb)?;
            let sq = tape.mul(y, y)?;
            let loss = tape.sum(sq)?;
            tape.backward(loss)?;
            let mut g = tape.grad(vx).unwrap().to_vec();
            g.extend(tape.grad(vw).unwrap());
            g.extend(tape.grad(vb).unwrap());
            Ok((tape.value(loss)[0], g))
        })
        .unwrap();
        assert!(check.max_rel_error <= 1e-6, "{check:?}");
    }

    #[test]
    fn concat_values_and_empty_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(vec![1], vec![3.0]).unwrap();
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0]);
        let e = tape.constant(vec![0], vec![]).unwrap();
        let c = tape.concat(&[a, e]).unwrap();
        assert_eq!(tape.value(c), tape.value(a));
        assert_eq!(tape.shape(c), &[2]);
    }

    #[test]
    fn concat_batched_interleaves_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let bad = tape.constant(vec![3, 1], vec![0.0; 3]).unwrap();
        assert!(tape.concat(&[a, bad]).is_err());
        let rank1 = tape.constant(vec![2], vec![0.0; 2]).unwrap();
        assert!(tape.concat(&[a, rank1]).is_err());
    }

    #[test]
    fn concat_gradient_splits() {
        let mut tape = Tape::new();
        let a = tape.leaf(&param(&[2], vec![0.3, -0.2]));
        let b = tape.leaf(&param(&[3], vec![1.0, 2.0, 3.0]));
        let c = tape.concat(&[a, b]).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0, 1.0]);
        let err = check_unary_input(vec![0.3, -0.2], &[2], |t, v| {
            let k = t.constant(vec![1], vec![4.0]).unwrap();
            t.concat(&[v, k]).unwrap()
        });
        assert!(err <= 1e-6);
    }

    #[test]
    fn relu_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
        let x = tape.constant(vec![3], vec![-1.0, -5.0, -0.1]).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0; 3]);
        // subgradient at 0 is 0
        let mut tape = Tape::new();
        let x = tape.leaf(&param(&[1], vec![0.0]));
        let y = tape.relu(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
        let err = check_unary_input(vec![-0.7, 0.4, 1.3], &[3], |t, v| t.relu(v).unwrap());
        assert!(err <= 1e-6);
    }

    #[test]
    fn prelu_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1], vec![-2.0]).unwrap();
        let a = tape.leaf(&param(&[1], vec![0.25]));
        let y = tape.prelu(x, a).unwrap();
        assert_eq!(tape.value(y), &[-0.5]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[-2.0]);

        let x = tape.constant(vec![3], vec![-1.0, 0.5, 2.0]).unwrap();
        let ones = tape.constant(vec![3], vec![1.0; 3]).unwrap();
        let y = tape.prelu(x, ones).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let short = tape.constant(vec![2], vec![1.0; 2]).unwrap();
        assert!(tape.prelu(x, short).is_err());
    }

    #[test]
    fn prelu_slope_gradient_matches_finite_differences() {
        let slopes = vec![0.25, 0.1];
        let check = grad_check(&slopes, |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut tape = Tape::new();
            let x = tape.constant(vec![2, 2], vec![-2.0, 1.0, -0.5, -3.0]).unwrap();
            let a = tape.leaf(&param(&[2], p.to_vec()));
            let y = tape.prelu(x, a)?;
            let loss = tape.sum(y)?;
            tape.backward(loss)?;
            Ok((tape.value(loss)[0], tape.grad(a).unwrap().to_vec()))
        })
        .unwrap();
        assert!(check.max_rel_error <= 1e-6);
        assert!((check.analytic[0] + 2.5).abs() < 1e-12);
        assert!((check.analytic[1] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn clamp_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(&param(&[3], vec![-0.5, 0.3, 1.7]));
        let y = tape.clamp(x, 0.0, 1.0).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.3, 1.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&param(&[2], vec![0.2, 0.8]));
        let y = tape.clamp(x, 0.0, 1.0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);

        assert!(matches!(tape.clamp(x, 1.0, 0.0), Err(TensorError::InvalidBounds { .. })));
    }

    #[test]
    fn clamp_gradient_zero_at_bound_one_sided() {
        // A coordinate pushed past the bound: the one-sided difference from
        // the clamped side is exactly zero.
        let f = |v: f64| {
            let mut tape = Tape::new();
            let x = tape.constant(vec![1], vec![v]).unwrap();
            let y = tape.clamp(x, 0.0, 1.0).unwrap();
            tape.value(y)[0]
        };
        let h = 1e-5;
        assert_eq!((f(1.5 + h) - f(1.5)) / h, 0.0);
        assert_eq!((f(1.0 + h) - f(1.0)) / h, 0.0);
        let mut tape = Tape::new();
        let x = tape.leaf(&param(&[1], vec![1.0]));
        let y = tape.clamp(x, 0.0, 1.0).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn softmax_nll_analytic_cases() {
        let mut tape = Tape::new();
        let z = tape.constant(vec![10], vec![0.7; 10]).unwrap();
        let l = tape.softmax_nll(z, &[3]).unwrap();
        assert!((tape.value(l)[0] - 10f64.ln()).abs() <= 1e-12);

        let z = tape.constant(vec![2], vec![1000.0, 0.0]).unwrap();
        let l = tape.softmax_nll(z, &[0]).unwrap();
        assert!(tape.value(l)[0].abs() < 1e-12);

        assert!(matches!(tape.softmax_nll(z, &[2]), Err(TensorError::LabelOutOfRange { label: 2, classes: 2 })));
    }

    #[test]
    fn softmax_nll_gradient_is_probs_minus_onehot() {
        let logits = vec![0.3, -1.2, 2.0, 0.5];
        let check = grad_check(&logits, |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut tape = Tape::new();
            let z = tape.leaf(&param(&[4], p.to_vec()));
            let l = tape.softmax_nll(z, &[1])?;
            tape.backward(l)?;
            Ok((tape.value(l)[0], tape.grad(z).unwrap().to_vec()))
        })
        .unwrap();
        assert!(check.max_rel_error <= 1e-6);
        let max = 2.0f64;
        let denom: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        for (i, g) in check.analytic.iter().enumerate() {
            let p = (logits[i] - max).exp() / denom;
            let expected = p - if i == 1 { 1.0 } else { 0.0 };
            assert!((g - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_softmax_nll_is_row_mean() {
        let mut tape = Tape::new();
        let z = tape.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let l = tape.softmax_nll(z, &[2, 0]).unwrap();
        let r0 = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        let r1 = 3f64.ln();
        assert!((tape.value(l)[0] - (r0 + r1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn backward_sum_gives_ones_and_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&param(&[4], vec![1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 4]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn smooth_ops_match_finite_differences() {
        let x = vec![-1.3, -0.2, 0.4, 2.1];
        assert!(check_unary_input(x.clone(), &[4], |t, v| t.sigmoid(v).unwrap()) <= 1e-6);
        assert!(check_unary_input(x.clone(), &[4], |t, v| t.tanh(v).unwrap()) <= 1e-6);
        assert!(check_unary_input(x.clone(), &[4], |t, v| t.mul(v, v).unwrap()) <= 1e-6);
        assert!(check_unary_input(x.clone(), &[4], |t, v| t.scale(v, -2.5).unwrap()) <= 1e-6);
        assert!(
            check_unary_input(x.clone(), &[4], |t, v| {
                let s = t.sigmoid(v).unwrap();
                let d = t.sub(v, s).unwrap();
                t.add(d, v).unwrap()
            }) <= 1e-6
        );
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(matches!(Tensor::vector(vec![f64::NAN]), Err(TensorError::NonFinite { .. })));
        let mut tape = Tape::new();
        let x = tape.constant(vec![1], vec![1e308]).unwrap();
        assert!(matches!(tape.add(x, x), Err(TensorError::NonFinite { op: "add" })));
    }

    #[test]
    fn grad_check_simple_functions() {
        let quad =
            grad_check(&[3.0], |p: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((p[0] * p[0], vec![2.0 * p[0]])) }).unwrap();
        assert!(quad.max_rel_error <= 1e-7);
        assert_eq!(quad.analytic, vec![6.0]);

        let constant =
            grad_check(&[1.0, 2.0], |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((4.2, vec![0.0, 0.0])) }).unwrap();
        assert_eq!(constant.numeric, vec![0.0, 0.0]);
        assert_eq!(constant.max_rel_error, 0.0);
    }

    #[test]
    fn tape_parents_precede_children() {
        let mut tape = Tape::new();
        let x = tape.leaf(&param(&[2], vec![0.5, -0.5]));
        let w = tape.leaf(&param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&param(&[2], vec![0.0, 1.0]));
        let mut h = x;
        for _ in 0..5 {
            let a = tape.affine(h, w, b).unwrap();
            h = tape.tanh(a).unwrap();
        }
        let s = tape.sum(h).unwrap();
        for i in 0..=s.index() {
            let node = tape.node(Var(i));
            assert!(node.op.parents().iter().all(|p| p.index() < i), "{}", node.op.kind());
        }
    }

    #[test]
    fn unrolled_linear_recurrence_matches_closed_form() {
        // h_t = w h_{t-1} + x_t with h_0 = 0, loss = h_T.
        // d h_T / d w = sum_{t=1}^{T} (T - t) w^{T-t-1} x_t.
        let xs = [0.5, -1.0, 2.0, 0.25, 1.5, -0.75];
        let w0 = 0.8;
        let mut tape = Tape::new();
        let w = tape.leaf(&param(&[1, 1], vec![w0]));
        let mut h = tape.constant(vec![1], vec![0.0]).unwrap();
        for &x in &xs {
            let xv = tape.constant(vec![1], vec![x]).unwrap();
            h = tape.affine(h, w, xv).unwrap();
        }
        tape.backward(h).unwrap();
        let t_len = xs.len() as i32;
        let closed: f64 = xs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let k = t_len - (i as i32 + 1);
                if k == 0 {
                    0.0
                } else {
                    k as f64 * w0.powi(k - 1) * x
                }
            })
            .sum();
        assert!((tape.grad(w).unwrap()[0] - closed).abs() < 1e-12);
    }

    #[test]
    fn deep_affine_chain_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let w = tape.leaf(&param(&[15, 15], (0..225).map(|_| rng.gen_range(-0.3..0.3)).collect()));
        let b = tape.leaf(&param(&[15], vec![0.01; 15]));
        let mut h = tape.constant(vec![15], (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        for _ in 0..28 {
            h = tape.affine(h, w, b).unwrap();
        }
        let s = tape.sum(h).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(w).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn evaluation_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut tape = Tape::new();
            let x = tape.constant(vec![4, 6], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let w = tape.leaf(&param(&[3, 6], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()));
            let b = tape.leaf(&param(&[3], vec![0.1; 3]));
            let y = tape.affine(x, w, b).unwrap();
            let l = tape.softmax_nll(y, &[0, 1, 2, 0]).unwrap();
            tape.backward(l).unwrap();
            (tape.value(l).to_vec(), tape.grad(w).unwrap().to_vec())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0[0].to_bits(), b.0[0].to_bits());
        assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
