use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::kernels::{self, AttnShape};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Masking applied inside [`Tape::attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query sees every key.
    None,
    /// Query `i` sees key `j` iff `j <= i` and `i - j <= window` (when set).
    /// Queries are aligned to the end of the key sequence.
    Causal { window: Option<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is a row vector broadcast over the leading rows of lhs
    Row,
    /// rhs is a single element
    Scalar,
}

enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Square(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Softmax { a: Var, cols: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, cols: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<f64> },
    GatherRows { a: Var, idx: Vec<usize>, cols: usize },
    ConcatRows { a: Var, b: Var, split: usize },
    SliceRows { a: Var, start: usize, cols: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SqErr(Var, Var),
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    requires_grad: bool,
    op: Op,
}

/// Records operations in execution order so gradients can be replayed in reverse.
///
/// Leaves may borrow tensor storage for the tape's lifetime, so model
/// parameters are never copied to build a graph.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `n` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, n: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n])
    }

    /// Adds the gradient of `v` into the tensor's gradient slot.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = *shape.last().unwrap();
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { shape, value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, inputs: &[Var], op: Op) -> Result<Var> {
        check_finite(name, &value)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(shape, Cow::Owned(value), rg, op))
    }

    /// Records a leaf that borrows the tensor's storage. Differentiable iff the
    /// tensor requires grad.
    pub fn leaf(&mut self, t: &'a Tensor) -> Result<Var> {
        check_finite("leaf", t.data())?;
        Ok(self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), t.requires_grad(), Op::Leaf))
    }

    /// Like [`Tape::leaf`] but never differentiable, whatever the tensor's flag.
    pub fn frozen(&mut self, t: &'a Tensor) -> Result<Var> {
        check_finite("leaf", t.data())?;
        Ok(self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), false, Op::Leaf))
    }

    /// Records an owned leaf.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        check_finite("input", t.data())?;
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        Ok(self.push(shape, Cow::Owned(t.into_data()), rg, Op::Leaf))
    }

    /// Records an owned, non-differentiable constant.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.input(t)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.to_vec()).expect("consistent node")
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Bcast::Same);
        }
        let nb = self.value(b).len();
        if nb == 1 {
            return Ok(Bcast::Scalar);
        }
        let (_, cols) = rows_cols(sa);
        if sb.len() == 1 && sb[0] == cols && !sa.is_empty() {
            return Ok(Bcast::Row);
        }
        Err(Error::Shape { op, lhs: sa.to_vec(), rhs: sb.to_vec() })
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<f64>, Bcast)> {
        let bc = self.bcast(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let out: Vec<f64> = match bc {
            Bcast::Same => av.iter().zip(bv.iter()).map(|(x, y)| f(*x, *y)).collect(),
            Bcast::Scalar => av.iter().map(|x| f(*x, bv[0])).collect(),
            Bcast::Row => {
                let cols = bv.len();
                av.iter().enumerate().map(|(i, x)| f(*x, bv[i % cols])).collect()
            }
        };
        Ok((out, bc))
    }

    /// Elementwise sum; `b` may be a row vector or a scalar broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, bc) = self.binary("add", a, b, |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        self.push_op("add", shape, out, &[a, b], Op::Add(a, b, bc))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        self.push_op("sub", shape, out, &[a, b], Op::Sub(a, b, bc))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        self.push_op("mul", shape, out, &[a, b], Op::Mul(a, b, bc))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push_op("scale", shape, out, &[a], Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push_op("add_scalar", shape, out, &[a], Op::AddScalar(a))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(name, shape, out, &[a], op)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, kernels::gelu, Op::Gelu(a))
    }

    /// `[m,k] x [k,n] -> [m,n]`. A rank-1 lhs is treated as a single row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, lead) = match sa.len() {
            1 => (1, sa[0], vec![]),
            2 => (sa[0], sa[1], vec![sa[0]]),
            _ => return Err(Error::Shape { op: "matmul", lhs: sa, rhs: sb }),
        };
        if sb.len() != 2 || sb[0] != k {
            return Err(Error::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let n = sb[1];
        let mut out = vec![0.0; m * n];
        kernels::mm_acc(self.value(a), self.value(b), m, k, n, &mut out);
        let mut shape = lead;
        shape.push(n);
        self.push_op("matmul", shape, out, &[a, b], Op::MatMul { a, b, m, k, n })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (_, cols) = rows_cols(&shape);
        if cols == 0 || self.value(a).is_empty() {
            return Err(Error::Contract("softmax over an empty axis".into()));
        }
        let mut out = self.value(a).to_vec();
        kernels::softmax_rows(&mut out, cols);
        self.push_op("softmax", shape, out, &[a], Op::Softmax { a, cols })
    }

    /// Normalizes each row over the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        if cols == 0 {
            return Err(Error::Contract("layer_norm over an empty axis".into()));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [cols] {
                return Err(Error::Shape { op: "layer_norm", lhs: shape.clone(), rhs: self.shape(p).to_vec() });
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        self.push_op("layer_norm", shape, out, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, cols, xhat, inv_std })
    }

    /// Multi-head scaled dot-product attention: `q [tq,d]`, `k, v [tk,d]`.
    /// Masked positions receive an additive `-inf` before the softmax.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
            return Err(Error::Shape { op: "attention", lhs: sq, rhs: sk });
        }
        if sk != sv {
            return Err(Error::Shape { op: "attention", lhs: sk, rhs: sv });
        }
        let (tq, tk, d) = (sq[0], sk[0], sq[1]);
        if tq == 0 || tk == 0 || d == 0 {
            return Err(Error::Contract("attention over an empty axis".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!("width {d} not divisible into {heads} heads")));
        }
        let (causal, window) = match mask {
            AttnMask::None => (false, None),
            AttnMask::Causal { window } => (true, window),
        };
        if causal && tq > tk {
            return Err(Error::Shape { op: "attention(causal)", lhs: sq, rhs: sk });
        }
        let shape = AttnShape { tq, tk, d, heads };
        let (out, probs) = kernels::attention_forward(self.value(q), self.value(k), self.value(v), &shape, causal, window);
        self.push_op("attention", vec![tq, d], out, &[q, k, v], Op::Attention { q, k, v, shape, probs })
    }

    /// Rows of a matrix picked by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || idx.iter().any(|&i| i >= sa[0]) {
            return Err(Error::Shape { op: "gather_rows", lhs: sa, rhs: vec![idx.iter().copied().max().unwrap_or(0)] });
        }
        let cols = sa[1];
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&av[i * cols..(i + 1) * cols]);
        }
        self.push_op("gather_rows", vec![idx.len(), cols], out, &[a], Op::GatherRows { a, idx: idx.to_vec(), cols })
    }

    /// Concatenates two matrices (or vectors) along the first axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ca = rows_cols(&sa).1;
        let cb = rows_cols(&sb).1;
        if ca != cb || sa.is_empty() || sb.is_empty() {
            return Err(Error::Shape { op: "concat_rows", lhs: sa, rhs: sb });
        }
        let ra = self.value(a).len() / ca;
        let rb = self.value(b).len() / cb;
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        self.push_op("concat_rows", vec![ra + rb, ca], out, &[a, b], Op::ConcatRows { a, b, split: ra * ca })
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || start > end || end > sa[0] {
            return Err(Error::Shape { op: "slice_rows", lhs: sa, rhs: vec![start, end] });
        }
        let cols = sa[1];
        let out = self.value(a)[start * cols..end * cols].to_vec();
        self.push_op("slice_rows", vec![end - start, cols], out, &[a], Op::SliceRows { a, start, cols })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::Shape { op: "reshape", lhs: self.shape(a).to_vec(), rhs: shape.to_vec() });
        }
        let out = self.value(a).to_vec();
        self.push_op("reshape", shape.to_vec(), out, &[a], Op::Reshape(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push_op("sum", vec![], vec![s], &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = self.value(a).iter().sum::<f64>() / n as f64;
        self.push_op("mean", vec![], vec![s], &[a], Op::Mean(a))
    }

    /// `sum((a - b)^2)` as a scalar.
    pub fn sq_err(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape { op: "sq_err", lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        let s = self.value(a).iter().zip(self.value(b)).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push_op("sq_err", vec![], vec![s], &[a, b], Op::SqErr(a, b))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        slot(grads, v, self.nodes[v.0].value.len())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    self.slot(grads, *a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if self.wants(*b) {
                    let db = self.slot(grads, *b);
                    reduce_bcast(*bc, g, db, sign, |_| 1.0);
                }
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let da = self.slot(grads, *a);
                    match bc {
                        Bcast::Same => da.iter_mut().zip(g.iter().zip(bv.iter())).for_each(|(d, (x, y))| *d += x * y),
                        Bcast::Scalar => da.iter_mut().zip(g).for_each(|(d, x)| *d += x * bv[0]),
                        Bcast::Row => {
                            let cols = bv.len();
                            da.iter_mut().zip(g).enumerate().for_each(|(j, (d, x))| *d += x * bv[j % cols])
                        }
                    }
                }
                if self.wants(*b) {
                    let db = self.slot(grads, *b);
                    reduce_bcast(*bc, g, db, 1.0, |j| av[j]);
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    self.slot(grads, *a).iter_mut().zip(g).for_each(|(d, x)| *d += x * c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if self.wants(*a) {
                    self.slot(grads, *a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::Exp(a) => {
                let out = &node.value;
                self.slot(grads, *a).iter_mut().zip(g.iter().zip(out.iter())).for_each(|(d, (x, y))| *d += x * y);
            }
            Op::Square(a) => {
                let av = self.value(*a);
                self.slot(grads, *a).iter_mut().zip(g.iter().zip(av)).for_each(|(d, (x, y))| *d += 2.0 * x * y);
            }
            Op::Tanh(a) => {
                let out = &node.value;
                self.slot(grads, *a).iter_mut().zip(g.iter().zip(out.iter())).for_each(|(d, (x, y))| *d += x * (1.0 - y * y));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.slot(grads, *a).iter_mut().zip(g.iter().zip(av)).for_each(|(d, (x, y))| {
                    if *y > 0.0 {
                        *d += x
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                self.slot(grads, *a).iter_mut().zip(g.iter().zip(av)).for_each(|(d, (x, y))| *d += x * kernels::gelu_grad(*y));
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.wants(*a) {
                    let bv = self.value(*b);
                    kernels::mm_nt_acc(g, bv, *m, *n, *k, self.slot(grads, *a));
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    kernels::mm_tn_acc(av, g, *m, *k, *n, self.slot(grads, *b));
                }
            }
            Op::Softmax { a, cols } => {
                let y = &node.value;
                let da = self.slot(grads, *a);
                for ((dr, gr), yr) in da.chunks_mut(*cols).zip(g.chunks(*cols)).zip(y.chunks(*cols)) {
                    let dotv: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for c in 0..*cols {
                        dr[c] += yr[c] * (gr[c] - dotv);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, cols, xhat, inv_std } => {
                let cols = *cols;
                let gv = self.value(*gamma);
                if self.wants(*gamma) {
                    let dg = self.slot(grads, *gamma);
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if self.wants(*beta) {
                    let db = self.slot(grads, *beta);
                    for gr in g.chunks(cols) {
                        for c in 0..cols {
                            db[c] += gr[c];
                        }
                    }
                }
                if self.wants(*x) {
                    let dx = self.slot(grads, *x);
                    let nf = cols as f64;
                    let mut dh = vec![0.0; cols];
                    for (r, (gr, hr)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..cols {
                            dh[c] = gr[c] * gv[c];
                            s1 += dh[c];
                            s2 += dh[c] * hr[c];
                        }
                        let is = inv_std[r];
                        let dr = &mut dx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dr[c] += is / nf * (nf * dh[c] - s1 - hr[c] * s2);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, shape, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = self.wants(*q).then(|| vec![0.0; qv.len()]);
                let mut dk = self.wants(*k).then(|| vec![0.0; kv.len()]);
                let mut dv = self.wants(*v).then(|| vec![0.0; vv.len()]);
                kernels::attention_backward(qv, kv, vv, probs, g, shape, dq.as_deref_mut(), dk.as_deref_mut(), dv.as_deref_mut());
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(d) = d {
                        self.slot(grads, var).iter_mut().zip(&d).for_each(|(s, x)| *s += x);
                    }
                }
            }
            Op::GatherRows { a, idx, cols } => {
                let da = self.slot(grads, *a);
                for (r, &i) in idx.iter().enumerate() {
                    da[i * cols..(i + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(d, x)| *d += x);
                }
            }
            Op::ConcatRows { a, b, split } => {
                if self.wants(*a) {
                    self.slot(grads, *a).iter_mut().zip(&g[..*split]).for_each(|(d, x)| *d += x);
                }
                if self.wants(*b) {
                    self.slot(grads, *b).iter_mut().zip(&g[*split..]).for_each(|(d, x)| *d += x);
                }
            }
            Op::SliceRows { a, start, cols } => {
                let da = self.slot(grads, *a);
                let off = start * cols;
                da[off..off + g.len()].iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            Op::Sum(a) => {
                self.slot(grads, *a).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.slot(grads, *a).iter_mut().for_each(|d| *d += g[0] / n);
            }
            Op::SqErr(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.slot(grads, *a).iter_mut().enumerate().for_each(|(j, d)| *d += 2.0 * g[0] * (av[j] - bv[j]));
                }
                if self.wants(*b) {
                    self.slot(grads, *b).iter_mut().enumerate().for_each(|(j, d)| *d -= 2.0 * g[0] * (av[j] - bv[j]));
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

/// Sums an output gradient down to the shape of a broadcast operand.
fn reduce_bcast(bc: Bcast, g: &[f64], db: &mut [f64], sign: f64, factor: impl Fn(usize) -> f64) {
    match bc {
        Bcast::Same => db.iter_mut().enumerate().for_each(|(j, d)| *d += sign * g[j] * factor(j)),
        Bcast::Scalar => {
            let s: f64 = g.iter().enumerate().map(|(j, x)| x * factor(j)).sum();
            db[0] += sign * s;
        }
        Bcast::Row => {
            let cols = db.len();
            for (j, x) in g.iter().enumerate() {
                db[j % cols] += sign * x * factor(j);
            }
        }
    }
}
