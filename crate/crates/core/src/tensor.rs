//! Dense binary64 tensors and a reverse-mode tape.
//!
//! A [`Graph`] records every op in insertion order. Because parents are always
//! inserted before children, walking the node list backwards is a valid reverse
//! topological order, and every node's backward rule runs at most once per pass.
//!
//! Only bias-row addition broadcasts. Every other shape coercion is explicit.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Dim { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Dim { op, detail: detail.into() })
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return dim_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn same_shape_like(&self, data: Vec<f64>) -> Tensor {
        Tensor { shape: self.shape.clone(), data }
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape.len() == 2
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(x)) without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    SoftmaxXent { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64> },
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    Cosine { a: Var, b: Var, norm_a: Vec<f64>, norm_b: Vec<f64> },
    SquaredL2(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SoftmaxRows { x: Var },
    StopGradient,
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Values live on the graph; gradients accumulate across
/// repeated [`Graph::backward`] calls until [`Graph::zero_grad`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    last_visits: usize,
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of backward rules executed by the most recent backward pass.
    pub fn last_backward_visits(&self) -> usize {
        self.last_visits
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf tensor. Parameters and inputs that need gradients set `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.shape[1] != tb.shape[0] {
            return dim_err("matmul", format!("{:?} x {:?}", ta.shape, tb.shape));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(&ta.data, &tb.data, &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ` for row-major `a[m,k]`, `b[n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.shape[1] != tb.shape[1] {
            return dim_err("matmul_nt", format!("{:?} x {:?}^T", ta.shape, tb.shape));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(&ta.data, &tb.data, &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul_nt", Tensor { shape: vec![m, n], data: out }, Op::MatMulNT(a, b), rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return dim_err(name, format!("{:?} vs {:?}", ta.shape, tb.shape));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let out = ta.same_shape_like(data);
        let rg = self.rg(&[a, b]);
        self.push(name, out, op, rg)
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

    /// `x[m,n] + bias[n]` broadcast over rows. The only broadcasting op.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if !is_matrix(tx) || tb.numel() != tx.shape[1] || tb.shape.len() > 2 || (tb.shape.len() == 2 && tb.shape[0] != 1) {
            return dim_err("add_row", format!("{:?} + {:?}", tx.shape, tb.shape));
        }
        let n = tx.shape[1];
        let mut data = tx.data.clone();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(&tb.data) {
                *o += b;
            }
        }
        let out = tx.same_shape_like(data);
        let rg = self.rg(&[x, bias]);
        self.push("add_row", out, Op::AddRow(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let out = tx.same_shape_like(tx.data.iter().map(|v| v * c).collect());
        let rg = self.rg(&[x]);
        self.push("scale", out, Op::Scale(x, c), rg)
    }

    /// Multiply every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return dim_err("scale_by", format!("scalar expected, got {:?}", ts.shape));
        }
        let c = ts.data[0];
        let tx = self.value(x);
        let out = tx.same_shape_like(tx.data.iter().map(|v| v * c).collect());
        let rg = self.rg(&[x, s]);
        self.push("scale_by", out, Op::ScaleBy(x, s), rg)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let tx = self.value(x);
        let out = tx.same_shape_like(tx.data.iter().map(|v| f(*v)).collect());
        let rg = self.rg(&[x]);
        self.push(name, out, op, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("log_sigmoid", x, log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    /// Row-wise layer normalization with gain and bias vectors.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        if !is_matrix(tx) || tg.numel() != tx.shape[1] || tb.numel() != tx.shape[1] {
            return dim_err("layer_norm", format!("{:?} with gain {:?}", tx.shape, tg.shape));
        }
        let (m, n) = (tx.shape[0], tx.shape[1]);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx.data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * tg.data[j] + tb.data[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push("layer_norm", Tensor { shape: vec![m, n], data: out }, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// Rows of `table[V,d]` gathered by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if !is_matrix(tt) {
            return dim_err("embedding", format!("table {:?}", tt.shape));
        }
        let (v, d) = (tt.shape[0], tt.shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return dim_err("embedding", format!("id {id} >= vocab {v}"));
            }
            out.extend_from_slice(&tt.data[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            "embedding",
            Tensor { shape: vec![ids.len(), d], data: out },
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        )
    }

    /// Sum over rows with a target of `-log softmax(logits[row])[target]`.
    /// Rows with `None` contribute nothing.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.value(logits);
        if !is_matrix(tl) || tl.shape[0] != targets.len() {
            return dim_err("softmax_cross_entropy", format!("logits {:?}, {} targets", tl.shape, targets.len()));
        }
        let (m, v) = (tl.shape[0], tl.shape[1]);
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return dim_err("softmax_cross_entropy", format!("target {t} >= {v}"));
            }
            let row = &tl.data[i * v..(i + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[i * v + j] = e;
                z += e;
            }
            for p in &mut probs[i * v..(i + 1) * v] {
                *p /= z;
            }
            loss += -(row[t] - mx - z.ln());
        }
        let rg = self.rg(&[logits]);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxXent { logits, targets: targets.to_vec(), probs },
            rg,
        )
    }

    /// Pairwise cosine similarity between rows of `a[m,d]` and rows of `b[n,d]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.shape[1] != tb.shape[1] {
            return dim_err("cosine_similarity", format!("{:?} vs {:?}", ta.shape, tb.shape));
        }
        let (m, d, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
        let norm = |t: &Tensor, r: usize| t.data[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_a: Vec<f64> = (0..m).map(|i| norm(ta, i)).collect();
        let norm_b: Vec<f64> = (0..n).map(|j| norm(tb, j)).collect();
        if norm_a.iter().chain(&norm_b).any(|&v| v == 0.0) {
            return Err(TensorError::NonFinite { op: "cosine_similarity (zero-norm row)" });
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(&ta.data, &tb.data, &mut out, m, d, n);
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] /= norm_a[i] * norm_b[j];
            }
        }
        let rg = self.rg(&[a, b]);
        self.push("cosine_similarity", Tensor { shape: vec![m, n], data: out }, Op::Cosine { a, b, norm_a, norm_b }, rg)
    }

    /// Sum of squares as a scalar.
    pub fn squared_l2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().map(|v| v * v).sum();
        let rg = self.rg(&[x]);
        self.push("squared_l2", Tensor::scalar(s), Op::SquaredL2(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return dim_err("mean", "empty tensor");
        }
        let s = t.data.iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat_rows", "no inputs");
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if !is_matrix(t) || t.shape[1] != cols {
                return dim_err("concat_rows", format!("{:?} into width {cols}", t.shape));
            }
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let rg = self.rg(parts);
        self.push("concat_rows", Tensor { shape: vec![rows, cols], data }, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat_cols", "no inputs");
        }
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if !is_matrix(t) || t.shape[0] != rows {
                return dim_err("concat_cols", format!("{:?} into height {rows}", t.shape));
            }
            widths.push(t.shape[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for i in 0..rows {
                data[i * total + off..i * total + off + w].copy_from_slice(&t.data[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        self.push("concat_cols", Tensor { shape: vec![rows, total], data }, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if !is_matrix(t) || start > end || end > t.shape[0] {
            return dim_err("slice_rows", format!("{start}..{end} of {:?}", t.shape));
        }
        let c = t.shape[1];
        let data = t.data[start * c..end * c].to_vec();
        let rg = self.rg(&[x]);
        self.push("slice_rows", Tensor { shape: vec![end - start, c], data }, Op::SliceRows(x, start), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if !is_matrix(t) || start > end || end > t.shape[1] {
            return dim_err("slice_cols", format!("{start}..{end} of {:?}", t.shape));
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&t.data[i * c + start..i * c + end]);
        }
        let rg = self.rg(&[x]);
        self.push("slice_cols", Tensor { shape: vec![r, w], data }, Op::SliceCols(x, start), rg)
    }

    /// Row softmax. With `causal`, entry (i, j) is masked out when
    /// `j > i + (cols - rows)`, i.e. queries are aligned to the last keys.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let t = self.value(x);
        if !is_matrix(t) || (causal && t.shape[1] < t.shape[0]) {
            return dim_err("softmax_rows", format!("{:?} causal={causal}", t.shape));
        }
        let (m, n) = (t.shape[0], t.shape[1]);
        let offset = n - m;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let lim = if causal { i + offset + 1 } else { n };
            let row = &t.data[i * n..i * n + lim];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..lim {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for v in &mut out[i * n..i * n + lim] {
                *v /= z;
            }
        }
        let rg = self.rg(&[x]);
        self.push("softmax_rows", Tensor { shape: vec![m, n], data: out }, Op::SoftmaxRows { x }, rg)
    }

    /// Scaled dot-product scores `q kᵀ / sqrt(d)` followed by a (optionally
    /// causal) row softmax.
    pub fn attention_weights(&mut self, q: Var, k: Var, causal: bool) -> Result<Var> {
        let d = self.value(q).cols();
        let s = self.matmul_nt(q, k)?;
        let s = self.scale(s, 1.0 / (d as f64).sqrt())?;
        self.softmax_rows(s, causal)
    }

    /// Identity forward; contributes nothing backward.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push("stop_gradient", value, Op::StopGradient, false)
    }

    /// Forward value is `forward`; backward passes the upstream gradient to `x`
    /// unchanged (identity Jacobian).
    pub fn straight_through(&mut self, x: Var, forward: Tensor) -> Result<Var> {
        if forward.shape != self.value(x).shape {
            return dim_err("straight_through", format!("{:?} vs {:?}", forward.shape, self.value(x).shape));
        }
        let rg = self.rg(&[x]);
        self.push("straight_through", forward, Op::StraightThrough(x), rg)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Backpropagate from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        self.backward_seeded(&[(loss, Tensor::filled(self.value(loss).shape(), 1.0))])
    }

    /// Backpropagate from arbitrary seed adjoints. Used when part of the loss was
    /// differentiated on another graph and its input gradient is injected here.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Tensor)]) -> Result<()> {
        let n = self.nodes.len();
        let mut adj: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut top = 0;
        for (v, seed) in seeds {
            if seed.shape != self.value(*v).shape {
                return Err(TensorError::Contract(format!(
                    "seed shape {:?} does not match node {:?}",
                    seed.shape,
                    self.value(*v).shape
                )));
            }
            accumulate(&mut adj[v.0], seed.clone());
            top = top.max(v.0 + 1);
        }
        let mut visits = 0;
        for idx in (0..top).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            visits += 1;
            self.backprop_node(idx, &g, &mut adj);
            if self.grads.len() < n {
                self.grads.resize_with(n, || None);
            }
            accumulate(&mut self.grads[idx], g);
        }
        self.last_visits = visits;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let send = |v: Var, t: Tensor, adj: &mut [Option<Tensor>]| {
            if nodes[v.0].requires_grad {
                accumulate(&mut adj[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(&g.data, &tb.data, &mut ga, m, n, k);
                    send(*a, ta.same_shape_like(ga), adj);
                }
                if rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(&ta.data, &g.data, &mut gb, m, k, n);
                    send(*b, tb.same_shape_like(gb), adj);
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                if rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nn(&g.data, &tb.data, &mut ga, m, n, k);
                    send(*a, ta.same_shape_like(ga), adj);
                }
                if rg(*b) {
                    let mut gb = vec![0.0; n * k];
                    gemm_tn(&g.data, &ta.data, &mut gb, m, n, k);
                    send(*b, tb.same_shape_like(gb), adj);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), adj);
                send(*b, g.clone(), adj);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), adj);
                send(*b, g.same_shape_like(g.data.iter().map(|v| -v).collect()), adj);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if rg(*a) {
                    send(*a, g.same_shape_like(g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect()), adj);
                }
                if rg(*b) {
                    send(*b, g.same_shape_like(g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect()), adj);
                }
            }
            Op::AddRow(x, bias) => {
                send(*x, g.clone(), adj);
                if rg(*bias) {
                    let tb = val(*bias);
                    let n = tb.numel();
                    let mut gb = vec![0.0; n];
                    for row in g.data.chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    send(*bias, tb.same_shape_like(gb), adj);
                }
            }
            Op::Scale(x, c) => {
                send(*x, g.same_shape_like(g.data.iter().map(|v| v * c).collect()), adj);
            }
            Op::ScaleBy(x, s) => {
                let c = val(*s).data[0];
                if rg(*x) {
                    send(*x, g.same_shape_like(g.data.iter().map(|v| v * c).collect()), adj);
                }
                if rg(*s) {
                    let dot: f64 = g.data.iter().zip(&val(*x).data).map(|(a, b)| a * b).sum();
                    send(*s, val(*s).same_shape_like(vec![dot]), adj);
                }
            }
            Op::Gelu(x) => {
                let tx = val(*x);
                send(*x, g.same_shape_like(g.data.iter().zip(&tx.data).map(|(gv, xv)| gv * gelu_grad(*xv)).collect()), adj);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                send(*x, g.same_shape_like(g.data.iter().zip(&y.data).map(|(gv, s)| gv * s * (1.0 - s)).collect()), adj);
            }
            Op::LogSigmoid(x) => {
                let tx = val(*x);
                send(*x, g.same_shape_like(g.data.iter().zip(&tx.data).map(|(gv, xv)| gv * sigmoid(-xv)).collect()), adj);
            }
            Op::Log(x) => {
                let tx = val(*x);
                send(*x, g.same_shape_like(g.data.iter().zip(&tx.data).map(|(gv, xv)| gv / xv).collect()), adj);
            }
            Op::Exp(x) => {
                let y = &node.value;
                send(*x, g.same_shape_like(g.data.iter().zip(&y.data).map(|(gv, e)| gv * e).collect()), adj);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let tg = val(*gain);
                let (m, n) = (g.shape[0], g.shape[1]);
                if rg(*gain) {
                    let mut gg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g.data[i * n + j] * xhat[i * n + j];
                        }
                    }
                    send(*gain, tg.same_shape_like(gg), adj);
                }
                if rg(*bias) {
                    let mut gb = vec![0.0; n];
                    for row in g.data.chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    send(*bias, val(*bias).same_shape_like(gb), adj);
                }
                if rg(*x) {
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = g.data[i * n + j] * tg.data[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[i * n + j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for j in 0..n {
                            let dh = g.data[i * n + j] * tg.data[j];
                            gx[i * n + j] = rstd[i] * (dh - mean_dh - xhat[i * n + j] * mean_dh_h);
                        }
                    }
                    send(*x, g.same_shape_like(gx), adj);
                }
            }
            Op::Embedding { table, ids } => {
                let tt = val(*table);
                let d = tt.shape[1];
                let mut gt = vec![0.0; tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g.data[r * d + j];
                    }
                }
                send(*table, tt.same_shape_like(gt), adj);
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let tl = val(*logits);
                let v = tl.shape[1];
                let scale = g.data[0];
                let mut gl = vec![0.0; tl.numel()];
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..v {
                        gl[i * v + j] = scale * probs[i * v + j];
                    }
                    gl[i * v + t] -= scale;
                }
                send(*logits, tl.same_shape_like(gl), adj);
            }
            Op::Cosine { a, b, norm_a, norm_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let c = &node.value;
                let (m, d, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                if rg(*a) {
                    let mut ga = vec![0.0; m * d];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g.data[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let cij = c.data[i * n + j];
                            let inv = 1.0 / (norm_a[i] * norm_b[j]);
                            let na2 = norm_a[i] * norm_a[i];
                            for k in 0..d {
                                ga[i * d + k] += gij * (tb.data[j * d + k] * inv - cij * ta.data[i * d + k] / na2);
                            }
                        }
                    }
                    send(*a, ta.same_shape_like(ga), adj);
                }
                if rg(*b) {
                    let mut gb = vec![0.0; n * d];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g.data[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let cij = c.data[i * n + j];
                            let inv = 1.0 / (norm_a[i] * norm_b[j]);
                            let nb2 = norm_b[j] * norm_b[j];
                            for k in 0..d {
                                gb[j * d + k] += gij * (ta.data[i * d + k] * inv - cij * tb.data[j * d + k] / nb2);
                            }
                        }
                    }
                    send(*b, tb.same_shape_like(gb), adj);
                }
            }
            Op::SquaredL2(x) => {
                let tx = val(*x);
                let s = 2.0 * g.data[0];
                send(*x, tx.same_shape_like(tx.data.iter().map(|v| s * v).collect()), adj);
            }
            Op::Sum(x) => {
                let tx = val(*x);
                send(*x, tx.same_shape_like(vec![g.data[0]; tx.numel()]), adj);
            }
            Op::Mean(x) => {
                let tx = val(*x);
                let s = g.data[0] / tx.numel() as f64;
                send(*x, tx.same_shape_like(vec![s; tx.numel()]), adj);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let tp = val(p);
                    let len = tp.numel();
                    if rg(p) {
                        send(p, tp.same_shape_like(g.data[off..off + len].to_vec()), adj);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.shape[0];
                let total = g.shape[1];
                let mut off = 0;
                for &p in parts {
                    let tp = val(p);
                    let w = tp.shape[1];
                    if rg(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            gp.extend_from_slice(&g.data[i * total + off..i * total + off + w]);
                        }
                        send(p, tp.same_shape_like(gp), adj);
                    }
                    off += w;
                }
            }
            Op::SliceRows(x, start) => {
                let tx = val(*x);
                let c = tx.shape[1];
                let mut gx = vec![0.0; tx.numel()];
                gx[start * c..start * c + g.numel()].copy_from_slice(&g.data);
                send(*x, tx.same_shape_like(gx), adj);
            }
            Op::SliceCols(x, start) => {
                let tx = val(*x);
                let (r, c) = (tx.shape[0], tx.shape[1]);
                let w = g.shape[1];
                let mut gx = vec![0.0; tx.numel()];
                for i in 0..r {
                    gx[i * c + start..i * c + start + w].copy_from_slice(&g.data[i * w..(i + 1) * w]);
                }
                send(*x, tx.same_shape_like(gx), adj);
            }
            Op::SoftmaxRows { x, .. } => {
                let y = &node.value;
                let (m, n) = (y.shape[0], y.shape[1]);
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y.data[i * n..(i + 1) * n];
                    let gr = &g.data[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, y.same_shape_like(gx), adj);
            }
            Op::StraightThrough(x) => {
                send(*x, g.clone(), adj);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&t),
        None => *slot = Some(t),
    }
}
