//! Minimal reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the record in reverse and returns gradients for all nodes, including
//! the parameters borrowed from a [`ParamStore`]. Graphs are cheap, single-use
//! and not shared between threads; parameters are shared read-only, so many
//! graphs can run concurrently against one store.
//!
//! Everything is a row-major matrix. Vectors are `1 x n`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

pub trait Scalar:
    Copy
    + Default
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;

    /// `c = alpha * a(m x k) * b(k x n) + beta * c`, arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    #[inline]
    fn max(self, o: Self) -> Self {
        if self >= o {
            self
        } else {
            o
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n);
                if k == 0 {
                    c[..m * n].iter_mut().for_each(|x| *x *= beta);
                    return;
                }
                let a_need = ((m - 1) as isize * rsa + (k - 1) as isize * csa) as usize + 1;
                let b_need = ((k - 1) as isize * rsb + (n - 1) as isize * csb) as usize + 1;
                assert!(a.len() >= a_need && b.len() >= b_need, "gemm operand too short");
                // SAFETY: bounds of every operand were checked above for the
                // given non-negative strides; c is row-major m x n.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::ZERO; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match shape {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<F>) -> Self {
        let n = data.len();
        Self::from_vec(1, n, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64() * v.to_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a.to_f64() - b.to_f64()).abs()).fold(0.0, f64::max)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Which keys each query row may attend to in [`Graph::attention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnPattern {
    /// Every query sees every key. With `causal`, query `i` sees keys
    /// `0..=i + (n_keys - n_queries)`.
    Full { causal: bool },
    /// Rows are slot-major blocks of `steps` rows each; query `(a, t)` sees
    /// keys `(b, t)` for every key slot `b`. Used to attend across instances
    /// independently at each time index.
    PerStep { steps: usize },
}

#[derive(Debug)]
enum Op<F> {
    Input,
    Param(ParamId),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    Gelu(usize),
    SoftmaxRows(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<F>, rstd: Vec<F> },
    Attention { q: usize, k: usize, v: usize, heads: usize, pattern: AttnPattern, probs: Vec<F>, kmax: usize },
    SliceRows(usize, usize),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    Reshape(usize),
    Transpose(usize),
    RepeatRows(usize),
    Embedding { table: usize, ids: Vec<Option<usize>> },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, probs: Vec<F>, scale: F },
    AddN(Vec<usize>),
    SumAll(usize),
}

struct Node<F> {
    value: Option<Tensor<F>>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<'p, F: Scalar> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_nodes: Vec<Option<usize>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.value_of(v.0)
    }

    fn value_of(&self, i: usize) -> &Tensor<F> {
        let node = &self.nodes[i];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: Some(t), op: Op::Input, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(i) = self.param_nodes[id.0] {
            return Var(i);
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: true });
        let i = self.nodes.len() - 1;
        self.param_nodes[id.0] = Some(i);
        Var(i)
    }

    fn mm(&self, a: &Tensor<F>, b: &Tensor<F>, ta: bool, tb: bool) -> Tensor<F> {
        let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
        assert_eq!(k, k2, "matmul inner dimensions differ: {:?}{} x {:?}{}", a.shape(), ta, b.shape(), tb);
        let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
        let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
        let mut out = Tensor::zeros(m, n);
        F::gemm(m, k, n, &a.data, rsa, csa, &b.data, rsb, csb, F::ZERO, &mut out.data);
        out
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let out = self.mm(self.value(a), self.value(b), ta, tb);
        self.push(out, Op::MatMul { a: a.0, b: b.0, ta, tb }, &[a.0, b.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| *p + *q).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    /// Adds the `1 x c` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (x, b) = (self.value(a), self.value(r));
        assert_eq!((1, x.cols), b.shape(), "add_row shape mismatch");
        let mut out = x.clone();
        for row in out.data.chunks_exact_mut(x.cols) {
            for (o, bb) in row.iter_mut().zip(&b.data) {
                *o += *bb;
            }
        }
        self.push(out, Op::AddRow(a.0, r.0), &[a.0, r.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| *p * *q).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let x = self.value(a);
        let out = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|v| *v * c).collect());
        self.push(out, Op::Scale(a.0, c), &[a.0])
    }

    /// `x W + b` with `W: in x out`, `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = F::from_f64(GELU_C);
        let k = F::from_f64(0.044715);
        let half = F::from_f64(0.5);
        let data = x.data.iter().map(|&v| half * v * (F::ONE + (c * (v + k * v * v * v)).tanh())).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Gelu(a.0), &[a.0])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for row in out.data.chunks_exact_mut(x.cols) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(a.0), &[a.0])
    }

    /// Row-wise layer normalization with `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = F::from_f64(1e-5);
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, c));
        assert_eq!(b.shape(), (1, c));
        let inv_c = F::from_f64(1.0 / c as f64);
        let mut xhat = vec![F::ZERO; r * c];
        let mut rstd = vec![F::ZERO; r];
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<F>() * inv_c;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() * inv_c;
            let rs = F::ONE / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out.data[i * c + j] = h * g.data[j] + b.data[j];
            }
        }
        self.push(out, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd }, &[x.0, gamma.0, beta.0])
    }

    /// Multi-head scaled dot-product attention on already projected
    /// `q: Nq x d`, `k, v: Nk x d`. Heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, pattern: AttnPattern) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        assert_eq!(kv.shape(), vv.shape());
        assert_eq!(kv.cols, d);
        let geo = AttnGeometry::new(qv.rows, kv.rows, pattern);
        let dh = d / heads;
        let sc = F::from_f64(1.0 / (dh as f64).sqrt());
        let kmax = geo.kmax;
        let mut probs = vec![F::ZERO; heads * qv.rows * kmax];
        let mut out = Tensor::zeros(qv.rows, d);
        let mut scores = vec![F::ZERO; kmax];
        for i in 0..qv.rows {
            let nvalid = geo.valid(i);
            for h in 0..heads {
                let qi = &qv.data[i * d + h * dh..i * d + (h + 1) * dh];
                for (jj, s) in scores.iter_mut().enumerate().take(nvalid) {
                    let kr = geo.key_row(i, jj);
                    let kj = &kv.data[kr * d + h * dh..kr * d + (h + 1) * dh];
                    *s = dot(qi, kj) * sc;
                }
                softmax_in_place(&mut scores[..nvalid]);
                let pbase = (h * qv.rows + i) * kmax;
                probs[pbase..pbase + nvalid].copy_from_slice(&scores[..nvalid]);
                let o = &mut out.data[i * d + h * dh..i * d + (h + 1) * dh];
                for (jj, &p) in scores.iter().enumerate().take(nvalid) {
                    let kr = geo.key_row(i, jj);
                    let vj = &vv.data[kr * d + h * dh..kr * d + (h + 1) * dh];
                    axpy(p, vj, o);
                }
            }
        }
        self.push(out, Op::Attention { q: q.0, k: k.0, v: v.0, heads, pattern, probs, kmax }, &[q.0, k.0, v.0])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows, "row slice out of range");
        let out = Tensor::from_vec(len, x.cols, x.data[start * x.cols..(start + len) * x.cols].to_vec());
        self.push(out, Op::SliceRows(a.0, start), &[a.0])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(ids.clone()), &ids)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "column slice out of range");
        let out = Tensor::from_fn(x.rows, len, |r, c| x.data[r * x.cols + start + c]);
        self.push(out, Op::SliceCols(a.0, start), &[a.0])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols).collect();
        let cols: usize = widths.iter().sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let t = self.value(*p);
            assert_eq!(t.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(out, Op::ConcatCols(ids.clone()), &ids)
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols, "reshape size mismatch");
        let out = Tensor::from_vec(rows, cols, x.data.clone());
        self.push(out, Op::Reshape(a.0), &[a.0])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::from_fn(x.cols, x.rows, |r, c| x.data[c * x.cols + r]);
        self.push(out, Op::Transpose(a.0), &[a.0])
    }

    /// Broadcasts a `1 x c` row to `n x c`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows, 1, "repeat_rows expects a single row");
        let mut data = Vec::with_capacity(n * x.cols);
        for _ in 0..n {
            data.extend_from_slice(&x.data);
        }
        let out = Tensor::from_vec(n, x.cols, data);
        self.push(out, Op::RepeatRows(a.0), &[a.0])
    }

    /// Row lookup; `None` yields a zero row.
    pub fn embedding(&mut self, table: Var, ids: Vec<Option<usize>>) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (r, id) in ids.iter().enumerate() {
            if let Some(id) = id {
                out.data[r * t.cols..(r + 1) * t.cols].copy_from_slice(t.row(*id));
            }
        }
        self.push(out, Op::Embedding { table: table.0, ids }, &[table.0])
    }

    /// `scale * sum_r -log softmax(logits_r)[target_r]` over rows with a
    /// target; returns a `1 x 1` tensor.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>, scale: F) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len(), "one target per logits row");
        let mut probs = l.data.clone();
        let mut total = F::ZERO;
        for (r, t) in targets.iter().enumerate() {
            let row = &mut probs[r * l.cols..(r + 1) * l.cols];
            let lse = log_sum_exp(row);
            if let Some(t) = t {
                total += lse - row[*t];
            }
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let out = Tensor::from_vec(1, 1, vec![total * scale]);
        self.push(out, Op::CrossEntropy { logits: logits.0, targets, probs, scale }, &[logits.0])
    }

    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut out = self.value(parts[0]).clone();
        for p in &parts[1..] {
            out.add_assign(self.value(*p));
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(out, Op::AddN(ids.clone()), &ids)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum::<F>();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::SumAll(a.0), &[a.0])
    }

    /// Reverse sweep from the `1 x 1` node `root`.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_vec(1, 1, vec![F::ONE]));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut param_grads: Vec<Option<Tensor<F>>> = (0..self.params.len()).map(|_| None).collect();
        for (pid, slot) in self.param_nodes.iter().enumerate() {
            if let Some(n) = slot {
                param_grads[pid] = grads[*n].take();
            }
        }
        Gradients { nodes: grads, params: param_grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let needs = |j: usize| self.nodes[j].needs_grad;
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value_of(*a), self.value_of(*b));
                if needs(*a) {
                    // dA = g op(B)^T  (transposed back if A was transposed)
                    let da = if *ta { self.mm(bv, g, *tb, true) } else { self.mm(g, bv, false, !*tb) };
                    accumulate(grads, *a, da);
                }
                if needs(*b) {
                    let db = if *tb { self.mm(g, av, true, *ta) } else { self.mm(av, g, !*ta, false) };
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, r) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*r) {
                    let mut dr = Tensor::zeros(1, g.cols);
                    for row in g.data.chunks_exact(g.cols) {
                        for (d, v) in dr.data.iter_mut().zip(row) {
                            *d += *v;
                        }
                    }
                    accumulate(grads, *r, dr);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value_of(*a), self.value_of(*b));
                if needs(*a) {
                    let d = g.data.iter().zip(&bv.data).map(|(x, y)| *x * *y).collect();
                    accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
                }
                if needs(*b) {
                    let d = g.data.iter().zip(&av.data).map(|(x, y)| *x * *y).collect();
                    accumulate(grads, *b, Tensor::from_vec(g.rows, g.cols, d));
                }
            }
            Op::Scale(a, c) => {
                let d = g.data.iter().map(|x| *x * *c).collect();
                accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::Gelu(a) => {
                let x = self.value_of(*a);
                let c = F::from_f64(GELU_C);
                let k = F::from_f64(0.044715);
                let half = F::from_f64(0.5);
                let three_k = F::from_f64(3.0 * 0.044715);
                let d = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(gv, &v)| {
                        let u = c * (v + k * v * v * v);
                        let th = u.tanh();
                        let du = c * (F::ONE + three_k * v * v);
                        let dy = half * (F::ONE + th) + half * v * (F::ONE - th * th) * du;
                        *gv * dy
                    })
                    .collect();
                accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::SoftmaxRows(a) => {
                let y = self.value_of(i);
                let mut d = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let s = dot(yr, gr);
                    for c in 0..g.cols {
                        d.data[r * g.cols + c] = yr[c] * (gr[c] - s);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gm = self.value_of(*gamma);
                let (r, c) = g.shape();
                if needs(*gamma) {
                    let mut dg = Tensor::zeros(1, c);
                    for (idx, gv) in g.data.iter().enumerate() {
                        dg.data[idx % c] += *gv * xhat[idx];
                    }
                    accumulate(grads, *gamma, dg);
                }
                if needs(*beta) {
                    let mut db = Tensor::zeros(1, c);
                    for (idx, gv) in g.data.iter().enumerate() {
                        db.data[idx % c] += *gv;
                    }
                    accumulate(grads, *beta, db);
                }
                if needs(*x) {
                    let inv_c = F::from_f64(1.0 / c as f64);
                    let mut dx = Tensor::zeros(r, c);
                    let mut dxh = vec![F::ZERO; c];
                    for row in 0..r {
                        let base = row * c;
                        for j in 0..c {
                            dxh[j] = g.data[base + j] * gm.data[j];
                        }
                        let m1 = dxh.iter().copied().sum::<F>() * inv_c;
                        let m2 = dxh.iter().zip(&xhat[base..base + c]).map(|(a, b)| *a * *b).sum::<F>() * inv_c;
                        for j in 0..c {
                            dx.data[base + j] = rstd[row] * (dxh[j] - m1 - xhat[base + j] * m2);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Attention { q, k, v, heads, pattern, probs, kmax } => {
                let (qv, kv, vv) = (self.value_of(*q), self.value_of(*k), self.value_of(*v));
                let d = qv.cols;
                let dh = d / heads;
                let sc = F::from_f64(1.0 / (dh as f64).sqrt());
                let geo = AttnGeometry::new(qv.rows, kv.rows, *pattern);
                let mut dq = Tensor::zeros(qv.rows, d);
                let mut dk = Tensor::zeros(kv.rows, d);
                let mut dv = Tensor::zeros(kv.rows, d);
                let mut dp = vec![F::ZERO; *kmax];
                for i in 0..qv.rows {
                    let nvalid = geo.valid(i);
                    for h in 0..*heads {
                        let pbase = (h * qv.rows + i) * kmax;
                        let p = &probs[pbase..pbase + nvalid];
                        let go = &g.data[i * d + h * dh..i * d + (h + 1) * dh];
                        for jj in 0..nvalid {
                            let kr = geo.key_row(i, jj);
                            let vj = &vv.data[kr * d + h * dh..kr * d + (h + 1) * dh];
                            dp[jj] = dot(go, vj);
                            axpy(p[jj], go, &mut dv.data[kr * d + h * dh..kr * d + (h + 1) * dh]);
                        }
                        let s: F = p.iter().zip(&dp[..nvalid]).map(|(a, b)| *a * *b).sum();
                        let qi = &qv.data[i * d + h * dh..i * d + (h + 1) * dh];
                        for jj in 0..nvalid {
                            let ds = p[jj] * (dp[jj] - s) * sc;
                            let kr = geo.key_row(i, jj);
                            let kj = &kv.data[kr * d + h * dh..kr * d + (h + 1) * dh];
                            axpy(ds, kj, &mut dq.data[i * d + h * dh..i * d + (h + 1) * dh]);
                            axpy(ds, qi, &mut dk.data[kr * d + h * dh..kr * d + (h + 1) * dh]);
                        }
                    }
                }
                if needs(*q) {
                    accumulate(grads, *q, dq);
                }
                if needs(*k) {
                    accumulate(grads, *k, dk);
                }
                if needs(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::SliceRows(a, start) => {
                let x = self.value_of(*a);
                let mut d = Tensor::zeros(x.rows, x.cols);
                d.data[start * x.cols..start * x.cols + g.len()].copy_from_slice(&g.data);
                accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let t = self.value_of(*p);
                    if needs(*p) {
                        let d = Tensor::from_vec(t.rows, t.cols, g.data[off..off + t.len()].to_vec());
                        accumulate(grads, *p, d);
                    }
                    off += t.len();
                }
            }
            Op::SliceCols(a, start) => {
                let x = self.value_of(*a);
                let mut d = Tensor::zeros(x.rows, x.cols);
                for r in 0..g.rows {
                    d.data[r * x.cols + start..r * x.cols + start + g.cols].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let t = self.value_of(*p);
                    if needs(*p) {
                        let d = Tensor::from_fn(t.rows, t.cols, |r, c| g.data[r * g.cols + off + c]);
                        accumulate(grads, *p, d);
                    }
                    off += t.cols;
                }
            }
            Op::Reshape(a) => {
                let x = self.value_of(*a);
                accumulate(grads, *a, Tensor::from_vec(x.rows, x.cols, g.data.clone()));
            }
            Op::Transpose(a) => {
                let d = Tensor::from_fn(g.cols, g.rows, |r, c| g.data[c * g.cols + r]);
                accumulate(grads, *a, d);
            }
            Op::RepeatRows(a) => {
                let mut d = Tensor::zeros(1, g.cols);
                for row in g.data.chunks_exact(g.cols) {
                    for (x, y) in d.data.iter_mut().zip(row) {
                        *x += *y;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::Embedding { table, ids } => {
                let t = self.value_of(*table);
                let slot = &mut grads[*table];
                let d = slot.get_or_insert_with(|| Tensor::zeros(t.rows, t.cols));
                for (r, id) in ids.iter().enumerate() {
                    if let Some(id) = id {
                        let dst = &mut d.data[id * t.cols..(id + 1) * t.cols];
                        for (x, y) in dst.iter_mut().zip(g.row(r)) {
                            *x += *y;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, scale } => {
                let l = self.value_of(*logits);
                let gs = g.data[0] * *scale;
                let mut d = Tensor::zeros(l.rows, l.cols);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        let row = &mut d.data[r * l.cols..(r + 1) * l.cols];
                        for (x, p) in row.iter_mut().zip(&probs[r * l.cols..(r + 1) * l.cols]) {
                            *x = *p * gs;
                        }
                        row[*t] -= gs;
                    }
                }
                accumulate(grads, *logits, d);
            }
            Op::AddN(parts) => {
                for p in parts {
                    if needs(*p) {
                        accumulate(grads, *p, g.clone());
                    }
                }
            }
            Op::SumAll(a) => {
                let x = self.value_of(*a);
                accumulate(grads, *a, Tensor::from_vec(x.rows, x.cols, vec![g.data[0]; x.len()]));
            }
        }
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], i: usize, d: Tensor<F>) {
    match &mut grads[i] {
        Some(g) => g.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnGeometry {
    nq: usize,
    nk: usize,
    pattern: AttnPattern,
    kmax: usize,
}

impl AttnGeometry {
    fn new(nq: usize, nk: usize, pattern: AttnPattern) -> Self {
        let kmax = match pattern {
            AttnPattern::Full { causal } => {
                if causal {
                    assert!(nk >= nq, "causal attention needs at least as many keys as queries");
                }
                nk
            }
            AttnPattern::PerStep { steps } => {
                assert!(steps > 0 && nq % steps == 0 && nk % steps == 0, "per-step attention needs whole slots");
                nk / steps
            }
        };
        Self { nq, nk, pattern, kmax }
    }

    #[inline]
    fn valid(&self, i: usize) -> usize {
        match self.pattern {
            AttnPattern::Full { causal: true } => i + 1 + (self.nk - self.nq),
            _ => self.kmax,
        }
    }

    #[inline]
    fn key_row(&self, i: usize, jj: usize) -> usize {
        match self.pattern {
            AttnPattern::Full { .. } => jj,
            AttnPattern::PerStep { steps } => jj * steps + i % steps,
        }
    }
}

/// Gradients of one backward sweep.
pub struct Gradients<F> {
    nodes: Vec<Option<Tensor<F>>>,
    params: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn of(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params[id.0].as_ref()
    }

    pub fn into_param_grads(self) -> Vec<Option<Tensor<F>>> {
        self.params
    }
}

#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut s = F::ZERO;
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

#[inline]
fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yy, xx) in y.iter_mut().zip(x) {
        *yy += alpha * *xx;
    }
}

pub(crate) fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let m = row.iter().copied().fold(row[0], F::max);
    let s: F = row.iter().map(|v| (*v - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    if row.is_empty() {
        return;
    }
    let m = row.iter().copied().fold(row[0], F::max);
    let mut s = F::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `d f / d params` for every parameter entry.
    fn check<B>(store: &mut ParamStore<f64>, build: B)
    where
        B: Fn(&mut Graph<f64>) -> Var,
    {
        let analytic: Vec<Option<Tensor<f64>>> = {
            let mut g = Graph::new(store);
            let out = build(&mut g);
            g.backward(out).into_param_grads()
        };
        let eps = 1e-6;
        for id in store.ids().collect::<Vec<_>>() {
            for idx in 0..store.get(id).len() {
                let orig = store.get(id).data()[idx];
                store.get_mut(id).data_mut()[idx] = orig + eps;
                let fp = {
                    let mut g = Graph::new(store);
                    let o = build(&mut g);
                    g.value(o).data()[0]
                };
                store.get_mut(id).data_mut()[idx] = orig - eps;
                let fm = {
                    let mut g = Graph::new(store);
                    let o = build(&mut g);
                    g.value(o).data()[0]
                };
                store.get_mut(id).data_mut()[idx] = orig;
                let num = (fp - fm) / (2.0 * eps);
                let an = analytic[id.0].as_ref().map_or(0.0, |t| t.data()[idx]);
                let err = (num - an).abs() / (num.abs().max(an.abs()).max(1e-3));
                assert!(err < 1e-5, "{} [{idx}]: numeric {num} analytic {an}", store.name(id));
            }
        }
    }

    #[test]
    fn gradients_of_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(&mut rng, 6, 4));
        let w = store.add("w", rand_tensor(&mut rng, 4, 4));
        let b = store.add("b", rand_tensor(&mut rng, 1, 4));
        let gm = store.add("gamma", rand_tensor(&mut rng, 1, 4));
        let bt = store.add("beta", rand_tensor(&mut rng, 1, 4));
        let emb = store.add("emb", rand_tensor(&mut rng, 5, 4));
        let head = store.add("head", rand_tensor(&mut rng, 4, 7));
        check(&mut store, |g| {
            let x = g.param(a);
            let (wv, bv) = (g.param(w), g.param(b));
            let h = g.linear(x, wv, bv);
            let h = g.gelu(h);
            let (gg, bb) = (g.param(gm), g.param(bt));
            let h = g.layer_norm(h, gg, bb);
            let full = g.attention(h, h, x, 2, AttnPattern::Full { causal: false });
            let causal = g.attention(h, x, h, 2, AttnPattern::Full { causal: true });
            let step = g.attention(full, causal, h, 2, AttnPattern::PerStep { steps: 3 });
            let tail = g.slice_rows(step, 2, 3);
            let e = g.param(emb);
            let looked = g.embedding(e, vec![Some(1), None, Some(1)]);
            let m = g.mul(tail, looked);
            let cat = g.concat_rows(&[m, causal]);
            let left = g.slice_cols(cat, 1, 2);
            let right = g.slice_cols(cat, 0, 2);
            let both = g.concat_cols(&[left, right]);
            let r = g.reshape(both, 9, 4);
            let t = g.transpose(r);
            let sm = g.softmax_rows(t);
            let back = g.transpose(sm);
            let rep = g.repeat_rows(bv, 9);
            let s = g.add_n(&[back, rep, r]);
            let s = g.scale(s, 0.7);
            let hv = g.param(head);
            let logits = g.matmul_ex(s, hv, false, false);
            let ce = g.cross_entropy(logits, vec![Some(0), None, Some(6), Some(3), None, Some(2), Some(1), None, Some(5)], 0.25);
            let wt = g.matmul_ex(hv, hv, true, false);
            let wt2 = g.matmul_ex(hv, hv, false, true);
            let x1 = g.sum_all(wt);
            let x2 = g.sum_all(wt2);
            let x = g.add(x1, x2);
            let x = g.scale(x, 0.01);
            g.add(ce, x)
        });
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let store = ParamStore::<f64>::new();
        let q = rand_tensor(&mut rng, 5, 4);
        let mut k = rand_tensor(&mut rng, 5, 4);
        let run = |k: &Tensor<f64>| {
            let mut g = Graph::new(&store);
            let (qv, kv) = (g.input(q.clone()), g.input(k.clone()));
            let o = g.attention(qv, kv, kv, 2, AttnPattern::Full { causal: true });
            g.value(o).clone()
        };
        let before = run(&k);
        for c in 0..4 {
            k.data_mut()[4 * 4 + c] += 1.0;
        }
        let after = run(&k);
        for r in 0..4 {
            assert_eq!(before.row(r), after.row(r));
        }
        assert_ne!(before.row(4), after.row(4));
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let l = g.input(Tensor::zeros(3, 50));
        let ce = g.cross_entropy(l, vec![Some(1), Some(2), Some(3)], 1.0 / 3.0);
        assert!((g.value(ce).data()[0] - 50f64.ln()).abs() < 1e-12);
    }
}
