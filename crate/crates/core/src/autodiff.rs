//! Minimal reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output value. [`Tape::backward`] walks the nodes in reverse and applies each
//! op's vector–Jacobian product. Gradients may be seeded on any set of nodes at
//! once, which is how attention-map losses are pulled back to the input latent
//! without ever forming a scalar on the tape.
//!
//! The tape is generic over [`Scalar`] so the same model code runs in `f32`
//! (sampling, training) and `f64` (finite-difference checks).

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + fmt::Debug
    + fmt::Display
    + 'static
{
    /// `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k` and `op(b)` is
    /// `k×n`. With `a_t`, `a` is stored as `k×m`; with `b_t`, `b` is stored as
    /// `n×k`. All buffers are row-major and dense.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // (row stride, col stride) of op(x) where x is stored densely.
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs size");
                assert_eq!(b.len(), k * n, "gemm: rhs size");
                assert_eq!(c.len(), m * n, "gemm: out size");
                if m == 0 || n == 0 {
                    return;
                }
                // Stored shapes: a is m×k (or k×m), b is k×n (or n×k).
                let (rsa, csa) = if a_t { strides(m, k, true) } else { strides(m, k, false) };
                let (rsb, csb) = if b_t { strides(k, n, true) } else { strides(k, n, false) };
                // SAFETY: slice lengths are checked above and the strides
                // describe dense row-major storage of exactly those sizes.
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

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Mat<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat({}x{})", self.rows, self.cols)
    }
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::from_vec(rows, cols, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn add_assign(&mut self, other: &Mat<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, idx: Vec<usize> },
    Mse { x: Var, target: Mat<T> },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    /// Input or parameter. Gradients are only propagated towards leaves
    /// created with `requires_grad`.
    pub fn leaf(&mut self, value: Mat<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).shape();
        let (k2, n) = self.value(b).shape();
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = Mat::zeros(m, n);
        T::gemm(
            m,
            k,
            n,
            &self.value(a).data,
            false,
            &self.value(b).data,
            false,
            T::zero(),
            &mut out.data,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).shape();
        let (n, k2) = self.value(b).shape();
        assert_eq!(k, k2, "matmul_t inner dims {k} vs {k2}");
        let mut out = Mat::zeros(m, n);
        T::gemm(
            m,
            k,
            n,
            &self.value(a).data,
            false,
            &self.value(b).data,
            true,
            T::zero(),
            &mut out.data,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds the `1×c` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let cols = self.value(a).cols;
        assert_eq!(self.value(r).shape(), (1, cols), "add_row shape");
        let mut out = self.value(a).clone();
        let row = &self.value(r).data;
        for chunk in out.data.chunks_mut(cols) {
            for (x, &b) in chunk.iter_mut().zip(row) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(r);
        self.push(out, Op::AddRow(a, r), rg)
    }

    /// Multiplies every row of `a` elementwise by the `1×c` row `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let cols = self.value(a).cols;
        assert_eq!(self.value(r).shape(), (1, cols), "mul_row shape");
        let mut out = self.value(a).clone();
        let row = &self.value(r).data;
        for chunk in out.data.chunks_mut(cols) {
            for (x, &b) in chunk.iter_mut().zip(row) {
                *x *= b;
            }
        }
        let rg = self.rg(a) || self.rg(r);
        self.push(out, Op::MulRow(a, r), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x += s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(GELU_C);
        let k = T::lit(GELU_A);
        let half = T::lit(0.5);
        let mut out = self.value(a).clone();
        out.data
            .iter_mut()
            .for_each(|x| *x = half * *x * (T::one() + (c * (*x + k * *x * *x * *x)).tanh()));
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data
            .iter_mut()
            .for_each(|x| *x = *x / (T::one() + (-*x).exp()));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    /// Row-wise softmax (max-subtracted).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols;
        for row in out.data.chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            let inv = T::one() / sum;
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols;
        let n = T::from_usize(cols).expect("cols");
        let mut rstds = Vec::with_capacity(out.rows);
        for row in out.data.chunks_mut(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * rstd);
            rstds.push(rstd);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm { x: a, rstd: rstds }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let src = self.value(a);
        assert!(start + width <= src.cols, "slice_cols out of range");
        let mut out = Mat::zeros(src.rows, width);
        for r in 0..src.rows {
            out.row_mut(r)
                .copy_from_slice(&src.row(r)[start..start + width]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols { x: a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let src = self.value(p);
            assert_eq!(src.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + src.cols].copy_from_slice(src.row(r));
            }
            off += src.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let src = self.value(table);
        let mut out = Mat::zeros(idx.len(), src.cols);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < src.rows, "gather_rows index {i} >= {}", src.rows);
            out.row_mut(r).copy_from_slice(src.row(i));
        }
        let rg = self.rg(table);
        self.push(
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Mean squared error against a constant target, as a `1×1` node.
    pub fn mse(&mut self, a: Var, target: Mat<T>) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), target.shape(), "mse shapes");
        let n = T::from_usize(x.data.len()).expect("len");
        let s = x
            .data
            .iter()
            .zip(&target.data)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        let rg = self.rg(a);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Mse { x: a, target }, rg)
    }

    /// Reverse sweep. `seeds` are upstream gradients placed on arbitrary
    /// nodes (repeated nodes accumulate). Returns gradients of every leaf
    /// that requires them.
    pub fn backward(&self, seeds: Vec<(Var, Mat<T>)>) -> Gradients<T> {
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(
                self.value(v).shape(),
                g.shape(),
                "seed shape mismatch on node {}",
                v.0
            );
            accumulate(&mut grads, v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<T>, g: Mat<T>, grads: &mut [Option<Mat<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).shape();
                let n = self.value(*b).cols;
                if self.rg(*a) {
                    // da = g · bᵀ
                    let mut da = Mat::zeros(m, k);
                    T::gemm(m, n, k, &g.data, false, &self.value(*b).data, true, T::zero(), &mut da.data);
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    // db = aᵀ · g
                    let mut db = Mat::zeros(k, n);
                    T::gemm(k, m, n, &self.value(*a).data, true, &g.data, false, T::zero(), &mut db.data);
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMulT(a, b) => {
                // c = a · bᵀ, a: m×k, b: n×k
                let (m, k) = self.value(*a).shape();
                let n = self.value(*b).rows;
                if self.rg(*a) {
                    let mut da = Mat::zeros(m, k);
                    T::gemm(m, n, k, &g.data, false, &self.value(*b).data, false, T::zero(), &mut da.data);
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Mat::zeros(n, k);
                    T::gemm(n, m, k, &g.data, true, &self.value(*a).data, false, T::zero(), &mut db.data);
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) && self.rg(*b) {
                    accumulate(grads, *a, g.clone());
                    accumulate(grads, *b, g);
                } else if self.rg(*a) {
                    accumulate(grads, *a, g);
                } else if self.rg(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::AddRow(a, r) => {
                if self.rg(*r) {
                    accumulate(grads, *r, col_sums(&g));
                }
                if self.rg(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::MulRow(a, r) => {
                let cols = g.cols;
                if self.rg(*r) {
                    let x = self.value(*a);
                    let mut dr = Mat::zeros(1, cols);
                    for (gr, xr) in g.data.chunks(cols).zip(x.data.chunks(cols)) {
                        for ((d, &gi), &xi) in dr.data.iter_mut().zip(gr).zip(xr) {
                            *d += gi * xi;
                        }
                    }
                    accumulate(grads, *r, dr);
                }
                if self.rg(*a) {
                    let row = &self.value(*r).data;
                    let mut da = g;
                    for chunk in da.data.chunks_mut(cols) {
                        for (d, &s) in chunk.iter_mut().zip(row) {
                            *d *= s;
                        }
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::Scale(a, s) => {
                let mut da = g;
                da.data.iter_mut().for_each(|x| *x *= *s);
                accumulate(grads, *a, da);
            }
            Op::AddScalar(a) => accumulate(grads, *a, g),
            Op::Gelu(a) => {
                let c = T::lit(GELU_C);
                let k = T::lit(GELU_A);
                let half = T::lit(0.5);
                let three_k = T::lit(3.0 * GELU_A);
                let x = self.value(*a);
                let mut da = g;
                for (d, &xi) in da.data.iter_mut().zip(&x.data) {
                    let th = (c * (xi + k * xi * xi * xi)).tanh();
                    let deriv = half * (T::one() + th)
                        + half * xi * (T::one() - th * th) * c * (T::one() + three_k * xi * xi);
                    *d *= deriv;
                }
                accumulate(grads, *a, da);
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let mut da = g;
                for (d, &xi) in da.data.iter_mut().zip(&x.data) {
                    let s = T::one() / (T::one() + (-xi).exp());
                    *d *= s * (T::one() + xi * (T::one() - s));
                }
                accumulate(grads, *a, da);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = y.cols;
                let mut da = g;
                for (dr, yr) in da.data.chunks_mut(cols).zip(y.data.chunks(cols)) {
                    let dot: T = dr.iter().zip(yr).map(|(&d, &p)| d * p).sum();
                    for (d, &p) in dr.iter_mut().zip(yr) {
                        *d = p * (*d - dot);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let cols = y.cols;
                let n = T::from_usize(cols).expect("cols");
                let mut dx = g;
                for ((dr, yr), &rs) in dx.data.chunks_mut(cols).zip(y.data.chunks(cols)).zip(rstd) {
                    let mean_g = dr.iter().copied().sum::<T>() / n;
                    let mean_gy = dr.iter().zip(yr).map(|(&d, &yy)| d * yy).sum::<T>() / n;
                    for (d, &yy) in dr.iter_mut().zip(yr) {
                        *d = rs * (*d - mean_g - yy * mean_gy);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let mut dx = Mat::zeros(src.rows, src.cols);
                let w = g.cols;
                for r in 0..src.rows {
                    dx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    if self.rg(p) {
                        let mut dp = Mat::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        accumulate(grads, p, dp);
                    }
                    off += cols;
                }
            }
            Op::GatherRows { table, idx } => {
                let src = self.value(*table);
                let mut dt = Mat::zeros(src.rows, src.cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (d, &gi) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += gi;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let n = T::from_usize(xv.data.len()).expect("len");
                let scale = T::lit(2.0) * g.data[0] / n;
                let dx = Mat::from_vec(
                    xv.rows,
                    xv.cols,
                    xv.data
                        .iter()
                        .zip(&target.data)
                        .map(|(&p, &t)| scale * (p - t))
                        .collect(),
                );
                accumulate(grads, *x, dx);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sums<T: Scalar>(g: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(1, g.cols);
    for row in g.data.chunks(g.cols) {
        for (o, &x) in out.data.iter_mut().zip(row) {
            *o += x;
        }
    }
    out
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<T>> {
        self.grads[v.0].take()
    }
}
