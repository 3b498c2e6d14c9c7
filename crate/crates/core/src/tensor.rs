//! Dense row-major tensors and a reverse-mode differentiation tape.
//!
//! Values are recorded on a [`Tape`] as they are computed; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients into leaf nodes.
//! The engine is generic over the scalar type so the same model code can be
//! evaluated in `f64` for finite-difference checks; training runs in `f32`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} is empty")]
    EmptyAxis { op: &'static str, axis: usize },
    #[error("{op}: row {row} has zero norm")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("batch_norm_1d needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Scalar types the engine can run on.
pub trait Real:
    Float + Default + Debug + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    /// `c = op(a) · op(b) + beta · c`, row-major `c` of shape `m × n`.
    /// Strides are in elements and describe `op(a)` (m × k) and `op(b)` (k × n).
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

    fn lit(x: f64) -> Self;
}

impl Real for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
    ) {
        if m == 0 || n == 0 {
            return;
        }
        debug_assert!(c.len() >= m * n);
        // SAFETY: the strides describe in-bounds views of `a`, `b` and `c`,
        // which callers derive from tensor shapes checked before the call.
        unsafe {
            matrixmultiply::sgemm(
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

    fn lit(x: f64) -> f32 {
        x as f32
    }
}

impl Real for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
    ) {
        if m == 0 || n == 0 {
            return;
        }
        debug_assert!(c.len() >= m * n);
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
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

    fn lit(x: f64) -> f64 {
        x
    }
}

/// A dense, row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::LengthMismatch {
                op: "tensor",
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// (rows, cols) when the tensor is viewed as a matrix over its last axis.
    pub fn as_matrix(&self) -> (usize, usize) {
        match self.shape.last() {
            None => (1, 1),
            Some(&0) => (0, 0),
            Some(&c) => (self.data.len() / c, c),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::lit(x.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    /// Row `i` of the matrix view.
    pub fn row(&self, i: usize) -> &[T] {
        let (_, c) = self.as_matrix();
        &self.data[i * c..(i + 1) * c]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear map from rows of a matrix: `out[i] = Σ w · in[src]`.
pub type Taps<T> = Vec<Vec<(usize, T)>>;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Affine { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Sqrt(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    L2Normalize { x: Var, norms: Vec<T> },
    Reshape(Var),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumLast(Var),
    WeightedGather { x: Var, taps: Taps<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Ordered record of primitive applications.
///
/// Nodes are only ever appended, so node order is a topological order and
/// backward is a single reverse sweep. Leaf gradients persist across
/// `backward` calls until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
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

    /// Scalar value of a single-element tensor.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Same values, cut from the graph: nothing flows back through the result.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    // ---- elementwise binary ------------------------------------------------

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        node: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_broadcast(sa, sb) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let av = self.value(a);
        let bd = self.value(b).data();
        let period = bd.len();
        let data = if period == 0 {
            Vec::new()
        } else {
            av.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % period]))
                .collect()
        };
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, node, rg))
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |x, y| if y < x { y } else { x }, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, |x, y| if y > x { y } else { x }, Op::Maximum(a, b))
    }

    // ---- elementwise unary -------------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, node: Op<T>) -> Var {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(x);
        self.push(value, node, rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `op(a) · op(b)` for 2-D operands; `ta`/`tb` select transposition.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (ar, ac) = (sa[0], sa[1]);
        let (br, bc) = (sb[0], sb[1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            rsa,
            csa,
            self.value(b).data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(value, Op::Matmul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    /// `x · w + b` with `x` viewed as rows over its last axis, `w` of shape
    /// `in × out` and optional bias of length `out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (m, k) = self.value(x).as_matrix();
        if ws.len() != 2 || ws[0] != k || xs.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                lhs: xs,
                rhs: ws,
            });
        }
        let n = ws[1];
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "affine.bias",
                    lhs: ws,
                    rhs: bs.to_vec(),
                });
            }
        }
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(n.max(1)) {
                row.copy_from_slice(bd);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            m,
            k,
            n,
            self.value(x).data(),
            k as isize,
            1,
            self.value(w).data(),
            n as isize,
            1,
            beta,
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor { shape, data: out }, Op::Affine { x, w, b }, rg))
    }

    // ---- normalization & reductions ---------------------------------------

    /// Softmax along `axis`, with the axis maximum subtracted first.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax", axis });
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(src[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / s;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax { x, axis }, rg))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.as_matrix();
        if cols == 0 || xv.rank() == 0 {
            return Err(TensorError::EmptyAxis {
                op: "log_softmax",
                axis: xv.rank().saturating_sub(1),
            });
        }
        let mut out = vec![T::zero(); rows * cols];
        for (r, dst) in out.chunks_exact_mut(cols).enumerate() {
            let row = xv.row(r);
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v - lse;
            }
        }
        let shape = xv.shape.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::LogSoftmax(x), rg))
    }

    /// Layer normalization over the last axis, epsilon 1e-5.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = xv.as_matrix();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xv.shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::lit(1e-5);
        let dt = T::lit(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (h, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + b[i % d])
            .collect();
        let shape = xv.shape.clone();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Batch normalization over rows of a `B × D` matrix using the current
    /// batch statistics (population variance), epsilon 1e-5.
    pub fn batch_norm_1d(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "batch_norm_1d",
                msg: format!("expected a 2-D input, got {:?}", xv.shape),
            });
        }
        let (bsz, d) = (xv.shape[0], xv.shape[1]);
        if bsz < 2 {
            return Err(TensorError::BatchTooSmall(bsz));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm_1d",
                    lhs: xv.shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::lit(1e-5);
        let bt = T::lit(bsz as f64);
        let src = xv.data();
        let mut xhat = vec![T::zero(); bsz * d];
        let mut rstd = vec![T::zero(); d];
        for c in 0..d {
            let mean = (0..bsz).map(|r| src[r * d + c]).sum::<T>() / bt;
            let var = (0..bsz)
                .map(|r| (src[r * d + c] - mean) * (src[r * d + c] - mean))
                .sum::<T>()
                / bt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[c] = rs;
            for r in 0..bsz {
                xhat[r * d + c] = (src[r * d + c] - mean) * rs;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + b[i % d])
            .collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor {
                shape: vec![bsz, d],
                data: out,
            },
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = xv.as_matrix();
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(n > T::lit(1e-12)) {
                return Err(TensorError::ZeroNorm {
                    op: "l2_normalize",
                    row: r,
                });
            }
            norms.push(n);
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / n;
            }
        }
        let shape = xv.shape.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::L2Normalize { x, norms }, rg))
    }

    /// Cosine similarity between matching rows of `a` and `b`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.l2_normalize(a)?;
        let nb = self.l2_normalize(b)?;
        let prod = self.mul(na, nb)?;
        self.sum_last(prod)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::lit(v.numel().max(1) as f64);
        let s = v.data.iter().copied().sum::<T>() / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean over the first axis: `[R, ...] -> [...]`. Used for spatial pooling
    /// of flattened `HW × C` maps.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 || xv.shape[0] == 0 {
            return Err(TensorError::EmptyAxis {
                op: "mean_rows",
                axis: 0,
            });
        }
        let r = xv.shape[0];
        let inner = xv.numel() / r;
        let mut out = vec![T::zero(); inner];
        for row in xv.data.chunks_exact(inner.max(1)) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let rt = T::lit(r as f64);
        out.iter_mut().for_each(|o| *o = *o / rt);
        let shape = xv.shape[1..].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::MeanRows(x), rg))
    }

    /// Sum over the last axis: `[..., D] -> [...]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(TensorError::InvalidAxis {
                op: "sum_last",
                axis: 0,
                shape: vec![],
            });
        }
        let (rows, d) = xv.as_matrix();
        let out = (0..rows).map(|r| xv.row(r).iter().copied().sum()).collect();
        let shape = xv.shape[..xv.rank() - 1].to_vec();
        let rg = self.rg(x);
        let _ = d;
        Ok(self.push(Tensor { shape, data: out }, Op::SumLast(x), rg))
    }

    // ---- shape manipulation -----------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected a 2-D input, got {:?}", xv.shape),
            });
        }
        let (r, c) = (xv.shape[0], xv.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv.data[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data: out,
            },
            Op::Transpose(x),
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidAxis {
                op: "slice",
                axis,
                shape,
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let at = o * full * inner + start * inner;
            out.extend_from_slice(&src[at..at + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: oshape,
                data: out,
            },
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    /// Rows of the first axis, in the order given by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(TensorError::InvalidAxis {
                op: "gather_rows",
                axis: 0,
                shape: vec![],
            });
        }
        let r = xv.shape[0];
        let inner = if r == 0 { 0 } else { xv.numel() / r };
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            if i >= r {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("row {i} out of range for {r} rows"),
                });
            }
            out.extend_from_slice(&xv.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = xv.shape.clone();
        shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// `out[i] = Σ_(src, w) w · x[src]` over rows of the 2-D view of `x`
    /// (leading axes flattened). The output has `taps.len()` rows.
    pub fn weighted_gather(&mut self, x: Var, taps: Taps<T>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = xv.as_matrix();
        let mut out = vec![T::zero(); taps.len() * c];
        for (dst, row_taps) in out.chunks_exact_mut(c.max(1)).zip(&taps) {
            for &(src, w) in row_taps {
                if src >= rows {
                    return Err(TensorError::Invalid {
                        op: "weighted_gather",
                        msg: format!("source row {src} out of range for {rows} rows"),
                    });
                }
                for (d, &v) in dst.iter_mut().zip(xv.row(src)) {
                    *d += w * v;
                }
            }
        }
        let shape = vec![taps.len(), c];
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::WeightedGather { x, taps }, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf
    /// reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape.clone()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let y = &nodes[i].value.data;

        fn buf<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], v: Var, n: usize) -> &'a mut [T] {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
        }

        // rhs of a suffix-broadcast binary op: fold gradient over repeats
        let fold_rhs = |grads: &mut [Option<Vec<T>>], b: Var, f: &dyn Fn(usize) -> T| {
            let n = val(b).numel();
            if n == 0 {
                return;
            }
            let gb = buf(grads, b, n);
            for k in 0..g.len() {
                gb[k % n] += f(k);
            }
        };

        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                if needs(*a) {
                    buf(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if needs(*b) {
                    fold_rhs(grads, *b, &|k| g[k]);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    buf(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if needs(*b) {
                    fold_rhs(grads, *b, &|k| -g[k]);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (&val(*a).data, &val(*b).data);
                let p = bd.len();
                if needs(*a) {
                    let ga = buf(grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * bd[k % p];
                    }
                }
                if needs(*b) {
                    fold_rhs(grads, *b, &|k| g[k] * ad[k]);
                }
            }
            Op::Div(a, b) => {
                let (ad, bd) = (&val(*a).data, &val(*b).data);
                let p = bd.len();
                if needs(*a) {
                    let ga = buf(grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] / bd[k % p];
                    }
                }
                if needs(*b) {
                    fold_rhs(grads, *b, &|k| {
                        let d = bd[k % p];
                        -g[k] * ad[k] / (d * d)
                    });
                }
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let (ad, bd) = (&val(*a).data, &val(*b).data);
                let p = bd.len();
                let is_min = matches!(nodes[i].op, Op::Minimum(..));
                // ties route to the lhs
                let pick_b = |k: usize| {
                    if is_min {
                        bd[k % p] < ad[k]
                    } else {
                        bd[k % p] > ad[k]
                    }
                };
                if needs(*a) {
                    let ga = buf(grads, *a, g.len());
                    for k in 0..g.len() {
                        if !pick_b(k) {
                            ga[k] += g[k];
                        }
                    }
                }
                if needs(*b) {
                    fold_rhs(grads, *b, &|k| if pick_b(k) { g[k] } else { T::zero() });
                }
            }
            Op::Scale(x, c) => {
                buf(grads, *x, g.len()).iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c);
            }
            Op::Offset(x) | Op::Reshape(x) => {
                buf(grads, *x, g.len()).iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            Op::Relu(x) => {
                let xd = &val(*x).data;
                let gx = buf(grads, *x, g.len());
                for k in 0..g.len() {
                    if xd[k] > T::zero() {
                        gx[k] += g[k];
                    }
                }
            }
            Op::Sigmoid(x) => {
                let gx = buf(grads, *x, g.len());
                for k in 0..g.len() {
                    gx[k] += g[k] * y[k] * (T::one() - y[k]);
                }
            }
            Op::Softplus(x) => {
                let xd = &val(*x).data;
                let gx = buf(grads, *x, g.len());
                for k in 0..g.len() {
                    gx[k] += g[k] * sigmoid(xd[k]);
                }
            }
            Op::Log(x) => {
                let xd = &val(*x).data;
                let gx = buf(grads, *x, g.len());
                for k in 0..g.len() {
                    gx[k] += g[k] / xd[k];
                }
            }
            Op::Exp(x) => {
                let gx = buf(grads, *x, g.len());
                for k in 0..g.len() {
                    gx[k] += g[k] * y[k];
                }
            }
            Op::Abs(x) => {
                let xd = &val(*x).data;
                let gx = buf(grads, *x, g.len());
                for k in 0..g.len() {
                    if xd[k] > T::zero() {
                        gx[k] += g[k];
                    } else if xd[k] < T::zero() {
                        gx[k] -= g[k];
                    }
                }
            }
            Op::Sqrt(x) => {
                let gx = buf(grads, *x, g.len());
                for k in 0..g.len() {
                    gx[k] += g[k] * T::lit(0.5) / y[k];
                }
            }
            Op::Matmul { a, b, ta, tb } => {
                let (sa, sb) = (&val(*a).shape, &val(*b).shape);
                let (ar, ac) = (sa[0], sa[1]);
                let (br, bc) = (sb[0], sb[1]);
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = if *tb { br } else { bc };
                let (ad, bd) = (&val(*a).data, &val(*b).data);
                let gi = g as &[T];
                if needs(*a) {
                    let ga = buf(grads, *a, ar * ac);
                    // gradient w.r.t. the stored A (ar × ac)
                    // C = op(A)op(B): dop(A) = dC · op(B)ᵀ
                    let (rsb, csb) = if *tb { (bc as isize, 1) } else { (1, bc as isize) };
                    if *ta {
                        // dA = (dC · op(B)ᵀ)ᵀ = op(B) · dCᵀ, shape k × m
                        let (rsb2, csb2) = if *tb { (1, bc as isize) } else { (bc as isize, 1) };
                        T::gemm(ar, n, ac, bd, rsb2, csb2, gi, 1, n as isize, T::one(), ga);
                    } else {
                        T::gemm(m, n, k, gi, n as isize, 1, bd, rsb, csb, T::one(), ga);
                    }
                }
                if needs(*b) {
                    let gb = buf(grads, *b, br * bc);
                    // dop(B) = op(A)ᵀ · dC, shape k × n
                    let (rsa, csa) = if *ta { (ac as isize, 1) } else { (1, ac as isize) };
                    if *tb {
                        // dB = dCᵀ · op(A), shape n × k
                        let (rsa2, csa2) = if *ta { (1, ac as isize) } else { (ac as isize, 1) };
                        T::gemm(br, m, bc, gi, 1, n as isize, ad, rsa2, csa2, T::one(), gb);
                    } else {
                        T::gemm(k, m, n, ad, rsa, csa, gi, n as isize, 1, T::one(), gb);
                    }
                }
            }
            Op::Affine { x, w, b } => {
                let (m, k) = val(*x).as_matrix();
                let n = val(*w).shape[1];
                if needs(*x) {
                    let gx = buf(grads, *x, m * k);
                    let wd = &val(*w).data;
                    // dx = dy · wᵀ
                    T::gemm(m, n, k, g, n as isize, 1, wd, 1, n as isize, T::one(), gx);
                }
                if needs(*w) {
                    let xd = &val(*x).data;
                    let gw = buf(grads, *w, k * n);
                    // dw = xᵀ · dy
                    T::gemm(k, m, n, xd, 1, k as isize, g, n as isize, 1, T::one(), gw);
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let gb = buf(grads, *b, n);
                        for row in g.chunks_exact(n.max(1)) {
                            gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(&nodes[i].value.shape, *axis);
                let gx = buf(grads, *x, g.len());
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let (rows, cols) = nodes[i].value.as_matrix();
                let gx = buf(grads, *x, g.len());
                for r in 0..rows {
                    let s: T = g[r * cols..(r + 1) * cols].iter().copied().sum();
                    for c in 0..cols {
                        let k = r * cols + c;
                        gx[k] += g[k] - y[k].exp() * s;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, d) = nodes[i].value.as_matrix();
                let gam = &val(*gamma).data;
                if needs(*gamma) {
                    let gg = buf(grads, *gamma, d);
                    for k in 0..g.len() {
                        gg[k % d] += g[k] * xhat[k];
                    }
                }
                if needs(*beta) {
                    let gb = buf(grads, *beta, d);
                    for k in 0..g.len() {
                        gb[k % d] += g[k];
                    }
                }
                if needs(*x) {
                    let gx = buf(grads, *x, g.len());
                    let dt = T::lit(d as f64);
                    for r in 0..rows {
                        let base = r * d;
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..d {
                            let gh = g[base + c] * gam[c];
                            s1 += gh;
                            s2 += gh * xhat[base + c];
                        }
                        for c in 0..d {
                            let gh = g[base + c] * gam[c];
                            gx[base + c] +=
                                rstd[r] / dt * (dt * gh - s1 - xhat[base + c] * s2);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let shape = &nodes[i].value.shape;
                let (bsz, d) = (shape[0], shape[1]);
                let gam = &val(*gamma).data;
                if needs(*gamma) {
                    let gg = buf(grads, *gamma, d);
                    for k in 0..g.len() {
                        gg[k % d] += g[k] * xhat[k];
                    }
                }
                if needs(*beta) {
                    let gb = buf(grads, *beta, d);
                    for k in 0..g.len() {
                        gb[k % d] += g[k];
                    }
                }
                if needs(*x) {
                    let gx = buf(grads, *x, g.len());
                    let bt = T::lit(bsz as f64);
                    for c in 0..d {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for r in 0..bsz {
                            let gh = g[r * d + c] * gam[c];
                            s1 += gh;
                            s2 += gh * xhat[r * d + c];
                        }
                        for r in 0..bsz {
                            let k = r * d + c;
                            let gh = g[k] * gam[c];
                            gx[k] += rstd[c] / bt * (bt * gh - s1 - xhat[k] * s2);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let (rows, d) = nodes[i].value.as_matrix();
                let gx = buf(grads, *x, g.len());
                for r in 0..rows {
                    let base = r * d;
                    let dot: T = (0..d).map(|c| g[base + c] * y[base + c]).sum();
                    for c in 0..d {
                        gx[base + c] += (g[base + c] - y[base + c] * dot) / norms[r];
                    }
                }
            }
            Op::Transpose(x) => {
                let s = &val(*x).shape;
                let (r, c) = (s[0], s[1]);
                let gx = buf(grads, *x, r * c);
                for ii in 0..r {
                    for j in 0..c {
                        gx[ii * c + j] += g[j * r + ii];
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(&nodes[i].value.shape, *axis);
                let mut off = 0;
                let row = g.len() / outer.max(1);
                for &p in parts {
                    let len = val(p).shape[*axis] * inner;
                    if needs(p) {
                        let gp = buf(grads, p, outer * len);
                        for o in 0..outer {
                            let src = &g[o * row + off..o * row + off + len];
                            gp[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &s)| *d += s);
                        }
                    }
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = &val(*x).shape;
                let (outer, full, inner) = split_axis(xs, *axis);
                let len = nodes[i].value.shape[*axis];
                let gx = buf(grads, *x, outer * full * inner);
                for o in 0..outer {
                    let at = o * full * inner + start * inner;
                    gx[at..at + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                        .for_each(|(d, &s)| *d += s);
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = val(*x);
                let inner = xv.numel() / xv.shape[0].max(1);
                let gx = buf(grads, *x, xv.numel());
                for (k, &src) in idx.iter().enumerate() {
                    gx[src * inner..(src + 1) * inner]
                        .iter_mut()
                        .zip(&g[k * inner..(k + 1) * inner])
                        .for_each(|(d, &s)| *d += s);
                }
            }
            Op::Sum(x) => {
                let n = val(*x).numel();
                buf(grads, *x, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                let s = g[0] / T::lit(n.max(1) as f64);
                buf(grads, *x, n).iter_mut().for_each(|d| *d += s);
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let r = xv.shape[0];
                let inner = g.len();
                let rt = T::lit(r as f64);
                let gx = buf(grads, *x, xv.numel());
                for row in gx.chunks_exact_mut(inner.max(1)) {
                    row.iter_mut().zip(g).for_each(|(d, &s)| *d += s / rt);
                }
            }
            Op::SumLast(x) => {
                let xv = val(*x);
                let (_, d) = xv.as_matrix();
                let gx = buf(grads, *x, xv.numel());
                for (k, gv) in gx.iter_mut().enumerate() {
                    *gv += g[k / d.max(1)];
                }
            }
            Op::WeightedGather { x, taps } => {
                let xv = val(*x);
                let (_, c) = xv.as_matrix();
                let gx = buf(grads, *x, xv.numel());
                for (k, row_taps) in taps.iter().enumerate() {
                    let src_g = &g[k * c..(k + 1) * c];
                    for &(src, w) in row_taps {
                        gx[src * c..(src + 1) * c]
                            .iter_mut()
                            .zip(src_g)
                            .for_each(|(d, &s)| *d += w * s);
                    }
                }
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
