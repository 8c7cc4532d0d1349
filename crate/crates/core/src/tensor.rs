//! Dense f64 tensors and a dynamic reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations append nodes in
//! execution order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.

use std::cell::Cell;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {got} were given")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("axis {axis} is invalid for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("{op}: expected a rank-{rank} tensor, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        rank: usize,
        shape: Vec<usize>,
    },
    #[error("slice {start}..{end} exceeds last-axis extent {extent}")]
    SliceOutOfRange {
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("width {width} is not divisible by {heads} heads")]
    HeadSplit { width: usize, heads: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("concat of zero tensors")]
    EmptyConcat,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major block of f64 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::BadLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: Vec<usize>) -> Result<Self> {
        Self::filled(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Strided f64 GEMM: `c = alpha * a·b + beta * c` for an `m×k` by `k×n` product.
///
/// Strides are in elements. `beta == 0` overwrites `c` without reading it.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(last(m, k, rsa, csa) <= a.len(), "gemm: lhs view out of bounds");
    assert!(last(k, n, rsb, csb) <= b.len(), "gemm: rhs view out of bounds");
    assert!(last(m, n, rsc, csc) <= c.len(), "gemm: output view out of bounds");
    // SAFETY: every view was bounds-checked above and strides fit in isize
    // because each view lies inside a live slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

thread_local! {
    static SCORE_LIVE: Cell<usize> = const { Cell::new(0) };
    static SCORE_PEAK: Cell<usize> = const { Cell::new(0) };
    static SCORE_LARGEST: Cell<usize> = const { Cell::new(0) };
}

/// Attention-score storage counters for the current thread.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScoreStats {
    /// Largest number of score entries alive at once.
    pub peak_live: usize,
    /// Largest single score buffer.
    pub largest_buffer: usize,
}

pub fn reset_score_stats() {
    SCORE_LIVE.with(|c| c.set(0));
    SCORE_PEAK.with(|c| c.set(0));
    SCORE_LARGEST.with(|c| c.set(0));
}

pub fn score_stats() -> ScoreStats {
    ScoreStats {
        peak_live: SCORE_PEAK.with(Cell::get),
        largest_buffer: SCORE_LARGEST.with(Cell::get),
    }
}

/// Score matrix whose lifetime is tracked by the thread-local counters.
struct ScoreBuffer(Vec<f64>);

impl ScoreBuffer {
    fn new(len: usize) -> Self {
        let live = SCORE_LIVE.with(|c| {
            let v = c.get() + len;
            c.set(v);
            v
        });
        SCORE_PEAK.with(|c| c.set(c.get().max(live)));
        SCORE_LARGEST.with(|c| c.set(c.get().max(len)));
        Self(vec![0.0; len])
    }
}

impl Drop for ScoreBuffer {
    fn drop(&mut self) {
        SCORE_LIVE.with(|c| c.set(c.get() - self.0.len()));
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

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// The computation record: nodes in execution order plus their backward rules.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.044_715;

fn gelu_parts(x: f64) -> (f64, f64) {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * x * x);
    (y, dy)
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|v| *v *= inv);
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient, if backward reached this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::BadRank {
                op,
                rank: 2,
                shape: self.shape(v).to_vec(),
            }),
        }
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let data = src.data.iter().map(|&v| f(v)).collect();
        let value = Tensor {
            shape: src.shape.clone(),
            data,
        };
        self.push(value, &[x], op)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        self.push(value, &[a, b], op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            0.0,
            &mut out,
            (n, 1),
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, &[a, b], Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.zip(a, b, Op::Div(a, b), |x, y| x / y))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + offset)
    }

    /// Adds a last-axis vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let (vx, vb) = (self.value(x), self.value(bias));
        let mut data = vx.data.clone();
        for row in data.chunks_exact_mut(d) {
            row.iter_mut().zip(&vb.data).for_each(|(r, b)| *r += b);
        }
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        Ok(self.push(value, &[x, bias], Op::AddBias(x, bias)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(total), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mean = v.data.iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(mean), &[x], Op::Mean(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { axis, shape });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = self.value(x).data.clone();
        let mut lane = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, l) in lane.iter_mut().enumerate() {
                    *l = data[base + j * inner];
                }
                softmax_in_place(&mut lane);
                for (j, l) in lane.iter().enumerate() {
                    data[base + j * inner] = *l;
                }
            }
        }
        let value = Tensor { shape, data };
        Ok(self.push(
            value,
            &[x],
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Normalizes over the last axis, then applies `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let vx = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor {
            shape: vx.shape.clone(),
            data: out,
        };
        Ok(self.push(
            value,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), |v| gelu_parts(v).0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid_scalar)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), f64::ln)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::EmptyConcat)?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last_axis",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            width += s[s.len() - 1];
        }
        let rows = self.value(first).rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let value = Tensor { shape, data };
        Ok(self.push(value, parts, Op::Concat(parts.to_vec())))
    }

    /// Takes `len` entries of the last axis starting at `start`.
    pub fn slice_last_axis(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if len == 0 || start + len > d {
            return Err(TensorError::SliceOutOfRange {
                start,
                end: start + len,
                extent: d,
            });
        }
        let mut data = Vec::with_capacity(vx.rows() * len);
        for r in 0..vx.rows() {
            data.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let mut shape = vx.shape.clone();
        *shape.last_mut().unwrap() = len;
        let value = Tensor { shape, data };
        Ok(self.push(value, &[x], Op::Slice { x, start }))
    }

    /// Swaps the two trailing axes, batched over any leading axes.
    pub fn transpose_last_two(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let rank = vx.shape.len();
        if rank < 2 {
            return Err(TensorError::BadRank {
                op: "transpose_last_two",
                rank: 2,
                shape: vx.shape.clone(),
            });
        }
        let (m, n) = (vx.shape[rank - 2], vx.shape[rank - 1]);
        let data = transpose_batched(&vx.data, m, n);
        let mut shape = vx.shape.clone();
        shape.swap(rank - 2, rank - 1);
        let value = Tensor { shape, data };
        Ok(self.push(value, &[x], Op::Transpose(x)))
    }

    /// Multi-head scaled dot-product attention `softmax(QKᵀ/√d_h)·V`.
    ///
    /// Heads are column blocks of width `D / heads`. Score matrices are built
    /// one head at a time and recomputed in backward, so at most one
    /// `q × n` block is alive during the forward pass.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (nq, d) = self.matrix_dims("attention", q)?;
        let (nk, dk) = self.matrix_dims("attention", k)?;
        if dk != d {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: vec![nq, d],
                rhs: vec![nk, dk],
            });
        }
        self.same_shape("attention", k, v)?;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::HeadSplit { width: d, heads });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; nq * d];
        let mut scores = ScoreBuffer::new(nq * nk);
        for h in 0..heads {
            let off = h * dh;
            gemm(
                nq,
                dh,
                nk,
                scale,
                &qd[off..],
                (d, 1),
                &kd[off..],
                (1, d),
                0.0,
                &mut scores.0,
                (nk, 1),
            );
            scores.0.chunks_exact_mut(nk).for_each(softmax_in_place);
            gemm(
                nq,
                nk,
                dh,
                1.0,
                &scores.0,
                (nk, 1),
                &vd[off..],
                (d, 1),
                0.0,
                &mut out[off..],
                (d, 1),
            );
        }
        drop(scores);
        let value = Tensor::new(vec![nq, d], out)?;
        Ok(self.push(value, &[q, k, v], Op::Attention { q, k, v, heads }))
    }

    /// Reverse sweep from a scalar root; gradients accumulate into every
    /// node that requires them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes[root.0].grad, vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (var, delta) in contributions {
                if self.nodes[var.0].requires_grad {
                    accumulate(&mut self.nodes[var.0].grad, delta);
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g, (n, 1), val(b), (1, n), 0.0, &mut da, (k, 1));
                    out.push((a, da));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, val(a), (1, k), g, (n, 1), 0.0, &mut db, (n, 1));
                    out.push((b, db));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Sub(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.iter().map(|v| -v).collect()));
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    out.push((a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect()));
                }
                if self.wants(b) {
                    out.push((b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect()));
                }
            }
            &Op::Div(a, b) => {
                let (va, vb) = (val(a), val(b));
                if self.wants(a) {
                    out.push((a, g.iter().zip(vb).map(|(g, y)| g / y).collect()));
                }
                if self.wants(b) {
                    let db = g
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    out.push((b, db));
                }
            }
            &Op::Scale(x, f) => out.push((x, g.iter().map(|v| v * f).collect())),
            &Op::AddScalar(x) => out.push((x, g.to_vec())),
            &Op::AddBias(x, b) => {
                out.push((x, g.to_vec()));
                if self.wants(b) {
                    let d = self.shape(b)[0];
                    let mut db = vec![0.0; d];
                    for row in g.chunks_exact(d) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    out.push((b, db));
                }
            }
            &Op::Sum(x) => out.push((x, vec![g[0]; self.value(x).len()])),
            &Op::Mean(x) => {
                let n = self.value(x).len();
                out.push((x, vec![g[0] / n as f64; n]));
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|j| g[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                out.push((x, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let gam = val(*gamma);
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    out.push((*gamma, dg));
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks_exact(d) {
                        db.iter_mut().zip(gr).for_each(|(a, r)| *a += r);
                    }
                    out.push((*beta, db));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, inv) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            dx[r * d + j] = inv * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            &Op::Gelu(x) => {
                let dx = g
                    .iter()
                    .zip(val(x))
                    .map(|(g, &v)| g * gelu_parts(v).1)
                    .collect();
                out.push((x, dx));
            }
            &Op::Sigmoid(x) => {
                out.push((x, g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()));
            }
            &Op::Log(x) => {
                out.push((x, g.iter().zip(val(x)).map(|(g, v)| g / v).collect()));
            }
            &Op::Clamp { x, lo, hi } => {
                let dx = g
                    .iter()
                    .zip(val(x))
                    .map(|(&g, &v)| if (lo..=hi).contains(&v) { g } else { 0.0 })
                    .collect();
                out.push((x, dx));
            }
            Op::Concat(parts) => {
                let width = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * width + offset..r * width + offset + w]);
                        }
                        out.push((p, dp));
                    }
                    offset += w;
                }
            }
            &Op::Slice { x, start } => {
                let d = self.value(x).last_dim();
                let len = node.value.last_dim();
                let mut dx = vec![0.0; self.value(x).len()];
                for (r, gr) in g.chunks_exact(len).enumerate() {
                    dx[r * d + start..r * d + start + len].copy_from_slice(gr);
                }
                out.push((x, dx));
            }
            &Op::Transpose(x) => {
                let s = node.value.shape();
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                out.push((x, transpose_batched(g, m, n)));
            }
            &Op::Attention { q, k, v, heads } => {
                out.extend(self.attention_backward(q, k, v, heads, g));
            }
        }
        out
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        g: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let (nq, d) = (self.shape(q)[0], self.shape(q)[1]);
        let nk = self.shape(k)[0];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; nk * d];
        let mut dv = vec![0.0; nk * d];
        // one score matrix plus one row: P is overwritten by dS in place
        let mut probs = ScoreBuffer::new(nq * nk);
        let mut drow = ScoreBuffer::new(nk);
        for h in 0..heads {
            let off = h * dh;
            gemm(nq, dh, nk, scale, &qd[off..], (d, 1), &kd[off..], (1, d), 0.0, &mut probs.0, (nk, 1));
            probs.0.chunks_exact_mut(nk).for_each(softmax_in_place);
            // dV_h = Pᵀ · dO_h
            gemm(nk, nq, dh, 1.0, &probs.0, (1, nk), &g[off..], (d, 1), 0.0, &mut dv[off..], (d, 1));
            for (i, pr) in probs.0.chunks_exact_mut(nk).enumerate() {
                // dP_i = dO_i · V_hᵀ
                gemm(1, dh, nk, 1.0, &g[i * d + off..], (d, 1), &vd[off..], (1, d), 0.0, &mut drow.0, (nk, 1));
                let dot: f64 = pr.iter().zip(&drow.0).map(|(p, d)| p * d).sum();
                pr.iter_mut().zip(&drow.0).for_each(|(p, d)| *p *= d - dot);
            }
            gemm(nq, nk, dh, scale, &probs.0, (nk, 1), &kd[off..], (d, 1), 0.0, &mut dq[off..], (d, 1));
            gemm(nk, nq, dh, scale, &probs.0, (1, nk), &qd[off..], (d, 1), 0.0, &mut dk[off..], (d, 1));
        }
        let mut out = Vec::with_capacity(3);
        if self.wants(q) {
            out.push((q, dq));
        }
        if self.wants(k) {
            out.push((k, dk));
        }
        if self.wants(v) {
            out.push((v, dv));
        }
        out
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

fn transpose_batched(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks_exact(m * n).zip(out.chunks_exact_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.leaf(Tensor::from_rows(rows).unwrap(), true)
    }

    #[test]
    fn tensor_rejects_bad_length_and_zero_extent() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::BadLength { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![2, 0], vec![]),
            Err(TensorError::ZeroExtent(_))
        ));
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut t = Tape::new();
        let a = mat(&mut t, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = mat(&mut t, &[vec![3.0, 4.0], vec![5.0, 6.0]]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let x = mat(&mut t, &[vec![2.0]]);
        let y = mat(&mut t, &[vec![3.0]]);
        let z = t.matmul(x, y).unwrap();
        assert_eq!(t.value(z).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let b = t.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_basic_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let s = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
        assert!(matches!(
            t.softmax(x, 1),
            Err(TensorError::InvalidAxis { .. })
        ));
    }

    #[test]
    fn layer_norm_constant_and_pair() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::ones(vec![3]).unwrap());
        let b = t.constant(Tensor::zeros(vec![3]).unwrap());
        let x = t.constant(Tensor::filled(vec![1, 3], 5.0).unwrap());
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|v| *v == 0.0));

        let g = t.constant(Tensor::ones(vec![2]).unwrap());
        let b = t.constant(Tensor::zeros(vec![2]).unwrap());
        let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        let want = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((t.value(y).data()[0] - want).abs() < 1e-15);
        assert!((t.value(y).data()[1] + want).abs() < 1e-15);
        assert!((want - 0.999995).abs() < 1e-6);
    }

    #[test]
    fn gelu_and_sigmoid_reference_points() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3], vec![0.0, 10.0, -500.0]).unwrap());
        let g = t.gelu(x);
        assert_eq!(t.value(g).data()[0], 0.0);
        assert!((t.value(g).data()[1] - 10.0).abs() < 1e-6);

        let s = t.sigmoid(x);
        assert_eq!(t.value(s).data()[0], 0.5);
        let tail = t.value(s).data()[2];
        assert!(tail.is_finite() && tail >= 0.0 && tail < 1.0);
    }

    #[test]
    fn backward_product_rule() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0), true);
        let y = t.leaf(Tensor::scalar(4.0), true);
        let z = t.mul(x, y).unwrap();
        t.backward(z).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0]);
        assert_eq!(t.grad(y).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_sum_gives_ones_and_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::filled(vec![2, 3], 1.0).unwrap(), true);
        assert!(matches!(
            t.backward(x),
            Err(TensorError::NonScalarRoot(_))
        ));
        let s = t.sum(x);
        assert_eq!(t.value(s).data(), &[6.0]);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0), true);
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        t.backward(z).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[5.0]);
    }

    #[test]
    fn attention_with_single_key_returns_value_row() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::new(vec![2, 4], vec![0.3, -1.0, 2.0, 0.1, 1.0, 1.0, 1.0, 1.0]).unwrap());
        let k = t.constant(Tensor::new(vec![1, 4], vec![0.5, 0.2, -0.7, 1.1]).unwrap());
        let v = t.constant(Tensor::new(vec![1, 4], vec![9.0, -2.0, 0.25, 4.0]).unwrap());
        let o = t.attention(q, k, v, 2).unwrap();
        for r in 0..2 {
            assert_eq!(t.value(o).row(r), &[9.0, -2.0, 0.25, 4.0]);
        }
    }

    #[test]
    fn attention_rejects_bad_head_split() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::zeros(vec![2, 6]).unwrap());
        assert!(matches!(
            t.attention(q, q, q, 4),
            Err(TensorError::HeadSplit { .. })
        ));
    }

    #[test]
    fn score_buffer_tracks_peak() {
        reset_score_stats();
        let mut t = Tape::new();
        let q = t.constant(Tensor::zeros(vec![3, 4]).unwrap());
        let k = t.constant(Tensor::zeros(vec![5, 4]).unwrap());
        t.attention(q, k, k, 2).unwrap();
        let stats = score_stats();
        assert_eq!(stats.peak_live, 15);
        assert_eq!(stats.largest_buffer, 15);
    }
}
