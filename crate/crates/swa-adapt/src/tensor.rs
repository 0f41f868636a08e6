//! Minimal dense numerical kernels: matrix multiply, masked row softmax,
//! RMS normalization, and rotary position embedding, generic over f32/f64.
//!
//! All operations are pure functions over immutable inputs and use a fixed
//! left-to-right summation order, so repeated calls are bit-identical.

use crate::error::{Error, Result};

/// Element type of a [`Tensor2D`]: `f32` for fast runs, `f64` for oracle tests.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn of_f64(x: f64) -> Self {
        num_traits::FromPrimitive::from_f64(x).expect("finite f64 converts to scalar")
    }
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn to_f64(self) -> f64 {
        self
    }
}

/// Storage precision tag, used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor2D<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "from_vec",
                detail: format!("{rows}x{cols} needs {} elements, got {}", rows * cols, data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn view(&self) -> MatView<'_, T> {
        MatView { rows: self.rows, cols: self.cols, data: &self.data }
    }

    /// Standard matrix product `self @ b`.
    ///
    /// Each output element is accumulated strictly in k = 0, 1, 2, ... order,
    /// matching the naive triple loop bit for bit.
    pub fn matmul(&self, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        if self.cols != b.rows {
            return Err(Error::Dimension {
                op: "matmul",
                detail: format!("{}x{} @ {}x{}", self.rows, self.cols, b.rows, b.cols),
            });
        }
        let mut out = Tensor2D::zeros(self.rows, b.cols);
        matmul_into(self.view(), b.view(), &mut out);
        Ok(out)
    }

    /// `self @ b^T`, with `b` given in row-major as `[p, n]`.
    pub fn matmul_nt(&self, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        if self.cols != b.cols {
            return Err(Error::Dimension {
                op: "matmul_nt",
                detail: format!("{}x{} @ ({}x{})^T", self.rows, self.cols, b.rows, b.cols),
            });
        }
        let mut out = Tensor2D::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a_row, b.row(j));
            }
        }
        Ok(out)
    }

    /// `self^T @ b`, with `self` given in row-major as `[n, m]`.
    pub fn matmul_tn(&self, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        if self.rows != b.rows {
            return Err(Error::Dimension {
                op: "matmul_tn",
                detail: format!("({}x{})^T @ {}x{}", self.rows, self.cols, b.rows, b.cols),
            });
        }
        let mut out = Tensor2D::zeros(self.cols, b.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let b_row = b.row(i);
            for (k, &a) in a_row.iter().enumerate() {
                axpy(a, b_row, out.row_mut(k));
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor2D<T> {
        Tensor2D::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn add_assign(&mut self, other: &Tensor2D<T>) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension {
                op: "add_assign",
                detail: format!(
                    "{}x{} += {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for a in self.data.iter_mut() {
            *a = *a * s;
        }
    }

    /// Largest absolute element-wise difference; matrices must be same shape.
    pub fn max_abs_diff(&self, other: &Tensor2D<T>) -> T {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Cast element type (f32 <-> f64) through f64.
    pub fn cast<U: Scalar>(&self) -> Tensor2D<U> {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of_f64(x.to_f64())).collect(),
        }
    }
}

/// Borrowed row-major view over a matrix-shaped slice (used for KV cache reads).
#[derive(Debug, Clone, Copy)]
pub struct MatView<'a, T> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [T],
}

impl<'a, T: Scalar> MatView<'a, T> {
    pub fn new(rows: usize, cols: usize, data: &'a [T]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "MatView::new",
                detail: format!("{rows}x{cols} view over {} elements", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &'a [T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_tensor(&self) -> Tensor2D<T> {
        Tensor2D { rows: self.rows, cols: self.cols, data: self.data.to_vec() }
    }
}

/// out[j] += a * x[j]
#[inline]
pub(crate) fn axpy<T: Scalar>(a: T, x: &[T], out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = *o + a * v;
    }
}

/// Dot product over eight fixed accumulator lanes (vectorizable while still
/// deterministic: the lane assignment and the final reduction order never
/// change between calls).
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut l0 = T::zero();
    let mut l1 = T::zero();
    let mut l2 = T::zero();
    let mut l3 = T::zero();
    let mut l4 = T::zero();
    let mut l5 = T::zero();
    let mut l6 = T::zero();
    let mut l7 = T::zero();
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        l0 = l0 + x[0] * y[0];
        l1 = l1 + x[1] * y[1];
        l2 = l2 + x[2] * y[2];
        l3 = l3 + x[3] * y[3];
        l4 = l4 + x[4] * y[4];
        l5 = l5 + x[5] * y[5];
        l6 = l6 + x[6] * y[6];
        l7 = l7 + x[7] * y[7];
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb.iter()) {
        tail = tail + x * y;
    }
    ((l0 + l4) + (l2 + l6)) + ((l1 + l5) + (l3 + l7)) + tail
}

pub(crate) fn matmul_into<T: Scalar>(a: MatView<'_, T>, b: MatView<'_, T>, out: &mut Tensor2D<T>) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!((out.rows, out.cols), (a.rows, b.cols));
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        out_row.fill(T::zero());
        for (k, &aik) in a_row.iter().enumerate() {
            axpy(aik, b.row(k), out_row);
        }
    }
}

/// Row softmax with masking by exclusion: disallowed entries are never
/// evaluated and come out exactly zero; allowed entries are stabilized by
/// max-subtraction over the allowed set only.
pub fn masked_row_softmax<T: Scalar>(
    scores: &Tensor2D<T>,
    allowed: impl Fn(usize, usize) -> bool,
) -> Result<Tensor2D<T>> {
    let mut out = Tensor2D::zeros(scores.rows(), scores.cols());
    for i in 0..scores.rows() {
        let row = scores.row(i);
        let mut max = T::neg_infinity();
        let mut any = false;
        for (j, &s) in row.iter().enumerate() {
            if allowed(i, j) {
                any = true;
                if s > max {
                    max = s;
                }
            }
        }
        if !any {
            return Err(Error::DegenerateRow { row: i });
        }
        let out_row = out.row_mut(i);
        let mut denom = T::zero();
        for (j, &s) in row.iter().enumerate() {
            if allowed(i, j) {
                let e = (s - max).exp();
                out_row[j] = e;
                denom = denom + e;
            }
        }
        for (j, o) in out_row.iter_mut().enumerate() {
            if allowed(i, j) {
                *o = *o / denom;
            }
        }
    }
    Ok(out)
}

/// Rotate one row's `(2t, 2t+1)` pairs by the rotary angles for `position`.
///
/// `freq_dim` sets the frequency spectrum (pass the full row width for plain
/// use, or the per-head width when the row is a concatenation of heads).
/// `inverse` rotates by the negated angle, which is the adjoint used in
/// backward passes.
pub(crate) fn rope_rotate_row<T: Scalar>(
    row: &mut [T],
    position: usize,
    theta_base: f64,
    freq_dim: usize,
    inverse: bool,
) {
    debug_assert_eq!(row.len() % freq_dim, 0);
    debug_assert_eq!(freq_dim % 2, 0);
    for seg in row.chunks_mut(freq_dim) {
        for t in 0..freq_dim / 2 {
            let exponent = (2 * t) as f64 / freq_dim as f64;
            let mut angle = position as f64 / theta_base.powf(exponent);
            if inverse {
                angle = -angle;
            }
            let (sin, cos) = (T::of_f64(angle.sin()), T::of_f64(angle.cos()));
            let (x0, x1) = (seg[2 * t], seg[2 * t + 1]);
            seg[2 * t] = x0 * cos - x1 * sin;
            seg[2 * t + 1] = x0 * sin + x1 * cos;
        }
    }
}

/// Rotary position embedding over absolute positions `start_position`,
/// `start_position + 1`, ... for consecutive rows. Each 2-component pair keeps
/// its Euclidean norm.
pub fn rope_apply<T: Scalar>(
    x: &Tensor2D<T>,
    start_position: usize,
    theta_base: f64,
) -> Result<Tensor2D<T>> {
    if x.cols() % 2 != 0 {
        return Err(Error::Dimension {
            op: "rope_apply",
            detail: format!("cols must be even, got {}", x.cols()),
        });
    }
    let mut out = x.clone();
    let cols = out.cols();
    for r in 0..out.rows() {
        rope_rotate_row(out.row_mut(r), start_position + r, theta_base, cols, false);
    }
    Ok(out)
}

/// RMS normalization: each row scaled by `1/sqrt(mean(x^2) + eps)`, then by
/// the per-column gain.
pub fn rms_norm<T: Scalar>(x: &Tensor2D<T>, gain: &[T], eps: T) -> Result<Tensor2D<T>> {
    if gain.len() != x.cols() {
        return Err(Error::Dimension {
            op: "rms_norm",
            detail: format!("gain length {} vs cols {}", gain.len(), x.cols()),
        });
    }
    let mut out = Tensor2D::zeros(x.rows(), x.cols());
    let n = T::of_f64(x.cols() as f64);
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = dot(row, row) / n;
        let inv = (ms + eps).sqrt().recip();
        let out_row = out.row_mut(r);
        for ((o, &v), &g) in out_row.iter_mut().zip(row.iter()).zip(gain.iter()) {
            *o = v * inv * g;
        }
    }
    Ok(out)
}
