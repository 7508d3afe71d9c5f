//! Dense f64 tensors and the attention/normalization primitives the rest of
//! the crate builds on.
//!
//! Everything here is a pure function of immutable inputs. Tensors are
//! row-major, shapes are checked on every public entry point, and the only
//! implicit broadcast anywhere is the affine pair in [`layer_norm`].

use crate::error::{Error, Result};

/// Additive mask value standing in for negative infinity.
///
/// Large enough that a masked position receives post-softmax weight below
/// 1e-12 at any logit magnitude this crate produces, small enough that the
/// max-subtraction stabilization never overflows.
pub const MASK_SENTINEL: f64 = -1e9;

/// A mask entry at or below this threshold counts as "masked out" when
/// checking for fully masked attention rows.
const MASKED_THRESHOLD: f64 = MASK_SENTINEL * 0.5;

/// Dense multi-dimensional array of 64-bit floats in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` extents are positive and
    /// consistent with `data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("shape implies {expected} elements, data has {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// 2-D tensor from nested rows. Panics on ragged input; intended for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self {
            shape: vec![r, c],
            data: rows.iter().flatten().copied().collect(),
        }
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of the last axis (the "row width" for softmax/layer_norm).
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("cannot reshape {} elements", self.data.len()),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.last_dim();
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Element at a fully specified index.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0usize;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bounds at axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Largest absolute difference between two same-shaped tensors.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "transpose requires rank 2".into(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

/// Matrix product of `a` (M×K) and `b` (K×N).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    // i-k-j order keeps the inner loop streaming over contiguous rows.
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Softmax over the last axis with an optional additive mask of the same
/// shape. Mask entries are expected to be either `0` or [`MASK_SENTINEL`].
///
/// Rows are stabilized by max-subtraction. A row whose mask entries are all
/// at the sentinel is rejected with [`Error::FullyMaskedRow`].
pub fn softmax(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    if let Some(m) = mask {
        if m.shape != x.shape {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: x.shape.clone(),
                rhs: m.shape.clone(),
            });
        }
    }
    let n = x.last_dim();
    let rows = x.numel() / n;
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let span = r * n..(r + 1) * n;
        if let Some(m) = mask {
            if m.data[span.clone()].iter().all(|&v| v <= MASKED_THRESHOLD) {
                return Err(Error::FullyMaskedRow { row: r });
            }
        }
        let logits: Vec<f64> = match mask {
            Some(m) => x.data[span.clone()]
                .iter()
                .zip(&m.data[span.clone()])
                .map(|(&v, &mv)| v + mv)
                .collect(),
            None => x.data[span.clone()].to_vec(),
        };
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let dst = &mut out[span];
        for (d, &l) in dst.iter_mut().zip(&logits) {
            let e = (l - max).exp();
            *d = e;
            sum += e;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Layer normalization over the last axis with affine parameters.
///
/// Variance is the population variance over the row; `gamma` and `beta`
/// broadcast over every leading axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm gamma",
            lhs: x.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    if beta.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm beta",
            lhs: x.shape.clone(),
            rhs: beta.shape.clone(),
        });
    }
    if eps <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let rows = x.numel() / d;
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let dst = &mut out[r * d..(r + 1) * d];
        for ((o, &v), (&g, &b)) in dst
            .iter_mut()
            .zip(row)
            .zip(gamma.data.iter().zip(&beta.data))
        {
            *o = (v - mean) * inv * g + b;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Cosine similarity of two equal-length vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            lhs: vec![u.len()],
            rhs: vec![v.len()],
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 {
        return Err(Error::ZeroNormToken { index: 0 });
    }
    if nv == 0.0 {
        return Err(Error::ZeroNormToken { index: 1 });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Scaled dot-product attention: `softmax(q·kᵀ/√D + mask)·v`.
///
/// `q` is Lq×D, `k` is Lk×D, `v` is Lk×Dv, `mask` (optional) is Lq×Lk.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    if q.rank() != 2 || k.rank() != 2 || q.shape[1] != k.shape[1] {
        return Err(Error::ShapeMismatch {
            op: "attention q/k",
            lhs: q.shape.clone(),
            rhs: k.shape.clone(),
        });
    }
    if v.rank() != 2 || v.shape[0] != k.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "attention k/v",
            lhs: k.shape.clone(),
            rhs: v.shape.clone(),
        });
    }
    let d = q.shape[1] as f64;
    let logits = matmul(q, &k.transpose()?)?.scale(1.0 / d.sqrt());
    if let Some(m) = mask {
        if m.shape() != logits.shape() {
            return Err(Error::ShapeMismatch {
                op: "attention mask",
                lhs: logits.shape.clone(),
                rhs: m.shape.clone(),
            });
        }
    }
    let weights = softmax(&logits, mask)?;
    matmul(&weights, v)
}

/// Compares an analytic directional derivative against a central-difference
/// estimate of `f` at `x` along `direction` with step `h`.
///
/// Returns `(analytic, numeric)` where
/// `numeric = (f(x + h·d) − f(x − h·d)) / 2h`.
pub fn directional_derivative_check<F, G>(
    f: F,
    analytic: G,
    x: &Tensor,
    direction: &Tensor,
    h: f64,
) -> Result<(f64, f64)>
where
    F: Fn(&Tensor) -> Result<f64>,
    G: Fn(&Tensor, &Tensor) -> Result<f64>,
{
    if x.shape() != direction.shape() {
        return Err(Error::ShapeMismatch {
            op: "directional_derivative_check",
            lhs: x.shape.clone(),
            rhs: direction.shape.clone(),
        });
    }
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidParameter(format!(
            "step h must lie in [1e-7, 1e-3], got {h}"
        )));
    }
    let plus = x.add(&direction.scale(h))?;
    let minus = x.sub(&direction.scale(h))?;
    let f_plus = f(&plus)?;
    let f_minus = f(&minus)?;
    if !f_plus.is_finite() || !f_minus.is_finite() {
        return Err(Error::NonFinite("directional_derivative_check".into()));
    }
    let numeric = (f_plus - f_minus) / (2.0 * h);
    let analytic = analytic(x, direction)?;
    if !analytic.is_finite() {
        return Err(Error::NonFinite(
            "analytic directional derivative".into(),
        ));
    }
    Ok((analytic, numeric))
}
