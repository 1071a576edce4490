//! Dense vectors and the similarity primitives shared by every pipeline stage.

use serde::{Deserialize, Serialize};

use crate::gateway::EncoderBackend;
use crate::{Error, Result, Scalar};

/// Norms below this are treated as a degenerate encoder output.
pub const MIN_NORM: f64 = 1e-12;

/// Vectors whose norm is already within this of 1.0 are left untouched by
/// [`normalize`], which makes normalization idempotent bit for bit.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Default embedding width of the reference encoder.
pub const DEFAULT_DIM: usize = 768;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent, bound = "T: Scalar")]
pub struct Vector<T: Scalar = f32> {
    values: Vec<T>,
}

impl<T: Scalar> Vector<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn from_f64(values: &[f64]) -> Self {
        Self::new(values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    /// Unit vector along coordinate `axis`.
    pub fn basis(dim: usize, axis: usize) -> Self {
        let mut values = vec![T::zero(); dim];
        values[axis] = T::one();
        Self::new(values)
    }
}

pub(crate) fn norm<T: Scalar>(values: &[T]) -> f64 {
    values
        .iter()
        .map(|v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Inner product over equal-length slices, accumulated in `f64`.
#[inline]
pub fn dot_slices<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += x.as_f64() * y.as_f64();
    }
    T::from_f64_lossy(acc)
}

pub fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimMismatch { expected, actual });
    }
    Ok(())
}

pub fn dot<T: Scalar>(a: &Vector<T>, b: &Vector<T>) -> Result<T> {
    check_dim(a.dim(), b.dim())?;
    Ok(dot_slices(a.values(), b.values()))
}

pub fn normalize<T: Scalar>(v: &Vector<T>) -> Result<Vector<T>> {
    let n = v.norm();
    if n.is_nan() || n < MIN_NORM {
        return Err(Error::ZeroVector);
    }
    if (n - 1.0).abs() <= UNIT_TOLERANCE {
        return Ok(v.clone());
    }
    Ok(Vector::new(
        v.values()
            .iter()
            .map(|&x| T::from_f64_lossy(x.as_f64() / n))
            .collect(),
    ))
}

/// Cosine similarity clamped to `[-1, 1]`.
///
/// For unit inputs this is the inner product up to the rounding of the
/// stored norms; dividing by them makes `cosine_sim(v, v)` exactly 1.
pub fn cosine_sim<T: Scalar>(a: &Vector<T>, b: &Vector<T>) -> Result<T> {
    check_dim(a.dim(), b.dim())?;
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.values().iter().zip(b.values()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let denom = (aa * bb).sqrt();
    if denom < MIN_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(T::from_f64_lossy((ab / denom).clamp(-1.0, 1.0)))
}

/// Embeds one text with `backend` and normalizes the result.
pub fn encode<T: Scalar>(text: &str, backend: &dyn EncoderBackend) -> Result<Vector<T>> {
    let mut out = encode_batch::<T>(&[text], backend)?;
    Ok(out.pop().expect("one output per input"))
}

/// Order-preserving batch form of [`encode`].
pub fn encode_batch<T: Scalar>(
    texts: &[&str],
    backend: &dyn EncoderBackend,
) -> Result<Vec<Vector<T>>> {
    if texts.iter().any(|t| t.trim().is_empty()) {
        return Err(Error::EmptyText);
    }
    let raw = backend.embed(texts)?;
    if raw.len() != texts.len() {
        return Err(Error::ProtocolError(format!(
            "encoder returned {} vectors for {} texts",
            raw.len(),
            texts.len()
        )));
    }
    raw.iter()
        .map(|values| {
            check_dim(backend.dim(), values.len())?;
            normalize(&Vector::from_f64(values))
        })
        .collect()
}
