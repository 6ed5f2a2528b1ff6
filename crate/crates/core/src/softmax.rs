//! Temperature-scaled softmax over class logits.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Pre-softmax class scores, `[batch, classes]` with at least two classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(Tensor);

impl Logits {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(shape_err!("logits must be [batch, classes], got {:?}", values.shape()));
        }
        if values.shape()[1] < 2 {
            return Err(shape_err!("logits need at least two classes, got {}", values.shape()[1]));
        }
        if values.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("logits contain a non-finite value".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

/// Row-normalized class probabilities, same layout as [`Logits`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Tensor);

impl ProbVector {
    /// Wraps probabilities, checking each row sums to one within `1e-9`.
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 || values.shape()[1] < 2 {
            return Err(shape_err!("probabilities must be [batch, classes>=2], got {:?}", values.shape()));
        }
        let classes = values.shape()[1];
        for (i, row) in values.data().chunks(classes).enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Domain(format!("row {i} has an entry outside [0, 1]")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!("row {i} sums to {total}")));
            }
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

/// Softmax of one row at temperature `t`, written into `out`.
///
/// The row maximum is subtracted before exponentiation, so any finite logits
/// are safe. With `t == 1` this is the plain softmax.
pub(crate) fn softmax_row(row: &[f64], t: f64, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &a) in out.iter_mut().zip(row) {
        *o = ((a - max) / t).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("temperature must be positive and finite, got {t}")))
    }
}

pub(crate) fn softmax_rows(values: &Tensor, t: f64) -> Tensor {
    let classes = values.shape()[1];
    let mut out = vec![0.0; values.len()];
    for (src, dst) in values.data().chunks(classes).zip(out.chunks_mut(classes)) {
        softmax_row(src, t, dst);
    }
    Tensor::from_parts(values.shape().to_vec(), out)
}

/// `p_ij = exp(a_ij / T) / Σ_k exp(a_ik / T)`.
pub fn softmax_with_temperature(logits: &Logits, t: f64) -> Result<ProbVector> {
    check_temperature(t)?;
    Ok(ProbVector(softmax_rows(logits.values(), t)))
}

/// Shannon entropy (nats) of one probability row.
pub fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
