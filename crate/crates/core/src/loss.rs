//! Hard, soft and combined distillation cross-entropy.
//!
//! Every loss is a batch mean and returns its gradient with respect to the
//! logits that produced the probabilities (softmax and cross-entropy are
//! differentiated together). Logarithms are clamped as `ln(p + 1e-12)`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::softmax::{softmax_with_temperature, Logits, ProbVector};
use crate::tensor::Tensor;

pub const LOG_CLAMP: f64 = 1e-12;

/// One-hot class targets, `[batch, classes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotLabels(Tensor);

impl OneHotLabels {
    pub fn from_indices(labels: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(shape_err!("labels must not be empty"));
        }
        if classes < 2 {
            return Err(shape_err!("need at least two classes, got {classes}"));
        }
        let mut data = vec![0.0; labels.len() * classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::Domain(format!("label {y} out of range for {classes} classes")));
            }
            data[i * classes + y] = 1.0;
        }
        Ok(Self(Tensor::from_parts(vec![labels.len(), classes], data)))
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

    pub fn indices(&self) -> Vec<usize> {
        self.0.data().chunks(self.classes()).map(|row| row.iter().position(|&v| v == 1.0).unwrap_or(0)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdLossConfig {
    /// Weight of the hard-label term.
    pub alpha: f64,
    pub temperature: f64,
    /// Multiply the soft-term gradient by `T²`.
    pub t_squared_scaling: bool,
    /// Compute the hard term on `softmax(a_s / T)` instead of `softmax(a_s)`.
    pub hard_term_uses_t: bool,
}

impl Default for KdLossConfig {
    fn default() -> Self {
        Self { alpha: 0.5, temperature: 10.0, t_squared_scaling: true, hard_term_uses_t: false }
    }
}

impl KdLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Domain(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(shape_err!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()))
    }
}

/// Mean over rows of `-Σ_j target_j · ln(p_j + 1e-12)`, with gradient
/// `(p - target) / batch` for `p = softmax(logits)`.
fn cross_entropy_against(probs: &Tensor, target: &Tensor) -> (f64, Tensor) {
    let batch = probs.shape()[0] as f64;
    let classes = probs.shape()[1];
    let mut total = 0.0;
    for (p, y) in probs.data().chunks(classes).zip(target.data().chunks(classes)) {
        total -= p.iter().zip(y).map(|(&pj, &yj)| yj * (pj + LOG_CLAMP).ln()).sum::<f64>();
    }
    let grad = probs.data().iter().zip(target.data()).map(|(p, y)| (p - y) / batch).collect();
    (total / batch, Tensor::from_parts(probs.shape().to_vec(), grad))
}

/// Hard-label cross-entropy. The gradient is with respect to the logits of a
/// `T = 1` softmax.
pub fn cross_entropy(probs: &ProbVector, labels: &OneHotLabels) -> Result<(f64, Tensor)> {
    same_shape(probs.values(), labels.values(), "cross_entropy")?;
    Ok(cross_entropy_against(probs.values(), labels.values()))
}

/// Soft-target cross-entropy of student probabilities against teacher
/// probabilities, both softened at `temperature`. The gradient with respect to
/// student logits is `(p_s - p_t) / (T · batch)`, times `T²` when
/// `t_squared_scaling` is set.
pub fn soft_cross_entropy(
    student: &ProbVector,
    teacher: &ProbVector,
    temperature: f64,
    t_squared_scaling: bool,
) -> Result<(f64, Tensor)> {
    same_shape(student.values(), teacher.values(), "soft_cross_entropy")?;
    crate::softmax::check_temperature(temperature)?;
    let (loss, mut grad) = cross_entropy_against(student.values(), teacher.values());
    let factor = if t_squared_scaling { temperature } else { 1.0 / temperature };
    for g in grad.data_mut() {
        *g *= factor;
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug)]
pub struct KdLossOutput {
    /// `α · hard + (1 − α) · soft`
    pub loss: f64,
    pub hard: f64,
    pub soft: f64,
    /// Gradient with respect to the student logits. Teacher logits are constants.
    pub grad: Tensor,
}

/// Weighted hard/soft distillation loss.
pub fn kd_loss(student: &Logits, teacher: &Logits, labels: &OneHotLabels, cfg: &KdLossConfig) -> Result<KdLossOutput> {
    cfg.validate()?;
    same_shape(student.values(), teacher.values(), "kd_loss logits")?;
    same_shape(student.values(), labels.values(), "kd_loss labels")?;
    let t = cfg.temperature;

    let hard_t = if cfg.hard_term_uses_t { t } else { 1.0 };
    let (hard, mut hard_grad) = cross_entropy(&softmax_with_temperature(student, hard_t)?, labels)?;
    if cfg.hard_term_uses_t {
        for g in hard_grad.data_mut() {
            *g /= t;
        }
    }
    let (soft, soft_grad) = soft_cross_entropy(
        &softmax_with_temperature(student, t)?,
        &softmax_with_temperature(teacher, t)?,
        t,
        cfg.t_squared_scaling,
    )?;

    let a = cfg.alpha;
    let grad = hard_grad.data().iter().zip(soft_grad.data()).map(|(h, s)| a * h + (1.0 - a) * s).collect();
    Ok(KdLossOutput {
        loss: a * hard + (1.0 - a) * soft,
        hard,
        soft,
        grad: Tensor::from_parts(student.values().shape().to_vec(), grad),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::softmax::entropy;

    fn probs(rows: &[&[f64]]) -> ProbVector {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        ProbVector::new(Tensor::from_vec(&[rows.len(), rows[0].len()], data).unwrap()).unwrap()
    }

    fn logits(rows: &[&[f64]]) -> Logits {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Logits::new(Tensor::from_vec(&[rows.len(), rows[0].len()], data).unwrap()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let y0 = OneHotLabels::from_indices(&[0], 2).unwrap();
        let y1 = OneHotLabels::from_indices(&[1], 2).unwrap();
        let (l, _) = cross_entropy(&probs(&[&[1.0, 0.0]]), &y0).unwrap();
        assert!(l.abs() < 1e-11);
        let (l, g) = cross_entropy(&probs(&[&[0.5, 0.5]]), &y1).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-11);
        assert_eq!(g.data(), &[0.5, -0.5]);
        let (l, _) = cross_entropy(&probs(&[&[0.25, 0.75]]), &y0).unwrap();
        assert!((l - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn soft_cross_entropy_examples() {
        let half = probs(&[&[0.5, 0.5]]);
        let (l, g) = soft_cross_entropy(&half, &half, 10.0, true).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-11);
        assert!(g.data().iter().all(|&v| v == 0.0));
        let (l, _) = soft_cross_entropy(&half, &probs(&[&[0.9, 0.1]]), 3.0, false).unwrap();
        let expected = -(0.9 * 0.5f64.ln() + 0.1 * 0.5f64.ln());
        assert!((l - expected).abs() < 1e-11);
    }

    #[test]
    fn soft_gradient_scaling() {
        let s = probs(&[&[0.7, 0.3]]);
        let t = probs(&[&[0.4, 0.6]]);
        let (_, plain) = soft_cross_entropy(&s, &t, 4.0, false).unwrap();
        let (_, scaled) = soft_cross_entropy(&s, &t, 4.0, true).unwrap();
        assert!((plain.data()[0] - 0.3 / 4.0).abs() < 1e-15);
        assert!((scaled.data()[0] - 0.3 * 4.0).abs() < 1e-15);
    }

    #[test]
    fn kd_loss_on_uniform_logits() {
        let z = logits(&[&[0.0, 0.0]]);
        let y = OneHotLabels::from_indices(&[1], 2).unwrap();
        let cfg = KdLossConfig { alpha: 0.5, temperature: 10.0, ..Default::default() };
        let out = kd_loss(&z, &z, &y, &cfg).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-11);
    }

    #[test]
    fn kd_loss_limits() {
        let s = logits(&[&[1.2, -0.3], &[0.1, 2.0]]);
        let t = logits(&[&[3.0, 1.0], &[-1.0, 0.5]]);
        let y = OneHotLabels::from_indices(&[0, 1], 2).unwrap();
        let hard = kd_loss(&s, &t, &y, &KdLossConfig { alpha: 1.0, temperature: 3.0, ..Default::default() }).unwrap();
        let (ce, ce_grad) = cross_entropy(&softmax_with_temperature(&s, 1.0).unwrap(), &y).unwrap();
        assert_eq!(hard.loss, ce);
        assert_eq!(hard.grad, ce_grad);

        let cfg = KdLossConfig { alpha: 0.0, temperature: 3.0, ..Default::default() };
        let soft = kd_loss(&s, &t, &y, &cfg).unwrap();
        let (sce, sce_grad) = soft_cross_entropy(
            &softmax_with_temperature(&s, 3.0).unwrap(),
            &softmax_with_temperature(&t, 3.0).unwrap(),
            3.0,
            true,
        )
        .unwrap();
        assert_eq!(soft.loss, sce);
        assert_eq!(soft.grad, sce_grad);
    }

    #[test]
    fn gibbs_inequality() {
        let t = probs(&[&[0.2, 0.8]]);
        let (same, _) = soft_cross_entropy(&t, &t, 1.0, false).unwrap();
        assert!((same - entropy(t.row(0))).abs() < 1e-11);
        let (other, _) = soft_cross_entropy(&probs(&[&[0.5, 0.5]]), &t, 1.0, false).unwrap();
        assert!(other > entropy(t.row(0)));
    }

    #[test]
    fn shape_and_config_errors() {
        let y = OneHotLabels::from_indices(&[0], 3).unwrap();
        assert!(matches!(cross_entropy(&probs(&[&[0.5, 0.5]]), &y), Err(Error::Shape(_))));
        let s = logits(&[&[0.0, 1.0]]);
        let t = logits(&[&[0.0, 1.0, 2.0]]);
        let y = OneHotLabels::from_indices(&[0], 2).unwrap();
        assert!(matches!(kd_loss(&s, &t, &y, &KdLossConfig::default()), Err(Error::Shape(_))));
        let bad = KdLossConfig { alpha: 1.5, ..Default::default() };
        assert!(matches!(kd_loss(&s, &s, &y, &bad), Err(Error::Config(_))));
        assert!(OneHotLabels::from_indices(&[2], 2).is_err());
    }
}
