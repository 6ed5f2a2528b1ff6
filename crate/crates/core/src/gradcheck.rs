//! Central finite-difference verification of analytic gradients.
//!
//! Relative error per coordinate is `|g_a - g_fd| / (|g_a| + |g_fd| + 1e-12)`
//! where `g_fd = (f(x + h) - f(x - h)) / 2h`; a check passes when the maximum
//! over all coordinates is at most the tolerance.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerSpec, Mode};
use crate::loss::{kd_loss, KdLossConfig, OneHotLabels};
use crate::softmax::Logits;
use crate::tensor::{Fill, RngState, Tensor};

/// Fresh inputs are drawn this many times when a non-differentiable point is hit.
pub const RETRY_LIMIT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub subject: String,
    pub status: CheckStatus,
    pub max_rel_error: f64,
    /// Coordinate with the worst error, e.g. `input[3]` or `weight[10]`.
    pub worst: String,
    pub coordinates: usize,
    pub attempts: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Pass
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn check_step(h: f64, tol: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }
    Ok(())
}

#[derive(Default)]
struct Worst {
    err: f64,
    at: String,
    count: usize,
}

impl Worst {
    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let err = relative_error(analytic, numeric);
        self.count += 1;
        if self.at.is_empty() || err > self.err {
            self.err = err;
            self.at = at();
        }
    }
}

/// Checks every input and parameter gradient of one layer against central
/// differences of the scalar `Σ r ⊙ layer(x)` with a random projection `r`.
///
/// `input_shape` includes the batch axis. Dropout layers replay the same mask
/// for every evaluation. Inputs landing within `10·h` of a ReLU zero or a
/// max-pool tie are redrawn up to [`RETRY_LIMIT`] times before the report is
/// marked inconclusive.
pub fn grad_check(spec: &LayerSpec, input_shape: &[usize], h: f64, tol: f64, seed: u64) -> Result<CheckReport> {
    check_step(h, tol)?;
    spec.validate()?;
    let margin = 10.0 * h;
    for attempt in 0..=RETRY_LIMIT {
        let mut rng = RngState::with_stream(seed, attempt as u64);
        let mut layer = Layer::new(spec.clone(), &mut rng)?;
        let mut x = Tensor::create(input_shape, Fill::Normal { mean: 0.0, std: 1.0, rng: &mut rng })?;
        let mask_rng = RngState::with_stream(seed, 1_000 + attempt as u64);

        let out = layer.forward(&x, Mode::Train, Some(&mut mask_rng.clone()))?;
        let proj = Tensor::create(out.shape(), Fill::Normal { mean: 0.0, std: 1.0, rng: &mut rng })?;
        if layer.kink_distance(&x) < margin {
            continue;
        }
        let dx = layer.backward(&proj)?;
        let param_grads: Vec<(String, Tensor)> =
            layer.params().into_iter().map(|(name, p)| (name, p.grad.clone())).collect();

        let objective = |layer: &mut Layer, x: &Tensor| -> Result<f64> {
            let y = layer.forward(x, Mode::Train, Some(&mut mask_rng.clone()))?;
            Ok(y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
        };

        let mut worst = Worst::default();
        for i in 0..x.len() {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + h;
            let up = objective(&mut layer, &x)?;
            x.data_mut()[i] = orig - h;
            let down = objective(&mut layer, &x)?;
            x.data_mut()[i] = orig;
            worst.record(dx.data()[i], (up - down) / (2.0 * h), || format!("input[{i}]"));
        }
        for (pi, (name, grad)) in param_grads.iter().enumerate() {
            for j in 0..grad.len() {
                let orig = layer.params()[pi].1.value.data()[j];
                let set = |layer: &mut Layer, v: f64| layer.params_mut()[pi].1.value.data_mut()[j] = v;
                set(&mut layer, orig + h);
                let up = objective(&mut layer, &x)?;
                set(&mut layer, orig - h);
                let down = objective(&mut layer, &x)?;
                set(&mut layer, orig);
                worst.record(grad.data()[j], (up - down) / (2.0 * h), || format!("{name}[{j}]"));
            }
        }
        let status = if worst.err <= tol { CheckStatus::Pass } else { CheckStatus::Fail };
        return Ok(CheckReport {
            subject: spec.kind().to_string(),
            status,
            max_rel_error: worst.err,
            worst: worst.at,
            coordinates: worst.count,
            attempts: attempt + 1,
        });
    }
    Ok(CheckReport {
        subject: spec.kind().to_string(),
        status: CheckStatus::Inconclusive,
        max_rel_error: f64::NAN,
        worst: String::new(),
        coordinates: 0,
        attempts: RETRY_LIMIT + 1,
    })
}

/// Checks the fused distillation-loss gradient with respect to student logits.
///
/// The differentiated objective is `α·L_hard + (1−α)·s·L_soft` with `s = T²`
/// when `t_squared_scaling` is set and `s = 1` otherwise, which is the
/// objective whose gradient [`kd_loss`] returns.
pub fn grad_check_kd_loss(
    cfg: &KdLossConfig,
    batch: usize,
    classes: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<CheckReport> {
    check_step(h, tol)?;
    cfg.validate()?;
    let mut rng = RngState::new(seed);
    let scale = 3.0;
    let mut student = Tensor::create(&[batch, classes], Fill::Normal { mean: 0.0, std: scale, rng: &mut rng })?;
    let teacher = Tensor::create(&[batch, classes], Fill::Normal { mean: 0.0, std: scale, rng: &mut rng })?;
    let labels: Vec<usize> = (0..batch).map(|_| (rng.next_u64() % classes as u64) as usize).collect();
    let labels = OneHotLabels::from_indices(&labels, classes)?;
    let teacher = Logits::new(teacher)?;

    let soft_scale = if cfg.t_squared_scaling { cfg.temperature * cfg.temperature } else { 1.0 };
    let objective = |s: &Tensor| -> Result<f64> {
        let out = kd_loss(&Logits::new(s.clone())?, &teacher, &labels, cfg)?;
        Ok(cfg.alpha * out.hard + (1.0 - cfg.alpha) * soft_scale * out.soft)
    };
    let analytic = kd_loss(&Logits::new(student.clone())?, &teacher, &labels, cfg)?.grad;

    let mut worst = Worst::default();
    for i in 0..student.len() {
        let orig = student.data()[i];
        student.data_mut()[i] = orig + h;
        let up = objective(&student)?;
        student.data_mut()[i] = orig - h;
        let down = objective(&student)?;
        student.data_mut()[i] = orig;
        worst.record(analytic.data()[i], (up - down) / (2.0 * h), || format!("logit[{i}]"));
    }
    Ok(CheckReport {
        subject: format!("kd_loss(alpha={}, T={})", cfg.alpha, cfg.temperature),
        status: if worst.err <= tol { CheckStatus::Pass } else { CheckStatus::Fail },
        max_rel_error: worst.err,
        worst: worst.at,
        coordinates: worst.count,
        attempts: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_pass(report: CheckReport) {
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn dense_passes() {
        assert_pass(grad_check(&LayerSpec::Dense { inputs: 5, units: 3 }, &[4, 5], 1e-5, 1e-3, 1).unwrap());
    }

    #[test]
    fn conv_3x3_two_to_four_channels_passes() {
        let spec = LayerSpec::conv(2, 4, 3);
        assert_pass(grad_check(&spec, &[2, 6, 6, 2], 1e-5, 1e-3, 2).unwrap());
    }

    #[test]
    fn strided_padded_conv_passes() {
        let spec =
            LayerSpec::Conv2d { in_channels: 3, out_channels: 2, kernel_h: 3, kernel_w: 3, stride: 2, padding: 1 };
        assert_pass(grad_check(&spec, &[2, 7, 6, 3], 1e-5, 1e-3, 3).unwrap());
    }

    #[test]
    fn nonsmooth_and_shape_layers_pass() {
        for (spec, shape) in [
            (LayerSpec::Relu, vec![3, 7]),
            (LayerSpec::MaxPool2d { window: 2, stride: 2 }, vec![2, 4, 4, 3]),
            (LayerSpec::Dropout { rate: 0.25 }, vec![3, 10]),
            (LayerSpec::Flatten, vec![2, 3, 3, 2]),
            (LayerSpec::GlobalAvgPool, vec![2, 3, 4, 2]),
            (LayerSpec::SoftmaxT { temperature: 3.0 }, vec![4, 3]),
            (LayerSpec::ResidualBlock { channels: 2, kernel: 3 }, vec![2, 4, 4, 2]),
        ] {
            assert_pass(grad_check(&spec, &shape, 1e-5, 1e-3, 4).unwrap());
        }
    }

    #[test]
    fn zero_step_is_domain_error() {
        let spec = LayerSpec::Dense { inputs: 2, units: 2 };
        assert!(matches!(grad_check(&spec, &[1, 2], 0.0, 1e-3, 0), Err(Error::Domain(_))));
        assert!(matches!(grad_check(&spec, &[1, 2], 1e-5, 0.0, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // A huge step makes the difference quotient of the softmax visibly wrong.
        let spec = LayerSpec::SoftmaxT { temperature: 0.5 };
        let report = grad_check(&spec, &[2, 3], 1.0, 1e-3, 5).unwrap();
        assert_eq!(report.status, CheckStatus::Fail);
    }

    #[test]
    fn relu_at_kinks_is_inconclusive() {
        // With a step this large every draw has an input near zero.
        let report = grad_check(&LayerSpec::Relu, &[50, 50], 0.1, 1e-3, 6).unwrap();
        assert_eq!(report.status, CheckStatus::Inconclusive);
        assert_eq!(report.attempts, RETRY_LIMIT + 1);
    }

    #[test]
    fn kd_loss_gradients_pass() {
        for alpha in [0.0, 0.3, 0.5, 1.0] {
            for t in [1.0, 3.0, 10.0] {
                for t_squared_scaling in [false, true] {
                    let cfg = KdLossConfig { alpha, temperature: t, t_squared_scaling, hard_term_uses_t: false };
                    assert_pass(grad_check_kd_loss(&cfg, 4, 3, 1e-5, 1e-3, 7).unwrap());
                }
            }
        }
        let literal = KdLossConfig { alpha: 0.5, temperature: 4.0, t_squared_scaling: true, hard_term_uses_t: true };
        assert_pass(grad_check_kd_loss(&literal, 4, 2, 1e-5, 1e-3, 8).unwrap());
    }
}
