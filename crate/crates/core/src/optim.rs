use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    shape: Vec<usize>,
}

/// Adam with bias correction. Moment buffers are created lazily per parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    t: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, t: 0, moments: BTreeMap::new() })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update over every `(name, param, grad)` triple:
    ///
    /// ```text
    /// t += 1
    /// m = β1·m + (1−β1)·g        v = β2·v + (1−β2)·g²
    /// θ -= lr · (m / (1−β1^t)) / (sqrt(v / (1−β2^t)) + ε)
    /// ```
    ///
    /// Shapes are checked for every parameter before anything is modified.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor, &'a Tensor)>,
    {
        let params: Vec<_> = params.into_iter().collect();
        for (name, value, grad) in &params {
            if value.shape() != grad.shape() {
                return Err(shape_err!("param {name}: value {:?} vs grad {:?}", value.shape(), grad.shape()));
            }
            if let Some(mo) = self.moments.get(*name) {
                if mo.shape != value.shape() {
                    return Err(shape_err!("param {name} changed shape from {:?} to {:?}", mo.shape, value.shape()));
                }
            }
        }

        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powf(self.t as f64);
        let c2 = 1.0 - beta2.powf(self.t as f64);
        for (name, value, grad) in params {
            let mo = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; value.len()],
                v: vec![0.0; value.len()],
                shape: value.shape().to_vec(),
            });
            for (((theta, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(&mut mo.m).zip(&mut mo.v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// First and second moments for a parameter, if it has been stepped.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|mo| (mo.m.as_slice(), mo.v.as_slice()))
    }
}
