use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update. Any non-finite gradient aborts before a single
    /// parameter is touched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        for (id, g) in grads.iter() {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in {} at index {i}",
                    params.name(id)
                )));
            }
        }
        self.t += 1;
        let c = &self.cfg;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let eps = T::from_f64_lossy(c.eps);
        let lr = T::from_f64_lossy(lr);
        let bc1 = T::one() - b1.powi(self.t);
        let bc2 = T::one() - b2.powi(self.t);
        for (id, g) in grads.iter() {
            let k = id.index();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
