//! Adam over named parameter tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Moment buffers are created lazily per parameter name, so parameters added
/// by growing the model start with fresh state.
pub struct Adam {
    cfg: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step<F: Scalar>(&mut self, name: &str, param: &mut Tensor<F>, grad: &Tensor<F>) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape mismatch for {name}");
        let n = param.numel();
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        st.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(st.t as i32);
        let bc2 = 1.0 - beta2.powi(st.t as i32);
        let step = lr / bc1;
        for (((p, g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(st.m.iter_mut())
            .zip(st.v.iter_mut())
        {
            let g = g.to_f64().unwrap_or(f64::NAN);
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let upd = step * *m / ((*v / bc2).sqrt() + eps);
            *p = F::of(p.to_f64().unwrap_or(f64::NAN) - upd);
        }
    }
}
