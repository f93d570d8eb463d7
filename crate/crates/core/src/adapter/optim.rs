use serde::{Deserialize, Serialize};

use super::mlp::Mlp;

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub hyper: AdamHyper,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(hyper: AdamHyper, params: &Mlp) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            hyper,
            step: 0,
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut Mlp, grads: &Mlp) {
        self.step += 1;
        let AdamHyper {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.hyper;
        let inv_bias1 = 1.0 / (1.0 - beta1.powi(self.step as i32));
        let inv_sqrt_bias2 = 1.0 / (1.0 - beta2.powi(self.step as i32)).sqrt();
        let decay = 1.0 - lr * weight_decay;
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m * inv_bias1;
                let denom = v.sqrt() * inv_sqrt_bias2 + epsilon;
                *p = *p * decay - lr * m_hat / denom;
            }
        }
    }
}
