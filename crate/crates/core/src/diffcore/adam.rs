use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// DQN and Rainbow defaults.
    pub const RAINBOW: AdamConfig = AdamConfig {
        lr: 6.25e-5,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1.5e-4,
    };

    /// Data-efficient Rainbow defaults.
    pub const DER: AdamConfig = AdamConfig {
        lr: 1e-4,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1.5e-4,
    };
}

/// Adam with bias correction; moments are kept per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Number of steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Zeroes the moment estimates of the given parameters.
    pub fn reset_moments(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.m[id.0].data_mut().iter_mut().for_each(|x| *x = 0.0);
            self.v[id.0].data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor, &Tensor) {
        (&self.m[id.0], &self.v[id.0])
    }
}
