//! Adaptive-moment optimizer with global-norm gradient clipping.

use crate::numerics::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip the global gradient norm to this value before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

/// Adam over an ordered list of parameter tensors. Moment buffers are
/// created lazily on the first step and must stay aligned with the same
/// parameter ordering afterwards.
pub struct Adam {
    cfg: AdamConfig,
    steps: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, steps: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &mut [Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), grads.len(), "optimizer state misaligned");

        if let Some(clip) = self.cfg.clip_norm {
            let norm = grads
                .iter()
                .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let scale = clip / norm;
                for g in grads.iter_mut() {
                    g.scale(scale);
                }
            }
        }

        self.steps += 1;
        let t = self.steps as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);

        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(param.shape(), grad.shape(), "param/grad shape mismatch");
            for i in 0..grad.len() {
                let g = grad.data()[i];
                m.data_mut()[i] = self.cfg.beta1 * m.data()[i] + (1.0 - self.cfg.beta1) * g;
                v.data_mut()[i] = self.cfg.beta2 * v.data()[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m.data()[i] / bc1;
                let v_hat = v.data()[i] / bc2;
                param.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }
}
