//! AdamW optimizer and the two-rise learning-rate plateau schedule.

use super::layers::Param;

/// Adam with decoupled weight decay.
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over the model's parameters, visited in canonical order.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.w.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.w.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.w.len() {
                let g = p.g[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p.w[k] -=
                    self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p.w[k]);
            }
        }
    }
}

/// Halve the learning rate whenever the validation loss has risen for two
/// consecutive epochs (overlapping windows).
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub scale: f64,
    history: Vec<f64>,
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        PlateauScheduler {
            factor: 0.5,
            scale: 1.0,
            history: Vec::new(),
        }
    }
}

impl PlateauScheduler {
    /// Record one epoch's validation loss; returns the lr multiplier to use
    /// for the next epoch.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        self.history.push(val_loss);
        let n = self.history.len();
        if n >= 3 && self.history[n - 1] > self.history[n - 2]
            && self.history[n - 2] > self.history[n - 3]
        {
            self.scale *= self.factor;
        }
        self.scale
    }
}
