use super::TrainConfig;

/// Triangular cyclic learning rate: `lr_min` at step 0, `lr_max` at
/// `cyclic_step_size`, back to `lr_min` at twice that, then periodic.
pub fn cyclic_lr(step: u64, cfg: &TrainConfig) -> f64 {
    let half = cfg.cyclic_step_size.max(1);
    let pos = step % (2 * half);
    let rise = if pos <= half { pos } else { 2 * half - pos };
    // The end points are returned verbatim so the extremes are exact.
    if rise == 0 {
        cfg.lr_min
    } else if rise == half {
        cfg.lr_max
    } else {
        cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (rise as f64 / half as f64)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
