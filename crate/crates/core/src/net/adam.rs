use crate::error::{arg, Result};

/// Adam hyper-parameters. The default learning rate is 1e-4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return arg(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return arg(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return arg("adam eps must be positive");
        }
        Ok(())
    }
}

/// Updates one tensor in place; `t` is the 1-based step index.
pub(super) fn update(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..w.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_hyperparameters() {
        let ok = AdamConfig::default();
        assert!(ok.validate().is_ok());
        assert!(AdamConfig { lr: 0.0, ..ok }.validate().is_err());
        assert!(AdamConfig { beta1: 1.0, ..ok }.validate().is_err());
        assert!(AdamConfig { beta2: -0.1, ..ok }.validate().is_err());
    }

    #[test]
    fn bias_correction_two_steps() {
        // Hand-evaluated: g = 1 then g = -1 with beta1 = 0.5, beta2 = 0.5.
        let cfg = AdamConfig { lr: 1.0, beta1: 0.5, beta2: 0.5, eps: 0.0 };
        let (mut w, mut m, mut v) = ([0.0], [0.0], [0.0]);
        update(&mut w, &[1.0], &mut m, &mut v, 1, &cfg);
        assert_eq!(w[0], -1.0);
        update(&mut w, &[-1.0], &mut m, &mut v, 2, &cfg);
        // m = 0.25 - 0.5 = -0.25, m_hat = -1/3; v = 0.25 + 0.5 = 0.75, v_hat = 1.
        assert!((w[0] - (-1.0 + 1.0 / 3.0)).abs() < 1e-15);
    }
}
