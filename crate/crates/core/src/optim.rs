//! Adam with bias correction and a step-decayed learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.95,
            decay_every: 10,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.eps.is_nan()
            || self.eps <= 0.0
            || self.decay.is_nan()
            || self.decay <= 0.0
            || self.decay_every == 0
        {
            return Err(Error::Config(
                "eps, decay and decay_every must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `lr * decay^(epoch / decay_every)` with integer division (epochs count from 0).
    pub fn lr_at_epoch(&self, epoch: u64) -> f64 {
        self.lr * self.decay.powi((epoch / self.decay_every) as i32)
    }
}

/// First and second moments per tensor, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    /// One Adam update with learning rate `lr` (no weight decay).
    pub fn update(
        &mut self,
        cfg: &AdamConfig,
        lr: f64,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::ShapeMismatch(format!("tensor {i} changed size")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::new([3]);
        let mut p = vec![0.5, -1.0, 2.0];
        for _ in 0..10 {
            st.update(&cfg, cfg.lr, &mut [&mut p], &[&[0.0, 0.0, 0.0]])
                .unwrap();
        }
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::new([1]);
        let mut p = vec![0.0];
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0];
            st.update(&cfg, cfg.lr, &mut [&mut p], &[&[1.0]]).unwrap();
            last = before - p[0];
        }
        assert!((last - cfg.lr).abs() < 1e-8, "{last}");
        // bias correction makes even the first step lr-sized
        let mut st = AdamState::new([1]);
        let mut p = vec![0.0];
        st.update(&cfg, cfg.lr, &mut [&mut p], &[&[3.0]]).unwrap();
        assert!((p[0] + cfg.lr).abs() < 1e-10);
    }

    #[test]
    fn learning_rate_decays_every_ten_epochs() {
        let cfg = AdamConfig::default();
        assert_eq!(cfg.lr_at_epoch(0), 0.001);
        assert_eq!(cfg.lr_at_epoch(9), 0.001);
        assert!((cfg.lr_at_epoch(10) - 0.00095).abs() < 1e-15);
        assert!((cfg.lr_at_epoch(25) - 0.001 * 0.95 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn shape_changes_are_rejected() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::new([2]);
        let mut p = vec![0.0; 3];
        assert!(st.update(&cfg, 0.1, &mut [&mut p], &[&[0.0; 3]]).is_err());
        assert!(AdamConfig { lr: 0.0, ..cfg }.validate().is_err());
    }
}
