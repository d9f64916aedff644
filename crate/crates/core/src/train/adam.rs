use crate::error::{Error, Result};
use crate::math;
use crate::param::{ParamGrads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.0004, eps: 8e-7, beta1: 0.9, beta2: 0.999 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Parameter("learning rate must be non-negative and eps positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Parameter("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update at step `t ≥ 1`. Frozen parameters are
/// skipped; parameters without a gradient see a zero gradient.
pub fn adam_step(params: &mut ParamStore, grads: &ParamGrads, cfg: &AdamConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::Parameter("Adam steps are numbered from 1".into()));
    }
    cfg.validate()?;
    let bc1 = 1.0 - math::powf(cfg.beta1, t as f64);
    let bc2 = 1.0 - math::powf(cfg.beta2, t as f64);
    let ids: alloc::vec::Vec<_> = params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let g = grads.get(id);
        let p = params.get_mut(id);
        let value = p.value.data_mut();
        for i in 0..value.len() {
            let gi = g.map_or(0.0, |g| g[i]);
            p.adam_m[i] = cfg.beta1 * p.adam_m[i] + (1.0 - cfg.beta1) * gi;
            p.adam_v[i] = cfg.beta2 * p.adam_v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = p.adam_m[i] / bc1;
            let v_hat = p.adam_v[i] / bc2;
            value[i] -= cfg.lr * m_hat / (math::sqrt(v_hat) + cfg.eps);
        }
    }
    Ok(())
}
