//! Adam and parameter-space exponential moving average.

use alloc::format;

use crate::nn::ParamSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    m: ParamSet,
    v: ParamSet,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, layout: &ParamSet) -> Self {
        Self {
            config,
            m: layout.zeros_like(),
            v: layout.zeros_like(),
            step: 0,
        }
    }

    /// Rebuilds a state from persisted moments.
    pub fn from_parts(config: AdamConfig, m: ParamSet, v: ParamSet, step: u64) -> Result<Self> {
        m.check_layout(&v, "OptimizerState::from_parts")?;
        if !m.is_finite() || !v.is_finite() {
            return Err(Error::NonFinite("optimizer moments"));
        }
        Ok(Self { config, m, v, step })
    }

    pub fn first_moment(&self) -> &ParamSet {
        &self.m
    }

    pub fn second_moment(&self) -> &ParamSet {
        &self.v
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn adam_step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        params.check_layout(grads, "adam_step gradient")?;
        params.check_layout(&self.m, "adam_step moments")?;
        if !grads.is_finite() {
            return Err(Error::NonFinite("adam_step gradient"));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(beta1, t);
        let bc2 = 1.0 - libm::pow(beta2, t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}

/// `momentum * teacher + (1 - momentum) * student`, element-wise.
pub fn ema_update(teacher: &ParamSet, student: &ParamSet, momentum: f64) -> Result<ParamSet> {
    let mut out = teacher.clone();
    ema_update_in_place(&mut out, student, momentum)?;
    Ok(out)
}

pub fn ema_update_in_place(teacher: &mut ParamSet, student: &ParamSet, momentum: f64) -> Result<()> {
    check_momentum(momentum)?;
    teacher.check_layout(student, "ema_update")?;
    for (t, s) in teacher.iter_mut().zip(student.iter()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = momentum * *tv + (1.0 - momentum) * sv;
        }
    }
    Ok(())
}

pub(crate) fn check_momentum(momentum: f64) -> Result<()> {
    if (0.0..1.0).contains(&momentum) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "EMA momentum must lie in [0, 1), got {momentum}"
        )))
    }
}
