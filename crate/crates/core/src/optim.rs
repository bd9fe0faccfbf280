//! Adam and the exponential-moving-average weight shadow.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{GradSet, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_lr(3e-4)
    }
}

/// Bias-corrected Adam moments for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = params
            .iter()
            .map(|(k, v)| (k.to_owned(), vec![0.0; v.numel()]))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One in-place update of `params`.
    ///
    /// A parameter whose gradient is identically zero keeps its value and moments, so a step
    /// with an all-zero gradient changes nothing but the step counter.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet) -> Result<()> {
        for (name, value) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::contract(format!("no gradient for parameter {name:?}")))?;
            if g.len() != value.numel() || self.first.get(name).map(Vec::len) != Some(value.numel())
            {
                return Err(Error::contract(format!(
                    "gradient/moment size mismatch for parameter {name:?}"
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, value) in params.iter_mut() {
            let g = &grads[name];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let m = self.first.get_mut(name).expect("checked above");
            let v = self.second.get_mut(name).expect("checked above");
            for (((p, &gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `θ_ema ← β·θ_ema + (1 − β)·θ`, initialised as an exact copy of the live parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaShadow {
    decay: f64,
    shadow: ParamSet,
}

impl EmaShadow {
    pub fn new(params: &ParamSet, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) || decay == 0.0 {
            return Err(Error::contract(format!(
                "EMA decay must lie in (0, 1), got {decay}"
            )));
        }
        Ok(Self {
            decay,
            shadow: params.clone(),
        })
    }

    /// Resume from a stored shadow.
    pub fn from_shadow(shadow: ParamSet, decay: f64) -> Result<Self> {
        let mut ema = Self::new(&ParamSet::new(), decay)?;
        ema.shadow = shadow;
        Ok(ema)
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn params(&self) -> &ParamSet {
        &self.shadow
    }

    pub fn update(&mut self, params: &ParamSet) -> Result<()> {
        if !self.shadow.same_layout(params) {
            return Err(Error::contract(
                "EMA shadow and live parameters differ in layout",
            ));
        }
        let b = self.decay;
        for ((_, s), (_, p)) in self.shadow.iter_mut().zip(params.iter()) {
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = b * *sv + (1.0 - b) * pv;
            }
        }
        Ok(())
    }
}
