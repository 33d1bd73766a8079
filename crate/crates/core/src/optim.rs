//! AdamW and the linear-warmup cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{glob_match, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            base_lr: 1e-4,
            warmup_steps: 100,
            total_steps: 1000,
            min_lr: 0.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.base_lr.is_finite() && self.min_lr.is_finite() && self.base_lr >= 0.0 && self.min_lr >= 0.0) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to `min_lr` at `total_steps`.
pub fn lr_at_step(cfg: &ScheduleConfig, step: u64) -> Result<f64> {
    cfg.validate()?;
    if step > cfg.total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: cfg.total_steps,
        });
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.base_lr * step as f64 / cfg.warmup_steps as f64);
    }
    if step == cfg.total_steps {
        return Ok(cfg.min_lr);
    }
    if step == cfg.warmup_steps {
        return Ok(cfg.base_lr);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; off unless set.
    pub clip_grad_norm: Option<f64>,
    /// Learning-rate factors by parameter-name pattern; first match wins, default 1.
    pub lr_multipliers: Vec<LrMultiplier>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrMultiplier {
    pub pattern: String,
    pub factor: f64,
}

impl AdamWConfig {
    pub fn lr_factor(&self, name: &str) -> f64 {
        self.lr_multipliers
            .iter()
            .find(|m| glob_match(&m.pattern, name))
            .map_or(1.0, |m| m.factor)
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_grad_norm: None,
            lr_multipliers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyperparams {
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub seed: u64,
}

impl Default for TrainHyperparams {
    fn default() -> Self {
        TrainHyperparams {
            batch_size: 8,
            grad_accum_steps: 1,
            seed: 0,
        }
    }
}

impl TrainHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Config(
                "batch_size and grad_accum_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// AdamW moments keyed by parameter name, plus the applied-step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub step_count: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            ..Default::default()
        }
    }

    /// One update of every trainable parameter from its accumulated gradient.
    /// Frozen tensors are skipped. Gradients are left in place.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let mut sq = 0.0;
        for (name, t) in store.iter() {
            if t.requires_grad() {
                let g = t.grad().ok_or_else(|| Error::MissingGradient(name.to_string()))?;
                sq += g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        let clip = match self.cfg.clip_grad_norm {
            Some(max) if sq.sqrt() > max => max / sq.sqrt(),
            _ => 1.0,
        };

        self.step_count += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, p) in store.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let n = p.numel();
            let lr = lr * self.cfg.lr_factor(name);
            let grad: Vec<f64> = p.grad().expect("checked above").iter().map(|g| g * clip).collect();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(Error::Contract(format!(
                    "optimizer state for `{name}` has the wrong size"
                )));
            }
            for (((w, g), mi), vi) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                *w -= lr * weight_decay * *w;
                *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Runs micro-batches through `grad_fn`, stepping once every
/// `grad_accum_steps` of them with gradients averaged over the group.
///
/// `grad_fn(store, batch, scale)` must accumulate `scale ×` its batch-mean
/// gradient into `store` and return the batch loss. `lr_fn` receives the
/// optimizer's step count before each step. A trailing short group is
/// averaged over its actual size. Returns the mean loss of each applied step.
pub fn accumulate_and_step<B>(
    store: &mut ParamStore,
    opt: &mut AdamW,
    micro_batches: impl IntoIterator<Item = B>,
    grad_accum_steps: usize,
    mut lr_fn: impl FnMut(u64) -> Result<f64>,
    mut grad_fn: impl FnMut(&mut ParamStore, &B, f64) -> Result<f64>,
) -> Result<Vec<f64>> {
    if grad_accum_steps == 0 {
        return Err(Error::Config("grad_accum_steps must be at least 1".into()));
    }
    let mut losses = Vec::new();
    let mut pending = 0usize;
    let mut loss_sum = 0.0;
    let scale = 1.0 / grad_accum_steps as f64;
    let mut apply = |store: &mut ParamStore, opt: &mut AdamW, k: usize, loss_sum: f64| -> Result<f64> {
        if k < grad_accum_steps {
            let fix = grad_accum_steps as f64 / k as f64;
            for (_, t) in store.iter_mut() {
                if let Some(g) = t.grad_mut() {
                    g.iter_mut().for_each(|x| *x *= fix);
                }
            }
        }
        let lr = lr_fn(opt.step_count)?;
        opt.step(store, lr)?;
        store.reset_grads();
        Ok(loss_sum / k as f64)
    };
    store.reset_grads();
    for batch in micro_batches {
        loss_sum += grad_fn(store, &batch, scale)?;
        pending += 1;
        if pending == grad_accum_steps {
            losses.push(apply(store, opt, pending, loss_sum)?);
            pending = 0;
            loss_sum = 0.0;
        }
    }
    if pending > 0 {
        losses.push(apply(store, opt, pending, loss_sum)?);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn reference_schedule() -> ScheduleConfig {
        ScheduleConfig {
            total_steps: 300,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_landmarks() {
        let c = reference_schedule();
        assert_eq!(lr_at_step(&c, 0).unwrap(), 0.0);
        assert_eq!(lr_at_step(&c, 100).unwrap(), 1e-4);
        assert!((lr_at_step(&c, 200).unwrap() - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at_step(&c, 300).unwrap(), 0.0);
        assert!(matches!(lr_at_step(&c, 301), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn warmup_longer_than_run_rejected() {
        let c = ScheduleConfig {
            warmup_steps: 10,
            total_steps: 5,
            ..Default::default()
        };
        assert!(lr_at_step(&c, 0).is_err());
    }

    fn scalar_store(w: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut t = Tensor::new(vec![1], vec![w]).unwrap().with_requires_grad(true);
        t.accumulate_grad(&[g], 1.0);
        s.insert("w", t).unwrap();
        s
    }

    #[test]
    fn hand_computed_step() {
        let mut s = scalar_store(1.0, 0.1);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, 1e-4).unwrap();
        let w = s.get("w").unwrap().data()[0];
        assert!((w - 0.999899).abs() < 1e-9, "{w}");
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn null_update() {
        let mut s = scalar_store(0.7, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut s, 1e-3).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn missing_gradient_named() {
        let mut s = ParamStore::new();
        s.insert("layer.w", Tensor::zeros(&[2]).with_requires_grad(true))
            .unwrap();
        s.insert("frozen", Tensor::zeros(&[2])).unwrap();
        let err = AdamW::default().step(&mut s, 1e-3).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "layer.w"));
    }

    #[test]
    fn clip_limits_norm() {
        let mut a = scalar_store(0.0, 100.0);
        let mut b = scalar_store(0.0, 1.0);
        let cfg = AdamWConfig {
            clip_grad_norm: Some(1.0),
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut oa = AdamW::new(cfg.clone());
        oa.step(&mut a, 0.1).unwrap();
        AdamW::new(cfg).step(&mut b, 0.1).unwrap();
        assert!((oa.m["w"][0] - 0.1).abs() < 1e-15);
        assert!((a.get("w").unwrap().data()[0] - b.get("w").unwrap().data()[0]).abs() < 1e-12);
    }
}
