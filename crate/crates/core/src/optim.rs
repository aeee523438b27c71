//! Adam with classical (coupled) weight decay and a piecewise-constant
//! learning-rate schedule.
//!
//! The decay folds into the gradient before the moment updates:
//! `g <- g + wd * p`, then the standard bias-corrected first/second moment
//! step. Parameters whose backward pass produced no gradient at all are
//! skipped entirely — no decay, no state update — so structurally untrained
//! tensors (e.g. BN affine when nothing differentiates through post-BN)
//! stay at their initial values instead of decaying to zero.

use std::collections::BTreeMap;

use gaitrm_tensor::Tensor;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(CoreError::InvalidConfig(format!(
                    "adam {name} must be in [0, 1), got {b}"
                )));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "adam epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(CoreError::InvalidConfig(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor<f32>,
    v: Tensor<f32>,
}

/// Optimizer state: one (m, v) pair per parameter name, plus the global
/// step counter. Iteration order is name-sorted (BTreeMap), so export and
/// checkpointing are deterministic.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step_count: u64,
    states: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            step_count: 0,
            states: BTreeMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Advance the shared step counter; call once per training iteration,
    /// before the per-parameter updates.
    pub fn begin_step(&mut self) -> u64 {
        self.step_count += 1;
        self.step_count
    }

    /// One parameter update at the current step count.
    pub fn update(
        &mut self,
        name: &str,
        lr: f64,
        param: &mut Tensor<f32>,
        grad: &Tensor<f32>,
    ) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(CoreError::InvalidConfig(format!(
                "gradient shape {:?} does not match parameter `{name}` {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        if self.step_count == 0 {
            return Err(CoreError::InvalidConfig(
                "adam update before begin_step".into(),
            ));
        }
        let state = self.states.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(param.shape().to_vec()),
            v: Tensor::zeros(param.shape().to_vec()),
        });
        if state.m.shape() != param.shape() {
            return Err(CoreError::InvalidConfig(format!(
                "optimizer state for `{name}` has shape {:?}, parameter is {:?}",
                state.m.shape(),
                param.shape()
            )));
        }
        let t = self.step_count;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let wd = self.cfg.weight_decay;
        let eps = self.cfg.epsilon;
        let corr1 = 1.0 - b1.powi(t as i32);
        let corr2 = 1.0 - b2.powi(t as i32);
        let p = param.data_mut();
        let m = state.m.data_mut();
        let v = state.v.data_mut();
        // Arithmetic in f64, state stored in f32. The stored (rounded) moments
        // feed the update so a checkpoint restore continues bit-identically.
        for i in 0..p.len() {
            let g = grad.data()[i] as f64 + wd * p[i] as f64;
            m[i] = (b1 * m[i] as f64 + (1.0 - b1) * g) as f32;
            v[i] = (b2 * v[i] as f64 + (1.0 - b2) * g * g) as f32;
            let m_hat = m[i] as f64 / corr1;
            let v_hat = v[i] as f64 / corr2;
            p[i] = (p[i] as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
        Ok(())
    }

    /// State tensors for checkpointing, name-sorted, as
    /// `opt.m.<param>` / `opt.v.<param>` pairs.
    pub fn export_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::with_capacity(self.states.len() * 2);
        for (name, s) in &self.states {
            out.push((format!("opt.m.{name}"), &s.m));
            out.push((format!("opt.v.{name}"), &s.v));
        }
        out
    }

    /// Restore state from checkpoint tensors + the recorded step count.
    pub fn import(
        &mut self,
        step_count: u64,
        tensors: &[(String, Tensor<f32>)],
    ) -> Result<()> {
        self.step_count = step_count;
        self.states.clear();
        let mut halves: BTreeMap<String, (Option<Tensor<f32>>, Option<Tensor<f32>>)> =
            BTreeMap::new();
        for (name, t) in tensors {
            if let Some(p) = name.strip_prefix("opt.m.") {
                halves.entry(p.to_string()).or_default().0 = Some(t.clone());
            } else if let Some(p) = name.strip_prefix("opt.v.") {
                halves.entry(p.to_string()).or_default().1 = Some(t.clone());
            }
        }
        for (name, (m, v)) in halves {
            match (m, v) {
                (Some(m), Some(v)) if m.shape() == v.shape() => {
                    self.states.insert(name, Moments { m, v });
                }
                _ => {
                    return Err(CoreError::CheckpointMeta(format!(
                        "optimizer state for `{name}` is incomplete or mismatched"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Piecewise-constant schedule: at iteration `i` (1-based), the rate is the
/// value of the largest milestone strictly below `i`, else the base rate.
/// So `{70000: 1e-5}` keeps the base rate through iteration 70000 and
/// switches at 70001.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    /// (iteration, rate), sorted ascending by iteration.
    pub milestones: Vec<(u64, f64)>,
}

impl LrSchedule {
    pub fn new(base: f64, mut milestones: Vec<(u64, f64)>) -> Result<Self> {
        if !(base > 0.0) || !base.is_finite() {
            return Err(CoreError::InvalidConfig(format!(
                "base learning rate must be positive, got {base}"
            )));
        }
        milestones.sort_by_key(|&(i, _)| i);
        for w in milestones.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(CoreError::InvalidConfig(format!(
                    "duplicate learning-rate milestone at iteration {}",
                    w[0].0
                )));
            }
        }
        if let Some(&(_, r)) = milestones.iter().find(|&&(_, r)| !(r > 0.0) || !r.is_finite()) {
            return Err(CoreError::InvalidConfig(format!(
                "milestone learning rate must be positive, got {r}"
            )));
        }
        Ok(Self { base, milestones })
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        let mut lr = self.base;
        for &(at, rate) in &self.milestones {
            if at < iteration {
                lr = rate;
            } else {
                break;
            }
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor<f32> {
        Tensor::scalar(v)
    }

    #[test]
    fn zero_grad_zero_decay_is_a_no_op() {
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        let mut p = scalar(0.75);
        opt.begin_step();
        opt.update("w", 1e-3, &mut p, &scalar(0.0)).unwrap();
        assert_eq!(p.data()[0], 0.75);
    }

    /// With constant unit gradient, the bias-corrected first step moves by
    /// exactly -lr / (1 + eps) (m-hat = v-hat = 1).
    #[test]
    fn first_step_is_minus_lr() {
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        let mut p = scalar(0.0);
        opt.begin_step();
        opt.update("w", 1e-2, &mut p, &scalar(1.0)).unwrap();
        assert!(
            (p.data()[0] as f64 + 1e-2).abs() <= 1e-8,
            "first step: {}",
            p.data()[0]
        );
    }

    #[test]
    fn trajectories_are_bitwise_reproducible() {
        let run = || {
            let mut opt = Adam::new(AdamConfig {
                weight_decay: 5e-4,
                ..Default::default()
            })
            .unwrap();
            let mut p = Tensor::new(vec![3], vec![0.5f32, -0.25, 1.0]).unwrap();
            for i in 0..25 {
                opt.begin_step();
                let g = Tensor::new(vec![3], vec![0.1 * (i as f32 - 10.0), 0.02, -0.3]).unwrap();
                opt.update("w", 1e-3, &mut p, &g).unwrap();
            }
            p.data().iter().map(|v| v.to_bits()).collect::<Vec<u32>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 0.1,
            ..Default::default()
        })
        .unwrap();
        let mut p = scalar(1.0);
        for _ in 0..50 {
            opt.begin_step();
            opt.update("w", 1e-2, &mut p, &scalar(0.0)).unwrap();
        }
        assert!(p.data()[0] < 1.0 && p.data()[0] > 0.0);
    }

    #[test]
    fn state_roundtrips_through_export_import() {
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        let mut p = scalar(0.4);
        for _ in 0..5 {
            opt.begin_step();
            opt.update("w", 1e-3, &mut p, &scalar(0.7)).unwrap();
        }
        let exported: Vec<(String, Tensor<f32>)> = opt
            .export_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let mut opt2 = Adam::new(AdamConfig::default()).unwrap();
        opt2.import(opt.step_count(), &exported).unwrap();

        // both must now produce identical updates
        let mut pa = scalar(0.4);
        let mut pb = scalar(0.4);
        opt.begin_step();
        opt2.begin_step();
        opt.update("w", 1e-3, &mut pa, &scalar(0.7)).unwrap();
        opt2.update("w", 1e-3, &mut pb, &scalar(0.7)).unwrap();
        assert_eq!(pa.data()[0].to_bits(), pb.data()[0].to_bits());
    }

    #[test]
    fn schedule_switches_after_the_milestone() {
        let s = LrSchedule::new(1e-4, vec![(70_000, 1e-5)]).unwrap();
        assert_eq!(s.lr_at(1), 1e-4);
        assert_eq!(s.lr_at(70_000), 1e-4);
        assert_eq!(s.lr_at(70_001), 1e-5);
        let two = LrSchedule::new(1e-4, vec![(200, 1e-5), (100, 5e-5)]).unwrap();
        assert_eq!(two.lr_at(150), 5e-5);
        assert_eq!(two.lr_at(201), 1e-5);
    }

    #[test]
    fn duplicate_milestones_are_rejected() {
        assert!(LrSchedule::new(1e-4, vec![(100, 1e-5), (100, 2e-5)]).is_err());
    }
}
