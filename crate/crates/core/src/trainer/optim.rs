//! Warmup/inverse-square-root learning-rate schedule and AdamW.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Params, Tensor};
use crate::trainer::TrainConfig;

/// `peak · sqrt(warmup) · min(step^-1/2, step · warmup^-3/2)`.
///
/// Rises linearly to `peak` at `step == warmup`, then decays as
/// `step^-1/2`. Steps are 1-based; step 0 is treated as step 1. Each branch
/// is evaluated in the reduced form (`step / warmup`, `sqrt(warmup / step)`)
/// so the peak is hit exactly.
pub fn noam_lr(step: u64, peak_lr: f64, warmup_steps: u64) -> f64 {
    let step = step.max(1);
    let (s, w) = (step as f64, warmup_steps as f64);
    if step <= warmup_steps {
        peak_lr * (s / w)
    } else {
        peak_lr * (w / s).sqrt()
    }
}

pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    noam_lr(step, cfg.peak_lr, cfg.warmup_steps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWParams {
    fn from(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// First/second moment estimates and the shared step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let zeros: Params = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update with decoupled weight decay. Parameters without a
/// gradient entry are left untouched.
pub fn adamw_step(params: &mut Params, grads: &Params, state: &mut AdamState, lr: f64, hp: AdamWParams) -> Result<()> {
    let t = state.step + 1;
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::SchemaError(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape != g.shape {
            return Err(Error::SchemaError(format!(
                "gradient shape {:?} differs from parameter `{name}` shape {:?}",
                g.shape, p.shape
            )));
        }
        if g.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: name.clone(),
                step: t,
            });
        }
    }

    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&g.shape));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&g.shape));
        for i in 0..g.data.len() {
            let gi = g.data[i];
            m.data[i] = hp.beta1 * m.data[i] + (1.0 - hp.beta1) * gi;
            v.data[i] = hp.beta2 * v.data[i] + (1.0 - hp.beta2) * gi * gi;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            let theta = p.data[i];
            p.data[i] = theta - lr * (m_hat / (v_hat.sqrt() + hp.eps)) - lr * hp.weight_decay * theta;
        }
    }
    state.step = t;
    Ok(())
}

pub fn global_norm(grads: &Params) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            t.data.iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Params {
        let mut p = Params::new();
        p.insert("theta".into(), Tensor::from_vec(&[1], vec![v]).unwrap());
        p
    }

    const HP: AdamWParams = AdamWParams {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };

    #[test]
    fn schedule_fixed_point_and_first_step() {
        assert_eq!(noam_lr(15000, 1e-4, 15000), 1e-4);
        let first = noam_lr(1, 1e-4, 15000);
        assert!((first - 1e-4 / 15000.0).abs() < 1e-20);
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut p = scalar(0.7);
        let mut s = AdamState::new(&p);
        for _ in 0..5 {
            adamw_step(&mut p, &scalar(0.0), &mut s, 0.1, HP).unwrap();
        }
        assert_eq!(p, scalar(0.7));
        assert_eq!(s.step, 5);
    }

    #[test]
    fn first_step_hand_value() {
        let mut p = scalar(1.0);
        let mut s = AdamState::new(&p);
        adamw_step(&mut p, &scalar(1.0), &mut s, 0.1, HP).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p["theta"].data[0] - expected).abs() <= 1e-12);
    }

    #[test]
    fn decoupled_decay_uses_old_theta() {
        let hp = AdamWParams {
            weight_decay: 0.1,
            ..HP
        };
        let mut p = scalar(2.0);
        let mut s = AdamState::new(&p);
        adamw_step(&mut p, &scalar(0.0), &mut s, 0.5, hp).unwrap();
        assert!((p["theta"].data[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() <= 1e-15);
    }

    #[test]
    fn non_finite_gradient() {
        let mut p = scalar(1.0);
        let mut s = AdamState::new(&p);
        let err = adamw_step(&mut p, &scalar(f64::NAN), &mut s, 0.1, HP).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { step: 1, .. }));
        assert_eq!(p, scalar(1.0));
    }

    #[test]
    fn clipping() {
        let mut g = Params::new();
        g.insert("a".into(), Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        assert_eq!(clip_grad_norm(&mut g, 10.0), global_norm(&g));
    }
}
