use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::spec::ParamVector;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One Adam update with decoupled weight decay.
///
/// Parameters are first shrunk by `1 - lr * weight_decay`, then moved by the
/// bias-corrected Adam direction. Per-element math runs in f64; parameters
/// and moments are stored back as f32.
pub fn adam_step(
    params: &ParamVector,
    grad: &ParamVector,
    state: &AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(ParamVector, AdamState)> {
    params.check_compatible(grad)?;
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::SpecMismatch(format!(
            "optimizer state of length {} for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    if !(lr >= 0.0 && weight_decay >= 0.0) {
        return Err(Error::InvalidConfig(format!("lr {lr} and weight decay {weight_decay} must be >= 0")));
    }
    let step = state.step + 1;
    let bc1 = 1.0 - BETA1.powi(step as i32);
    let bc2 = 1.0 - BETA2.powi(step as i32);
    let shrink = 1.0 - lr * weight_decay;
    let n = params.len();
    let mut values = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let g = grad.values[i] as f64;
        let mi = BETA1 * state.m[i] as f64 + (1.0 - BETA1) * g;
        let vi = BETA2 * state.v[i] as f64 + (1.0 - BETA2) * g * g;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        let p = params.values[i] as f64 * shrink - lr * m_hat / (v_hat.sqrt() + EPSILON);
        values.push(p as f32);
        m.push(mi as f32);
        v.push(vi as f32);
    }
    Ok((
        ParamVector {
            values,
            spec_hash: params.spec_hash,
        },
        AdamState { m, v, step },
    ))
}

/// Step decay: `base_lr * decay_factor^floor(round / decay_every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: u32,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 1e-4,
            decay_factor: 0.5,
            decay_every: 100,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) || self.decay_every == 0 {
            return Err(Error::InvalidConfig(format!("invalid lr schedule {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, round: u32) -> f64 {
        self.base_lr * self.decay_factor.powi((round / self.decay_every) as i32)
    }

    pub fn scaled(&self, factor: f64) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr * factor,
            ..*self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(values: Vec<f32>) -> ParamVector {
        ParamVector { values, spec_hash: [0; 32] }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let p = pv(vec![0.5, -1.25, 3.0]);
        let (q, s) = adam_step(&p, &pv(vec![0.0; 3]), &AdamState::new(3), 1e-3, 0.0).unwrap();
        assert_eq!(q, p);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [0.37f32, -2.5, 1e-3] {
            let (q, _) = adam_step(&pv(vec![1.0]), &pv(vec![g]), &AdamState::new(1), 1e-2, 0.0).unwrap();
            let moved = 1.0 - q.values[0] as f64;
            assert!((moved - 1e-2 * (g as f64).signum()).abs() < 1e-6, "{moved}");
        }
    }

    #[test]
    fn weight_decay_shrinks_before_update() {
        let (q, _) = adam_step(&pv(vec![2.0]), &pv(vec![0.0]), &AdamState::new(1), 0.1, 0.5).unwrap();
        assert!((q.values[0] - 2.0 * 0.95).abs() < 1e-7);
    }

    #[test]
    fn length_mismatch() {
        let err = adam_step(&pv(vec![1.0; 2]), &pv(vec![0.0; 3]), &AdamState::new(2), 0.1, 0.0);
        assert!(matches!(err, Err(Error::SpecMismatch(_))));
        let err = adam_step(&pv(vec![1.0; 2]), &pv(vec![0.0; 2]), &AdamState::new(3), 0.1, 0.0);
        assert!(matches!(err, Err(Error::SpecMismatch(_))));
    }

    #[test]
    fn schedule_examples() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 1e-4);
        assert!((s.lr_at(100) - 5e-5).abs() < 1e-20);
        assert!((s.lr_at(299) - 2.5e-5).abs() < 1e-20);
        assert_eq!(s.lr_at(99), 1e-4);
    }

    proptest! {
        #[test]
        fn schedule_is_non_increasing(factor in 0.01f64..=1.0, every in 1u32..50, t in 0u32..1000) {
            let s = LrSchedule { base_lr: 1e-3, decay_factor: factor, decay_every: every };
            prop_assert!(s.lr_at(t + 1) <= s.lr_at(t));
        }

        #[test]
        fn second_moment_stays_non_negative(gs in proptest::collection::vec(-10f32..10.0, 1..20)) {
            let mut p = pv(vec![0.0]);
            let mut st = AdamState::new(1);
            for g in gs {
                let (np, ns) = adam_step(&p, &pv(vec![g]), &st, 1e-3, 1e-5).unwrap();
                prop_assert!(ns.v[0] >= 0.0);
                p = np;
                st = ns;
            }
        }
    }
}
