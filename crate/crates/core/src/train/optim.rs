use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const DEFAULT_MOMENTUM: f64 = 0.98;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-6;
pub const DEFAULT_LR: f64 = 1e-2;
pub const DEFAULT_LR_MIN: f64 = 6e-6;

/// SGD with classic momentum and coupled weight decay.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar = f32> {
    pub velocity: BTreeMap<String, Vec<T>>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
}

impl<T: Scalar> Default for OptimizerState<T> {
    fn default() -> Self {
        Self::new(DEFAULT_LR, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY)
    }
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: BTreeMap::new(),
            momentum,
            weight_decay,
            lr,
        }
    }
}

/// One update of every trainable parameter holding a gradient:
/// `v = mu v + g + wd p`, then `p = p - lr v`.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>) -> Result<()> {
    let (mu, wd, lr) = (T::of(state.momentum), T::of(state.weight_decay), T::of(state.lr));
    for (name, p) in store.iter_mut() {
        if !p.requires_grad() {
            continue;
        }
        let Some(grad) = p.grad().map(<[T]>::to_vec) else {
            continue;
        };
        let v = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); grad.len()]);
        if v.len() != grad.len() {
            return Err(Error::ParameterShape {
                name: name.to_string(),
                expected: vec![v.len()],
                found: p.shape().to_vec(),
            });
        }
        for ((v, g), w) in v.iter_mut().zip(&grad).zip(p.data_mut()) {
            *v = mu * *v + *g + wd * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}

/// Cosine decay from `lr_init` to `lr_min` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr_init: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr_init: DEFAULT_LR,
            lr_min: DEFAULT_LR_MIN,
            total_steps: 1,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        cosine_lr(step, self)
    }
}

/// `lr_min + (lr_init - lr_min) (1 + cos(pi t / T)) / 2`, held at `lr_min`
/// past the end.
pub fn cosine_lr(step: usize, sched: &LrSchedule) -> f64 {
    if sched.total_steps == 0 || step >= sched.total_steps {
        return sched.lr_min;
    }
    let t = step as f64 / sched.total_steps as f64;
    sched.lr_min + 0.5 * (sched.lr_init - sched.lr_min) * (1.0 + (PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(p: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::default();
        let mut t = Tensor::new(vec![1], vec![p]).unwrap().with_grad(true);
        t.accumulate_grad(&[g]).unwrap();
        s.insert("w", t);
        s
    }

    #[test]
    fn plain_gradient_descent_without_momentum() {
        let mut s = store(1.0, 0.5);
        let mut st = OptimizerState::new(0.1, 0.0, 0.0);
        sgd_step(&mut s, &mut st).unwrap();
        assert!((s.get("w").unwrap().data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut s = store(0.3, 7.0);
        let mut st = OptimizerState::new(0.0, 0.9, 1e-2);
        sgd_step(&mut s, &mut st).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 0.3);
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let mut s = store(2.0, 0.0);
        let mut st = OptimizerState::new(0.1, 0.5, 0.1);
        let mut last = 2.0f64;
        for _ in 0..5 {
            sgd_step(&mut s, &mut st).unwrap();
            let now = s.get("w").unwrap().data()[0];
            assert!(now.abs() < last.abs());
            last = now;
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule {
            total_steps: 100,
            ..LrSchedule::default()
        };
        assert_eq!(s.lr(0), 1e-2);
        assert_eq!(s.lr(100), 6e-6);
        assert!((s.lr(50) - (1e-2 + 6e-6) / 2.0).abs() < 1e-15);
    }
}
