//! Adam optimizer over a [`ParamRegistry`].
//!
//! Moment buffers are keyed by parameter name and created lazily, so the same
//! state object keeps working when the trainable set never changes mid-run
//! (which it does not, anywhere in this crate). Frozen parameters are skipped
//! entirely: their bytes are bit-identical before and after a step.

use indexmap::IndexMap;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::ParamRegistry;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Default)]
pub struct AdamState {
    step: u64,
    first: IndexMap<String, Array2<f64>>,
    second: IndexMap<String, Array2<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Apply one bias-corrected Adam update to every trainable parameter that has
/// a gradient. Parameters without a gradient (not on any path to the loss
/// this step) and frozen parameters are left untouched.
pub fn adam_step(registry: &mut ParamRegistry, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if cfg.lr <= 0.0 {
        return Err(Error::Config(format!(
            "Adam learning rate must be > 0, got {}",
            cfg.lr
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for p in registry.iter_mut() {
        if !p.trainable() {
            continue;
        }
        let Some(grad) = p.grad() else { continue };
        let grad = grad.clone();
        let name = p.name().to_string();

        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(grad.dim()));
        *m *= cfg.beta1;
        *m += &(&grad * (1.0 - cfg.beta1));
        let m_hat = &*m / bc1;

        let v = state
            .second
            .entry(name)
            .or_insert_with(|| Array2::zeros(grad.dim()));
        *v *= cfg.beta2;
        *v += &(&grad.mapv(|g| g * g) * (1.0 - cfg.beta2));
        let v_hat = v.mapv(|x| (x / bc2).sqrt());

        let values = p.values_mut();
        ndarray::Zip::from(values)
            .and(&m_hat)
            .and(&v_hat)
            .for_each(|w, &m, &v| *w -= cfg.lr * m / (v + cfg.eps));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    use crate::tensor::ParamTensor;

    #[test]
    fn rejects_non_positive_lr() {
        let mut reg = ParamRegistry::new(0);
        let mut state = AdamState::new();
        let err = adam_step(&mut reg, &mut state, &AdamConfig::new(0.0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zero_grad_changes_nothing() {
        let mut reg = ParamRegistry::new(0);
        reg.add_weight("w", 2, 2).unwrap();
        let before = reg.get("w").unwrap().values().clone();
        let mut state = AdamState::new();
        adam_step(&mut reg, &mut state, &AdamConfig::new(0.1)).unwrap();
        assert_eq!(reg.get("w").unwrap().values(), &before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction, the first update is lr·g/(|g|+eps) ≈ lr.
        let mut reg = ParamRegistry::new(0);
        reg.insert(ParamTensor::new("w", vec![1, 1], array![[1.0]]).unwrap())
            .unwrap();
        reg.get_mut("w")
            .unwrap()
            .accumulate_grad(&array![[0.5]])
            .unwrap();
        let mut state = AdamState::new();
        adam_step(&mut reg, &mut state, &AdamConfig::new(0.1)).unwrap();
        assert_abs_diff_eq!(reg.get("w").unwrap().values()[[0, 0]], 0.9, epsilon = 1e-7);
    }

    #[test]
    fn frozen_param_is_bit_identical_even_with_grad() {
        let mut reg = ParamRegistry::new(0);
        reg.add_weight("frozen.w", 2, 2).unwrap();
        reg.set_trainable_where(|_| false);
        reg.get_mut("frozen.w")
            .unwrap()
            .accumulate_grad(&array![[1.0, 1.0], [1.0, 1.0]])
            .unwrap();
        let before: Vec<u64> = reg
            .get("frozen.w")
            .unwrap()
            .values()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let mut state = AdamState::new();
        adam_step(&mut reg, &mut state, &AdamConfig::new(0.1)).unwrap();
        let after: Vec<u64> = reg
            .get("frozen.w")
            .unwrap()
            .values()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn repeated_steps_shrink_toward_minimum() {
        // Minimize (w-2)^2 by hand-fed gradients 2(w-2).
        let mut reg = ParamRegistry::new(0);
        reg.insert(ParamTensor::new("w", vec![1, 1], array![[10.0]]).unwrap())
            .unwrap();
        let mut state = AdamState::new();
        let cfg = AdamConfig::new(0.5);
        for _ in 0..200 {
            reg.zero_grads();
            let w = reg.get("w").unwrap().values()[[0, 0]];
            reg.get_mut("w")
                .unwrap()
                .accumulate_grad(&array![[2.0 * (w - 2.0)]])
                .unwrap();
            adam_step(&mut reg, &mut state, &cfg).unwrap();
        }
        let w = reg.get("w").unwrap().values()[[0, 0]];
        assert!((w - 2.0).abs() < 0.1, "w = {w}");
    }
}
