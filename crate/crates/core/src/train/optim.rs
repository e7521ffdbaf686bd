//! AdamW with decoupled weight decay and the cosine schedule with linear
//! warmup.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter plus the number of updates taken.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One AdamW update of every trainable parameter using its accumulated
/// gradient and learning rate `lr`. Nothing is modified if any gradient is
/// non-finite.
pub fn adamw_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &AdamWConfig, lr: f64) -> Result<()> {
    for (name, p) in store.iter() {
        if p.trainable && !p.grad.all_finite() {
            return Err(Error::Training(format!("non-finite gradient in {name}")));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one, eps) = (T::one(), T::from_f64(cfg.eps));
    let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
    let lr_t = T::from_f64(lr);
    let decay = T::one() - T::from_f64(lr * cfg.weight_decay);
    for (name, p) in store.iter_mut().filter(|(_, p)| p.trainable) {
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.value.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.value.shape()));
        let (w, g) = (p.value.data_mut(), p.grad.data());
        for i in 0..w.len() {
            let gi = g[i];
            let mi = b1 * m.data()[i] + (one - b1) * gi;
            let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = (mi / bc1) / ((vi / bc2).sqrt() + eps);
            w[i] = w[i] * decay - lr_t * update;
        }
    }
    Ok(())
}

/// Warmup length `ceil(ratio · total)`, kept below `total` so the decay phase
/// is never empty.
pub fn warmup_steps(total: usize, ratio: f64) -> usize {
    let w = (ratio * total as f64).ceil() as usize;
    w.min(total.saturating_sub(1))
}

/// Linear ramp from 0 to `lr` over the warmup, then half a cosine down to 0
/// at `total`.
pub fn cosine_warmup_lr(step: usize, total: usize, ratio: f64, lr: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if step > total {
        return Err(Error::invalid(format!("step {step} beyond schedule of {total}")));
    }
    let warm = warmup_steps(total, ratio);
    if step < warm {
        return Ok(lr * step as f64 / warm as f64);
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    Ok(lr * 0.5 * (1.0 + (PI * progress).cos()))
}
