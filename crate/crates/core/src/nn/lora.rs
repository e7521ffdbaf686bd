//! Low-rank adapters on top of frozen linear layers.
//!
//! `y = x·W + b + (alpha / r) · dropout(x)·A·B`, with `A: [in×r]` drawn from a
//! Gaussian and `B: [r×out]` starting at zero, so an adapter is the identity
//! perturbation until trained. The base `W`, `b` are never marked trainable by
//! the training loop.

use super::graph::{Graph, Var};
use super::layers::Mode;
use super::params::{Init, ParamSpec, ParamStore};
use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Standard deviation of the Gaussian initialisation of `A`.
    pub a_init_std: f64,
}

impl LoraConfig {
    /// Rank 8, alpha 32, dropout 0.1.
    pub fn standard() -> Self {
        Self {
            rank: 8,
            alpha: 32.0,
            dropout: 0.1,
            a_init_std: 0.1,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::invalid("LoRA rank must be at least 1"));
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::invalid("LoRA alpha must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("LoRA dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

pub fn is_lora_param(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

pub fn lora_specs(prefix: &str, d_in: usize, d_out: usize, cfg: &LoraConfig) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.lora_a"), &[d_in, cfg.rank], Init::Normal(cfg.a_init_std)),
        ParamSpec::new(format!("{prefix}.lora_b"), &[cfg.rank, d_out], Init::Zeros),
    ]
}

/// Adapted projection reading `{prefix}.weight`, `{prefix}.bias`,
/// `{prefix}.lora_a` and `{prefix}.lora_b` from the store.
pub fn lora_linear<T: Scalar>(g: &Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var, cfg: &LoraConfig, mode: &mut Mode) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let a = g.param(store, &format!("{prefix}.lora_a"))?;
    let bb = g.param(store, &format!("{prefix}.lora_b"))?;
    let base = g.matmul(x, w)?;
    let base = g.add_bias(base, b)?;
    let xd = match mode.dropout_rng() {
        Some(rng) => g.dropout(x, cfg.dropout, rng)?,
        None => x,
    };
    let low = g.matmul(xd, a)?;
    let delta = g.matmul(low, bb)?;
    let delta = g.scale(delta, T::from_f64(cfg.scale()));
    g.add(base, delta)
}
