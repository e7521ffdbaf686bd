//! Parameterised building blocks composed from graph primitives.
//!
//! Parameters are looked up by name in a [`ParamStore`]; each block has a
//! matching `*_specs` function listing the names, shapes and initialisers it
//! expects under a prefix.

use super::graph::{Graph, Var};
use super::lora::{lora_linear, lora_specs, LoraConfig};
use super::params::{Init, ParamSpec, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const NORM_EPS: f64 = 1e-5;

/// Training mode carries the dropout generator; evaluation disables dropout.
#[derive(Debug)]
pub struct Mode {
    rng: Option<SeededRng>,
}

impl Mode {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            rng: Some(SeededRng::new(seed)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout_rng(&mut self) -> Option<&mut SeededRng> {
        self.rng.as_mut()
    }
}

pub fn linear_specs(prefix: &str, d_in: usize, d_out: usize, std: f64) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), &[d_in, d_out], Init::Normal(std)),
        ParamSpec::new(format!("{prefix}.bias"), &[d_out], Init::Zeros),
    ]
}

/// `x · W + b` with `W: [in×out]` stored as `{prefix}.weight`.
pub fn linear<T: Scalar>(g: &Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

pub fn layer_norm_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gamma"), &[d], Init::Ones),
        ParamSpec::new(format!("{prefix}.beta"), &[d], Init::Zeros),
    ]
}

pub fn layer_norm<T: Scalar>(g: &Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, NORM_EPS)
}

/// Attention and block options shared by the encoder, mapper and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub heads: usize,
    pub causal: bool,
    /// Low-rank adapters on the query and value projections.
    pub lora: Option<LoraConfig>,
}

impl BlockConfig {
    pub fn new(d_model: usize, heads: usize) -> Self {
        Self {
            d_model,
            heads,
            causal: false,
            lora: None,
        }
    }

    pub fn hidden(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "model width {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

pub const LORA_TARGETS: [&str; 2] = ["q", "v"];

pub fn attention_specs(prefix: &str, cfg: &BlockConfig, std: f64) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut specs = Vec::new();
    for proj in ["q", "k", "v", "o"] {
        let p = format!("{prefix}.{proj}");
        specs.extend(linear_specs(&p, d, d, std));
        if let Some(lora) = &cfg.lora {
            if LORA_TARGETS.contains(&proj) {
                specs.extend(lora_specs(&p, d, d, lora));
            }
        }
    }
    specs
}

fn projection<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    proj: &str,
    x: Var,
    cfg: &BlockConfig,
    mode: &mut Mode,
) -> Result<Var> {
    let p = format!("{prefix}.{proj}");
    match &cfg.lora {
        Some(lora) if LORA_TARGETS.contains(&proj) => lora_linear(g, store, &p, x, lora, mode),
        _ => linear(g, store, &p, x),
    }
}

/// Multi-head self-attention with scale `1/√(d/H)`, concatenated heads and an
/// output projection.
pub fn multi_head_attention<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    cfg: &BlockConfig,
    mode: &mut Mode,
) -> Result<Var> {
    cfg.validate()?;
    let q = projection(g, store, prefix, "q", x, cfg, mode)?;
    let k = projection(g, store, prefix, "k", x, cfg, mode)?;
    let v = projection(g, store, prefix, "v", x, cfg, mode)?;
    let a = g.attention(q, k, v, cfg.heads, cfg.causal)?;
    projection(g, store, prefix, "o", a, cfg, mode)
}

pub fn transformer_layer_specs(prefix: &str, cfg: &BlockConfig, std: f64) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut specs = layer_norm_specs(&format!("{prefix}.ln1"), d);
    specs.extend(attention_specs(&format!("{prefix}.attn"), cfg, std));
    specs.extend(layer_norm_specs(&format!("{prefix}.ln2"), d));
    specs.extend(linear_specs(&format!("{prefix}.mlp.fc1"), d, cfg.hidden(), std));
    specs.extend(linear_specs(&format!("{prefix}.mlp.fc2"), cfg.hidden(), d, std));
    specs
}

/// Pre-norm block: `h = x + MHA(LN(x))`, `y = h + W₂·GELU(W₁·LN(h))`.
pub fn transformer_layer<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    cfg: &BlockConfig,
    mode: &mut Mode,
) -> Result<Var> {
    let n1 = layer_norm(g, store, &format!("{prefix}.ln1"), x)?;
    let a = multi_head_attention(g, store, &format!("{prefix}.attn"), n1, cfg, mode)?;
    let h = g.add(x, a)?;
    let n2 = layer_norm(g, store, &format!("{prefix}.ln2"), h)?;
    let f1 = linear(g, store, &format!("{prefix}.mlp.fc1"), n2)?;
    let f1 = g.gelu(f1);
    let f2 = linear(g, store, &format!("{prefix}.mlp.fc2"), f1)?;
    g.add(h, f2)
}

/// Sinusoidal position table `[S×d]`: column `2i` holds
/// `sin(pos / 10000^(2i/d))`, column `2i+1` the matching cosine.
pub fn sinusoidal_positions<T: Scalar>(s: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::invalid(format!("positional width {d} must be even and positive")));
    }
    if s == 0 {
        return Err(Error::invalid("positional table needs at least one position"));
    }
    let div: Vec<f64> = (0..d / 2).map(|i| 10000f64.powf(2.0 * i as f64 / d as f64)).collect();
    let mut data = vec![T::zero(); s * d];
    for pos in 0..s {
        for (i, &dv) in div.iter().enumerate() {
            let (sin, cos) = (pos as f64 / dv).sin_cos();
            data[pos * d + 2 * i] = T::from_f64(sin);
            data[pos * d + 2 * i + 1] = T::from_f64(cos);
        }
    }
    Tensor::new(vec![s, d], data)
}
