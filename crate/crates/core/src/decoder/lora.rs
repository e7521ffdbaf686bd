//! Standalone adapted linear layer over plain tensors.

use crate::error::{Error, Result};
use crate::nn::lora::LoraConfig;
use crate::nn::{Graph, Tensor};
use crate::rng::SeededRng;

/// `y = x·W + b + (alpha / r) · dropout(x)·A·B` with `W` frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub base_w: Tensor<f32>,
    pub bias: Option<Tensor<f32>>,
    pub a: Tensor<f32>,
    pub b: Tensor<f32>,
    pub alpha: f64,
    pub rank: usize,
    pub dropout: f64,
}

impl LoraLayer {
    /// `A` from `N(0, cfg.a_init_std²)`, `B` zero.
    pub fn new(base_w: Tensor<f32>, bias: Option<Tensor<f32>>, cfg: &LoraConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let (d_in, d_out) = base_w.dims2()?;
        let a = (0..d_in * cfg.rank).map(|_| (rng.normal() * cfg.a_init_std) as f32).collect();
        Ok(Self {
            base_w,
            bias,
            a: Tensor::new(vec![d_in, cfg.rank], a)?,
            b: Tensor::zeros(&[cfg.rank, d_out]),
            alpha: cfg.alpha,
            rank: cfg.rank,
            dropout: cfg.dropout,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Dropout on the adapter input applies only when `train_rng` is given.
    pub fn forward(&self, x: &Tensor<f32>, train_rng: Option<&mut SeededRng>) -> Result<Tensor<f32>> {
        let (_, d_in) = x.dims2()?;
        if self.a.shape() != [d_in, self.rank] || self.b.shape()[0] != self.rank {
            return Err(Error::shape("adapter shapes do not match the input"));
        }
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let mut y = g.matmul(xv, g.constant(self.base_w.clone()))?;
        if let Some(b) = &self.bias {
            y = g.add_bias(y, g.constant(b.clone()))?;
        }
        let xd = match train_rng {
            Some(rng) => g.dropout(xv, self.dropout, rng)?,
            None => xv,
        };
        let low = g.matmul(xd, g.constant(self.a.clone()))?;
        let delta = g.matmul(low, g.constant(self.b.clone()))?;
        let delta = g.scale(delta, self.scale() as f32);
        let out = g.add(y, delta)?;
        let v = g.value(out).clone();
        Ok(v)
    }
}
