//! Forward-only entry points on plain tensors, for callers that do not need
//! gradients. Each runs the corresponding graph kernel on constants.

use super::graph::{softmax_scores, Graph};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

fn run<T: Scalar>(build: impl FnOnce(&Graph<T>) -> Result<super::graph::Var>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let out = build(&g)?;
    let v = g.value(out).clone();
    Ok(v)
}

/// `x·W + bias` for `x: [n×a]`, `W: [a×b]`, `bias: [b]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    run(|g| {
        let y = g.matmul(g.constant(x.clone()), g.constant(w.clone()))?;
        g.add_bias(y, g.constant(bias.clone()))
    })
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(super::graph::gelu_scalar)
}

pub fn group_norm<T: Scalar>(x: &Tensor<T>, groups: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    run(|g| {
        g.group_norm(
            g.constant(x.clone()),
            groups,
            g.constant(gamma.clone()),
            g.constant(beta.clone()),
            super::layers::NORM_EPS,
        )
    })
}

pub fn conv1d<T: Scalar>(x: &Tensor<T>, kernels: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    run(|g| {
        let b = bias.map(|b| g.constant(b.clone()));
        g.conv1d(g.constant(x.clone()), g.constant(kernels.clone()), b, stride, padding)
    })
}

/// Per-head attention weight matrices `[S×S]` for projected queries and keys.
pub fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, heads: usize, causal: bool) -> Result<Vec<Tensor<T>>> {
    let (s, d) = q.dims2()?;
    if k.shape() != q.shape() {
        return Err(Error::shape("attention_weights: query and key shapes differ"));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    (0..heads)
        .map(|h| {
            let take = |t: &Tensor<T>| -> Vec<T> { (0..s).flat_map(|i| t.row(i)[h * dh..(h + 1) * dh].to_vec()).collect() };
            Tensor::new(vec![s, s], softmax_scores(&take(q), &take(k), s, dh, scale, causal))
        })
        .collect()
}

pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize], ignore_index: usize) -> Result<T> {
    let loss = run(|g| g.cross_entropy(g.constant(logits.clone()), targets, ignore_index))?;
    Ok(loss.data()[0])
}

pub use super::layers::sinusoidal_positions;
