//! Central-difference gradient verification.
//!
//! The numerical side never touches the backward closures: it perturbs one
//! input coordinate at a time, re-runs the forward pass and takes a
//! fourth-order central difference of the scalar output. Agreement is measured norm-wise per input tensor,
//! `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖, floor)`.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const DEFAULT_STEP: f64 = 1e-3;
const NORM_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub label: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(NORM_FLOOR)
}

fn sample_coords(n: usize, max_coords: usize, rng: &mut SeededRng) -> Vec<usize> {
    if n <= max_coords {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.truncate(max_coords);
    idx.sort_unstable();
    idx
}

/// Fourth-order central difference
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
fn central_difference(orig: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let h = DEFAULT_STEP;
    let (p2, p1) = (f(orig + 2.0 * h)?, f(orig + h)?);
    let (m1, m2) = (f(orig - h)?, f(orig - 2.0 * h)?);
    Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::shape(format!("gradient check needs a scalar output, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

/// Check gradients of `f(inputs…)` with respect to every input tensor.
/// `build` receives one leaf per input and must return a scalar.
pub fn check_inputs(
    label: &str,
    inputs: &[Tensor<f64>],
    build: impl Fn(&Graph<f64>, &[Var]) -> Result<Var>,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheck> {
    let g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&g, &leaves)?;
    let grads = g.backward(out)?;
    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let leaves: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&g, &leaves)?;
        scalar_of(&g, out)
    };
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    let mut count = 0;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic_full = grads
            .get(*leaf)
            .map(|t| t.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let coords = sample_coords(inputs[i].len(), max_coords, &mut rng);
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        let mut work = inputs.to_vec();
        for &c in &coords {
            let orig = work[i].data()[c];
            let d = central_difference(orig, |v| {
                work[i].data_mut()[c] = v;
                eval(&work)
            })?;
            work[i].data_mut()[c] = orig;
            numeric.push(d);
            analytic.push(analytic_full[c]);
        }
        count += coords.len();
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    Ok(GradCheck {
        label: label.to_string(),
        max_rel_error: worst,
        coordinates: count,
    })
}

/// Check gradients of a scalar model output with respect to the trainable
/// parameters of `store`, sampling up to `max_coords` coordinates per tensor.
pub fn check_params(
    label: &str,
    store: &ParamStore<f64>,
    build: impl Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheck> {
    let g = Graph::new();
    let out = build(&g, store)?;
    let grads = g.backward(out)?;
    let bound: std::collections::HashMap<String, Var> = g.bound_params().into_iter().collect();
    let mut rng = SeededRng::new(seed);
    let mut work = store.clone();
    let mut worst = 0.0f64;
    let mut count = 0;
    for (name, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let analytic_full = bound
            .get(name)
            .and_then(|v| grads.get(*v))
            .map(|t| t.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; p.value.len()]);
        let coords = sample_coords(p.value.len(), max_coords, &mut rng);
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = p.value.data()[c];
            let mut eval_at = |v: f64| -> Result<f64> {
                work.get_mut(name)?.value.data_mut()[c] = v;
                let g = Graph::new();
                let out = build(&g, &work)?;
                scalar_of(&g, out)
            };
            let d = central_difference(orig, &mut eval_at)?;
            eval_at(orig)?;
            numeric.push(d);
            analytic.push(analytic_full[c]);
        }
        count += coords.len();
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    Ok(GradCheck {
        label: label.to_string(),
        max_rel_error: worst,
        coordinates: count,
    })
}

/// Project a tensor output onto fixed random weights, giving a scalar whose
/// gradient exercises every output element.
pub fn random_projection(g: &Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y);
    let n: usize = shape.iter().product();
    let mut rng = SeededRng::new(seed);
    let w = Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())?;
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}
