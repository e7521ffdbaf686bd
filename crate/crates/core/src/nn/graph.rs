//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles together
//! with a closure computing the vector–Jacobian product for each input.
//! Nodes that do not depend on a trainable leaf carry no closure, so frozen
//! sub-networks and raw inputs cost nothing during the backward pass.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::{gemm, gemm_into, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs to a backward closure.
pub struct BackwardCtx<'a, T: Scalar> {
    pub grad: &'a Tensor<T>,
    pub out: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    /// Which inputs need a gradient; closures may skip the others.
    pub needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<String, Var>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: &[usize], b: &[usize], op: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, parents: Vec<Var>, backward: Option<BackwardFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let parents: Vec<usize> = parents.into_iter().map(|p| p.0).collect();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        let backward = if requires_grad { backward } else { None };
        nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad: true,
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    /// A leaf with no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None)
    }

    /// Bind a named parameter. Trainable parameters become gradient leaves;
    /// frozen ones become constants. Repeated binds return the same node.
    pub fn param(&self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.borrow().get(name) {
            return Ok(v);
        }
        let p = store.param(name)?;
        let v = if p.trainable {
            self.leaf(p.value.clone())
        } else {
            self.constant(p.value.clone())
        };
        self.params.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter nodes bound so far, with their names.
    pub fn bound_params(&self) -> Vec<(String, Var)> {
        let mut out: Vec<_> = self.params.borrow().iter().map(|(k, &v)| (k.clone(), v)).collect();
        out.sort();
        out
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                needs: node.parents.iter().map(|&p| nodes[p].requires_grad).collect(),
            };
            let parent_grads = bw(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    // ----------------------------------------------------------------- ops

    /// `a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, out) = {
            let av = self.value(a);
            let bv = self.value(b);
            let (m, k) = av.dims2()?;
            let (k2, n) = bv.dims2()?;
            if k != k2 {
                return Err(Error::shape(format!("matmul: inner dims {:?} · {:?}", av.shape(), bv.shape())));
            }
            (m, k, n, gemm(av.data(), false, bv.data(), false, m, k, n))
        };
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(move |c| {
                let g = c.grad.data();
                let da = c.needs[0].then(|| Tensor::new(vec![m, k], gemm(g, false, c.inputs[1].data(), true, m, n, k)).unwrap());
                let db = c.needs[1].then(|| Tensor::new(vec![k, n], gemm(c.inputs[0].data(), true, g, false, k, m, n)).unwrap());
                vec![da, db]
            })),
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let av = self.value(a);
            let bv = self.value(b);
            same_shape(av.shape(), bv.shape(), "add")?;
            let mut out = av.clone();
            out.add_assign(&bv);
            out
        };
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())])),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let av = self.value(a);
            let bv = self.value(b);
            same_shape(av.shape(), bv.shape(), "mul")?;
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
            Tensor::new(av.shape().to_vec(), data)?
        };
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|c| {
                let prod = |t: &Tensor<T>| {
                    let d = c.grad.data().iter().zip(t.data()).map(|(&g, &y)| g * y).collect();
                    Tensor::new(t.shape().to_vec(), d).unwrap()
                };
                vec![c.needs[0].then(|| prod(c.inputs[1])), c.needs[1].then(|| prod(c.inputs[0]))]
            })),
        ))
    }

    /// Add a bias vector `[n]` to every row of `x: [m×n]`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (n, value) = {
            let xv = self.value(x);
            let bv = self.value(bias);
            let (_, n) = xv.dims2()?;
            if bv.len() != n || bv.rank() != 1 {
                return Err(Error::shape(format!("add_bias: bias {:?} for rows of width {n}", bv.shape())));
            }
            let mut out = xv.clone();
            for row in out.data_mut().chunks_mut(n) {
                for (o, &b) in row.iter_mut().zip(bv.data()) {
                    *o += b;
                }
            }
            (n, out)
        };
        Ok(self.push(
            value,
            vec![x, bias],
            Some(Box::new(move |c| {
                let db = c.needs[1].then(|| {
                    let mut acc = vec![T::zero(); n];
                    for row in c.grad.data().chunks(n) {
                        for (a, &g) in acc.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    Tensor::new(vec![n], acc).unwrap()
                });
                vec![Some(c.grad.clone()), db]
            })),
        ))
    }

    pub fn scale(&self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, vec![x], Some(Box::new(move |c| vec![Some(c.grad.map(|g| g * s))])))
    }

    pub fn sum(&self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(
            value,
            vec![x],
            Some(Box::new(|c| {
                let g = c.grad.data()[0];
                vec![Some(Tensor::full(c.inputs[0].shape(), g))]
            })),
        )
    }

    /// Exact GELU, `x · Φ(x)` with the Gaussian CDF evaluated through `erf`.
    pub fn gelu(&self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len());
        let mut slope = Vec::with_capacity(xv.len());
        for &v in xv.data() {
            let (y, dy) = gelu_with_slope(v);
            out.push(y);
            slope.push(dy);
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        drop(xv);
        self.push(
            value,
            vec![x],
            Some(Box::new(move |c| {
                let d = slope.iter().zip(c.grad.data()).map(|(&s, &g)| g * s).collect();
                vec![Some(Tensor::new(c.grad.shape().to_vec(), d).unwrap())]
            })),
        )
    }

    /// Row-wise layer normalisation of `x: [m×n]` with affine `gamma`, `beta`
    /// of length `n`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        self.normalize(x, gamma, beta, eps, m, 1, n, "layer_norm")
    }

    /// Group normalisation of `x: [C×T]`: the `C / groups` channels of each
    /// group share one mean and variance over all their time steps; `gamma`
    /// and `beta` are per channel.
    pub fn group_norm(&self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ch, t) = self.value(x).dims2()?;
        if groups == 0 || ch % groups != 0 {
            return Err(Error::invalid(format!(
                "group_norm: {ch} channels not divisible into {groups} groups"
            )));
        }
        self.normalize(x, gamma, beta, eps, groups, ch / groups, t, "group_norm")
    }

    /// Shared kernel: `x` viewed as `[units × per_unit_rows × width]`; each
    /// unit is standardised over all its elements. For layer norm the affine
    /// parameters index the column; for group norm they index the row.
    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        units: usize,
        rows_per_unit: usize,
        width: usize,
        op: &'static str,
    ) -> Result<Var> {
        let per_column = op == "layer_norm";
        let affine_len = if per_column { width } else { units * rows_per_unit };
        let (value, xhat, inv_std) = {
            let xv = self.value(x);
            let gv = self.value(gamma);
            let bv = self.value(beta);
            if gv.len() != affine_len || bv.len() != affine_len {
                return Err(Error::shape(format!(
                    "{op}: affine params {:?}/{:?}, expected length {affine_len}",
                    gv.shape(),
                    bv.shape()
                )));
            }
            let span = rows_per_unit * width;
            let mut xhat = vec![T::zero(); xv.len()];
            let mut inv_std = Vec::with_capacity(units);
            let nf = T::from_f64(span as f64);
            for u in 0..units {
                let seg = &xv.data()[u * span..(u + 1) * span];
                let mean = seg.iter().copied().sum::<T>() / nf;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let inv = T::one() / (var + T::from_f64(eps)).sqrt();
                inv_std.push(inv);
                for (h, &v) in xhat[u * span..(u + 1) * span].iter_mut().zip(seg) {
                    *h = (v - mean) * inv;
                }
            }
            let mut out = vec![T::zero(); xv.len()];
            for (idx, (o, &h)) in out.iter_mut().zip(&xhat).enumerate() {
                let a = if per_column { idx % width } else { idx / width };
                *o = gv.data()[a] * h + bv.data()[a];
            }
            (Tensor::new(xv.shape().to_vec(), out)?, xhat, inv_std)
        };
        Ok(self.push(
            value,
            vec![x, gamma, beta],
            Some(Box::new(move |c| {
                let g = c.grad.data();
                let gamma = c.inputs[1].data();
                let span = rows_per_unit * width;
                let affine_idx = |idx: usize| if per_column { idx % width } else { idx / width };
                let (dgamma, dbeta) = if c.needs[1] || c.needs[2] {
                    let mut dg = vec![T::zero(); affine_len];
                    let mut db = vec![T::zero(); affine_len];
                    for (idx, (&gi, &h)) in g.iter().zip(&xhat).enumerate() {
                        let a = affine_idx(idx);
                        dg[a] += gi * h;
                        db[a] += gi;
                    }
                    (
                        Some(Tensor::new(vec![affine_len], dg).unwrap()),
                        Some(Tensor::new(vec![affine_len], db).unwrap()),
                    )
                } else {
                    (None, None)
                };
                let dx = c.needs[0].then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    let nf = T::from_f64(span as f64);
                    for (u, &inv) in inv_std.iter().enumerate().take(units) {
                        let range = u * span..(u + 1) * span;
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for idx in range.clone() {
                            let d = g[idx] * gamma[affine_idx(idx)];
                            mean_d += d;
                            mean_dh += d * xhat[idx];
                        }
                        mean_d = mean_d / nf;
                        mean_dh = mean_dh / nf;
                        for idx in range {
                            let d = g[idx] * gamma[affine_idx(idx)];
                            dx[idx] = inv * (d - mean_d - xhat[idx] * mean_dh);
                        }
                    }
                    Tensor::new(c.grad.shape().to_vec(), dx).unwrap()
                });
                vec![dx, dgamma, dbeta]
            })),
        ))
    }

    /// 1-D cross-correlation of `x: [Cin×T]` with `w: [Cout×Cin×K]`, optional
    /// bias `[Cout]`, zero padding on both ends. Output `[Cout×T′]` with
    /// `T′ = ⌊(T + 2·padding − K) / stride⌋ + 1`.
    pub fn conv1d(&self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (cin, t) = self.value(x).dims2()?;
        let (cout, k) = match self.value(w).shape()[..] {
            [co, ci, k] if ci == cin => (co, k),
            ref s => return Err(Error::shape(format!("conv1d: kernel {s:?} for input with {cin} channels"))),
        };
        if stride == 0 {
            return Err(Error::invalid("conv1d: stride must be positive"));
        }
        if k > t + 2 * padding {
            return Err(Error::invalid(format!(
                "conv1d: kernel {k} larger than padded input {}",
                t + 2 * padding
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(format!("conv1d: bias {:?}, expected [{cout}]", self.value(b).shape())));
            }
        }
        let t_out = (t + 2 * padding - k) / stride + 1;
        let rows = cin * k;
        let cols = im2col(self.value(x).data(), cin, t, k, stride, padding, t_out);
        let mut out = gemm(self.value(w).data(), false, &cols, false, cout, rows, t_out);
        if let Some(b) = bias {
            let bv = self.value(b);
            for (row, &bias) in out.chunks_mut(t_out).zip(bv.data()) {
                for o in row {
                    *o += bias;
                }
            }
        }
        let value = Tensor::new(vec![cout, t_out], out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(
            value,
            parents,
            Some(Box::new(move |c| {
                let g = c.grad.data();
                let dx = c.needs[0].then(|| {
                    let dcols = gemm(c.inputs[1].data(), true, g, false, rows, cout, t_out);
                    Tensor::new(vec![cin, t], col2im(&dcols, cin, t, k, stride, padding, t_out)).unwrap()
                });
                let dw = c.needs[1].then(|| Tensor::new(vec![cout, cin, k], gemm(g, false, &cols, true, cout, t_out, rows)).unwrap());
                let mut grads = vec![dx, dw];
                if c.inputs.len() == 3 {
                    grads.push(c.needs[2].then(|| {
                        let sums = g.chunks(t_out).map(|row| row.iter().copied().sum()).collect();
                        Tensor::new(vec![cout], sums).unwrap()
                    }));
                }
                grads
            })),
        ))
    }

    /// Scaled dot-product attention over already-projected `q`, `k`, `v`
    /// (each `[S×D]`), split into `heads` column blocks. With `causal`,
    /// query `i` only sees keys `j ≤ i`.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (s, d) = self.value(q).dims2()?;
        same_shape(&self.shape(q), &self.shape(k), "attention")?;
        same_shape(&self.shape(q), &self.shape(v), "attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("attention: width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::zero(); s * d];
        let mut probs = Vec::with_capacity(heads);
        {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            for h in 0..heads {
                let qh = head_slice(qv.data(), s, d, h, dh);
                let kh = head_slice(kv.data(), s, d, h, dh);
                let vh = head_slice(vv.data(), s, d, h, dh);
                let p = softmax_scores(&qh, &kh, s, dh, scale, causal);
                let oh = gemm(&p, false, &vh, false, s, s, dh);
                scatter_head(&mut out, &oh, s, d, h, dh);
                probs.push(p);
            }
        }
        let value = Tensor::new(vec![s, d], out)?;
        Ok(self.push(
            value,
            vec![q, k, v],
            Some(Box::new(move |c| {
                let (qv, kv, vv) = (c.inputs[0].data(), c.inputs[1].data(), c.inputs[2].data());
                let mut dq = vec![T::zero(); s * d];
                let mut dk = vec![T::zero(); s * d];
                let mut dv = vec![T::zero(); s * d];
                for (h, p) in probs.iter().enumerate() {
                    let go = head_slice(c.grad.data(), s, d, h, dh);
                    let vh = head_slice(vv, s, d, h, dh);
                    if c.needs[2] {
                        scatter_head(&mut dv, &gemm(p, true, &go, false, s, s, dh), s, d, h, dh);
                    }
                    if !(c.needs[0] || c.needs[1]) {
                        continue;
                    }
                    let dp = gemm(&go, false, &vh, true, s, dh, s);
                    let mut ds = vec![T::zero(); s * s];
                    for i in 0..s {
                        let prow = &p[i * s..(i + 1) * s];
                        let drow = &dp[i * s..(i + 1) * s];
                        let dot: T = prow.iter().zip(drow).map(|(&a, &b)| a * b).sum();
                        for j in 0..s {
                            ds[i * s + j] = prow[j] * (drow[j] - dot) * scale;
                        }
                    }
                    if c.needs[0] {
                        let kh = head_slice(kv, s, d, h, dh);
                        scatter_head(&mut dq, &gemm(&ds, false, &kh, false, s, s, dh), s, d, h, dh);
                    }
                    if c.needs[1] {
                        let qh = head_slice(qv, s, d, h, dh);
                        scatter_head(&mut dk, &gemm(&ds, true, &qh, false, s, s, dh), s, d, h, dh);
                    }
                }
                let wrap = |need: bool, data: Vec<T>| need.then(|| Tensor::new(vec![s, d], data).unwrap());
                vec![wrap(c.needs[0], dq), wrap(c.needs[1], dk), wrap(c.needs[2], dv)]
            })),
        ))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose2()?;
        Ok(self.push(value, vec![x], Some(Box::new(|c| vec![Some(c.grad.transpose2().unwrap())]))))
    }

    /// Mean over rows: `[m×n] → [1×n]`.
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let value = {
            let xv = self.value(x);
            let mut acc = vec![T::zero(); n];
            for row in xv.data().chunks(n) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            let mf = T::from_f64(m as f64);
            Tensor::new(vec![1, n], acc.into_iter().map(|a| a / mf).collect())?
        };
        Ok(self.push(
            value,
            vec![x],
            Some(Box::new(move |c| {
                let mf = T::from_f64(m as f64);
                let row: Vec<T> = c.grad.data().iter().map(|&g| g / mf).collect();
                let data = (0..m).flat_map(|_| row.iter().copied()).collect();
                vec![Some(Tensor::new(vec![m, n], data).unwrap())]
            })),
        ))
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows: nothing to concatenate"));
        }
        let mut widths = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        let mut heights = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            let (r, c) = pv.dims2()?;
            widths.push(c);
            heights.push(r);
            data.extend_from_slice(pv.data());
        }
        let n = widths[0];
        if widths.iter().any(|&w| w != n) {
            return Err(Error::shape(format!("concat_rows: widths {widths:?} differ")));
        }
        let total: usize = heights.iter().sum();
        let value = Tensor::new(vec![total, n], data)?;
        Ok(self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |c| {
                let mut offset = 0;
                heights
                    .iter()
                    .zip(&c.needs)
                    .map(|(&r, &need)| {
                        let start = offset * n;
                        offset += r;
                        need.then(|| Tensor::new(vec![r, n], c.grad.data()[start..start + r * n].to_vec()).unwrap())
                    })
                    .collect()
            })),
        ))
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if len == 0 || start + len > m {
            return Err(Error::shape(format!("slice_rows: {start}..{} of {m} rows", start + len)));
        }
        let value = Tensor::new(vec![len, n], self.value(x).data()[start * n..(start + len) * n].to_vec())?;
        Ok(self.push(
            value,
            vec![x],
            Some(Box::new(move |c| {
                let mut full = vec![T::zero(); m * n];
                full[start * n..(start + len) * n].copy_from_slice(c.grad.data());
                vec![Some(Tensor::new(vec![m, n], full).unwrap())]
            })),
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(
            value,
            vec![x],
            Some(Box::new(|c| vec![Some(c.grad.clone().reshape(c.inputs[0].shape()).unwrap())])),
        ))
    }

    /// Gather rows of `table: [V×D]` by `ids`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::invalid("embedding: empty id sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!("embedding: id {bad} outside vocabulary of {vocab}")));
        }
        let value = {
            let tv = self.value(table);
            let data = ids.iter().flat_map(|&i| tv.row(i).iter().copied()).collect();
            Tensor::new(vec![ids.len(), d], data)?
        };
        let ids = ids.to_vec();
        Ok(self.push(
            value,
            vec![table],
            Some(Box::new(move |c| {
                let mut dt = vec![T::zero(); vocab * d];
                for (r, &i) in ids.iter().enumerate() {
                    for (a, &g) in dt[i * d..(i + 1) * d].iter_mut().zip(c.grad.row(r)) {
                        *a += g;
                    }
                }
                vec![Some(Tensor::new(vec![vocab, d], dt).unwrap())]
            })),
        ))
    }

    /// Mean token cross-entropy of `logits: [S×V]` against `targets` (one per
    /// row). Rows whose target equals `ignore_index` are skipped; with no
    /// supervised row the loss is zero.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let (s, v) = self.value(logits).dims2()?;
        if targets.len() != s {
            return Err(Error::shape(format!("cross_entropy: {} targets for {s} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore_index && t >= v) {
            return Err(Error::invalid(format!("cross_entropy: target {bad} outside [0, {v})")));
        }
        let (loss, probs, count) = {
            let lv = self.value(logits);
            let mut probs = vec![T::zero(); s * v];
            let mut total = T::zero();
            let mut count = 0usize;
            for (r, &t) in targets.iter().enumerate() {
                if t == ignore_index {
                    continue;
                }
                let row = lv.row(r);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                    *p = (x - max).exp();
                    z += *p;
                }
                for p in &mut probs[r * v..(r + 1) * v] {
                    *p = *p / z;
                }
                total += -(row[t] - max - z.ln());
                count += 1;
            }
            let loss = if count == 0 { T::zero() } else { total / T::from_f64(count as f64) };
            (loss, probs, count)
        };
        let targets = targets.to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            vec![logits],
            Some(Box::new(move |c| {
                let mut d = vec![T::zero(); s * v];
                if count > 0 {
                    let g = c.grad.data()[0] / T::from_f64(count as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        if t == ignore_index {
                            continue;
                        }
                        for (o, &p) in d[r * v..(r + 1) * v].iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *o = p * g;
                        }
                        d[r * v + t] = d[r * v + t] - g;
                    }
                }
                vec![Some(Tensor::new(vec![s, v], d).unwrap())]
            })),
        ))
    }

    /// Inverted dropout: keep each element with probability `1 − p` and scale
    /// survivors by `1 / (1 − p)`.
    pub fn dropout(&self, x: Var, p: f64, rng: &mut SeededRng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n).map(|_| if rng.bernoulli(p) { T::zero() } else { keep }).collect();
        let value = {
            let xv = self.value(x);
            let d = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
            Tensor::new(xv.shape().to_vec(), d)?
        };
        Ok(self.push(
            value,
            vec![x],
            Some(Box::new(move |c| {
                let d = c.grad.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                vec![Some(Tensor::new(c.grad.shape().to_vec(), d).unwrap())]
            })),
        ))
    }
}

// ------------------------------------------------------------- helpers

fn std_normal_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * std_normal_cdf(x)
}

/// `x·Φ(x)` and its derivative `Φ(x) + x·φ(x)`.
fn gelu_with_slope<T: Scalar>(x: T) -> (T, T) {
    let cdf = std_normal_cdf(x);
    let pdf = (T::from_f64(-0.5) * x * x).exp() * T::from_f64(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
    (x * cdf, cdf + x * pdf)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], cin: usize, t: usize, k: usize, stride: usize, pad: usize, t_out: usize) -> Vec<T> {
    let mut cols = vec![T::zero(); cin * k * t_out];
    for ci in 0..cin {
        let xrow = &x[ci * t..(ci + 1) * t];
        for kk in 0..k {
            let out_row = &mut cols[(ci * k + kk) * t_out..(ci * k + kk + 1) * t_out];
            for (to, o) in out_row.iter_mut().enumerate() {
                let pos = (to * stride + kk) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < t {
                    *o = xrow[pos as usize];
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], cin: usize, t: usize, k: usize, stride: usize, pad: usize, t_out: usize) -> Vec<T> {
    let mut x = vec![T::zero(); cin * t];
    for ci in 0..cin {
        for kk in 0..k {
            let row = &cols[(ci * k + kk) * t_out..(ci * k + kk + 1) * t_out];
            for (to, &g) in row.iter().enumerate() {
                let pos = (to * stride + kk) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < t {
                    x[ci * t + pos as usize] += g;
                }
            }
        }
    }
    x
}

fn head_slice<T: Scalar>(x: &[T], s: usize, d: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(s * dh);
    for i in 0..s {
        out.extend_from_slice(&x[i * d + h * dh..i * d + (h + 1) * dh]);
    }
    out
}

fn scatter_head<T: Scalar>(dst: &mut [T], src: &[T], s: usize, d: usize, h: usize, dh: usize) {
    for i in 0..s {
        for (o, &v) in dst[i * d + h * dh..i * d + (h + 1) * dh].iter_mut().zip(&src[i * dh..(i + 1) * dh]) {
            *o += v;
        }
    }
}

/// Row-softmax of `scale · q kᵀ`, masked above the diagonal when `causal`.
pub(crate) fn softmax_scores<T: Scalar>(q: &[T], k: &[T], s: usize, dh: usize, scale: T, causal: bool) -> Vec<T> {
    let mut p = vec![T::zero(); s * s];
    gemm_into(q, false, k, true, s, dh, s, T::zero(), &mut p);
    for i in 0..s {
        let visible = if causal { i + 1 } else { s };
        let row = &mut p[i * s..(i + 1) * s];
        let max = row[..visible].iter().map(|&x| x * scale).fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for x in &mut row[..visible] {
            *x = (*x * scale - max).exp();
            z += *x;
        }
        for x in &mut row[..visible] {
            *x = *x / z;
        }
        for x in &mut row[visible..] {
            *x = T::zero();
        }
    }
    p
}
