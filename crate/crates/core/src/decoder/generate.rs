//! Greedy autoregressive decoding.

use super::model::{fuse, Decoder};
use super::tokenizer::EOS_ID;
use crate::error::{Error, Result};
use crate::nn::{Graph, Mode, ParamStore, Scalar, Tensor};

/// Index of the largest value; the smallest index wins ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Extend `prompt_ids` one argmax token at a time until `<eos>` or
/// `max_tokens` new tokens. Returns the new tokens without the `<eos>`.
pub fn greedy<T: Scalar, D: Decoder>(
    decoder: &D,
    store: &ParamStore<T>,
    prefix: Option<&Tensor<T>>,
    prompt_ids: &[usize],
    max_tokens: usize,
) -> Result<Vec<usize>> {
    if max_tokens == 0 {
        return Err(Error::invalid("max_tokens must be at least 1"));
    }
    if prompt_ids.is_empty() && prefix.is_none() {
        return Err(Error::invalid("generation needs a prefix or a prompt"));
    }
    let mut ids = prompt_ids.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_tokens {
        let g = Graph::new();
        let mut seq = prefix.map(|p| g.constant(p.clone()));
        if !ids.is_empty() {
            let toks = decoder.embed_tokens(&g, store, &ids)?;
            seq = Some(match seq {
                Some(p) => fuse(&g, p, toks)?,
                None => toks,
            });
        }
        let seq = seq.expect("prefix or prompt is present");
        let h = decoder.hidden(&g, store, seq, &mut Mode::eval())?;
        let last = g.shape(h)[0] - 1;
        let h_last = g.slice_rows(h, last, 1)?;
        let logits = decoder.head(&g, store, h_last)?;
        let next = argmax(g.value(logits).data());
        if next == EOS_ID {
            break;
        }
        out.push(next);
        ids.push(next);
    }
    Ok(out)
}
