//! Decoder contract and the toy causal transformer that implements it.

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::nn::layers::{
    layer_norm, layer_norm_specs, linear, linear_specs, sinusoidal_positions, transformer_layer, transformer_layer_specs,
};
use crate::nn::{BlockConfig, Graph, Init, LoraConfig, Mode, ParamSpec, ParamStore, Scalar, Tensor, Var};

/// An autoregressive decoder over a fused sequence of prefix rows and token
/// embeddings.
pub trait Decoder {
    /// Embedding width `d′`.
    fn width(&self) -> usize;

    fn vocab_size(&self) -> usize;

    fn specs(&self) -> Vec<ParamSpec>;

    /// Token embeddings `[l×d′]`.
    fn embed_tokens<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, ids: &[usize]) -> Result<Var>;

    /// Causal hidden states `[S×d′]` for a fused input `[S×d′]`.
    fn hidden<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, fused: Var, mode: &mut Mode) -> Result<Var>;

    /// Vocabulary logits for hidden rows.
    fn head<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, hidden: Var) -> Result<Var>;
}

/// Prefix rows followed by token rows.
pub fn fuse<T: Scalar>(g: &Graph<T>, prefix: Var, tokens: Var) -> Result<Var> {
    let (pw, tw) = (g.shape(prefix), g.shape(tokens));
    if pw.len() != 2 || tw.len() != 2 || pw[1] != tw[1] {
        return Err(Error::shape(format!("cannot fuse prefix {pw:?} with tokens {tw:?}")));
    }
    g.concat_rows(&[prefix, tokens])
}

/// Tensor form of [`fuse`].
pub fn fuse_tensors<T: Scalar>(prefix: &Tensor<T>, tokens: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let out = fuse(&g, g.constant(prefix.clone()), g.constant(tokens.clone()))?;
    let v = g.value(out).clone();
    Ok(v)
}

/// Full-sequence logits and the mean cross-entropy over rows whose target is
/// not `ignore_index`.
pub fn decode_forward<T: Scalar, D: Decoder>(
    decoder: &D,
    g: &Graph<T>,
    store: &ParamStore<T>,
    fused: Var,
    targets: &[usize],
    ignore_index: usize,
    mode: &mut Mode,
) -> Result<(Var, Var)> {
    let h = decoder.hidden(g, store, fused, mode)?;
    let logits = decoder.head(g, store, h)?;
    let loss = g.cross_entropy(logits, targets, ignore_index)?;
    Ok((logits, loss))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDecoderConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub lora: Option<LoraConfig>,
    pub embed_std: f64,
    pub head_std: f64,
    /// Multiplier on the sinusoidal position rows.
    pub pos_scale: f64,
    /// Layer norm before the output head.
    pub final_norm: bool,
}

impl ToyDecoderConfig {
    /// Two layers, four heads, width 64, rank-8 adapters. The base decoder is
    /// random and frozen, so the scales are tuned for adapter learnability:
    /// small token and position rows beside the ECG prefix, no final norm
    /// before the head, and a wide `A` initialisation.
    pub fn toy(vocab: usize) -> Self {
        Self {
            vocab,
            d_model: 64,
            layers: 2,
            heads: 4,
            lora: Some(LoraConfig {
                a_init_std: 2.0,
                ..LoraConfig::standard()
            }),
            embed_std: 0.125,
            head_std: 0.07,
            pos_scale: 0.1,
            final_norm: false,
        }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            causal: true,
            lora: self.lora.clone(),
            ..BlockConfig::new(self.d_model, self.heads)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 || self.layers == 0 || !self.d_model.is_multiple_of(2) {
            return Err(Error::invalid("decoder needs vocab ≥ 4, ≥ 1 layer and an even width"));
        }
        if let Some(l) = &self.lora {
            l.validate()?;
        }
        self.block().validate()
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("decoder.d_model", self.d_model);
        kv.set("decoder.layers", self.layers);
        kv.set("decoder.heads", self.heads);
        kv.set("decoder.embed_std", self.embed_std);
        kv.set("decoder.head_std", self.head_std);
        kv.set("decoder.pos_scale", self.pos_scale);
        kv.set("decoder.final_norm", self.final_norm);
        match &self.lora {
            Some(l) => {
                kv.set("lora.rank", l.rank);
                kv.set("lora.alpha", l.alpha);
                kv.set("lora.dropout", l.dropout);
                kv.set("lora.a_init_std", l.a_init_std);
            }
            None => kv.set("lora.rank", 0),
        }
    }

    pub fn with_kv(mut self, kv: &KeyValues) -> Result<Self> {
        self.d_model = kv.get_or("decoder.d_model", self.d_model)?;
        self.layers = kv.get_or("decoder.layers", self.layers)?;
        self.heads = kv.get_or("decoder.heads", self.heads)?;
        self.embed_std = kv.get_or("decoder.embed_std", self.embed_std)?;
        self.head_std = kv.get_or("decoder.head_std", self.head_std)?;
        self.pos_scale = kv.get_or("decoder.pos_scale", self.pos_scale)?;
        self.final_norm = kv.get_or("decoder.final_norm", self.final_norm)?;
        let base = self.lora.clone().unwrap_or_else(LoraConfig::standard);
        let rank: usize = kv.get_or("lora.rank", self.lora.as_ref().map_or(0, |l| l.rank))?;
        self.lora = if rank == 0 {
            None
        } else {
            Some(LoraConfig {
                rank,
                alpha: kv.get_or("lora.alpha", base.alpha)?,
                dropout: kv.get_or("lora.dropout", base.dropout)?,
                a_init_std: kv.get_or("lora.a_init_std", base.a_init_std)?,
            })
        };
        self.validate()?;
        Ok(self)
    }
}

/// Pre-norm causal transformer with sinusoidal positions, a final layer norm
/// and an untied output head. Projections are initialised with standard
/// deviation `1/√fan_in` so the frozen base is well conditioned.
#[derive(Clone, Debug)]
pub struct ToyDecoder {
    cfg: ToyDecoderConfig,
}

impl ToyDecoder {
    pub fn new(cfg: ToyDecoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ToyDecoderConfig {
        &self.cfg
    }
}

impl Decoder for ToyDecoder {
    fn width(&self) -> usize {
        self.cfg.d_model
    }

    fn vocab_size(&self) -> usize {
        self.cfg.vocab
    }

    fn specs(&self) -> Vec<ParamSpec> {
        let d = self.cfg.d_model;
        let block = self.cfg.block();
        let mut specs = vec![ParamSpec::new(
            "decoder.embed",
            &[self.cfg.vocab, d],
            Init::Normal(self.cfg.embed_std),
        )];
        for l in 0..self.cfg.layers {
            for mut s in transformer_layer_specs(&format!("decoder.layer{l}"), &block, 0.0) {
                if s.name.ends_with(".weight") {
                    s.init = Init::Normal(1.0 / (s.shape[0] as f64).sqrt());
                }
                specs.push(s);
            }
        }
        if self.cfg.final_norm {
            specs.extend(layer_norm_specs("decoder.ln_f", d));
        }
        specs.extend(linear_specs("decoder.head", d, self.cfg.vocab, self.cfg.head_std));
        specs
    }

    fn embed_tokens<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, ids: &[usize]) -> Result<Var> {
        let table = g.param(store, "decoder.embed")?;
        g.embedding(table, ids)
    }

    fn hidden<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, fused: Var, mode: &mut Mode) -> Result<Var> {
        let shape = g.shape(fused);
        if shape.len() != 2 || shape[1] != self.cfg.d_model {
            return Err(Error::shape(format!("decoder expects width {}, got {shape:?}", self.cfg.d_model)));
        }
        let pos = sinusoidal_positions::<T>(shape[0], self.cfg.d_model)?;
        let scale = T::from_f64(self.cfg.pos_scale);
        let pos = g.constant(pos.map(|v| v * scale));
        let mut h = g.add(fused, pos)?;
        let block = self.cfg.block();
        for l in 0..self.cfg.layers {
            h = transformer_layer(g, store, &format!("decoder.layer{l}"), h, &block, mode)?;
        }
        if self.cfg.final_norm {
            h = layer_norm(g, store, "decoder.ln_f", h)?;
        }
        Ok(h)
    }

    fn head<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, hidden: Var) -> Result<Var> {
        linear(g, store, "decoder.head", hidden)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn setup(lora: bool) -> (ToyDecoder, ParamStore<f64>) {
        let mut cfg = ToyDecoderConfig::toy(40);
        cfg.d_model = 16;
        if !lora {
            cfg.lora = None;
        }
        let dec = ToyDecoder::new(cfg).unwrap();
        let mut store = ParamStore::new();
        store.init_from_specs(&dec.specs(), &mut SeededRng::new(5));
        (dec, store)
    }

    #[test]
    fn fuse_shapes() {
        let p = Tensor::<f64>::full(&[12, 4], 1.0);
        let t = Tensor::<f64>::full(&[5, 4], 2.0);
        let f = fuse_tensors(&p, &t).unwrap();
        assert_eq!(f.shape(), &[17, 4]);
        assert_eq!(&f.data()[..48], p.data());
        assert_eq!(&f.data()[48..], t.data());
        assert!(matches!(fuse_tensors(&p, &Tensor::zeros(&[5, 3])), Err(Error::Shape(_))));
    }

    #[test]
    fn logits_shape() {
        let (dec, store) = setup(true);
        let g = Graph::new();
        let prefix = g.constant(Tensor::full(&[12, 16], 0.1));
        let toks = dec.embed_tokens(&g, &store, &[3, 4, 5]).unwrap();
        let fused = fuse(&g, prefix, toks).unwrap();
        let targets = vec![usize::MAX; 15];
        let (logits, loss) = decode_forward(&dec, &g, &store, fused, &targets, usize::MAX, &mut Mode::eval()).unwrap();
        assert_eq!(g.shape(logits), vec![15, 40]);
        assert_eq!(g.value(loss).data()[0], 0.0);
    }

    #[test]
    fn causal_rows_ignore_the_future() {
        let (dec, store) = setup(true);
        let mut r = SeededRng::new(8);
        let base: Vec<f64> = (0..10 * 16).map(|_| r.normal()).collect();
        let run = |data: Vec<f64>| {
            let g = Graph::new();
            let x = g.constant(Tensor::new(vec![10, 16], data).unwrap());
            let h = dec.hidden(&g, &store, x, &mut Mode::eval()).unwrap();
            let l = dec.head(&g, &store, h).unwrap();
            let v = g.value(l).clone();
            v
        };
        let a = run(base.clone());
        let mut perturbed = base;
        for v in &mut perturbed[6 * 16..] {
            *v += 3.0;
        }
        let b = run(perturbed);
        assert_eq!(a.data()[..6 * 40], b.data()[..6 * 40]);
        assert_ne!(a.data()[6 * 40..], b.data()[6 * 40..]);
    }

    #[test]
    fn zero_adapter_matches_base_decoder() {
        let (with, store) = setup(true);
        let (without, _) = setup(false);
        let run = |d: &ToyDecoder| {
            let g = Graph::new();
            let toks = d.embed_tokens(&g, &store, &[1, 7, 9, 2]).unwrap();
            let h = d.hidden(&g, &store, toks, &mut Mode::eval()).unwrap();
            let l = d.head(&g, &store, h).unwrap();
            let v = g.value(l).clone();
            v
        };
        assert_eq!(run(&with), run(&without));
    }
}
