//! The assembled question-answering model: encoder, prefix mapper and
//! decoder sharing one parameter store.

use crate::config::KeyValues;
use crate::decoder::generate::greedy;
use crate::decoder::model::{fuse, Decoder, ToyDecoder, ToyDecoderConfig};
use crate::decoder::tokenizer::EOS_ID;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::mapper::{Mapper, MapperConfig, MapperVariant};
use crate::nn::lora::is_lora_param;
use crate::nn::{Graph, Mode, ParamSpec, ParamStore, Scalar, Tensor, Var};
use crate::rng::{mix_seed, SeededRng};
use crate::signal::EcgRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub mapper: MapperConfig,
    pub decoder: ToyDecoderConfig,
}

impl ModelConfig {
    pub fn toy(vocab: usize) -> Self {
        let encoder = EncoderConfig::toy();
        let decoder = ToyDecoderConfig::toy(vocab);
        let mapper = MapperConfig::new(encoder.d_out, decoder.d_model);
        Self { encoder, mapper, decoder }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.mapper.validate()?;
        self.decoder.validate()?;
        if self.mapper.d_in != self.encoder.d_out {
            return Err(Error::invalid("mapper input width must equal the encoder output width"));
        }
        if self.encoder.d_prime != self.decoder.d_model || self.mapper.d_prime != self.decoder.d_model {
            return Err(Error::invalid("d′ must equal the decoder width"));
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        self.encoder.to_kv(kv);
        self.mapper.to_kv(kv);
        self.decoder.to_kv(kv);
    }

    /// Defaults of the `model.preset` encoder (`toy` unless set to
    /// `full-scale`) and the toy decoder, overridden by `kv`. `d′` follows
    /// the decoder width.
    pub fn from_kv(kv: &KeyValues, vocab: usize) -> Result<Self> {
        let decoder = ToyDecoderConfig::toy(vocab).with_kv(kv)?;
        let mut encoder = match kv.raw("model.preset").unwrap_or("toy") {
            "toy" => EncoderConfig::toy(),
            "full-scale" => EncoderConfig::full_scale(),
            other => return Err(Error::invalid(format!("unknown model.preset {other:?}"))),
        };
        encoder.d_prime = decoder.d_model;
        let encoder = encoder.with_kv(kv)?;
        let mapper = MapperConfig::new(encoder.d_out, decoder.d_model).with_kv(kv)?;
        let cfg = Self { encoder, mapper, decoder };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameter groups, each initialised from its own sub-seed so that e.g.
/// the encoder weights depend only on the global seed and encoder config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    LeadPositional,
    Mapper,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Encoder,
        ParamGroup::LeadPositional,
        ParamGroup::Mapper,
        ParamGroup::Decoder,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder.",
            ParamGroup::LeadPositional => "lead_pos.",
            ParamGroup::Mapper => "mapper.",
            ParamGroup::Decoder => "decoder.",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Debug)]
pub struct QaModel<D: Decoder = ToyDecoder> {
    pub encoder: Encoder,
    pub mapper: Mapper,
    pub decoder: D,
    pub variant: MapperVariant,
}

impl QaModel<ToyDecoder> {
    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: Encoder::new(cfg.encoder.clone())?,
            mapper: Mapper::new(cfg.mapper.clone())?,
            decoder: ToyDecoder::new(cfg.decoder.clone())?,
            variant: MapperVariant::Full,
        })
    }
}

impl<D: Decoder> QaModel<D> {
    pub fn group_specs(&self, group: ParamGroup) -> Vec<ParamSpec> {
        match group {
            ParamGroup::Encoder => self.encoder.config().specs(),
            ParamGroup::LeadPositional => self.encoder.config().lead_specs(),
            ParamGroup::Mapper => self.mapper.config().specs(),
            ParamGroup::Decoder => self.decoder.specs(),
        }
    }

    pub fn init_group<T: Scalar>(&self, store: &mut ParamStore<T>, group: ParamGroup, seed: u64) {
        let mut rng = SeededRng::new(mix_seed(seed, &[group.tag()]));
        store.init_from_specs(&self.group_specs(group), &mut rng);
    }

    /// Fresh parameters. Everything is trainable except the decoder's base
    /// weights; decoder adapters stay trainable.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for group in ParamGroup::ALL {
            self.init_group(&mut store, group, seed);
        }
        store.set_trainable_where(|n| n.starts_with("decoder.") && !is_lora_param(n), false);
        store
    }

    /// Encoder weights alone, as used when building the retrieval index.
    pub fn init_encoder_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.init_group(&mut store, ParamGroup::Encoder, seed);
        store
    }

    /// `x: [12×T]` → `z_prefix: [12×d′]`.
    pub fn prefix<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let z = self.encoder.encode_graph(g, store, x)?;
        let p = self.encoder.lead_positional_graph(g, store, x)?;
        self.mapper.forward(g, store, z, p, self.variant)
    }

    pub fn prefix_tensor<T: Scalar>(&self, store: &ParamStore<T>, rec: &EcgRecord) -> Result<Tensor<T>> {
        self.encoder.check_input(rec)?;
        let g = Graph::new();
        let x = g.constant(rec.to_tensor());
        let p = self.prefix(&g, store, x)?;
        let v = g.value(p).clone();
        Ok(v)
    }

    /// Mean cross-entropy of `answer_ids` followed by `<eos>`, given the ECG
    /// prefix and the prompt. Prefix and prompt positions are unsupervised.
    pub fn answer_loss<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        prompt_ids: &[usize],
        answer_ids: &[usize],
        mode: &mut Mode,
    ) -> Result<Var> {
        let prefix = self.prefix(g, store, x)?;
        self.answer_loss_from_prefix(g, store, prefix, prompt_ids, answer_ids, mode)
    }

    /// [`Self::answer_loss`] for an already computed prefix, so several
    /// questions on one record can share the encoder pass.
    pub fn answer_loss_from_prefix<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        prefix: Var,
        prompt_ids: &[usize],
        answer_ids: &[usize],
        mode: &mut Mode,
    ) -> Result<Var> {
        if prompt_ids.is_empty() {
            return Err(Error::invalid("prompt is empty"));
        }
        let mut input = prompt_ids.to_vec();
        input.extend_from_slice(answer_ids);
        let mut targets = answer_ids.to_vec();
        targets.push(EOS_ID);
        let toks = self.decoder.embed_tokens(g, store, &input)?;
        let fused = fuse(g, prefix, toks)?;
        let h = self.decoder.hidden(g, store, fused, mode)?;
        // Row of the last prompt token predicts the first answer token.
        let rows = g.shape(h)[0];
        let tail = g.slice_rows(h, rows - targets.len(), targets.len())?;
        let logits = self.decoder.head(g, store, tail)?;
        g.cross_entropy(logits, &targets, usize::MAX)
    }

    pub fn generate<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        rec: &EcgRecord,
        prompt_ids: &[usize],
        max_tokens: usize,
    ) -> Result<Vec<usize>> {
        let prefix = self.prefix_tensor(store, rec)?;
        greedy(&self.decoder, store, Some(&prefix), prompt_ids, max_tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(len: usize) -> EcgRecord {
        let mut r = SeededRng::new(2);
        EcgRecord::new(500, (0..12).map(|_| (0..len).map(|_| r.normal() as f32).collect()).collect()).unwrap()
    }

    #[test]
    fn init_loss_is_near_uniform() {
        let model = QaModel::from_config(&ModelConfig::toy(200)).unwrap();
        let store = model.init_params::<f32>(7);
        let rec = record(1000);
        let g = Graph::new();
        let x = g.constant(rec.to_tensor());
        let prompt: Vec<usize> = (3..40).collect();
        let loss = model.answer_loss(&g, &store, x, &prompt, &[50, 60, 70], &mut Mode::eval()).unwrap();
        let l = g.value(loss).data()[0] as f64;
        let ln_v = 200f64.ln();
        assert!((l - ln_v).abs() < 0.1 * ln_v, "loss {l} vs ln V {ln_v}");
    }

    #[test]
    fn gradient_reaches_mapper() {
        let model = QaModel::from_config(&ModelConfig::toy(50)).unwrap();
        let mut store = model.init_params::<f32>(1);
        let rec = record(600);
        let g = Graph::new();
        let x = g.constant(rec.to_tensor());
        let loss = model.answer_loss(&g, &store, x, &[3, 4, 5], &[6], &mut Mode::train(3)).unwrap();
        let grads = g.backward(loss).unwrap();
        store.accumulate(&g, &grads).unwrap();
        let norm: f32 = store.get_mut("mapper.proj.weight").unwrap().grad.data().iter().map(|v| v * v).sum();
        assert!(norm > 0.0);
        assert!(!store.param("decoder.embed").unwrap().trainable);
        assert!(store.param("decoder.layer0.attn.q.lora_b").unwrap().trainable);
    }

    #[test]
    fn encoder_init_matches_full_init() {
        let model = QaModel::from_config(&ModelConfig::toy(50)).unwrap();
        let full = model.init_params::<f32>(9);
        let enc = model.init_encoder_params::<f32>(9);
        for (name, p) in enc.iter() {
            assert_eq!(p.value, full.param(name).unwrap().value);
        }
    }
}
