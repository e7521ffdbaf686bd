//! Index construction, retrieval, answering and evaluation on a dataset.

use std::collections::BTreeMap;

use crate::decoder::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::index::{Hit, VectorIndex};
use crate::metrics::EvalRecord;
use crate::model::QaModel;
use crate::nn::ParamStore;
use crate::prompting::{prepare_prompt, DynamicPromptConfig, PreparedPrompt, PromptTemplate, QaItem, QuestionType};
use crate::rng::SeededRng;
use crate::signal::EcgRecord;

/// Encoder embeddings of every report's record, inserted in report order.
pub fn build_index(
    model: &QaModel,
    encoder_store: &ParamStore<f32>,
    records: &BTreeMap<String, EcgRecord>,
    reports: &[(String, String)],
) -> Result<VectorIndex> {
    let mut index = VectorIndex::new(model.encoder.config().d_out)?;
    for (r, text) in reports {
        let rec = records
            .get(r)
            .ok_or_else(|| Error::invalid(format!("report refers to unknown record {r:?}")))?;
        index.add(&model.encoder.encode(encoder_store, rec)?, text.clone())?;
    }
    Ok(index)
}

/// Top-`k` hits for every record, keyed by `ecg_ref`.
pub fn retrieve_all(
    model: &QaModel,
    encoder_store: &ParamStore<f32>,
    index: &VectorIndex,
    records: &BTreeMap<String, EcgRecord>,
    k: usize,
) -> Result<BTreeMap<String, Vec<Hit>>> {
    let mut out = BTreeMap::new();
    for (r, rec) in records {
        let z = model.encoder.encode(encoder_store, rec)?;
        out.insert(r.clone(), index.search(&z, k)?);
    }
    Ok(out)
}

/// Produces an answer for a prepared prompt.
pub trait Answerer {
    fn answer(&mut self, item: &QaItem, record: &EcgRecord, prompt: &PreparedPrompt) -> Result<String>;
}

/// Greedy decoding with the trained model.
pub struct ModelAnswerer<'a> {
    pub model: &'a QaModel,
    pub store: &'a ParamStore<f32>,
    pub tokenizer: &'a Tokenizer,
    pub max_tokens: usize,
}

impl Answerer for ModelAnswerer<'_> {
    fn answer(&mut self, _item: &QaItem, record: &EcgRecord, prompt: &PreparedPrompt) -> Result<String> {
        let ids = self.tokenizer.encode(&prompt.text);
        let out = self.model.generate(self.store, record, &ids, self.max_tokens)?;
        Ok(self.tokenizer.decode(&out))
    }
}

/// Returns the gold answer; checks the evaluation plumbing end to end.
pub struct OracleAnswerer;

impl Answerer for OracleAnswerer {
    fn answer(&mut self, item: &QaItem, _record: &EcgRecord, _prompt: &PreparedPrompt) -> Result<String> {
        Ok(item.answer_text())
    }
}

/// Answer every item and pair the prediction with its gold answers.
pub fn evaluate(
    items: &[QaItem],
    records: &BTreeMap<String, EcgRecord>,
    hits: &BTreeMap<String, Vec<Hit>>,
    answerer: &mut dyn Answerer,
    dp: &DynamicPromptConfig,
    template: &PromptTemplate,
) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let rec = records
            .get(&item.ecg_ref)
            .ok_or_else(|| Error::invalid(format!("unknown ecg_ref {:?}", item.ecg_ref)))?;
        let h = hits.get(&item.ecg_ref).map_or(&[][..], Vec::as_slice);
        let prompt = prepare_prompt(item, h, dp, template)?;
        out.push(EvalRecord {
            qtype: item.qtype.as_str().to_string(),
            prediction: answerer.answer(item, rec, &prompt)?,
            gold: item.answers.clone(),
        });
    }
    Ok(out)
}

/// Seeded sample of `fraction` of the items of each question type (at
/// least one per present type), in original order.
pub fn subset(items: &[QaItem], fraction: f64, seed: u64) -> Result<Vec<QaItem>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("subset fraction must be in (0, 1]"));
    }
    let mut keep = Vec::new();
    for (t, q) in QuestionType::ALL.iter().enumerate() {
        let mut idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].qtype == *q).collect();
        if idx.is_empty() {
            continue;
        }
        let n = ((idx.len() as f64 * fraction).round() as usize).max(1);
        SeededRng::new(crate::rng::mix_seed(seed, &[t as u64])).shuffle(&mut idx);
        keep.extend_from_slice(&idx[..n]);
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| items[i].clone()).collect())
}
