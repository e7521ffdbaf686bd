//! Mini-batch training of the question-answering model with per-epoch
//! validation, best-model tracking and resumable state.

use std::collections::BTreeMap;
use std::ops::ControlFlow;

use crate::config::KeyValues;
use crate::decoder::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::index::Hit;
use crate::model::QaModel;
use crate::nn::{Graph, Mode, ParamStore, Tensor};
use crate::prompting::{prepare_prompt, DynamicPromptConfig, PromptTemplate, QaItem};
use crate::rng::{mix_seed, SeededRng};
use crate::signal::EcgRecord;

use super::ablation::Ablation;
use super::optim::{adamw_step, cosine_warmup_lr, AdamState, AdamWConfig};

const TAG_EPOCH: u64 = 0x45;
const TAG_DROPOUT: u64 = 0x44;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optim: AdamWConfig,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Overrides `epochs × steps per epoch` when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: AdamWConfig::default(),
            warmup_ratio: 0.1,
            epochs: 5,
            batch_size: 32,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        let ok = self.batch_size > 0
            && o.lr > 0.0
            && (0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2)
            && o.eps > 0.0
            && o.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.warmup_ratio)
            && (self.epochs > 0 || self.max_steps.is_some_and(|s| s > 0));
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("invalid training configuration"))
        }
    }

    pub fn steps_per_epoch(&self, n_items: usize) -> usize {
        n_items.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_items: usize) -> usize {
        self.max_steps.unwrap_or(self.epochs * self.steps_per_epoch(n_items))
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("train.lr", self.optim.lr);
        kv.set("train.beta1", self.optim.beta1);
        kv.set("train.beta2", self.optim.beta2);
        kv.set("train.eps", self.optim.eps);
        kv.set("train.weight_decay", self.optim.weight_decay);
        kv.set("train.warmup_ratio", self.warmup_ratio);
        kv.set("train.epochs", self.epochs);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.max_steps", self.max_steps.unwrap_or(0));
        kv.set("seed", self.seed);
    }

    /// `train.max_steps = 0` means no override.
    pub fn with_kv(mut self, kv: &KeyValues) -> Result<Self> {
        self.optim.lr = kv.get_or("train.lr", self.optim.lr)?;
        self.optim.beta1 = kv.get_or("train.beta1", self.optim.beta1)?;
        self.optim.beta2 = kv.get_or("train.beta2", self.optim.beta2)?;
        self.optim.eps = kv.get_or("train.eps", self.optim.eps)?;
        self.optim.weight_decay = kv.get_or("train.weight_decay", self.optim.weight_decay)?;
        self.warmup_ratio = kv.get_or("train.warmup_ratio", self.warmup_ratio)?;
        self.epochs = kv.get_or("train.epochs", self.epochs)?;
        self.batch_size = kv.get_or("train.batch_size", self.batch_size)?;
        let max: usize = kv.get_or("train.max_steps", self.max_steps.unwrap_or(0))?;
        self.max_steps = (max > 0).then_some(max);
        self.seed = kv.get_or("seed", self.seed)?;
        self.validate()?;
        Ok(self)
    }
}

/// Training and validation items with the records and retrieval hits they
/// refer to.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub items: &'a [QaItem],
    pub val: &'a [QaItem],
    pub records: &'a BTreeMap<String, EcgRecord>,
    pub hits: &'a BTreeMap<String, Vec<Hit>>,
}

impl<'a> TrainData<'a> {
    fn record(&self, item: &QaItem) -> Result<&'a EcgRecord> {
        self.records
            .get(&item.ecg_ref)
            .ok_or_else(|| Error::invalid(format!("unknown ecg_ref {:?}", item.ecg_ref)))
    }

    fn hits(&self, item: &QaItem) -> &'a [Hit] {
        self.hits.get(&item.ecg_ref).map_or(&[], Vec::as_slice)
    }
}

/// One row of the training log, written at the end of every epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f32,
    pub val_loss: f32,
}

pub const CSV_HEADER: &str = "step,lr,train_loss,val_loss";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!("{},{:e},{},{}", self.step, self.lr, self.train_loss, self.val_loss)
    }
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Everything needed to continue an interrupted run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: AdamState<f32>,
    /// Optimizer steps completed.
    pub step: usize,
    pub best_val: Option<f32>,
    /// Mean loss of the very first batch, before any update.
    pub first_loss: Option<f32>,
}

impl Default for TrainState {
    fn default() -> Self {
        Self {
            adam: AdamState::new(),
            step: 0,
            best_val: None,
            first_loss: None,
        }
    }
}

impl TrainState {
    /// Parameters plus optimizer moments and counters, for the resumable
    /// checkpoint.
    pub fn to_tensors(&self, store: &ParamStore<f32>) -> BTreeMap<String, Tensor<f32>> {
        let mut out: BTreeMap<String, Tensor<f32>> = store.iter().map(|(n, p)| (n.clone(), p.value.clone())).collect();
        for (n, m) in &self.adam.m {
            out.insert(format!("optim.m.{n}"), m.clone());
        }
        for (n, v) in &self.adam.v {
            out.insert(format!("optim.v.{n}"), v.clone());
        }
        let opt = |v: Option<f32>| v.map_or_else(|| Tensor::zeros(&[0]), Tensor::scalar);
        out.insert(
            "train.counters".into(),
            Tensor::new(vec![2], vec![self.adam.step as f32, self.step as f32]).expect("two counters"),
        );
        out.insert("train.best_val".into(), opt(self.best_val));
        out.insert("train.first_loss".into(), opt(self.first_loss));
        out
    }

    /// Inverse of [`TrainState::to_tensors`]; parameter values are written
    /// into `store`, which must already hold every parameter.
    pub fn from_tensors(store: &mut ParamStore<f32>, mut t: BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let missing = |n: &str| Error::format(format!("checkpoint lacks {n}"));
        let counters = t.remove("train.counters").ok_or_else(|| missing("train.counters"))?;
        if counters.len() != 2 {
            return Err(Error::format("bad training counters"));
        }
        let mut opt = |n: &str| -> Result<Option<f32>> {
            let v = t.remove(n).ok_or_else(|| missing(n))?;
            Ok(v.data().first().copied())
        };
        let best_val = opt("train.best_val")?;
        let first_loss = opt("train.first_loss")?;
        let mut adam = AdamState::new();
        adam.step = counters.data()[0] as u64;
        for (name, v) in t {
            if let Some(n) = name.strip_prefix("optim.m.") {
                adam.m.insert(n.to_string(), v);
            } else if let Some(n) = name.strip_prefix("optim.v.") {
                adam.v.insert(n.to_string(), v);
            } else {
                let p = store
                    .get_mut(&name)
                    .map_err(|_| Error::format(format!("unexpected tensor {name}")))?;
                if p.value.shape() != v.shape() {
                    return Err(Error::format(format!("shape mismatch for {name}")));
                }
                p.value = v;
            }
        }
        Ok(Self {
            adam,
            step: counters.data()[1] as usize,
            best_val,
            first_loss,
        })
    }
}

/// Copy parameter values from a checkpoint into `store`. Every parameter of
/// `store` must be present with the same shape.
pub fn load_params(store: &mut ParamStore<f32>, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    for (name, p) in store.iter_mut() {
        let v = tensors.get(name).ok_or_else(|| Error::format(format!("checkpoint lacks {name}")))?;
        if v.shape() != p.value.shape() {
            return Err(Error::format(format!("shape mismatch for {name}")));
        }
        p.value = v.clone();
    }
    Ok(())
}

pub fn params_to_tensors(store: &ParamStore<f32>) -> BTreeMap<String, Tensor<f32>> {
    store.iter().map(|(n, p)| (n.clone(), p.value.clone())).collect()
}

/// Passed to the epoch callback.
pub struct EpochEnd<'s> {
    pub epoch: usize,
    pub row: LogRow,
    pub improved: bool,
    pub store: &'s ParamStore<f32>,
    pub state: &'s TrainState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub rows: Vec<LogRow>,
    pub steps: usize,
    pub stopped_early: bool,
}

pub struct Trainer<'a> {
    pub model: &'a QaModel,
    pub tokenizer: &'a Tokenizer,
    pub template: &'a PromptTemplate,
    pub cfg: TrainConfig,
    pub ablation: Ablation,
}

impl Trainer<'_> {
    /// Prompt and answer token ids for `item` under `dp`.
    pub fn encode_item(&self, item: &QaItem, hits: &[Hit], dp: &DynamicPromptConfig) -> Result<(Vec<usize>, Vec<usize>)> {
        let prompt = prepare_prompt(item, hits, dp, self.template)?;
        Ok((self.tokenizer.encode(&prompt.text), self.tokenizer.encode(&item.answer_text())))
    }

    /// Mean answer loss over `items` in evaluation mode.
    pub fn mean_loss(&self, store: &ParamStore<f32>, data: &TrainData, items: &[QaItem]) -> Result<f32> {
        if items.is_empty() {
            return Err(Error::invalid("no items to score"));
        }
        let dp = self.ablation.eval_prompting();
        let mut prefixes: BTreeMap<&str, Tensor<f32>> = BTreeMap::new();
        let mut total = 0f64;
        for item in items {
            if !prefixes.contains_key(item.ecg_ref.as_str()) {
                let p = self.model.prefix_tensor(store, data.record(item)?)?;
                prefixes.insert(&item.ecg_ref, p);
            }
            let (prompt, answer) = self.encode_item(item, data.hits(item), &dp)?;
            let g = Graph::new();
            let prefix = g.constant(prefixes[item.ecg_ref.as_str()].clone());
            let loss = self
                .model
                .answer_loss_from_prefix(&g, store, prefix, &prompt, &answer, &mut Mode::eval())?;
            total += g.value(loss).data()[0] as f64;
        }
        Ok((total / items.len() as f64) as f32)
    }

    fn batch_indices(&self, n: usize, step: usize) -> Vec<usize> {
        let spe = self.cfg.steps_per_epoch(n);
        let epoch = step / spe;
        let mut order: Vec<usize> = (0..n).collect();
        SeededRng::new(mix_seed(self.cfg.seed, &[TAG_EPOCH, epoch as u64])).shuffle(&mut order);
        let start = (step % spe) * self.cfg.batch_size;
        order[start..(start + self.cfg.batch_size).min(n)].to_vec()
    }

    /// Loss of one batch with gradients accumulated into `store`. Items on
    /// the same record share one graph and one encoder pass.
    fn batch_step(&self, store: &mut ParamStore<f32>, data: &TrainData, step: usize) -> Result<f32> {
        let batch = self.batch_indices(data.items.len(), step);
        let scale = 1.0 / batch.len() as f32;
        let base_dp = self.ablation.train_prompting(self.cfg.seed);
        let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
        for &i in &batch {
            let r = data.items[i].ecg_ref.as_str();
            match groups.iter_mut().find(|(g, _)| *g == r) {
                Some((_, v)) => v.push(i),
                None => groups.push((r, vec![i])),
            }
        }
        store.zero_grads();
        let mut total = 0f64;
        for (_, idx) in &groups {
            let rec = data.record(&data.items[idx[0]])?;
            self.model.encoder.check_input(rec)?;
            let g = Graph::new();
            let x = g.constant(rec.to_tensor());
            let prefix = self.model.prefix(&g, store, x)?;
            let mut sum = None;
            for &i in idx {
                let item = &data.items[i];
                let dp = if base_dp.shuffle || base_dp.report_choice == crate::prompting::ReportChoice::RandomOfThree {
                    base_dp.for_step(self.cfg.seed, i as u64, step as u64)
                } else {
                    base_dp
                };
                let (prompt, answer) = self.encode_item(item, data.hits(item), &dp)?;
                let mut mode = Mode::train(mix_seed(self.cfg.seed, &[TAG_DROPOUT, step as u64, i as u64]));
                let loss = self.model.answer_loss_from_prefix(&g, store, prefix, &prompt, &answer, &mut mode)?;
                total += g.value(loss).data()[0] as f64;
                let scaled = g.scale(loss, scale);
                sum = Some(match sum {
                    Some(acc) => g.add(acc, scaled)?,
                    None => scaled,
                });
            }
            let grads = g.backward(sum.expect("groups are non-empty"))?;
            store.accumulate(&g, &grads)?;
        }
        Ok((total / batch.len() as f64) as f32)
    }

    /// Train from `state.step` to the configured total. `on_epoch` runs after
    /// every epoch's validation and may stop the run.
    pub fn run(
        &self,
        store: &mut ParamStore<f32>,
        state: &mut TrainState,
        data: &TrainData,
        on_epoch: &mut dyn FnMut(&EpochEnd) -> Result<ControlFlow<()>>,
    ) -> Result<TrainSummary> {
        self.cfg.validate()?;
        if data.items.is_empty() {
            return Err(Error::invalid("no training items"));
        }
        self.ablation.apply_trainable(store);
        let n = data.items.len();
        let spe = self.cfg.steps_per_epoch(n);
        let total = self.cfg.total_steps(n);
        let mut rows = Vec::new();
        let mut epoch_losses = Vec::new();
        while state.step < total {
            let step = state.step;
            let lr = cosine_warmup_lr(step, total, self.cfg.warmup_ratio, self.cfg.optim.lr)?;
            let loss = self.batch_step(store, data, step)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("loss became {loss} at step {step}")));
            }
            if step == 0 {
                state.first_loss = Some(loss);
            }
            epoch_losses.push(loss as f64);
            adamw_step(store, &mut state.adam, &self.cfg.optim, lr)?;
            state.step += 1;
            if state.step.is_multiple_of(spe) || state.step == total {
                let train_loss = (epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64) as f32;
                epoch_losses.clear();
                let val_loss = if data.val.is_empty() {
                    train_loss
                } else {
                    self.mean_loss(store, data, data.val)?
                };
                let improved = state.best_val.is_none_or(|b| val_loss < b);
                if improved {
                    state.best_val = Some(val_loss);
                }
                let row = LogRow {
                    step: state.step,
                    lr,
                    train_loss,
                    val_loss,
                };
                rows.push(row);
                let end = EpochEnd {
                    epoch: (state.step - 1) / spe,
                    row,
                    improved,
                    store,
                    state,
                };
                if on_epoch(&end)?.is_break() {
                    return Ok(TrainSummary {
                        rows,
                        steps: state.step,
                        stopped_early: state.step < total,
                    });
                }
            }
        }
        Ok(TrainSummary {
            rows,
            steps: state.step,
            stopped_early: false,
        })
    }
}
