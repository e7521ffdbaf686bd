//! ECG encoder: strided convolution stages, sinusoidal positions, a
//! transformer stack and a pooled projection to the embedding `z_e`. Also
//! computes the per-lead representation `p_e` used by the prefix mapper.

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::nn::layers::{linear, linear_specs, sinusoidal_positions, transformer_layer, transformer_layer_specs, NORM_EPS};
use crate::nn::{BlockConfig, Graph, Init, Mode, ParamSpec, ParamStore, Scalar, Tensor, Var};
use crate::signal::{EcgRecord, CANONICAL_RATE, N_LEADS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvStage {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_len(&self, t: usize) -> Option<usize> {
        (t + 2 * self.padding()).checked_sub(self.kernel).map(|v| v / self.stride + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub conv_stages: Vec<ConvStage>,
    pub groups: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Embedding width `d`.
    pub d_out: usize,
    /// Decoder width `d′` of the per-lead representation.
    pub d_prime: usize,
    pub lead_channels: usize,
    pub lead_kernel: usize,
    pub lead_stride: usize,
    pub sample_rate: u32,
    pub init_std: f64,
}

const KERNELS: [usize; 4] = [7, 5, 3, 3];
const STRIDES: [usize; 4] = [4, 2, 2, 2];

fn stages(widths: [usize; 4]) -> Vec<ConvStage> {
    (0..4).map(|i| ConvStage::new(widths[i], KERNELS[i], STRIDES[i])).collect()
}

impl EncoderConfig {
    /// Two transformer layers, `d = 32`, `d′ = 64`.
    pub fn toy() -> Self {
        Self {
            conv_stages: stages([16, 32, 32, 32]),
            groups: 4,
            n_layers: 2,
            d_model: 32,
            heads: 4,
            d_out: 32,
            d_prime: 64,
            lead_channels: 16,
            lead_kernel: 7,
            lead_stride: 4,
            sample_rate: CANONICAL_RATE,
            init_std: 0.02,
        }
    }

    /// Twelve transformer layers of width 768, `d = 768`. Used for shape and
    /// parameter-count checks only.
    pub fn full_scale() -> Self {
        Self {
            conv_stages: stages([256, 512, 768, 768]),
            groups: 32,
            n_layers: 12,
            d_model: 768,
            heads: 12,
            d_out: 768,
            d_prime: 2048,
            lead_channels: 64,
            lead_kernel: 7,
            lead_stride: 4,
            sample_rate: CANONICAL_RATE,
            init_std: 0.02,
        }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig::new(self.d_model, self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.conv_stages.is_empty() {
            return bad("encoder needs at least one convolution stage".into());
        }
        for (i, s) in self.conv_stages.iter().enumerate() {
            if s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
                return bad(format!("conv stage {i} has a zero extent"));
            }
            if self.groups == 0 || s.out_channels % self.groups != 0 {
                return bad(format!(
                    "conv stage {i}: {} channels not divisible by {} groups",
                    s.out_channels, self.groups
                ));
            }
        }
        if self.conv_stages.last().map(|s| s.out_channels) != Some(self.d_model) {
            return bad("last conv stage width must equal d_model".into());
        }
        if self.n_layers == 0 || self.d_out == 0 || self.d_prime == 0 {
            return bad("n_layers, d_out and d_prime must be positive".into());
        }
        if !self.d_model.is_multiple_of(2) {
            return bad("d_model must be even for sinusoidal positions".into());
        }
        if self.lead_channels == 0 || self.lead_kernel == 0 || self.lead_stride == 0 {
            return bad("lead-positional extents must be positive".into());
        }
        self.block().validate()
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut cin = N_LEADS;
        for (i, s) in self.conv_stages.iter().enumerate() {
            let p = format!("encoder.stage{i}");
            let std = 1.0 / ((cin * s.kernel) as f64).sqrt();
            specs.push(ParamSpec::new(
                format!("{p}.conv.weight"),
                &[s.out_channels, cin, s.kernel],
                Init::Normal(std),
            ));
            specs.push(ParamSpec::new(format!("{p}.conv.bias"), &[s.out_channels], Init::Zeros));
            specs.push(ParamSpec::new(format!("{p}.norm.gamma"), &[s.out_channels], Init::Ones));
            specs.push(ParamSpec::new(format!("{p}.norm.beta"), &[s.out_channels], Init::Zeros));
            cin = s.out_channels;
        }
        let block = self.block();
        for l in 0..self.n_layers {
            specs.extend(transformer_layer_specs(&format!("encoder.layer{l}"), &block, self.init_std));
        }
        specs.extend(linear_specs(
            "encoder.proj",
            self.d_model,
            self.d_out,
            1.0 / (self.d_model as f64).sqrt(),
        ));
        specs
    }

    /// Parameters of the per-lead branch. They train together with the mapper.
    pub fn lead_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(
                "lead_pos.conv.weight",
                &[self.lead_channels, 1, self.lead_kernel],
                Init::Normal(1.0 / (self.lead_kernel as f64).sqrt()),
            ),
            ParamSpec::new("lead_pos.conv.bias", &[self.lead_channels], Init::Zeros),
        ]
        .into_iter()
        .chain(linear_specs(
            "lead_pos.proj",
            self.lead_channels,
            self.d_prime,
            1.0 / (self.lead_channels as f64).sqrt(),
        ))
        .collect()
    }

    pub fn param_count(&self) -> usize {
        self.specs().iter().chain(self.lead_specs().iter()).map(ParamSpec::numel).sum()
    }

    /// Sequence length entering the transformer for a `T`-sample record.
    pub fn sequence_len(&self, t: usize) -> Option<usize> {
        self.conv_stages.iter().try_fold(t, |t, s| s.output_len(t))
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        let join = |f: fn(&ConvStage) -> usize| self.conv_stages.iter().map(|s| f(s).to_string()).collect::<Vec<_>>().join(",");
        kv.set("encoder.channels", join(|s| s.out_channels));
        kv.set("encoder.kernels", join(|s| s.kernel));
        kv.set("encoder.strides", join(|s| s.stride));
        kv.set("encoder.groups", self.groups);
        kv.set("encoder.n_layers", self.n_layers);
        kv.set("encoder.d_model", self.d_model);
        kv.set("encoder.heads", self.heads);
        kv.set("encoder.d_out", self.d_out);
        kv.set("encoder.d_prime", self.d_prime);
        kv.set("encoder.lead_channels", self.lead_channels);
        kv.set("encoder.lead_kernel", self.lead_kernel);
        kv.set("encoder.lead_stride", self.lead_stride);
        kv.set("encoder.sample_rate", self.sample_rate);
        kv.set("encoder.init_std", self.init_std);
    }

    /// Read overrides from `kv` on top of `self`.
    pub fn with_kv(mut self, kv: &KeyValues) -> Result<Self> {
        let list = |key: &str| -> Result<Option<Vec<usize>>> {
            kv.raw(key)
                .map(|v| {
                    v.split(',')
                        .map(|x| x.trim().parse().map_err(|_| Error::invalid(format!("{key}: bad list {v:?}"))))
                        .collect()
                })
                .transpose()
        };
        let (ch, ks, st) = (list("encoder.channels")?, list("encoder.kernels")?, list("encoder.strides")?);
        if ch.is_some() || ks.is_some() || st.is_some() {
            let ch = ch.unwrap_or_else(|| self.conv_stages.iter().map(|s| s.out_channels).collect());
            let ks = ks.unwrap_or_else(|| self.conv_stages.iter().map(|s| s.kernel).collect());
            let st = st.unwrap_or_else(|| self.conv_stages.iter().map(|s| s.stride).collect());
            if ch.len() != ks.len() || ch.len() != st.len() {
                return Err(Error::invalid("encoder stage lists have different lengths"));
            }
            self.conv_stages = (0..ch.len()).map(|i| ConvStage::new(ch[i], ks[i], st[i])).collect();
        }
        self.groups = kv.get_or("encoder.groups", self.groups)?;
        self.n_layers = kv.get_or("encoder.n_layers", self.n_layers)?;
        self.d_model = kv.get_or("encoder.d_model", self.d_model)?;
        self.heads = kv.get_or("encoder.heads", self.heads)?;
        self.d_out = kv.get_or("encoder.d_out", self.d_out)?;
        self.d_prime = kv.get_or("encoder.d_prime", self.d_prime)?;
        self.lead_channels = kv.get_or("encoder.lead_channels", self.lead_channels)?;
        self.lead_kernel = kv.get_or("encoder.lead_kernel", self.lead_kernel)?;
        self.lead_stride = kv.get_or("encoder.lead_stride", self.lead_stride)?;
        self.sample_rate = kv.get_or("encoder.sample_rate", self.sample_rate)?;
        self.init_std = kv.get_or("encoder.init_std", self.init_std)?;
        self.validate()?;
        Ok(self)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn check_record(&self, rec: &EcgRecord) -> Result<()> {
        if rec.rate() != self.cfg.sample_rate {
            return Err(Error::shape(format!(
                "record sampled at {} Hz, encoder expects {} Hz",
                rec.rate(),
                self.cfg.sample_rate
            )));
        }
        match self.cfg.sequence_len(rec.len()) {
            Some(s) if s > 0 => Ok(()),
            _ => Err(Error::shape(format!(
                "record of {} samples is too short for the conv stages",
                rec.len()
            ))),
        }
    }

    /// `x: [12×T]` → `z_e: [1×d]`.
    pub fn encode_graph<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, s) in self.cfg.conv_stages.iter().enumerate() {
            let p = format!("encoder.stage{i}");
            let w = g.param(store, &format!("{p}.conv.weight"))?;
            let b = g.param(store, &format!("{p}.conv.bias"))?;
            h = g.conv1d(h, w, Some(b), s.stride, s.padding())?;
            let gamma = g.param(store, &format!("{p}.norm.gamma"))?;
            let beta = g.param(store, &format!("{p}.norm.beta"))?;
            h = g.group_norm(h, self.cfg.groups, gamma, beta, NORM_EPS)?;
            h = g.gelu(h);
        }
        // [C×S] → [S×C]
        h = g.transpose(h)?;
        let s = g.shape(h)[0];
        let pos = g.constant(sinusoidal_positions(s, self.cfg.d_model)?);
        h = g.add(h, pos)?;
        let block = self.cfg.block();
        let mut mode = Mode::eval();
        for l in 0..self.cfg.n_layers {
            h = transformer_layer(g, store, &format!("encoder.layer{l}"), h, &block, &mut mode)?;
        }
        let pooled = g.mean_rows(h)?;
        linear(g, store, "encoder.proj", pooled)
    }

    /// `x: [12×T]` → `p_e: [12×d′]`. Each lead passes alone through a shared
    /// single-channel convolution, is averaged over time and projected.
    pub fn lead_positional_graph<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, "lead_pos.conv.weight")?;
        let b = g.param(store, "lead_pos.conv.bias")?;
        let pad = self.cfg.lead_kernel / 2;
        let rows = (0..N_LEADS)
            .map(|i| {
                let lead = g.slice_rows(x, i, 1)?;
                let c = g.conv1d(lead, w, Some(b), self.cfg.lead_stride, pad)?;
                let c = g.transpose(c)?;
                g.mean_rows(c)
            })
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat_rows(&rows)?;
        linear(g, store, "lead_pos.proj", stacked)
    }

    /// Embedding `z_e` of length `d`.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, rec: &EcgRecord) -> Result<Vec<T>> {
        self.check_record(rec)?;
        let g = Graph::new();
        let x = g.constant(rec.to_tensor());
        let z = self.encode_graph(&g, store, x)?;
        let out = g.value(z).data().to_vec();
        Ok(out)
    }

    /// Per-lead representation `p_e` of shape `[12×d′]`.
    pub fn lead_positional<T: Scalar>(&self, store: &ParamStore<T>, rec: &EcgRecord) -> Result<Tensor<T>> {
        self.check_record(rec)?;
        let g = Graph::new();
        let x = g.constant(rec.to_tensor());
        let p = self.lead_positional_graph(&g, store, x)?;
        let out = g.value(p).clone();
        Ok(out)
    }

    pub fn check_input(&self, rec: &EcgRecord) -> Result<()> {
        self.check_record(rec)
    }
}
