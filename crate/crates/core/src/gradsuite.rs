//! Gradient verification of every differentiable kernel and of the composed
//! encoder → prefix mapper → decoder loss, in `f64` on small shapes.

use crate::decoder::model::{ToyDecoder, ToyDecoderConfig};
use crate::encoder::{ConvStage, Encoder, EncoderConfig};
use crate::error::Result;
use crate::mapper::{Mapper, MapperConfig, MapperVariant};
use crate::model::QaModel;
use crate::nn::gradcheck::{check_inputs, check_params, random_projection, GradCheck};
use crate::nn::layers::{transformer_layer, transformer_layer_specs};
use crate::nn::lora::{lora_linear, lora_specs};
use crate::nn::{BlockConfig, Graph, LoraConfig, Mode, ParamStore, Tensor, Var};
use crate::rng::{mix_seed, SeededRng};
use crate::signal::{CANONICAL_RATE, N_LEADS};

/// Largest accepted norm-wise relative error.
pub const GRAD_TOLERANCE: f64 = 1e-5;
/// Seeds used by the full suite.
pub const SUITE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const MAX_COORDS: usize = 24;
const MODEL_COORDS: usize = 4;

fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape matches data")
}

type Build = Box<dyn Fn(&Graph<f64>, &[Var]) -> Result<Var>>;

fn kernel_cases(seed: u64) -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    let proj = move |g: &Graph<f64>, y: Var| random_projection(g, y, mix_seed(seed, &[7]));
    vec![
        (
            "matmul",
            vec![vec![3, 4], vec![4, 5]],
            Box::new(move |g, v| proj(g, g.matmul(v[0], v[1])?)),
        ),
        (
            "add",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(move |g, v| proj(g, g.add(v[0], v[1])?)),
        ),
        (
            "mul",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(move |g, v| proj(g, g.mul(v[0], v[1])?)),
        ),
        (
            "add_bias",
            vec![vec![3, 4], vec![4]],
            Box::new(move |g, v| proj(g, g.add_bias(v[0], v[1])?)),
        ),
        ("scale", vec![vec![2, 3]], Box::new(move |g, v| proj(g, g.scale(v[0], -1.7)))),
        ("sum", vec![vec![2, 3]], Box::new(|g, v| Ok(g.sum(v[0])))),
        ("gelu", vec![vec![4, 5]], Box::new(move |g, v| proj(g, g.gelu(v[0])))),
        (
            "layer_norm",
            vec![vec![3, 6], vec![6], vec![6]],
            Box::new(move |g, v| proj(g, g.layer_norm(v[0], v[1], v[2], 1e-5)?)),
        ),
        (
            "group_norm",
            vec![vec![4, 10], vec![4], vec![4]],
            Box::new(move |g, v| proj(g, g.group_norm(v[0], 2, v[1], v[2], 1e-5)?)),
        ),
        (
            "conv1d",
            vec![vec![3, 11], vec![4, 3, 3], vec![4]],
            Box::new(move |g, v| proj(g, g.conv1d(v[0], v[1], Some(v[2]), 2, 1)?)),
        ),
        (
            "attention",
            vec![vec![5, 6], vec![5, 6], vec![5, 6]],
            Box::new(move |g, v| proj(g, g.attention(v[0], v[1], v[2], 2, false)?)),
        ),
        (
            "attention_causal",
            vec![vec![5, 6], vec![5, 6], vec![5, 6]],
            Box::new(move |g, v| proj(g, g.attention(v[0], v[1], v[2], 3, true)?)),
        ),
        ("transpose", vec![vec![3, 5]], Box::new(move |g, v| proj(g, g.transpose(v[0])?))),
        ("mean_rows", vec![vec![4, 3]], Box::new(move |g, v| proj(g, g.mean_rows(v[0])?))),
        (
            "concat_rows",
            vec![vec![2, 3], vec![1, 3]],
            Box::new(move |g, v| proj(g, g.concat_rows(&[v[0], v[1]])?)),
        ),
        (
            "slice_rows",
            vec![vec![5, 3]],
            Box::new(move |g, v| proj(g, g.slice_rows(v[0], 1, 3)?)),
        ),
        (
            "reshape",
            vec![vec![2, 6]],
            Box::new(move |g, v| proj(g, g.reshape(v[0], &[3, 4])?)),
        ),
        (
            "embedding",
            vec![vec![7, 4]],
            Box::new(move |g, v| proj(g, g.embedding(v[0], &[3, 0, 3, 6])?)),
        ),
        (
            "cross_entropy",
            vec![vec![4, 7]],
            Box::new(|g, v| g.cross_entropy(v[0], &[2, usize::MAX, 6, 0], usize::MAX)),
        ),
        (
            "dropout",
            vec![vec![4, 5]],
            Box::new(move |g, v| proj(g, g.dropout(v[0], 0.3, &mut SeededRng::new(mix_seed(seed, &[8])))?)),
        ),
    ]
}

/// Every graph kernel with random inputs drawn from `seed`.
pub fn kernel_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = SeededRng::new(seed);
    kernel_cases(seed)
        .into_iter()
        .map(|(label, shapes, build)| {
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| randn(s, &mut rng)).collect();
            check_inputs(label, &inputs, build, MAX_COORDS, seed)
        })
        .collect()
}

/// Gaussian values for every parameter, so zero-initialised adapters and
/// unit norms still produce informative gradients; all become trainable.
fn randomise(store: &mut ParamStore<f64>, std: f64, rng: &mut SeededRng) {
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = std * rng.normal();
        }
        p.trainable = true;
    }
}

fn lora_check(seed: u64) -> Result<GradCheck> {
    let cfg = LoraConfig::standard();
    let mut specs = crate::nn::layers::linear_specs("p", 6, 5, 0.5);
    specs.extend(lora_specs("p", 6, 5, &cfg));
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    store.init_from_specs(&specs, &mut rng);
    randomise(&mut store, 0.5, &mut rng);
    let x = randn(&[3, 6], &mut rng);
    check_params(
        "lora_linear",
        &store,
        |g, s| {
            let xv = g.constant(x.clone());
            let mut mode = Mode::train(mix_seed(seed, &[9]));
            let y = lora_linear(g, s, "p", xv, &cfg, &mut mode)?;
            random_projection(g, y, mix_seed(seed, &[10]))
        },
        MAX_COORDS,
        seed,
    )
}

fn layer_check(seed: u64) -> Result<GradCheck> {
    let cfg = BlockConfig {
        causal: true,
        lora: Some(LoraConfig::standard()),
        ..BlockConfig::new(6, 2)
    };
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    store.init_from_specs(&transformer_layer_specs("l", &cfg, 0.4), &mut rng);
    randomise(&mut store, 0.4, &mut rng);
    let x = randn(&[4, 6], &mut rng);
    check_params(
        "transformer_layer",
        &store,
        |g, s| {
            let xv = g.constant(x.clone());
            let y = transformer_layer(g, s, "l", xv, &cfg, &mut Mode::eval())?;
            random_projection(g, y, mix_seed(seed, &[11]))
        },
        MAX_COORDS,
        seed,
    )
}

/// A miniature of the full model with every component present.
pub fn tiny_model() -> Result<QaModel> {
    let encoder = EncoderConfig {
        conv_stages: vec![ConvStage::new(4, 5, 4), ConvStage::new(8, 3, 2)],
        groups: 2,
        n_layers: 1,
        d_model: 8,
        heads: 2,
        d_out: 6,
        d_prime: 8,
        lead_channels: 3,
        lead_kernel: 5,
        lead_stride: 4,
        sample_rate: CANONICAL_RATE,
        init_std: 0.3,
    };
    let mapper = MapperConfig {
        layers: 1,
        heads: 2,
        init_std: 0.3,
        ..MapperConfig::new(6, 8)
    };
    let decoder = ToyDecoderConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        final_norm: true,
        pos_scale: 1.0,
        ..ToyDecoderConfig::toy(13)
    };
    Ok(QaModel {
        encoder: Encoder::new(encoder)?,
        mapper: Mapper::new(mapper)?,
        decoder: ToyDecoder::new(decoder)?,
        variant: MapperVariant::Full,
    })
}

/// Answer loss of the composed model with respect to every parameter,
/// decoder dropout active under a fixed mask.
pub fn composite_check(seed: u64) -> Result<GradCheck> {
    let model = tiny_model()?;
    let mut store = model.init_params::<f64>(seed);
    let mut rng = SeededRng::new(mix_seed(seed, &[12]));
    randomise(&mut store, 0.3, &mut rng);
    let x = randn(&[N_LEADS, 64], &mut rng);
    check_params(
        "encode+map_prefix+decode",
        &store,
        |g, s| {
            let xv = g.constant(x.clone());
            let mut mode = Mode::train(mix_seed(seed, &[13]));
            model.answer_loss(g, s, xv, &[3, 4, 5], &[6, 7], &mut mode)
        },
        MODEL_COORDS,
        seed,
    )
}

/// All kernel, block and composite checks for one seed.
pub fn run_seed(seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = kernel_checks(seed)?;
    out.push(lora_check(seed)?);
    out.push(layer_check(seed)?);
    out.push(composite_check(seed)?);
    Ok(out)
}

pub fn run_suite(seeds: &[u64]) -> Result<Vec<(u64, GradCheck)>> {
    let mut out = Vec::new();
    for &s in seeds {
        out.extend(run_seed(s)?.into_iter().map(|c| (s, c)));
    }
    Ok(out)
}
