//! Equivalence oracles: two independent routes to the same value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::{csp_stage, presets, SplitKind, StageSpec};
use crate::error::Result;
use crate::net::{infer_seq, instantiate, Layer, Module, SplitModule};
use crate::ops::{
    batchnorm_forward, conv2d_forward, conv_padding, fully_connected, layernorm_forward, ConvParams, LinearParams,
    Mode, NormKind, NormParams,
};
use crate::tensor::{Dims, Tensor};

use super::fold_bn_into_conv;

pub const ORACLE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleResult {
    pub name: String,
    pub seeds: usize,
    pub max_rel_err: f64,
}

impl OracleResult {
    pub fn passes(&self) -> bool {
        self.max_rel_err <= ORACLE_TOLERANCE
    }
}

/// Direct seven-loop convolution.
pub fn naive_conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let out = p.output_dims(x.dims())?;
    let d = x.dims();
    let (k, s, pad) = (p.kernel(), p.stride, conv_padding(p.kernel(), p.stride) as isize);
    let cin_pg = p.c_in_per_group();
    let cout_pg = p.c_out() / p.groups;
    let mut y = Tensor::zeros(out);
    for n in 0..out.n {
        for o in 0..out.c {
            let grp = o / cout_pg;
            for oh in 0..out.h {
                for ow in 0..out.w {
                    let mut acc = p.bias.as_ref().map_or(0.0, |b| b.data()[o]);
                    for ci in 0..cin_pg {
                        let c = grp * cin_pg + ci;
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (oh * s + kh) as isize - pad;
                                let iw = (ow * s + kw) as isize - pad;
                                if ih < 0 || iw < 0 || ih >= d.h as isize || iw >= d.w as isize {
                                    continue;
                                }
                                acc += p.weight.at(o, ci, kh, kw) * x.at(n, c, ih as usize, iw as usize);
                            }
                        }
                    }
                    let i = y.index(n, o, oh, ow);
                    y.data_mut()[i] = acc;
                }
            }
        }
    }
    Ok(y)
}

fn conv_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = [(3, 4, 3, 1, 1), (4, 6, 2, 2, 1), (6, 6, 7, 1, 6), (3, 5, 4, 4, 1), (4, 8, 1, 1, 2)];
    let mut worst = 0.0f64;
    for (c_in, c_out, k, s, g) in shapes {
        let p = ConvParams::new(
            Tensor::randn([c_out, c_in / g, k, k], 0.5, &mut rng),
            Some(Tensor::randn([1, c_out, 1, 1], 0.5, &mut rng)),
            s,
            g,
        )?;
        let x = Tensor::randn([2, c_in, 8, 8], 1.0, &mut rng);
        worst = worst.max(conv2d_forward(&x, &p)?.max_rel_diff(&naive_conv2d(&x, &p)?));
    }
    Ok(worst)
}

fn layer_norm_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn([2, 7, 5, 3], 2.0, &mut rng);
    let gamma = Tensor::uniform([1, 7, 1, 1], 0.5, 1.5, &mut rng);
    let beta = Tensor::randn([1, 7, 1, 1], 0.5, &mut rng);
    let mut first = NormParams::layer_norm(7, NormKind::LayerNormChFirst);
    let mut last = NormParams::layer_norm(7, NormKind::LayerNormChLast);
    for p in [&mut first, &mut last] {
        p.gamma = gamma.clone();
        p.beta = beta.clone();
    }
    Ok(layernorm_forward(&x, &first)?.max_rel_diff(&layernorm_forward(&x, &last)?))
}

fn head_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, k) = (16, 10);
    let w = Tensor::randn([k, c, 1, 1], 0.3, &mut rng);
    let b = Tensor::randn([1, k, 1, 1], 0.3, &mut rng);
    let pooled = Tensor::randn([3, c, 1, 1], 1.0, &mut rng);
    let fc = fully_connected(&pooled, &LinearParams::new(w.clone(), b.clone())?)?;
    let conv = conv2d_forward(&pooled, &ConvParams::new(w, Some(b), 1, 1)?)?;
    Ok(fc.max_rel_diff(&conv))
}

/// (c_out, c_in, 1, 1) weight copying input channels [start, start + c_out).
pub fn selection_conv(c_in: usize, c_out: usize, start: usize) -> Result<ConvParams> {
    let mut w = Tensor::zeros([c_out, c_in, 1, 1]);
    for o in 0..c_out {
        w.data_mut()[o * c_in + start + o] = 1.0;
    }
    ConvParams::new(w, None, 1, 1)
}

fn bare_conv(name: &str, p: ConvParams) -> Module {
    Module::Layer { name: name.into(), layer: Layer::Conv { p, x: None } }
}

fn split_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = presets::e_convnext_tiny();
    let spec = StageSpec::csp(8, 16, 2, true, SplitKind::TensorSplit);
    let mid = spec.ch_mid()?;
    let tensor = instantiate(&[csp_stage(&cfg, "stage", &spec, mid)?], 0.3, &mut rng)?;
    let mut conv = tensor.clone();
    if let Module::Csp { split, .. } = &mut conv[0] {
        *split = SplitModule::ConvPair {
            bypass: vec![bare_conv("bypass", selection_conv(mid, mid / 2, 0)?)],
            main: vec![bare_conv("main", selection_conv(mid, mid / 2, mid / 2)?)],
        };
    }
    let x = Tensor::randn([2, mid, 6, 6], 1.0, &mut rng);
    Ok(infer_seq(&tensor, &x)?.max_rel_diff(&infer_seq(&conv, &x)?))
}

fn fold_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = ConvParams::new(
        Tensor::randn([6, 4, 3, 3], 0.5, &mut rng),
        Some(Tensor::randn([1, 6, 1, 1], 0.2, &mut rng)),
        1,
        1,
    )?;
    let mut bn = NormParams::batch_norm(6);
    bn.gamma = Tensor::uniform([1, 6, 1, 1], 0.5, 1.5, &mut rng);
    bn.beta = Tensor::randn([1, 6, 1, 1], 0.3, &mut rng);
    bn.running_mean = Some(Tensor::randn([1, 6, 1, 1], 0.3, &mut rng));
    bn.running_var = Some(Tensor::uniform([1, 6, 1, 1], 0.2, 2.0, &mut rng));
    bn.mode = Mode::Eval;
    let x = Tensor::randn(Dims::new(2, 4, 7, 7), 1.0, &mut rng);
    let composed = batchnorm_forward(&conv2d_forward(&x, &conv)?, &mut bn)?;
    let folded = conv2d_forward(&x, &fold_bn_into_conv(&conv, &bn)?)?;
    Ok(composed.max_rel_diff(&folded))
}

type Check = fn(u64) -> Result<f64>;

const CHECKS: [(&str, Check); 5] = [
    ("naive_conv_vs_engine", conv_case),
    ("layer_norm_first_vs_last", layer_norm_case),
    ("fc_vs_1x1_conv_head", head_case),
    ("tensor_split_vs_selection_conv_pair", split_case),
    ("bn_fold_composition", fold_case),
];

/// Runs every oracle over `seeds` seeds starting at `seed`.
pub fn oracle_suite(seed: u64, seeds: usize) -> Result<Vec<OracleResult>> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let mut worst = 0.0f64;
            for s in 0..seeds as u64 {
                worst = worst.max(f(seed + s)?);
            }
            Ok(OracleResult { name: (*name).into(), seeds, max_rel_err: worst })
        })
        .collect()
}
