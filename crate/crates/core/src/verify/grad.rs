//! Central finite-difference checks of the reverse pass.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::{block, csp_stage, presets, BlockKind, BlockType, LayerSpec, Node, SplitKind, StageSpec};
use crate::attention::AttentionKind;
use crate::error::Result;
use crate::net::{backward_seq, forward_seq, instantiate, visit_params, visit_params_mut, Module};
use crate::ops::{Mode, NormKind};
use crate::tensor::{Dims, Tensor};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const SAMPLES_PER_TENSOR: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub tolerance: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        !self.groups.is_empty() && self.groups.iter().all(|g| g.max_rel_err <= self.tolerance)
    }
}

/// |a - b| / max(|a|, |b|, 1e-6).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn loss(mods: &mut [Module], x: &Tensor, r: &Tensor, mode: Mode) -> Result<f64> {
    let y = forward_seq(mods, x, mode)?;
    Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
}

fn set_param(mods: &mut [Module], target: usize, idx: usize, value: f64) -> f64 {
    let mut k = 0;
    let mut old = 0.0;
    visit_params_mut(mods, &mut |_, t| {
        if k == target {
            old = t.data()[idx];
            t.data_mut()[idx] = value;
        }
        k += 1;
    });
    old
}

/// Compares analytic gradients of L = Σ y ⊙ r against central differences, for
/// the input and a sample of entries of every parameter tensor.
pub fn grad_check(
    name: &str,
    mods: &mut [Module],
    x: &Tensor,
    mode: Mode,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_dims = forward_seq(mods, x, mode)?.dims();
    let r = Tensor::randn(out_dims, 1.0, &mut rng);

    visit_params_mut(mods, &mut |_, t| t.zero_grad());
    forward_seq(mods, x, mode)?;
    let gx = backward_seq(mods, &r)?;

    let mut groups = Vec::new();
    let n = x.numel();
    let mut max = 0.0f64;
    let picks = sample(&mut rng, n, SAMPLES_PER_TENSOR.min(n));
    for i in picks.iter() {
        let mut xp = x.clone();
        xp.data_mut()[i] += STEP;
        let lp = loss(mods, &xp, &r, mode)?;
        xp.data_mut()[i] -= 2.0 * STEP;
        let lm = loss(mods, &xp, &r, mode)?;
        max = max.max(rel_err(gx.data()[i], (lp - lm) / (2.0 * STEP)));
    }
    groups.push(GroupError { name: "input".into(), checked: picks.len(), max_rel_err: max });

    let mut tensors: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    visit_params(mods, &mut |pname, t| {
        tensors.push((pname.to_string(), t.data().to_vec(), t.grad().map(<[f64]>::to_vec).unwrap_or_default()));
    });
    for (ti, (pname, values, grad)) in tensors.iter().enumerate() {
        let picks = sample(&mut rng, values.len(), SAMPLES_PER_TENSOR.min(values.len()));
        let mut max = 0.0f64;
        for i in picks.iter() {
            set_param(mods, ti, i, values[i] + STEP);
            let lp = loss(mods, x, &r, mode)?;
            set_param(mods, ti, i, values[i] - STEP);
            let lm = loss(mods, x, &r, mode)?;
            set_param(mods, ti, i, values[i]);
            let analytic = grad.get(i).copied().unwrap_or(0.0);
            max = max.max(rel_err(analytic, (lp - lm) / (2.0 * STEP)));
        }
        groups.push(GroupError { name: pname.clone(), checked: picks.len(), max_rel_err: max });
    }
    Ok(GradCheckReport { name: name.into(), tolerance, groups })
}

/// Instantiates `nodes` and perturbs every parameter so no gradient is trivially zero.
pub fn randomized(nodes: &[Node], seed: u64) -> Result<Vec<Module>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mods = instantiate(nodes, 0.3, &mut rng)?;
    visit_params_mut(&mut mods, &mut |_, t| {
        let noise = Tensor::randn(t.dims(), 0.2, &mut rng);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, e)| *v += e);
    });
    Ok(mods)
}

struct Case {
    name: &'static str,
    nodes: Vec<Node>,
    input: Dims,
    mode: Mode,
}

fn layer(name: &'static str, spec: LayerSpec, input: [usize; 4]) -> Case {
    Case { name, nodes: vec![Node::layer(name, spec)], input: input.into(), mode: Mode::Train }
}

fn cases() -> Result<Vec<Case>> {
    use LayerSpec as L;
    let mut cfg = presets::e_convnext_tiny();
    let mut v = vec![
        layer("conv3x3", L::conv(3, 4, 3, 1, true), [2, 3, 5, 5]),
        layer("conv2x2_s2", L::conv(4, 6, 2, 2, false), [2, 4, 6, 6]),
        layer("conv_patchify4", L::conv(3, 4, 4, 4, true), [1, 3, 8, 8]),
        layer("dwconv7x7", L::depthwise(4, 7, true), [2, 4, 7, 7]),
        layer("batch_norm", L::Norm { kind: NormKind::BatchNorm, c: 4 }, [3, 4, 3, 3]),
        layer("layer_norm_ch_first", L::Norm { kind: NormKind::LayerNormChFirst, c: 5 }, [2, 5, 3, 3]),
        layer("layer_norm_ch_last", L::Norm { kind: NormKind::LayerNormChLast, c: 5 }, [2, 5, 3, 3]),
        layer("gelu", L::Gelu, [2, 3, 4, 4]),
        layer("pointwise_fc", L::PointwiseFc { c_in: 4, c_out: 7 }, [2, 4, 3, 3]),
        layer("layer_scale", L::LayerScale { c: 4, init: 1e-6 }, [2, 4, 3, 3]),
        layer("attention_ese", L::Attention { kind: AttentionKind::ESE, c: 6 }, [2, 6, 4, 4]),
        layer("attention_se", L::Attention { kind: AttentionKind::SEStyle, c: 8 }, [2, 8, 3, 3]),
        layer("attention_eff", L::Attention { kind: AttentionKind::EffStyle, c: 4 }, [2, 16, 3, 3]),
        layer("global_pool", L::GlobalPool, [2, 3, 4, 4]),
        layer("fc", L::Fc { c_in: 6, c_out: 5 }, [3, 6, 1, 1]),
    ];
    v.push(Case {
        name: "batch_norm_eval",
        nodes: vec![Node::layer("bn", L::Norm { kind: NormKind::BatchNorm, c: 4 })],
        input: Dims::new(2, 4, 3, 3),
        mode: Mode::Eval,
    });
    v.push(Case {
        name: "block_bnconv_ese",
        nodes: vec![block(&cfg, "block", 6)?],
        input: Dims::new(2, 6, 8, 8),
        mode: Mode::Train,
    });
    let mut ln = cfg.clone();
    ln.block = BlockKind { kind: BlockType::LNFC, attention: AttentionKind::None, layer_scale_init: Some(1e-6) };
    v.push(Case {
        name: "block_lnfc",
        nodes: vec![block(&ln, "block", 6)?],
        input: Dims::new(2, 6, 8, 8),
        mode: Mode::Train,
    });
    cfg.block.attention = AttentionKind::ESE;
    let spec = StageSpec::csp(8, 16, 2, true, SplitKind::OneByOneConvPair);
    let mid = spec.ch_mid()?;
    v.push(Case {
        name: "csp_stage_ese",
        nodes: vec![
            Node::layer("down.conv", L::conv(8, mid, 2, 2, false)),
            Node::layer("down.norm", L::Norm { kind: NormKind::BatchNorm, c: mid }),
            Node::layer("down.act", L::Gelu),
            csp_stage(&cfg, "stage", &spec, mid)?,
            Node::layer("merge.conv", L::conv(mid, 16, 1, 1, false)),
            Node::layer("merge.norm", L::Norm { kind: NormKind::BatchNorm, c: 16 }),
            Node::layer("merge.act", L::Gelu),
        ],
        input: Dims::new(2, 8, 8, 8),
        mode: Mode::Train,
    });
    Ok(v)
}

/// Every layer type, both block types and a CSP stage with ESE attention.
pub fn grad_suite(seed: u64, tolerance: f64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for (i, case) in cases()?.into_iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        let mut mods = randomized(&case.nodes, s)?;
        let x = Tensor::randn(case.input, 1.0, &mut ChaCha8Rng::seed_from_u64(s ^ 0x5eed));
        out.push(grad_check(case.name, &mut mods, &x, case.mode, tolerance, s)?);
    }
    Ok(out)
}
