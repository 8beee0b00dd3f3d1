//! Channel attention: SE-style, EfficientNet-style and effective SE (ESE).
//!
//! All three squeeze with global average pooling and multiply the input by a
//! per-channel gate in [0, 1]. The caller is responsible for placing a
//! normalization layer in front of the module.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::ops::{self, ConvParams, LinearParams};
use crate::tensor::{Dims, Tensor};

/// Bottleneck reduction ratio of the SE-style module.
pub const SE_REDUCTION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum AttentionKind {
    #[default]
    None,
    /// GAP -> FC c->c/4 -> GELU -> FC c/4->c -> sigmoid, gating the block output.
    SEStyle,
    /// Same squeeze/excite shape placed on the 4c expanded hidden width, with the
    /// bottleneck sized from the block width (4c -> c/4 -> 4c).
    EffStyle,
    /// GAP -> 1x1 conv c->c (with bias) -> hard sigmoid.
    ESE,
}

/// Widths of an attention module that gates `width` channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub width: usize,
    /// Hidden width of the excitation MLP; equals `width` for ESE.
    pub hidden: usize,
}

/// Shape of the module for a block of width `c`. EffStyle gates `4c` channels.
pub fn attention_shape(kind: AttentionKind, c: usize) -> Result<AttentionShape> {
    if c == 0 {
        return Err(config_err!("attention over zero channels"));
    }
    let shape = match kind {
        AttentionKind::None => return Err(config_err!("attention kind None has no module")),
        AttentionKind::ESE => AttentionShape { width: c, hidden: c },
        AttentionKind::SEStyle => AttentionShape { width: c, hidden: c / SE_REDUCTION },
        AttentionKind::EffStyle => AttentionShape { width: 4 * c, hidden: c / SE_REDUCTION },
    };
    if shape.hidden < 1 {
        return Err(config_err!("attention bottleneck {c}/{SE_REDUCTION} rounds to zero"));
    }
    Ok(shape)
}

/// Cost of one attention module. The gate is computed once per sample, so
/// `flops` does not depend on the spatial size; the pooling sum and the
/// broadcast multiply are not counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AttentionCost {
    pub flops: u64,
    pub params: u64,
}

pub fn attention_cost(kind: AttentionKind, c: usize) -> Result<AttentionCost> {
    if kind == AttentionKind::None {
        return Ok(AttentionCost { flops: 0, params: 0 });
    }
    let AttentionShape { width, hidden } = attention_shape(kind, c)?;
    let (w, h) = (width as u64, hidden as u64);
    Ok(match kind {
        AttentionKind::ESE => AttentionCost { flops: w * w, params: w * w + w },
        _ => AttentionCost { flops: 2 * w * h, params: 2 * w * h + h + w },
    })
}

/// Weights of one attention module.
#[derive(Clone, Debug)]
pub enum AttentionParams {
    Ese { fc: ConvParams },
    Se { kind: AttentionKind, reduce: LinearParams, expand: LinearParams },
}

impl AttentionParams {
    /// Module for a block of width `c`; weights drawn by `init`, biases zero.
    pub fn new<R: Rng + ?Sized>(
        kind: AttentionKind,
        c: usize,
        rng: &mut R,
        init: impl Fn(Dims, &mut R) -> Tensor,
    ) -> Result<Self> {
        let AttentionShape { width, hidden } = attention_shape(kind, c)?;
        Ok(match kind {
            AttentionKind::ESE => AttentionParams::Ese {
                fc: ConvParams::new(
                    init(Dims::new(width, width, 1, 1), rng).into_param(),
                    Some(Tensor::zeros([1, width, 1, 1]).into_param()),
                    1,
                    1,
                )?,
            },
            _ => AttentionParams::Se {
                kind,
                reduce: LinearParams::new(
                    init(Dims::new(hidden, width, 1, 1), rng).into_param(),
                    Tensor::zeros([1, hidden, 1, 1]).into_param(),
                )?,
                expand: LinearParams::new(
                    init(Dims::new(width, hidden, 1, 1), rng).into_param(),
                    Tensor::zeros([1, width, 1, 1]).into_param(),
                )?,
            },
        })
    }

    pub fn kind(&self) -> AttentionKind {
        match self {
            AttentionParams::Ese { .. } => AttentionKind::ESE,
            AttentionParams::Se { kind, .. } => *kind,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            AttentionParams::Ese { fc } => fc.c_out(),
            AttentionParams::Se { expand, .. } => expand.out_width(),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            AttentionParams::Ese { fc } => {
                f("fc.weight", &fc.weight);
                if let Some(b) = &fc.bias {
                    f("fc.bias", b);
                }
            }
            AttentionParams::Se { reduce, expand, .. } => {
                f("reduce.weight", &reduce.weight);
                f("reduce.bias", &reduce.bias);
                f("expand.weight", &expand.weight);
                f("expand.bias", &expand.bias);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            AttentionParams::Ese { fc } => {
                f("fc.weight", &mut fc.weight);
                if let Some(b) = fc.bias.as_mut() {
                    f("fc.bias", b);
                }
            }
            AttentionParams::Se { reduce, expand, .. } => {
                f("reduce.weight", &mut reduce.weight);
                f("reduce.bias", &mut reduce.bias);
                f("expand.weight", &mut expand.weight);
                f("expand.bias", &mut expand.bias);
            }
        }
    }
}

/// Intermediate values kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    x: Tensor,
    pooled: Tensor,
    hidden_pre: Option<Tensor>,
    logits: Tensor,
    gate: Tensor,
}

impl AttentionCache {
    pub fn gate(&self) -> &Tensor {
        &self.gate
    }
}

/// Gradients in the order parameters are visited.
#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub grad_x: Tensor,
    pub params: Vec<Tensor>,
}

/// Per-channel gate values, dims (n, c, 1, 1).
pub fn attention_gate(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    attention_forward_cached(x, p).map(|(_, c)| c.gate)
}

pub fn attention_forward(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    attention_forward_cached(x, p).map(|(y, _)| y)
}

pub fn attention_forward_cached(x: &Tensor, p: &AttentionParams) -> Result<(Tensor, AttentionCache)> {
    if x.dims().c != p.width() {
        return Err(shape_err!("attention over {} channels applied to {}", p.width(), x.dims()));
    }
    let pooled = ops::global_avg_pool(x);
    let (hidden_pre, logits, gate) = match p {
        AttentionParams::Ese { fc } => {
            let logits = ops::conv2d_forward(&pooled, fc)?;
            let gate = ops::hard_sigmoid(&logits);
            (None, logits, gate)
        }
        AttentionParams::Se { reduce, expand, .. } => {
            let h = ops::fully_connected(&pooled, reduce)?;
            let logits = ops::fully_connected(&ops::gelu(&h), expand)?;
            let gate = ops::sigmoid(&logits);
            (Some(h), logits, gate)
        }
    };
    let y = ops::mul_channel_gate(x, &gate)?;
    Ok((y, AttentionCache { x: x.clone(), pooled, hidden_pre, logits, gate }))
}

pub fn attention_backward(cache: &AttentionCache, p: &AttentionParams, grad_out: &Tensor) -> Result<AttentionGrads> {
    let (mut grad_x, grad_gate) = ops::mul_channel_gate_backward(&cache.x, &cache.gate, grad_out)?;
    let (grad_pooled, params) = match p {
        AttentionParams::Ese { fc } => {
            let g_logits = ops::hard_sigmoid_backward(&cache.logits, &grad_gate)?;
            let g = ops::conv2d_backward(&cache.pooled, fc, &g_logits)?;
            let mut params = vec![g.grad_weight];
            params.extend(g.grad_bias);
            (g.grad_x, params)
        }
        AttentionParams::Se { reduce, expand, .. } => {
            let h = cache.hidden_pre.as_ref().expect("SE cache keeps its hidden layer");
            let g_logits = ops::sigmoid_backward(&cache.gate, &grad_gate)?;
            let ge = ops::fully_connected_backward(&ops::gelu(h), expand, &g_logits)?;
            let g_h = ops::gelu_backward(h, &ge.grad_x)?;
            let gr = ops::fully_connected_backward(&cache.pooled, reduce, &g_h)?;
            (gr.grad_x, vec![gr.grad_weight, gr.grad_bias, ge.grad_weight, ge.grad_bias])
        }
    };
    let spread = ops::global_avg_pool_backward(cache.x.dims(), &grad_pooled)?;
    grad_x.data_mut().iter_mut().zip(spread.data()).for_each(|(a, b)| *a += b);
    Ok(AttentionGrads { grad_x, params })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn randn(d: Dims, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(d, 0.5, rng)
    }

    #[test]
    fn closed_form_parameter_counts() {
        assert_eq!(attention_cost(AttentionKind::ESE, 192).unwrap().params, 37_056);
        assert_eq!(attention_cost(AttentionKind::SEStyle, 192).unwrap().params, 18_672);
        // EffStyle: 4c wide, c/4 bottleneck -> 2 * 4c * c/4 + c/4 + 4c
        assert_eq!(attention_cost(AttentionKind::EffStyle, 192).unwrap().params, 2 * 768 * 48 + 48 + 768);
        assert_eq!(attention_cost(AttentionKind::None, 192).unwrap().params, 0);
    }

    #[test]
    fn module_parameter_count_matches_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [AttentionKind::ESE, AttentionKind::SEStyle, AttentionKind::EffStyle] {
            let p = AttentionParams::new(kind, 16, &mut rng, randn).unwrap();
            assert_eq!(p.param_count() as u64, attention_cost(kind, 16).unwrap().params, "{kind:?}");
        }
    }

    #[test]
    fn bottleneck_below_one_is_error() {
        assert!(attention_cost(AttentionKind::SEStyle, 3).is_err());
        assert!(attention_cost(AttentionKind::ESE, 3).is_ok());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionParams::new(AttentionKind::SEStyle, 8, &mut rng, randn).unwrap();
        let y = attention_forward(&Tensor::zeros([2, 8, 3, 3]), &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ese_with_zero_weights_halves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionParams::new(AttentionKind::ESE, 4, &mut rng, |d, _| Tensor::zeros(d)).unwrap();
        let x = Tensor::randn([2, 4, 3, 3], 1.0, &mut rng);
        let y = attention_forward(&x, &p).unwrap();
        assert!(y.max_abs_diff(&x.scale(0.5)) < 1e-15);
    }

    #[test]
    fn channel_mismatch_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AttentionParams::new(AttentionKind::ESE, 4, &mut rng, randn).unwrap();
        assert!(attention_forward(&Tensor::zeros([1, 5, 2, 2]), &p).is_err());
    }
}
