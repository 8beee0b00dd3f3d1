use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::arch::LayerSpec;
use crate::attention::{attention_backward, attention_forward, attention_forward_cached, AttentionCache, AttentionParams};
use crate::error::{Error, Result};
use crate::ops::*;
use crate::tensor::{Dims, Tensor};

/// Normal samples of standard deviation `std`, redrawn outside ±2 std.
pub fn trunc_normal<R: Rng + ?Sized>(dims: Dims, std: f64, rng: &mut R) -> Tensor {
    let data = (0..dims.numel())
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::from_vec(dims, data).expect("dims match sample count")
}

fn zeros_param(c: usize) -> Tensor {
    Tensor::zeros([1, c, 1, 1]).into_param()
}

/// A leaf layer with its parameters and the activations cached by the last forward.
#[derive(Clone, Debug)]
pub enum Layer {
    Conv { p: ConvParams, x: Option<Tensor> },
    Norm { p: NormParams, cache: Option<NormCache> },
    Gelu { x: Option<Tensor> },
    PointwiseFc { p: LinearParams, x: Option<Tensor> },
    LayerScale { gamma: Tensor, x: Option<Tensor> },
    Attention { p: AttentionParams, cache: Option<AttentionCache> },
    GlobalPool { input: Option<Dims> },
    Fc { p: LinearParams, x: Option<Tensor> },
}

fn cached<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Mode(format!("{what}: backward called before forward")))
}

fn linear<R: Rng + ?Sized>(c_in: usize, c_out: usize, std: f64, rng: &mut R) -> Result<LinearParams> {
    LinearParams::new(trunc_normal(Dims::new(c_out, c_in, 1, 1), std, rng).into_param(), zeros_param(c_out))
}

impl Layer {
    pub fn new<R: Rng + ?Sized>(spec: &LayerSpec, std: f64, rng: &mut R) -> Result<Self> {
        Ok(match *spec {
            LayerSpec::Conv { c_in, c_out, k, stride, groups, bias } => Layer::Conv {
                p: ConvParams::new(
                    trunc_normal(Dims::new(c_out, c_in / groups, k, k), std, rng).into_param(),
                    bias.then(|| zeros_param(c_out)),
                    stride,
                    groups,
                )?,
                x: None,
            },
            LayerSpec::Norm { kind, c } => {
                let mut p = NormParams::new(kind, c);
                p.gamma = p.gamma.into_param();
                p.beta = p.beta.into_param();
                Layer::Norm { p, cache: None }
            }
            LayerSpec::Gelu => Layer::Gelu { x: None },
            LayerSpec::PointwiseFc { c_in, c_out } => Layer::PointwiseFc { p: linear(c_in, c_out, std, rng)?, x: None },
            LayerSpec::LayerScale { c, init } => {
                Layer::LayerScale { gamma: Tensor::full([1, c, 1, 1], init).into_param(), x: None }
            }
            LayerSpec::Attention { kind, c } => Layer::Attention {
                p: AttentionParams::new(kind, c, rng, |d, r| trunc_normal(d, std, r))?,
                cache: None,
            },
            LayerSpec::GlobalPool => Layer::GlobalPool { input: None },
            LayerSpec::Fc { c_in, c_out } => Layer::Fc { p: linear(c_in, c_out, std, rng)?, x: None },
        })
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Layer::Conv { p, x: c } => {
                let y = conv2d_forward(x, p)?;
                *c = Some(x.clone());
                Ok(y)
            }
            Layer::Norm { p, cache } => {
                p.mode = mode;
                let (y, nc) = norm::norm_forward_cached(x, p)?;
                *cache = Some(nc);
                Ok(y)
            }
            Layer::Gelu { x: c } => {
                *c = Some(x.clone());
                Ok(gelu(x))
            }
            Layer::PointwiseFc { p, x: c } => {
                let y = pointwise_linear(x, p)?;
                *c = Some(x.clone());
                Ok(y)
            }
            Layer::LayerScale { gamma, x: c } => {
                let y = scale_channels(x, gamma)?;
                *c = Some(x.clone());
                Ok(y)
            }
            Layer::Attention { p, cache } => {
                let (y, ac) = attention_forward_cached(x, p)?;
                *cache = Some(ac);
                Ok(y)
            }
            Layer::GlobalPool { input } => {
                *input = Some(x.dims());
                Ok(global_avg_pool(x))
            }
            Layer::Fc { p, x: c } => {
                let y = fully_connected(x, p)?;
                *c = Some(x.clone());
                Ok(y)
            }
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv { p, .. } => conv2d_forward(x, p),
            Layer::Norm { p, .. } => norm::norm_infer(x, p),
            Layer::Gelu { .. } => Ok(gelu(x)),
            Layer::PointwiseFc { p, .. } => pointwise_linear(x, p),
            Layer::LayerScale { gamma, .. } => scale_channels(x, gamma),
            Layer::Attention { p, .. } => attention_forward(x, p),
            Layer::GlobalPool { .. } => Ok(global_avg_pool(x)),
            Layer::Fc { p, .. } => fully_connected(x, p),
        }
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv { p, x } => {
                let grads = conv2d_backward(cached(x, "conv")?, p, g)?;
                p.weight.accumulate_grad(grads.grad_weight.data())?;
                if let (Some(b), Some(gb)) = (p.bias.as_mut(), grads.grad_bias.as_ref()) {
                    b.accumulate_grad(gb.data())?;
                }
                Ok(grads.grad_x)
            }
            Layer::Norm { p, cache } => {
                let grads = norm::norm_backward(cached(cache, "norm")?, p, g)?;
                p.gamma.accumulate_grad(grads.grad_gamma.data())?;
                p.beta.accumulate_grad(grads.grad_beta.data())?;
                Ok(grads.grad_x)
            }
            Layer::Gelu { x } => gelu_backward(cached(x, "gelu")?, g),
            Layer::PointwiseFc { p, x } => {
                let grads = pointwise_linear_backward(cached(x, "pointwise fc")?, p, g)?;
                p.weight.accumulate_grad(grads.grad_weight.data())?;
                p.bias.accumulate_grad(grads.grad_bias.data())?;
                Ok(grads.grad_x)
            }
            Layer::LayerScale { gamma, x } => {
                let x = cached(x, "layer scale")?;
                let n = x.dims().n;
                let (gx, gg) = mul_channel_gate_backward(x, &broadcast_batch(gamma, n)?, g)?;
                let c = gamma.numel();
                let mut sum = vec![0.0; c];
                for (i, v) in gg.data().iter().enumerate() {
                    sum[i % c] += v;
                }
                gamma.accumulate_grad(&sum)?;
                Ok(gx)
            }
            Layer::Attention { p, cache } => {
                let grads = attention_backward(cached(cache, "attention")?, p, g)?;
                let mut it = grads.params.iter();
                let mut res = Ok(());
                p.visit_mut(&mut |_, t| {
                    if let (Ok(()), Some(d)) = (&res, it.next()) {
                        res = t.accumulate_grad(d.data());
                    }
                });
                res?;
                Ok(grads.grad_x)
            }
            Layer::GlobalPool { input } => global_avg_pool_backward(*cached(input, "pool")?, g),
            Layer::Fc { p, x } => {
                let grads = fully_connected_backward(cached(x, "fc")?, p, g)?;
                p.weight.accumulate_grad(grads.grad_weight.data())?;
                p.bias.accumulate_grad(grads.grad_bias.data())?;
                Ok(grads.grad_x)
            }
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Layer::Conv { p, .. } => {
                f("weight", &p.weight);
                if let Some(b) = &p.bias {
                    f("bias", b);
                }
            }
            Layer::Norm { p, .. } => {
                f("weight", &p.gamma);
                f("bias", &p.beta);
            }
            Layer::PointwiseFc { p, .. } | Layer::Fc { p, .. } => {
                f("weight", &p.weight);
                f("bias", &p.bias);
            }
            Layer::LayerScale { gamma, .. } => f("gamma", gamma),
            Layer::Attention { p, .. } => p.visit(f),
            Layer::Gelu { .. } | Layer::GlobalPool { .. } => {}
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Layer::Conv { p, .. } => {
                f("weight", &mut p.weight);
                if let Some(b) = p.bias.as_mut() {
                    f("bias", b);
                }
            }
            Layer::Norm { p, .. } => {
                f("weight", &mut p.gamma);
                f("bias", &mut p.beta);
            }
            Layer::PointwiseFc { p, .. } | Layer::Fc { p, .. } => {
                f("weight", &mut p.weight);
                f("bias", &mut p.bias);
            }
            Layer::LayerScale { gamma, .. } => f("gamma", gamma),
            Layer::Attention { p, .. } => p.visit_mut(f),
            Layer::Gelu { .. } | Layer::GlobalPool { .. } => {}
        }
    }

    /// Non-trainable state: batch-norm running statistics.
    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Layer::Norm { p, .. } = self {
            if let Some(m) = p.running_mean.as_mut() {
                f("running_mean", m);
            }
            if let Some(v) = p.running_var.as_mut() {
                f("running_var", v);
            }
        }
    }
}

fn broadcast_batch(v: &Tensor, n: usize) -> Result<Tensor> {
    let c = v.numel();
    Tensor::from_vec([n, c, 1, 1], v.data().repeat(n))
}

/// `x` scaled per channel by the (1, c, 1, 1) vector `gamma`.
fn scale_channels(x: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    mul_channel_gate(x, &broadcast_batch(gamma, x.dims().n)?)
}
