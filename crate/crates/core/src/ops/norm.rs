//! Batch normalization and the two layer-normalization layouts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::{Dims, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormKind {
    BatchNorm,
    /// Normalizes over channels reading the (n, c, h, w) layout in place.
    LayerNormChFirst,
    /// Transposes to (n, h, w, c), normalizes the trailing axis, transposes back.
    LayerNormChLast,
}

impl NormKind {
    pub fn is_layer_norm(self) -> bool {
        !matches!(self, NormKind::BatchNorm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine parameters and (for batch norm) running statistics.
#[derive(Clone, Debug)]
pub struct NormParams {
    pub kind: NormKind,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Option<Tensor>,
    pub running_var: Option<Tensor>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: Mode,
}

impl NormParams {
    /// Batch norm over `c` channels with unit scale, zero shift and fresh statistics.
    pub fn batch_norm(c: usize) -> Self {
        NormParams {
            kind: NormKind::BatchNorm,
            gamma: Tensor::ones([1, c, 1, 1]),
            beta: Tensor::zeros([1, c, 1, 1]),
            running_mean: Some(Tensor::zeros([1, c, 1, 1])),
            running_var: Some(Tensor::ones([1, c, 1, 1])),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            mode: Mode::Train,
        }
    }

    pub fn layer_norm(c: usize, kind: NormKind) -> Self {
        assert!(kind.is_layer_norm(), "layer_norm called with {kind:?}");
        NormParams {
            kind,
            gamma: Tensor::ones([1, c, 1, 1]),
            beta: Tensor::zeros([1, c, 1, 1]),
            running_mean: None,
            running_var: None,
            eps: LN_EPS,
            momentum: 0.0,
            mode: Mode::Train,
        }
    }

    pub fn new(kind: NormKind, c: usize) -> Self {
        match kind {
            NormKind::BatchNorm => Self::batch_norm(c),
            k => Self::layer_norm(c, k),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if self.eps <= 0.0 {
            return Err(config_err!("norm eps must be positive"));
        }
        if self.gamma.numel() != x.dims().c || self.beta.numel() != x.dims().c {
            return Err(shape_err!(
                "norm over {} channels applied to input {}",
                self.gamma.numel(),
                x.dims()
            ));
        }
        Ok(())
    }

    fn running(&self) -> Result<(&Tensor, &Tensor)> {
        match (&self.running_mean, &self.running_var) {
            (Some(m), Some(v)) => Ok((m, v)),
            _ => Err(config_err!("batch norm is missing running statistics")),
        }
    }
}

/// Values saved by a normalization forward pass for its reverse pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    xhat: Tensor,
    /// Per channel for batch norm, per (n, h, w) position for layer norm.
    inv_std: Vec<f64>,
    mode: Mode,
}

/// Gradients of a normalization layer.
#[derive(Clone, Debug)]
pub struct NormGrads {
    pub grad_x: Tensor,
    pub grad_gamma: Tensor,
    pub grad_beta: Tensor,
}

fn gather_channel(x: &Tensor, c: usize) -> impl Iterator<Item = f64> + '_ {
    let d = x.dims();
    (0..d.n).flat_map(move |n| x.plane(n, c).iter().copied())
}

/// Batch normalization; in train mode also updates the running statistics.
pub fn batchnorm_forward(x: &Tensor, p: &mut NormParams) -> Result<Tensor> {
    batchnorm_forward_cached(x, p).map(|(y, _)| y)
}

pub fn batchnorm_forward_cached(x: &Tensor, p: &mut NormParams) -> Result<(Tensor, NormCache)> {
    if p.kind != NormKind::BatchNorm {
        return Err(config_err!("batchnorm_forward called with {:?}", p.kind));
    }
    p.check(x)?;
    let d = x.dims();
    let count = d.n * d.plane();
    let (mean, var) = match p.mode {
        Mode::Train => {
            if count == 1 {
                return Err(Error::DegenerateStats(format!(
                    "batch norm in train mode needs more than one value per channel, input {d}"
                )));
            }
            let stats: Vec<(f64, f64)> = (0..d.c)
                .into_par_iter()
                .map(|c| {
                    let mean = gather_channel(x, c).sum::<f64>() / count as f64;
                    let var = gather_channel(x, c).map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
                    (mean, var)
                })
                .collect();
            let momentum = p.momentum;
            let unbias = count as f64 / (count - 1) as f64;
            let (rm, rv) = match (p.running_mean.as_mut(), p.running_var.as_mut()) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(config_err!("batch norm is missing running statistics")),
            };
            for (c, &(m, v)) in stats.iter().enumerate() {
                let rmc = &mut rm.data_mut()[c];
                *rmc = (1.0 - momentum) * *rmc + momentum * m;
                let rvc = &mut rv.data_mut()[c];
                *rvc = (1.0 - momentum) * *rvc + momentum * v * unbias;
            }
            stats.into_iter().unzip::<f64, f64, Vec<f64>, Vec<f64>>()
        }
        Mode::Eval => {
            let (m, v) = p.running()?;
            if v.data().iter().any(|&v| v < 0.0) {
                return Err(config_err!("running variance must be non-negative"));
            }
            (m.data().to_vec(), v.data().to_vec())
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(d);
    let mut y = Tensor::zeros(d);
    let (g, b) = (p.gamma.data(), p.beta.data());
    let plane = d.plane();
    xhat.data_mut()
        .par_chunks_mut(plane)
        .zip(y.data_mut().par_chunks_mut(plane))
        .enumerate()
        .for_each(|(idx, (xh, yo))| {
            let c = idx % d.c;
            let src = x.plane(idx / d.c, c);
            for ((h, o), &v) in xh.iter_mut().zip(yo.iter_mut()).zip(src) {
                *h = (v - mean[c]) * inv_std[c];
                *o = g[c] * *h + b[c];
            }
        });
    Ok((y, NormCache { xhat, inv_std, mode: p.mode }))
}

pub fn batchnorm_backward(cache: &NormCache, p: &NormParams, grad_out: &Tensor) -> Result<NormGrads> {
    let d = cache.xhat.dims();
    if grad_out.dims() != d {
        return Err(shape_err!("grad_out {} != batch norm output {d}", grad_out.dims()));
    }
    let count = (d.n * d.plane()) as f64;
    let gamma = p.gamma.data();
    let sums: Vec<(f64, f64)> = (0..d.c)
        .into_par_iter()
        .map(|c| {
            let mut sg = 0.0;
            let mut sgx = 0.0;
            for n in 0..d.n {
                for (gy, xh) in grad_out.plane(n, c).iter().zip(cache.xhat.plane(n, c)) {
                    sg += gy;
                    sgx += gy * xh;
                }
            }
            (sg, sgx)
        })
        .collect();
    let mut gx = Tensor::zeros(d);
    let plane = d.plane();
    gx.data_mut().par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (n, c) = (idx / d.c, idx % d.c);
        let (sg, sgx) = sums[c];
        let k = gamma[c] * cache.inv_std[c];
        let gy = grad_out.plane(n, c);
        let xh = cache.xhat.plane(n, c);
        match cache.mode {
            Mode::Train => {
                for ((o, &g), &h) in dst.iter_mut().zip(gy).zip(xh) {
                    *o = k * (g - sg / count - h * sgx / count);
                }
            }
            Mode::Eval => {
                for (o, &g) in dst.iter_mut().zip(gy) {
                    *o = k * g;
                }
            }
        }
    });
    Ok(NormGrads {
        grad_x: gx,
        grad_gamma: Tensor::vector(sums.iter().map(|s| s.1).collect())?,
        grad_beta: Tensor::vector(sums.iter().map(|s| s.0).collect())?,
    })
}

/// Layer normalization across channels at every (n, h, w) position.
pub fn layernorm_forward(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    layernorm_forward_cached(x, p).map(|(y, _)| y)
}

pub fn layernorm_forward_cached(x: &Tensor, p: &NormParams) -> Result<(Tensor, NormCache)> {
    p.check(x)?;
    match p.kind {
        NormKind::LayerNormChFirst => Ok(layernorm_channel_first(x, p)),
        NormKind::LayerNormChLast => Ok(layernorm_channel_last(x, p)),
        NormKind::BatchNorm => Err(config_err!("layernorm_forward called with BatchNorm")),
    }
}

fn layernorm_channel_first(x: &Tensor, p: &NormParams) -> (Tensor, NormCache) {
    let d = x.dims();
    let plane = d.plane();
    let cf = d.c as f64;
    let (g, b) = (p.gamma.data(), p.beta.data());
    let mut xhat = Tensor::zeros(d);
    let mut y = Tensor::zeros(d);
    let per_sample = d.c * plane;
    let mut inv_std = vec![0.0; d.n * plane];
    xhat.data_mut()
        .par_chunks_mut(per_sample)
        .zip(y.data_mut().par_chunks_mut(per_sample))
        .zip(inv_std.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(n, ((xh, yo), istd))| {
            let src = &x.data()[n * per_sample..][..per_sample];
            let mut mean = vec![0.0; plane];
            for c in 0..d.c {
                mean.iter_mut().zip(&src[c * plane..][..plane]).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= cf);
            let mut var = vec![0.0; plane];
            for c in 0..d.c {
                for ((s, m), v) in var.iter_mut().zip(&mean).zip(&src[c * plane..][..plane]) {
                    *s += (v - m) * (v - m);
                }
            }
            for (i, s) in istd.iter_mut().zip(&var) {
                *i = 1.0 / (s / cf + p.eps).sqrt();
            }
            for c in 0..d.c {
                let off = c * plane;
                for pos in 0..plane {
                    let h = (src[off + pos] - mean[pos]) * istd[pos];
                    xh[off + pos] = h;
                    yo[off + pos] = g[c] * h + b[c];
                }
            }
        });
    (y, NormCache { xhat, inv_std, mode: p.mode })
}

pub(crate) fn to_channel_last(x: &Tensor) -> Vec<f64> {
    let d = x.dims();
    let plane = d.plane();
    let mut out = vec![0.0; d.numel()];
    for n in 0..d.n {
        for c in 0..d.c {
            for (pos, &v) in x.plane(n, c).iter().enumerate() {
                out[(n * plane + pos) * d.c + c] = v;
            }
        }
    }
    out
}

pub(crate) fn from_channel_last(data: &[f64], d: Dims) -> Tensor {
    let plane = d.plane();
    let mut out = Tensor::zeros(d);
    let buf = out.data_mut();
    for n in 0..d.n {
        for pos in 0..plane {
            let row = &data[(n * plane + pos) * d.c..][..d.c];
            for (c, &v) in row.iter().enumerate() {
                buf[(n * d.c + c) * plane + pos] = v;
            }
        }
    }
    out
}

fn layernorm_channel_last(x: &Tensor, p: &NormParams) -> (Tensor, NormCache) {
    let d = x.dims();
    let cf = d.c as f64;
    let (g, b) = (p.gamma.data(), p.beta.data());
    let rows = to_channel_last(x);
    let mut xh_rows = vec![0.0; rows.len()];
    let mut y_rows = vec![0.0; rows.len()];
    let mut inv_std = vec![0.0; d.n * d.plane()];
    rows.par_chunks(d.c)
        .zip(xh_rows.par_chunks_mut(d.c))
        .zip(y_rows.par_chunks_mut(d.c))
        .zip(inv_std.par_iter_mut())
        .for_each(|(((src, xh), yo), istd)| {
            let mean = src.iter().sum::<f64>() / cf;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
            *istd = 1.0 / (var + p.eps).sqrt();
            for c in 0..src.len() {
                xh[c] = (src[c] - mean) * *istd;
                yo[c] = g[c] * xh[c] + b[c];
            }
        });
    let xhat = from_channel_last(&xh_rows, d);
    let y = from_channel_last(&y_rows, d);
    (y, NormCache { xhat, inv_std, mode: p.mode })
}

pub fn layernorm_backward(cache: &NormCache, p: &NormParams, grad_out: &Tensor) -> Result<NormGrads> {
    let d = cache.xhat.dims();
    if grad_out.dims() != d {
        return Err(shape_err!("grad_out {} != layer norm output {d}", grad_out.dims()));
    }
    let plane = d.plane();
    let cf = d.c as f64;
    let gamma = p.gamma.data();
    let mut gx = Tensor::zeros(d);
    let mut ggamma = vec![0.0; d.c];
    let mut gbeta = vec![0.0; d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            for (gy, xh) in grad_out.plane(n, c).iter().zip(cache.xhat.plane(n, c)) {
                ggamma[c] += gy * xh;
                gbeta[c] += gy;
            }
        }
    }
    let per_sample = d.c * plane;
    gx.data_mut().par_chunks_mut(per_sample).enumerate().for_each(|(n, dst)| {
        let gy = &grad_out.data()[n * per_sample..][..per_sample];
        let xh = &cache.xhat.data()[n * per_sample..][..per_sample];
        let mut s1 = vec![0.0; plane];
        let mut s2 = vec![0.0; plane];
        for c in 0..d.c {
            for pos in 0..plane {
                let dxh = gy[c * plane + pos] * gamma[c];
                s1[pos] += dxh;
                s2[pos] += dxh * xh[c * plane + pos];
            }
        }
        for c in 0..d.c {
            for pos in 0..plane {
                let i = c * plane + pos;
                let dxh = gy[i] * gamma[c];
                let istd = cache.inv_std[n * plane + pos];
                dst[i] = istd * (dxh - s1[pos] / cf - xh[i] * s2[pos] / cf);
            }
        }
    });
    Ok(NormGrads {
        grad_x: gx,
        grad_gamma: Tensor::vector(ggamma)?,
        grad_beta: Tensor::vector(gbeta)?,
    })
}

/// Dispatches to batch or layer normalization by kind.
pub fn norm_forward_cached(x: &Tensor, p: &mut NormParams) -> Result<(Tensor, NormCache)> {
    match p.kind {
        NormKind::BatchNorm => batchnorm_forward_cached(x, p),
        _ => layernorm_forward_cached(x, p),
    }
}

pub fn norm_backward(cache: &NormCache, p: &NormParams, grad_out: &Tensor) -> Result<NormGrads> {
    match p.kind {
        NormKind::BatchNorm => batchnorm_backward(cache, p, grad_out),
        _ => layernorm_backward(cache, p, grad_out),
    }
}

/// Inference without touching running statistics.
pub fn norm_infer(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    match p.kind {
        NormKind::BatchNorm => {
            let mut frozen = p.clone();
            frozen.mode = Mode::Eval;
            batchnorm_forward(x, &mut frozen)
        }
        _ => layernorm_forward(x, p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_zero_gives_beta() {
        let x = Tensor::from_vec([2, 2, 2, 1], vec![1.0, 5.0, -2.0, 3.0, 0.5, 9.0, 4.0, -1.0]).unwrap();
        let mut p = NormParams::batch_norm(2);
        p.gamma = Tensor::zeros([1, 2, 1, 1]);
        p.beta = Tensor::vector(vec![0.25, -3.0]).unwrap();
        let y = batchnorm_forward(&x, &mut p).unwrap();
        for n in 0..2 {
            assert_eq!(y.plane(n, 0), &[0.25, 0.25]);
            assert_eq!(y.plane(n, 1), &[-3.0, -3.0]);
        }
    }

    #[test]
    fn standardized_input_passes_through() {
        // channel 0: [-1, 1, -1, 1] has mean 0 and biased variance 1
        let x = Tensor::from_vec([2, 1, 1, 2], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let mut p = NormParams::batch_norm(1);
        let y = batchnorm_forward(&x, &mut p).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-3);
    }

    #[test]
    fn single_value_per_channel_is_degenerate_in_train_mode() {
        let mut p = NormParams::batch_norm(3);
        let err = batchnorm_forward(&Tensor::zeros([1, 3, 1, 1]), &mut p).unwrap_err();
        assert!(matches!(err, Error::DegenerateStats(_)));
        p.mode = Mode::Eval;
        assert!(batchnorm_forward(&Tensor::zeros([1, 3, 1, 1]), &mut p).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let mut p = NormParams::batch_norm(1);
        batchnorm_forward(&x, &mut p).unwrap();
        // mean 2, unbiased variance 2
        assert!((p.running_mean.as_ref().unwrap().data()[0] - 0.2).abs() < 1e-15);
        assert!((p.running_var.as_ref().unwrap().data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_two_point_standardization() {
        let x = Tensor::from_vec([1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        for kind in [NormKind::LayerNormChFirst, NormKind::LayerNormChLast] {
            let mut p = NormParams::layer_norm(2, kind);
            p.eps = 1e-12;
            let y = layernorm_forward(&x, &p).unwrap();
            assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let x = Tensor::full([2, 5, 3, 3], 4.2);
        let p = NormParams::layer_norm(5, NormKind::LayerNormChFirst);
        assert!(layernorm_forward(&x, &p).unwrap().data().iter().all(|&v| v == 0.0));
        // one channel: zero variance, guarded by eps
        let p1 = NormParams::layer_norm(1, NormKind::LayerNormChLast);
        let y = layernorm_forward(&Tensor::full([1, 1, 2, 2], 7.0), &p1).unwrap();
        assert!(y.all_finite());
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let mut bn = NormParams::layer_norm(2, NormKind::LayerNormChFirst);
        assert!(batchnorm_forward(&Tensor::zeros([2, 2, 2, 2]), &mut bn).is_err());
        let ln = NormParams::batch_norm(2);
        assert!(layernorm_forward(&Tensor::zeros([2, 2, 2, 2]), &ln).is_err());
    }
}
