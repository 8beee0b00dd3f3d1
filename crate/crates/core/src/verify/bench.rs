use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{config_err, Result};
use crate::ops::{conv2d_backward, conv2d_forward, norm, ConvParams, Mode, NormKind, NormParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub ln_seconds: f64,
    pub bn_seconds: f64,
}

impl BenchResult {
    pub fn bn_faster(&self) -> bool {
        self.bn_seconds < self.ln_seconds
    }
}

fn run(kind: NormKind, x: &Tensor, conv: &ConvParams, iters: usize) -> Result<f64> {
    let mut p = NormParams::new(kind, conv.c_out());
    p.mode = Mode::Train;
    let start = Instant::now();
    for _ in 0..iters {
        let y = conv2d_forward(x, conv)?;
        let (z, cache) = norm::norm_forward_cached(&y, &mut p)?;
        let g = norm::norm_backward(&cache, &p, &z)?;
        let back = conv2d_backward(x, conv, &g.grad_x)?;
        std::hint::black_box(back);
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Wall-clock seconds for `iters` forward and backward passes of a 2×2 stride-2
/// conv followed by channel-first layer norm, then batch norm.
pub fn bench_norm(h: usize, w: usize, c: usize, batch: usize, iters: usize) -> Result<BenchResult> {
    if iters == 0 {
        return Err(config_err!("bench_norm needs at least one iteration"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn([batch, c, h, w], 1.0, &mut rng);
    let conv = ConvParams::new(Tensor::randn([c, c, 2, 2], 0.1, &mut rng), None, 2, 1)?;
    let ln_seconds = run(NormKind::LayerNormChFirst, &x, &conv, iters)?;
    let bn_seconds = run(NormKind::BatchNorm, &x, &conv, iters)?;
    Ok(BenchResult { ln_seconds, bn_seconds })
}
