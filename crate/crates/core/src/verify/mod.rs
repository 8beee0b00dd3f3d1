//! Gradient checks, equivalence oracles, batch-norm folding and the norm benchmark.

mod bench;
pub mod grad;
pub mod oracle;

pub use bench::{bench_norm, BenchResult};
pub use grad::{grad_check, grad_suite, GradCheckReport};
pub use oracle::{naive_conv2d, oracle_suite, OracleResult};

use crate::error::{config_err, Error, Result};
use crate::ops::{ConvParams, Mode, NormKind, NormParams};
use crate::tensor::Tensor;

/// A conv whose output equals `bn(conv(x))` for an eval-mode batch norm.
pub fn fold_bn_into_conv(conv: &ConvParams, bn: &NormParams) -> Result<ConvParams> {
    if bn.kind != NormKind::BatchNorm {
        return Err(config_err!("only batch norm folds into a conv, got {:?}", bn.kind));
    }
    if bn.mode != Mode::Eval {
        return Err(Error::Mode("batch norm must be in eval mode to fold".into()));
    }
    let c = conv.c_out();
    if bn.channels() != c {
        return Err(config_err!("batch norm over {} channels cannot follow a conv with {c} outputs", bn.channels()));
    }
    let (mean, var) = match (&bn.running_mean, &bn.running_var) {
        (Some(m), Some(v)) => (m.data(), v.data()),
        _ => return Err(config_err!("batch norm is missing running statistics")),
    };
    let scale: Vec<f64> = (0..c).map(|i| bn.gamma.data()[i] / (var[i] + bn.eps).sqrt()).collect();
    let per_out = conv.weight.numel() / c;
    let mut w = conv.weight.clone();
    for (o, chunk) in w.data_mut().chunks_mut(per_out).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= scale[o]);
    }
    let b: Vec<f64> = (0..c)
        .map(|i| {
            let b0 = conv.bias.as_ref().map_or(0.0, |b| b.data()[i]);
            (b0 - mean[i]) * scale[i] + bn.beta.data()[i]
        })
        .collect();
    let mut bias = Tensor::vector(b)?;
    if w.requires_grad {
        bias = bias.into_param();
    }
    ConvParams::new(w, Some(bias), conv.stride, conv.groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{batchnorm_forward, conv2d_forward};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_pair(seed: u64) -> (ConvParams, NormParams, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = ConvParams::new(Tensor::randn([5, 3, 3, 3], 0.5, &mut rng), None, 1, 1).unwrap();
        let mut bn = NormParams::batch_norm(5);
        bn.gamma = Tensor::uniform([1, 5, 1, 1], 0.5, 1.5, &mut rng);
        bn.beta = Tensor::randn([1, 5, 1, 1], 0.3, &mut rng);
        bn.running_mean = Some(Tensor::randn([1, 5, 1, 1], 0.3, &mut rng));
        bn.running_var = Some(Tensor::uniform([1, 5, 1, 1], 0.2, 2.0, &mut rng));
        bn.mode = Mode::Eval;
        (conv, bn, Tensor::randn([2, 3, 6, 6], 1.0, &mut rng))
    }

    #[test]
    fn folded_conv_matches_composition() {
        let (conv, mut bn, x) = random_pair(3);
        let want = batchnorm_forward(&conv2d_forward(&x, &conv).unwrap(), &mut bn).unwrap();
        let got = conv2d_forward(&x, &fold_bn_into_conv(&conv, &bn).unwrap()).unwrap();
        assert!(want.max_rel_diff(&got) < 1e-12);
    }

    #[test]
    fn identity_bn_only_rescales_by_eps() {
        let (conv, mut bn, _) = random_pair(4);
        bn.gamma = Tensor::ones([1, 5, 1, 1]);
        bn.beta = Tensor::zeros([1, 5, 1, 1]);
        bn.running_mean = Some(Tensor::zeros([1, 5, 1, 1]));
        bn.running_var = Some(Tensor::ones([1, 5, 1, 1]));
        let f = fold_bn_into_conv(&conv, &bn).unwrap();
        let s = 1.0 / (1.0 + bn.eps).sqrt();
        for (a, b) in f.weight.data().iter().zip(conv.weight.data()) {
            assert!((a - b * s).abs() < 1e-15);
        }
        assert!(f.bias.unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn train_mode_is_rejected() {
        let (conv, mut bn, _) = random_pair(5);
        bn.mode = Mode::Train;
        assert!(matches!(fold_bn_into_conv(&conv, &bn), Err(Error::Mode(_))));
    }
}
