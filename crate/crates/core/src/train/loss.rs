use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor;

/// Mean label-smoothed cross entropy over the batch and its gradient with
/// respect to the logits. The target puts 1 - s on the true class and
/// s / (K - 1) on every other class.
pub fn smoothed_cross_entropy(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<(f64, Tensor)> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(config_err!("label smoothing must lie in [0, 1), got {smoothing}"));
    }
    let d = logits.dims();
    let k = d.c * d.plane();
    if labels.len() != d.n || k < 2 {
        return Err(shape_err!("{} labels for logits {d}", labels.len()));
    }
    let off = smoothing / (k - 1) as f64;
    let mut grad = vec![0.0; logits.numel()];
    let mut total = 0.0;
    for (i, (row, &label)) in logits.data().chunks(k).zip(labels).enumerate() {
        if label >= k {
            return Err(shape_err!("label {label} out of range for {k} classes"));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (j, v) in row.iter().enumerate() {
            let t = if j == label { 1.0 - smoothing } else { off };
            let logp = v - lse;
            total -= t * logp;
            grad[i * k + j] = (logp.exp() - t) / d.n as f64;
        }
    }
    Ok((total / d.n as f64, Tensor::from_vec(d, grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        for (k, s) in [(4, 0.1), (1000, 0.1), (4, 0.0)] {
            let (l, _) = smoothed_cross_entropy(&Tensor::zeros([2, k, 1, 1]), &[0, 1], s).unwrap();
            assert!((l - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_logit_has_no_loss() {
        let x = Tensor::from_vec([1, 3, 1, 1], vec![0.0, 200.0, 0.0]).unwrap();
        let (l, _) = smoothed_cross_entropy(&x, &[1], 0.0).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn gradient_matches_central_difference() {
        let x = Tensor::from_vec([2, 4, 1, 1], vec![0.3, -1.2, 2.0, 0.1, 1.0, 0.0, -0.5, 0.7]).unwrap();
        let labels = [2, 0];
        let (_, g) = smoothed_cross_entropy(&x, &labels, 0.1).unwrap();
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let lp = smoothed_cross_entropy(&p, &labels, 0.1).unwrap().0;
            p.data_mut()[i] -= 2.0 * h;
            let lm = smoothed_cross_entropy(&p, &labels, 0.1).unwrap().0;
            assert!(((lp - lm) / (2.0 * h) - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_smoothing() {
        assert!(smoothed_cross_entropy(&Tensor::zeros([1, 4, 1, 1]), &[0], 1.0).is_err());
    }
}
