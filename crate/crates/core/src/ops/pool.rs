use crate::error::{shape_err, Result};
use crate::tensor::{Dims, Tensor};

/// Mean over (h, w); output dims (n, c, 1, 1).
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let d = x.dims();
    let inv = 1.0 / d.plane() as f64;
    let data = (0..d.n * d.c)
        .map(|i| x.plane(i / d.c, i % d.c).iter().sum::<f64>() * inv)
        .collect();
    Tensor::from_vec(Dims::new(d.n, d.c, 1, 1), data).expect("pooled dims")
}

/// Spreads each pooled gradient uniformly over its (h, w) plane.
pub fn global_avg_pool_backward(input: Dims, grad_out: &Tensor) -> Result<Tensor> {
    let gd = grad_out.dims();
    if gd != Dims::new(input.n, input.c, 1, 1) {
        return Err(shape_err!("pool grad {gd} does not match input {input}"));
    }
    let plane = input.plane();
    let inv = 1.0 / plane as f64;
    let mut data = Vec::with_capacity(input.numel());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::from_vec(input, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_plane() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[2.5]);
        let c = Tensor::full([2, 3, 4, 5], -1.5);
        assert!(global_avg_pool(&c).data().iter().all(|&v| v == -1.5));
    }

    #[test]
    fn backward_is_uniform() {
        let g = Tensor::from_vec([1, 2, 1, 1], vec![4.0, 8.0]).unwrap();
        let gx = global_avg_pool_backward(Dims::new(1, 2, 2, 2), &g).unwrap();
        assert_eq!(gx.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }
}
