//! Fully connected maps, applied per sample or per spatial position.

use rayon::prelude::*;

use super::counter;
use super::norm::{from_channel_last, to_channel_last};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Dims, Tensor};

/// Weight (out, in, 1, 1) and bias (1, out, 1, 1).
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub grad_x: Tensor,
    pub grad_weight: Tensor,
    pub grad_bias: Tensor,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let wd = weight.dims();
        if wd.h != 1 || wd.w != 1 {
            return Err(config_err!("linear weight must be (out, in, 1, 1), got {wd}"));
        }
        if bias.numel() != wd.n {
            return Err(config_err!("linear bias length {} != out width {}", bias.numel(), wd.n));
        }
        Ok(LinearParams { weight, bias })
    }

    pub fn in_width(&self) -> usize {
        self.weight.dims().c
    }

    pub fn out_width(&self) -> usize {
        self.weight.dims().n
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Affine map of each sample's flattened (c, h, w) values; output (n, out, 1, 1).
pub fn fully_connected(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    let d = x.dims();
    let width = d.c * d.plane();
    if width != p.in_width() {
        return Err(shape_err!("linear expects {} inputs per sample, got {width}", p.in_width()));
    }
    let out_w = p.out_width();
    let w = p.weight.data();
    let b = p.bias.data();
    let mut out = vec![0.0; d.n * out_w];
    if counter::is_counting() {
        counter::tally((d.n * out_w * width) as u64);
    }
    out.par_chunks_mut(out_w).enumerate().for_each(|(n, row)| {
        let xs = &x.data()[n * width..][..width];
        for (o, dst) in row.iter_mut().enumerate() {
            let wr = &w[o * width..][..width];
            *dst = b[o] + wr.iter().zip(xs).map(|(a, v)| a * v).sum::<f64>();
        }
    });
    Tensor::from_vec(Dims::new(d.n, out_w, 1, 1), out)
}

pub fn fully_connected_backward(x: &Tensor, p: &LinearParams, grad_out: &Tensor) -> Result<LinearGrads> {
    let d = x.dims();
    let width = d.c * d.plane();
    let out_w = p.out_width();
    if grad_out.dims() != Dims::new(d.n, out_w, 1, 1) {
        return Err(shape_err!("linear grad_out {} does not match ({}, {out_w}, 1, 1)", grad_out.dims(), d.n));
    }
    let gy = grad_out.data();
    let w = p.weight.data();
    let mut gw = vec![0.0; out_w * width];
    gw.par_chunks_mut(width).enumerate().for_each(|(o, row)| {
        for n in 0..d.n {
            let g = gy[n * out_w + o];
            if g != 0.0 {
                let xs = &x.data()[n * width..][..width];
                row.iter_mut().zip(xs).for_each(|(r, v)| *r += g * v);
            }
        }
    });
    let mut gb = vec![0.0; out_w];
    for n in 0..d.n {
        gb.iter_mut().zip(&gy[n * out_w..][..out_w]).for_each(|(b, g)| *b += g);
    }
    let mut gx = vec![0.0; d.n * width];
    gx.par_chunks_mut(width).enumerate().for_each(|(n, row)| {
        for o in 0..out_w {
            let g = gy[n * out_w + o];
            let wr = &w[o * width..][..width];
            row.iter_mut().zip(wr).for_each(|(r, a)| *r += g * a);
        }
    });
    Ok(LinearGrads {
        grad_x: Tensor::from_vec(d, gx)?,
        grad_weight: Tensor::from_vec(p.weight.dims(), gw)?,
        grad_bias: Tensor::vector(gb)?,
    })
}

fn rows_view(x: &Tensor) -> Result<Tensor> {
    let d = x.dims();
    Tensor::from_vec(Dims::new(d.n * d.plane(), d.c, 1, 1), to_channel_last(x))
}

fn unrows(rows: &Tensor, d: Dims, c: usize) -> Tensor {
    from_channel_last(rows.data(), Dims { c, ..d })
}

/// The same linear map applied to every (n, h, w) position in channel-last layout.
pub fn pointwise_linear(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    let d = x.dims();
    if d.c != p.in_width() {
        return Err(shape_err!("pointwise linear expects {} channels, got {}", p.in_width(), d.c));
    }
    let y = fully_connected(&rows_view(x)?, p)?;
    Ok(unrows(&y, d, p.out_width()))
}

pub fn pointwise_linear_backward(x: &Tensor, p: &LinearParams, grad_out: &Tensor) -> Result<LinearGrads> {
    let d = x.dims();
    let g = fully_connected_backward(&rows_view(x)?, p, &rows_view(grad_out)?)?;
    Ok(LinearGrads { grad_x: unrows(&g.grad_x, d, d.c), ..g })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_returns_input() {
        let mut w = Tensor::zeros([3, 3, 1, 1]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let p = LinearParams::new(w, Tensor::zeros([1, 3, 1, 1])).unwrap();
        let x = Tensor::from_vec([2, 3, 1, 1], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        assert_eq!(fully_connected(&x, &p).unwrap(), x);
    }

    #[test]
    fn classifier_head_parameter_count() {
        let p = LinearParams::new(Tensor::zeros([1000, 1024, 1, 1]), Tensor::zeros([1, 1000, 1, 1])).unwrap();
        assert_eq!(p.param_count(), 1_025_000);
    }

    #[test]
    fn width_mismatch_is_error() {
        let p = LinearParams::new(Tensor::zeros([2, 3, 1, 1]), Tensor::zeros([1, 2, 1, 1])).unwrap();
        assert!(fully_connected(&Tensor::zeros([1, 4, 1, 1]), &p).is_err());
        assert!(LinearParams::new(Tensor::zeros([2, 3, 1, 1]), Tensor::zeros([1, 3, 1, 1])).is_err());
    }
}
