//! Channel split/concat, residual add and broadcast gating.

use crate::error::{shape_err, Result};
use crate::tensor::{Dims, Tensor};

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (da, db) = (a.dims(), b.dims());
    if (da.n, da.h, da.w) != (db.n, db.h, db.w) {
        return Err(shape_err!("cannot concat {da} and {db} along channels"));
    }
    let out = Dims { c: da.c + db.c, ..da };
    let mut data = Vec::with_capacity(out.numel());
    let (sa, sb) = (da.c * da.plane(), db.c * db.plane());
    for n in 0..da.n {
        data.extend_from_slice(&a.data()[n * sa..][..sa]);
        data.extend_from_slice(&b.data()[n * sb..][..sb]);
    }
    Tensor::from_vec(out, data)
}

/// Splits into channels `[0, c_first)` and `[c_first, c)`.
pub fn split_channels(x: &Tensor, c_first: usize) -> Result<(Tensor, Tensor)> {
    let d = x.dims();
    if c_first == 0 || c_first >= d.c {
        return Err(shape_err!("split point {c_first} must lie in [1, {})", d.c));
    }
    let plane = d.plane();
    let per = d.c * plane;
    let (mut a, mut b) = (Vec::with_capacity(d.n * c_first * plane), Vec::new());
    for n in 0..d.n {
        let s = &x.data()[n * per..][..per];
        a.extend_from_slice(&s[..c_first * plane]);
        b.extend_from_slice(&s[c_first * plane..]);
    }
    Ok((
        Tensor::from_vec(Dims { c: c_first, ..d }, a)?,
        Tensor::from_vec(Dims { c: d.c - c_first, ..d }, b)?,
    ))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y)
}

/// `x * gate` with `gate` of dims (n, c, 1, 1) broadcast over (h, w).
pub fn mul_channel_gate(x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let d = x.dims();
    if gate.dims() != Dims::new(d.n, d.c, 1, 1) {
        return Err(shape_err!("gate {} cannot broadcast over {d}", gate.dims()));
    }
    let plane = d.plane();
    let data = x
        .data()
        .chunks(plane)
        .zip(gate.data())
        .flat_map(|(p, &g)| p.iter().map(move |v| v * g))
        .collect();
    Tensor::from_vec(d, data)
}

/// Returns (grad_x, grad_gate).
pub fn mul_channel_gate_backward(x: &Tensor, gate: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = x.dims();
    if grad_out.dims() != d {
        return Err(shape_err!("gate grad_out {} != {d}", grad_out.dims()));
    }
    let grad_x = mul_channel_gate(grad_out, gate)?;
    let plane = d.plane();
    let gg = x
        .data()
        .chunks(plane)
        .zip(grad_out.data().chunks(plane))
        .map(|(xs, gs)| xs.iter().zip(gs).map(|(a, b)| a * b).sum())
        .collect();
    Ok((grad_x, Tensor::from_vec(gate.dims(), gg)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor::from_vec([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec([2, 2, 1, 2], (10..18).map(f64::from).collect()).unwrap();
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.at(1, 0, 0, 1), 4.0);
        assert_eq!(cat.at(1, 2, 0, 0), 16.0);
        let (a2, b2) = split_channels(&cat, 1).unwrap();
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn invalid_split_and_concat() {
        let x = Tensor::zeros([1, 4, 2, 2]);
        assert!(split_channels(&x, 0).is_err());
        assert!(split_channels(&x, 4).is_err());
        assert!(concat_channels(&x, &Tensor::zeros([1, 4, 3, 2])).is_err());
        assert!(add(&x, &Tensor::zeros([1, 4, 2, 1])).is_err());
    }
}
