//! 2-D convolution with groups, forward and reverse mode.

use rayon::prelude::*;

use super::counter;
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Dims, Tensor};

/// Weights and hyperparameters of one convolution.
#[derive(Clone, Debug)]
pub struct ConvParams {
    /// (c_out, c_in / groups, k, k)
    pub weight: Tensor,
    /// (1, c_out, 1, 1) when present.
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub groups: usize,
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub grad_x: Tensor,
    pub grad_weight: Tensor,
    pub grad_bias: Option<Tensor>,
}

/// Padding rule: patchify convs (k = 2 or 4 with stride k) tile exactly and take
/// no padding, every other kernel gets `k / 2`.
pub fn conv_padding(k: usize, stride: usize) -> usize {
    if (k == 2 || k == 4) && stride == k {
        0
    } else {
        k / 2
    }
}

/// Output extent along one spatial axis, or `None` if it would be empty.
pub fn conv_out_extent(size: usize, k: usize, stride: usize) -> Option<usize> {
    let pad = conv_padding(k, stride);
    let span = size + 2 * pad;
    if span < k || stride == 0 {
        None
    } else {
        Some((span - k) / stride + 1)
    }
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, groups: usize) -> Result<Self> {
        let wd = weight.dims();
        if wd.h != wd.w {
            return Err(config_err!("only square kernels are supported, got {wd}"));
        }
        if stride == 0 || groups == 0 {
            return Err(config_err!("stride and groups must be positive"));
        }
        if !wd.n.is_multiple_of(groups) {
            return Err(config_err!("c_out {} not divisible by groups {groups}", wd.n));
        }
        if let Some(b) = &bias {
            if b.numel() != wd.n {
                return Err(config_err!("bias length {} != c_out {}", b.numel(), wd.n));
            }
        }
        Ok(ConvParams { weight, bias, stride, groups })
    }

    pub fn c_out(&self) -> usize {
        self.weight.dims().n
    }

    pub fn c_in_per_group(&self) -> usize {
        self.weight.dims().c
    }

    pub fn c_in(&self) -> usize {
        self.c_in_per_group() * self.groups
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims().h
    }

    pub fn padding(&self) -> usize {
        conv_padding(self.kernel(), self.stride)
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.c_in_per_group() == 1 && self.groups == self.c_out()
    }

    /// Output dims for an input of `input` dims.
    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        if input.c != self.c_in() {
            return Err(config_err!(
                "conv expects {} input channels ({} groups x {}), got {}",
                self.c_in(),
                self.groups,
                self.c_in_per_group(),
                input.c
            ));
        }
        let k = self.kernel();
        let oh = conv_out_extent(input.h, k, self.stride);
        let ow = conv_out_extent(input.w, k, self.stride);
        match (oh, ow) {
            (Some(h), Some(w)) => Ok(Dims::new(input.n, self.c_out(), h, w)),
            _ => Err(shape_err!(
                "conv k={k} stride={} on {}x{} has no valid output",
                self.stride,
                input.h,
                input.w
            )),
        }
    }
}

struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(p: &ConvParams, input: Dims, out: Dims) -> Self {
        Geometry {
            k: p.kernel(),
            stride: p.stride,
            pad: p.padding(),
            h: input.h,
            w: input.w,
            oh: out.h,
            ow: out.w,
        }
    }

    /// Range of output columns whose tap `kw` lands inside the input row.
    #[inline]
    fn valid_cols(&self, kw: usize) -> (usize, usize) {
        valid_range(self.ow, self.w, self.stride, kw, self.pad)
    }

    #[inline]
    fn valid_rows(&self, kh: usize) -> (usize, usize) {
        valid_range(self.oh, self.h, self.stride, kh, self.pad)
    }
}

/// Output indices `o` in `[lo, hi)` with `0 <= o*stride + tap - pad < size`.
#[inline]
fn valid_range(out: usize, size: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    // o*stride + tap - pad <= size - 1
    let limit = size + pad;
    let hi = if limit <= tap { 0 } else { ((limit - tap - 1) / stride + 1).min(out) };
    (lo.min(hi), hi)
}

/// Convolution forward pass.
pub fn conv2d_forward(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let out_dims = p.output_dims(x.dims())?;
    if counter::is_counting() {
        return Ok(conv2d_counting(x, p, out_dims));
    }
    let g = Geometry::new(p, x.dims(), out_dims);
    if p.groups == 1 {
        return dense_forward(x, p, out_dims, &g);
    }
    let in_d = x.dims();
    let cin_pg = p.c_in_per_group();
    let cout_pg = p.c_out() / p.groups;
    let kk = g.k * g.k;
    let wdata = p.weight.data();
    let xdata = x.data();
    let bias = p.bias.as_ref().map(|b| b.data());
    let oplane = g.oh * g.ow;
    let mut out = vec![0.0; out_dims.numel()];

    out.par_chunks_mut(oplane).enumerate().for_each(|(idx, plane)| {
        let n = idx / out_dims.c;
        let co = idx % out_dims.c;
        let group = co / cout_pg;
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci_l in 0..cin_pg {
            let ci = group * cin_pg + ci_l;
            let xin = &xdata[(n * in_d.c + ci) * in_d.plane()..][..in_d.plane()];
            let wk = &wdata[(co * cin_pg + ci_l) * kk..][..kk];
            for kh in 0..g.k {
                let (r0, r1) = g.valid_rows(kh);
                for kw in 0..g.k {
                    let wv = wk[kh * g.k + kw];
                    let (c0, c1) = g.valid_cols(kw);
                    if c0 >= c1 {
                        continue;
                    }
                    for orow in r0..r1 {
                        let irow = orow * g.stride + kh - g.pad;
                        let dst = &mut plane[orow * g.ow + c0..orow * g.ow + c1];
                        let base = irow * g.w + kw + c0 * g.stride - g.pad;
                        if g.stride == 1 {
                            let src = &xin[base..base + (c1 - c0)];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += wv * s);
                        } else {
                            for (j, d) in dst.iter_mut().enumerate() {
                                *d += wv * xin[base + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(out_dims, out)
}

/// Serial kernel visiting every (output element, tap) pair, padded taps
/// multiplying zeros, so the tally is the full dense multiply count.
fn conv2d_counting(x: &Tensor, p: &ConvParams, out_dims: Dims) -> Tensor {
    let g = Geometry::new(p, x.dims(), out_dims);
    let cin_pg = p.c_in_per_group();
    let cout_pg = p.c_out() / p.groups;
    let mut out = Tensor::zeros(out_dims);
    let mut muls = 0u64;
    for n in 0..out_dims.n {
        for co in 0..out_dims.c {
            let group = co / cout_pg;
            for orow in 0..g.oh {
                for ocol in 0..g.ow {
                    let mut acc = p.bias.as_ref().map_or(0.0, |b| b.data()[co]);
                    for ci_l in 0..cin_pg {
                        let ci = group * cin_pg + ci_l;
                        for kh in 0..g.k {
                            for kw in 0..g.k {
                                let ir = (orow * g.stride + kh) as isize - g.pad as isize;
                                let ic = (ocol * g.stride + kw) as isize - g.pad as isize;
                                let xv = if ir >= 0 && ic >= 0 && (ir as usize) < g.h && (ic as usize) < g.w {
                                    x.at(n, ci, ir as usize, ic as usize)
                                } else {
                                    0.0
                                };
                                acc += p.weight.at(co, ci_l, kh, kw) * xv;
                                muls += 1;
                            }
                        }
                    }
                    let idx = out.index(n, co, orow, ocol);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    counter::tally(muls);
    out
}

/// Convolution reverse pass: gradients for input, weight and bias.
pub fn conv2d_backward(x: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let out_dims = p.output_dims(x.dims())?;
    if grad_out.dims() != out_dims {
        return Err(shape_err!("grad_out dims {} != conv output dims {out_dims}", grad_out.dims()));
    }
    let in_d = x.dims();
    let g = Geometry::new(p, in_d, out_dims);
    if p.groups == 1 {
        return dense_backward(x, p, grad_out, &g);
    }
    let cin_pg = p.c_in_per_group();
    let cout_pg = p.c_out() / p.groups;
    let kk = g.k * g.k;
    let oplane = g.oh * g.ow;
    let xdata = x.data();
    let gy = grad_out.data();
    let wdata = p.weight.data();

    let grad_bias = match &p.bias {
        Some(_) => {
            let mut gb = vec![0.0; p.c_out()];
            for n in 0..out_dims.n {
                for (co, acc) in gb.iter_mut().enumerate() {
                    *acc += grad_out.plane(n, co).iter().sum::<f64>();
                }
            }
            Some(Tensor::vector(gb)?)
        }
        None => None,
    };

    // Weight gradient, one output channel per task.
    let mut gw = vec![0.0; p.weight.numel()];
    gw.par_chunks_mut(cin_pg * kk).enumerate().for_each(|(co, gwc)| {
        let group = co / cout_pg;
        for n in 0..out_dims.n {
            let gyp = &gy[(n * out_dims.c + co) * oplane..][..oplane];
            for ci_l in 0..cin_pg {
                let ci = group * cin_pg + ci_l;
                let xin = &xdata[(n * in_d.c + ci) * in_d.plane()..][..in_d.plane()];
                for kh in 0..g.k {
                    let (r0, r1) = g.valid_rows(kh);
                    for kw in 0..g.k {
                        let (c0, c1) = g.valid_cols(kw);
                        if c0 >= c1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for orow in r0..r1 {
                            let irow = orow * g.stride + kh - g.pad;
                            let base = irow * g.w + kw + c0 * g.stride - g.pad;
                            let grow = &gyp[orow * g.ow + c0..orow * g.ow + c1];
                            if g.stride == 1 {
                                let src = &xin[base..base + grow.len()];
                                acc += grow.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            } else {
                                for (j, gv) in grow.iter().enumerate() {
                                    acc += gv * xin[base + j * g.stride];
                                }
                            }
                        }
                        gwc[ci_l * kk + kh * g.k + kw] += acc;
                    }
                }
            }
        }
    });

    // Input gradient, one input plane per task.
    let mut gx = vec![0.0; in_d.numel()];
    gx.par_chunks_mut(in_d.plane()).enumerate().for_each(|(idx, gxp)| {
        let n = idx / in_d.c;
        let ci = idx % in_d.c;
        let group = ci / cin_pg;
        let ci_l = ci % cin_pg;
        for co in group * cout_pg..(group + 1) * cout_pg {
            let gyp = &gy[(n * out_dims.c + co) * oplane..][..oplane];
            let wk = &wdata[(co * cin_pg + ci_l) * kk..][..kk];
            for kh in 0..g.k {
                let (r0, r1) = g.valid_rows(kh);
                for kw in 0..g.k {
                    let wv = wk[kh * g.k + kw];
                    let (c0, c1) = g.valid_cols(kw);
                    if c0 >= c1 {
                        continue;
                    }
                    for orow in r0..r1 {
                        let irow = orow * g.stride + kh - g.pad;
                        let base = irow * g.w + kw + c0 * g.stride - g.pad;
                        let grow = &gyp[orow * g.ow + c0..orow * g.ow + c1];
                        if g.stride == 1 {
                            let dst = &mut gxp[base..base + grow.len()];
                            dst.iter_mut().zip(grow).for_each(|(d, s)| *d += wv * s);
                        } else {
                            for (j, gv) in grow.iter().enumerate() {
                                gxp[base + j * g.stride] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    });

    Ok(ConvGrads {
        grad_x: Tensor::from_vec(in_d, gx)?,
        grad_weight: Tensor::from_vec(p.weight.dims(), gw)?,
        grad_bias,
    })
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one sample (c, h, w) into a (c·k·k, oh·ow) matrix, zeros where taps
/// fall in the padding.
fn im2col(xin: &[f64], g: &Geometry, cin: usize) -> Vec<f64> {
    let cols = g.oh * g.ow;
    let plane = g.h * g.w;
    let mut col = vec![0.0; cin * g.k * g.k * cols];
    for ci in 0..cin {
        let src = &xin[ci * plane..][..plane];
        for kh in 0..g.k {
            let (r0, r1) = g.valid_rows(kh);
            for kw in 0..g.k {
                let (c0, c1) = g.valid_cols(kw);
                if c0 >= c1 {
                    continue;
                }
                let row = &mut col[((ci * g.k + kh) * g.k + kw) * cols..][..cols];
                for orow in r0..r1 {
                    let irow = orow * g.stride + kh - g.pad;
                    let base = irow * g.w + kw + c0 * g.stride - g.pad;
                    let dst = &mut row[orow * g.ow + c0..orow * g.ow + c1];
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = src[base + j * g.stride];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of `im2col`: scatters a (c·k·k, oh·ow) matrix back onto (c, h, w).
fn col2im(col: &[f64], g: &Geometry, cin: usize, gx: &mut [f64]) {
    let cols = g.oh * g.ow;
    let plane = g.h * g.w;
    for ci in 0..cin {
        let dst = &mut gx[ci * plane..][..plane];
        for kh in 0..g.k {
            let (r0, r1) = g.valid_rows(kh);
            for kw in 0..g.k {
                let (c0, c1) = g.valid_cols(kw);
                if c0 >= c1 {
                    continue;
                }
                let row = &col[((ci * g.k + kh) * g.k + kw) * cols..][..cols];
                for orow in r0..r1 {
                    let irow = orow * g.stride + kh - g.pad;
                    let base = irow * g.w + kw + c0 * g.stride - g.pad;
                    for (j, v) in row[orow * g.ow + c0..orow * g.ow + c1].iter().enumerate() {
                        dst[base + j * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// c = alpha · op(a) · op(b) + beta · c over row-major buffers with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dense_forward(x: &Tensor, p: &ConvParams, out_dims: Dims, g: &Geometry) -> Result<Tensor> {
    let cin = p.c_in();
    let cout = p.c_out();
    let rows = cin * g.k * g.k;
    let cols = g.oh * g.ow;
    let in_size = cin * g.h * g.w;
    let w = p.weight.data();
    let mut out = vec![0.0; out_dims.numel()];
    out.par_chunks_mut(cout * cols).enumerate().for_each(|(n, o)| {
        let xin = &x.data()[n * in_size..][..in_size];
        let unfolded;
        let col = if g.is_pointwise() {
            xin
        } else {
            unfolded = im2col(xin, g, cin);
            &unfolded
        };
        let beta = match &p.bias {
            Some(b) => {
                for (row, &bv) in o.chunks_mut(cols).zip(b.data()) {
                    row.iter_mut().for_each(|v| *v = bv);
                }
                1.0
            }
            None => 0.0,
        };
        gemm(cout, rows, cols, w, (rows, 1), col, (cols, 1), beta, o);
    });
    Tensor::from_vec(out_dims, out)
}

fn dense_backward(x: &Tensor, p: &ConvParams, grad_out: &Tensor, g: &Geometry) -> Result<ConvGrads> {
    let in_d = x.dims();
    let cin = p.c_in();
    let cout = p.c_out();
    let rows = cin * g.k * g.k;
    let cols = g.oh * g.ow;
    let in_size = cin * g.h * g.w;
    let w = p.weight.data();
    let gy = grad_out.data();

    let grad_bias = match &p.bias {
        Some(_) => {
            let mut gb = vec![0.0; cout];
            for (i, chunk) in gy.chunks(cols).enumerate() {
                gb[i % cout] += chunk.iter().sum::<f64>();
            }
            Some(Tensor::vector(gb)?)
        }
        None => None,
    };

    let mut gx = vec![0.0; in_d.numel()];
    let per_sample: Vec<Vec<f64>> = gx
        .par_chunks_mut(in_size)
        .enumerate()
        .map(|(n, gxn)| {
            let xin = &x.data()[n * in_size..][..in_size];
            let gyn = &gy[n * cout * cols..][..cout * cols];
            let unfolded;
            let col = if g.is_pointwise() {
                xin
            } else {
                unfolded = im2col(xin, g, cin);
                &unfolded
            };
            // gW_n = gY_n · colᵀ
            let mut gw = vec![0.0; cout * rows];
            gemm(cout, cols, rows, gyn, (cols, 1), col, (1, cols), 0.0, &mut gw);
            // gcol = Wᵀ · gY_n
            if g.is_pointwise() {
                gemm(rows, cout, cols, w, (1, rows), gyn, (cols, 1), 0.0, gxn);
            } else {
                let mut gcol = vec![0.0; rows * cols];
                gemm(rows, cout, cols, w, (1, rows), gyn, (cols, 1), 0.0, &mut gcol);
                col2im(&gcol, g, cin, gxn);
            }
            gw
        })
        .collect();
    let mut gw = vec![0.0; cout * rows];
    for part in per_sample {
        gw.iter_mut().zip(part).for_each(|(a, b)| *a += b);
    }
    Ok(ConvGrads {
        grad_x: Tensor::from_vec(in_d, gx)?,
        grad_weight: Tensor::from_vec(p.weight.dims(), gw)?,
        grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(weight: Tensor, stride: usize, groups: usize) -> ConvParams {
        ConvParams::new(weight, None, stride, groups).unwrap()
    }

    #[test]
    fn one_by_one_scalar_scaling() {
        let x = Tensor::ones([1, 1, 2, 2]);
        let p = params(Tensor::full([1, 1, 1, 1], 2.0), 1, 1);
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.data(), &[2.0; 4]);
    }

    #[test]
    fn patchify_2x2_output_dims() {
        let p = params(Tensor::zeros([32, 3, 2, 2]), 2, 1);
        assert_eq!(p.padding(), 0);
        assert_eq!(p.output_dims(Dims::new(1, 3, 224, 224)).unwrap(), Dims::new(1, 32, 112, 112));
        let p4 = params(Tensor::zeros([96, 3, 4, 4]), 4, 1);
        assert_eq!(p4.output_dims(Dims::new(1, 3, 224, 224)).unwrap(), Dims::new(1, 96, 56, 56));
    }

    #[test]
    fn same_padding_for_odd_kernels() {
        for k in [1, 3, 7] {
            let p = params(Tensor::zeros([1, 1, k, k]), 1, 1);
            assert_eq!(p.output_dims(Dims::new(1, 1, 9, 9)).unwrap(), Dims::new(1, 1, 9, 9));
        }
        let s2 = params(Tensor::zeros([1, 1, 3, 3]), 2, 1);
        assert_eq!(s2.output_dims(Dims::new(1, 1, 224, 224)).unwrap().h, 112);
    }

    #[test]
    fn channel_group_mismatch_is_config_error() {
        let p = params(Tensor::zeros([4, 2, 3, 3]), 1, 2);
        let err = conv2d_forward(&Tensor::zeros([1, 3, 4, 4]), &p).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
        assert!(ConvParams::new(Tensor::zeros([3, 1, 3, 3]), None, 1, 2).is_err());
    }

    #[test]
    fn empty_output_is_shape_error() {
        let p = params(Tensor::zeros([1, 1, 4, 4]), 4, 1);
        let err = conv2d_forward(&Tensor::zeros([1, 1, 2, 2]), &p).unwrap_err();
        assert!(matches!(err, crate::Error::Shape(_)));
    }

    #[test]
    fn identity_1x1_backward_passes_gradient_through() {
        let x = Tensor::ones([1, 3, 2, 2]);
        let mut w = Tensor::zeros([3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let p = params(w, 1, 1);
        let g = conv2d_backward(&x, &p, &Tensor::ones([1, 3, 2, 2])).unwrap();
        assert_eq!(g.grad_x.data(), &[1.0; 12]);
    }

    #[test]
    fn backward_rejects_wrong_grad_dims() {
        let p = params(Tensor::zeros([1, 1, 3, 3]), 1, 1);
        let x = Tensor::zeros([1, 1, 4, 4]);
        assert!(conv2d_backward(&x, &p, &Tensor::zeros([1, 1, 3, 3])).is_err());
    }

    #[test]
    fn counting_kernel_matches_fast_kernel() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([2, 4, 6, 5], 1.0, &mut rng);
        let p = ConvParams::new(
            Tensor::randn([6, 2, 3, 3], 1.0, &mut rng),
            Some(Tensor::randn([1, 6, 1, 1], 1.0, &mut rng)),
            2,
            2,
        )
        .unwrap();
        let fast = conv2d_forward(&x, &p).unwrap();
        let (counted, muls) = counter::count_multiplies(|| conv2d_forward(&x, &p).unwrap());
        assert!(fast.max_abs_diff(&counted) < 1e-12);
        let od = fast.dims();
        assert_eq!(muls, (od.numel() * 2 * 9) as u64);
    }
}
