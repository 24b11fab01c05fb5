use rayon::prelude::*;

use super::{axpy, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Convolution kernel laid out as (kh, kw, in_ch, out_ch), output channel fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel<T> {
    pub kh: usize,
    pub kw: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Kernel<T> {
    pub fn zeros(kh: usize, kw: usize, in_ch: usize, out_ch: usize) -> Self {
        Kernel { kh, kw, in_ch, out_ch, data: vec![T::zero(); kh * kw * in_ch * out_ch] }
    }

    pub fn from_vec(kh: usize, kw: usize, in_ch: usize, out_ch: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != kh * kw * in_ch * out_ch {
            return Err(Error::shape(
                "Kernel::from_vec",
                format!("{} values for ({kh}, {kw}, {in_ch}, {out_ch})", data.len()),
            ));
        }
        Ok(Kernel { kh, kw, in_ch, out_ch, data })
    }

    #[inline]
    pub fn offset(&self, di: usize, dj: usize, c: usize, k: usize) -> usize {
        ((di * self.kw + dj) * self.in_ch + c) * self.out_ch + k
    }

    pub fn get(&self, di: usize, dj: usize, c: usize, k: usize) -> T {
        self.data[self.offset(di, dj, c, k)]
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.kh, self.kw, self.in_ch, self.out_ch]
    }

    /// Spatially flipped kernel with input and output channels swapped. A SAME
    /// convolution with it is the adjoint of a SAME convolution with `self`.
    pub(crate) fn flipped_transpose(&self) -> Kernel<T> {
        let mut out = Kernel::zeros(self.kh, self.kw, self.out_ch, self.in_ch);
        for di in 0..self.kh {
            for dj in 0..self.kw {
                for c in 0..self.in_ch {
                    for k in 0..self.out_ch {
                        let o = out.offset(self.kh - 1 - di, self.kw - 1 - dj, k, c);
                        out.data[o] = self.data[self.offset(di, dj, c, k)];
                    }
                }
            }
        }
        out
    }
}

/// Kernel plus optional per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub kernel: Kernel<T>,
    pub bias: Option<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T> {
    pub kernel: Vec<T>,
    pub bias: Option<Vec<T>>,
}

fn check_same_conv<T: Scalar>(op: &'static str, input: Shape, kernel: &Kernel<T>) -> Result<()> {
    if kernel.kh.is_multiple_of(2) || kernel.kw.is_multiple_of(2) {
        return Err(Error::shape(op, format!("kernel extents must be odd, got {}x{}", kernel.kh, kernel.kw)));
    }
    if input.channels != kernel.in_ch {
        return Err(Error::shape(
            op,
            format!("input has {} channels, kernel expects {}", input.channels, kernel.in_ch),
        ));
    }
    Ok(())
}

/// Stride-1 SAME convolution of `input` with `kernel`, added into `out`.
pub(crate) fn conv2d_accumulate<T: Scalar>(input: &Tensor<T>, kernel: &Kernel<T>, out: &mut Tensor<T>) -> Result<()> {
    let s = input.shape();
    check_same_conv("conv2d", s, kernel)?;
    if out.shape() != s.with_channels(kernel.out_ch) {
        return Err(Error::shape("conv2d", format!("output buffer {} for input {s}", out.shape())));
    }
    let (h, w, ci, co) = (s.height, s.width, s.channels, kernel.out_ch);
    let (ph, pw) = (kernel.kh / 2, kernel.kw / 2);
    let in_item = s.item_len();
    let out_item = h * w * co;
    if in_item == 0 || out_item == 0 {
        return Ok(());
    }
    out.data_mut().par_chunks_mut(out_item).zip(input.data().par_chunks(in_item)).for_each(|(o, x)| {
        for i in 0..h {
            for j in 0..w {
                let opx = &mut o[(i * w + j) * co..(i * w + j + 1) * co];
                for di in 0..kernel.kh {
                    let ii = i + di;
                    if ii < ph || ii - ph >= h {
                        continue;
                    }
                    let ii = ii - ph;
                    for dj in 0..kernel.kw {
                        let jj = j + dj;
                        if jj < pw || jj - pw >= w {
                            continue;
                        }
                        let jj = jj - pw;
                        let xpx = &x[(ii * w + jj) * ci..(ii * w + jj + 1) * ci];
                        let kbase = (di * kernel.kw + dj) * ci * co;
                        for (c, &xv) in xpx.iter().enumerate() {
                            if xv == T::zero() {
                                continue;
                            }
                            let krow = &kernel.data[kbase + c * co..kbase + (c + 1) * co];
                            axpy(xv, krow, opx);
                        }
                    }
                }
            }
        }
    });
    Ok(())
}

/// Gradient of a SAME convolution with respect to its input, added into `grad_in`.
pub(crate) fn conv2d_grad_input_accumulate<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Kernel<T>,
    grad_in: &mut Tensor<T>,
) -> Result<()> {
    let adjoint = kernel.flipped_transpose();
    conv2d_accumulate(grad_out, &adjoint, grad_in)
}

/// Gradient of a SAME convolution with respect to its kernel, added into `grad_kernel`.
pub(crate) fn conv2d_grad_kernel_accumulate<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    kernel_dims: [usize; 4],
    grad_kernel: &mut [T],
) -> Result<()> {
    let [kh, kw, ci, co] = kernel_dims;
    let s = input.shape();
    if grad_out.shape() != s.with_channels(co) || s.channels != ci {
        return Err(Error::shape("conv2d_backward", format!("grad_out {} for input {s}", grad_out.shape())));
    }
    if grad_kernel.len() != kh * kw * ci * co {
        return Err(Error::shape("conv2d_backward", "kernel gradient buffer"));
    }
    let (h, w) = (s.height, s.width);
    let (ph, pw) = (kh / 2, kw / 2);
    let x = input.data();
    let g = grad_out.data();
    for b in 0..s.batch {
        for i in 0..h {
            for j in 0..w {
                let go = s.with_channels(co).offset(b, i, j, 0);
                let gpx = &g[go..go + co];
                for di in 0..kh {
                    let ii = i + di;
                    if ii < ph || ii - ph >= h {
                        continue;
                    }
                    let ii = ii - ph;
                    for dj in 0..kw {
                        let jj = j + dj;
                        if jj < pw || jj - pw >= w {
                            continue;
                        }
                        let jj = jj - pw;
                        let xo = s.offset(b, ii, jj, 0);
                        let kbase = (di * kw + dj) * ci * co;
                        for c in 0..ci {
                            let xv = x[xo + c];
                            if xv == T::zero() {
                                continue;
                            }
                            axpy(xv, gpx, &mut grad_kernel[kbase + c * co..kbase + (c + 1) * co]);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Stride-1 convolution with SAME zero padding; output keeps the input's
/// spatial extents.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let k = &params.kernel;
    check_same_conv("conv2d", input.shape(), k)?;
    let mut out = Tensor::zeros(input.shape().with_channels(k.out_ch));
    if let Some(bias) = &params.bias {
        if bias.len() != k.out_ch {
            return Err(Error::shape("conv2d", "bias length differs from out_ch"));
        }
        for px in out.data_mut().chunks_exact_mut(k.out_ch) {
            px.copy_from_slice(bias);
        }
    }
    conv2d_accumulate(input, k, &mut out)?;
    out.ensure_finite("conv2d")
}

/// Gradients of `sum(grad_out * conv2d(input, params))`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvGrads<T>)> {
    let k = &params.kernel;
    check_same_conv("conv2d_backward", input.shape(), k)?;
    if grad_out.shape() != input.shape().with_channels(k.out_ch) {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out {} for input {}", grad_out.shape(), input.shape()),
        ));
    }
    let mut grad_in = Tensor::zeros(input.shape());
    conv2d_grad_input_accumulate(grad_out, k, &mut grad_in)?;
    let mut grad_kernel = vec![T::zero(); k.data.len()];
    conv2d_grad_kernel_accumulate(input, grad_out, k.dims(), &mut grad_kernel)?;
    let bias = params.bias.as_ref().map(|_| channel_sums(grad_out));
    Ok((grad_in.ensure_finite("conv2d_backward")?, ConvGrads { kernel: grad_kernel, bias }))
}

/// Per-channel sum over batch and space.
pub(crate) fn channel_sums<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    let c = t.shape().channels;
    let mut acc = vec![T::zero(); c];
    for px in t.data().chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a += v;
        }
    }
    acc
}
