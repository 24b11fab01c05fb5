//! 3x3 transposed convolution with output stride 2.
//!
//! Defined as the adjoint of a stride-2 SAME convolution from a `2n` grid to an
//! `n` grid. For a 3x3 kernel that convolution pads one row/column at the
//! bottom/right only, so input pixel `(i, j)` scatters into output pixels
//! `(2i + di, 2j + dj)` for taps `di, dj` in `0..3`, dropping taps that fall
//! past the last row or column. Output extents are exactly twice the input's.

use super::{axpy, dot, ConvGrads, ConvParams, Kernel, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

fn check(op: &'static str, input: Shape, kernel: &Kernel<impl Scalar>) -> Result<()> {
    if kernel.kh != 3 || kernel.kw != 3 {
        return Err(Error::shape(
            op,
            format!("transposed convolution needs a 3x3 kernel, got {}x{}", kernel.kh, kernel.kw),
        ));
    }
    if input.channels != kernel.in_ch {
        return Err(Error::shape(
            op,
            format!("input has {} channels, kernel expects {}", input.channels, kernel.in_ch),
        ));
    }
    Ok(())
}

fn upsampled(s: Shape, channels: usize) -> Shape {
    Shape::new(s.batch, 2 * s.height, 2 * s.width, channels)
}

pub(crate) fn transposed_conv2d_accumulate<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Kernel<T>,
    out: &mut Tensor<T>,
) -> Result<()> {
    let s = input.shape();
    check("transposed_conv2d", s, kernel)?;
    let os = upsampled(s, kernel.out_ch);
    if out.shape() != os {
        return Err(Error::shape("transposed_conv2d", format!("output buffer {} for input {s}", out.shape())));
    }
    let (ci, co) = (kernel.in_ch, kernel.out_ch);
    let x = input.data();
    let o = out.data_mut();
    for b in 0..s.batch {
        for i in 0..s.height {
            for j in 0..s.width {
                let xo = s.offset(b, i, j, 0);
                for di in 0..3 {
                    let oi = 2 * i + di;
                    if oi >= os.height {
                        continue;
                    }
                    for dj in 0..3 {
                        let oj = 2 * j + dj;
                        if oj >= os.width {
                            continue;
                        }
                        let oo = os.offset(b, oi, oj, 0);
                        let kbase = (di * 3 + dj) * ci * co;
                        for c in 0..ci {
                            let xv = x[xo + c];
                            if xv == T::zero() {
                                continue;
                            }
                            axpy(xv, &kernel.data[kbase + c * co..kbase + (c + 1) * co], &mut o[oo..oo + co]);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

pub(crate) fn transposed_conv2d_grad_input_accumulate<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Kernel<T>,
    grad_in: &mut Tensor<T>,
) -> Result<()> {
    let s = grad_in.shape();
    check("transposed_conv2d_backward", s, kernel)?;
    let os = upsampled(s, kernel.out_ch);
    if grad_out.shape() != os {
        return Err(Error::shape("transposed_conv2d_backward", format!("grad_out {} for input {s}", grad_out.shape())));
    }
    let (ci, co) = (kernel.in_ch, kernel.out_ch);
    let g = grad_out.data();
    let gi = grad_in.data_mut();
    for b in 0..s.batch {
        for i in 0..s.height {
            for j in 0..s.width {
                let xo = s.offset(b, i, j, 0);
                for di in 0..3 {
                    let oi = 2 * i + di;
                    if oi >= os.height {
                        continue;
                    }
                    for dj in 0..3 {
                        let oj = 2 * j + dj;
                        if oj >= os.width {
                            continue;
                        }
                        let oo = os.offset(b, oi, oj, 0);
                        let gpx = &g[oo..oo + co];
                        let kbase = (di * 3 + dj) * ci * co;
                        for c in 0..ci {
                            gi[xo + c] += dot(gpx, &kernel.data[kbase + c * co..kbase + (c + 1) * co]);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

pub(crate) fn transposed_conv2d_grad_kernel_accumulate<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    kernel_dims: [usize; 4],
    grad_kernel: &mut [T],
) -> Result<()> {
    let [_, _, ci, co] = kernel_dims;
    let s = input.shape();
    let os = upsampled(s, co);
    if grad_out.shape() != os || s.channels != ci || grad_kernel.len() != 9 * ci * co {
        return Err(Error::shape("transposed_conv2d_backward", format!("grad_out {} for input {s}", grad_out.shape())));
    }
    let x = input.data();
    let g = grad_out.data();
    for b in 0..s.batch {
        for i in 0..s.height {
            for j in 0..s.width {
                let xo = s.offset(b, i, j, 0);
                for di in 0..3 {
                    let oi = 2 * i + di;
                    if oi >= os.height {
                        continue;
                    }
                    for dj in 0..3 {
                        let oj = 2 * j + dj;
                        if oj >= os.width {
                            continue;
                        }
                        let oo = os.offset(b, oi, oj, 0);
                        let kbase = (di * 3 + dj) * ci * co;
                        for c in 0..ci {
                            let xv = x[xo + c];
                            if xv == T::zero() {
                                continue;
                            }
                            axpy(xv, &g[oo..oo + co], &mut grad_kernel[kbase + c * co..kbase + (c + 1) * co]);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Upsamples `input` to twice its spatial extents. The bias, if present, is
/// added to every output pixel.
pub fn transposed_conv2d<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let k = &params.kernel;
    check("transposed_conv2d", input.shape(), k)?;
    let mut out = Tensor::zeros(upsampled(input.shape(), k.out_ch));
    if let Some(bias) = &params.bias {
        for px in out.data_mut().chunks_exact_mut(k.out_ch) {
            px.copy_from_slice(bias);
        }
    }
    transposed_conv2d_accumulate(input, k, &mut out)?;
    out.ensure_finite("transposed_conv2d")
}

pub fn transposed_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvGrads<T>)> {
    let k = &params.kernel;
    let mut grad_in = Tensor::zeros(input.shape());
    transposed_conv2d_grad_input_accumulate(grad_out, k, &mut grad_in)?;
    let mut grad_kernel = vec![T::zero(); k.data.len()];
    transposed_conv2d_grad_kernel_accumulate(input, grad_out, k.dims(), &mut grad_kernel)?;
    let bias = params.bias.as_ref().map(|_| super::conv::channel_sums(grad_out));
    Ok((grad_in.ensure_finite("transposed_conv2d_backward")?, ConvGrads { kernel: grad_kernel, bias }))
}
