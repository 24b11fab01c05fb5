use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Winning position (0..4, row-major within the 2x2 window) per pooled element.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolMask {
    input_shape: Shape,
    winners: Vec<u8>,
}

impl PoolMask {
    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn winners(&self) -> &[u8] {
        &self.winners
    }
}

/// 2x2 max-pooling with stride 2. Ties go to the first maximum in row-major
/// window order.
pub fn maxpool2x2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolMask)> {
    let s = input.shape();
    if !s.height.is_multiple_of(2) || !s.width.is_multiple_of(2) {
        return Err(Error::shape("maxpool2x2", format!("spatial extents must be even, got {}x{}", s.height, s.width)));
    }
    let os = Shape::new(s.batch, s.height / 2, s.width / 2, s.channels);
    let mut out = Vec::with_capacity(os.len());
    let mut winners = Vec::with_capacity(os.len());
    let x = input.data();
    let c = s.channels;
    for b in 0..s.batch {
        for i in 0..os.height {
            for j in 0..os.width {
                let o00 = s.offset(b, 2 * i, 2 * j, 0);
                let o01 = o00 + c;
                let o10 = s.offset(b, 2 * i + 1, 2 * j, 0);
                let o11 = o10 + c;
                for k in 0..c {
                    let mut best = x[o00 + k];
                    let mut arg = 0u8;
                    for (pos, off) in [(1u8, o01), (2, o10), (3, o11)] {
                        let v = x[off + k];
                        if v > best {
                            best = v;
                            arg = pos;
                        }
                    }
                    out.push(best);
                    winners.push(arg);
                }
            }
        }
    }
    Ok((Tensor::from_vec(os, out)?, PoolMask { input_shape: s, winners }))
}

/// Routes each pooled gradient to its window's winner.
pub fn maxpool2x2_backward<T: Scalar>(grad_out: &Tensor<T>, mask: &PoolMask) -> Result<Tensor<T>> {
    let s = mask.input_shape;
    let os = Shape::new(s.batch, s.height / 2, s.width / 2, s.channels);
    if grad_out.shape() != os {
        return Err(Error::shape(
            "maxpool2x2_backward",
            format!("grad_out {} for pooled shape {os}", grad_out.shape()),
        ));
    }
    let mut grad_in = Tensor::zeros(s);
    let g = grad_out.data();
    let gi = grad_in.data_mut();
    let c = s.channels;
    let mut idx = 0;
    for b in 0..s.batch {
        for i in 0..os.height {
            for j in 0..os.width {
                for k in 0..c {
                    let w = mask.winners[idx];
                    let (di, dj) = ((w / 2) as usize, (w % 2) as usize);
                    gi[s.offset(b, 2 * i + di, 2 * j + dj, k)] += g[idx];
                    idx += 1;
                }
            }
        }
    }
    Ok(grad_in)
}
