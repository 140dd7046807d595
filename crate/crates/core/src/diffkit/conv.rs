//! Per-sample convolution kernels (im2col + GEMM).

use super::gemm::{gemm, MatMut, MatRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_pixels()
    }

    pub fn kernel_len(&self) -> usize {
        self.out_c * self.patch()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn macs(&self) -> u64 {
        (self.kernel_len() * self.out_pixels()) as u64
    }
}

/// Output columns `[lo, hi)` whose input column `ox*stride + j - pad` lies
/// inside `[0, w)`.
fn valid_range(out: usize, len: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    // ox*stride + offset >= pad  and  ox*stride + offset < len + pad
    let lo = if offset >= pad {
        0
    } else {
        (pad - offset).div_ceil(stride)
    };
    let hi = if len + pad > offset {
        ((len + pad - offset - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut col = vec![0.0; g.patch() * p];
    for c in 0..g.in_c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            let (ylo, yhi) = valid_range(oh, g.h, g.stride, i, g.pad);
            for j in 0..g.kw {
                let (xlo, xhi) = valid_range(ow, g.w, g.stride, j, g.pad);
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in ylo..yhi {
                    let y = oy * g.stride + i - g.pad;
                    let src_row = &plane[y * g.w..(y + 1) * g.w];
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let x0 = xlo + j - g.pad;
                        d[xlo..xhi].copy_from_slice(&src_row[x0..x0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            d[ox] = src_row[ox * g.stride + j - g.pad];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(g: &ConvGeom, col: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut x = vec![0.0; g.in_len()];
    for c in 0..g.in_c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            let (ylo, yhi) = valid_range(oh, g.h, g.stride, i, g.pad);
            for j in 0..g.kw {
                let (xlo, xhi) = valid_range(ow, g.w, g.stride, j, g.pad);
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * p..(row + 1) * p];
                for oy in ylo..yhi {
                    let y = oy * g.stride + i - g.pad;
                    let dst_row = &mut plane[y * g.w..(y + 1) * g.w];
                    let s = &src[oy * ow..(oy + 1) * ow];
                    for ox in xlo..xhi {
                        dst_row[ox * g.stride + j - g.pad] += s[ox];
                    }
                }
            }
        }
    }
    x
}

/// Forward for one sample: `x` is `[in_c, h, w]`, kernel `[out_c, in_c, kh, kw]`.
pub(crate) fn forward_sample(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let p = g.out_pixels();
    let mut out = vec![0.0; g.out_len()];
    let owned;
    let col: &[f64] = if g.is_pointwise() {
        x
    } else {
        owned = im2col(g, x);
        &owned
    };
    gemm(
        MatRef::dense(kernel, g.out_c, g.patch()),
        MatRef::dense(col, g.patch(), p),
        0.0,
        MatMut::dense(&mut out, g.out_c, p),
    );
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(p).enumerate() {
            for v in row {
                *v += b[o];
            }
        }
    }
    out
}

pub(crate) struct SampleGrads {
    pub dx: Option<Vec<f64>>,
    pub dkernel: Option<Vec<f64>>,
    pub dbias: Option<Vec<f64>>,
}

/// Backward for one sample given `dy` of shape `[out_c, oh, ow]`.
pub(crate) fn backward_sample(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dkernel: bool,
    want_dbias: bool,
) -> SampleGrads {
    let p = g.out_pixels();
    let k = g.patch();
    let dkernel = want_dkernel.then(|| {
        let owned;
        let col: &[f64] = if g.is_pointwise() {
            x
        } else {
            owned = im2col(g, x);
            &owned
        };
        let mut dk = vec![0.0; g.kernel_len()];
        gemm(
            MatRef::dense(dy, g.out_c, p),
            MatRef::dense(col, k, p).t(),
            0.0,
            MatMut::dense(&mut dk, g.out_c, k),
        );
        dk
    });
    let dx = want_dx.then(|| {
        let mut dcol = vec![0.0; k * p];
        gemm(
            MatRef::dense(kernel, g.out_c, k).t(),
            MatRef::dense(dy, g.out_c, p),
            0.0,
            MatMut::dense(&mut dcol, k, p),
        );
        if g.is_pointwise() {
            dcol
        } else {
            col2im(g, &dcol)
        }
    });
    let dbias = want_dbias.then(|| dy.chunks(p).map(|row| row.iter().sum()).collect());
    SampleGrads { dx, dkernel, dbias }
}

/// Six-nested-loop reference convolution, kept independent of the GEMM path.
#[cfg(test)]
pub(crate) fn naive_conv(
    g: &ConvGeom,
    n: usize,
    x: &[f64],
    kernel: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; n * g.out_c * oh * ow];
    for b in 0..n {
        for o in 0..g.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..g.in_c {
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                let y = (oy * g.stride + i) as isize - g.pad as isize;
                                let xx = (ox * g.stride + j) as isize - g.pad as isize;
                                if y < 0 || xx < 0 || y >= g.h as isize || xx >= g.w as isize {
                                    continue;
                                }
                                let xi = ((b * g.in_c + c) * g.h + y as usize) * g.w + xx as usize;
                                let ki = ((o * g.in_c + c) * g.kh + i) * g.kw + j;
                                acc += x[xi] * kernel[ki];
                            }
                        }
                    }
                    out[((b * g.out_c + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}
