//! Multi-head scaled dot-product attention, one sample at a time.

use super::gemm::{gemm, MatMut, MatRef};

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnGeom {
    pub lq: usize,
    pub lk: usize,
    pub heads: usize,
    pub d: usize,
    pub dv: usize,
}

impl AttnGeom {
    pub fn scale(&self) -> f64 {
        1.0 / (self.d as f64).sqrt()
    }

    fn head<'a>(&self, data: &'a [f64], len: usize, width: usize, h: usize) -> MatRef<'a> {
        MatRef {
            data,
            offset: h * width,
            rows: len,
            cols: width,
            row_stride: self.heads * width,
            col_stride: 1,
        }
    }

    pub fn macs(&self) -> u64 {
        (self.heads * self.lq * self.lk * (self.d + self.dv)) as u64
    }
}

pub(crate) fn softmax_rows(s: &mut [f64], width: usize) {
    for row in s.chunks_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Returns `(output [lq, heads*dv], probs [heads, lq, lk])`.
pub(crate) fn forward_sample(
    g: &AttnGeom,
    q: &[f64],
    k: &[f64],
    v: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; g.lq * g.heads * g.dv];
    let mut probs = vec![0.0; g.heads * g.lq * g.lk];
    for h in 0..g.heads {
        let p = &mut probs[h * g.lq * g.lk..(h + 1) * g.lq * g.lk];
        gemm(
            g.head(q, g.lq, g.d, h),
            g.head(k, g.lk, g.d, h).t(),
            0.0,
            MatMut::dense(p, g.lq, g.lk),
        );
        let scale = g.scale();
        for s in p.iter_mut() {
            *s *= scale;
        }
        softmax_rows(p, g.lk);
        gemm(
            MatRef::dense(p, g.lq, g.lk),
            g.head(v, g.lk, g.dv, h),
            0.0,
            MatMut {
                data: &mut out,
                offset: h * g.dv,
                rows: g.lq,
                cols: g.dv,
                row_stride: g.heads * g.dv,
                col_stride: 1,
            },
        );
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)` for one sample.
pub(crate) fn backward_sample(
    g: &AttnGeom,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut ds = vec![0.0; g.lq * g.lk];
    let scale = g.scale();
    for h in 0..g.heads {
        let p = &probs[h * g.lq * g.lk..(h + 1) * g.lq * g.lk];
        let dout_h = g.head(dout, g.lq, g.dv, h);
        // dV = Pᵀ dO
        gemm(
            MatRef::dense(p, g.lq, g.lk).t(),
            dout_h,
            0.0,
            MatMut {
                data: &mut dv,
                offset: h * g.dv,
                rows: g.lk,
                cols: g.dv,
                row_stride: g.heads * g.dv,
                col_stride: 1,
            },
        );
        // dP = dO Vᵀ
        gemm(
            dout_h,
            g.head(v, g.lk, g.dv, h).t(),
            0.0,
            MatMut::dense(&mut ds, g.lq, g.lk),
        );
        // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the 1/√d scale.
        for (ds_row, p_row) in ds.chunks_mut(g.lk).zip(p.chunks(g.lk)) {
            let dot: f64 = ds_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
            for (d, pv) in ds_row.iter_mut().zip(p_row) {
                *d = pv * (*d - dot) * scale;
            }
        }
        gemm(
            MatRef::dense(&ds, g.lq, g.lk),
            g.head(k, g.lk, g.d, h),
            0.0,
            MatMut {
                data: &mut dq,
                offset: h * g.d,
                rows: g.lq,
                cols: g.d,
                row_stride: g.heads * g.d,
                col_stride: 1,
            },
        );
        gemm(
            MatRef::dense(&ds, g.lq, g.lk).t(),
            g.head(q, g.lq, g.d, h),
            0.0,
            MatMut {
                data: &mut dk,
                offset: h * g.d,
                rows: g.lk,
                cols: g.d,
                row_stride: g.heads * g.d,
                col_stride: 1,
            },
        );
    }
    (dq, dk, dv)
}
