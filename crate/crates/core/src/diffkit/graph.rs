use std::sync::Arc;

use super::attn::{self, AttnGeom};
use super::conv::{self, ConvGeom};
use super::exec::{map_indexed, ordered_sum};
use super::gemm::{gemm, MatMut, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

/// Runtime floating-point operation counts, split by operator family.
///
/// Matrix products count 2 FLOPs per multiply-accumulate; normalizations,
/// activations, elementwise arithmetic and reductions count 1 FLOP per
/// output (or reduced input) element. Pure data movement is free.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounter {
    pub conv: u64,
    pub linear: u64,
    pub attention: u64,
    pub elementwise: u64,
}

impl FlopCounter {
    pub fn total(&self) -> u64 {
        self.conv + self.linear + self.attention + self.elementwise
    }
}

impl std::ops::AddAssign for FlopCounter {
    fn add_assign(&mut self, rhs: Self) {
        self.conv += rhs.conv;
        self.linear += rhs.linear;
        self.attention += rhs.attention;
        self.elementwise += rhs.elementwise;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    ConvPerSample,
    MixKernels,
    Linear,
    GroupNorm,
    LayerNorm,
    Attention,
    Silu,
    Gelu,
    Softmax,
    Add,
    Mul,
    Scale,
    AddChannelBias,
    AddBroadcast,
    Concat,
    Upsample2x,
    ToTokens,
    FromTokens,
    GlobalAvgPool,
    Embedding,
    Sum,
    Mean,
    Mse,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvPerSample {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MixKernels {
        r: Var,
        experts: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(f64, f64)>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(f64, f64)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: Vec<Vec<f64>>,
    },
    Silu(Var),
    Gelu(Var),
    Softmax(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannelBias {
        x: Var,
        b: Var,
    },
    AddBroadcast {
        x: Var,
        b: Var,
    },
    Concat(Vec<Var>),
    Upsample2x(Var),
    ToTokens(Var),
    FromTokens(Var),
    GlobalAvgPool(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvPerSample { .. } => OpKind::ConvPerSample,
            Op::MixKernels { .. } => OpKind::MixKernels,
            Op::Linear { .. } => OpKind::Linear,
            Op::GroupNorm { .. } => OpKind::GroupNorm,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Attention { .. } => OpKind::Attention,
            Op::Silu(_) => OpKind::Silu,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddChannelBias { .. } => OpKind::AddChannelBias,
            Op::AddBroadcast { .. } => OpKind::AddBroadcast,
            Op::Concat(_) => OpKind::Concat,
            Op::Upsample2x(_) => OpKind::Upsample2x,
            Op::ToTokens(_) => OpKind::ToTokens,
            Op::FromTokens(_) => OpKind::FromTokens,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Mse(..) => OpKind::Mse,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. }
            | Op::ConvPerSample { x, w, b, .. }
            | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::MixKernels { r, experts } => vec![*r, *experts],
            Op::GroupNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Silu(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Scale(x, _)
            | Op::Upsample2x(x)
            | Op::ToTokens(x)
            | Op::FromTokens(x)
            | Op::GlobalAvgPool(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::AddChannelBias { x, b } | Op::AddBroadcast { x, b } => vec![*x, *b],
            Op::Concat(parts) => parts.clone(),
            Op::Embedding { table, .. } => vec![*table],
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is always a topological order of the computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    flops: FlopCounter,
}

/// Gradients of a scalar with respect to every leaf that requested them.
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; leaves disconnected from the output get zeros.
    pub fn get(&self, v: Var) -> Tensor {
        match self.leaves.get(v.0).and_then(|g| g.as_ref()) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    /// Moves the gradient for `v` out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.leaves.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::DimensionMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> FlopCounter {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Input node ids of `v`, in operand order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: impl Into<Arc<Tensor>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { strip_cache(op) };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- convs

    fn conv_geom(
        &self,
        x: Var,
        kernel_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom> {
        let xs = self.shape(x);
        if xs.len() != 4 || kernel_shape.len() != 4 || xs[1] != kernel_shape[1] {
            return Err(mismatch("conv2d", xs, kernel_shape));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let g = ConvGeom {
            in_c: xs[1],
            h: xs[2],
            w: xs[3],
            out_c: kernel_shape[0],
            kh: kernel_shape[2],
            kw: kernel_shape[3],
            stride,
            pad,
        };
        if g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw {
            return Err(mismatch("conv2d", xs, kernel_shape));
        }
        Ok(g)
    }

    fn check_bias(&self, b: Option<Var>, out_c: usize, op: &'static str) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [out_c] {
                return Err(mismatch(op, self.shape(b), &[out_c]));
            }
        }
        Ok(())
    }

    /// Zero-padded cross-correlation. `x: [N,C,H,W]`, `w: [O,C,kH,kW]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = self.conv_geom(x, self.shape(w), stride, pad)?;
        self.check_bias(b, geom.out_c, "conv2d")?;
        let n = self.shape(x)[0];
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = b.map(|b| self.data(b));
        let parts = map_indexed(n, |i| {
            conv::forward_sample(
                &geom,
                &xd[i * geom.in_len()..(i + 1) * geom.in_len()],
                wd,
                bd,
            )
        });
        let out = Tensor::from_parts(
            vec![n, geom.out_c, geom.out_h(), geom.out_w()],
            parts.concat(),
        );
        self.flops.conv += 2 * geom.macs() * n as u64;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }))
    }

    /// Convolution with a distinct kernel per sample: `w: [N,O,C,kH,kW]`, stride 1.
    pub fn conv2d_per_sample(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let n = self.shape(x)[0];
        if ws.len() != 5 || ws[0] != n {
            return Err(mismatch("conv2d_per_sample", self.shape(x), &ws));
        }
        let geom = self.conv_geom(x, &ws[1..], 1, pad)?;
        self.check_bias(b, geom.out_c, "conv2d_per_sample")?;
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = b.map(|b| self.data(b));
        let kl = geom.kernel_len();
        let parts = map_indexed(n, |i| {
            conv::forward_sample(
                &geom,
                &xd[i * geom.in_len()..(i + 1) * geom.in_len()],
                &wd[i * kl..(i + 1) * kl],
                bd,
            )
        });
        let out = Tensor::from_parts(
            vec![n, geom.out_c, geom.out_h(), geom.out_w()],
            parts.concat(),
        );
        self.flops.conv += 2 * geom.macs() * n as u64;
        Ok(self.push(out, Op::ConvPerSample { x, w, b, geom }))
    }

    /// Per-sample convex kernel mixture: `r: [N,E]`, `experts: [E, ...]` → `[N, ...]`.
    pub fn mix_kernels(&mut self, r: Var, experts: Var) -> Result<Var> {
        let rs = self.shape(r).to_vec();
        let es = self.shape(experts).to_vec();
        if rs.len() != 2 || es.is_empty() || rs[1] != es[0] {
            return Err(mismatch("mix_kernels", &rs, &es));
        }
        let (n, e) = (rs[0], rs[1]);
        let klen: usize = es[1..].iter().product();
        let rd = self.data(r);
        let ed = self.data(experts);
        let mut out = Vec::with_capacity(n * klen);
        for s in 0..n {
            let start = out.len();
            let r0 = rd[s * e];
            out.extend(ed[..klen].iter().map(|w| r0 * w));
            for i in 1..e {
                let ri = rd[s * e + i];
                for (o, w) in out[start..].iter_mut().zip(&ed[i * klen..(i + 1) * klen]) {
                    *o += ri * w;
                }
            }
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&es[1..]);
        self.flops.conv += 2 * (n * e * klen) as u64;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MixKernels { r, experts },
        ))
    }

    // --------------------------------------------------------------- linear

    /// Affine map over the last dimension: `x: [.., In]`, `w: [Out, In]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.is_empty() || ws.len() != 2 || *xs.last().unwrap() != ws[1] {
            return Err(mismatch("linear", &xs, &ws));
        }
        let (out_f, in_f) = (ws[0], ws[1]);
        self.check_bias(b, out_f, "linear")?;
        let rows = self.value(x).numel() / in_f;
        let n = if xs.len() >= 2 { xs[0] } else { 1 };
        let per = rows / n;
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = b.map(|b| self.data(b));
        let parts = map_indexed(n, |i| {
            let mut out = vec![0.0; per * out_f];
            gemm(
                MatRef::dense(&xd[i * per * in_f..(i + 1) * per * in_f], per, in_f),
                MatRef::dense(wd, out_f, in_f).t(),
                0.0,
                MatMut::dense(&mut out, per, out_f),
            );
            if let Some(bd) = bd {
                for row in out.chunks_mut(out_f) {
                    for (o, bv) in row.iter_mut().zip(bd) {
                        *o += bv;
                    }
                }
            }
            out
        });
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = out_f;
        self.flops.linear += 2 * (rows * in_f * out_f) as u64;
        Ok(self.push(
            Tensor::from_parts(shape, parts.concat()),
            Op::Linear { x, w, b },
        ))
    }

    // ---------------------------------------------------------------- norms

    /// Group normalization over `[N,C,H,W]` with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(mismatch("group_norm", &xs, &[]));
        }
        let c = xs[1];
        if groups == 0 || c % groups != 0 {
            return Err(Error::config(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("group_norm", &xs, self.shape(gamma)));
        }
        let n = xs[0];
        let spatial: usize = xs[2..].iter().product();
        let cpg = c / groups;
        let glen = cpg * spatial;
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let parts = map_indexed(n, |s| {
            let xs = &xd[s * c * spatial..(s + 1) * c * spatial];
            let mut out = vec![0.0; c * spatial];
            let mut stats = Vec::with_capacity(groups);
            for g in 0..groups {
                let seg = &xs[g * glen..(g + 1) * glen];
                let mean = seg.iter().sum::<f64>() / glen as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                stats.push((mean, rstd));
                for ch in 0..cpg {
                    let cc = g * cpg + ch;
                    for p in 0..spatial {
                        let idx = cc * spatial + p;
                        out[idx] = (xs[idx] - mean) * rstd * gd[cc] + bd[cc];
                    }
                }
            }
            (out, stats)
        });
        let (data, stats): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        self.flops.elementwise += (n * c * spatial) as u64;
        let out = Tensor::from_parts(xs, data.concat());
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats: stats.concat(),
            },
        ))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| mismatch("layer_norm", &xs, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", &xs, self.shape(gamma)));
        }
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut out = vec![0.0; xd.len()];
        let mut stats = Vec::with_capacity(xd.len() / d.max(1));
        for (row, orow) in xd.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            stats.push((mean, rstd));
            for j in 0..d {
                orow[j] = (row[j] - mean) * rstd * gd[j] + bd[j];
            }
        }
        self.flops.elementwise += xd.len() as u64;
        Ok(self.push(
            Tensor::from_parts(xs, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
        ))
    }

    // ------------------------------------------------------------ attention

    /// Scaled dot-product attention. `q: [N,Lq,H·d]`, `k: [N,Lk,H·d]`,
    /// `v: [N,Lk,H·dv]` → `[N,Lq,H·dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
            return Err(mismatch("attention", &qs, &ks));
        }
        if ks[1] == 0 {
            return Err(Error::EmptyContext);
        }
        if heads == 0
            || qs[0] != ks[0]
            || ks[0] != vs[0]
            || qs[2] != ks[2]
            || ks[1] != vs[1]
            || qs[2] % heads != 0
            || vs[2] % heads != 0
            || qs[2] == 0
        {
            return Err(mismatch("attention", &qs, &ks));
        }
        let geom = AttnGeom {
            lq: qs[1],
            lk: ks[1],
            heads,
            d: qs[2] / heads,
            dv: vs[2] / heads,
        };
        let n = qs[0];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let (ql, kl, vl) = (qs[1] * qs[2], ks[1] * ks[2], vs[1] * vs[2]);
        let parts = map_indexed(n, |s| {
            attn::forward_sample(
                &geom,
                &qd[s * ql..(s + 1) * ql],
                &kd[s * kl..(s + 1) * kl],
                &vd[s * vl..(s + 1) * vl],
            )
        });
        let (outs, probs): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        self.flops.attention += 2 * geom.macs() * n as u64;
        self.flops.elementwise += (n * heads * geom.lq * geom.lk) as u64;
        let out = Tensor::from_parts(vec![n, geom.lq, vs[2]], outs.concat());
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            },
        ))
    }

    // ---------------------------------------------------------- elementwise

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.flops.elementwise += out.numel() as u64;
        self.push(out, op)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| mismatch("softmax", t.shape(), &[]))?;
        let mut data = t.data().to_vec();
        attn::softmax_rows(&mut data, d);
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.flops.elementwise += out.numel() as u64;
        Ok(self.push(out, Op::Softmax(x)))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.flops.elementwise += out.numel() as u64;
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x: [N,C,...] + b: [N,C]` broadcast over trailing dimensions.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() < 2 || bs != xs[..2] {
            return Err(mismatch("add_channel_bias", &xs, &bs));
        }
        let inner: usize = xs[2..].iter().product();
        let bd = self.data(b);
        let data: Vec<f64> = self
            .data(x)
            .chunks(inner)
            .zip(bd)
            .flat_map(|(chunk, bv)| chunk.iter().map(move |v| v + bv))
            .collect();
        self.flops.elementwise += data.len() as u64;
        Ok(self.push(Tensor::from_parts(xs, data), Op::AddChannelBias { x, b }))
    }

    /// `x: [N, rest..] + b: [rest..]`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() < 2 || bs != xs[1..] {
            return Err(mismatch("add_broadcast", &xs, &bs));
        }
        let inner = self.value(b).numel();
        let bd = self.data(b);
        let data: Vec<f64> = self
            .data(x)
            .chunks(inner)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(v, bv)| v + bv))
            .collect();
        self.flops.elementwise += data.len() as u64;
        Ok(self.push(Tensor::from_parts(xs, data), Op::AddBroadcast { x, b }))
    }

    // --------------------------------------------------------------- layout

    /// Concatenate `[N,Ci,H,W]` tensors along channels.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 4 {
            return Err(mismatch("concat", &first, &[]));
        }
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != first[0] || s[2..] != first[2..] {
                return Err(mismatch("concat", &first, s));
            }
            c_total += s[1];
        }
        let n = first[0];
        let spatial = first[2] * first[3];
        let mut data = Vec::with_capacity(n * c_total * spatial);
        for s in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                data.extend_from_slice(&self.data(p)[s * c * spatial..(s + 1) * c * spatial]);
            }
        }
        let shape = vec![n, c_total, first[2], first[3]];
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec())))
    }

    /// Nearest-neighbour ×2 spatial upsampling of `[N,C,H,W]`.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(mismatch("upsample", &xs, &[]));
        }
        let (h, w) = (xs[2], xs[3]);
        let mut data = Vec::with_capacity(self.value(x).numel() * 4);
        for plane in self.data(x).chunks(h * w) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data.push(plane[(y / 2) * w + xx / 2]);
                }
            }
        }
        let shape = vec![xs[0], xs[1], 2 * h, 2 * w];
        Ok(self.push(Tensor::from_parts(shape, data), Op::Upsample2x(x)))
    }

    /// `[N,C,H,W]` → `[N,H·W,C]`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(mismatch("to_tokens", &xs, &[]));
        }
        let (n, c, l) = (xs[0], xs[1], xs[2] * xs[3]);
        let out = transpose_inner(self.data(x), n, c, l);
        Ok(self.push(Tensor::from_parts(vec![n, l, c], out), Op::ToTokens(x)))
    }

    /// `[N,H·W,C]` → `[N,C,H,W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != h * w {
            return Err(mismatch("from_tokens", &xs, &[h, w]));
        }
        let (n, l, c) = (xs[0], xs[1], xs[2]);
        let out = transpose_inner(self.data(x), n, l, c);
        Ok(self.push(Tensor::from_parts(vec![n, c, h, w], out), Op::FromTokens(x)))
    }

    /// `[N,C,H,W]` → `[N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(mismatch("global_avg_pool", &xs, &[]));
        }
        let spatial = xs[2] * xs[3];
        let data: Vec<f64> = self
            .data(x)
            .chunks(spatial)
            .map(|c| c.iter().sum::<f64>() / spatial as f64)
            .collect();
        self.flops.elementwise += (xs[0] * xs[1] * spatial) as u64;
        Ok(self.push(
            Tensor::from_parts(vec![xs[0], xs[1]], data),
            Op::GlobalAvgPool(x),
        ))
    }

    /// Row gather from `table: [V,D]`; output shape is `lead ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || lead.iter().product::<usize>() != ids.len() {
            return Err(mismatch("embedding", &ts, lead));
        }
        let d = ts[1];
        if let Some(bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(Error::contract(format!(
                "embedding id {bad} out of range for vocabulary {}",
                ts[0]
            )));
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    // ----------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (s, n) = (t.data().iter().sum(), t.numel());
        self.flops.elementwise += n as u64;
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.numel();
        let s = t.data().iter().sum::<f64>() / n as f64;
        self.flops.elementwise += n as u64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mse", ta.shape(), tb.shape()));
        }
        let n = ta.numel();
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n as f64;
        self.flops.elementwise += n as u64;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b)))
    }

    // ------------------------------------------------------------- backward

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        if out.needs_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { leaves, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: Vec<f64>| accumulate(grads, v, delta);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let (wx, ww, wb) = (
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                let xd = self.data(*x);
                let wd = self.data(*w);
                let ol = geom.out_len();
                let parts = map_indexed(n, |s| {
                    conv::backward_sample(
                        geom,
                        &xd[s * geom.in_len()..(s + 1) * geom.in_len()],
                        wd,
                        &g[s * ol..(s + 1) * ol],
                        wx,
                        ww,
                        wb,
                    )
                });
                let mut dxs = Vec::new();
                let mut dws = Vec::new();
                let mut dbs = Vec::new();
                for p in parts {
                    dxs.extend(p.dx);
                    dws.extend(p.dkernel);
                    dbs.extend(p.dbias);
                }
                if wx {
                    acc(*x, dxs.concat());
                }
                if ww {
                    acc(*w, ordered_sum(dws));
                }
                if let (Some(b), true) = (b, wb) {
                    acc(*b, ordered_sum(dbs));
                }
            }
            Op::ConvPerSample { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let (wx, ww, wb) = (
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                let xd = self.data(*x);
                let wd = self.data(*w);
                let (ol, kl) = (geom.out_len(), geom.kernel_len());
                let parts = map_indexed(n, |s| {
                    conv::backward_sample(
                        geom,
                        &xd[s * geom.in_len()..(s + 1) * geom.in_len()],
                        &wd[s * kl..(s + 1) * kl],
                        &g[s * ol..(s + 1) * ol],
                        wx,
                        ww,
                        wb,
                    )
                });
                let mut dxs = Vec::new();
                let mut dws = Vec::new();
                let mut dbs = Vec::new();
                for p in parts {
                    dxs.extend(p.dx);
                    dws.extend(p.dkernel);
                    dbs.extend(p.dbias);
                }
                if wx {
                    acc(*x, dxs.concat());
                }
                if ww {
                    acc(*w, dws.concat());
                }
                if let (Some(b), true) = (b, wb) {
                    acc(*b, ordered_sum(dbs));
                }
            }
            Op::MixKernels { r, experts } => {
                let rs = self.shape(*r);
                let (n, e) = (rs[0], rs[1]);
                let klen = self.value(*experts).numel() / e;
                let rd = self.data(*r);
                let ed = self.data(*experts);
                if self.wants(*r) {
                    let mut dr = vec![0.0; n * e];
                    for s in 0..n {
                        let gs = &g[s * klen..(s + 1) * klen];
                        for i in 0..e {
                            dr[s * e + i] = gs
                                .iter()
                                .zip(&ed[i * klen..(i + 1) * klen])
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                    }
                    acc(*r, dr);
                }
                if self.wants(*experts) {
                    let mut de = vec![0.0; e * klen];
                    for s in 0..n {
                        let gs = &g[s * klen..(s + 1) * klen];
                        for i in 0..e {
                            let ri = rd[s * e + i];
                            for (d, gv) in de[i * klen..(i + 1) * klen].iter_mut().zip(gs) {
                                *d += ri * gv;
                            }
                        }
                    }
                    acc(*experts, de);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (out_f, in_f) = (ws[0], ws[1]);
                let rows = self.value(*x).numel() / in_f;
                let n = if xs.len() >= 2 { xs[0] } else { 1 };
                let per = rows / n;
                let xd = self.data(*x);
                let wd = self.data(*w);
                let (wx, ww) = (self.wants(*x), self.wants(*w));
                let parts = map_indexed(n, |s| {
                    let gs = &g[s * per * out_f..(s + 1) * per * out_f];
                    let dx = wx.then(|| {
                        let mut dx = vec![0.0; per * in_f];
                        gemm(
                            MatRef::dense(gs, per, out_f),
                            MatRef::dense(wd, out_f, in_f),
                            0.0,
                            MatMut::dense(&mut dx, per, in_f),
                        );
                        dx
                    });
                    let dw = ww.then(|| {
                        let mut dw = vec![0.0; out_f * in_f];
                        gemm(
                            MatRef::dense(gs, per, out_f).t(),
                            MatRef::dense(&xd[s * per * in_f..(s + 1) * per * in_f], per, in_f),
                            0.0,
                            MatMut::dense(&mut dw, out_f, in_f),
                        );
                        dw
                    });
                    (dx, dw)
                });
                let mut dxs = Vec::new();
                let mut dws = Vec::new();
                for (dx, dw) in parts {
                    dxs.extend(dx);
                    dws.extend(dw);
                }
                if wx {
                    acc(*x, dxs.concat());
                }
                if ww {
                    acc(*w, ordered_sum(dws));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; out_f];
                        for row in g.chunks(out_f) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        acc(*b, db);
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let cpg = c / groups;
                let glen = cpg * spatial;
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; xd.len()];
                for s in 0..n {
                    for gi in 0..*groups {
                        let (mean, rstd) = stats[s * groups + gi];
                        let base = (s * c + gi * cpg) * spatial;
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for ch in 0..cpg {
                            let cc = gi * cpg + ch;
                            for p in 0..spatial {
                                let idx = base + ch * spatial + p;
                                let xhat = (xd[idx] - mean) * rstd;
                                let dxhat = g[idx] * gd[cc];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                                dgamma[cc] += g[idx] * xhat;
                                dbeta[cc] += g[idx];
                            }
                        }
                        let m = glen as f64;
                        for ch in 0..cpg {
                            let cc = gi * cpg + ch;
                            for p in 0..spatial {
                                let idx = base + ch * spatial + p;
                                let xhat = (xd[idx] - mean) * rstd;
                                let dxhat = g[idx] * gd[cc];
                                dx[idx] =
                                    rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    acc(*x, dx);
                }
                if self.wants(*gamma) {
                    acc(*gamma, dgamma);
                }
                if self.wants(*beta) {
                    acc(*beta, dbeta);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let d = *self.shape(*x).last().unwrap();
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; xd.len()];
                let m = d as f64;
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = grow[j] * gd[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                    }
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = grow[j] * gd[j];
                        dx[r * d + j] = rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
                if self.wants(*x) {
                    acc(*x, dx);
                }
                if self.wants(*gamma) {
                    acc(*gamma, dgamma);
                }
                if self.wants(*beta) {
                    acc(*beta, dbeta);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            } => {
                let n = self.shape(*q)[0];
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let ql = geom.lq * geom.heads * geom.d;
                let kl = geom.lk * geom.heads * geom.d;
                let vl = geom.lk * geom.heads * geom.dv;
                let ol = geom.lq * geom.heads * geom.dv;
                let parts = map_indexed(n, |s| {
                    attn::backward_sample(
                        geom,
                        &qd[s * ql..(s + 1) * ql],
                        &kd[s * kl..(s + 1) * kl],
                        &vd[s * vl..(s + 1) * vl],
                        &probs[s],
                        &g[s * ol..(s + 1) * ol],
                    )
                });
                let mut dq = Vec::with_capacity(n * ql);
                let mut dk = Vec::with_capacity(n * kl);
                let mut dv = Vec::with_capacity(n * vl);
                for (a, b, c) in parts {
                    dq.extend(a);
                    dk.extend(b);
                    dv.extend(c);
                }
                if self.wants(*q) {
                    acc(*q, dq);
                }
                if self.wants(*k) {
                    acc(*k, dk);
                }
                if self.wants(*v) {
                    acc(*v, dv);
                }
            }
            Op::Silu(x) => {
                let d = self
                    .data(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| {
                        let s = sigmoid(v);
                        gv * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                acc(*x, d);
            }
            Op::Gelu(x) => {
                let d = self
                    .data(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * dt)
                    })
                    .collect();
                acc(*x, d);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let dlast = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .chunks(dlast)
                    .zip(g.chunks(dlast))
                    .zip(dx.chunks_mut(dlast))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..dlast {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    acc(*a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::AddChannelBias { x, b } => {
                if self.wants(*x) {
                    acc(*x, g.to_vec());
                }
                if self.wants(*b) {
                    let nb = self.value(*b).numel();
                    let inner = g.len() / nb;
                    acc(*b, g.chunks(inner).map(|c| c.iter().sum()).collect());
                }
            }
            Op::AddBroadcast { x, b } => {
                if self.wants(*x) {
                    acc(*x, g.to_vec());
                }
                if self.wants(*b) {
                    let nb = self.value(*b).numel();
                    let mut db = vec![0.0; nb];
                    for chunk in g.chunks(nb) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Concat(parts) => {
                let s0 = self.shape(parts[0]);
                let (n, spatial) = (s0[0], s0[2] * s0[3]);
                let c_total: usize = parts.iter().map(|p| self.shape(*p)[1]).sum();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(n * c * spatial);
                        for s in 0..n {
                            let start = (s * c_total + offset) * spatial;
                            d.extend_from_slice(&g[start..start + c * spatial]);
                        }
                        acc(p, d);
                    }
                    offset += c;
                }
            }
            Op::Upsample2x(x) => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (plane, gplane) in dx.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            plane[(y / 2) * w + xx / 2] += gplane[y * 2 * w + xx];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::ToTokens(x) => {
                let xs = self.shape(*x);
                let (n, c, l) = (xs[0], xs[1], xs[2] * xs[3]);
                acc(*x, transpose_inner(g, n, l, c));
            }
            Op::FromTokens(x) => {
                let xs = self.shape(*x);
                let (n, l, c) = (xs[0], xs[1], xs[2]);
                acc(*x, transpose_inner(g, n, c, l));
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let spatial = xs[2] * xs[3];
                let inv = 1.0 / spatial as f64;
                let dx = g
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, spatial))
                    .collect();
                acc(*x, dx);
            }
            Op::Embedding { table, ids } => {
                let ts = self.shape(*table);
                let d = ts[1];
                let mut dt = vec![0.0; ts[0] * d];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[r * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let scale = 2.0 * g[0] / ad.len() as f64;
                let diff: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| scale * (x - y)).collect();
                if self.wants(*b) {
                    acc(*b, diff.iter().map(|v| -v).collect());
                }
                if self.wants(*a) {
                    acc(*a, diff);
                }
            }
        }
    }
}

fn strip_cache(op: Op) -> Op {
    match op {
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            ..
        } => Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            stats: Vec::new(),
        },
        Op::LayerNorm { x, gamma, beta, .. } => Op::LayerNorm {
            x,
            gamma,
            beta,
            stats: Vec::new(),
        },
        Op::Attention { q, k, v, geom, .. } => Op::Attention {
            q,
            k,
            v,
            geom,
            probs: Vec::new(),
        },
        other => other,
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(&delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Per batch item, transpose a `rows × cols` matrix.
fn transpose_inner(data: &[f64], n: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for s in 0..n {
        let src = &data[s * rows * cols..(s + 1) * rows * cols];
        let dst = &mut out[s * rows * cols..(s + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}
