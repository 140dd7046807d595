//! Static parameter and FLOP accounting over a [`UNetSpec`].
//!
//! Counts are closed-form per unit and never instantiate a model. FLOPs are
//! per single-sample forward pass: matrix products count two FLOPs per
//! multiply-accumulate, normalizations, activations, softmax, pooling and
//! elementwise arithmetic one FLOP per element; concatenation, resampling by
//! repetition, token reshapes and embedding lookups are free.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::unet::{BlockId, LayerSpec, TransformerUnitSpec, UNetSpec};

/// Default share of end-to-end pipeline cost outside the UNet.
pub const DEFAULT_OVERHEAD: f64 = 0.15;

/// FLOPs split by operator family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub conv: u64,
    pub linear: u64,
    pub attention: u64,
    pub elementwise: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.conv + self.linear + self.attention + self.elementwise
    }

    fn add(&mut self, o: &FlopBreakdown) {
        self.conv += o.conv;
        self.linear += o.linear;
        self.attention += o.attention;
        self.elementwise += o.elementwise;
    }
}

impl From<crate::diffkit::FlopCounter> for FlopBreakdown {
    fn from(c: crate::diffkit::FlopCounter) -> Self {
        Self {
            conv: c.conv,
            linear: c.linear,
            attention: c.attention,
            elementwise: c.elementwise,
        }
    }
}

/// Parameters and FLOPs attributed to one unit kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitCost {
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRow {
    /// `embed`, `stem`, `dn0`…, `mid`, `up0`…, `head`.
    pub block: String,
    pub layers: usize,
    pub params: u64,
    pub flops: u64,
    pub param_share: f64,
    pub flop_share: f64,
    pub flop_breakdown: FlopBreakdown,
    pub resnet: UnitCost,
    pub transformer: UnitCost,
    /// Resampling convolutions, embeddings, stem and head.
    pub other: UnitCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub params: u64,
    pub flops: u64,
    pub flop_breakdown: FlopBreakdown,
    pub resnet: UnitCost,
    pub transformer: UnitCost,
    pub other: UnitCost,
}

/// Per-block accounting. Rows sum to the totals; each filled share column
/// sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    /// Per-sample latent shape `[C, H, W]` the FLOPs refer to, if counted.
    pub latent_shape: Option<[usize; 3]>,
    pub blocks: Vec<BlockRow>,
    pub totals: Totals,
}

#[derive(Default)]
struct Acc {
    params: u64,
    f: FlopBreakdown,
}

impl Acc {
    fn conv(&mut self, cin: usize, cout: usize, k: usize, out_pixels: usize) {
        self.params += (cin * cout * k * k + cout) as u64;
        self.f.conv += 2 * (k * k * cin * cout * out_pixels) as u64;
    }

    fn linear(&mut self, inp: usize, out: usize, bias: bool, rows: usize) {
        self.params += (inp * out + if bias { out } else { 0 }) as u64;
        self.f.linear += 2 * (inp * out * rows) as u64;
    }

    fn norm(&mut self, c: usize, elems: usize) {
        self.params += 2 * c as u64;
        self.f.elementwise += elems as u64;
    }

    fn elem(&mut self, n: usize) {
        self.f.elementwise += n as u64;
    }
}

fn conv3(a: &mut Acc, cin: usize, cout: usize, pixels: usize, experts: Option<usize>) {
    match experts {
        None => a.conv(cin, cout, 3, pixels),
        Some(e) => {
            let k = cout * cin * 9;
            a.params += (e * k + cout + e * cin + e) as u64;
            a.elem(cin * pixels); // global average pool
            a.f.linear += 2 * (cin * e) as u64; // router
            a.elem(e); // routing softmax
            a.f.conv += 2 * (e * k) as u64; // kernel mixture
            a.f.conv += 2 * (9 * cin * cout * pixels) as u64;
        }
    }
}

fn resnet_unit(spec: &UNetSpec, layer: &LayerSpec, pixels: usize) -> Acc {
    let r = &layer.resnet;
    let (cin, cout) = (r.in_channels, r.out_channels);
    let e = r.condconv.map(|c| c.n_experts);
    let mut a = Acc::default();
    a.norm(cin, cin * pixels);
    a.elem(cin * pixels); // silu
    conv3(&mut a, cin, cout, pixels, e);
    a.linear(spec.time_embed_dim, cout, true, 1);
    a.elem(cout * pixels); // time bias
    a.norm(cout, cout * pixels);
    a.elem(cout * pixels); // silu
    conv3(&mut a, cout, cout, pixels, e);
    if cin != cout {
        a.conv(cin, cout, 1, pixels);
    }
    a.elem(cout * pixels); // residual
    a
}

fn transformer_unit(spec: &UNetSpec, t: &TransformerUnitSpec, c: usize, pixels: usize) -> Acc {
    let i = t.inner_dim();
    let l = pixels;
    let m = spec.cond_seq_len;
    let mut a = Acc::default();
    a.norm(c, c * l);
    a.linear(c, i, true, l);
    // self-attention
    a.norm(i, i * l);
    for _ in 0..3 {
        a.linear(i, i, false, l);
    }
    a.f.attention += 2 * (t.heads * l * l * 2 * t.head_dim) as u64;
    a.elem(t.heads * l * l);
    a.linear(i, i, true, l);
    a.elem(i * l);
    if t.cross_attention {
        a.norm(i, i * l);
        a.linear(i, i, false, l);
        a.linear(spec.cond_dim, i, false, m);
        a.linear(spec.cond_dim, i, false, m);
        a.f.attention += 2 * (t.heads * l * m * 2 * t.head_dim) as u64;
        a.elem(t.heads * l * m);
        a.linear(i, i, true, l);
        a.elem(i * l);
    }
    a.norm(i, i * l);
    a.linear(i, i * t.ff_mult, true, l);
    a.elem(i * t.ff_mult * l); // gelu
    a.linear(i * t.ff_mult, i, true, l);
    a.elem(i * l);
    a.linear(i, c, true, l);
    a.elem(c * l);
    a
}

struct RowAcc {
    block: String,
    layers: usize,
    resnet: Acc,
    transformer: Acc,
    other: Acc,
}

impl RowAcc {
    fn new(block: impl Into<String>, layers: usize) -> Self {
        Self {
            block: block.into(),
            layers,
            resnet: Acc::default(),
            transformer: Acc::default(),
            other: Acc::default(),
        }
    }
}

fn raw_rows(spec: &UNetSpec, latent_hw: (usize, usize)) -> Result<Vec<RowAcc>> {
    let topo = spec.topology()?;
    let (h0, w0) = latent_hw;
    // Spatial side lengths scale linearly with the requested latent size.
    let pix = |side: usize| -> usize {
        let hs = side * h0 / spec.latent_size;
        let ws = side * w0 / spec.latent_size;
        hs * ws
    };
    let te = spec.time_embed_dim;
    let mut rows = Vec::new();

    let mut embed = RowAcc::new("embed", 0);
    embed.other.linear(te, te, true, 1);
    embed.other.elem(te);
    embed.other.linear(te, te, true, 1);
    embed.other.elem(te);
    embed.other.params += ((spec.vocab_size + spec.cond_seq_len) * spec.cond_dim) as u64;
    embed.other.elem(spec.cond_seq_len * spec.cond_dim);
    rows.push(embed);

    let mut stem = RowAcc::new("stem", 0);
    stem.other.conv(
        spec.latent_channels,
        topo.stem_out,
        3,
        pix(spec.latent_size),
    );
    rows.push(stem);

    for id in spec.block_ids() {
        let block = spec.block(id).expect("id from block_ids");
        let io = topo.block(id).expect("topology covers every block");
        let p = pix(io.size);
        let mut row = RowAcc::new(id.to_string(), block.layers.len());
        for layer in &block.layers {
            let r = resnet_unit(spec, layer, p);
            row.resnet.params += r.params;
            row.resnet.f.add(&r.f);
            if let Some(t) = &layer.transformer {
                let a = transformer_unit(spec, t, layer.resnet.out_channels, p);
                row.transformer.params += a.params;
                row.transformer.f.add(&a.f);
            }
        }
        if let Some((c, side)) = io.resample {
            row.other.conv(c, c, 3, pix(side));
        }
        rows.push(row);
    }

    let mut head = RowAcc::new("head", 0);
    let p = pix(spec.latent_size);
    head.other.norm(topo.head_in, topo.head_in * p);
    head.other.elem(topo.head_in * p);
    head.other.conv(topo.head_in, spec.latent_channels, 3, p);
    rows.push(head);
    Ok(rows)
}

fn share(x: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        x as f64 / total as f64
    }
}

fn finish(
    raw: Vec<RowAcc>,
    with_params: bool,
    with_flops: bool,
    latent_shape: Option<[usize; 3]>,
) -> ProfileReport {
    let keep = |a: &Acc| UnitCost {
        params: if with_params { a.params } else { 0 },
        flops: if with_flops { a.f.total() } else { 0 },
    };
    let mut totals = Totals {
        params: 0,
        flops: 0,
        flop_breakdown: FlopBreakdown::default(),
        resnet: UnitCost::default(),
        transformer: UnitCost::default(),
        other: UnitCost::default(),
    };
    let mut blocks = Vec::with_capacity(raw.len());
    for r in raw {
        let (res, tr, ot) = (keep(&r.resnet), keep(&r.transformer), keep(&r.other));
        let mut fb = FlopBreakdown::default();
        if with_flops {
            fb.add(&r.resnet.f);
            fb.add(&r.transformer.f);
            fb.add(&r.other.f);
        }
        let row = BlockRow {
            block: r.block,
            layers: r.layers,
            params: res.params + tr.params + ot.params,
            flops: fb.total(),
            param_share: 0.0,
            flop_share: 0.0,
            flop_breakdown: fb,
            resnet: res,
            transformer: tr,
            other: ot,
        };
        totals.params += row.params;
        totals.flops += row.flops;
        totals.flop_breakdown.add(&fb);
        for (t, u) in [
            (&mut totals.resnet, res),
            (&mut totals.transformer, tr),
            (&mut totals.other, ot),
        ] {
            t.params += u.params;
            t.flops += u.flops;
        }
        blocks.push(row);
    }
    for row in &mut blocks {
        row.param_share = share(row.params, totals.params);
        row.flop_share = share(row.flops, totals.flops);
    }
    ProfileReport {
        latent_shape,
        blocks,
        totals,
    }
}

/// Exact per-block parameter counts.
pub fn count_params(spec: &UNetSpec) -> Result<ProfileReport> {
    let raw = raw_rows(spec, (spec.latent_size, spec.latent_size))?;
    Ok(finish(raw, true, false, None))
}

/// Per-block FLOPs of one single-sample forward pass at `latent_shape`
/// (`[C, H, W]`). `H` and `W` may differ from the spec's native size as long
/// as every level stays integral.
pub fn estimate_flops(spec: &UNetSpec, latent_shape: [usize; 3]) -> Result<ProfileReport> {
    check_shape(spec, latent_shape)?;
    let raw = raw_rows(spec, (latent_shape[1], latent_shape[2]))?;
    Ok(finish(raw, false, true, Some(latent_shape)))
}

/// Parameters and FLOPs together.
pub fn profile(spec: &UNetSpec, latent_shape: [usize; 3]) -> Result<ProfileReport> {
    check_shape(spec, latent_shape)?;
    let raw = raw_rows(spec, (latent_shape[1], latent_shape[2]))?;
    Ok(finish(raw, true, true, Some(latent_shape)))
}

fn check_shape(spec: &UNetSpec, s: [usize; 3]) -> Result<()> {
    let topo = spec.topology()?;
    let min = topo
        .blocks
        .iter()
        .map(|b| b.size)
        .chain([topo.mid_size])
        .min()
        .unwrap_or(1);
    let factor = spec.latent_size / min.max(1);
    if s[0] != spec.latent_channels
        || s[1] == 0
        || s[2] == 0
        || s[1] % factor != 0
        || s[2] % factor != 0
    {
        return Err(crate::Error::config(format!(
            "latent shape {s:?} incompatible with spec ({} channels, sides divisible by {factor})",
            spec.latent_channels
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub flops_before: u64,
    pub flops_after: u64,
    pub unet_flop_reduction: f64,
    pub overhead: f64,
    pub pipeline_reduction: f64,
}

/// FLOP reduction from `before` to `after`, and the end-to-end reduction
/// when a fixed fraction `overhead` of pipeline cost lies outside the UNet.
pub fn speedup_estimate(
    before: &UNetSpec,
    after: &UNetSpec,
    latent_shape: [usize; 3],
    overhead: f64,
) -> Result<Speedup> {
    if !(0.0..=1.0).contains(&overhead) {
        return Err(crate::Error::config(format!(
            "overhead fraction {overhead} outside [0, 1]"
        )));
    }
    let fb = estimate_flops(before, latent_shape)?.totals.flops;
    let fa = estimate_flops(after, latent_shape)?.totals.flops;
    let r = 1.0 - fa as f64 / fb as f64;
    Ok(Speedup {
        flops_before: fb,
        flops_after: fa,
        unet_flop_reduction: r,
        overhead,
        pipeline_reduction: (1.0 - overhead) * r,
    })
}

impl ProfileReport {
    pub fn row(&self, block: &str) -> Option<&BlockRow> {
        self.blocks.iter().find(|r| r.block == block)
    }

    pub fn block_row(&self, id: BlockId) -> Option<&BlockRow> {
        self.row(&id.to_string())
    }

    /// Layer counts of the down blocks, mid block and up blocks.
    pub fn layer_census(&self) -> (Vec<usize>, usize, Vec<usize>) {
        let pick = |prefix: &str| {
            self.blocks
                .iter()
                .filter(|r| r.block.starts_with(prefix))
                .map(|r| r.layers)
                .collect::<Vec<_>>()
        };
        let mid = self.row("mid").map_or(0, |r| r.layers);
        (pick("dn"), mid, pick("up"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width table, one line per block plus totals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<6} {:>6} {:>12} {:>7} {:>14} {:>7} {:>12} {:>12}",
            "block", "layers", "params", "param%", "flops", "flop%", "resnet", "transformer"
        );
        for r in &self.blocks {
            let _ = writeln!(
                s,
                "{:<6} {:>6} {:>12} {:>6.2}% {:>14} {:>6.2}% {:>12} {:>12}",
                r.block,
                r.layers,
                r.params,
                100.0 * r.param_share,
                r.flops,
                100.0 * r.flop_share,
                r.resnet.flops.max(r.resnet.params),
                r.transformer.flops.max(r.transformer.params),
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "{:<6} {:>6} {:>12} {:>7} {:>14} {:>7} {:>12} {:>12}",
            "total", "", t.params, "", t.flops, "", "", ""
        );
        s
    }
}
