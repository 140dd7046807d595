use std::collections::{BTreeMap, HashMap};

use crate::diffkit::{FlopCounter, Graph, Tensor, Var};
use crate::error::{Error, Result};

use super::params::{inventory, layer_prefix, ParamStore};
use super::spec::{BlockId, LayerSpec, Resample, UNetSpec};

pub const NORM_EPS: f64 = 1e-5;
const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal timestep encoding: `[sin(t·f₀), cos(t·f₀), sin(t·f₁), …]` with
/// geometric frequencies `f_i = 10000^(−i/(dim/2))`.
pub fn timestep_embed(t: usize, dim: usize, t_max: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!(
            "timestep embedding dim must be even and positive, got {dim}"
        )));
    }
    if t >= t_max {
        return Err(Error::contract(format!(
            "timestep {t} outside [0, {t_max})"
        )));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = MAX_PERIOD.powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        data.push(arg.sin());
        data.push(arg.cos());
    }
    Ok(Tensor::from_parts(vec![dim], data))
}

/// Parameters registered as graph leaves, addressable by name.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Graph nodes of interest produced by one forward pass.
pub struct Taps {
    pub output: Var,
    pub mid: Var,
    /// Output of every block (after its resampling), in execution order.
    pub blocks: Vec<(BlockId, Var)>,
}

/// Materialized results of an instrumented forward pass.
#[derive(Debug, Clone)]
pub struct ForwardReport {
    pub output: Tensor,
    pub mid: Tensor,
    pub blocks: BTreeMap<BlockId, Tensor>,
    /// Units executed, in order, e.g. `dn0.l0.resnet`.
    pub trace: Vec<String>,
    pub flops: FlopCounter,
}

/// A UNet instance: a validated spec plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetModel {
    spec: UNetSpec,
    params: ParamStore,
}

/// Builds a model with every parameter drawn from its own seeded stream.
pub fn build_unet(spec: &UNetSpec, seed: u64) -> Result<UNetModel> {
    spec.validate()?;
    let mut params = ParamStore::new();
    for def in inventory(spec) {
        let t = def.materialize(seed);
        params.insert(def.name, t);
    }
    Ok(UNetModel {
        spec: spec.clone(),
        params,
    })
}

struct Ctx<'a> {
    p: &'a BoundParams,
    temb: Var,
    cond: Var,
    trace: Option<&'a mut Vec<String>>,
}

impl Ctx<'_> {
    fn v(&self, name: &str) -> Result<Var> {
        self.p.var(name)
    }

    fn log(&mut self, unit: String) {
        if let Some(t) = self.trace.as_deref_mut() {
            t.push(unit);
        }
    }
}

impl UNetModel {
    /// Pairs a spec with an existing parameter set, checking that names and
    /// shapes match the spec's inventory exactly.
    pub fn from_parts(spec: UNetSpec, params: ParamStore) -> Result<Self> {
        spec.validate()?;
        let defs = inventory(&spec);
        let mut problems = Vec::new();
        for d in &defs {
            match params.get(&d.name) {
                None => problems.push(format!("missing `{}`", d.name)),
                Some(t) if t.shape() != d.shape.as_slice() => problems.push(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    d.name,
                    t.shape(),
                    d.shape
                )),
                Some(_) => {}
            }
        }
        if params.len() != defs.len() {
            for name in params.names() {
                if !defs.iter().any(|d| d.name == name) {
                    problems.push(format!("unexpected `{name}`"));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(format!(
                "parameters do not match spec: {}",
                problems.join("; ")
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable parameter access. Replacing a tensor with one of a different
    /// shape breaks the model; use [`UNetModel::from_parts`] to re-check.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (UNetSpec, ParamStore) {
        (self.spec, self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let vars = self
            .params
            .names()
            .map(|name| {
                let t = self.params.get_arc(name).expect("name from store").clone();
                (name.to_string(), g.leaf(t, trainable(name)))
            })
            .collect();
        BoundParams { vars }
    }

    fn check_inputs(
        &self,
        latent_shape: &[usize],
        timesteps: &[usize],
        tokens: &[Vec<usize>],
    ) -> Result<usize> {
        let s = &self.spec;
        let want = [s.latent_channels, s.latent_size, s.latent_size];
        if latent_shape.len() != 4 || latent_shape[1..] != want {
            let mut expected = vec![latent_shape.first().copied().unwrap_or(1)];
            expected.extend_from_slice(&want);
            return Err(Error::DimensionMismatch {
                op: "unet input",
                lhs: latent_shape.to_vec(),
                rhs: expected,
            });
        }
        let n = latent_shape[0];
        if timesteps.len() != n || tokens.len() != n {
            return Err(Error::contract(format!(
                "batch of {n} latents with {} timesteps and {} token sequences",
                timesteps.len(),
                tokens.len()
            )));
        }
        if let Some(&t) = timesteps.iter().find(|&&t| t >= s.train_timesteps) {
            return Err(Error::contract(format!(
                "timestep {t} outside [0, {})",
                s.train_timesteps
            )));
        }
        for seq in tokens {
            if seq.len() != s.cond_seq_len {
                return Err(Error::contract(format!(
                    "token sequence of length {}, expected {}",
                    seq.len(),
                    s.cond_seq_len
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&id| id >= s.vocab_size) {
                return Err(Error::contract(format!(
                    "token id {bad} outside vocabulary of {}",
                    s.vocab_size
                )));
            }
        }
        Ok(n)
    }

    /// Records the forward pass on `g`. `x` is `[N, C, H, W]`.
    pub fn graph_forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        timesteps: &[usize],
        tokens: &[Vec<usize>],
        trace: Option<&mut Vec<String>>,
    ) -> Result<Taps> {
        let spec = &self.spec;
        let n = self.check_inputs(g.shape(x), timesteps, tokens)?;
        let te = spec.time_embed_dim;

        let mut sin = Vec::with_capacity(n * te);
        for &t in timesteps {
            sin.extend_from_slice(timestep_embed(t, te, spec.train_timesteps)?.data());
        }
        let sin = g.constant(Tensor::from_parts(vec![n, te], sin));
        let h = g.linear(
            sin,
            p.var("embed.time.fc1.weight")?,
            Some(p.var("embed.time.fc1.bias")?),
        )?;
        let h = g.silu(h);
        let temb = g.linear(
            h,
            p.var("embed.time.fc2.weight")?,
            Some(p.var("embed.time.fc2.bias")?),
        )?;
        let temb = g.silu(temb);

        let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
        let cond = g.embedding(p.var("embed.tokens.weight")?, &ids, &[n, spec.cond_seq_len])?;
        let cond = g.add_broadcast(cond, p.var("embed.positions.weight")?)?;

        let mut cx = Ctx {
            p,
            temb,
            cond,
            trace,
        };
        let mut h = g.conv2d(
            x,
            p.var("stem.conv.weight")?,
            Some(p.var("stem.conv.bias")?),
            1,
            1,
        )?;
        let mut blocks = Vec::new();

        let mut down_skips: Vec<Vec<Var>> = Vec::new();
        for (i, block) in spec.down_blocks.iter().enumerate() {
            let id = BlockId::Down(i);
            let mut skips = vec![h];
            for layer in &block.layers {
                h = self.layer(g, &mut cx, id, layer, h)?;
                skips.push(h);
            }
            h = self.resample(g, &cx, id, block.resample, h)?;
            down_skips.push(skips);
            blocks.push((id, h));
        }
        for layer in &spec.mid_block.layers {
            h = self.layer(g, &mut cx, BlockId::Mid, layer, h)?;
        }
        let mid = h;
        blocks.push((BlockId::Mid, h));
        let nb = spec.up_blocks.len();
        for (i, block) in spec.up_blocks.iter().enumerate() {
            let id = BlockId::Up(i);
            let skips = &down_skips[nb - 1 - i];
            for (j, layer) in block.layers.iter().enumerate() {
                if j < skips.len() {
                    h = g.concat_channels(&[h, skips[skips.len() - 1 - j]])?;
                }
                h = self.layer(g, &mut cx, id, layer, h)?;
            }
            h = self.resample(g, &cx, id, block.resample, h)?;
            blocks.push((id, h));
        }
        let h = g.group_norm(
            h,
            spec.norm_groups,
            p.var("head.norm.weight")?,
            p.var("head.norm.bias")?,
            NORM_EPS,
        )?;
        let h = g.silu(h);
        let output = g.conv2d(
            h,
            p.var("head.conv.weight")?,
            Some(p.var("head.conv.bias")?),
            1,
            1,
        )?;
        Ok(Taps {
            output,
            mid,
            blocks,
        })
    }

    fn resample(&self, g: &mut Graph, cx: &Ctx, id: BlockId, r: Resample, h: Var) -> Result<Var> {
        match r {
            Resample::None => Ok(h),
            Resample::Down => g.conv2d(
                h,
                cx.v(&format!("{id}.down.weight"))?,
                Some(cx.v(&format!("{id}.down.bias"))?),
                2,
                1,
            ),
            Resample::Up => {
                let u = g.upsample_nearest2x(h)?;
                g.conv2d(
                    u,
                    cx.v(&format!("{id}.up.weight"))?,
                    Some(cx.v(&format!("{id}.up.bias"))?),
                    1,
                    1,
                )
            }
        }
    }

    fn norm(&self, g: &mut Graph, cx: &Ctx, prefix: &str, x: Var) -> Result<Var> {
        g.group_norm(
            x,
            self.spec.norm_groups,
            cx.v(&format!("{prefix}.weight"))?,
            cx.v(&format!("{prefix}.bias"))?,
            NORM_EPS,
        )
    }

    fn conv3(&self, g: &mut Graph, cx: &Ctx, prefix: &str, condconv: bool, x: Var) -> Result<Var> {
        let bias = Some(cx.v(&format!("{prefix}.bias"))?);
        if !condconv {
            return g.conv2d(x, cx.v(&format!("{prefix}.weight"))?, bias, 1, 1);
        }
        condconv_graph(
            g,
            x,
            cx.v(&format!("{prefix}.experts"))?,
            bias,
            cx.v(&format!("{prefix}.router.weight"))?,
            cx.v(&format!("{prefix}.router.bias"))?,
        )
    }

    fn layer(
        &self,
        g: &mut Graph,
        cx: &mut Ctx,
        block: BlockId,
        layer: &LayerSpec,
        x: Var,
    ) -> Result<Var> {
        let prefix = layer_prefix(block, layer.id);
        let r = &layer.resnet;
        let cc = r.condconv.is_some();

        cx.log(format!("{prefix}.resnet"));
        let rp = format!("{prefix}.resnet");
        let a = self.norm(g, cx, &format!("{rp}.norm1"), x)?;
        let a = g.silu(a);
        let a = self.conv3(g, cx, &format!("{rp}.conv1"), cc, a)?;
        let tp = g.linear(
            cx.temb,
            cx.v(&format!("{rp}.time_proj.weight"))?,
            Some(cx.v(&format!("{rp}.time_proj.bias"))?),
        )?;
        let a = g.add_channel_bias(a, tp)?;
        let a = self.norm(g, cx, &format!("{rp}.norm2"), a)?;
        let a = g.silu(a);
        let a = self.conv3(g, cx, &format!("{rp}.conv2"), cc, a)?;
        let skip = if r.in_channels != r.out_channels {
            g.conv2d(
                x,
                cx.v(&format!("{rp}.skip.weight"))?,
                Some(cx.v(&format!("{rp}.skip.bias"))?),
                1,
                0,
            )?
        } else {
            x
        };
        let mut h = g.add(a, skip)?;

        if let Some(t) = &layer.transformer {
            cx.log(format!("{prefix}.attn"));
            let ap = format!("{prefix}.attn");
            let shape = g.shape(h).to_vec();
            let (hh, ww) = (shape[2], shape[3]);
            let lin = |g: &mut Graph, x: Var, name: &str, bias: bool| -> Result<Var> {
                let b = if bias {
                    Some(cx.v(&format!("{ap}.{name}.bias"))?)
                } else {
                    None
                };
                g.linear(x, cx.v(&format!("{ap}.{name}.weight"))?, b)
            };
            let ln = |g: &mut Graph, x: Var, name: &str| -> Result<Var> {
                g.layer_norm(
                    x,
                    cx.v(&format!("{ap}.{name}.weight"))?,
                    cx.v(&format!("{ap}.{name}.bias"))?,
                    NORM_EPS,
                )
            };
            let a = self.norm(g, cx, &format!("{ap}.norm"), h)?;
            let a = g.to_tokens(a)?;
            let mut s = lin(g, a, "proj_in", true)?;

            let u = ln(g, s, "ln1")?;
            let q = lin(g, u, "self.q", false)?;
            let k = lin(g, u, "self.k", false)?;
            let v = lin(g, u, "self.v", false)?;
            let o = g.attention(q, k, v, t.heads)?;
            let o = lin(g, o, "self.out", true)?;
            s = g.add(s, o)?;

            if t.cross_attention {
                let u = ln(g, s, "ln2")?;
                let q = lin(g, u, "cross.q", false)?;
                let k = lin(g, cx.cond, "cross.k", false)?;
                let v = lin(g, cx.cond, "cross.v", false)?;
                let o = g.attention(q, k, v, t.heads)?;
                let o = lin(g, o, "cross.out", true)?;
                s = g.add(s, o)?;
            }

            let u = ln(g, s, "ln3")?;
            let f = lin(g, u, "ff.fc1", true)?;
            let f = g.gelu(f);
            let f = lin(g, f, "ff.fc2", true)?;
            s = g.add(s, f)?;

            let o = lin(g, s, "proj_out", true)?;
            let o = g.from_tokens(o, hh, ww)?;
            h = g.add(o, h)?;
        }
        Ok(h)
    }

    /// Instrumented inference pass returning all taps, the executed-unit
    /// trace, and the runtime FLOP counter.
    pub fn forward_report(
        &self,
        latent: &Tensor,
        timesteps: &[usize],
        tokens: &[Vec<usize>],
    ) -> Result<ForwardReport> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, |_| false);
        let x = g.constant(latent.clone());
        let before = g.flops();
        let mut trace = Vec::new();
        let taps = self.graph_forward(&mut g, &p, x, timesteps, tokens, Some(&mut trace))?;
        let after = g.flops();
        let flops = FlopCounter {
            conv: after.conv - before.conv,
            linear: after.linear - before.linear,
            attention: after.attention - before.attention,
            elementwise: after.elementwise - before.elementwise,
        };
        Ok(ForwardReport {
            output: g.value(taps.output).clone(),
            mid: g.value(taps.mid).clone(),
            blocks: taps
                .blocks
                .iter()
                .map(|&(id, v)| (id, g.value(v).clone()))
                .collect(),
            trace,
            flops,
        })
    }

    /// Noise prediction for a batch `[N, C, H, W]`.
    pub fn forward(
        &self,
        latent: &Tensor,
        timesteps: &[usize],
        tokens: &[Vec<usize>],
    ) -> Result<Tensor> {
        self.forward_with_taps(latent, timesteps, tokens)
            .map(|(out, _)| out)
    }

    /// Noise prediction plus the mid block's output features.
    pub fn forward_with_taps(
        &self,
        latent: &Tensor,
        timesteps: &[usize],
        tokens: &[Vec<usize>],
    ) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, |_| false);
        let x = g.constant(latent.clone());
        let taps = self.graph_forward(&mut g, &p, x, timesteps, tokens, None)?;
        Ok((g.value(taps.output).clone(), g.value(taps.mid).clone()))
    }
}

/// Routed multi-expert 3×3 convolution on the graph: softmax routing from
/// the globally pooled input, per-sample kernel mixture, stride 1, pad 1.
pub(crate) fn condconv_graph(
    g: &mut Graph,
    x: Var,
    experts: Var,
    bias: Option<Var>,
    router_w: Var,
    router_b: Var,
) -> Result<Var> {
    let pooled = g.global_avg_pool(x)?;
    let logits = g.linear(pooled, router_w, Some(router_b))?;
    let r = g.softmax(logits)?;
    let k = g.mix_kernels(r, experts)?;
    g.conv2d_per_sample(x, k, bias, 1)
}
