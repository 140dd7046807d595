use std::collections::BTreeMap;
use std::sync::Arc;

use crate::diffkit::Tensor;
use crate::rng;

use super::spec::{BlockId, LayerSpec, Resample, UNetSpec};

/// Logit bias given to expert 0 of a freshly built CondConv router.
pub const EXPERT0_BIAS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// Gaussian with std `gain / sqrt(fan_in)`, fan-in taken from trailing dims.
    Fan(f64),
    Normal(f64),
    Ones,
    Zeros,
    RouterBias,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDef {
    pub fn materialize(&self, seed: u64) -> Tensor {
        match self.init {
            Init::Fan(gain) => {
                let fan_in: usize = self.shape[1..].iter().product::<usize>().max(1);
                let fan_in = if self.name.ends_with(".experts") {
                    self.shape[2..].iter().product::<usize>()
                } else {
                    fan_in
                };
                let mut rng = rng::stream(seed, &self.name);
                Tensor::randn(&self.shape, gain / (fan_in as f64).sqrt(), &mut rng)
            }
            Init::Normal(std) => {
                let mut rng = rng::stream(seed, &self.name);
                Tensor::randn(&self.shape, std, &mut rng)
            }
            Init::Ones => Tensor::ones(&self.shape),
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::RouterBias => {
                let mut t = Tensor::zeros(&self.shape);
                t.data_mut()[0] = EXPERT0_BIAS;
                t
            }
        }
    }
}

struct Defs(Vec<ParamDef>);

impl Defs {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamDef { name, shape, init });
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.weight"), vec![c], Init::Ones);
        self.push(format!("{prefix}.bias"), vec![c], Init::Zeros);
    }

    fn linear(&mut self, prefix: &str, out: usize, inp: usize, bias: bool) {
        self.push(format!("{prefix}.weight"), vec![out, inp], Init::Fan(1.0));
        if bias {
            self.push(format!("{prefix}.bias"), vec![out], Init::Zeros);
        }
    }

    fn conv(&mut self, prefix: &str, out: usize, inp: usize, k: usize) {
        self.push(
            format!("{prefix}.weight"),
            vec![out, inp, k, k],
            Init::Fan(1.0),
        );
        self.push(format!("{prefix}.bias"), vec![out], Init::Zeros);
    }

    fn conv3(&mut self, prefix: &str, out: usize, inp: usize, experts: Option<usize>) {
        match experts {
            None => self.conv(prefix, out, inp, 3),
            Some(e) => {
                self.push(
                    format!("{prefix}.experts"),
                    vec![e, out, inp, 3, 3],
                    Init::Fan(1.0),
                );
                self.push(format!("{prefix}.bias"), vec![out], Init::Zeros);
                self.push(format!("{prefix}.router.weight"), vec![e, inp], Init::Zeros);
                self.push(format!("{prefix}.router.bias"), vec![e], Init::RouterBias);
            }
        }
    }

    fn layer(&mut self, spec: &UNetSpec, prefix: &str, layer: &LayerSpec) {
        let r = &layer.resnet;
        let (cin, cout) = (r.in_channels, r.out_channels);
        let experts = r.condconv.map(|c| c.n_experts);
        self.norm(&format!("{prefix}.resnet.norm1"), cin);
        self.conv3(&format!("{prefix}.resnet.conv1"), cout, cin, experts);
        self.linear(
            &format!("{prefix}.resnet.time_proj"),
            cout,
            spec.time_embed_dim,
            true,
        );
        self.norm(&format!("{prefix}.resnet.norm2"), cout);
        self.conv3(&format!("{prefix}.resnet.conv2"), cout, cout, experts);
        if cin != cout {
            self.conv(&format!("{prefix}.resnet.skip"), cout, cin, 1);
        }
        if let Some(t) = &layer.transformer {
            let inner = t.inner_dim();
            let p = format!("{prefix}.attn");
            self.norm(&format!("{p}.norm"), cout);
            self.linear(&format!("{p}.proj_in"), inner, cout, true);
            self.norm(&format!("{p}.ln1"), inner);
            for m in ["q", "k", "v"] {
                self.linear(&format!("{p}.self.{m}"), inner, inner, false);
            }
            self.linear(&format!("{p}.self.out"), inner, inner, true);
            if t.cross_attention {
                self.norm(&format!("{p}.ln2"), inner);
                self.linear(&format!("{p}.cross.q"), inner, inner, false);
                self.linear(&format!("{p}.cross.k"), inner, spec.cond_dim, false);
                self.linear(&format!("{p}.cross.v"), inner, spec.cond_dim, false);
                self.linear(&format!("{p}.cross.out"), inner, inner, true);
            }
            self.norm(&format!("{p}.ln3"), inner);
            self.linear(&format!("{p}.ff.fc1"), inner * t.ff_mult, inner, true);
            self.linear(&format!("{p}.ff.fc2"), inner, inner * t.ff_mult, true);
            self.linear(&format!("{p}.proj_out"), cout, inner, true);
        }
    }
}

/// Full parameter inventory of a spec, in a fixed order. Assumes the spec
/// validates.
pub(crate) fn inventory(spec: &UNetSpec) -> Vec<ParamDef> {
    let mut d = Defs(Vec::new());
    let te = spec.time_embed_dim;
    d.linear("embed.time.fc1", te, te, true);
    d.linear("embed.time.fc2", te, te, true);
    d.push(
        "embed.tokens.weight".into(),
        vec![spec.vocab_size, spec.cond_dim],
        Init::Normal(1.0),
    );
    d.push(
        "embed.positions.weight".into(),
        vec![spec.cond_seq_len, spec.cond_dim],
        Init::Normal(1.0),
    );
    d.conv("stem.conv", spec.stem_channels(), spec.latent_channels, 3);

    let mut last = spec.stem_channels();
    for id in spec.block_ids() {
        let block = spec.block(id).expect("id from block_ids");
        for layer in &block.layers {
            d.layer(spec, &format!("{id}.l{}", layer.id), layer);
            last = layer.resnet.out_channels;
        }
        match block.resample {
            Resample::Down => d.conv(&format!("{id}.down"), last, last, 3),
            Resample::Up => d.conv(&format!("{id}.up"), last, last, 3),
            Resample::None => {}
        }
    }
    d.norm("head.norm", last);
    d.conv("head.conv", spec.latent_channels, last, 3);
    d.0
}

/// Named, shared-storage parameter tensors. Clones are cheap; mutation
/// copies on write.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(|t| t.as_ref())
    }

    pub(crate) fn get_arc(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors
            .insert(name.into(), Arc::new(t))
            .map(|old| Arc::try_unwrap(old).unwrap_or_else(|a| (*a).clone()))
    }

    pub(crate) fn insert_arc(&mut self, name: impl Into<String>, t: Arc<Tensor>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors
            .remove(name)
            .map(|old| Arc::try_unwrap(old).unwrap_or_else(|a| (*a).clone()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bitwise_eq(b))
    }
}

/// Canonical name prefix of a layer's parameters.
pub fn layer_prefix(block: BlockId, layer_id: usize) -> String {
    format!("{block}.l{layer_id}")
}
