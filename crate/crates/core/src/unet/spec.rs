use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position of a block in the U: `dn{i}`, `mid`, or `up{i}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockId {
    Down(usize),
    Mid,
    Up(usize),
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockId::Down(i) => write!(f, "dn{i}"),
            BlockId::Mid => write!(f, "mid"),
            BlockId::Up(i) => write!(f, "up{i}"),
        }
    }
}

impl FromStr for BlockId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_idx = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::config(format!("invalid block id `{s}`")))
        };
        if s == "mid" {
            Ok(BlockId::Mid)
        } else if let Some(rest) = s.strip_prefix("dn") {
            Ok(BlockId::Down(parse_idx(rest)?))
        } else if let Some(rest) = s.strip_prefix("up") {
            Ok(BlockId::Up(parse_idx(rest)?))
        } else {
            Err(Error::config(format!("invalid block id `{s}`")))
        }
    }
}

impl Serialize for BlockId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Coarse ownership unit of a parameter: the shared embeddings, the input
/// stem, one of the U blocks, or the output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Embed,
    Stem,
    Block(BlockId),
    Head,
}

impl Part {
    /// Recovers the part from a parameter name's first path segment.
    pub fn of_param(name: &str) -> Result<Part> {
        let head = name.split('.').next().unwrap_or("");
        match head {
            "embed" => Ok(Part::Embed),
            "stem" => Ok(Part::Stem),
            "head" => Ok(Part::Head),
            other => other.parse().map(Part::Block),
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Part::Embed => f.write_str("embed"),
            Part::Stem => f.write_str("stem"),
            Part::Block(b) => b.fmt(f),
            Part::Head => f.write_str("head"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resample {
    Down,
    Up,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondConvSpec {
    pub n_experts: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResNetUnitSpec {
    /// Total input channels, including a concatenated skip tensor.
    pub in_channels: usize,
    pub out_channels: usize,
    /// When set, both 3×3 convolutions are multi-expert CondConv units.
    #[serde(default)]
    pub condconv: Option<CondConvSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerUnitSpec {
    pub heads: usize,
    pub head_dim: usize,
    pub cross_attention: bool,
    pub ff_mult: usize,
}

impl TransformerUnitSpec {
    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    /// Stable identifier within the block; survives pruning of siblings.
    pub id: usize,
    pub resnet: ResNetUnitSpec,
    #[serde(default)]
    pub transformer: Option<TransformerUnitSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub layers: Vec<LayerSpec>,
    pub resample: Resample,
}

/// Declarative description of the whole UNet: blocks of layers of units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetSpec {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub cond_dim: usize,
    pub cond_seq_len: usize,
    pub vocab_size: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
    pub train_timesteps: usize,
    pub down_blocks: Vec<BlockSpec>,
    pub mid_block: BlockSpec,
    pub up_blocks: Vec<BlockSpec>,
}

/// Compact recipe for a standard U-shaped spec.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub base_channels: usize,
    /// One multiplier per down block.
    pub channel_multipliers: Vec<usize>,
    pub down_layers: Vec<usize>,
    pub up_layers: Vec<usize>,
    /// Per down block: whether its layers (and the mirrored up block's) carry
    /// a Transformer unit.
    pub attention: Vec<bool>,
    /// Per down block: whether it halves resolution after its layers.
    pub downsample: Vec<bool>,
    pub head_dim: usize,
    pub ff_mult: usize,
    pub cond_dim: usize,
    pub cond_seq_len: usize,
    pub vocab_size: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
    pub train_timesteps: usize,
}

impl Default for ArchConfig {
    /// Desk scale: 4×16×16 latent, 32 base channels, levels ×1/×2/×4 with a
    /// ResNet-only deepest block at ×4.
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 16,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4, 4],
            down_layers: vec![2, 2, 2, 2],
            up_layers: vec![3, 3, 3, 3],
            attention: vec![true, true, true, false],
            downsample: vec![true, true, false, false],
            head_dim: 32,
            ff_mult: 2,
            cond_dim: 64,
            cond_seq_len: 8,
            vocab_size: 32,
            time_embed_dim: 64,
            norm_groups: 8,
            train_timesteps: 1000,
        }
    }
}

impl ArchConfig {
    /// SD-v1.5-shaped recipe: 320/640/1280/1280 channels, 64×64 latent.
    pub fn sd15_shaped() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 64,
            base_channels: 320,
            channel_multipliers: vec![1, 2, 4, 4],
            down_layers: vec![2, 2, 2, 2],
            up_layers: vec![3, 3, 3, 3],
            attention: vec![true, true, true, false],
            downsample: vec![true, true, true, false],
            head_dim: 40,
            ff_mult: 4,
            cond_dim: 768,
            cond_seq_len: 77,
            vocab_size: 49408,
            time_embed_dim: 1280,
            norm_groups: 32,
            train_timesteps: 1000,
        }
    }

    pub fn to_spec(&self) -> Result<UNetSpec> {
        let n = self.channel_multipliers.len();
        if n == 0 {
            return Err(Error::config("architecture needs at least one down block"));
        }
        for (name, len) in [
            ("down_layers", self.down_layers.len()),
            ("up_layers", self.up_layers.len()),
            ("attention", self.attention.len()),
            ("downsample", self.downsample.len()),
        ] {
            if len != n {
                return Err(Error::config(format!(
                    "architecture.{name} has {len} entries, expected {n} (one per down block)"
                )));
            }
        }
        let channels: Vec<usize> = self
            .channel_multipliers
            .iter()
            .map(|m| m * self.base_channels)
            .collect();
        let transformer = |c: usize, on: bool| -> Result<Option<TransformerUnitSpec>> {
            if !on {
                return Ok(None);
            }
            if self.head_dim == 0 || c % self.head_dim != 0 {
                return Err(Error::config(format!(
                    "architecture.head_dim {} does not divide {c} channels",
                    self.head_dim
                )));
            }
            Ok(Some(TransformerUnitSpec {
                heads: c / self.head_dim,
                head_dim: self.head_dim,
                cross_attention: true,
                ff_mult: self.ff_mult,
            }))
        };

        let mut down_blocks = Vec::with_capacity(n);
        let mut cur = self.base_channels;
        for b in 0..n {
            let c = channels[b];
            let mut layers = Vec::new();
            for id in 0..self.down_layers[b] {
                layers.push(LayerSpec {
                    id,
                    resnet: ResNetUnitSpec {
                        in_channels: cur,
                        out_channels: c,
                        condconv: None,
                    },
                    transformer: transformer(c, self.attention[b])?,
                });
                cur = c;
            }
            let resample = if self.downsample[b] {
                Resample::Down
            } else {
                Resample::None
            };
            down_blocks.push(BlockSpec { layers, resample });
        }
        let deepest = *channels.last().unwrap();
        let mid_block = BlockSpec {
            layers: vec![
                LayerSpec {
                    id: 0,
                    resnet: ResNetUnitSpec {
                        in_channels: cur,
                        out_channels: deepest,
                        condconv: None,
                    },
                    transformer: transformer(deepest, true)?,
                },
                LayerSpec {
                    id: 1,
                    resnet: ResNetUnitSpec {
                        in_channels: deepest,
                        out_channels: deepest,
                        condconv: None,
                    },
                    transformer: None,
                },
            ],
            resample: Resample::None,
        };
        let mut up_blocks = Vec::with_capacity(n);
        for i in 0..n {
            let mirror = n - 1 - i;
            let c = channels[mirror];
            let mut layers = Vec::new();
            for id in 0..self.up_layers[i] {
                layers.push(LayerSpec {
                    id,
                    // Input channels are filled in by `repair` from the skip pairing.
                    resnet: ResNetUnitSpec {
                        in_channels: 0,
                        out_channels: c,
                        condconv: None,
                    },
                    transformer: transformer(c, self.attention[mirror])?,
                });
            }
            let resample = if mirror > 0 && self.downsample[mirror - 1] {
                Resample::Up
            } else {
                Resample::None
            };
            up_blocks.push(BlockSpec { layers, resample });
        }
        let mut spec = UNetSpec {
            latent_channels: self.latent_channels,
            latent_size: self.latent_size,
            base_channels: self.base_channels,
            channel_multipliers: self.channel_multipliers.clone(),
            cond_dim: self.cond_dim,
            cond_seq_len: self.cond_seq_len,
            vocab_size: self.vocab_size,
            time_embed_dim: self.time_embed_dim,
            norm_groups: self.norm_groups,
            train_timesteps: self.train_timesteps,
            down_blocks,
            mid_block,
            up_blocks,
        };
        spec.repair_channels()?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Where an up-block layer's concatenated skip tensor comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipSource {
    pub down_block: usize,
    /// 0 is the block's input; `k > 0` is the output of its `k-1`-th layer.
    pub index: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerIo {
    pub in_channels: usize,
    pub out_channels: usize,
    pub skip: Option<SkipSource>,
    /// Spatial side length at which the layer runs.
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockIo {
    pub id: BlockId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: usize,
    pub layers: Vec<LayerIo>,
    /// Channels and output side length of the resampling convolution.
    pub resample: Option<(usize, usize)>,
    /// Skip tensors this down block publishes: `(channels, size)`.
    pub skips: Vec<(usize, usize)>,
}

/// Resolved dataflow of a spec: channels, resolutions and skip pairing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub stem_out: usize,
    pub blocks: Vec<BlockIo>,
    pub head_in: usize,
    pub mid_channels: usize,
    pub mid_size: usize,
}

impl Topology {
    pub fn block(&self, id: BlockId) -> Option<&BlockIo> {
        self.blocks.iter().find(|b| b.id == id)
    }
}

impl UNetSpec {
    /// The desk-scale default.
    pub fn desk() -> Self {
        ArchConfig::default()
            .to_spec()
            .expect("default architecture is valid")
    }

    pub fn sd15_shaped() -> Self {
        ArchConfig::sd15_shaped()
            .to_spec()
            .expect("SD-shaped architecture is valid")
    }

    pub fn block(&self, id: BlockId) -> Option<&BlockSpec> {
        match id {
            BlockId::Down(i) => self.down_blocks.get(i),
            BlockId::Mid => Some(&self.mid_block),
            BlockId::Up(i) => self.up_blocks.get(i),
        }
    }

    pub fn block_mut(&mut self, id: BlockId) -> Option<&mut BlockSpec> {
        match id {
            BlockId::Down(i) => self.down_blocks.get_mut(i),
            BlockId::Mid => Some(&mut self.mid_block),
            BlockId::Up(i) => self.up_blocks.get_mut(i),
        }
    }

    /// Block ids in execution order.
    pub fn block_ids(&self) -> Vec<BlockId> {
        let mut ids: Vec<BlockId> = (0..self.down_blocks.len()).map(BlockId::Down).collect();
        ids.push(BlockId::Mid);
        ids.extend((0..self.up_blocks.len()).map(BlockId::Up));
        ids
    }

    /// Channels produced by the input convolution.
    pub fn stem_channels(&self) -> usize {
        self.base_channels * self.channel_multipliers.first().copied().unwrap_or(1)
    }

    /// Walks the dataflow. With `fix` set, layer input channels are rewritten
    /// to match; otherwise any disagreement is an error naming the layer.
    fn walk(&mut self, fix: bool, blame: &mut Option<BlockId>) -> Result<Topology> {
        if self.down_blocks.len() != self.up_blocks.len() {
            return Err(Error::config(format!(
                "{} down blocks but {} up blocks",
                self.down_blocks.len(),
                self.up_blocks.len()
            )));
        }
        if self.mid_block.layers.is_empty() {
            return Err(Error::config("mid block has no layers"));
        }
        if self.cond_seq_len == 0 || self.vocab_size < 2 {
            return Err(Error::config(
                "conditioning needs a nonempty sequence and a vocabulary of at least 2",
            ));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        let groups = self.norm_groups;
        let check_groups = |c: usize, what: &dyn fmt::Display| -> Result<()> {
            if groups == 0 || c % groups != 0 {
                return Err(Error::config(format!(
                    "{what}: {c} channels not divisible by norm_groups {groups}"
                )));
            }
            Ok(())
        };

        let mut size = self.latent_size;
        let mut cur = self.stem_channels();
        let stem_out = cur;
        let mut blocks = Vec::new();
        let n = self.down_blocks.len();

        let layer_pass = |id: BlockId,
                          block: &mut BlockSpec,
                          cur: &mut usize,
                          size: usize,
                          skips: Option<&[(usize, usize)]>|
         -> Result<Vec<LayerIo>> {
            let mut ios = Vec::new();
            let mut ids_seen = Vec::new();
            for (j, layer) in block.layers.iter_mut().enumerate() {
                if ids_seen.contains(&layer.id) {
                    return Err(Error::config(format!(
                        "{id}: duplicate layer id {}",
                        layer.id
                    )));
                }
                ids_seen.push(layer.id);
                let name = format!("{id}.l{}", layer.id);
                let skip = skips.and_then(|s| {
                    (j < s.len()).then(|| {
                        let index = s.len() - 1 - j;
                        SkipSource {
                            down_block: match id {
                                BlockId::Up(i) => n - 1 - i,
                                _ => unreachable!(),
                            },
                            index,
                            channels: s[index].0,
                        }
                    })
                });
                if let Some(sk) = skip {
                    let skip_size = skips.unwrap()[sk.index].1;
                    if skip_size != size {
                        return Err(Error::config(format!(
                            "{name}: skip tensor is {skip_size}×{skip_size} but layer runs at {size}×{size}"
                        )));
                    }
                }
                let want_in = *cur + skip.map_or(0, |s| s.channels);
                if fix {
                    layer.resnet.in_channels = want_in;
                } else if layer.resnet.in_channels != want_in {
                    return Err(Error::config(format!(
                        "{name}: resnet expects {} input channels but receives {want_in}",
                        layer.resnet.in_channels
                    )));
                }
                let out = layer.resnet.out_channels;
                if out == 0 {
                    return Err(Error::config(format!("{name}: zero output channels")));
                }
                check_groups(want_in, &format!("{name}.resnet input"))?;
                check_groups(out, &format!("{name}.resnet output"))?;
                if let Some(cc) = &layer.resnet.condconv {
                    if cc.n_experts == 0 {
                        return Err(Error::config(format!(
                            "{name}: CondConv needs at least one expert"
                        )));
                    }
                }
                if let Some(t) = &layer.transformer {
                    if t.heads == 0 || t.head_dim == 0 || t.ff_mult == 0 {
                        return Err(Error::config(format!(
                            "{name}: degenerate transformer unit"
                        )));
                    }
                }
                ios.push(LayerIo {
                    in_channels: want_in,
                    out_channels: out,
                    skip,
                    size,
                });
                *cur = out;
            }
            Ok(ios)
        };

        let mut down_skips: Vec<Vec<(usize, usize)>> = Vec::new();
        for (i, block) in self.down_blocks.iter_mut().enumerate() {
            let id = BlockId::Down(i);
            *blame = Some(id);
            let in_channels = cur;
            let block_size = size;
            let layers = layer_pass(id, block, &mut cur, size, None)?;
            let mut skips = vec![(in_channels, size)];
            skips.extend(layers.iter().map(|l| (l.out_channels, size)));
            let resample = match block.resample {
                Resample::Down => {
                    if size < 2 || size % 2 != 0 {
                        return Err(Error::config(format!(
                            "{id}: cannot downsample {size}×{size}"
                        )));
                    }
                    size /= 2;
                    Some((cur, size))
                }
                Resample::None => None,
                Resample::Up => {
                    return Err(Error::config(format!("{id}: down block cannot upsample")))
                }
            };
            down_skips.push(skips.clone());
            blocks.push(BlockIo {
                id,
                in_channels,
                out_channels: cur,
                size: block_size,
                layers,
                resample,
                skips,
            });
        }

        let mid_in = cur;
        *blame = Some(BlockId::Mid);
        if self.mid_block.resample != Resample::None {
            return Err(Error::config("mid block cannot resample"));
        }
        let mid_layers = layer_pass(BlockId::Mid, &mut self.mid_block, &mut cur, size, None)?;
        let (mid_channels, mid_size) = (cur, size);
        blocks.push(BlockIo {
            id: BlockId::Mid,
            in_channels: mid_in,
            out_channels: cur,
            size,
            layers: mid_layers,
            resample: None,
            skips: vec![],
        });

        for (i, block) in self.up_blocks.iter_mut().enumerate() {
            let id = BlockId::Up(i);
            *blame = Some(id);
            let mirror = n - 1 - i;
            let mirror_size = blocks[mirror].size;
            if size != mirror_size {
                return Err(Error::config(format!(
                    "{id}: runs at {size}×{size} but its mirror dn{mirror} runs at {mirror_size}×{mirror_size}"
                )));
            }
            let in_channels = cur;
            let layers = layer_pass(id, block, &mut cur, size, Some(&down_skips[mirror]))?;
            let resample = match block.resample {
                Resample::Up => {
                    size *= 2;
                    Some((cur, size))
                }
                Resample::None => None,
                Resample::Down => {
                    return Err(Error::config(format!("{id}: up block cannot downsample")))
                }
            };
            blocks.push(BlockIo {
                id,
                in_channels,
                out_channels: cur,
                size: mirror_size,
                layers,
                resample,
                skips: vec![],
            });
        }
        *blame = None;
        if size != self.latent_size {
            return Err(Error::config(format!(
                "up path ends at {size}×{size}, latent is {0}×{0}",
                self.latent_size
            )));
        }
        check_groups(cur, &"head input")?;
        for b in &blocks {
            if let Some((c, _)) = b.resample {
                check_groups(c, &format!("{}.resample", b.id))?;
            }
        }
        Ok(Topology {
            stem_out,
            blocks,
            head_in: cur,
            mid_channels,
            mid_size,
        })
    }

    /// Resolved dataflow; fails with a configuration error naming the
    /// offending block/layer when channel arithmetic is inconsistent.
    pub fn topology(&self) -> Result<Topology> {
        self.clone().walk(false, &mut None)
    }

    /// Like [`topology`](Self::topology), also reporting the block being
    /// resolved when the walk failed.
    pub(crate) fn topology_blame(&self) -> std::result::Result<Topology, (Option<BlockId>, Error)> {
        let mut blame = None;
        self.clone().walk(false, &mut blame).map_err(|e| (blame, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.topology().map(|_| ())
    }

    /// Recomputes every layer's input channels from the surviving layers and
    /// the skip pairing.
    pub fn repair_channels(&mut self) -> Result<Topology> {
        self.walk(true, &mut None)
    }

    /// Layer counts per down and up block.
    pub fn layer_census(&self) -> (Vec<usize>, usize, Vec<usize>) {
        (
            self.down_blocks.iter().map(|b| b.layers.len()).collect(),
            self.mid_block.layers.len(),
            self.up_blocks.iter().map(|b| b.layers.len()).collect(),
        )
    }
}
