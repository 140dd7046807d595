//! Structural compression: layer pruning, teacher-weight transplant,
//! block-level recombination of teacher and student with freeze masks, and
//! cross-layer CondConv weight inheritance.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffkit::Tensor;
use crate::error::{Error, Result};
use crate::unet::{
    inventory, BlockId, CondConvSpec, Init, ParamDef, ParamStore, Part, UNetModel, UNetSpec,
    EXPERT0_BIAS,
};

/// Gain of randomly initialized CondConv experts relative to fan-in scaling.
pub const RANDOM_EXPERT_GAIN: f64 = 0.1;

/// Layers to remove, addressed by block and stable layer id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrunePlan {
    pub removals: Vec<(BlockId, usize)>,
}

impl PrunePlan {
    pub fn new(removals: impl IntoIterator<Item = (BlockId, usize)>) -> Self {
        Self {
            removals: removals.into_iter().collect(),
        }
    }

    /// Removes every layer except the first from the shallowest down block
    /// and the shallowest up block.
    pub fn default_for(spec: &UNetSpec) -> Self {
        let mut removals = Vec::new();
        let mut drop_tail = |id: BlockId| {
            if let Some(b) = spec.block(id) {
                removals.extend(b.layers.iter().skip(1).map(|l| (id, l.id)));
            }
        };
        drop_tail(BlockId::Down(0));
        if !spec.up_blocks.is_empty() {
            drop_tail(BlockId::Up(spec.up_blocks.len() - 1));
        }
        Self { removals }
    }

    pub fn validate(&self, spec: &UNetSpec) -> Result<()> {
        let mut problems = Vec::new();
        let mut seen = BTreeSet::new();
        for &(block, id) in &self.removals {
            if !seen.insert((block, id)) {
                problems.push(format!("({block}, {id}): listed twice"));
                continue;
            }
            match spec.block(block) {
                None => problems.push(format!("({block}, {id}): no such block")),
                Some(b) if !b.layers.iter().any(|l| l.id == id) => {
                    let ids: Vec<usize> = b.layers.iter().map(|l| l.id).collect();
                    problems.push(format!("({block}, {id}): block has layers {ids:?}"));
                }
                Some(_) => {}
            }
        }
        let mid_left = spec
            .mid_block
            .layers
            .iter()
            .filter(|l| !seen.contains(&(BlockId::Mid, l.id)))
            .count();
        if mid_left == 0 {
            problems.push("mid block would be emptied; it must keep at least one layer".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Plan(problems))
        }
    }
}

/// Removes the planned layers and repairs input channels from the
/// surviving layers and skip pairing. Untouched layers keep their specs.
pub fn prune_layers(spec: &UNetSpec, plan: &PrunePlan) -> Result<UNetSpec> {
    spec.validate()?;
    plan.validate(spec)?;
    let mut out = spec.clone();
    for id in spec.block_ids() {
        let block = out.block_mut(id).expect("id from block_ids");
        block
            .layers
            .retain(|l| !plan.removals.contains(&(id, l.id)));
    }
    out.repair_channels()?;
    Ok(out)
}

/// Splits `dn0.l1.resnet.conv1.weight` into `(dn0, 1, "resnet.conv1.weight")`.
pub fn split_layer_name(name: &str) -> Option<(BlockId, usize, &str)> {
    let mut it = name.splitn(3, '.');
    let block: BlockId = it.next()?.parse().ok()?;
    let layer = it.next()?.strip_prefix('l')?.parse().ok()?;
    Some((block, layer, it.next()?))
}

/// Which teacher layer seeds each student layer. Unlisted layers map to the
/// teacher layer with the same block and id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerMapping(pub BTreeMap<(BlockId, usize), (BlockId, usize)>);

impl LayerMapping {
    pub fn identity() -> Self {
        Self::default()
    }

    fn source_name(&self, name: &str) -> String {
        match split_layer_name(name) {
            Some((b, l, rest)) => match self.0.get(&(b, l)) {
                Some(&(tb, tl)) => format!("{tb}.l{tl}.{rest}"),
                None => name.to_string(),
            },
            None => name.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransplantReport {
    /// Parameters copied bitwise from the teacher.
    pub copied: Vec<String>,
    /// Parameters with no shape-compatible teacher counterpart, freshly
    /// initialized from the seed.
    pub fresh: Vec<String>,
}

/// Builds a model for `spec` whose parameters come from `teacher` where the
/// mapped name exists with the same shape, and from `seed` otherwise.
pub fn transplant_weights(
    spec: &UNetSpec,
    teacher: &UNetModel,
    mapping: &LayerMapping,
    seed: u64,
) -> Result<(UNetModel, TransplantReport)> {
    spec.validate()?;
    let mut params = ParamStore::new();
    let mut report = TransplantReport::default();
    for def in inventory(spec) {
        let src = mapping.source_name(&def.name);
        match teacher.params().get_arc(&src) {
            Some(t) if t.shape() == def.shape.as_slice() => {
                params.insert_arc(def.name.clone(), Arc::clone(t));
                report.copied.push(def.name);
            }
            _ => {
                params.insert(def.name.clone(), def.materialize(seed));
                report.fresh.push(def.name);
            }
        }
    }
    Ok((UNetModel::from_parts(spec.clone(), params)?, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Teacher,
    Student,
}

/// Where a parameter's current value originated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Teacher,
    Student,
    Fresh,
}

impl From<Source> for Provenance {
    fn from(s: Source) -> Self {
        match s {
            Source::Teacher => Provenance::Teacher,
            Source::Student => Provenance::Student,
        }
    }
}

pub type ProvenanceMap = BTreeMap<String, Provenance>;

fn teacher() -> Source {
    Source::Teacher
}

/// Block-granular assignment of the combined model to teacher or student.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombinationPlan {
    pub assignments: BTreeMap<BlockId, Source>,
    pub freeze_teacher_part: bool,
    /// Time MLP and condition embeddings.
    #[serde(default = "teacher")]
    pub embed: Source,
    /// Input convolution; follows the first down block when unset.
    #[serde(default)]
    pub stem: Option<Source>,
    /// Output norm and convolution; follows the last up block when unset.
    #[serde(default)]
    pub head: Option<Source>,
    /// Parameter-name prefixes forced frozen.
    #[serde(default)]
    pub freeze: Vec<String>,
    /// Parameter-name prefixes forced trainable; applied after `freeze`.
    #[serde(default)]
    pub unfreeze: Vec<String>,
}

impl CombinationPlan {
    /// Every part from `source`.
    pub fn uniform(spec: &UNetSpec, source: Source, freeze_teacher_part: bool) -> Self {
        Self {
            assignments: spec.block_ids().into_iter().map(|b| (b, source)).collect(),
            freeze_teacher_part,
            embed: source,
            stem: None,
            head: None,
            freeze: Vec::new(),
            unfreeze: Vec::new(),
        }
    }

    pub fn all_teacher(spec: &UNetSpec, freeze_teacher_part: bool) -> Self {
        Self::uniform(spec, Source::Teacher, freeze_teacher_part)
    }

    /// The listed blocks from the student, everything else from the teacher.
    pub fn from_student_blocks(
        spec: &UNetSpec,
        student: &[BlockId],
        freeze_teacher_part: bool,
    ) -> Self {
        let mut plan = Self::all_teacher(spec, freeze_teacher_part);
        for b in student {
            plan.assignments.insert(*b, Source::Student);
        }
        plan
    }

    /// The six block-combination structures `M1`–`M6`: the student supplies
    /// the `k` shallowest down blocks and the `k` shallowest up blocks (`k` =
    /// 1, 2, 3 for M1/M4, M2/M5, M3/M6); M1–M3 freeze the teacher part.
    /// Requires a spec with four down and four up blocks.
    pub fn preset(name: &str, spec: &UNetSpec) -> Result<Self> {
        let (k, frozen) = match name {
            "M1" => (1, true),
            "M2" => (2, true),
            "M3" => (3, true),
            "M4" => (1, false),
            "M5" => (2, false),
            "M6" => (3, false),
            other => {
                return Err(Error::config(format!(
                    "unknown combination preset `{other}`"
                )))
            }
        };
        let n = spec.down_blocks.len();
        if n != 4 || spec.up_blocks.len() != 4 {
            return Err(Error::config(format!(
                "combination preset {name} needs 4 down and 4 up blocks, spec has {n} and {}",
                spec.up_blocks.len()
            )));
        }
        let mut student: Vec<BlockId> = (0..k).map(BlockId::Down).collect();
        student.extend((n - k..n).map(BlockId::Up));
        Ok(Self::from_student_blocks(spec, &student, frozen))
    }

    /// Source of a parameter group.
    pub fn source_of(&self, part: Part, spec: &UNetSpec) -> Option<Source> {
        match part {
            Part::Embed => Some(self.embed),
            Part::Block(b) => self.assignments.get(&b).copied(),
            Part::Stem => self
                .stem
                .or_else(|| self.assignments.get(&BlockId::Down(0)).copied()),
            Part::Head => self.head.or_else(|| {
                spec.up_blocks
                    .len()
                    .checked_sub(1)
                    .and_then(|i| self.assignments.get(&BlockId::Up(i)).copied())
            }),
        }
    }

    pub fn validate(&self, spec: &UNetSpec) -> Result<()> {
        let ids: BTreeSet<BlockId> = spec.block_ids().into_iter().collect();
        let mut problems = Vec::new();
        for b in &ids {
            if !self.assignments.contains_key(b) {
                problems.push(format!("{b}: no source assigned"));
            }
        }
        for b in self.assignments.keys() {
            if !ids.contains(b) {
                problems.push(format!("{b}: not a block of the architecture"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Plan(problems))
        }
    }
}

/// Per-parameter trainability.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    frozen: BTreeMap<String, bool>,
}

impl FreezeMask {
    pub fn from_map(frozen: BTreeMap<String, bool>) -> Self {
        Self { frozen }
    }

    /// Every parameter of `model` trainable.
    pub fn none(model: &UNetModel) -> Self {
        Self::uniform(model, false)
    }

    /// Every parameter of `model` frozen.
    pub fn all(model: &UNetModel) -> Self {
        Self::uniform(model, true)
    }

    fn uniform(model: &UNetModel, frozen: bool) -> Self {
        Self {
            frozen: model
                .params()
                .names()
                .map(|n| (n.to_string(), frozen))
                .collect(),
        }
    }

    /// Names not covered by the mask count as trainable.
    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.get(name).copied().unwrap_or(false)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen
            .iter()
            .filter(|(_, &f)| f)
            .map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, bool)> {
        self.frozen.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }

    /// True when the mask names exactly the parameters of `model`.
    pub fn covers(&self, model: &UNetModel) -> bool {
        self.frozen.len() == model.params().len()
            && model.params().names().all(|n| self.frozen.contains_key(n))
    }
}

#[derive(Debug, Clone)]
pub struct Recombined {
    pub model: UNetModel,
    pub freeze: FreezeMask,
    pub provenance: ProvenanceMap,
}

fn exec_predecessor(spec: &UNetSpec, id: BlockId) -> String {
    let ids = spec.block_ids();
    match ids.iter().position(|b| *b == id) {
        Some(0) | None => "stem".into(),
        Some(i) => ids[i - 1].to_string(),
    }
}

/// Assembles a model whose every block is a deep copy of the assigned
/// source's block, with a freeze mask and per-parameter provenance.
pub fn recombine(
    teacher: &UNetModel,
    student: &UNetModel,
    plan: &CombinationPlan,
) -> Result<Recombined> {
    let ts = teacher.spec();
    let ss = student.spec();
    plan.validate(ts)?;
    if ss.block_ids() != ts.block_ids() {
        return Err(Error::config(
            "teacher and student have different block layouts",
        ));
    }
    let globals = |s: &UNetSpec| {
        (
            s.latent_channels,
            s.latent_size,
            s.base_channels,
            s.cond_dim,
            s.cond_seq_len,
            s.vocab_size,
            s.time_embed_dim,
            s.norm_groups,
            s.train_timesteps,
        )
    };
    if globals(ts) != globals(ss) {
        return Err(Error::config(
            "teacher and student disagree on global architecture settings",
        ));
    }

    let mut spec = ts.clone();
    for id in ts.block_ids() {
        let src = match plan.assignments[&id] {
            Source::Teacher => ts,
            Source::Student => ss,
        };
        *spec.block_mut(id).expect("same layout") = src.block(id).expect("same layout").clone();
    }
    if let Err((blame, e)) = spec.topology_blame() {
        let detail = e.to_string();
        return Err(match blame {
            Some(id) => Error::Boundary {
                left: exec_predecessor(&spec, id),
                right: id.to_string(),
                detail,
            },
            None => Error::Boundary {
                left: spec
                    .up_blocks
                    .len()
                    .checked_sub(1)
                    .map_or("mid".into(), |i| BlockId::Up(i).to_string()),
                right: "head".into(),
                detail,
            },
        });
    }

    let mut params = ParamStore::new();
    let mut provenance = ProvenanceMap::new();
    let mut frozen = BTreeMap::new();
    for def in inventory(&spec) {
        let part = Part::of_param(&def.name)?;
        let source = plan
            .source_of(part, &spec)
            .ok_or_else(|| Error::Plan(vec![format!("{part}: no source assigned")]))?;
        let model = match source {
            Source::Teacher => teacher,
            Source::Student => student,
        };
        let t = model
            .params()
            .get_arc(&def.name)
            .filter(|t| t.shape() == def.shape.as_slice())
            .ok_or_else(|| Error::Boundary {
                left: part.to_string(),
                right: format!("{source:?}").to_lowercase(),
                detail: format!(
                    "`{}` with shape {:?} not available from the source",
                    def.name, def.shape
                ),
            })?;
        params.insert_arc(def.name.clone(), Arc::clone(t));
        provenance.insert(def.name.clone(), source.into());
        let mut f = plan.freeze_teacher_part && source == Source::Teacher;
        if plan.freeze.iter().any(|p| def.name.starts_with(p.as_str())) {
            f = true;
        }
        if plan
            .unfreeze
            .iter()
            .any(|p| def.name.starts_with(p.as_str()))
        {
            f = false;
        }
        frozen.insert(def.name, f);
    }
    Ok(Recombined {
        model: UNetModel::from_parts(spec, params)?,
        freeze: FreezeMask { frozen },
        provenance,
    })
}

/// Collapses per-parameter provenance to one origin per parameter group;
/// a group with mixed origins is an error.
pub fn provenance_audit(provenance: &ProvenanceMap) -> Result<BTreeMap<Part, Provenance>> {
    let mut out: BTreeMap<Part, Provenance> = BTreeMap::new();
    let mut problems = Vec::new();
    for (name, &p) in provenance {
        let part = Part::of_param(name)?;
        match out.get(&part) {
            Some(&q) if q != p => {
                problems.push(format!("{part}: `{name}` is {p:?} but group is {q:?}"))
            }
            Some(_) => {}
            None => {
                out.insert(part, p);
            }
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Plan(problems))
    }
}

/// Origin of one CondConv expert kernel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertOrigin {
    /// Copied from the named teacher parameter.
    Teacher(String),
    /// Kept from the model being augmented.
    Own(String),
    Random,
}

/// Where CondConv experts beyond the first come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtraExperts {
    /// Same-position kernels of the teacher block's other layers.
    #[default]
    CrossLayer,
    /// Random with a small gain.
    Random,
}

/// Expert origins per augmented convolution (`{block}.l{id}.resnet.conv{1,2}`).
pub type CondConvReport = BTreeMap<String, Vec<ExpertOrigin>>;

/// Converts every 3×3 ResNet convolution of `block` in `teacher` into an
/// `n_experts` CondConv unit; see [`inherit_condconv_into`].
pub fn inherit_condconv(
    teacher: &UNetModel,
    block: BlockId,
    n_experts: usize,
    extra: ExtraExperts,
    seed: u64,
) -> Result<(UNetModel, CondConvReport)> {
    inherit_condconv_into(teacher, teacher, block, n_experts, extra, seed)
}

/// Converts every 3×3 ResNet convolution of `block` in `target` into an
/// `n_experts` CondConv unit. Expert 0 is the teacher's kernel at the same
/// position (the target's own when the teacher has none of that shape).
/// With [`ExtraExperts::CrossLayer`], experts 1.. cycle through the teacher
/// block's other layers, starting after the current layer id, over kernels
/// at the same position with the same shape; otherwise, or with no such
/// kernel, they are random with a small gain. The
/// router starts at zero weights with expert 0 favored by a bias.
pub fn inherit_condconv_into(
    target: &UNetModel,
    teacher: &UNetModel,
    block: BlockId,
    n_experts: usize,
    extra: ExtraExperts,
    seed: u64,
) -> Result<(UNetModel, CondConvReport)> {
    if n_experts < 1 {
        return Err(Error::config(format!(
            "CondConv needs at least one expert, got {n_experts}"
        )));
    }
    let tspec = target.spec();
    let tblock = tspec
        .block(block)
        .ok_or_else(|| Error::config(format!("{block}: no such block in target")))?;
    let teacher_block = teacher
        .spec()
        .block(block)
        .ok_or_else(|| Error::config(format!("{block}: no such block in teacher")))?;
    if let Some(l) = tblock.layers.iter().find(|l| l.resnet.condconv.is_some()) {
        return Err(Error::config(format!(
            "{block}.l{}: already a CondConv layer",
            l.id
        )));
    }
    let mut teacher_ids: Vec<usize> = teacher_block.layers.iter().map(|l| l.id).collect();
    teacher_ids.sort_unstable();

    let mut spec = tspec.clone();
    for l in &mut spec.block_mut(block).expect("checked").layers {
        l.resnet.condconv = Some(CondConvSpec { n_experts });
    }
    let mut params = target.params().clone();
    let mut report = CondConvReport::new();
    let plain_kernel = |m: &UNetModel, name: &str| m.params().get(name).cloned();

    for layer in &tblock.layers {
        for conv in ["conv1", "conv2"] {
            let prefix = format!("{block}.l{}.resnet.{conv}", layer.id);
            let own_w = params
                .get(&format!("{prefix}.weight"))
                .cloned()
                .ok_or_else(|| Error::config(format!("`{prefix}.weight` missing from target")))?;
            let shape = own_w.shape().to_vec();
            let mut origins = Vec::with_capacity(n_experts);
            let mut kernels = Vec::with_capacity(n_experts);

            let bias_name = format!("{prefix}.bias");
            match plain_kernel(teacher, &format!("{prefix}.weight"))
                .filter(|k| k.shape() == shape.as_slice())
            {
                Some(k) => {
                    kernels.push(k);
                    origins.push(ExpertOrigin::Teacher(format!("{prefix}.weight")));
                    if let Some(b) = teacher.params().get(&bias_name) {
                        params.insert(bias_name.clone(), b.clone());
                    }
                }
                None => {
                    kernels.push(own_w);
                    origins.push(ExpertOrigin::Own(format!("{prefix}.weight")));
                }
            }

            let pos = teacher_ids.partition_point(|&i| i <= layer.id);
            let candidates: Vec<String> = match extra {
                ExtraExperts::CrossLayer => &teacher_ids[pos..],
                ExtraExperts::Random => &[][..],
            }
            .iter()
            .chain(match extra {
                ExtraExperts::CrossLayer => &teacher_ids[..pos],
                ExtraExperts::Random => &[][..],
            })
            .filter(|&&i| i != layer.id)
            .map(|i| format!("{block}.l{i}.resnet.{conv}.weight"))
            .filter(|n| plain_kernel(teacher, n).is_some_and(|k| k.shape() == shape.as_slice()))
            .collect();
            for m in 1..n_experts {
                if candidates.is_empty() {
                    let def = ParamDef {
                        name: format!("{prefix}.experts[{m}]"),
                        shape: shape.clone(),
                        init: Init::Fan(RANDOM_EXPERT_GAIN),
                    };
                    kernels.push(def.materialize(seed));
                    origins.push(ExpertOrigin::Random);
                } else {
                    let src = &candidates[(m - 1) % candidates.len()];
                    kernels.push(plain_kernel(teacher, src).expect("filtered"));
                    origins.push(ExpertOrigin::Teacher(src.clone()));
                }
            }

            params.remove(&format!("{prefix}.weight"));
            params.insert(format!("{prefix}.experts"), Tensor::stack(&kernels)?);
            let cin = shape[1];
            params.insert(
                format!("{prefix}.router.weight"),
                Tensor::zeros(&[n_experts, cin]),
            );
            let mut rb = Tensor::zeros(&[n_experts]);
            rb.data_mut()[0] = EXPERT0_BIAS;
            params.insert(format!("{prefix}.router.bias"), rb);
            report.insert(prefix, origins);
        }
    }
    Ok((UNetModel::from_parts(spec, params)?, report))
}
