//! The JSON run configuration: one document describes one reproducible run.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::compress::{prune_layers, CombinationPlan, PrunePlan};
use crate::distill::{
    default_teacher_stage, AdamConfig, CondConvConfig, DataConfig, EvalConfig, IncubationConfig,
    LossWeights, StageConfig,
};
use crate::error::{Error, Result};
use crate::sampler::{DEFAULT_GUIDANCE, DEFAULT_STEPS};
use crate::unet::{ArchConfig, UNetSpec};

/// A named combination preset (`M1`–`M6`) or an explicit plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum PlanChoice {
    Preset(String),
    Explicit(CombinationPlan),
}

impl PlanChoice {
    pub fn resolve(&self, spec: &UNetSpec) -> Result<CombinationPlan> {
        match self {
            PlanChoice::Preset(name) => CombinationPlan::preset(name, spec),
            PlanChoice::Explicit(plan) => {
                plan.validate(spec)?;
                Ok(plan.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    /// Key into [`SamplerConfig::models`].
    pub model: String,
    pub steps: usize,
}

impl SegmentConfig {
    /// The two-model handoff schedules over models named `small` and
    /// `large`: `S1` small 10 then large 15, `S2` large 15 then small 10,
    /// `S3` large 10 then small 15.
    pub fn preset(name: &str) -> Result<Vec<SegmentConfig>> {
        let seg = |model: &str, steps| SegmentConfig {
            model: model.to_string(),
            steps,
        };
        match name {
            "S1" => Ok(vec![seg("small", 10), seg("large", 15)]),
            "S2" => Ok(vec![seg("large", 15), seg("small", 10)]),
            "S3" => Ok(vec![seg("large", 10), seg("small", 15)]),
            other => Err(Error::config(format!("unknown schedule preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub total_steps: usize,
    pub guidance_scale: f64,
    /// Ordered segments; empty means one model for every step.
    pub segments: Vec<SegmentConfig>,
    /// Checkpoint path per model name.
    pub models: BTreeMap<String, PathBuf>,
    /// Number of trajectories; conditions come from the synthetic dataset.
    pub n_samples: usize,
    pub cond_seed: u64,
    pub noise_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            total_steps: DEFAULT_STEPS,
            guidance_scale: DEFAULT_GUIDANCE,
            segments: Vec::new(),
            models: BTreeMap::new(),
            n_samples: 2,
            cond_seed: 21,
            noise_seed: 22,
        }
    }
}

impl SamplerConfig {
    /// The configured segments, or the single model in `models` for every
    /// step.
    pub fn resolved_segments(&self) -> Result<Vec<SegmentConfig>> {
        if !self.segments.is_empty() {
            for s in &self.segments {
                if !self.models.contains_key(&s.model) {
                    return Err(Error::config(format!(
                        "sampler.segments: model `{}` has no entry in sampler.models",
                        s.model
                    )));
                }
            }
            return Ok(self.segments.clone());
        }
        match self.models.keys().collect::<Vec<_>>().as_slice() {
            [name] => Ok(vec![SegmentConfig {
                model: (*name).clone(),
                steps: self.total_steps,
            }]),
            names => Err(Error::config(format!(
                "sampler.segments is empty, so sampler.models needs exactly one entry, found {}",
                names.len()
            ))),
        }
    }
}

/// Teacher training settings; the objective is always the task term alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherStageConfig {
    pub steps: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub cond_dropout: f64,
}

impl Default for TeacherStageConfig {
    fn default() -> Self {
        let s = default_teacher_stage();
        Self {
            steps: s.steps,
            seed: 10,
            adam: s.adam,
            cond_dropout: s.cond_dropout,
        }
    }
}

impl TeacherStageConfig {
    pub fn stage(&self) -> StageConfig {
        StageConfig {
            steps: self.steps,
            seed: self.seed,
            weights: LossWeights::task_only(),
            adam: self.adam,
            cond_dropout: self.cond_dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub teacher: TeacherStageConfig,
    pub teacher_init_seed: u64,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub eval: EvalConfig,
    /// Seed for student parameters that have no teacher counterpart.
    pub init_seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        let inc = IncubationConfig::desk_default();
        Self {
            teacher: TeacherStageConfig::default(),
            teacher_init_seed: 7,
            stage1: inc.stage1,
            stage2: inc.stage2,
            eval: inc.eval,
            init_seed: inc.init_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Offset added to every component seed.
    pub seed: u64,
    pub architecture: ArchConfig,
    /// `null` selects the default plan for the architecture.
    pub prune_plan: Option<PrunePlan>,
    /// `null` selects `M2` when the architecture has four levels, else
    /// all-teacher frozen.
    pub combination_plan: Option<PlanChoice>,
    /// `null` disables CondConv augmentation.
    pub condconv: Option<CondConvConfig>,
    pub sampler: SamplerConfig,
    pub distill: DistillConfig,
    pub data: DataConfig,
    /// Teacher checkpoint for incubation.
    pub teacher_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let inc = IncubationConfig::desk_default();
        Self {
            seed: 0,
            architecture: ArchConfig::default(),
            prune_plan: None,
            combination_plan: None,
            condconv: inc.condconv,
            sampler: SamplerConfig::default(),
            distill: DistillConfig::default(),
            data: inc.data,
            teacher_checkpoint: None,
        }
    }
}

/// Overlays `user` onto `base` object by object, so an omitted key keeps the
/// default at its own path rather than the default of its enclosing type.
fn merge(base: &mut serde_json::Value, user: serde_json::Value) {
    use serde_json::Value;
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn at(path: &str, e: Error) -> Error {
    let msg = match e {
        Error::Config(m) | Error::Contract(m) => m,
        Error::Plan(p) => p.join("; "),
        other => other.to_string(),
    };
    Error::Config(format!("`{path}`: {msg}"))
}

impl RunConfig {
    /// Parses over the defaults and validates; errors name the offending key
    /// path.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: serde_json::Value = serde_json::from_str(text)?;
        let mut doc = serde_json::to_value(Self::default())?;
        merge(&mut doc, user);
        let cfg: Self = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("`{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn spec(&self) -> Result<UNetSpec> {
        self.architecture
            .to_spec()
            .map_err(|e| at("architecture", e))
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.spec()?;
        let prune = self
            .prune_plan
            .clone()
            .unwrap_or_else(|| PrunePlan::default_for(&spec));
        let pruned = prune_layers(&spec, &prune).map_err(|e| at("prune_plan", e))?;
        if let Some(c) = &self.combination_plan {
            c.resolve(&spec).map_err(|e| at("combination_plan", e))?;
        }
        if let Some(cc) = &self.condconv {
            if cc.n_experts == 0 {
                return Err(at(
                    "condconv.n_experts",
                    Error::config("must be at least 1"),
                ));
            }
            for b in cc.blocks(&spec) {
                if pruned.block(b).is_none() {
                    return Err(at(
                        "condconv.target_blocks",
                        Error::config(format!("{b} is not a block of the architecture")),
                    ));
                }
            }
        }
        let d = &self.distill;
        for (name, stage) in [
            ("distill.teacher", &d.teacher.stage()),
            ("distill.stage1", &d.stage1),
            ("distill.stage2", &d.stage2),
        ] {
            stage
                .weights
                .validate()
                .map_err(|e| at(&format!("{name}.weights"), e))?;
            let lr = stage.adam.lr;
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(at(
                    &format!("{name}.adam.lr"),
                    Error::config(format!("must be finite and >= 0, got {lr}")),
                ));
            }
            if !(0.0..=1.0).contains(&stage.cond_dropout) {
                return Err(at(
                    &format!("{name}.cond_dropout"),
                    Error::config("must lie in [0, 1]"),
                ));
            }
        }
        if d.eval.size == 0 {
            return Err(at("distill.eval.size", Error::config("must be positive")));
        }
        if self.data.batch == 0 || self.data.batch > self.data.size {
            return Err(at(
                "data.batch",
                Error::config(format!(
                    "must lie in 1..={}, got {}",
                    self.data.size, self.data.batch
                )),
            ));
        }
        let s = &self.sampler;
        if s.total_steps == 0 || s.total_steps > spec.train_timesteps {
            return Err(at(
                "sampler.total_steps",
                Error::config(format!(
                    "must lie in 1..={}, got {}",
                    spec.train_timesteps, s.total_steps
                )),
            ));
        }
        if !(s.guidance_scale.is_finite() && s.guidance_scale >= 0.0) {
            return Err(at(
                "sampler.guidance_scale",
                Error::config("must be finite and >= 0"),
            ));
        }
        if s.n_samples == 0 {
            return Err(at("sampler.n_samples", Error::config("must be positive")));
        }
        if !s.segments.is_empty() {
            let sum: usize = s.segments.iter().map(|g| g.steps).sum();
            if let Some(i) = s.segments.iter().position(|g| g.steps == 0) {
                return Err(at(
                    &format!("sampler.segments[{i}].steps"),
                    Error::config("must be positive"),
                ));
            }
            if sum != s.total_steps {
                return Err(at(
                    "sampler.segments",
                    Error::config(format!(
                        "segment steps sum to {sum}, sampler.total_steps is {}",
                        s.total_steps
                    )),
                ));
            }
        }
        Ok(())
    }

    /// A copy with the master seed folded into every component seed and
    /// reset to zero.
    pub fn seeded(&self) -> RunConfig {
        let k = self.seed;
        let mut c = self.clone();
        c.seed = 0;
        for s in [
            &mut c.distill.teacher.seed,
            &mut c.distill.teacher_init_seed,
            &mut c.distill.stage1.seed,
            &mut c.distill.stage2.seed,
            &mut c.distill.eval.seed,
            &mut c.distill.init_seed,
            &mut c.data.seed,
            &mut c.sampler.cond_seed,
            &mut c.sampler.noise_seed,
        ] {
            *s = s.wrapping_add(k);
        }
        c
    }

    /// Incubation settings with the master seed applied.
    pub fn incubation_config(&self) -> Result<IncubationConfig> {
        let spec = self.spec()?;
        let c = self.seeded();
        let combination = c
            .combination_plan
            .as_ref()
            .map(|p| p.resolve(&spec))
            .transpose()
            .map_err(|e| at("combination_plan", e))?;
        Ok(IncubationConfig {
            prune: c.prune_plan,
            condconv: c.condconv,
            combination,
            stage1: c.distill.stage1,
            stage2: c.distill.stage2,
            data: c.data,
            eval: c.distill.eval,
            init_seed: c.distill.init_seed,
        })
    }
}
