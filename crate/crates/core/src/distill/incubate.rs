//! Teacher training and the two-stage incubation pipeline: distill a pruned
//! (optionally CondConv-augmented) student, recombine it with the teacher,
//! then distill the combination with the teacher part frozen.

use serde::{Deserialize, Serialize};

use super::loss::LossWeights;
use super::train::{train_step, AdamConfig, StepConfig, StepRecord, TrainState};
use crate::compress::{
    inherit_condconv_into, prune_layers, recombine, transplant_weights, CombinationPlan,
    CondConvReport, ExtraExperts, FreezeMask, LayerMapping, PrunePlan, Recombined,
    TransplantReport,
};
use crate::data::{batch_iter, gen_dataset, Sample};
use crate::diffkit::Tensor;
use crate::error::{Error, Result};
use crate::rng;
use crate::sampler::NoiseSchedule;
use crate::unet::{build_unet, BlockId, UNetModel, UNetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub size: usize,
    pub batch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 2048,
            batch: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Probability of replacing a sample's condition with the null sequence.
    pub cond_dropout: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        let s = StepConfig::default();
        Self {
            steps: 2000,
            seed: 0,
            weights: s.weights,
            adam: s.adam,
            cond_dropout: s.cond_dropout,
        }
    }
}

impl StageConfig {
    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            weights: self.weights,
            adam: self.adam,
            cond_dropout: self.cond_dropout,
        }
    }
}

/// Teacher runs use the task term only.
pub fn default_teacher_stage() -> StageConfig {
    StageConfig {
        weights: LossWeights::task_only(),
        ..StageConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CondConvConfig {
    pub n_experts: usize,
    pub target_blocks: Vec<BlockId>,
    pub extra_experts: ExtraExperts,
}

impl Default for CondConvConfig {
    /// Two experts on the shallowest up block.
    fn default() -> Self {
        Self {
            n_experts: 2,
            target_blocks: Vec::new(),
            extra_experts: ExtraExperts::CrossLayer,
        }
    }
}

impl CondConvConfig {
    /// Target blocks, defaulting to the last up block of `spec`.
    pub fn blocks(&self, spec: &UNetSpec) -> Vec<BlockId> {
        if self.target_blocks.is_empty() {
            spec.up_blocks
                .len()
                .checked_sub(1)
                .map(BlockId::Up)
                .into_iter()
                .collect()
        } else {
            self.target_blocks.clone()
        }
    }
}

/// Held-out divergence settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    pub size: usize,
    /// Evaluate every this many steps (0: only at the start and end).
    pub every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 1_000_003,
            size: 8,
            every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncubationConfig {
    #[serde(default)]
    pub prune: Option<PrunePlan>,
    #[serde(default)]
    pub condconv: Option<CondConvConfig>,
    #[serde(default)]
    pub combination: Option<CombinationPlan>,
    #[serde(default)]
    pub stage1: StageConfig,
    #[serde(default)]
    pub stage2: StageConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Seed for freshly initialized student parameters.
    #[serde(default)]
    pub init_seed: u64,
}

impl IncubationConfig {
    /// Default prune plan, two-expert CondConv on the last up block and the
    /// frozen two-level combination.
    pub fn desk_default() -> Self {
        Self {
            prune: None,
            condconv: Some(CondConvConfig::default()),
            combination: None,
            stage1: StageConfig {
                steps: 500,
                seed: 11,
                ..StageConfig::default()
            },
            stage2: StageConfig {
                steps: 2000,
                seed: 12,
                ..StageConfig::default()
            },
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            init_seed: 13,
        }
    }

    pub fn prune_plan(&self, spec: &UNetSpec) -> PrunePlan {
        self.prune
            .clone()
            .unwrap_or_else(|| PrunePlan::default_for(spec))
    }

    /// The configured plan, or the frozen two-level preset when the spec has
    /// four levels and all-teacher-frozen otherwise.
    pub fn combination_plan(&self, spec: &UNetSpec) -> CombinationPlan {
        self.combination.clone().unwrap_or_else(|| {
            CombinationPlan::preset("M2", spec)
                .unwrap_or_else(|_| CombinationPlan::all_teacher(spec, true))
        })
    }
}

/// Fixed held-out noised batch with cached teacher outputs.
#[derive(Debug, Clone)]
pub struct HeldOut {
    pub x_t: Tensor,
    pub timesteps: Vec<usize>,
    pub tokens: Vec<Vec<usize>>,
    pub teacher_out: Tensor,
    pub teacher_mid: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    /// Output MSE to the teacher.
    pub output_mse: f64,
    /// Mid-block feature MSE to the teacher.
    pub mid_mse: f64,
}

impl HeldOut {
    /// Held-out batch drawn from the synthetic dataset.
    pub fn new(teacher: &UNetModel, cfg: &EvalConfig) -> Result<Self> {
        let data = gen_dataset(cfg.seed, cfg.size)?;
        let latents: Vec<Tensor> = data.iter().map(|s| s.latent.clone()).collect();
        let tokens = data.iter().map(|s| s.tokens.clone()).collect();
        Self::from_latents(teacher, Tensor::stack(&latents)?, tokens, cfg.seed)
    }

    /// Noises `x0` at evenly spread timesteps with seeded noise.
    pub fn from_latents(
        teacher: &UNetModel,
        x0: Tensor,
        tokens: Vec<Vec<usize>>,
        seed: u64,
    ) -> Result<Self> {
        let t_max = teacher.spec().train_timesteps;
        let n = tokens.len();
        if n == 0 {
            return Err(Error::config("held-out batch is empty"));
        }
        let noise = Tensor::randn(x0.shape(), 1.0, &mut rng::stream(seed, "heldout"));
        let timesteps: Vec<usize> = (0..n).map(|i| (2 * i + 1) * t_max / (2 * n)).collect();
        let x_t = NoiseSchedule::with_steps(t_max)?.add_noise(&x0, &noise, &timesteps)?;
        let (teacher_out, teacher_mid) = teacher.forward_with_taps(&x_t, &timesteps, &tokens)?;
        Ok(Self {
            x_t,
            timesteps,
            tokens,
            teacher_out,
            teacher_mid,
        })
    }

    pub fn evaluate(&self, model: &UNetModel, step: usize) -> Result<Divergence> {
        let (out, mid) = model.forward_with_taps(&self.x_t, &self.timesteps, &self.tokens)?;
        Ok(Divergence {
            step,
            output_mse: super::output_kd_loss(&out, &self.teacher_out)?,
            mid_mse: super::midblock_loss(&mid, &self.teacher_mid)?,
        })
    }
}

/// Result of a training loop.
#[derive(Debug, Clone)]
pub struct StageRun {
    pub model: UNetModel,
    pub records: Vec<StepRecord>,
    pub divergence: Vec<Divergence>,
}

/// How often the freeze invariant is re-checked during a run.
pub const FREEZE_CHECK_EVERY: usize = 50;

/// Runs `cfg.steps` train steps, logging each record through `observer`.
/// Frozen parameters are checked bitwise against their starting values every
/// [`FREEZE_CHECK_EVERY`] steps and at the end.
pub fn run_stage(
    student: UNetModel,
    teacher: Option<&UNetModel>,
    freeze: FreezeMask,
    data: &[Sample],
    data_cfg: &DataConfig,
    cfg: &StageConfig,
    heldout: Option<&HeldOut>,
    eval_every: usize,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<StageRun> {
    let mut state = TrainState::new(student, teacher.cloned(), freeze, cfg.seed)?;
    let frozen: Vec<(String, Tensor)> = state
        .freeze
        .frozen_names()
        .filter_map(|n| {
            state
                .student
                .params()
                .get(n)
                .map(|t| (n.to_string(), t.clone()))
        })
        .collect();
    let check_frozen = |s: &TrainState| -> Result<()> {
        for (n, t) in &frozen {
            if !s.student.params().get(n).is_some_and(|c| c.bitwise_eq(t)) {
                return Err(Error::contract(format!(
                    "frozen parameter `{n}` changed by step {}",
                    s.step
                )));
            }
        }
        Ok(())
    };
    let step_cfg = cfg.step_config();
    let mut batches = batch_iter(data, data_cfg.batch, data_cfg.seed ^ cfg.seed)?;
    let mut records = Vec::with_capacity(cfg.steps);
    let mut divergence = Vec::new();
    if let Some(h) = heldout {
        divergence.push(h.evaluate(&state.student, 0)?);
    }
    for i in 0..cfg.steps {
        let batch = batches.next().expect("endless");
        let rec = train_step(&mut state, &batch, &step_cfg)?;
        observer(&rec);
        records.push(rec);
        let done = i + 1;
        if done % FREEZE_CHECK_EVERY == 0 {
            check_frozen(&state)?;
        }
        if let Some(h) = heldout {
            if (eval_every > 0 && done % eval_every == 0) && done != cfg.steps {
                divergence.push(h.evaluate(&state.student, done)?);
            }
        }
    }
    check_frozen(&state)?;
    if let Some(h) = heldout {
        if cfg.steps > 0 {
            divergence.push(h.evaluate(&state.student, cfg.steps)?);
        }
    }
    Ok(StageRun {
        model: state.student,
        records,
        divergence,
    })
}

/// Trains a fresh model from `init_seed` on the denoising objective.
pub fn train_teacher(
    spec: &UNetSpec,
    init_seed: u64,
    data_cfg: &DataConfig,
    cfg: &StageConfig,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<StageRun> {
    if cfg.weights.uses_teacher() {
        return Err(Error::config("teacher training takes the task term only"));
    }
    let model = build_unet(spec, init_seed)?;
    let data = gen_dataset(data_cfg.seed, data_cfg.size)?;
    let freeze = FreezeMask::none(&model);
    run_stage(model, None, freeze, &data, data_cfg, cfg, None, 0, observer)
}

/// The untrained stage-1 student: pruned, transplanted from the teacher and
/// CondConv-augmented.
#[derive(Debug, Clone)]
pub struct StudentInit {
    pub model: UNetModel,
    pub transplant: TransplantReport,
    pub condconv: Vec<(BlockId, CondConvReport)>,
}

pub fn build_student(teacher: &UNetModel, cfg: &IncubationConfig) -> Result<StudentInit> {
    let tspec = teacher.spec();
    let pruned = prune_layers(tspec, &cfg.prune_plan(tspec))?;
    let (mut model, transplant) =
        transplant_weights(&pruned, teacher, &LayerMapping::identity(), cfg.init_seed)?;
    let mut condconv = Vec::new();
    if let Some(cc) = &cfg.condconv {
        for b in cc.blocks(tspec) {
            let (m, report) = inherit_condconv_into(
                &model,
                teacher,
                b,
                cc.n_experts,
                cc.extra_experts,
                cfg.init_seed,
            )?;
            model = m;
            condconv.push((b, report));
        }
    }
    Ok(StudentInit {
        model,
        transplant,
        condconv,
    })
}

#[derive(Debug, Clone)]
pub struct Incubation {
    pub student_init: StudentInit,
    pub stage1: StageRun,
    /// Recombination of the untrained student with the teacher.
    pub undistilled: Recombined,
    /// Recombination of the stage-1 student, before stage-2 training.
    pub combined: Recombined,
    pub stage2: StageRun,
}

impl Incubation {
    /// The distilled combined model with its freeze mask and provenance.
    pub fn final_model(&self) -> Recombined {
        Recombined {
            model: self.stage2.model.clone(),
            freeze: self.combined.freeze.clone(),
            provenance: self.combined.provenance.clone(),
        }
    }
}

/// Stage 1: distill the pruned student against the teacher with every
/// parameter trainable.
pub fn run_stage1(
    teacher: &UNetModel,
    cfg: &IncubationConfig,
    data: &[Sample],
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<(StudentInit, StageRun)> {
    let init = build_student(teacher, cfg)?;
    let freeze = FreezeMask::none(&init.model);
    let run = run_stage(
        init.model.clone(),
        Some(teacher),
        freeze,
        data,
        &cfg.data,
        &cfg.stage1,
        None,
        0,
        observer,
    )?;
    Ok((init, run))
}

/// Stage 2: recombine `student` with the teacher and distill the result
/// under the plan's freeze mask.
pub fn run_stage2(
    teacher: &UNetModel,
    student: &UNetModel,
    cfg: &IncubationConfig,
    data: &[Sample],
    heldout: &HeldOut,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<(Recombined, StageRun)> {
    let plan = cfg.combination_plan(teacher.spec());
    let combined = recombine(teacher, student, &plan)?;
    let run = run_stage(
        combined.model.clone(),
        Some(teacher),
        combined.freeze.clone(),
        data,
        &cfg.data,
        &cfg.stage2,
        Some(heldout),
        cfg.eval.every,
        observer,
    )?;
    Ok((combined, run))
}

/// Both stages end to end. `observer` receives `(stage, record)`.
pub fn incubation_run(
    teacher: &UNetModel,
    cfg: &IncubationConfig,
    observer: &mut dyn FnMut(u8, &StepRecord),
) -> Result<Incubation> {
    let data = gen_dataset(cfg.data.seed, cfg.data.size)?;
    let heldout = HeldOut::new(teacher, &cfg.eval)?;
    let (student_init, stage1) = run_stage1(teacher, cfg, &data, &mut |r| observer(1, r))?;
    let plan = cfg.combination_plan(teacher.spec());
    let undistilled = recombine(teacher, &student_init.model, &plan)?;
    let (combined, stage2) = run_stage2(teacher, &stage1.model, cfg, &data, &heldout, &mut |r| {
        observer(2, r)
    })?;
    Ok(Incubation {
        student_init,
        stage1,
        undistilled,
        combined,
        stage2,
    })
}
