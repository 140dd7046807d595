//! Two-stage distillation with task, output, mid-block and perceptual
//! terms, freeze-mask-aware optimization and per-step metrics.

mod incubate;
mod loss;
mod train;

pub use incubate::{
    build_student, default_teacher_stage, incubation_run, run_stage, run_stage1, run_stage2,
    train_teacher, CondConvConfig, DataConfig, Divergence, EvalConfig, HeldOut, Incubation,
    IncubationConfig, StageConfig, StageRun, StudentInit, FREEZE_CHECK_EVERY,
};
pub use loss::{
    midblock_loss, output_kd_loss, perceptual_loss, task_loss, total_loss, LossTerms, LossWeights,
    PerceptualProbe, ProbeStage, PROBE_WIDTHS,
};
pub use train::{
    loss_graph, step_inputs, train_step, Adam, AdamConfig, LossGraph, StepConfig, StepInputs,
    StepRecord, TeacherTargets, TrainState,
};
