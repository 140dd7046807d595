//! Freeze-aware Adam training of a student against an optional teacher.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::loss::{LossTerms, LossWeights, PerceptualProbe};
use crate::compress::FreezeMask;
use crate::data::{Batch, NULL_TOKEN};
use crate::diffkit::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::sampler::NoiseSchedule;
use crate::unet::{BoundParams, UNetModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for each trainable parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adam {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

impl Adam {
    /// Zero moments for exactly the parameters of `model` not frozen by `mask`.
    pub fn for_trainable(model: &UNetModel, mask: &FreezeMask) -> Self {
        let zeros = |n: &str| vec![0.0; model.params().get(n).expect("listed").numel()];
        let names: Vec<&str> = model
            .params()
            .names()
            .filter(|n| !mask.is_frozen(n))
            .collect();
        Self {
            m: names.iter().map(|n| (n.to_string(), zeros(n))).collect(),
            v: names.iter().map(|n| (n.to_string(), zeros(n))).collect(),
            t: 0,
        }
    }

    /// Bias-corrected step over every parameter with moments.
    fn step(&mut self, cfg: &AdamConfig, model: &mut UNetModel, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, m) in self.m.iter_mut() {
            let v = self.v.get_mut(name).expect("paired moments");
            let (b1, b2) = (cfg.beta1, cfg.beta2);
            match grads.get(name) {
                Some(g) => {
                    for ((mi, vi), gi) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    }
                }
                None => {
                    for (mi, vi) in m.iter_mut().zip(v.iter_mut()) {
                        *mi *= b1;
                        *vi *= b2;
                    }
                }
            }
            if cfg.lr == 0.0 {
                continue;
            }
            let p = model
                .params_mut()
                .get_mut(name)
                .expect("moments track existing params");
            let (a, c) = (cfg.lr / bc1, 1.0 / bc2);
            for (pi, (mi, vi)) in p.data_mut().iter_mut().zip(m.iter().zip(v.iter())) {
                *pi -= a * mi / ((vi * c).sqrt() + cfg.eps);
            }
        }
    }
}

/// Per-step hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepConfig {
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Probability of replacing a sample's condition with the null sequence.
    pub cond_dropout: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            cond_dropout: 0.1,
        }
    }
}

/// One metrics-log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub terms: LossTerms,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: UNetModel,
    pub teacher: Option<UNetModel>,
    pub freeze: FreezeMask,
    pub opt: Adam,
    pub step: usize,
    /// Seeds the per-step noise, timesteps and condition dropout.
    pub seed: u64,
    pub probe: PerceptualProbe,
    pub noise: NoiseSchedule,
}

impl TrainState {
    pub fn new(
        student: UNetModel,
        teacher: Option<UNetModel>,
        freeze: FreezeMask,
        seed: u64,
    ) -> Result<Self> {
        let spec = student.spec();
        if let Some(t) = &teacher {
            let ts = t.spec();
            if (
                ts.latent_channels,
                ts.latent_size,
                ts.cond_seq_len,
                ts.train_timesteps,
            ) != (
                spec.latent_channels,
                spec.latent_size,
                spec.cond_seq_len,
                spec.train_timesteps,
            ) {
                return Err(Error::config(
                    "teacher and student differ in latent, condition or timestep layout",
                ));
            }
        }
        Ok(Self {
            opt: Adam::for_trainable(&student, &freeze),
            probe: PerceptualProbe::new(spec.latent_channels, seed ^ 0x5eed_9b0b),
            noise: NoiseSchedule::with_steps(spec.train_timesteps)?,
            student,
            teacher,
            freeze,
            step: 0,
            seed,
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.opt.m.len()
    }
}

/// Noised inputs for one step, derived from `(seed, step)` alone.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub x_t: Tensor,
    pub noise: Tensor,
    pub timesteps: Vec<usize>,
    pub tokens: Vec<Vec<usize>>,
}

pub fn step_inputs(state: &TrainState, batch: &Batch, cond_dropout: f64) -> Result<StepInputs> {
    let spec = state.student.spec();
    let n = batch.len();
    let mut r = rng::stream(state.seed, &format!("train/step{}", state.step));
    let timesteps: Vec<usize> = (0..n)
        .map(|_| r.gen_range(0..spec.train_timesteps))
        .collect();
    let tokens = batch
        .tokens
        .iter()
        .map(|t| {
            if r.gen::<f64>() < cond_dropout {
                vec![NULL_TOKEN; t.len()]
            } else {
                t.clone()
            }
        })
        .collect();
    let noise = Tensor::randn(batch.latents.shape(), 1.0, &mut r);
    let x_t = state.noise.add_noise(&batch.latents, &noise, &timesteps)?;
    Ok(StepInputs {
        x_t,
        noise,
        timesteps,
        tokens,
    })
}

/// Teacher quantities the distillation terms compare against.
#[derive(Debug, Clone)]
pub struct TeacherTargets {
    pub output: Tensor,
    pub mid: Tensor,
    pub features: Vec<Tensor>,
}

impl TeacherTargets {
    pub fn compute(
        teacher: &UNetModel,
        probe: &PerceptualProbe,
        inputs: &StepInputs,
    ) -> Result<Self> {
        let (output, mid) =
            teacher.forward_with_taps(&inputs.x_t, &inputs.timesteps, &inputs.tokens)?;
        let features = probe.features(&output)?;
        Ok(Self {
            output,
            mid,
            features,
        })
    }
}

/// The objective recorded on `g`.
pub struct LossGraph {
    pub total: Var,
    pub terms: LossTerms,
    pub params: BoundParams,
}

/// Records the student forward and the weighted objective. Terms that need
/// a teacher are zero when `targets` is `None`.
pub fn loss_graph(
    g: &mut Graph,
    student: &UNetModel,
    trainable: impl Fn(&str) -> bool,
    inputs: &StepInputs,
    targets: Option<&TeacherTargets>,
    probe: &PerceptualProbe,
    weights: &LossWeights,
) -> Result<LossGraph> {
    if targets.is_none() && weights.uses_teacher() {
        return Err(Error::config(
            "distillation terms have positive weight but no teacher is set",
        ));
    }
    let params = student.bind(g, trainable);
    let x = g.constant(inputs.x_t.clone());
    let taps = student.graph_forward(g, &params, x, &inputs.timesteps, &inputs.tokens, None)?;
    let eps = g.constant(inputs.noise.clone());
    let task = g.mse(taps.output, eps)?;
    let mut terms = LossTerms {
        task: g.value(task).item(),
        ..LossTerms::default()
    };
    let mut total = g.scale(task, weights.lambda_task);
    if let Some(t) = targets {
        let tv = g.constant(t.output.clone());
        let out = g.mse(taps.output, tv)?;
        if g.shape(taps.mid) != t.mid.shape() {
            return Err(Error::Alignment {
                student: g.shape(taps.mid).to_vec(),
                teacher: t.mid.shape().to_vec(),
            });
        }
        let tm = g.constant(t.mid.clone());
        let mid = g.mse(taps.mid, tm)?;
        let feat = probe.graph_loss(g, taps.output, &t.features)?;
        terms.out = g.value(out).item();
        terms.mid = g.value(mid).item();
        terms.feat = g.value(feat).item();
        for (v, w) in [
            (out, weights.lambda_out),
            (mid, weights.lambda_mid),
            (feat, weights.lambda_feat),
        ] {
            let s = g.scale(v, w);
            total = g.add(total, s)?;
        }
    }
    Ok(LossGraph {
        total,
        terms,
        params,
    })
}

/// One optimization step on `batch`: forward both models on the same noised
/// inputs, backpropagate the weighted objective through the student and
/// update unfrozen parameters.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &StepConfig) -> Result<StepRecord> {
    cfg.weights.validate()?;
    let inputs = step_inputs(state, batch, cfg.cond_dropout)?;
    let targets = match &state.teacher {
        Some(t) if cfg.weights.uses_teacher() => {
            Some(TeacherTargets::compute(t, &state.probe, &inputs)?)
        }
        _ => None,
    };
    let mut g = Graph::new();
    let freeze = &state.freeze;
    let lg = loss_graph(
        &mut g,
        &state.student,
        |n| !freeze.is_frozen(n),
        &inputs,
        targets.as_ref(),
        &state.probe,
        &cfg.weights,
    )?;
    let total = g.value(lg.total).item();
    if !total.is_finite() {
        return Err(Error::Divergence {
            step: state.step,
            what: format!("loss is {total}"),
        });
    }
    let grads: BTreeMap<String, Tensor> = if state.opt.m.is_empty() {
        BTreeMap::new()
    } else {
        let mut gr = g.backward(lg.total)?;
        lg.params
            .iter()
            .filter(|(n, _)| state.opt.m.contains_key(*n))
            .filter_map(|(n, v)| gr.take(v).map(|t| (n.to_string(), t)))
            .collect()
    };
    let terms = lg.terms;
    // Releases the graph's references to the parameters so updates happen in place.
    drop(lg);
    drop(g);
    if let Some((n, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::Divergence {
            step: state.step,
            what: format!("non-finite gradient for `{n}`"),
        });
    }
    state.opt.step(&cfg.adam, &mut state.student, &grads);
    let record = StepRecord {
        step: state.step,
        terms,
        total,
    };
    state.step += 1;
    Ok(record)
}
