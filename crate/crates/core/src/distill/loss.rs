//! The four distillation terms and the frozen perceptual probe.

use serde::{Deserialize, Serialize};

use crate::diffkit::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Coefficients of task, output-KD, mid-block and perceptual terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_task: f64,
    pub lambda_out: f64,
    pub lambda_mid: f64,
    pub lambda_feat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_task: 1.0,
            lambda_out: 1.0,
            lambda_mid: 0.5,
            lambda_feat: 0.1,
        }
    }
}

impl LossWeights {
    /// Plain denoising objective.
    pub fn task_only() -> Self {
        Self {
            lambda_task: 1.0,
            lambda_out: 0.0,
            lambda_mid: 0.0,
            lambda_feat: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [
            self.lambda_task,
            self.lambda_out,
            self.lambda_mid,
            self.lambda_feat,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::config(format!(
                "loss weights must be finite and >= 0, got {w:?}"
            )));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        Ok(())
    }

    /// True when any term needs the teacher's outputs.
    pub fn uses_teacher(&self) -> bool {
        self.lambda_out > 0.0 || self.lambda_mid > 0.0 || self.lambda_feat > 0.0
    }
}

/// Values of the four terms on one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    #[serde(rename = "L_task")]
    pub task: f64,
    #[serde(rename = "L_out")]
    pub out: f64,
    #[serde(rename = "L_mid")]
    pub mid: f64,
    #[serde(rename = "L_feat")]
    pub feat: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 4] {
        [self.task, self.out, self.mid, self.feat]
    }
}

fn mse_tensors(op: &'static str, a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.numel() as f64)
}

/// Denoising loss: MSE between predicted and true noise.
pub fn task_loss(pred_noise: &Tensor, true_noise: &Tensor) -> Result<f64> {
    mse_tensors("task_loss", pred_noise, true_noise)
}

/// Output distillation: MSE between student and teacher predictions.
pub fn output_kd_loss(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    mse_tensors("output_kd_loss", student, teacher)
}

/// Mid-block feature MSE; differing shapes mean the two architectures are
/// not aligned at the mid block.
pub fn midblock_loss(student_mid: &Tensor, teacher_mid: &Tensor) -> Result<f64> {
    if student_mid.shape() != teacher_mid.shape() {
        return Err(Error::Alignment {
            student: student_mid.shape().to_vec(),
            teacher: teacher_mid.shape().to_vec(),
        });
    }
    mse_tensors("midblock_loss", student_mid, teacher_mid)
}

/// `Σ λ·L` over the four terms.
pub fn total_loss(weights: &LossWeights, terms: &LossTerms) -> f64 {
    weights
        .as_array()
        .iter()
        .zip(terms.as_array())
        .map(|(w, l)| w * l)
        .sum()
}

/// One strided 3×3 convolution followed by SiLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeStage {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Frozen random convolutional feature extractor with one tap per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualProbe {
    pub stages: Vec<ProbeStage>,
    /// Per-stage multiplier of the feature MSE.
    pub stage_weights: Vec<f64>,
}

pub const PROBE_WIDTHS: [usize; 4] = [8, 16, 32, 32];

impl PerceptualProbe {
    /// Four stride-2 stages of widths [`PROBE_WIDTHS`], unit stage weights.
    pub fn new(in_channels: usize, seed: u64) -> Self {
        Self::with_widths(in_channels, &PROBE_WIDTHS, seed)
    }

    pub fn with_widths(in_channels: usize, widths: &[usize], seed: u64) -> Self {
        let mut cin = in_channels;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let mut r = rng::stream(seed, &format!("probe/stage{i}"));
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let stage = ProbeStage {
                    weight: Tensor::randn(&[w, cin, 3, 3], std, &mut r),
                    bias: Tensor::zeros(&[w]),
                };
                cin = w;
                stage
            })
            .collect();
        Self {
            stages,
            stage_weights: vec![1.0; widths.len()],
        }
    }

    /// Records every stage tap of `x` on `g`; probe weights enter as
    /// constants.
    pub fn graph_features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut taps = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let w = g.leaf(s.weight.clone(), false);
            let b = g.leaf(s.bias.clone(), false);
            let c = g.conv2d(h, w, Some(b), 2, 1)?;
            h = g.silu(c);
            taps.push(h);
        }
        Ok(taps)
    }

    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let taps = self.graph_features(&mut g, xv)?;
        Ok(taps.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// `Σ_k w_k·MSE(f_k(student), f_k(teacher))` on `g`, against
    /// precomputed teacher features.
    pub fn graph_loss(
        &self,
        g: &mut Graph,
        student: Var,
        teacher_features: &[Tensor],
    ) -> Result<Var> {
        if teacher_features.len() != self.stages.len() {
            return Err(Error::contract(format!(
                "{} teacher feature maps for a {}-stage probe",
                teacher_features.len(),
                self.stages.len()
            )));
        }
        let taps = self.graph_features(g, student)?;
        let mut total: Option<Var> = None;
        for ((tap, tf), &w) in taps
            .into_iter()
            .zip(teacher_features)
            .zip(&self.stage_weights)
        {
            let t = g.constant(tf.clone());
            let m = g.mse(tap, t)?;
            let term = g.scale(m, w);
            total = Some(match total {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
    }
}

/// Weighted sum of per-stage feature MSEs between two probe inputs.
pub fn perceptual_loss(
    probe: &PerceptualProbe,
    student_out: &Tensor,
    teacher_out: &Tensor,
) -> Result<f64> {
    if student_out.shape() != teacher_out.shape() {
        return Err(Error::DimensionMismatch {
            op: "perceptual_loss",
            lhs: student_out.shape().to_vec(),
            rhs: teacher_out.shape().to_vec(),
        });
    }
    let fs = probe.features(student_out)?;
    let ft = probe.features(teacher_out)?;
    fs.iter()
        .zip(&ft)
        .zip(&probe.stage_weights)
        .try_fold(0.0, |acc, ((a, b), w)| {
            Ok(acc + w * mse_tensors("perceptual_loss", a, b)?)
        })
}
