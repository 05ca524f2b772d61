//! Distillation loss
//!
//! ```text
//! L = H(y, P_S) + λ · H(P_T^T, P_S^T),    P^T = softmax(z / T)
//! ```
//!
//! The hard-label term uses `T = 1`. There is no `T²` factor on the soft
//! term.

use serde::{Deserialize, Serialize};

use super::{CompressError, Result};
use crate::dp::ExampleLoss;
use crate::tensor::{self, softmax_rows, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub lambda: f64,
    pub temperature: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            temperature: 2.0,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CompressError::Config(format!(
                "λ must be finite and ≥ 0, got {}",
                self.lambda
            )));
        }
        check_temperature(self.temperature)
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(CompressError::Config(format!(
            "temperature must be finite and > 0, got {t}"
        )));
    }
    Ok(())
}

/// `p_i = exp(z_i/T) / Σ_j exp(z_j/T)` for one logit vector.
pub fn softmax_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    let t = Tensor::new(vec![1, logits.len()], logits.to_vec())?;
    Ok(softmax_rows(&t, temperature).into_data())
}

/// Records the distillation loss on `tape`.
///
/// `teacher` may be any node; the soft-target term never propagates a
/// gradient into it. With `λ = 0` the soft term is not recorded at all.
pub fn kd_loss(
    tape: &mut Tape<'_>,
    student: Var,
    teacher: Var,
    labels: &[usize],
    cfg: &KdConfig,
) -> Result<Var> {
    cfg.validate()?;
    kd_loss_unchecked(tape, student, teacher, labels, cfg).map_err(Into::into)
}

fn kd_loss_unchecked(
    tape: &mut Tape<'_>,
    student: Var,
    teacher: Var,
    labels: &[usize],
    cfg: &KdConfig,
) -> tensor::Result<Var> {
    let (s, t) = (tape.value(student).shape(), tape.value(teacher).shape());
    if s != t {
        return Err(TensorError::ShapeMismatch {
            op: "kd_loss",
            lhs: s.to_vec(),
            rhs: t.to_vec(),
        });
    }
    let hard = tape.cross_entropy(student, labels)?;
    if cfg.lambda == 0.0 {
        return Ok(hard);
    }
    let target = tape.softmax(teacher, cfg.temperature)?;
    let soft_logits = tape.scale(student, 1.0 / cfg.temperature)?;
    let soft = tape.soft_cross_entropy(target, soft_logits)?;
    let soft = tape.scale(soft, cfg.lambda)?;
    tape.add(hard, soft)
}

/// Per-example distillation objective against precomputed teacher logits.
#[derive(Debug, Clone, Copy)]
pub struct KdObjective<'d> {
    pub teacher_logits: &'d Tensor,
    pub labels: &'d [usize],
    pub cfg: KdConfig,
}

impl ExampleLoss for KdObjective<'_> {
    fn example_loss<'a>(
        &self,
        tape: &mut Tape<'a>,
        logits: Var,
        index: usize,
    ) -> tensor::Result<Var> {
        if self.cfg.lambda == 0.0 {
            return tape.cross_entropy(logits, &[self.labels[index]]);
        }
        let t = tape.constant(self.teacher_logits.select_rows(&[index]));
        kd_loss_unchecked(tape, logits, t, &[self.labels[index]], &self.cfg)
    }
}
