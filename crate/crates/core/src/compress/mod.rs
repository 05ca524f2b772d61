//! Compression pipelines: private distillation and private pruning.

mod distill;
mod prune;

pub use distill::{kd_loss, softmax_temperature, KdConfig, KdObjective};
pub use prune::{
    cumulative_prune_count, magnitude_prune, prune_rounds, select_block, sparse_label,
    structured_dpimp, unstructured_dpimp, w_min_counts, DropDecision, ImpConfig, ImpTarget,
    StructuredOutcome, UnstructuredOutcome, DPIMP_PHASE,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::{
    calibrate_shared_sigma, Accountant, AccountantError, BudgetAllocation, Calibration, PhaseSpend,
    PrivacyBudget, PrivacyReport,
};
use crate::dp::{DpError, DpSgdConfig, DpTrainer, HardLabels};
use crate::harness::Dataset;
use crate::model::{
    init_student, InitKind, InitStrategy, LayerChoice, LayeredClassifier, ModelDims, ModelError,
};
use crate::tensor::TensorError;

pub const TEACHER_PHASE: &str = "teacher";
pub const INIT_PHASE: &str = "init";
pub const DISTILL_PHASE: &str = "distill";
pub const FINETUNE_PHASE: &str = "finetune";

#[derive(Debug, Error)]
pub enum CompressError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Accountant(#[from] AccountantError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, CompressError>;

/// Private fine-tuning with a noise multiplier calibrated to `budget`.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: LayeredClassifier,
    pub calibration: Calibration,
    pub accountant: Accountant,
    pub report: PrivacyReport,
}

/// Calibrates `σ` for `steps` steps, then runs DPSGD on `model`.
pub fn private_finetune(
    model: &LayeredClassifier,
    data: &Dataset,
    dp: &DpSgdConfig,
    steps: u64,
    budget: PrivacyBudget,
) -> Result<FinetuneOutcome> {
    dp.validate()?;
    let q = dp.sample_rate(data.len());
    let calibration = calibrate_shared_sigma(budget, &[(q, steps)])?;
    let dp = DpSgdConfig {
        noise_multiplier: calibration.sigma,
        ..*dp
    };
    let mut accountant = Accountant::new().with_cap(budget);
    let mut m = model.clone();
    let mut trainer = DpTrainer::new(dp, data.len(), FINETUNE_PHASE)?;
    trainer.run(steps, &mut m, &data.features, &HardLabels(&data.labels), &mut accountant)?;
    let report = accountant.report(budget.delta);
    Ok(FinetuneOutcome {
        model: m,
        calibration,
        accountant,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpkdConfig {
    pub keep_blocks: usize,
    #[serde(default)]
    pub layer_choice: LayerChoice,
    pub kd: KdConfig,
    /// Teacher fine-tuning; its `noise_multiplier` is replaced by calibration.
    pub teacher_dp: DpSgdConfig,
    /// Student distillation; its `noise_multiplier` is replaced by calibration.
    pub student_dp: DpSgdConfig,
    pub teacher_steps: u64,
    pub student_steps: u64,
    pub budget: PrivacyBudget,
    /// Student width for random init; zero-shot init always copies the teacher's.
    #[serde(default)]
    pub student_hidden: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct DpkdOutcome {
    /// The privately fine-tuned teacher.
    pub teacher: LayeredClassifier,
    /// Student as initialised, before any distillation step.
    pub student_init: LayeredClassifier,
    pub student: LayeredClassifier,
    /// Calibrated `σ`, shared by both private phases.
    pub calibration: Calibration,
    /// The two DPSGD configs actually used.
    pub teacher_dp: DpSgdConfig,
    pub student_dp: DpSgdConfig,
    pub allocation: BudgetAllocation,
    pub accountant: Accountant,
    pub report: PrivacyReport,
}

/// Private distillation.
///
/// 1. calibrate one `σ` so teacher and distillation steps compose within the budget;
/// 2. fine-tune the teacher with DPSGD;
/// 3. build the student (no privacy cost: random, public copy, or copy of the private teacher);
/// 4. train the student on the distillation loss with DPSGD.
pub fn dpkd(
    pretrained: &LayeredClassifier,
    init: InitKind,
    init_seed: u64,
    data: &Dataset,
    cfg: &DpkdConfig,
) -> Result<DpkdOutcome> {
    cfg.kd.validate()?;
    cfg.teacher_dp.validate()?;
    cfg.student_dp.validate()?;
    let n = data.len();
    let (qt, qs) = (cfg.teacher_dp.sample_rate(n), cfg.student_dp.sample_rate(n));
    let calibration =
        calibrate_shared_sigma(cfg.budget, &[(qt, cfg.teacher_steps), (qs, cfg.student_steps)])?;
    let sigma = calibration.sigma;
    let teacher_dp = DpSgdConfig {
        noise_multiplier: sigma,
        ..cfg.teacher_dp
    };
    let student_dp = DpSgdConfig {
        noise_multiplier: sigma,
        ..cfg.student_dp
    };
    let mut accountant = Accountant::new().with_cap(cfg.budget);

    let mut teacher = pretrained.clone();
    DpTrainer::new(teacher_dp, n, TEACHER_PHASE)?.run(
        cfg.teacher_steps,
        &mut teacher,
        &data.features,
        &HardLabels(&data.labels),
        &mut accountant,
    )?;

    let student_init = match init {
        InitKind::Random => {
            if cfg.keep_blocks > teacher.depth() {
                return Err(ModelError::TooManyBlocks {
                    keep: cfg.keep_blocks,
                    depth: teacher.depth(),
                }
                .into());
            }
            let dims = ModelDims {
                hidden: cfg.student_hidden.unwrap_or(teacher.dims.hidden),
                ..teacher.dims
            };
            let mut m = LayeredClassifier::random(dims, cfg.keep_blocks, init_seed);
            m.activation = teacher.activation;
            m
        }
        InitKind::ZeroshotPt => init_student(
            &teacher,
            cfg.keep_blocks,
            InitStrategy::ZeroShotPt(pretrained),
            cfg.layer_choice,
        )?,
        InitKind::ZeroshotFt => init_student(
            &teacher,
            cfg.keep_blocks,
            InitStrategy::ZeroShotFt(&teacher),
            cfg.layer_choice,
        )?,
    };

    let teacher_logits = teacher.forward(&data.features)?;
    let objective = KdObjective {
        teacher_logits: &teacher_logits,
        labels: &data.labels,
        cfg: cfg.kd,
    };
    let mut student = student_init.clone();
    DpTrainer::new(student_dp, n, DISTILL_PHASE)?.run(
        cfg.student_steps,
        &mut student,
        &data.features,
        &objective,
        &mut accountant,
    )?;

    let allocation = allocation_for(
        cfg.budget.delta,
        (qt, sigma, cfg.teacher_steps),
        (qs, sigma, cfg.student_steps),
    );
    let report = accountant.report(cfg.budget.delta);
    Ok(DpkdOutcome {
        teacher,
        student_init,
        student,
        calibration,
        teacher_dp,
        student_dp,
        allocation,
        accountant,
        report,
    })
}

/// Per-phase spends with `δ` split equally over the phases that spend.
pub fn allocation_for(delta: f64, teacher: (f64, f64, u64), distill: (f64, f64, u64)) -> BudgetAllocation {
    let spenders = [teacher.2, distill.2].iter().filter(|s| **s > 0).count().max(1);
    let share = delta / spenders as f64;
    let phase = |name: &str, (q, s, steps): (f64, f64, u64)| {
        if steps == 0 {
            PhaseSpend::free(name)
        } else {
            PhaseSpend::dpsgd(name, q, s, steps, share)
        }
    };
    BudgetAllocation {
        teacher: phase(TEACHER_PHASE, teacher),
        init: PhaseSpend::free(INIT_PHASE),
        distill: phase(DISTILL_PHASE, distill),
    }
}
