//! Run configuration, one TOML document per run.
//!
//! ```toml
//! name = "dpkd-zeroshot"
//! pipeline = "dpkd"          # finetune | dpkd | dpimp-structured | dpimp-unstructured
//! seed = 7
//! epochs = 6.0               # private epochs over the training split
//!
//! [data]
//! source = "synthetic"       # or "csv" with train/test/public paths
//! classes = 3
//! n_train = 4096
//!
//! [privacy]
//! preset = "eps4"            # or epsilon = 2.5; delta defaults to 1/(10N)
//!
//! [dp]
//! clip_norm = 1.0
//! expected_batch_size = 128  # 1024 at full scale, scaled down for small N
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::accountant::{default_delta, PrivacyBudget};
use crate::compress::{ImpConfig, ImpTarget, KdConfig};
use crate::dp::{DpSgdConfig, Sampling};
use crate::model::{Activation, InitKind, LayerChoice};

/// Learning rates for the `sweep` subcommand.
pub const LR_GRID: [f64; 5] = [0.0001, 0.0005, 0.0008, 0.001, 0.002];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineKind {
    Finetune,
    Dpkd,
    DpimpStructured,
    DpimpUnstructured,
}

impl PipelineKind {
    pub fn label(self) -> &'static str {
        match self {
            PipelineKind::Finetune => "finetune",
            PipelineKind::Dpkd => "dpkd",
            PipelineKind::DpimpStructured => "dpimp-structured",
            PipelineKind::DpimpUnstructured => "dpimp-unstructured",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic {
        #[serde(default = "d_classes")]
        classes: usize,
        #[serde(default = "d_n_train")]
        n_train: usize,
        #[serde(default = "d_n_public")]
        n_public: usize,
        #[serde(default = "d_n_test")]
        n_test: usize,
        #[serde(default = "d_d_in")]
        d_in: usize,
        #[serde(default = "d_separation")]
        separation: f64,
        #[serde(default = "d_clusters")]
        clusters_per_class: usize,
        /// Seeds the cluster centres; splits share them.
        #[serde(default)]
        data_seed: u64,
        /// Moves the public split's cluster centres away from the private
        /// ones, in units of `separation`.
        #[serde(default)]
        public_shift: f64,
    },
    Csv {
        classes: usize,
        train: PathBuf,
        test: Option<PathBuf>,
        /// Non-private data for teacher pre-training.
        public: Option<PathBuf>,
    },
}

fn d_classes() -> usize {
    3
}
fn d_n_train() -> usize {
    4096
}
fn d_n_public() -> usize {
    2048
}
fn d_n_test() -> usize {
    2048
}
fn d_d_in() -> usize {
    32
}
fn d_separation() -> f64 {
    4.0
}
fn d_clusters() -> usize {
    2
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            classes: d_classes(),
            n_train: d_n_train(),
            n_public: d_n_public(),
            n_test: d_n_test(),
            d_in: d_d_in(),
            separation: d_separation(),
            clusters_per_class: d_clusters(),
            data_seed: 0,
            public_shift: 0.0,
        }
    }
}

/// Alias kept for readers who look for the `[data]` section type by name.
pub type DataConfig = DataSource;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub hidden: usize,
    pub blocks: usize,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: 64,
            blocks: 8,
            activation: Activation::Gelu,
        }
    }
}

/// Non-private pre-training of the teacher on the public split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.05,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub learning_rate: f64,
    pub expected_batch_size: usize,
    pub sampling: Sampling,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            learning_rate: 0.5,
            expected_batch_size: 128,
            sampling: Sampling::Poisson,
        }
    }
}

impl DpConfig {
    /// Full DPSGD config; `σ` is a placeholder until calibration.
    pub fn to_dpsgd(self, seed: u64) -> DpSgdConfig {
        DpSgdConfig {
            clip_norm: self.clip_norm,
            noise_multiplier: 1.0,
            learning_rate: self.learning_rate,
            expected_batch_size: self.expected_batch_size,
            seed,
            sampling: self.sampling,
        }
    }
}

/// Named total budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// ε = 4.0
    Eps4,
    /// ε = 4.25
    Eps425,
}

impl Preset {
    pub fn epsilon(self) -> f64 {
        match self {
            Preset::Eps4 => 4.0,
            Preset::Eps425 => 4.25,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "eps4" => Ok(Preset::Eps4),
            "eps425" => Ok(Preset::Eps425),
            _ => Err(format!("unknown preset `{s}` (expected eps4 or eps425)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PrivacySection {
    /// Explicit total ε; overrides `preset`.
    pub epsilon: Option<f64>,
    pub preset: Option<Preset>,
    /// Defaults to `1/(10N)` over the training split.
    pub delta: Option<f64>,
}

impl PrivacySection {
    pub fn budget(&self, n_train: usize) -> Result<PrivacyBudget> {
        let eps = self
            .epsilon
            .or(self.preset.map(Preset::epsilon))
            .unwrap_or(Preset::Eps4.epsilon());
        let delta = self.delta.unwrap_or(default_delta(n_train));
        Ok(PrivacyBudget::new(eps, delta)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneInit {
    /// The full pre-trained teacher.
    Teacher,
    /// A fresh student with `keep_blocks` blocks.
    Random,
    /// Student copied from the pre-trained teacher.
    ZeroshotPt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSection {
    pub init: FinetuneInit,
    /// Student depth; defaults to half the teacher.
    pub keep_blocks: Option<usize>,
    pub layer_choice: LayerChoice,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            init: FinetuneInit::Teacher,
            keep_blocks: None,
            layer_choice: LayerChoice::Even,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdSection {
    pub lambda: f64,
    pub temperature: f64,
    pub init: InitKind,
    pub keep_blocks: Option<usize>,
    /// Share of `epochs` spent fine-tuning the teacher.
    pub teacher_fraction: f64,
    pub layer_choice: LayerChoice,
    pub student_hidden: Option<usize>,
}

impl Default for KdSection {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            temperature: 2.0,
            init: InitKind::ZeroshotPt,
            keep_blocks: None,
            teacher_fraction: 1.0 / 3.0,
            layer_choice: LayerChoice::Even,
            student_hidden: None,
        }
    }
}

impl KdSection {
    pub fn kd(&self) -> KdConfig {
        KdConfig {
            lambda: self.lambda,
            temperature: self.temperature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImpSection {
    pub alpha: f64,
    /// Unstructured target, percent.
    pub sparsity: f64,
    /// Structured target; defaults to half the teacher.
    pub drop_blocks: Option<usize>,
    /// Share of the step budget spent inside the pruning loop; the rest
    /// goes to the final `M` steps. Defaults to 15/40 (unstructured) and
    /// 16/40 (structured).
    pub prune_fraction: Option<f64>,
    /// Steps per round; derived from `epochs` when unset.
    pub n_iters: Option<u64>,
    /// Final steps; derived from `epochs` when unset.
    pub m_iters: Option<u64>,
}

impl Default for ImpSection {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            sparsity: 50.0,
            drop_blocks: None,
            prune_fraction: None,
            n_iters: None,
            m_iters: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub name: String,
    pub pipeline: PipelineKind,
    pub seed: u64,
    pub epochs: f64,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub dp: DpConfig,
    #[serde(default)]
    pub privacy: PrivacySection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub kd: KdSection,
    #[serde(default)]
    pub imp: ImpSection,
}

impl PipelineConfig {
    /// Defaults for `kind`: clip norm 1, batch 128, `δ = 1/(10N)`, ε = 4,
    /// teacher gets a third of the epochs, `α = 10`.
    pub fn canonical(kind: PipelineKind, seed: u64) -> Self {
        Self {
            name: kind.label().to_string(),
            pipeline: kind,
            seed,
            epochs: 6.0,
            data: DataSource::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            dp: DpConfig::default(),
            privacy: PrivacySection {
                preset: Some(Preset::Eps4),
                ..Default::default()
            },
            finetune: FinetuneSection::default(),
            kd: KdSection::default(),
            imp: ImpSection::default(),
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.name.is_empty()
            || self
                .name
                .chars()
                .any(|c| !(c.is_ascii_alphanumeric() || "-_.".contains(c)))
        {
            return bad(format!(
                "run name `{}` must be non-empty and use only [A-Za-z0-9-_.]",
                self.name
            ));
        }
        if !(self.epochs > 0.0 && self.epochs.is_finite()) {
            return bad(format!("epochs must be > 0, got {}", self.epochs));
        }
        if self.model.blocks == 0 || self.model.hidden == 0 {
            return bad("model needs ≥ 1 block and hidden ≥ 1".into());
        }
        self.dp.to_dpsgd(0).validate()?;
        self.kd.kd().validate()?;
        if !(self.kd.teacher_fraction >= 0.0 && self.kd.teacher_fraction < 1.0) {
            return bad(format!(
                "kd.teacher_fraction must lie in [0, 1), got {}",
                self.kd.teacher_fraction
            ));
        }
        let keep = self.student_blocks();
        if keep == 0 || keep > self.model.blocks {
            return bad(format!(
                "student depth {keep} must lie in 1..={}",
                self.model.blocks
            ));
        }
        match self.pipeline {
            PipelineKind::DpimpStructured => self.imp_config(1)?.validate()?,
            PipelineKind::DpimpUnstructured => self.imp_config(1)?.validate()?,
            _ => {}
        }
        if let Some(e) = self.privacy.epsilon {
            if e.is_nan() || e <= 0.0 {
                return bad(format!("privacy.epsilon must be > 0, got {e}"));
            }
        }
        Ok(())
    }

    /// Student depth for finetune and dpkd runs.
    pub fn student_blocks(&self) -> usize {
        let half = self.model.blocks.div_ceil(2);
        match self.pipeline {
            PipelineKind::Dpkd => self.kd.keep_blocks.unwrap_or(half),
            _ => self.finetune.keep_blocks.unwrap_or(half),
        }
    }

    /// Pruning schedule, deriving unset step counts from `total_steps` so that
    /// every round and the final fine-tune get an equal share.
    pub fn imp_config(&self, total_steps: u64) -> Result<ImpConfig> {
        let target = match self.pipeline {
            PipelineKind::DpimpStructured => {
                let l = self.imp.drop_blocks.unwrap_or(self.model.blocks / 2);
                if l >= self.model.blocks {
                    return Err(HarnessError::Config(format!(
                        "cannot drop {l} of {} blocks",
                        self.model.blocks
                    )));
                }
                ImpTarget::DropBlocks(l)
            }
            _ => ImpTarget::Sparsity(self.imp.sparsity),
        };
        let mut cfg = ImpConfig {
            alpha: self.imp.alpha,
            n_iters: 0,
            m_iters: 0,
            target,
        };
        cfg.validate()?;
        let rounds = cfg.rounds() as u64;
        let frac = self.imp.prune_fraction.unwrap_or(match self.pipeline {
            PipelineKind::DpimpStructured => 16.0 / 40.0,
            _ => 15.0 / 40.0,
        });
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(HarnessError::Config(format!(
                "prune_fraction must lie in (0, 1], got {frac}"
            )));
        }
        let loop_steps = (frac * total_steps as f64).round() as u64;
        cfg.n_iters = self.imp.n_iters.unwrap_or(loop_steps / rounds.max(1));
        cfg.m_iters = self
            .imp
            .m_iters
            .unwrap_or(total_steps.saturating_sub(rounds * cfg.n_iters));
        Ok(cfg)
    }
}
