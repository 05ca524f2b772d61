//! Datasets, configuration, evaluation and run orchestration.

mod compare;
mod config;
mod data;
mod run;

pub use compare::{compare_runs, format_table, RunSummary};
pub use config::{
    DataConfig, DataSource, DpConfig, FinetuneInit, FinetuneSection, ImpSection, KdSection,
    ModelSection, PipelineConfig, PipelineKind, Preset, PretrainSection, PrivacySection, LR_GRID,
};
pub use data::{load_csv, make_synthetic, write_csv, Dataset, SyntheticSpec};
pub use run::{pretrain_teacher, run, run_to_dir, run_with, Metrics, PreparedData, RunArtifacts};

use thiserror::Error;

use crate::accountant::AccountantError;
use crate::compress::CompressError;
use crate::dp::DpError;
use crate::model::{LayeredClassifier, ModelError};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("data: {0}")]
    Data(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("privacy check failed: reported ε={reported} exceeds configured ε={configured}")]
    BudgetViolated { reported: f64, configured: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Accountant(#[from] AccountantError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax logit equals the label.
pub fn evaluate(model: &LayeredClassifier, ds: &Dataset) -> Result<f64> {
    if model.dims.classes != ds.classes {
        return Err(HarnessError::Data(format!(
            "model has {} classes, dataset has {}",
            model.dims.classes, ds.classes
        )));
    }
    let logits = model.forward(&ds.features)?;
    let correct = ds
        .labels
        .iter()
        .enumerate()
        .filter(|(i, l)| argmax(logits.row(*i)) == **l)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Independent sub-seed for a named purpose (splitmix64 over FNV-1a of the tag).
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
