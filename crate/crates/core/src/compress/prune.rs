//! Private iterative magnitude pruning.
//!
//! Structured: fine-tune, find the `α%` smallest remaining prunable
//! weights (`W_min`), drop the block holding most of them, repeat `L`
//! times, fine-tune `M` more steps.
//!
//! Unstructured: fine-tune, prune the `(α·i)%` smallest prunable weights
//! of the original count, reset every survivor to its starting value,
//! repeat `⌈S/α⌉` times, fine-tune `M` more steps.

use serde::{Deserialize, Serialize};

use super::{CompressError, Result};
use crate::accountant::Accountant;
use crate::dp::{DpSgdConfig, DpTrainer, HardLabels};
use crate::harness::Dataset;
use crate::model::{LayeredClassifier, PruneMask};

/// Accountant phase name for all pruning fine-tune steps.
pub const DPIMP_PHASE: &str = "dpimp";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImpTarget {
    /// Final sparsity in percent, `0 < S < 100`.
    Sparsity(f64),
    /// Number of blocks to drop, `L < B`.
    DropBlocks(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpConfig {
    /// Percent pruned per round, `0 < α ≤ 100`.
    pub alpha: f64,
    /// DPSGD steps per round.
    pub n_iters: u64,
    /// DPSGD steps after the last round.
    pub m_iters: u64,
    pub target: ImpTarget,
}

impl ImpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 100.0) {
            return Err(CompressError::Config(format!(
                "α must lie in (0, 100], got {}",
                self.alpha
            )));
        }
        if let ImpTarget::Sparsity(s) = self.target {
            if !(s > 0.0 && s < 100.0) {
                return Err(CompressError::Config(format!(
                    "sparsity must lie in (0, 100), got {s}"
                )));
            }
        }
        Ok(())
    }

    /// Pruning rounds before the final fine-tune.
    pub fn rounds(&self) -> usize {
        match self.target {
            ImpTarget::Sparsity(s) => prune_rounds(s, self.alpha),
            ImpTarget::DropBlocks(l) => l,
        }
    }

    /// Total DPSGD steps the pipeline will take.
    pub fn total_steps(&self) -> u64 {
        self.rounds() as u64 * self.n_iters + self.m_iters
    }
}

/// `⌈S/α⌉`, tolerant of representation error such as `S/α = 5.000000001`.
pub fn prune_rounds(sparsity_pct: f64, alpha: f64) -> usize {
    let r = sparsity_pct / alpha;
    let n = r.round();
    if (r - n).abs() < 1e-9 {
        n as usize
    } else {
        r.ceil() as usize
    }
}

/// Registry-ordered positions of the `k` smallest `|w|`, ties to the lower index.
fn smallest_k(weights: &[f64], k: usize, already: Option<&[bool]>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // already-pruned coordinates come first so the pruned set only grows
    let key = |i: usize| already.map_or(true, |keep| keep[i]);
    order.sort_by(|&a, &b| {
        key(a)
            .cmp(&key(b))
            .then(weights[a].abs().total_cmp(&weights[b].abs()))
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Keep-mask over `weights` that prunes the `k` smallest magnitudes,
/// always including everything `prev_keep` already pruned.
pub fn magnitude_prune(weights: &[f64], prev_keep: &[bool], k: usize) -> Vec<bool> {
    assert_eq!(weights.len(), prev_keep.len());
    let mut keep = vec![true; weights.len()];
    for i in smallest_k(weights, k, Some(prev_keep)) {
        keep[i] = false;
    }
    keep
}

/// Per-block count of `W_min` members and `|W_min|`.
///
/// `W_min` is the `round(α/100 · P)` prunable weights of smallest
/// magnitude (at least one), `P` counting the blocks still present.
pub fn w_min_counts(model: &LayeredClassifier, alpha: f64) -> (Vec<usize>, usize) {
    let mut owner = Vec::new();
    let mut flat = Vec::new();
    for (b, t) in model.prunable() {
        owner.extend(std::iter::repeat_n(b, t.numel()));
        flat.extend_from_slice(t.data());
    }
    let k = ((alpha / 100.0 * flat.len() as f64).round() as usize).clamp(1, flat.len().max(1));
    let mut counts = vec![0; model.depth()];
    if flat.is_empty() {
        return (counts, 0);
    }
    for i in smallest_k(&flat, k, None) {
        counts[owner[i]] += 1;
    }
    (counts, k)
}

/// `argmax_i counts[i]`, ties to the lowest index.
pub fn select_block(counts: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &c) in counts.iter().enumerate() {
        if best.is_none_or(|b| c > counts[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropDecision {
    pub round: usize,
    /// Position of the dropped block in the model it was dropped from.
    pub dropped: usize,
    /// Index of the dropped block in the original teacher.
    pub origin: usize,
    pub counts: Vec<usize>,
    pub w_min_size: usize,
}

#[derive(Debug, Clone)]
pub struct StructuredOutcome {
    pub model: LayeredClassifier,
    pub decisions: Vec<DropDecision>,
    pub steps: u64,
}

/// Structured pruning; `observer` sees the model just before each drop.
pub fn structured_dpimp(
    model: &LayeredClassifier,
    cfg: &ImpConfig,
    dp: &DpSgdConfig,
    data: &Dataset,
    accountant: &mut Accountant,
    observer: &mut dyn FnMut(&LayeredClassifier, &DropDecision),
) -> Result<StructuredOutcome> {
    cfg.validate()?;
    let ImpTarget::DropBlocks(l) = cfg.target else {
        return Err(CompressError::Config("structured pruning needs a block-drop target".into()));
    };
    if l >= model.depth() {
        return Err(CompressError::Config(format!(
            "cannot drop {l} of {} blocks",
            model.depth()
        )));
    }
    let mut m = model.clone();
    let mut trainer = DpTrainer::new(*dp, data.len(), DPIMP_PHASE)?;
    let loss = HardLabels(&data.labels);
    let mut decisions = Vec::with_capacity(l);
    for round in 1..=l {
        trainer.run(cfg.n_iters, &mut m, &data.features, &loss, accountant)?;
        let (counts, w_min_size) = w_min_counts(&m, cfg.alpha);
        let dropped = select_block(&counts).expect("model has blocks");
        let decision = DropDecision {
            round,
            dropped,
            origin: m.blocks[dropped].origin,
            counts,
            w_min_size,
        };
        observer(&m, &decision);
        log::info!(
            "round {round}: dropping block {dropped} (origin {})",
            decision.origin
        );
        m.drop_block(dropped)?;
        decisions.push(decision);
    }
    trainer.run(cfg.m_iters, &mut m, &data.features, &loss, accountant)?;
    Ok(StructuredOutcome {
        model: m,
        decisions,
        steps: trainer.steps(),
    })
}

#[derive(Debug, Clone)]
pub struct UnstructuredOutcome {
    pub model: LayeredClassifier,
    /// Mask after each round, in order.
    pub masks: Vec<PruneMask>,
    pub steps: u64,
    pub label: String,
}

/// Number pruned after round `i`: `round(min(α·i, S)/100 · P)`.
pub fn cumulative_prune_count(alpha: f64, sparsity_pct: f64, round: usize, total: usize) -> usize {
    let frac = (alpha * round as f64).min(sparsity_pct) / 100.0;
    (frac * total as f64).round() as usize
}

/// Unstructured pruning with reset to `original`; `observer` sees each
/// round index, the freshly reset model and its mask.
pub fn unstructured_dpimp(
    original: &LayeredClassifier,
    cfg: &ImpConfig,
    dp: &DpSgdConfig,
    data: &Dataset,
    accountant: &mut Accountant,
    observer: &mut dyn FnMut(usize, &LayeredClassifier, &PruneMask),
) -> Result<UnstructuredOutcome> {
    cfg.validate()?;
    let ImpTarget::Sparsity(s) = cfg.target else {
        return Err(CompressError::Config("unstructured pruning needs a sparsity target".into()));
    };
    let mut m = original.clone();
    let mut trainer = DpTrainer::new(*dp, data.len(), DPIMP_PHASE)?;
    let loss = HardLabels(&data.labels);
    let total = m.prunable_count();
    let sizes: Vec<usize> = m.prunable().iter().map(|(_, t)| t.numel()).collect();
    let mut masks = Vec::new();
    for round in 1..=cfg.rounds() {
        trainer.run(cfg.n_iters, &mut m, &data.features, &loss, accountant)?;
        let flat: Vec<f64> = m.prunable().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let prev = m.mask().flat();
        let k = cumulative_prune_count(cfg.alpha, s, round, total);
        let keep = magnitude_prune(&flat, &prev, k);
        let mut split = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for n in &sizes {
            split.push(keep[off..off + n].to_vec());
            off += n;
        }
        let mask = PruneMask {
            keep: split,
            target_sparsity: (cfg.alpha * round as f64).min(s) / 100.0,
            iteration: round,
        };
        m = original.clone();
        m.apply_mask(&mask)?;
        log::info!("round {round}: sparsity {:.4}", mask.sparsity());
        observer(round, &m, &mask);
        masks.push(mask);
    }
    trainer.run(cfg.m_iters, &mut m, &data.features, &loss, accountant)?;
    Ok(UnstructuredOutcome {
        model: m,
        masks,
        steps: trainer.steps(),
        label: sparse_label(s),
    })
}

/// Report name of an unstructured-pruned model, e.g. `SparseModel(50%)`.
pub fn sparse_label(sparsity_pct: f64) -> String {
    format!("SparseModel({sparsity_pct}%)")
}
