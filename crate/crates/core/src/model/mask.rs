use serde::{Deserialize, Serialize};

use super::{LayeredClassifier, ModelError, Result};
use crate::tensor::Tensor;

/// Keep/prune flag for every prunable coordinate.
///
/// `keep[k]` covers the `k`-th prunable tensor in registry order
/// (block 0 `w1`, block 0 `w2`, block 1 `w1`, …); `false` means pruned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub keep: Vec<Vec<bool>>,
    /// Requested cumulative sparsity in `[0, 1]`.
    pub target_sparsity: f64,
    /// Pruning round that produced this mask; 0 for a dense mask.
    pub iteration: usize,
}

impl PruneMask {
    pub fn dense(model: &LayeredClassifier) -> Self {
        Self::filled(model, true)
    }

    pub fn filled(model: &LayeredClassifier, keep: bool) -> Self {
        Self {
            keep: model
                .prunable()
                .iter()
                .map(|(_, t)| vec![keep; t.numel()])
                .collect(),
            target_sparsity: if keep { 0.0 } else { 1.0 },
            iteration: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.keep.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pruned(&self) -> usize {
        self.keep.iter().flatten().filter(|k| !**k).count()
    }

    /// Fraction of coordinates pruned.
    pub fn sparsity(&self) -> f64 {
        match self.len() {
            0 => 0.0,
            n => self.pruned() as f64 / n as f64,
        }
    }

    /// Flattened view in registry order.
    pub fn flat(&self) -> Vec<bool> {
        self.keep.iter().flatten().copied().collect()
    }

    /// True when every coordinate pruned in `self` is also pruned in `later`.
    pub fn is_subset_of_pruned(&self, later: &PruneMask) -> bool {
        self.len() == later.len()
            && self
                .keep
                .iter()
                .flatten()
                .zip(later.keep.iter().flatten())
                .all(|(a, b)| *a || !*b)
    }
}

impl LayeredClassifier {
    /// Zeroes pruned weights and pins them at zero for later training.
    ///
    /// A fully dense mask clears any stored mask and leaves weights untouched.
    pub fn apply_mask(&mut self, mask: &PruneMask) -> Result<()> {
        let expected: Vec<usize> = self.prunable().iter().map(|(_, t)| t.numel()).collect();
        if mask.keep.len() != expected.len() {
            return Err(ModelError::MaskMismatch(format!(
                "mask has {} tensors, model has {} prunable",
                mask.keep.len(),
                expected.len()
            )));
        }
        for (k, (m, n)) in mask.keep.iter().zip(&expected).enumerate() {
            if m.len() != *n {
                return Err(ModelError::MaskMismatch(format!(
                    "prunable tensor {k} has {n} coordinates, mask has {}",
                    m.len()
                )));
            }
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let (m1, m2) = (&mask.keep[2 * i], &mask.keep[2 * i + 1]);
            block.mask_w1 = mask_tensor(&mut block.w1, m1);
            block.mask_w2 = mask_tensor(&mut block.w2, m2);
        }
        Ok(())
    }

    /// Drops any stored mask; weights stay as they are.
    pub fn clear_mask(&mut self) {
        for b in &mut self.blocks {
            b.mask_w1 = None;
            b.mask_w2 = None;
        }
    }

    /// Current mask; blocks without a stored mask are dense.
    pub fn mask(&self) -> PruneMask {
        let keep: Vec<Vec<bool>> = self
            .blocks
            .iter()
            .flat_map(|b| {
                [(&b.mask_w1, &b.w1), (&b.mask_w2, &b.w2)].map(|(m, w)| match m {
                    Some(m) => m.data().iter().map(|v| *v != 0.0).collect(),
                    None => vec![true; w.numel()],
                })
            })
            .collect();
        let mut out = PruneMask {
            keep,
            target_sparsity: 0.0,
            iteration: 0,
        };
        out.target_sparsity = out.sparsity();
        out
    }

    pub fn is_masked(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| b.mask_w1.is_some() || b.mask_w2.is_some())
    }

    /// Coordinates that training may update.
    pub fn active_layout(&self) -> ActiveLayout {
        let mut spans = vec![Span::Dense(self.input_proj.numel())];
        for b in &self.blocks {
            spans.push(span_for(&b.w1, &b.mask_w1));
            spans.push(Span::Dense(b.b1.numel()));
            spans.push(span_for(&b.w2, &b.mask_w2));
            spans.push(Span::Dense(b.b2.numel()));
        }
        spans.push(Span::Dense(self.head.numel()));
        let len = spans
            .iter()
            .map(|s| match s {
                Span::Dense(n) => *n,
                Span::Sparse { keep, .. } => keep.len(),
            })
            .sum();
        ActiveLayout { spans, len }
    }
}

fn mask_tensor(w: &mut Tensor, keep: &[bool]) -> Option<Tensor> {
    if keep.iter().all(|k| *k) {
        return None;
    }
    let mut m = Tensor::zeros(w.shape());
    for ((v, mv), k) in w.data_mut().iter_mut().zip(m.data_mut()).zip(keep) {
        if *k {
            *mv = 1.0;
        } else {
            *v = 0.0;
        }
    }
    Some(m)
}

fn span_for(w: &Tensor, mask: &Option<Tensor>) -> Span {
    match mask {
        None => Span::Dense(w.numel()),
        Some(m) => Span::Sparse {
            keep: m
                .data()
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, _)| i)
                .collect(),
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Span {
    Dense(usize),
    Sparse { keep: Vec<usize> },
}

/// Flat coordinate layout over trainable, unmasked parameters in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveLayout {
    spans: Vec<Span>,
    len: usize,
}

impl ActiveLayout {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Packs per-parameter tensors (registry order) into one flat vector.
    pub fn gather(&self, grads: &[&Tensor]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len);
        self.gather_into(grads, &mut out);
        out
    }

    pub fn gather_into(&self, grads: &[&Tensor], out: &mut Vec<f64>) {
        debug_assert_eq!(grads.len(), self.spans.len());
        out.clear();
        for (span, g) in self.spans.iter().zip(grads) {
            match span {
                Span::Dense(_) => out.extend_from_slice(g.data()),
                Span::Sparse { keep } => out.extend(keep.iter().map(|&i| g.data()[i])),
            }
        }
    }

    /// `p ← p − lr·u` over the active coordinates; masked ones are untouched.
    pub fn apply_update(&self, params: Vec<&mut Tensor>, update: &[f64], lr: f64) {
        assert_eq!(update.len(), self.len, "update length must match layout");
        let mut off = 0;
        for (span, p) in self.spans.iter().zip(params) {
            let data = p.data_mut();
            match span {
                Span::Dense(n) => {
                    for (v, u) in data.iter_mut().zip(&update[off..off + n]) {
                        *v -= lr * u;
                    }
                    off += n;
                }
                Span::Sparse { keep } => {
                    for (&i, u) in keep.iter().zip(&update[off..off + keep.len()]) {
                        data[i] -= lr * u;
                    }
                    off += keep.len();
                }
            }
        }
    }
}

/// Free-function form of [`LayeredClassifier::apply_mask`].
pub fn apply_mask(model: &mut LayeredClassifier, mask: &PruneMask) -> Result<()> {
    model.apply_mask(mask)
}
