//! The layered classifier used as both teacher and student.
//!
//! ```text
//! h   = x · P                                   input projection (D_in × H)
//! h  += act(LN(h) · W1 + b1) · W2 + b2           one residual block, repeated B times
//! out = LN(h) · Head                             classifier head (H × classes)
//! ```
//!
//! Blocks are pre-norm residual feed-forward units, so every block maps
//! width `H` to width `H` and any ordered subset of blocks still composes.
//! A block whose residual branch is zero is an exact identity.
//!
//! Only block weight matrices (`W1`, `W2`) are prunable; the input
//! projection, the head and all biases are not.

mod checkpoint;
mod mask;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use mask::{apply_mask, ActiveLayout, PruneMask};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input has {got} features, model expects {expected}")]
    InputWidth { got: usize, expected: usize },
    #[error("cannot keep {keep} blocks from a model with {depth}")]
    TooManyBlocks { keep: usize, depth: usize },
    #[error("layer choice {choice:?} cannot pick {keep} of {depth} blocks")]
    LayerChoice {
        choice: LayerChoice,
        keep: usize,
        depth: usize,
    },
    #[error("zero-shot source has dims {given:?}, student needs {student:?}")]
    DimsMismatch {
        given: ModelDims,
        student: ModelDims,
    },
    #[error("mask does not match the parameter registry: {0}")]
    MaskMismatch(String),
    #[error("block index {index} out of range for depth {depth}")]
    NoSuchBlock { index: usize, depth: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_in: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_in: 32,
            hidden: 64,
            classes: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

/// Pre-norm residual feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    /// Index of this block in the model it was first created in.
    pub origin: usize,
    pub(crate) mask_w1: Option<Tensor>,
    pub(crate) mask_w2: Option<Tensor>,
}

impl Block {
    pub fn zeros(hidden: usize, origin: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[hidden, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, hidden]),
            b2: Tensor::zeros(&[hidden]),
            origin,
            mask_w1: None,
            mask_w2: None,
        }
    }

    /// Same weights, masks and origin; bit-for-bit comparison.
    pub fn same_weights(&self, other: &Block) -> bool {
        bits_eq(&self.w1, &other.w1)
            && bits_eq(&self.b1, &other.b1)
            && bits_eq(&self.w2, &other.w2)
            && bits_eq(&self.b2, &other.b2)
    }
}

pub(crate) fn bits_eq(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// How zero-shot initialisation picks teacher blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerChoice {
    /// Blocks 0, 2, 4, …; needs `keep ≤ ⌈B/2⌉`.
    #[default]
    Even,
    /// Blocks `⌊j·B/keep⌋` for `j = 0..keep`; works for any `keep ≤ B`.
    Strided,
}

impl LayerChoice {
    pub fn indices(self, depth: usize, keep: usize) -> Result<Vec<usize>> {
        if keep > depth {
            return Err(ModelError::TooManyBlocks { keep, depth });
        }
        match self {
            LayerChoice::Even => {
                if keep > depth.div_ceil(2) {
                    return Err(ModelError::LayerChoice {
                        choice: self,
                        keep,
                        depth,
                    });
                }
                Ok((0..keep).map(|j| 2 * j).collect())
            }
            LayerChoice::Strided => Ok((0..keep).map(|j| j * depth / keep).collect()),
        }
    }
}

/// Student initialisation.
#[derive(Debug, Clone, Copy)]
pub enum InitStrategy<'a> {
    /// Fresh weights from a seeded Gaussian.
    Random { seed: u64 },
    /// Copy blocks, projection and head from the public pre-trained teacher.
    ZeroShotPt(&'a LayeredClassifier),
    /// Copy from the privately fine-tuned teacher (no extra privacy cost).
    ZeroShotFt(&'a LayeredClassifier),
}

/// Serializable name of an [`InitStrategy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    Random,
    ZeroshotPt,
    ZeroshotFt,
}

impl InitKind {
    pub fn label(self) -> &'static str {
        match self {
            InitKind::Random => "random",
            InitKind::ZeroshotPt => "zeroshot-pt",
            InitKind::ZeroshotFt => "zeroshot-ft",
        }
    }
}

impl std::str::FromStr for InitKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(Self::Random),
            "zeroshot-pt" => Ok(Self::ZeroshotPt),
            "zeroshot-ft" => Ok(Self::ZeroshotFt),
            other => Err(format!(
                "unknown init `{other}` (expected random, zeroshot-pt or zeroshot-ft)"
            )),
        }
    }
}

/// Where a parameter lives and whether pruning may touch it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub block: Option<usize>,
    pub prunable: bool,
    pub shape: Vec<usize>,
}

/// Tape handles produced by [`LayeredClassifier::forward_on`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// One handle per parameter, in registry order.
    pub params: Vec<Var>,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayeredClassifier {
    pub dims: ModelDims,
    pub activation: Activation,
    pub input_proj: Tensor,
    pub blocks: Vec<Block>,
    pub head: Tensor,
}

const PARAMS_PER_BLOCK: usize = 4;

impl LayeredClassifier {
    /// All-zero model.
    pub fn zeros(dims: ModelDims, depth: usize) -> Self {
        Self {
            dims,
            activation: Activation::default(),
            input_proj: Tensor::zeros(&[dims.d_in, dims.hidden]),
            blocks: (0..depth).map(|i| Block::zeros(dims.hidden, i)).collect(),
            head: Tensor::zeros(&[dims.hidden, dims.classes]),
        }
    }

    /// Seeded Gaussian initialisation with fan-in scaling; biases start at 0.
    pub fn random(dims: ModelDims, depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut gauss = |shape: &[usize], std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("length matches shape")
        };
        let h = dims.hidden;
        let hs = 1.0 / (h as f64).sqrt();
        let input_proj = gauss(&[dims.d_in, h], 1.0 / (dims.d_in as f64).sqrt());
        let blocks = (0..depth)
            .map(|i| {
                let w1 = gauss(&[h, h], hs);
                let w2 = gauss(&[h, h], 0.5 * hs);
                Block {
                    w1,
                    b1: Tensor::zeros(&[h]),
                    w2,
                    b2: Tensor::zeros(&[h]),
                    origin: i,
                    mask_w1: None,
                    mask_w2: None,
                }
            })
            .collect();
        let head = gauss(&[h, dims.classes], hs);
        Self {
            dims,
            activation: Activation::default(),
            input_proj,
            blocks,
            head,
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Parameters in registry order: input projection, then
    /// `w1, b1, w2, b2` for each block, then the head.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 + PARAMS_PER_BLOCK * self.blocks.len());
        out.push(&self.input_proj);
        for b in &self.blocks {
            out.extend([&b.w1, &b.b1, &b.w2, &b.b2]);
        }
        out.push(&self.head);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 + PARAMS_PER_BLOCK * self.blocks.len());
        out.push(&mut self.input_proj);
        for b in &mut self.blocks {
            out.extend([&mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2]);
        }
        out.push(&mut self.head);
        out
    }

    pub fn registry(&self) -> Vec<ParamInfo> {
        let mut out = vec![ParamInfo {
            name: "input_proj".into(),
            block: None,
            prunable: false,
            shape: self.input_proj.shape().to_vec(),
        }];
        for (i, b) in self.blocks.iter().enumerate() {
            for (field, t, prunable) in [
                ("w1", &b.w1, true),
                ("b1", &b.b1, false),
                ("w2", &b.w2, true),
                ("b2", &b.b2, false),
            ] {
                out.push(ParamInfo {
                    name: format!("blocks.{i}.{field}"),
                    block: Some(i),
                    prunable,
                    shape: t.shape().to_vec(),
                });
            }
        }
        out.push(ParamInfo {
            name: "head".into(),
            block: None,
            prunable: false,
            shape: self.head.shape().to_vec(),
        });
        out
    }

    /// Prunable weights in registry order, as `(block index, tensor)`.
    pub fn prunable(&self) -> Vec<(usize, &Tensor)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| [(i, &b.w1), (i, &b.w2)])
            .collect()
    }

    pub fn prunable_count(&self) -> usize {
        self.prunable().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Fraction of prunable weights that are exactly zero.
    pub fn sparsity(&self) -> f64 {
        let total = self.prunable_count();
        if total == 0 {
            return 0.0;
        }
        let zeros = self
            .prunable()
            .iter()
            .flat_map(|(_, t)| t.data())
            .filter(|v| **v == 0.0)
            .count();
        zeros as f64 / total as f64
    }

    /// Records the forward pass for `x` (batch × D_in) on `tape`.
    pub fn forward_on<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<ForwardPass> {
        let width = tape.value(x).shape().get(1).copied().unwrap_or(0);
        if width != self.dims.d_in {
            return Err(ModelError::InputWidth {
                got: width,
                expected: self.dims.d_in,
            });
        }
        let mut params = Vec::with_capacity(2 + PARAMS_PER_BLOCK * self.blocks.len());
        let proj = tape.leaf_ref(&self.input_proj, true);
        params.push(proj);
        let mut h = tape.matmul(x, proj)?;
        for b in &self.blocks {
            let w1 = tape.leaf_ref(&b.w1, true);
            let b1 = tape.leaf_ref(&b.b1, true);
            let w2 = tape.leaf_ref(&b.w2, true);
            let b2 = tape.leaf_ref(&b.b2, true);
            params.extend([w1, b1, w2, b2]);
            let w1m = match &b.mask_w1 {
                Some(m) => {
                    let m = tape.leaf_ref(m, false);
                    tape.mul(w1, m)?
                }
                None => w1,
            };
            let w2m = match &b.mask_w2 {
                Some(m) => {
                    let m = tape.leaf_ref(m, false);
                    tape.mul(w2, m)?
                }
                None => w2,
            };
            let n = tape.layer_norm(h)?;
            let z = tape.matmul(n, w1m)?;
            let z = tape.add_row(z, b1)?;
            let a = match self.activation {
                Activation::Gelu => tape.gelu(z)?,
                Activation::Relu => tape.relu(z)?,
            };
            let r = tape.matmul(a, w2m)?;
            let r = tape.add_row(r, b2)?;
            h = tape.add(h, r)?;
        }
        let n = tape.layer_norm(h)?;
        let head = tape.leaf_ref(&self.head, true);
        params.push(head);
        let logits = tape.matmul(n, head)?;
        Ok(ForwardPass { params, logits })
    }

    /// Logits for every row of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf_ref(x, false);
        let pass = self.forward_on(&mut tape, xv)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Removes block `index`, returning it.
    pub fn drop_block(&mut self, index: usize) -> Result<Block> {
        if index >= self.blocks.len() {
            return Err(ModelError::NoSuchBlock {
                index,
                depth: self.blocks.len(),
            });
        }
        Ok(self.blocks.remove(index))
    }

    /// Keeps only the listed blocks, in the given order.
    pub fn keep_blocks(&self, indices: &[usize]) -> Result<Self> {
        let mut blocks = Vec::with_capacity(indices.len());
        for &i in indices {
            let b = self.blocks.get(i).ok_or(ModelError::NoSuchBlock {
                index: i,
                depth: self.blocks.len(),
            })?;
            blocks.push(b.clone());
        }
        Ok(Self {
            blocks,
            ..self.clone()
        })
    }

    /// Bit-for-bit equality of every parameter.
    pub fn same_weights(&self, other: &Self) -> bool {
        let (a, b) = (self.params(), other.params());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| bits_eq(x, y))
    }
}

/// Builds a student with `keep` blocks.
///
/// Zero-shot strategies copy the chosen blocks, the input projection and
/// the head verbatim from their source model; `teacher` only fixes the
/// student's dimensions.
pub fn init_student(
    teacher: &LayeredClassifier,
    keep: usize,
    strategy: InitStrategy<'_>,
    choice: LayerChoice,
) -> Result<LayeredClassifier> {
    if keep > teacher.depth() {
        return Err(ModelError::TooManyBlocks {
            keep,
            depth: teacher.depth(),
        });
    }
    match strategy {
        InitStrategy::Random { seed } => {
            let mut m = LayeredClassifier::random(teacher.dims, keep, seed);
            m.activation = teacher.activation;
            Ok(m)
        }
        InitStrategy::ZeroShotPt(source) | InitStrategy::ZeroShotFt(source) => {
            if source.dims != teacher.dims {
                return Err(ModelError::DimsMismatch {
                    given: source.dims,
                    student: teacher.dims,
                });
            }
            let idx = choice.indices(source.depth(), keep)?;
            source.keep_blocks(&idx)
        }
    }
}
