//! DPSGD: per-example gradients, clipping, Gaussian noise, update.
//!
//! One step with sampled batch `B`:
//!
//! ```text
//! g_i  = ∇ loss(x_i)                      microbatch of one
//! ĝ_i  = g_i · min(1, C / ‖g_i‖₂)
//! u    = (Σ ĝ_i + N(0, σ²C²·I)) / b̄
//! θ   ← θ − η·u                            masked coordinates excluded
//! ```
//!
//! Noise is drawn coordinate by coordinate from a ChaCha20 stream with
//! `rand_distr::StandardNormal` (ziggurat).

mod sampler;

pub use sampler::{BatchSampler, Sampling};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::{Accountant, AccountantError};
use crate::model::{ActiveLayout, LayeredClassifier, ModelError};
use crate::tensor::{self, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum DpError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Accountant(#[from] AccountantError),
    #[error("invalid DPSGD config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DpError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpSgdConfig {
    /// `C`; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    /// `σ`; noise standard deviation is `σ·C`.
    pub noise_multiplier: f64,
    pub learning_rate: f64,
    /// `b̄`; Poisson rate is `b̄ / N`.
    pub expected_batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub sampling: Sampling,
}

impl Default for DpSgdConfig {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            learning_rate: 0.001,
            expected_batch_size: 128,
            seed: 0,
            sampling: Sampling::Poisson,
        }
    }
}

impl DpSgdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DpError::Config(m.to_string()));
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be > 0");
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return bad("noise_multiplier must be finite and ≥ 0");
        }
        if self.noise_multiplier > 0.0 && self.clip_norm.is_infinite() {
            return bad("noise needs a finite clip_norm");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and > 0");
        }
        if self.expected_batch_size == 0 {
            return bad("expected_batch_size must be ≥ 1");
        }
        Ok(())
    }

    /// Sampling rate `q = b̄ / N`, capped at 1.
    pub fn sample_rate(&self, n: usize) -> f64 {
        (self.expected_batch_size as f64 / n as f64).min(1.0)
    }

    /// Steps in `epochs` passes over `n` examples.
    pub fn steps_for_epochs(&self, n: usize, epochs: f64) -> u64 {
        (epochs * n as f64 / self.expected_batch_size as f64).round() as u64
    }
}

/// Per-example flat gradients in [`ActiveLayout`] order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientBatch {
    pub grads: Vec<Vec<f64>>,
}

impl GradientBatch {
    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Loss for a single example, given its logits (1 × classes).
pub trait ExampleLoss {
    fn example_loss<'a>(
        &self,
        tape: &mut Tape<'a>,
        logits: Var,
        index: usize,
    ) -> tensor::Result<Var>;
}

/// Cross-entropy against the integer label of each example.
#[derive(Debug, Clone, Copy)]
pub struct HardLabels<'a>(pub &'a [usize]);

impl ExampleLoss for HardLabels<'_> {
    fn example_loss<'a>(
        &self,
        tape: &mut Tape<'a>,
        logits: Var,
        index: usize,
    ) -> tensor::Result<Var> {
        tape.cross_entropy(logits, &[self.0[index]])
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `g` to norm at most `c`; leaves it untouched when already within.
pub fn clip_in_place(g: &mut [f64], c: f64) {
    let norm = l2_norm(g);
    if norm <= c {
        return;
    }
    let s = c / norm;
    for v in g {
        *v *= s;
    }
}

pub fn clip_per_example(batch: &GradientBatch, c: f64) -> GradientBatch {
    GradientBatch {
        grads: batch
            .grads
            .iter()
            .map(|g| {
                let mut g = g.clone();
                clip_in_place(&mut g, c);
                g
            })
            .collect(),
    }
}

/// `(sum + N(0, σ²C²)) / b̄` in place; `σ = 0` draws nothing.
fn finish_aggregate<R: Rng + ?Sized>(sum: &mut [f64], sigma: f64, c: f64, b_bar: f64, rng: &mut R) {
    if sigma > 0.0 {
        let std = sigma * c;
        for v in sum.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += std * z;
        }
    }
    for v in sum.iter_mut() {
        *v /= b_bar;
    }
}

/// Sums clipped gradients in example order, adds noise, divides by `b̄`.
///
/// `dim` is the flat length, needed when the batch is empty.
pub fn noisy_aggregate<R: Rng + ?Sized>(
    clipped: &GradientBatch,
    dim: usize,
    sigma: f64,
    c: f64,
    b_bar: f64,
    rng: &mut R,
) -> Vec<f64> {
    let mut sum = vec![0.0; dim];
    for g in &clipped.grads {
        add_into(&mut sum, g);
    }
    finish_aggregate(&mut sum, sigma, c, b_bar, rng);
    sum
}

fn add_into(sum: &mut [f64], g: &[f64]) {
    assert_eq!(sum.len(), g.len(), "gradient length mismatch");
    for (s, v) in sum.iter_mut().zip(g) {
        *s += v;
    }
}

/// Gradient of one example's loss, flattened over `layout`.
pub fn example_gradient(
    model: &LayeredClassifier,
    features: &Tensor,
    index: usize,
    loss: &dyn ExampleLoss,
    layout: &ActiveLayout,
    out: &mut Vec<f64>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(features.select_rows(&[index]), false);
    let pass = model.forward_on(&mut tape, x)?;
    let l = loss.example_loss(&mut tape, pass.logits, index)?;
    let value = tape.value(l).item();
    let grads = tape.backward(l)?;
    // parameters the loss never reached get an explicit zero gradient
    let fill: Vec<Option<Tensor>> = pass
        .params
        .iter()
        .map(|v| match grads.get(*v) {
            Some(_) => None,
            None => Some(Tensor::zeros(tape.value(*v).shape())),
        })
        .collect();
    let refs: Vec<&Tensor> = pass
        .params
        .iter()
        .zip(&fill)
        .map(|(v, z)| grads.get(*v).or(z.as_ref()).expect("gradient or zero fill"))
        .collect();
    layout.gather_into(&refs, out);
    Ok(value)
}

pub fn per_example_gradients(
    model: &LayeredClassifier,
    features: &Tensor,
    indices: &[usize],
    loss: &dyn ExampleLoss,
) -> Result<GradientBatch> {
    let layout = model.active_layout();
    let mut grads = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut g = Vec::new();
        example_gradient(model, features, i, loss, &layout, &mut g)?;
        grads.push(g);
    }
    Ok(GradientBatch { grads })
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub batch_size: usize,
    /// Mean per-example loss before the update (0 for an empty batch).
    pub mean_loss: f64,
}

/// One DPSGD step on `batch`, charging one `(q, σ)` step to `accountant`.
///
/// The accountant is charged before the model is touched, so a refused
/// charge leaves both unchanged.
#[allow(clippy::too_many_arguments)]
pub fn dpsgd_step<R: Rng + ?Sized>(
    model: &mut LayeredClassifier,
    features: &Tensor,
    batch: &[usize],
    loss: &dyn ExampleLoss,
    cfg: &DpSgdConfig,
    q: f64,
    phase: &str,
    accountant: &mut Accountant,
    noise_rng: &mut R,
) -> Result<StepStats> {
    accountant.charge(phase, q, cfg.noise_multiplier, 1)?;
    let layout = model.active_layout();
    let mut sum = vec![0.0; layout.len()];
    let mut g = Vec::with_capacity(layout.len());
    let mut loss_sum = 0.0;
    for &i in batch {
        loss_sum += example_gradient(model, features, i, loss, &layout, &mut g)?;
        clip_in_place(&mut g, cfg.clip_norm);
        add_into(&mut sum, &g);
    }
    finish_aggregate(
        &mut sum,
        cfg.noise_multiplier,
        cfg.clip_norm,
        cfg.expected_batch_size as f64,
        noise_rng,
    );
    layout.apply_update(model.params_mut(), &sum, cfg.learning_rate);
    Ok(StepStats {
        batch_size: batch.len(),
        mean_loss: mean(loss_sum, batch.len()),
    })
}

/// Non-private reference step: `θ ← θ − η·Σ g_i / b̄`, no clipping, no noise.
pub fn sgd_step(
    model: &mut LayeredClassifier,
    features: &Tensor,
    batch: &[usize],
    loss: &dyn ExampleLoss,
    learning_rate: f64,
    expected_batch_size: usize,
) -> Result<StepStats> {
    let layout = model.active_layout();
    let mut sum = vec![0.0; layout.len()];
    let mut g = Vec::with_capacity(layout.len());
    let mut loss_sum = 0.0;
    for &i in batch {
        loss_sum += example_gradient(model, features, i, loss, &layout, &mut g)?;
        add_into(&mut sum, &g);
    }
    let b = expected_batch_size as f64;
    for v in &mut sum {
        *v /= b;
    }
    layout.apply_update(model.params_mut(), &sum, learning_rate);
    Ok(StepStats {
        batch_size: batch.len(),
        mean_loss: mean(loss_sum, batch.len()),
    })
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Seeded DPSGD loop state: a batch sampler and a noise stream.
///
/// Sampling uses ChaCha20 stream 0 of `cfg.seed`, noise uses stream 1, so
/// the two never share draws.
#[derive(Debug, Clone)]
pub struct DpTrainer {
    cfg: DpSgdConfig,
    phase: String,
    sampler: BatchSampler,
    noise: ChaCha20Rng,
    steps: u64,
}

pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl DpTrainer {
    pub fn new(cfg: DpSgdConfig, n: usize, phase: &str) -> Result<Self> {
        cfg.validate()?;
        if n == 0 {
            return Err(DpError::Config("empty training set".into()));
        }
        if cfg.sampling == Sampling::Shuffled {
            log::warn!(
                "phase `{phase}`: shuffled fixed-size batches; privacy accounting assumes Poisson sampling and is approximate"
            );
        }
        Ok(Self {
            sampler: BatchSampler::new(cfg.sampling, n, cfg.expected_batch_size, seeded_stream(cfg.seed, 0)),
            noise: seeded_stream(cfg.seed, 1),
            cfg,
            phase: phase.to_string(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &DpSgdConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn sample_rate(&self) -> f64 {
        self.cfg.sample_rate(self.sampler.population())
    }

    pub fn step(
        &mut self,
        model: &mut LayeredClassifier,
        features: &Tensor,
        loss: &dyn ExampleLoss,
        accountant: &mut Accountant,
    ) -> Result<StepStats> {
        let batch = self.sampler.next_batch();
        let q = self.sample_rate();
        let stats = dpsgd_step(
            model,
            features,
            &batch,
            loss,
            &self.cfg,
            q,
            &self.phase,
            accountant,
            &mut self.noise,
        )?;
        self.steps += 1;
        Ok(stats)
    }

    /// Runs `steps` DPSGD steps; returns the mean loss of the last step.
    pub fn run(
        &mut self,
        steps: u64,
        model: &mut LayeredClassifier,
        features: &Tensor,
        loss: &dyn ExampleLoss,
        accountant: &mut Accountant,
    ) -> Result<f64> {
        let mut last = f64::NAN;
        for s in 0..steps {
            let st = self.step(model, features, loss, accountant)?;
            last = st.mean_loss;
            if s % 50 == 0 {
                log::debug!("{} step {}: loss {:.4}", self.phase, self.steps, last);
            }
        }
        Ok(last)
    }

    /// Same batch sequence as [`Self::step`] but a plain SGD update.
    pub fn sgd_step(
        &mut self,
        model: &mut LayeredClassifier,
        features: &Tensor,
        loss: &dyn ExampleLoss,
    ) -> Result<StepStats> {
        let batch = self.sampler.next_batch();
        let stats = sgd_step(
            model,
            features,
            &batch,
            loss,
            self.cfg.learning_rate,
            self.cfg.expected_batch_size,
        )?;
        self.steps += 1;
        Ok(stats)
    }
}

/// Non-private minibatch SGD with a batched forward pass and mean
/// cross-entropy. Used for public pre-training, where speed matters and
/// per-example gradients are unnecessary.
pub fn train_sgd_batched(
    model: &mut LayeredClassifier,
    features: &Tensor,
    labels: &[usize],
    learning_rate: f64,
    batch_size: usize,
    epochs: usize,
    seed: u64,
) -> Result<f64> {
    let n = features.rows();
    if n == 0 || batch_size == 0 {
        return Err(DpError::Config("empty data or zero batch size".into()));
    }
    let mut sampler = BatchSampler::new(Sampling::Shuffled, n, batch_size, seeded_stream(seed, 0));
    let steps = epochs * n.div_ceil(batch_size);
    let mut last = f64::NAN;
    for _ in 0..steps {
        let idx = sampler.next_batch();
        let x = features.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let layout = model.active_layout();
        let update = {
            let mut tape = Tape::new();
            let xv = tape.leaf(x, false);
            let pass = model.forward_on(&mut tape, xv)?;
            let l = tape.cross_entropy(pass.logits, &y)?;
            last = tape.value(l).item();
            let grads = tape.backward(l)?;
            let zero: Vec<Tensor> = pass
                .params
                .iter()
                .map(|v| Tensor::zeros(tape.value(*v).shape()))
                .collect();
            let refs: Vec<&Tensor> = pass
                .params
                .iter()
                .zip(&zero)
                .map(|(v, z)| grads.get(*v).unwrap_or(z))
                .collect();
            layout.gather(&refs)
        };
        layout.apply_update(model.params_mut(), &update, learning_rate);
    }
    Ok(last)
}
