#![allow(dead_code)]

pub mod grad;

use dpcompress::harness::{make_synthetic, Dataset};
use dpcompress::model::{LayeredClassifier, ModelDims};
use dpcompress::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-5)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Central differences of `f` at every coordinate of `x`.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_STEP;
            let up = f(&p);
            p[i] = orig - FD_STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Single-step RDP of the subsampled Gaussian at order `alpha`, by Simpson
/// quadrature of `E_{z~N(0,σ²)}[((1−q) + q·exp((2z−1)/(2σ²)))^α]` over
/// `z ∈ [−40σ, α + 40σ]`, summed in log space.
pub fn quadrature_rdp(q: f64, sigma: f64, alpha: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let (lo, hi) = (-40.0 * sigma, alpha + 40.0 * sigma);
    let h = (hi - lo) / n as f64;
    let s2 = sigma * sigma;
    let log_norm = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let (ln_q, ln_1mq) = (q.ln(), (1.0 - q).ln());
    let mut acc = f64::NEG_INFINITY;
    for i in 0..=n {
        let z = lo + i as f64 * h;
        let w: f64 = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let mix = log_add_exp(ln_1mq, ln_q + (2.0 * z - 1.0) / (2.0 * s2));
        let term = w.ln() + log_norm - z * z / (2.0 * s2) + alpha * mix;
        acc = log_add_exp(acc, term);
    }
    let log_a = acc + (h / 3.0).ln();
    log_a / (alpha - 1.0)
}

/// `(ε, δ)` conversion of per-order RDP, written out independently of the
/// library: `min_α r_α + ln((α−1)/α) − (ln δ + ln α)/(α − 1)`, floored at 0.
pub fn convert(orders: &[f64], rdp: &[f64], delta: f64) -> f64 {
    orders
        .iter()
        .zip(rdp)
        .map(|(&a, &r)| (r + ((a - 1.0) / a).ln() - (delta.ln() + a.ln()) / (a - 1.0)).max(0.0))
        .fold(f64::INFINITY, f64::min)
}

pub fn small_dims() -> ModelDims {
    ModelDims {
        d_in: 6,
        hidden: 8,
        classes: 3,
    }
}

pub fn small_model(depth: usize, seed: u64) -> LayeredClassifier {
    LayeredClassifier::random(small_dims(), depth, seed)
}

pub fn small_data(n: usize, seed: u64) -> Dataset {
    make_synthetic(3, n, small_dims().d_in, seed, 3.0).unwrap()
}

pub fn flat_params(m: &LayeredClassifier) -> Vec<f64> {
    m.params().iter().flat_map(|t| t.data().to_vec()).collect()
}

pub fn set_flat_params(m: &mut LayeredClassifier, flat: &[f64]) {
    let mut off = 0;
    for t in m.params_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    assert_eq!(off, flat.len());
}
