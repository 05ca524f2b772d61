//! Rényi-DP of the Poisson-subsampled Gaussian mechanism.
//!
//! For sampling rate `q` and noise multiplier `σ` the RDP at order `α` is
//! `log(A_α) / (α - 1)` with
//!
//! ```text
//! A_α = E_{z~N(0,σ²)} [ ((1-q) + q·exp((2z-1)/(2σ²)))^α ]
//! ```
//!
//! Integer orders use the binomial expansion
//! `A_α = Σ_i C(α,i) (1-q)^(α-i) q^i exp((i²-i)/(2σ²))`; fractional orders
//! use the two-sided erfc series. Both follow Mironov, Talwar & Zhang,
//! "Rényi Differential Privacy of the Sampled Gaussian Mechanism" (2019),
//! the same formulas used by TF-Privacy and Opacus. The bound is exact
//! for integer orders and a convergent series for fractional ones.

use statrs::function::erf::erfc;

/// Per-order RDP after `steps` compositions of the subsampled Gaussian.
///
/// `σ = 0` with `q > 0` yields `+∞` at every order (no privacy), which the
/// conversion turns into `ε = ∞`.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, steps: u64, orders: &[f64]) -> Vec<f64> {
    orders
        .iter()
        .map(|&alpha| {
            if steps == 0 {
                0.0
            } else {
                steps as f64 * rdp_single(q, sigma, alpha)
            }
        })
        .collect()
}

/// RDP of a single step at one order.
pub fn rdp_single(q: f64, sigma: f64, alpha: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    if q >= 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_int(q, sigma, alpha as u64)
    } else {
        log_a_frac(q, sigma, alpha)
    };
    log_a / (alpha - 1.0)
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (ln_q, ln_1mq) = (q.ln(), (-q).ln_1p());
    let two_s2 = 2.0 * sigma * sigma;
    let mut log_a = f64::NEG_INFINITY;
    let mut log_coef = 0.0;
    for i in 0..=alpha {
        if i > 0 {
            log_coef += ((alpha - i + 1) as f64).ln() - (i as f64).ln();
        }
        let fi = i as f64;
        let s = log_coef + fi * ln_q + (alpha - i) as f64 * ln_1mq + (fi * fi - fi) / two_s2;
        log_a = log_add(log_a, s);
    }
    log_a
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (ln_q, ln_1mq) = (q.ln(), (-q).ln_1p());
    let s2 = sigma * sigma;
    let z0 = s2 * (1.0 / q - 1.0).ln() + 0.5;
    let sqrt2s = std::f64::consts::SQRT_2 * sigma;
    let (mut log_a0, mut log_a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    // generalised binomial coefficient C(α, i), tracked as sign and log|·|
    let mut log_coef = 0.0;
    let mut positive = true;
    let mut i = 0u64;
    loop {
        let fi = i as f64;
        let j = alpha - fi;
        let log_t0 = log_coef + fi * ln_q + j * ln_1mq;
        let log_t1 = log_coef + j * ln_q + fi * ln_1mq;
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / sqrt2s);
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / sqrt2s);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * s2) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * s2) + log_e1;
        if positive {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        if log_s0.max(log_s1) < -30.0 && fi > alpha {
            break;
        }
        // C(α, i+1) = C(α, i) · (α - i) / (i + 1)
        let ratio = alpha - fi;
        if ratio < 0.0 {
            positive = !positive;
        }
        log_coef += ratio.abs().ln() - (fi + 1.0).ln();
        i += 1;
        if i > 100_000 {
            break;
        }
    }
    log_add(log_a0, log_a1)
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `log(e^a - e^b)` for `a ≥ b`.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// `ln(erfc(x))`, accurate in the far right tail where `erfc` underflows.
pub(crate) fn log_erfc(x: f64) -> f64 {
    if x < 20.0 {
        return erfc(x).ln();
    }
    // erfc(x) ~ exp(-x²)/(x√π) · (1 - 1/(2x²) + 3/(4x⁴) - 15/(8x⁶) + 105/(16x⁸))
    let x2 = x * x;
    let series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2)
        + 105.0 / (16.0 * x2 * x2 * x2 * x2);
    -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln() + series.ln()
}
