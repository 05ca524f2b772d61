//! Privacy accounting for DPSGD.
//!
//! Each DPSGD step is a Poisson-subsampled Gaussian mechanism. Steps are
//! recorded in a ledger of `(phase, q, σ, steps)` records; RDP adds across
//! records and is converted to `(ε, δ)` with the conversion of Balle et
//! al. (2020, Thm. 21):
//!
//! ```text
//! ε = min_α  RDP(α) + log((α-1)/α) - (log δ + log α) / (α - 1)
//! ```
//!
//! This is an RDP accountant, which is somewhat looser than numerical
//! (PRV/FFT) composition. Expect ε a few tenths higher than a PRV
//! accountant reports for the same run.

mod rdp;
mod report;

pub use rdp::{rdp_single, rdp_subsampled_gaussian};
pub use report::{
    compose_phases, BudgetAllocation, Composition, Mechanism, PhaseReport, PhaseSpend, PrivacyReport,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier written into every privacy report.
pub const ACCOUNTANT_ID: &str = "rdp-subsampled-gaussian-v1";

/// Lower end of the noise-multiplier search range. Returned (with a
/// warning) when the target ε is infinite.
pub const SIGMA_SEARCH_MIN: f64 = 1e-2;
/// Upper end of the noise-multiplier search range.
pub const SIGMA_SEARCH_MAX: f64 = 1e4;

/// Cap checks allow this much relative slack, since ledgers split into
/// several records sum the same RDP in a different order than calibration.
const CAP_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountantError {
    #[error("invalid privacy budget: {0}")]
    InvalidBudget(String),
    #[error("invalid mechanism parameters: {0}")]
    InvalidMechanism(String),
    #[error("privacy budget exhausted: next step would spend ε={would_spend:.4} > cap ε={cap:.4}")]
    BudgetExhausted { would_spend: f64, cap: f64 },
    #[error("target ε={target} at δ={delta} is infeasible for σ ≤ {max_sigma} ({steps} steps at q={q})")]
    Infeasible {
        target: f64,
        delta: f64,
        q: f64,
        steps: u64,
        max_sigma: f64,
    },
    #[error("RDP composition needs a mechanism record for phase `{0}`")]
    MissingMechanism(String),
}

pub type Result<T> = std::result::Result<T, AccountantError>;

/// An `(ε, δ)` target. `ε` may be `+∞` to mean "no privacy requirement".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(AccountantError::InvalidBudget(format!(
                "epsilon must be > 0, got {epsilon}"
            )));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(AccountantError::InvalidBudget(format!(
                "delta must lie in (0, 1), got {delta}"
            )));
        }
        Ok(Self { epsilon, delta })
    }
}

/// `δ = 1/(10N)`, the usual choice for a dataset of `n` records.
pub fn default_delta(n: usize) -> f64 {
    1.0 / (10.0 * n as f64)
}

/// RDP orders: 1.25, 1.5, 1.75, then 2 to 64 in steps of 0.5, then every
/// integer up to 256.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5, 1.75];
    orders.extend((4..=128).map(|k| k as f64 * 0.5));
    orders.extend((65..=256).map(|k| k as f64));
    orders
}

/// Smallest ε over the order grid, and the order that achieved it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonAt {
    pub epsilon: f64,
    pub order: Option<f64>,
}

/// Converts per-order RDP to `(ε, δ)`.
pub fn rdp_to_epsilon(orders: &[f64], rdp: &[f64], delta: f64) -> EpsilonAt {
    let ln_delta = delta.ln();
    let mut best = EpsilonAt {
        epsilon: f64::INFINITY,
        order: None,
    };
    for (&alpha, &r) in orders.iter().zip(rdp) {
        if alpha <= 1.0 || !r.is_finite() {
            continue;
        }
        let eps = r + ((alpha - 1.0) / alpha).ln() - (ln_delta + alpha.ln()) / (alpha - 1.0);
        let eps = eps.max(0.0);
        if eps < best.epsilon {
            best = EpsilonAt {
                epsilon: eps,
                order: Some(alpha),
            };
        }
    }
    best
}

/// One ledger entry: `steps` DPSGD steps of phase `phase` at `(q, σ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub phase: String,
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    #[serde(skip)]
    per_step: Vec<f64>,
}

impl LedgerRecord {
    fn rdp_into(&self, acc: &mut [f64]) {
        let steps = self.steps as f64;
        for (a, r) in acc.iter_mut().zip(&self.per_step) {
            *a += steps * r;
        }
    }
}

/// Accumulated privacy spend over DPSGD steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Accountant {
    orders: Vec<f64>,
    records: Vec<LedgerRecord>,
    cap: Option<PrivacyBudget>,
}

impl Default for Accountant {
    fn default() -> Self {
        Self::new()
    }
}

impl Accountant {
    pub fn new() -> Self {
        Self::with_orders(default_orders())
    }

    pub fn with_orders(orders: Vec<f64>) -> Self {
        Self {
            orders,
            records: Vec::new(),
            cap: None,
        }
    }

    /// Refuse any charge that would push ε (at the cap's δ) past the cap.
    pub fn with_cap(mut self, cap: PrivacyBudget) -> Self {
        self.cap = Some(cap);
        self
    }

    pub fn cap(&self) -> Option<PrivacyBudget> {
        self.cap
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn total_steps(&self) -> u64 {
        self.records.iter().map(|r| r.steps).sum()
    }

    /// Accumulated RDP per order.
    pub fn rdp(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.orders.len()];
        for r in &self.records {
            r.rdp_into(&mut acc);
        }
        acc
    }

    /// Records `steps` steps of the subsampled Gaussian at `(q, σ)`.
    ///
    /// Steps with the same `(phase, q, σ)` merge into one record, so
    /// charging `a` then `b` steps leaves exactly the state of charging `a + b`.
    pub fn charge(&mut self, phase: &str, q: f64, sigma: f64, steps: u64) -> Result<()> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(AccountantError::InvalidMechanism(format!(
                "sampling rate must lie in (0, 1], got {q}"
            )));
        }
        if !(sigma >= 0.0) {
            return Err(AccountantError::InvalidMechanism(format!(
                "noise multiplier must be ≥ 0, got {sigma}"
            )));
        }
        let pos = self
            .records
            .iter()
            .position(|r| r.phase == phase && r.q == q && r.sigma == sigma);
        let mut next = self.clone();
        match pos {
            Some(i) => next.records[i].steps += steps,
            None => next.records.push(LedgerRecord {
                phase: phase.to_string(),
                q,
                sigma,
                steps,
                per_step: rdp_subsampled_gaussian(q, sigma, 1, &self.orders),
            }),
        }
        if let Some(cap) = self.cap {
            let spent = next.epsilon(cap.delta).epsilon;
            if spent > cap.epsilon * (1.0 + CAP_SLACK) {
                return Err(AccountantError::BudgetExhausted {
                    would_spend: spent,
                    cap: cap.epsilon,
                });
            }
        }
        *self = next;
        Ok(())
    }

    /// ε at `δ`, minimised over the order grid. An empty ledger spends 0.
    pub fn epsilon(&self, delta: f64) -> EpsilonAt {
        if self.records.iter().all(|r| r.steps == 0) {
            return EpsilonAt {
                epsilon: 0.0,
                order: None,
            };
        }
        rdp_to_epsilon(&self.orders, &self.rdp(), delta)
    }

    /// ε at `δ` of a single phase's records.
    pub fn phase_epsilon(&self, phase: &str, delta: f64) -> EpsilonAt {
        let mut only = Accountant::with_orders(self.orders.clone());
        only.records = self
            .records
            .iter()
            .filter(|r| r.phase == phase)
            .cloned()
            .collect();
        only.epsilon(delta)
    }

    /// Builds the JSON-ready report for this ledger at `δ`.
    pub fn report(&self, delta: f64) -> PrivacyReport {
        let total = self.epsilon(delta);
        let per_phase = self
            .records
            .iter()
            .map(|r| {
                let mut single = Accountant::with_orders(self.orders.clone());
                single.records.push(r.clone());
                PhaseReport {
                    name: r.phase.clone(),
                    q: r.q,
                    sigma: r.sigma,
                    steps: r.steps,
                    epsilon_at_delta: single.epsilon(delta).epsilon,
                }
            })
            .collect();
        PrivacyReport {
            total_epsilon: total.epsilon,
            delta,
            per_phase,
            order_used: total.order,
            accountant: ACCOUNTANT_ID.to_string(),
        }
    }
}

/// ε after `steps` steps at `(q, σ)` and the given δ.
pub fn epsilon_for(q: f64, sigma: f64, steps: u64, delta: f64) -> EpsilonAt {
    let orders = default_orders();
    if steps == 0 {
        return EpsilonAt {
            epsilon: 0.0,
            order: None,
        };
    }
    rdp_to_epsilon(&orders, &rdp_subsampled_gaussian(q, sigma, steps, &orders), delta)
}

/// Result of noise calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub sigma: f64,
    pub epsilon: f64,
    /// The search hit its lower bound; the target did not constrain σ.
    pub saturated: bool,
}

/// Smallest noise multiplier (to bisection tolerance) whose spend after
/// `steps` steps at rate `q` stays within `target`.
pub fn calibrate_sigma(target: PrivacyBudget, q: f64, steps: u64) -> Result<Calibration> {
    calibrate_shared_sigma(target, &[(q, steps)])
}

/// ε at `δ` for several `(q, steps)` mechanisms sharing one `σ`.
pub fn shared_epsilon(phases: &[(f64, u64)], sigma: f64, delta: f64) -> EpsilonAt {
    let orders = default_orders();
    let mut rdp = vec![0.0; orders.len()];
    let mut any = false;
    for &(q, steps) in phases {
        if steps == 0 {
            continue;
        }
        any = true;
        for (a, r) in rdp.iter_mut().zip(rdp_subsampled_gaussian(q, sigma, steps, &orders)) {
            *a += r;
        }
    }
    if !any {
        return EpsilonAt {
            epsilon: 0.0,
            order: None,
        };
    }
    rdp_to_epsilon(&orders, &rdp, delta)
}

/// Calibrates one noise multiplier for phases that share it, so that the
/// RDP-composed spend of all of them stays within `target`.
pub fn calibrate_shared_sigma(target: PrivacyBudget, phases: &[(f64, u64)]) -> Result<Calibration> {
    for &(q, _) in phases {
        if !(q > 0.0 && q <= 1.0) {
            return Err(AccountantError::InvalidMechanism(format!(
                "sampling rate must lie in (0, 1], got {q}"
            )));
        }
    }
    let eps_at = |sigma: f64| shared_epsilon(phases, sigma, target.delta).epsilon;
    if target.epsilon.is_infinite() || eps_at(SIGMA_SEARCH_MIN) <= target.epsilon {
        log::warn!(
            "target ε={} does not constrain the noise; returning σ={SIGMA_SEARCH_MIN}",
            target.epsilon
        );
        return Ok(Calibration {
            sigma: SIGMA_SEARCH_MIN,
            epsilon: eps_at(SIGMA_SEARCH_MIN),
            saturated: true,
        });
    }
    if eps_at(SIGMA_SEARCH_MAX) > target.epsilon {
        return Err(AccountantError::Infeasible {
            target: target.epsilon,
            delta: target.delta,
            q: phases.iter().map(|p| p.0).fold(0.0, f64::max),
            steps: phases.iter().map(|p| p.1).sum(),
            max_sigma: SIGMA_SEARCH_MAX,
        });
    }
    // invariant: eps(lo) > target >= eps(hi); bisect in log σ
    let (mut lo, mut hi) = (SIGMA_SEARCH_MIN, SIGMA_SEARCH_MAX);
    while hi / lo > 1.0 + 1e-7 {
        let mid = (lo * hi).sqrt();
        if eps_at(mid) <= target.epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Calibration {
        sigma: hi,
        epsilon: eps_at(hi),
        saturated: false,
    })
}
