use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{default_orders, rdp_subsampled_gaussian, rdp_to_epsilon, AccountantError, Result};

/// JSON privacy report for one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    #[serde(with = "inf_as_null")]
    pub total_epsilon: f64,
    pub delta: f64,
    pub per_phase: Vec<PhaseReport>,
    pub order_used: Option<f64>,
    pub accountant: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub name: String,
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    #[serde(with = "inf_as_null")]
    pub epsilon_at_delta: f64,
}

/// JSON has no infinity; an unbounded ε is written as `null`.
mod inf_as_null {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// The mechanism behind a phase's spend, when known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mechanism {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
}

/// One phase's `(ε, δ)` share. Zero-cost phases use `(0, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpend {
    pub name: String,
    pub epsilon: f64,
    pub delta: f64,
    pub mechanism: Option<Mechanism>,
}

impl PhaseSpend {
    pub fn free(name: &str) -> Self {
        Self {
            name: name.to_string(),
            epsilon: 0.0,
            delta: 0.0,
            mechanism: None,
        }
    }

    /// A DPSGD phase whose ε is measured at its δ share.
    pub fn dpsgd(name: &str, q: f64, sigma: f64, steps: u64, delta: f64) -> Self {
        let orders = default_orders();
        let epsilon = if steps == 0 {
            0.0
        } else {
            rdp_to_epsilon(&orders, &rdp_subsampled_gaussian(q, sigma, steps, &orders), delta)
                .epsilon
        };
        Self {
            name: name.to_string(),
            epsilon,
            delta,
            mechanism: Some(Mechanism { q, sigma, steps }),
        }
    }

    fn is_free(&self) -> bool {
        self.epsilon == 0.0 && self.delta == 0.0
    }
}

/// Split of a total budget over the teacher, initialisation and
/// distillation phases of private distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetAllocation {
    pub teacher: PhaseSpend,
    pub init: PhaseSpend,
    pub distill: PhaseSpend,
}

impl BudgetAllocation {
    pub fn phases(&self) -> [&PhaseSpend; 3] {
        [&self.teacher, &self.init, &self.distill]
    }
}

/// How phase spends combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Composition {
    /// `Σε_i, Σδ_i`; always valid, usually loose.
    Basic,
    /// Add the phases' RDP curves and convert once at `Σδ_i`.
    Rdp,
}

/// Composes phase spends into a total `(ε, δ)`, returned as `(ε, δ)`.
pub fn compose_phases(phases: &[&PhaseSpend], rule: Composition) -> Result<(f64, f64)> {
    let delta: f64 = phases.iter().map(|p| p.delta).sum();
    match rule {
        Composition::Basic => Ok((phases.iter().map(|p| p.epsilon).sum(), delta)),
        Composition::Rdp => {
            let orders = default_orders();
            let mut rdp = vec![0.0; orders.len()];
            let mut any = false;
            for p in phases {
                match p.mechanism {
                    Some(m) => {
                        if m.steps > 0 {
                            any = true;
                        }
                        for (a, r) in rdp
                            .iter_mut()
                            .zip(rdp_subsampled_gaussian(m.q, m.sigma, m.steps, &orders))
                        {
                            *a += r;
                        }
                    }
                    None if p.is_free() => {}
                    None => return Err(AccountantError::MissingMechanism(p.name.clone())),
                }
            }
            if !any {
                return Ok((0.0, delta));
            }
            Ok((rdp_to_epsilon(&orders, &rdp, delta).epsilon, delta))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_phase_is_identity() {
        let a = PhaseSpend {
            name: "a".into(),
            epsilon: 1.7,
            delta: 1e-6,
            mechanism: None,
        };
        let (e, d) = compose_phases(&[&a, &PhaseSpend::free("b")], Composition::Basic).unwrap();
        assert_eq!((e, d), (1.7, 1e-6));
    }

    #[test]
    fn basic_composition_adds() {
        let p = |e: f64| PhaseSpend {
            name: "p".into(),
            epsilon: e,
            delta: 1e-6,
            mechanism: None,
        };
        let (e, d) = compose_phases(&[&p(1.0), &p(2.0), &p(1.0)], Composition::Basic).unwrap();
        assert_eq!(e, 4.0);
        assert!((d - 3e-6).abs() < 1e-21);
    }

    #[test]
    fn rdp_needs_mechanisms() {
        let p = PhaseSpend {
            name: "opaque".into(),
            epsilon: 1.0,
            delta: 1e-6,
            mechanism: None,
        };
        assert!(matches!(
            compose_phases(&[&p], Composition::Rdp),
            Err(AccountantError::MissingMechanism(_))
        ));
    }

    #[test]
    fn infinite_epsilon_serialises_as_null() {
        let r = PrivacyReport {
            total_epsilon: f64::INFINITY,
            delta: 1e-5,
            per_phase: vec![],
            order_used: None,
            accountant: "x".into(),
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"total_epsilon\":null"));
        let back: PrivacyReport = serde_json::from_str(&s).unwrap();
        assert!(back.total_epsilon.is_infinite());
    }
}
