//! Privacy budget queries: ε for a training schedule, σ for a target ε,
//! and a shared σ across two phases.

use dpcompress::accountant::{
    calibrate_shared_sigma, calibrate_sigma, compose_phases, default_delta, epsilon_for,
    Accountant, Composition, PhaseSpend, PrivacyBudget,
};

fn main() {
    let n = 50_000;
    let batch = 256;
    let q = batch as f64 / n as f64;
    let delta = default_delta(n);
    let steps_per_epoch = (n / batch) as u64;

    println!("N = {n}, batch {batch}, q = {q:.5}, δ = {delta:.1e}");
    for sigma in [0.6, 0.8, 1.0, 1.5] {
        let row: Vec<String> = [1u64, 5, 20, 50]
            .iter()
            .map(|e| format!("{:>7.3}", epsilon_for(q, sigma, e * steps_per_epoch, delta).epsilon))
            .collect();
        println!("σ = {sigma:<4} ε after 1/5/20/50 epochs: {}", row.join(" "));
    }

    let target = PrivacyBudget::new(3.0, delta).unwrap();
    let steps = 20 * steps_per_epoch;
    let cal = calibrate_sigma(target, q, steps).unwrap();
    println!("\nσ for ε = 3 over 20 epochs: {:.4} (spends ε = {:.4})", cal.sigma, cal.epsilon);

    // teacher for a third of the epochs, student for the rest, one σ
    let phases = [(q, steps / 3), (q, steps - steps / 3)];
    let shared = calibrate_shared_sigma(target, &phases).unwrap();
    let mut acct = Accountant::new().with_cap(target);
    acct.charge("teacher", q, shared.sigma, phases[0].1).unwrap();
    acct.charge("distill", q, shared.sigma, phases[1].1).unwrap();
    let report = acct.report(delta);
    println!("shared σ {:.4}: total ε {:.4}", shared.sigma, report.total_epsilon);
    for p in &report.per_phase {
        println!("  {:<8} {:>5} steps  ε alone {:.4}", p.name, p.steps, p.epsilon_at_delta);
    }
    if acct.charge("distill", q, shared.sigma, 100).is_err() {
        println!("  a further 100 steps would exceed the cap and are refused");
    }

    let a = PhaseSpend::dpsgd("teacher", q, shared.sigma, phases[0].1, delta / 2.0);
    let b = PhaseSpend::dpsgd("distill", q, shared.sigma, phases[1].1, delta / 2.0);
    let (basic, d) = compose_phases(&[&a, &b], Composition::Basic).unwrap();
    let (rdp, _) = compose_phases(&[&a, &b], Composition::Rdp).unwrap();
    println!("\nsame two phases at δ = {d:.1e}: basic composition ε {basic:.4}, RDP composition ε {rdp:.4}");
}
