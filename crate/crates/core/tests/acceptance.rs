//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit on
//! any failure.

mod common;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::grad::{model_suite, op_suite};
use common::{convert, quadrature_rdp, rng, small_data, small_model};
use dpcompress::accountant::{
    default_delta, default_orders, epsilon_for, rdp_single, Accountant, ACCOUNTANT_ID,
};
use dpcompress::compress::{
    dpkd, structured_dpimp, unstructured_dpimp, DpkdConfig, ImpConfig, ImpTarget, KdConfig,
    DPIMP_PHASE,
};
use dpcompress::dp::{
    clip_in_place, l2_norm, noisy_aggregate, seeded_stream, DpSgdConfig, DpTrainer, GradientBatch,
    HardLabels,
};
use dpcompress::harness::{
    pretrain_teacher, run_with, DataSource, FinetuneInit, PipelineConfig, PipelineKind,
    PreparedData, Preset,
};
use dpcompress::accountant::PrivacyBudget;
use dpcompress::model::{InitKind, LayerChoice, LayeredClassifier};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut results = op_suite(100);
    results.extend(model_suite(300));
    let secs = t.elapsed().as_secs_f64();
    let (worst_name, worst) = results
        .iter()
        .fold(("", 0.0f64), |acc, (n, e)| if *e > acc.1 { (n, *e) } else { acc });
    let bad: Vec<String> = results
        .iter()
        .filter(|(_, e)| *e >= 1e-4)
        .map(|(n, e)| format!("{n}={e:.2e}"))
        .collect();
    outcome(
        bad.is_empty() && secs < 30.0,
        format!(
            "{} checks, worst {worst_name} {worst:.2e}, {secs:.1}s{}",
            results.len(),
            if bad.is_empty() { String::new() } else { format!(", failing: {}", bad.join(" ")) }
        ),
    )
}

fn clipping() -> Outcome {
    let mut g = rng(2);
    let mut violations = 0;
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let dim = g.random_range(1..200);
        let scale = 10f64.powf(g.random_range(-6.0..6.0));
        let c = 10f64.powf(g.random_range(-3.0..3.0));
        let mut v: Vec<f64> = (0..dim).map(|_| scale * (2.0 * g.random::<f64>() - 1.0)).collect();
        clip_in_place(&mut v, c);
        let n = l2_norm(&v);
        worst = worst.max(n - c);
        if n > c + 1e-12 {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("10000 gradients, {violations} violations, max excess {worst:.2e}"))
}

fn noise() -> Outcome {
    let n = 100_000;
    let mut r = seeded_stream(17, 1);
    let v = noisy_aggregate(&GradientBatch { grads: vec![] }, n, 1.0, 1.0, 1.0, &mut r);
    let nf = n as f64;
    let mean = v.iter().sum::<f64>() / nf;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let mean_band = 5.0 / nf.sqrt();
    let var_band = 5.0 * (2.0 / (nf - 1.0)).sqrt();
    outcome(
        mean.abs() < mean_band && (var - 1.0).abs() < var_band,
        format!("mean {mean:.5} (band ±{mean_band:.5}), variance {var:.5} (band 1±{var_band:.5})"),
    )
}

fn accountant_anchor() -> Outcome {
    let orders = default_orders();
    let closed: Vec<f64> = orders.iter().map(|a| a / 2.0).collect();
    let want = convert(&orders, &closed, 1e-5);
    let got = epsilon_for(1.0, 1.0, 1, 1e-5).epsilon;
    let pure = ((got - want) / want).abs();

    let single: Vec<f64> = orders.iter().map(|&a| quadrature_rdp(0.01, 1.0, a, 100_000)).collect();
    let worst = orders
        .iter()
        .zip(&single)
        .map(|(&a, o)| ((rdp_single(0.01, 1.0, a) - o) / o).abs())
        .fold(0.0, f64::max);
    let oracle_rdp: Vec<f64> = single.iter().map(|r| 1000.0 * r).collect();
    let e_oracle = convert(&orders, &oracle_rdp, 1e-5);
    let e_lib = epsilon_for(0.01, 1.0, 1000, 1e-5).epsilon;
    let e_rel = ((e_lib - e_oracle) / e_oracle).abs();
    outcome(
        pure < 1e-6 && worst < 1e-3 && e_rel < 1e-3,
        format!(
            "pure ε {got:.6} vs {want:.6} (rel {pure:.1e}); subsampled worst per-order rel {worst:.1e}, ε {e_lib:.4} vs {e_oracle:.4} (rel {e_rel:.1e})"
        ),
    )
}

fn large_dataset_config() -> Outcome {
    let t = Instant::now();
    let n = 393_000usize;
    let q = 1024.0 / n as f64;
    let steps = (75.0 * n as f64 / 1024.0).round() as u64;
    let mut acct = Accountant::new();
    acct.charge("finetune", q, 0.841, steps).unwrap();
    let report = acct.report(default_delta(n));
    let secs = t.elapsed().as_secs_f64();
    let e = report.total_epsilon;
    outcome(
        (3.0..=6.0).contains(&e) && report.accountant == ACCOUNTANT_ID && secs < 5.0,
        format!("ε = {e:.4} over {steps} steps, accountant `{}`, {secs:.2}s", report.accountant),
    )
}

fn dp(seed: u64, sigma: f64) -> DpSgdConfig {
    DpSgdConfig {
        clip_norm: 1.0,
        noise_multiplier: sigma,
        learning_rate: 0.2,
        expected_batch_size: 32,
        seed,
        ..Default::default()
    }
}

fn reductions() -> Outcome {
    let data = small_data(300, 1);
    let loss = HardLabels(&data.labels);

    // DPSGD(σ=0, C=∞) ≡ SGD
    let cfg = DpSgdConfig {
        clip_norm: f64::INFINITY,
        ..dp(5, 0.0)
    };
    let mut a = small_model(3, 3);
    let mut b = a.clone();
    let mut ta = DpTrainer::new(cfg, data.len(), "x").unwrap();
    let mut tb = DpTrainer::new(cfg, data.len(), "x").unwrap();
    let mut acct = Accountant::new();
    for _ in 0..10 {
        ta.step(&mut a, &data.features, &loss, &mut acct).unwrap();
        tb.sgd_step(&mut b, &data.features, &loss).unwrap();
    }
    let sgd = a.same_weights(&b);

    // dpkd(λ=0) ≡ fine-tuning the initialised student
    let teacher = small_model(4, 7);
    let kd_cfg = DpkdConfig {
        keep_blocks: 2,
        layer_choice: LayerChoice::Even,
        kd: KdConfig {
            lambda: 0.0,
            temperature: 2.0,
        },
        teacher_dp: dp(11, 1.0),
        student_dp: dp(12, 1.0),
        teacher_steps: 6,
        student_steps: 10,
        budget: PrivacyBudget::new(8.0, 1e-5).unwrap(),
        student_hidden: None,
    };
    let mut kd_ok = true;
    for init in [InitKind::Random, InitKind::ZeroshotPt, InitKind::ZeroshotFt] {
        let out = dpkd(&teacher, init, 99, &data, &kd_cfg).unwrap();
        let mut reference = out.student_init.clone();
        DpTrainer::new(out.student_dp, data.len(), "finetune")
            .unwrap()
            .run(10, &mut reference, &data.features, &loss, &mut Accountant::new())
            .unwrap();
        kd_ok &= out.student.same_weights(&reference);
    }

    // structured_dpimp(L=0) ≡ fine-tuning
    let model = small_model(3, 1);
    let imp = ImpConfig {
        alpha: 10.0,
        n_iters: 4,
        m_iters: 12,
        target: ImpTarget::DropBlocks(0),
    };
    let d = dp(21, 0.9);
    let out = structured_dpimp(&model, &imp, &d, &data, &mut Accountant::new(), &mut |_, _| {}).unwrap();
    let mut reference = model.clone();
    DpTrainer::new(d, data.len(), DPIMP_PHASE)
        .unwrap()
        .run(12, &mut reference, &data.features, &loss, &mut Accountant::new())
        .unwrap();
    let imp_ok = out.model.same_weights(&reference);

    outcome(
        sgd && kd_ok && imp_ok,
        format!("dpsgd≡sgd {sgd}, dpkd(λ=0)≡finetune {kd_ok}, structured(L=0)≡finetune {imp_ok}"),
    )
}

fn sparsity_and_reset() -> Outcome {
    let data = small_data(300, 4);
    let original = small_model(4, 2);
    let total = original.prunable_count();
    let cfg = ImpConfig {
        alpha: 10.0,
        n_iters: 4,
        m_iters: 6,
        target: ImpTarget::Sparsity(50.0),
    };
    let mut resets_exact = true;
    let mut rounds = 0;
    let out = unstructured_dpimp(
        &original,
        &cfg,
        &dp(8, 1.0),
        &data,
        &mut Accountant::new(),
        &mut |_, m, mask| {
            rounds += 1;
            let keep = mask.flat();
            let now: Vec<f64> = m.prunable().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
            let orig: Vec<f64> =
                original.prunable().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
            for ((k, a), b) in keep.iter().zip(&now).zip(&orig) {
                let want = if *k { b.to_bits() } else { 0.0f64.to_bits() };
                resets_exact &= a.to_bits() == want;
            }
            for (info, (a, b)) in m.registry().iter().zip(m.params().iter().zip(original.params())) {
                if !info.prunable {
                    resets_exact &= a.data() == b.data();
                }
            }
        },
    )
    .unwrap();
    let pruned = out.masks.last().map_or(0, |m| m.pruned());
    let zeros = (out.model.sparsity() * total as f64).round() as i64;
    let half = (total / 2) as i64;
    let sparsity_ok = (pruned as i64 - half).abs() <= 1 && (zeros - half).abs() <= 1;
    outcome(
        rounds == 5 && cfg.rounds() == 5 && sparsity_ok && resets_exact,
        format!(
            "{rounds} rounds, {pruned}/{total} pruned ({zeros} zero after final tune), resets bit-exact {resets_exact}"
        ),
    )
}

fn brute_force_counts(m: &LayeredClassifier, alpha: f64) -> Vec<usize> {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (b, block) in m.blocks.iter().enumerate() {
        for t in [&block.w1, &block.w2] {
            for v in t.data() {
                all.push((v.abs(), all.len(), b));
            }
        }
    }
    all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let k = ((alpha / 100.0 * all.len() as f64).round() as usize).max(1);
    let mut counts = vec![0; m.depth()];
    for &(_, _, b) in &all[..k] {
        counts[b] += 1;
    }
    counts
}

fn structured_heuristic() -> Outcome {
    let data = small_data(300, 5);
    let mut model = small_model(6, 6);
    let small = 4;
    let b = &mut model.blocks[small];
    for t in [&mut b.w1, &mut b.w2] {
        for v in t.data_mut() {
            *v *= 1e-3;
        }
    }
    let cfg = ImpConfig {
        alpha: 10.0,
        n_iters: 3,
        m_iters: 3,
        target: ImpTarget::DropBlocks(3),
    };
    let mut matches = 0;
    let mut decisions = 0;
    let out = structured_dpimp(&model, &cfg, &dp(3, 0.7), &data, &mut Accountant::new(), &mut |m, d| {
        decisions += 1;
        let counts = brute_force_counts(m, cfg.alpha);
        let best = (0..counts.len()).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
        if counts == d.counts && best == d.dropped {
            matches += 1;
        }
    })
    .unwrap();
    let first = out.decisions[0].origin;
    outcome(
        first == small && matches == decisions && decisions == 3,
        format!("first dropped block {first} (small block {small}), {matches}/{decisions} decisions match brute force"),
    )
}

fn ordering_config(seed: u64) -> PipelineConfig {
    let mut c = PipelineConfig::canonical(PipelineKind::Finetune, seed);
    c.epochs = 3.0;
    c.privacy.preset = Some(Preset::Eps4);
    c.privacy.epsilon = None;
    c.pretrain.epochs = 20;
    c.data = DataSource::Synthetic {
        classes: 3,
        n_train: 4096,
        n_public: 8192,
        n_test: 2048,
        d_in: 32,
        separation: 5.0,
        clusters_per_class: 8,
        data_seed: seed,
        public_shift: 0.5,
    };
    c
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ordering() -> Outcome {
    let t = Instant::now();
    let labels = ["teacher", "dpimp-u", "zs-ft", "zs-kd", "rand-ft", "rand-kd"];
    let mut acc: Vec<Vec<f64>> = vec![Vec::new(); labels.len()];
    let mut n_test = 0;
    for seed in 0..5 {
        let base = ordering_config(seed);
        let data = PreparedData::from_config(&base.data).unwrap();
        n_test = data.test.len();
        let pretrained = pretrain_teacher(&base, &data).unwrap();
        let mut cfgs = Vec::new();
        cfgs.push(base.clone());
        let mut c = base.clone();
        c.pipeline = PipelineKind::DpimpUnstructured;
        cfgs.push(c);
        let mut c = base.clone();
        c.finetune.init = FinetuneInit::ZeroshotPt;
        cfgs.push(c);
        let mut c = base.clone();
        c.pipeline = PipelineKind::Dpkd;
        c.kd.init = InitKind::ZeroshotPt;
        cfgs.push(c);
        let mut c = base.clone();
        c.finetune.init = FinetuneInit::Random;
        cfgs.push(c);
        let mut c = base.clone();
        c.pipeline = PipelineKind::Dpkd;
        c.kd.init = InitKind::Random;
        cfgs.push(c);
        for (i, c) in cfgs.iter().enumerate() {
            let art = run_with(c, &data, &pretrained).unwrap();
            assert!(art.privacy.total_epsilon <= 4.0 * (1.0 + 1e-9));
            acc[i].push(art.metrics.eval_accuracy);
        }
    }
    let med: Vec<f64> = acc.iter().map(|v| median(v.clone())).collect();
    let [teacher, imp, zs_ft, zs_kd, rand_ft, rand_kd] = med[..] else {
        unreachable!()
    };
    let noise = 1.96 * (2.0 * 0.25 / n_test as f64).sqrt();
    let chain = teacher >= imp
        && imp >= zs_ft.max(zs_kd)
        && zs_ft.min(zs_kd) >= rand_ft.max(rand_kd);
    let kd_gap = rand_kd - rand_ft;
    let secs = t.elapsed().as_secs_f64();
    let medians: Vec<String> = labels.iter().zip(&med).map(|(l, m)| format!("{l} {m:.4}")).collect();
    outcome(
        chain && kd_gap <= noise && secs < 600.0,
        format!(
            "medians: {}; rand-kd − rand-ft = {kd_gap:+.4} (noise {noise:.4}); {secs:.0}s",
            medians.join(", ")
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = Vec::new();
    for (cmd, kind) in [
        ("finetune", PipelineKind::Finetune),
        ("dpkd", PipelineKind::Dpkd),
        ("dpimp-structured", PipelineKind::DpimpStructured),
        ("dpimp-unstructured", PipelineKind::DpimpUnstructured),
    ] {
        let mut c = PipelineConfig::canonical(kind, 0);
        c.name = cmd.into();
        c.epochs = 1.0;
        c.model.hidden = 16;
        c.model.blocks = 4;
        c.pretrain.epochs = 2;
        if let DataSource::Synthetic { n_train, n_public, n_test, d_in, .. } = &mut c.data {
            (*n_train, *n_public, *n_test, *d_in) = (512, 256, 256, 8);
        }
        let cfg = dir.path().join(format!("{cmd}.toml"));
        std::fs::write(&cfg, c.to_toml()).unwrap();
        for out in ["a", "b"] {
            let st = Command::new(env!("CARGO_BIN_EXE_dpcompress"))
                .args([cmd, "--seed", "42", "--config"])
                .arg(&cfg)
                .arg("--out-dir")
                .arg(dir.path().join(out))
                .output()
                .unwrap();
            if !st.status.success() {
                bad.push(format!("{cmd}: {}", String::from_utf8_lossy(&st.stderr).trim()));
            }
        }
        let same = |f: &str| {
            let read = |o: &str| std::fs::read(Path::new(&dir.path().join(o).join(cmd)).join(f)).ok();
            read("a").is_some() && read("a") == read("b")
        };
        for f in ["checkpoint.json", "privacy.json", "metrics.json"] {
            if !same(f) {
                bad.push(format!("{cmd}/{f}"));
            }
        }
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            "4 training subcommands, checkpoints and reports bit-identical".into()
        } else {
            format!("mismatch: {}", bad.join("; "))
        },
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradients),
        ("clipping invariant", clipping),
        ("noise statistics", noise),
        ("accountant anchor", accountant_anchor),
        ("large-dataset accounting", large_dataset_config),
        ("reductions", reductions),
        ("sparsity and reset exactness", sparsity_and_reset),
        ("structured heuristic", structured_heuristic),
        ("qualitative ordering", ordering),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} criterion {}: {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
