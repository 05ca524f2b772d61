mod common;

use common::{small_data, small_model};
use dpcompress::accountant::{Accountant, PrivacyBudget};
use dpcompress::compress::{
    dpkd, structured_dpimp, unstructured_dpimp, DpkdConfig, ImpConfig, ImpTarget, KdConfig,
    DPIMP_PHASE,
};
use dpcompress::dp::{DpSgdConfig, DpTrainer, HardLabels};
use dpcompress::harness::{
    pretrain_teacher, run_with, DataSource, FinetuneInit, PipelineConfig, PipelineKind,
    PreparedData,
};
use dpcompress::model::{InitKind, LayerChoice, LayeredClassifier, PruneMask};

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

#[test]
fn dpsgd_without_noise_or_clipping_is_sgd() {
    let data = small_data(200, 1);
    let cfg = DpSgdConfig {
        clip_norm: f64::INFINITY,
        noise_multiplier: 0.0,
        ..dp(5, 0.0)
    };
    let mut a = small_model(2, 3);
    let mut b = a.clone();
    let mut ta = DpTrainer::new(cfg, data.len(), "x").unwrap();
    let mut tb = DpTrainer::new(cfg, data.len(), "x").unwrap();
    let mut acct = Accountant::new();
    let loss = HardLabels(&data.labels);
    for _ in 0..8 {
        ta.step(&mut a, &data.features, &loss, &mut acct).unwrap();
        tb.sgd_step(&mut b, &data.features, &loss).unwrap();
    }
    assert!(a.same_weights(&b));
    assert!(!a.same_weights(&small_model(2, 3)));
}

#[test]
fn distillation_without_soft_term_is_plain_finetuning() {
    let data = small_data(300, 2);
    let teacher = small_model(4, 7);
    let cfg = DpkdConfig {
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
    for init in [InitKind::Random, InitKind::ZeroshotPt, InitKind::ZeroshotFt] {
        let out = dpkd(&teacher, init, 99, &data, &cfg).unwrap();
        let mut reference = out.student_init.clone();
        let mut acct = Accountant::new();
        DpTrainer::new(out.student_dp, data.len(), "finetune")
            .unwrap()
            .run(10, &mut reference, &data.features, &HardLabels(&data.labels), &mut acct)
            .unwrap();
        assert!(out.student.same_weights(&reference), "{init:?}");
    }
}

#[test]
fn distillation_without_soft_term_matches_finetune_run() {
    let mut base = PipelineConfig::canonical(PipelineKind::Finetune, 4);
    base.epochs = 1.0;
    base.model.hidden = 8;
    base.model.blocks = 4;
    base.pretrain.epochs = 1;
    base.dp.expected_batch_size = 32;
    base.data = DataSource::Synthetic {
        classes: 3,
        n_train: 256,
        n_public: 128,
        n_test: 64,
        d_in: 6,
        separation: 3.0,
        clusters_per_class: 1,
        data_seed: 1,
        public_shift: 0.0,
    };
    let data = PreparedData::from_config(&base.data).unwrap();
    let pretrained = pretrain_teacher(&base, &data).unwrap();

    let mut ft = base.clone();
    ft.finetune.init = FinetuneInit::ZeroshotPt;
    let mut kd = base.clone();
    kd.pipeline = PipelineKind::Dpkd;
    kd.kd.lambda = 0.0;
    kd.kd.teacher_fraction = 0.0;
    kd.kd.init = InitKind::ZeroshotPt;

    let a = run_with(&ft, &data, &pretrained).unwrap();
    let b = run_with(&kd, &data, &pretrained).unwrap();
    assert!(a.model.same_weights(&b.model));
    assert_eq!(a.privacy.total_epsilon, b.privacy.total_epsilon);
    assert_eq!(a.metrics.eval_accuracy, b.metrics.eval_accuracy);
}

#[test]
fn structured_pruning_with_no_drops_is_plain_finetuning() {
    let data = small_data(200, 3);
    let model = small_model(3, 1);
    let cfg = ImpConfig {
        alpha: 10.0,
        n_iters: 4,
        m_iters: 12,
        target: ImpTarget::DropBlocks(0),
    };
    let d = dp(21, 0.9);
    let mut acct = Accountant::new();
    let out = structured_dpimp(&model, &cfg, &d, &data, &mut acct, &mut |_, _| {}).unwrap();

    let mut reference = model.clone();
    let mut acct2 = Accountant::new();
    DpTrainer::new(d, data.len(), DPIMP_PHASE)
        .unwrap()
        .run(12, &mut reference, &data.features, &HardLabels(&data.labels), &mut acct2)
        .unwrap();
    assert!(out.decisions.is_empty());
    assert_eq!(out.steps, 12);
    assert!(out.model.same_weights(&reference));
    assert_eq!(acct.epsilon(1e-5), acct2.epsilon(1e-5));
}

fn assert_reset_exact(original: &LayeredClassifier, m: &LayeredClassifier, mask: &PruneMask) {
    let keep = mask.flat();
    let mut off = 0;
    for ((_, now), (_, orig)) in m.prunable().iter().zip(original.prunable()) {
        for (j, (a, b)) in now.data().iter().zip(orig.data()).enumerate() {
            if keep[off + j] {
                assert_eq!(a.to_bits(), b.to_bits());
            } else {
                assert_eq!(a.to_bits(), 0.0f64.to_bits());
            }
        }
        off += now.numel();
    }
    let (a, b) = (m.params(), original.params());
    let prunable: Vec<bool> = m.registry().iter().map(|r| r.prunable).collect();
    for ((x, y), p) in a.iter().zip(b).zip(prunable) {
        if !p {
            assert_eq!(x.data(), y.data(), "non-prunable parameter changed by reset");
        }
    }
}

#[test]
fn unstructured_rounds_reset_and_sparsity() {
    let data = small_data(200, 4);
    let original = small_model(3, 2);
    let total = original.prunable_count();
    let cfg = ImpConfig {
        alpha: 10.0,
        n_iters: 3,
        m_iters: 5,
        target: ImpTarget::Sparsity(50.0),
    };
    let mut acct = Accountant::new();
    let mut seen = Vec::new();
    let out = unstructured_dpimp(
        &original,
        &cfg,
        &dp(8, 1.0),
        &data,
        &mut acct,
        &mut |round, m, mask| {
            assert_reset_exact(&original, m, mask);
            seen.push((round, mask.clone()));
        },
    )
    .unwrap();
    assert_eq!(seen.len(), 5);
    assert_eq!(out.masks.len(), 5);
    for w in out.masks.windows(2) {
        assert!(w[0].is_subset_of_pruned(&w[1]));
    }
    let last = out.masks.last().unwrap();
    assert!((last.pruned() as i64 - (total / 2) as i64).abs() <= 1);
    assert!((out.model.sparsity() * total as f64 - (total / 2) as f64).abs() <= 1.0);
    assert_eq!(out.steps, 5 * 3 + 5);
    assert_eq!(acct.total_steps(), 20);
    assert_eq!(out.label, "SparseModel(50%)");
    // masked weights stay zero through the final fine-tune
    let keep = last.flat();
    let flat: Vec<f64> = out.model.prunable().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    for (k, v) in keep.iter().zip(flat) {
        if !k {
            assert_eq!(v.to_bits(), 0.0f64.to_bits());
        }
    }
}

/// Recomputes per-block `|W_i ∩ W_min|` from scratch by sorting every
/// prunable weight.
fn brute_force_counts(m: &LayeredClassifier, alpha: f64) -> Vec<usize> {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    let mut idx = 0;
    for (b, block) in m.blocks.iter().enumerate() {
        for t in [&block.w1, &block.w2] {
            for v in t.data() {
                all.push((v.abs(), idx, b));
                idx += 1;
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

#[test]
fn structured_drop_picks_the_small_block_and_matches_brute_force() {
    let data = small_data(200, 5);
    let mut model = small_model(5, 6);
    let b = &mut model.blocks[3];
    for t in [&mut b.w1, &mut b.w2] {
        for v in t.data_mut() {
            *v *= 1e-3;
        }
    }
    let cfg = ImpConfig {
        alpha: 10.0,
        n_iters: 2,
        m_iters: 2,
        target: ImpTarget::DropBlocks(3),
    };
    let mut acct = Accountant::new();
    let mut checked = 0;
    let out = structured_dpimp(&model, &cfg, &dp(3, 0.7), &data, &mut acct, &mut |m, d| {
        let counts = brute_force_counts(m, cfg.alpha);
        assert_eq!(d.counts, counts);
        let best = (0..counts.len()).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
        assert_eq!(d.dropped, best);
        checked += 1;
    })
    .unwrap();
    assert_eq!(checked, 3);
    assert_eq!(out.decisions[0].origin, 3);
    assert_eq!(out.model.depth(), 2);
}

#[test]
fn zero_shot_from_finetuned_teacher_copies_post_step_weights() {
    let data = small_data(200, 6);
    let teacher = small_model(6, 3);
    let cfg = DpkdConfig {
        keep_blocks: 3,
        layer_choice: LayerChoice::Even,
        kd: KdConfig::default(),
        teacher_dp: dp(1, 1.0),
        student_dp: dp(2, 1.0),
        teacher_steps: 5,
        student_steps: 3,
        budget: PrivacyBudget::new(10.0, 1e-5).unwrap(),
        student_hidden: None,
    };
    let out = dpkd(&teacher, InitKind::ZeroshotFt, 0, &data, &cfg).unwrap();
    assert!(!out.teacher.same_weights(&teacher));
    for (j, i) in [0usize, 2, 4].iter().enumerate() {
        assert!(out.student_init.blocks[j].same_weights(&out.teacher.blocks[*i]));
    }
    assert_eq!(out.student_init.head.data(), out.teacher.head.data());
    assert_eq!(out.student_init.input_proj.data(), out.teacher.input_proj.data());

    let pt = dpkd(&teacher, InitKind::ZeroshotPt, 0, &data, &cfg).unwrap();
    for (j, i) in [0usize, 2, 4].iter().enumerate() {
        assert!(pt.student_init.blocks[j].same_weights(&teacher.blocks[*i]));
    }
}

#[test]
fn distillation_stays_within_budget() {
    let data = small_data(300, 7);
    let teacher = small_model(4, 8);
    let cfg = DpkdConfig {
        keep_blocks: 2,
        layer_choice: LayerChoice::Even,
        kd: KdConfig::default(),
        teacher_dp: dp(1, 1.0),
        student_dp: dp(2, 1.0),
        teacher_steps: 10,
        student_steps: 20,
        budget: PrivacyBudget::new(3.0, 1e-5).unwrap(),
        student_hidden: None,
    };
    let out = dpkd(&teacher, InitKind::Random, 5, &data, &cfg).unwrap();
    assert!(out.report.total_epsilon <= 3.0 * (1.0 + 1e-9));
    assert!(out.report.total_epsilon > 2.9);
    assert_eq!(out.allocation.init.epsilon, 0.0);
    assert_eq!(out.accountant.total_steps(), 30);
    let phases: Vec<&str> = out.report.per_phase.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(phases, ["teacher", "distill"]);
}
