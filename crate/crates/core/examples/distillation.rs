//! Private distillation into a half-depth student under each
//! initialisation, against direct private fine-tuning of the same student.

use dpcompress::accountant::PrivacyBudget;
use dpcompress::compress::{dpkd, private_finetune, DpkdConfig, KdConfig};
use dpcompress::dp::{train_sgd_batched, DpSgdConfig};
use dpcompress::harness::{evaluate, SyntheticSpec};
use dpcompress::model::{init_student, InitKind, InitStrategy, LayerChoice, LayeredClassifier, ModelDims};

fn main() {
    let spec = SyntheticSpec {
        classes: 3,
        d_in: 16,
        separation: 4.0,
        clusters_per_class: 4,
        seed: 2,
    };
    let public = spec.sample_shifted("public", 2048, 2, 0.5).unwrap();
    let train = spec.sample("train", 2048, 0).unwrap();
    let test = spec.sample("test", 1024, 1).unwrap();
    let dims = ModelDims {
        d_in: 16,
        hidden: 32,
        classes: 3,
    };
    let mut pretrained = LayeredClassifier::random(dims, 6, 1);
    train_sgd_batched(&mut pretrained, &public.features, &public.labels, 0.05, 32, 10, 2).unwrap();

    let dp = DpSgdConfig {
        learning_rate: 0.5,
        expected_batch_size: 64,
        ..Default::default()
    };
    let budget = PrivacyBudget::new(4.0, train.default_delta()).unwrap();
    let total = dp.steps_for_epochs(train.len(), 3.0);
    let cfg = DpkdConfig {
        keep_blocks: 3,
        layer_choice: LayerChoice::Even,
        kd: KdConfig {
            lambda: 1.0,
            temperature: 2.0,
        },
        teacher_dp: DpSgdConfig { seed: 10, ..dp },
        student_dp: DpSgdConfig { seed: 11, ..dp },
        teacher_steps: total / 3,
        student_steps: total - total / 3,
        budget,
        student_hidden: None,
    };

    println!("{:<13} {:>9} {:>9} {:>8}", "student init", "teacher", "student", "ε");
    for init in [InitKind::Random, InitKind::ZeroshotPt, InitKind::ZeroshotFt] {
        let out = dpkd(&pretrained, init, 7, &train, &cfg).unwrap();
        println!(
            "{:<13} {:>9.4} {:>9.4} {:>8.4}",
            init.label(),
            evaluate(&out.teacher, &test).unwrap(),
            evaluate(&out.student, &test).unwrap(),
            out.report.total_epsilon
        );
    }

    println!("\ndirect private fine-tuning of the student, whole budget:");
    for (label, strategy) in [
        ("random", InitStrategy::Random { seed: 7 }),
        ("zeroshot-pt", InitStrategy::ZeroShotPt(&pretrained)),
    ] {
        let student = init_student(&pretrained, 3, strategy, LayerChoice::Even).unwrap();
        let out = private_finetune(&student, &train, &cfg.student_dp, total, budget).unwrap();
        println!(
            "{:<13} {:>19.4} {:>8.4}",
            label,
            evaluate(&out.model, &test).unwrap(),
            out.report.total_epsilon
        );
    }
}
