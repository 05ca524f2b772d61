//! Private layer dropping: each round fine-tunes, then drops the block
//! holding most of the smallest-magnitude weights.

use dpcompress::accountant::{calibrate_sigma, Accountant, PrivacyBudget};
use dpcompress::compress::{structured_dpimp, ImpConfig, ImpTarget};
use dpcompress::dp::{train_sgd_batched, DpSgdConfig};
use dpcompress::harness::{evaluate, SyntheticSpec};
use dpcompress::model::{LayeredClassifier, ModelDims};

fn main() {
    let spec = SyntheticSpec {
        classes: 3,
        d_in: 16,
        separation: 4.0,
        clusters_per_class: 4,
        seed: 3,
    };
    let public = spec.sample_shifted("public", 2048, 2, 0.5).unwrap();
    let train = spec.sample("train", 2048, 0).unwrap();
    let test = spec.sample("test", 1024, 1).unwrap();
    let dims = ModelDims {
        d_in: 16,
        hidden: 32,
        classes: 3,
    };
    let mut teacher = LayeredClassifier::random(dims, 6, 1);
    train_sgd_batched(&mut teacher, &public.features, &public.labels, 0.05, 32, 10, 2).unwrap();
    println!("teacher: {} blocks, test accuracy {:.4}", teacher.depth(), evaluate(&teacher, &test).unwrap());

    let cfg = ImpConfig {
        alpha: 10.0,
        n_iters: 10,
        m_iters: 40,
        target: ImpTarget::DropBlocks(3),
    };
    let budget = PrivacyBudget::new(4.0, train.default_delta()).unwrap();
    let mut dp = DpSgdConfig {
        learning_rate: 0.5,
        expected_batch_size: 64,
        seed: 9,
        ..Default::default()
    };
    dp.noise_multiplier = calibrate_sigma(budget, dp.sample_rate(train.len()), cfg.total_steps())
        .unwrap()
        .sigma;
    let mut acct = Accountant::new().with_cap(budget);
    let out = structured_dpimp(&teacher, &cfg, &dp, &train, &mut acct, &mut |m, d| {
        println!(
            "round {}: |W_min| = {}, per-block counts {:?} → drop position {} (teacher block {}); accuracy before drop {:.4}",
            d.round,
            d.w_min_size,
            d.counts,
            d.dropped,
            d.origin,
            evaluate(m, &test).unwrap()
        );
    })
    .unwrap();
    let kept: Vec<usize> = out.model.blocks.iter().map(|b| b.origin).collect();
    println!(
        "student keeps teacher blocks {kept:?}; test accuracy {:.4}; σ = {:.4}, ε = {:.4} over {} steps",
        evaluate(&out.model, &test).unwrap(),
        dp.noise_multiplier,
        acct.epsilon(budget.delta).epsilon,
        out.steps
    );
}
