//! Private iterative magnitude pruning to 50% sparsity, resetting the
//! survivors to their pre-trained values after every round.

use dpcompress::accountant::{calibrate_sigma, Accountant, PrivacyBudget};
use dpcompress::compress::{unstructured_dpimp, ImpConfig, ImpTarget};
use dpcompress::dp::{train_sgd_batched, DpSgdConfig};
use dpcompress::harness::{evaluate, SyntheticSpec};
use dpcompress::model::{LayeredClassifier, ModelDims};

fn main() {
    let spec = SyntheticSpec {
        classes: 3,
        d_in: 16,
        separation: 4.0,
        clusters_per_class: 4,
        seed: 4,
    };
    let public = spec.sample_shifted("public", 2048, 2, 0.5).unwrap();
    let train = spec.sample("train", 2048, 0).unwrap();
    let test = spec.sample("test", 1024, 1).unwrap();
    let dims = ModelDims {
        d_in: 16,
        hidden: 32,
        classes: 3,
    };
    let mut pretrained = LayeredClassifier::random(dims, 4, 1);
    train_sgd_batched(&mut pretrained, &public.features, &public.labels, 0.05, 32, 10, 2).unwrap();

    let cfg = ImpConfig {
        alpha: 10.0,
        n_iters: 6,
        m_iters: 60,
        target: ImpTarget::Sparsity(50.0),
    };
    let budget = PrivacyBudget::new(4.0, train.default_delta()).unwrap();
    let mut dp = DpSgdConfig {
        learning_rate: 0.5,
        expected_batch_size: 64,
        seed: 3,
        ..Default::default()
    };
    dp.noise_multiplier = calibrate_sigma(budget, dp.sample_rate(train.len()), cfg.total_steps())
        .unwrap()
        .sigma;
    let mut acct = Accountant::new().with_cap(budget);
    let out = unstructured_dpimp(&pretrained, &cfg, &dp, &train, &mut acct, &mut |round, m, mask| {
        println!(
            "round {round}: {} of {} prunable weights pruned ({:.1}%), reset accuracy {:.4}",
            mask.pruned(),
            mask.len(),
            100.0 * mask.sparsity(),
            evaluate(m, &test).unwrap()
        );
    })
    .unwrap();
    println!(
        "{}: sparsity {:.1}%, test accuracy {:.4}, ε = {:.4} over {} steps",
        out.label,
        100.0 * out.model.sparsity(),
        evaluate(&out.model, &test).unwrap(),
        acct.epsilon(budget.delta).epsilon,
        out.steps
    );
}
