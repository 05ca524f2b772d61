//! Private fine-tuning of a publicly pre-trained classifier, with the
//! noise multiplier calibrated to ε = 4.

use dpcompress::accountant::PrivacyBudget;
use dpcompress::compress::private_finetune;
use dpcompress::dp::{train_sgd_batched, DpSgdConfig};
use dpcompress::harness::{evaluate, SyntheticSpec};
use dpcompress::model::{LayeredClassifier, ModelDims};

fn main() {
    let spec = SyntheticSpec {
        classes: 3,
        d_in: 16,
        separation: 4.0,
        clusters_per_class: 4,
        seed: 1,
    };
    let public = spec.sample_shifted("public", 2048, 2, 0.5).unwrap();
    let train = spec.sample("train", 2048, 0).unwrap();
    let test = spec.sample("test", 1024, 1).unwrap();

    let dims = ModelDims {
        d_in: 16,
        hidden: 32,
        classes: 3,
    };
    let mut model = LayeredClassifier::random(dims, 4, 3);
    train_sgd_batched(&mut model, &public.features, &public.labels, 0.05, 32, 10, 4).unwrap();
    println!("pre-trained on shifted public data: test accuracy {:.4}", evaluate(&model, &test).unwrap());

    let dp = DpSgdConfig {
        clip_norm: 1.0,
        noise_multiplier: 1.0,
        learning_rate: 0.5,
        expected_batch_size: 64,
        seed: 5,
        ..Default::default()
    };
    let steps = dp.steps_for_epochs(train.len(), 3.0);
    let budget = PrivacyBudget::new(4.0, train.default_delta()).unwrap();
    let out = private_finetune(&model, &train, &dp, steps, budget).unwrap();
    println!(
        "DPSGD: {steps} steps at q = {:.4}, σ = {:.4}, ε = {:.4} (δ = {:.1e})",
        dp.sample_rate(train.len()),
        out.calibration.sigma,
        out.report.total_epsilon,
        budget.delta
    );
    println!("fine-tuned test accuracy {:.4}", evaluate(&out.model, &test).unwrap());

    let dir = std::env::temp_dir().join("dpcompress-finetune-example.json");
    out.model.save(&dir).unwrap();
    let back = LayeredClassifier::load(&dir).unwrap();
    println!("checkpoint round trip bit-exact: {}", back.same_weights(&out.model));
}
