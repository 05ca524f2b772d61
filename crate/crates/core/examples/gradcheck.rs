//! Reverse-mode gradients of a small classifier, checked against central
//! differences.

use dpcompress::model::{LayeredClassifier, ModelDims};
use dpcompress::tensor::{Tape, Tensor};

fn loss(model: &LayeredClassifier, x: &Tensor, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let pass = model.forward_on(&mut tape, xv).unwrap();
    let l = tape.cross_entropy(pass.logits, labels).unwrap();
    tape.value(l).item()
}

fn main() {
    let dims = ModelDims {
        d_in: 5,
        hidden: 8,
        classes: 3,
    };
    let model = LayeredClassifier::random(dims, 2, 7);
    let x = Tensor::from_rows(&[
        vec![0.3, -1.2, 0.8, 0.0, 2.0],
        vec![-0.7, 0.4, 1.1, -0.5, 0.2],
    ])
    .unwrap();
    let labels = [2, 0];

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let pass = model.forward_on(&mut tape, xv).unwrap();
    let l = tape.cross_entropy(pass.logits, &labels).unwrap();
    let grads = tape.backward(l).unwrap();
    println!("loss {:.6}, {} parameters", tape.value(l).item(), model.param_count());

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, info) in model.registry().iter().enumerate() {
        let g = grads.get(pass.params[k]).unwrap();
        let mut probe = model.clone();
        let n = g.numel();
        let mut tensor_worst: f64 = 0.0;
        for i in 0..n {
            let orig = probe.params()[k].data()[i];
            probe.params_mut()[k].data_mut()[i] = orig + h;
            let up = loss(&probe, &x, &labels);
            probe.params_mut()[k].data_mut()[i] = orig - h;
            let down = loss(&probe, &x, &labels);
            probe.params_mut()[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = g.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            tensor_worst = tensor_worst.max(rel);
        }
        println!("{:<14} {:>4} entries  max rel err {:.2e}", info.name, n, tensor_worst);
        worst = worst.max(tensor_worst);
    }
    println!("worst {worst:.2e}");
}
