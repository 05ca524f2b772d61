//! Finite-difference checks shared by the gradcheck tests and the
//! acceptance runner.

use dpcompress::compress::{kd_loss, KdConfig};
use dpcompress::model::{Activation, PruneMask};
use dpcompress::tensor::{Tape, Tensor, Var};
use rand::Rng;

use super::{central_diff, flat_params, max_rel_err, random_tensor, rng, set_flat_params, small_model};

/// Reduces `out` to a scalar as `Σ out ⊙ r` using only matmul and mul.
fn weighted_sum(tape: &mut Tape<'_>, out: Var, r: &Tensor) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let (m, n) = (shape[0], shape[1]);
    let rv = tape.constant(r.clone());
    let w = tape.mul(out, rv).unwrap();
    let left = tape.constant(Tensor::full(&[1, m], 1.0));
    let right = tape.constant(Tensor::full(&[n, 1], 1.0));
    let row = tape.matmul(left, w).unwrap();
    tape.matmul(row, right).unwrap()
}

/// Builds the scalar from its inputs; every input is differentiated.
type Build = dyn Fn(&mut Tape<'_>, &[Var]) -> Var;

fn check(inputs: &[Tensor], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let numeric = central_diff(inputs[k].data(), |p| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    if j == k {
                        tape.leaf(Tensor::new(t.shape().to_vec(), p.to_vec()).unwrap(), true)
                    } else {
                        tape.leaf(t.clone(), true)
                    }
                })
                .collect();
            let l = build(&mut tape, &vars);
            tape.value(l).item()
        });
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

/// Entries of magnitude in `[0.1, 1]` with random sign, away from ReLU's kink.
fn off_kink(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = 0.1 + 0.9 * rng.random::<f64>();
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst relative error of each checked operation over `seeds` seeds.
pub fn op_suite(seeds: u64) -> Vec<(&'static str, f64)> {
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match out.iter_mut().find(|(n, _)| *n == name) {
        Some(slot) => slot.1 = slot.1.max(e),
        None => out.push((name, e)),
    };
    for seed in 0..seeds {
        let mut g = rng(seed);
        let (m, k, n) = (g.random_range(1..5), g.random_range(1..5), g.random_range(2..5));
        let r = random_tensor(&mut g, &[m, n], 1.0);

        let a = random_tensor(&mut g, &[m, k], 1.0);
        let b = random_tensor(&mut g, &[k, n], 1.0);
        let rr = r.clone();
        record(
            "matmul",
            check(&[a, b], &move |t, v| {
                let o = t.matmul(v[0], v[1]).unwrap();
                weighted_sum(t, o, &rr)
            }),
        );

        let a = random_tensor(&mut g, &[m, n], 1.0);
        let b = random_tensor(&mut g, &[m, n], 1.0);
        let rr = r.clone();
        record(
            "add",
            check(&[a.clone(), b.clone()], &move |t, v| {
                let o = t.add(v[0], v[1]).unwrap();
                weighted_sum(t, o, &rr)
            }),
        );
        let rr = r.clone();
        record(
            "mul",
            check(&[a.clone(), b], &move |t, v| {
                let o = t.mul(v[0], v[1]).unwrap();
                weighted_sum(t, o, &rr)
            }),
        );
        let bias = random_tensor(&mut g, &[1, n], 1.0);
        let rr = r.clone();
        record(
            "add_row",
            check(&[a.clone(), bias], &move |t, v| {
                let o = t.add_row(v[0], v[1]).unwrap();
                weighted_sum(t, o, &rr)
            }),
        );
        let s = 3.0 * g.random::<f64>() - 1.5;
        let rr = r.clone();
        record(
            "scale",
            check(&[a.clone()], &move |t, v| {
                let o = t.scale(v[0], s).unwrap();
                weighted_sum(t, o, &rr)
            }),
        );
        let rr = r.clone();
        record(
            "relu",
            check(&[off_kink(&mut g, &[m, n])], &move |t, v| {
                let o = t.relu(v[0]).unwrap();
                weighted_sum(t, o, &rr)
            }),
        );
        let x = random_tensor(&mut g, &[m, n], 3.0);
        let rr = r.clone();
        record(
            "gelu",
            check(&[x], &move |t, v| {
                let o = t.gelu(v[0]).unwrap();
                weighted_sum(t, o, &rr)
            }),
        );
        let x = random_tensor(&mut g, &[m, n], 2.0);
        let rr = r.clone();
        record(
            "layer_norm",
            check(&[x], &move |t, v| {
                let o = t.layer_norm(v[0]).unwrap();
                weighted_sum(t, o, &rr)
            }),
        );
        let x = random_tensor(&mut g, &[m, n], 3.0);
        let temp = 0.5 + 3.0 * g.random::<f64>();
        let rr = r.clone();
        record(
            "softmax",
            check(&[x], &move |t, v| {
                let o = t.softmax(v[0], temp).unwrap();
                weighted_sum(t, o, &rr)
            }),
        );
        let labels: Vec<usize> = (0..m).map(|_| g.random_range(0..n)).collect();
        let x = random_tensor(&mut g, &[m, n], 3.0);
        let l2 = labels.clone();
        record(
            "cross_entropy",
            check(&[x], &move |t, v| t.cross_entropy(v[0], &l2).unwrap()),
        );
        let target = dpcompress::tensor::softmax_rows(&random_tensor(&mut g, &[m, n], 2.0), 1.0);
        let x = random_tensor(&mut g, &[m, n], 3.0);
        record(
            "soft_cross_entropy",
            check(&[x], &move |t, v| {
                let tv = t.constant(target.clone());
                t.soft_cross_entropy(tv, v[0]).unwrap()
            }),
        );
        let teacher = random_tensor(&mut g, &[m, n], 3.0);
        let student = random_tensor(&mut g, &[m, n], 3.0);
        let cfg = KdConfig {
            lambda: 2.0 * g.random::<f64>(),
            temperature: 0.5 + 4.0 * g.random::<f64>(),
        };
        let l3 = labels.clone();
        record(
            "kd_loss",
            check(&[student], &move |t, v| {
                let tv = t.constant(teacher.clone());
                kd_loss(t, v[0], tv, &l3, &cfg).unwrap()
            }),
        );
    }
    out
}

/// Worst relative error of the full model loss over all parameters, for
/// GELU and ReLU models, with and without a pruning mask.
pub fn model_suite(seeds: u64) -> Vec<(&'static str, f64)> {
    let mut worst = [0.0f64; 3];
    for seed in 0..seeds {
        let mut g = rng(1000 + seed);
        let depth = g.random_range(1..4);
        let rows = g.random_range(1..5);
        let variant = (seed % 3) as usize;
        let mut model = small_model(depth, seed);
        if variant == 1 {
            model.activation = Activation::Relu;
        }
        if variant == 2 {
            let mut mask = PruneMask::dense(&model);
            for t in &mut mask.keep {
                for k in t.iter_mut() {
                    *k = g.random::<f64>() > 0.4;
                }
            }
            model.apply_mask(&mask).unwrap();
        }
        let x = random_tensor(&mut g, &[rows, model.dims.d_in], 2.0);
        let labels: Vec<usize> = (0..rows).map(|_| g.random_range(0..model.dims.classes)).collect();

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let pass = model.forward_on(&mut tape, xv).unwrap();
        let loss = tape.cross_entropy(pass.logits, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<f64> = pass
            .params
            .iter()
            .zip(model.params())
            .flat_map(|(v, p)| {
                grads
                    .get(*v)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect();

        let base = flat_params(&model);
        let mut probe = model.clone();
        let numeric = central_diff(&base, |p| {
            set_flat_params(&mut probe, p);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), false);
            let pass = probe.forward_on(&mut tape, xv).unwrap();
            let l = tape.cross_entropy(pass.logits, &labels).unwrap();
            tape.value(l).item()
        });
        worst[variant] = worst[variant].max(max_rel_err(&analytic, &numeric));
    }
    vec![
        ("model loss (gelu)", worst[0]),
        ("model loss (relu)", worst[1]),
        ("model loss (gelu, masked)", worst[2]),
    ]
}
