//! Wengert-list tape. Nodes are appended in evaluation order, so the node
//! vector is already a topological order and backward is a single reverse
//! sweep that visits every node at most once.

use std::borrow::Cow;

use super::{
    log_softmax_slice, matmul_nt_into, matmul_tn_into, Result, Tensor,
    TensorError,
};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    Softmax { input: Var, temperature: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SoftCrossEntropy { target: Var, logits: Var, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated.
///
/// Leaves may borrow their tensors (`leaf_ref`), which keeps per-example
/// passes over a large model from copying every weight.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not require grad or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, Cow::Owned(t), requires_grad)
    }

    pub fn leaf_ref(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, Cow::Borrowed(t), requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn push(&mut self, op: Op, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        op: Op,
        value: Tensor,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        value.ensure_finite(name)?;
        Ok(self.push(op, Cow::Owned(value), requires_grad))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push_checked(Op::MatMul(a, b), out, rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.mismatch("add", a, b));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push_checked(Op::Add(a, b), out, rg, "add")
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if !ta.is_matrix() || tb.numel() != ta.cols() {
            return Err(self.mismatch("add_row", a, bias));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, bias]);
        self.push_checked(Op::AddRow(a, bias), out, rg, "add_row")
    }

    /// Elementwise product; used for mask multiplication.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.mismatch("mul", a, b));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push_checked(Op::Mul(a, b), out, rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push_checked(Op::Scale(a, s), out, rg, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push_checked(Op::Relu(a), out, rg, "relu")
    }

    /// tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push_checked(Op::Gelu(a), out, rg, "gelu")
    }

    /// Per-row normalisation to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_matrix() {
            return Err(TensorError::Invalid("layer_norm expects a matrix".into()));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = ta.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(vec![r, c], data)?;
        let rg = self.rg(&[a]);
        self.push_checked(Op::LayerNorm { input: a, inv_std }, out, rg, "layer_norm")
    }

    /// Row-wise `softmax(a / temperature)`.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(TensorError::Invalid(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let ta = self.value(a);
        if !ta.is_matrix() {
            return Err(TensorError::Invalid("softmax expects a matrix".into()));
        }
        let out = super::softmax_rows(ta, temperature);
        let rg = self.rg(&[a]);
        self.push_checked(Op::Softmax { input: a, temperature }, out, rg, "softmax")
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if !tl.is_matrix() || tl.rows() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (r, c) = (tl.rows(), tl.cols());
        let mut logp = vec![0.0; c];
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::ClassOutOfRange {
                    row: i,
                    index: t,
                    classes: c,
                });
            }
            log_softmax_slice(tl.row(i), &mut logp);
            loss -= logp[t];
            for (p, l) in probs[i * c..(i + 1) * c].iter_mut().zip(&logp) {
                *p = l.exp();
            }
        }
        let out = Tensor::scalar(loss / r as f64);
        let rg = self.rg(&[logits]);
        self.push_checked(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            out,
            rg,
            "cross_entropy",
        )
    }

    /// Mean over rows of `-Σ_i target_i · log softmax(logits)_i`.
    ///
    /// `target` rows must be probability vectors. No gradient ever flows
    /// into `target`, whatever its `requires_grad` flag says.
    pub fn soft_cross_entropy(&mut self, target: Var, logits: Var) -> Result<Var> {
        let (tt, tl) = (self.value(target), self.value(logits));
        if !tl.is_matrix() || tt.shape() != tl.shape() {
            return Err(self.mismatch("soft_cross_entropy", target, logits));
        }
        let (r, c) = (tl.rows(), tl.cols());
        for i in 0..r {
            let sum: f64 = tt.row(i).iter().sum();
            if (sum - 1.0).abs() > 1e-9 || tt.row(i).iter().any(|&p| p < 0.0) {
                return Err(TensorError::NotADistribution { row: i, sum });
            }
        }
        let mut logp = vec![0.0; c];
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            log_softmax_slice(tl.row(i), &mut logp);
            for (j, l) in logp.iter().enumerate() {
                loss -= tt.row(i)[j] * l;
                probs[i * c + j] = l.exp();
            }
        }
        let out = Tensor::scalar(loss / r as f64);
        let rg = self.rg(&[logits]);
        self.push_checked(
            Op::SoftCrossEntropy {
                target,
                logits,
                probs,
            },
            out,
            rg,
            "soft_cross_entropy",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|data| Tensor::new(n.value.shape().to_vec(), data))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    let acc = self.slot(grads, *a);
                    matmul_nt_into(g, tb.data(), acc, m, k, n);
                }
                if self.requires_grad(*b) {
                    let acc = self.slot(grads, *b);
                    matmul_tn_into(ta.data(), g, acc, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        accumulate(self.slot(grads, v), g);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.requires_grad(*a) {
                    accumulate(self.slot(grads, *a), g);
                }
                if self.requires_grad(*bias) {
                    let n = self.value(*bias).numel();
                    let acc = self.slot(grads, *bias);
                    for row in g.chunks(n) {
                        accumulate(acc, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let acc = self.slot(grads, *a);
                    for ((o, gv), bv) in acc.iter_mut().zip(g).zip(tb.data()) {
                        *o += gv * bv;
                    }
                }
                if self.requires_grad(*b) {
                    let acc = self.slot(grads, *b);
                    for ((o, gv), av) in acc.iter_mut().zip(g).zip(ta.data()) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.requires_grad(*a) {
                    let acc = self.slot(grads, *a);
                    for (o, gv) in acc.iter_mut().zip(g) {
                        *o += gv * s;
                    }
                }
            }
            Op::Relu(a) => {
                if self.requires_grad(*a) {
                    let x = self.value(*a).data();
                    let acc = self.slot(grads, *a);
                    for ((o, gv), &xv) in acc.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.requires_grad(*a) {
                    let x = self.value(*a).data();
                    let acc = self.slot(grads, *a);
                    for ((o, gv), &xv) in acc.iter_mut().zip(g).zip(x) {
                        let t = (GELU_K * (xv + GELU_C * xv * xv * xv)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * xv * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * xv * xv);
                        *o += gv * d;
                    }
                }
            }
            Op::LayerNorm { input, inv_std } => {
                if self.requires_grad(*input) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let acc = self.slot(grads, *input);
                    for (i, is) in inv_std.iter().enumerate() {
                        let gr = &g[i * c..(i + 1) * c];
                        let yr = &y[i * c..(i + 1) * c];
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        let cf = c as f64;
                        for j in 0..c {
                            acc[i * c + j] += is * (gr[j] - sum_g / cf - yr[j] * sum_gy / cf);
                        }
                    }
                }
            }
            Op::Softmax { input, temperature } => {
                if self.requires_grad(*input) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let acc = self.slot(grads, *input);
                    for (i, (gr, yr)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            acc[i * c + j] += yr[j] * (gr[j] - dot) / temperature;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.requires_grad(*logits) {
                    let c = self.value(*logits).cols();
                    let scale = g[0] / targets.len() as f64;
                    let acc = self.slot(grads, *logits);
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            acc[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::SoftCrossEntropy {
                target,
                logits,
                probs,
            } => {
                if self.requires_grad(*logits) {
                    let t = self.value(*target);
                    let (r, c) = (t.rows(), t.cols());
                    let scale = g[0] / r as f64;
                    let acc = self.slot(grads, *logits);
                    for i in 0..r {
                        let tr = t.row(i);
                        let mass: f64 = tr.iter().sum();
                        for j in 0..c {
                            acc[i * c + j] += scale * (probs[i * c + j] * mass - tr[j]);
                        }
                    }
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn accumulate(acc: &mut [f64], g: &[f64]) {
    for (o, v) in acc.iter_mut().zip(g) {
        *o += v;
    }
}
