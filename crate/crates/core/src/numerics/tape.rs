use std::sync::Arc;

use crate::error::{Error, Result};

use super::ops::{self, axis_split, gemm};
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    /// Trainable input; gradients are reported for it.
    Leaf,
    /// Fixed input; no gradient flows into it.
    Constant,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Mean(Var),
    Sum(Vec<Var>),
    Softmax {
        x: Var,
        axis: usize,
        temperature: f64,
    },
    /// KL of a fixed target against `q`, reduced along `axis`.
    KlDivergence {
        q: Var,
        target: Arc<Tensor>,
        axis: usize,
    },
    L2Normalize {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Arc<Vec<usize>>,
    },
    Propagate {
        adjacency: Var,
        x: Var,
    },
    SegmentMean {
        x: Var,
        groups: Arc<Vec<Vec<usize>>>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Constant => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | AddRowBias(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | Relu(a) | Exp(a) | Log(a) | Mean(a) => vec![*a],
            Sum(vs) => vs.clone(),
            Softmax { x, .. } | L2Normalize { x, .. } | SegmentMean { x, .. } => vec![*x],
            KlDivergence { q, .. } => vec![*q],
            CrossEntropy { logits, .. } => vec![*logits],
            Propagate { adjacency, x } => vec![*adjacency, *x],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Ordered record of primitive operations, replayable and differentiable.
///
/// Nodes are appended in evaluation order, so every input precedes its
/// consumer and the record is acyclic by construction.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when `var` does not reach the output.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Registers a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(Op::Leaf, value, true)
    }

    /// Registers an input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(Op::Constant, value, false)
    }

    fn push_node(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::Contract(format!("variable {} is not on this tape", bad.0)));
        }
        let value = self.eval_op(&op)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_node(op, value, needs_grad))
    }

    fn eval_op(&self, op: &Op) -> Result<Tensor> {
        // Ops only read their inputs, so a borrowed view of node values suffices.
        struct View<'a>(&'a [Node]);
        impl std::ops::Index<usize> for View<'_> {
            type Output = Tensor;
            fn index(&self, i: usize) -> &Tensor {
                &self.0[i].value
            }
        }
        eval_with(op, &View(&self.nodes))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddRowBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Log(x))
    }

    /// Mean over all elements; the result is a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Mean(x))
    }

    /// Elementwise sum of same-shaped values.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("sum of no terms".into()));
        }
        self.push(Op::Sum(xs.to_vec()))
    }

    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        self.push(Op::Softmax {
            x,
            axis,
            temperature,
        })
    }

    /// `KL(target ‖ q)` along `axis`; the target is a fixed distribution.
    pub fn kl_divergence(&mut self, target: Tensor, q: Var, axis: usize) -> Result<Var> {
        if target.shape() != self.value(q).shape() {
            return Err(Error::Shape(format!(
                "KL target {:?} vs q {:?}",
                target.shape(),
                self.value(q).shape()
            )));
        }
        self.push(Op::KlDivergence {
            q,
            target: Arc::new(target),
            axis,
        })
    }

    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::L2Normalize { x, axis })
    }

    /// Mean softmax cross-entropy over logit rows.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.push(Op::CrossEntropy {
            logits,
            labels: Arc::new(labels.to_vec()),
        })
    }

    /// Blockwise `Â · X_g` for each `N`-row block of `x`.
    pub fn propagate(&mut self, adjacency: Var, x: Var) -> Result<Var> {
        self.push(Op::Propagate { adjacency, x })
    }

    pub fn segment_mean(&mut self, x: Var, groups: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        self.push(Op::SegmentMean { x, groups })
    }

    /// Selects rows of a matrix, in order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let groups = rows.iter().map(|&r| vec![r]).collect();
        self.segment_mean(x, Arc::new(groups))
    }

    /// Re-evaluates every recorded op from the stored inputs.
    pub fn replay(&self) -> Result<Tape> {
        self.replay_with(&[])
    }

    /// Re-evaluates the record with some inputs replaced.
    pub fn replay_with(&self, overrides: &[(Var, Tensor)]) -> Result<Tape> {
        let mut out = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
        };
        for (i, node) in self.nodes.iter().enumerate() {
            let value = match node.op {
                Op::Leaf | Op::Constant => match overrides.iter().find(|(v, _)| v.0 == i) {
                    Some((_, t)) if t.shape() == node.value.shape() => t.clone(),
                    Some((_, t)) => {
                        return Err(Error::Shape(format!(
                            "override for input {i} has shape {:?}, expected {:?}",
                            t.shape(),
                            node.value.shape()
                        )))
                    }
                    None => node.value.clone(),
                },
                ref op => out.eval_op(op)?,
            };
            out.nodes.push(Node {
                op: node.op.clone(),
                value,
                needs_grad: node.needs_grad,
            });
        }
        Ok(out)
    }

    /// Reverse accumulation from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_value = &self.nodes[output.0].value;
        if !out_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate_grad(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.needs_grad)
                    .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate_grad(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut accumulate = |v: Var, delta: Vec<f64>| {
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).dims2()?.1;
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g, false, val(*b).data(), true, 0.0, &mut ga);
                    accumulate(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, val(*a).data(), true, g, false, 0.0, &mut gb);
                    accumulate(*b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a·bᵀ, a: m×k, b: n×k
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).dims2()?.0;
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g, false, val(*b).data(), false, 0.0, &mut ga);
                    accumulate(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; n * k];
                    gemm(n, m, k, 1.0, g, true, val(*a).data(), false, 0.0, &mut gb);
                    accumulate(*b, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2()?;
                // g is c×r
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(*a, ga);
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(*a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(*b, g.to_vec());
                }
            }
            Op::AddRowBias(x, b) => {
                let c = val(*b).len();
                if wants(*x) {
                    accumulate(*x, g.to_vec());
                }
                if wants(*b) {
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    accumulate(*b, gb);
                }
            }
            Op::Scale(x, f) => accumulate(*x, g.iter().map(|v| v * f).collect()),
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(*x, gx);
            }
            Op::Exp(x) => {
                let gx = g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                accumulate(*x, gx);
            }
            Op::Log(x) => {
                let gx = g.iter().zip(val(*x).data()).map(|(g, x)| g / x).collect();
                accumulate(*x, gx);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                accumulate(*x, vec![g[0] / n as f64; n]);
            }
            Op::Sum(vs) => {
                for v in vs {
                    if wants(*v) {
                        accumulate(*v, g.to_vec());
                    }
                }
            }
            Op::Softmax {
                x,
                axis,
                temperature,
            } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis)?;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for s in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + s;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot) / temperature;
                        }
                    }
                }
                accumulate(*x, gx);
            }
            Op::KlDivergence { q, target, axis } => {
                let qd = val(*q).data();
                let pd = target.data();
                let (outer, len, inner) = axis_split(target.shape(), *axis)?;
                let mut gq = vec![0.0; qd.len()];
                for o in 0..outer {
                    for s in 0..inner {
                        let up = g[o * inner + s];
                        for k in 0..len {
                            let idx = (o * len + k) * inner + s;
                            if pd[idx] > 0.0 {
                                gq[idx] = -up * pd[idx] / qd[idx];
                            }
                        }
                    }
                }
                accumulate(*q, gq);
            }
            Op::L2Normalize { x, axis } => {
                let y = node.value.data();
                let norms = ops::slice_norms(val(*x), *axis)?;
                let (outer, len, inner) = axis_split(node.value.shape(), *axis)?;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for s in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + s;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        let norm = norms[o * inner + s];
                        for k in 0..len {
                            gx[idx(k)] = (g[idx(k)] - y[idx(k)] * dot) / norm;
                        }
                    }
                }
                accumulate(*x, gx);
            }
            Op::CrossEntropy { logits, labels } => {
                let z = val(*logits);
                let (rows, classes) = ops::logit_rows(z)?;
                let mut gz = vec![0.0; z.len()];
                let scale = g[0] / rows as f64;
                for (r, &label) in labels.iter().enumerate() {
                    let row = &z.data()[r * classes..(r + 1) * classes];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for (c, v) in row.iter().enumerate() {
                        let p = (v - max).exp() / total;
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        gz[r * classes + c] = scale * (p - onehot);
                    }
                }
                accumulate(*logits, gz);
            }
            Op::Propagate { adjacency, x } => {
                let a = val(*adjacency);
                let xv = val(*x);
                let n = a.dims2()?.0;
                let c = xv.dims2()?.1;
                if wants(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    for (gb, ob) in g.chunks(n * c).zip(gx.chunks_mut(n * c)) {
                        gemm(n, n, c, 1.0, a.data(), true, gb, false, 0.0, ob);
                    }
                    accumulate(*x, gx);
                }
                if wants(*adjacency) {
                    let mut ga = vec![0.0; n * n];
                    for (gb, xb) in g.chunks(n * c).zip(xv.data().chunks(n * c)) {
                        gemm(n, c, n, 1.0, gb, false, xb, true, 1.0, &mut ga);
                    }
                    accumulate(*adjacency, ga);
                }
            }
            Op::SegmentMean { x, groups } => {
                let xv = val(*x);
                let c = xv.dims2()?.1;
                let mut gx = vec![0.0; xv.len()];
                for (gi, members) in groups.iter().enumerate() {
                    let inv = 1.0 / members.len() as f64;
                    let src = &g[gi * c..(gi + 1) * c];
                    for &r in members {
                        gx[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s * inv);
                    }
                }
                accumulate(*x, gx);
            }
        }
        Ok(())
    }
}

fn eval_with<I>(op: &Op, values: &I) -> Result<Tensor>
where
    I: std::ops::Index<usize, Output = Tensor>,
{
    use Op::*;
    let v = |x: &Var| &values[x.0];
    match op {
        Leaf | Constant => unreachable!("inputs are not re-evaluated"),
        MatMul(a, b) => ops::matmul(v(a), v(b)),
        MatMulNt(a, b) => ops::matmul_nt(v(a), v(b)),
        Transpose(a) => ops::transpose(v(a)),
        Add(a, b) => ops::add(v(a), v(b)),
        AddRowBias(a, b) => ops::add_row_bias(v(a), v(b)),
        Scale(a, f) => ops::scale(v(a), *f),
        Relu(a) => Ok(ops::relu(v(a))),
        Exp(a) => ops::exp(v(a)),
        Log(a) => ops::log(v(a)),
        Mean(a) => Ok(ops::mean(v(a))),
        Sum(vs) => {
            let mut acc = v(&vs[0]).clone();
            for x in &vs[1..] {
                acc = ops::add(&acc, v(x))?;
            }
            Ok(acc)
        }
        Softmax {
            x,
            axis,
            temperature,
        } => ops::softmax(v(x), *axis, *temperature),
        KlDivergence { q, target, axis } => ops::kl_unchecked(target, v(q), *axis),
        L2Normalize { x, axis } => ops::l2_normalize(v(x), *axis),
        CrossEntropy { logits, labels } => Tensor::scalar(ops::cross_entropy(v(logits), labels)?),
        Propagate { adjacency, x } => ops::propagate(v(adjacency), v(x)),
        SegmentMean { x, groups } => ops::segment_mean(v(x), groups),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let y = tape.matmul(x, x).unwrap();
        let s = tape.mean(y).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 9.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn uniform_cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::vector(vec![0.7; 4]).unwrap());
        let loss = tape.cross_entropy(z, &[2]).unwrap();
        let g = tape.backward(loss).unwrap().wrt(z);
        assert_eq!(g.data(), &[0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn unreached_leaves_get_zero_and_constants_none() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let unused = tape.leaf(Tensor::vector(vec![5.0]).unwrap());
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let s = tape.add(a, c).unwrap();
        let m = tape.mean(s).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(a).data(), &[0.5, 0.5]);
        assert_eq!(g.wrt(unused).data(), &[0.0]);
        assert_eq!(g.wrt(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = tape.relu(a).unwrap();
        assert!(matches!(tape.backward(b), Err(Error::Contract(_))));
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 0.01, 0.5, -0.7]).unwrap(),
        );
        let w = tape.leaf(Tensor::matrix(3, 3, (0..9).map(|i| (i as f64).sin()).collect()).unwrap());
        let h = tape.matmul(x, w).unwrap();
        let h = tape.relu(h).unwrap();
        let n = tape.l2_normalize(h, 1).unwrap();
        let s = tape.softmax(n, 1, 0.1).unwrap();
        let m = tape.mean(s).unwrap();
        let again = tape.replay().unwrap();
        for i in 0..tape.len() {
            let (a, b) = (tape.value(Var(i)), again.value(Var(i)));
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let swapped = tape
            .replay_with(&[(x, Tensor::matrix(2, 3, vec![1.0; 6]).unwrap())])
            .unwrap();
        assert_ne!(swapped.value(m), tape.value(m));
    }

    #[test]
    fn foreign_variable_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0]).unwrap());
        let mut other = Tape::new();
        assert!(other.relu(a).is_err());
    }
}
