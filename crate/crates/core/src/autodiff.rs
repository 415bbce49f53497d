//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced while it is alive. Operations whose
//! inputs all come from [`Graph::constant`] are evaluated but not recorded, so
//! the tape only holds what backward needs. Model code is written once against
//! [`Backend`] and runs either taped (training) or on plain tensors ([`Eager`]).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_kind, forward_op, matmul_nt, matmul_tn, Broadcast, OpKind, Tensor};

/// Handle to a value stored in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    leaf: bool,
}

struct Record<S> {
    kind: OpKind<S>,
    inputs: Vec<usize>,
    output: usize,
}

pub struct Graph<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    records: Vec<Record<S>>,
    slots: HashMap<usize, Var>,
    consumed: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), records: Vec::new(), slots: HashMap::new(), consumed: false }
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, leaf: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, leaf });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient backward will report.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, true, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, false, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of recorded operations.
    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    /// Leaf registered for parameter slot `slot`, if the forward pass used it.
    pub fn slot(&self, slot: usize) -> Option<Var> {
        self.slots.get(&slot).copied()
    }

    pub fn apply(&mut self, kind: OpKind<S>, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let values: Vec<&Tensor<S>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = forward_op(&kind, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let output = self.push(out, requires_grad, false);
        if requires_grad {
            self.records.push(Record { kind, inputs: inputs.iter().map(|v| v.0).collect(), output: output.0 });
        }
        Ok(output)
    }

    /// Propagates `d(loss)/d(node)` backwards through the tape, visiting each
    /// record once. The graph cannot be used again afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_node.value.shape(), S::one()));

        let records = std::mem::take(&mut self.records);
        for rec in records.iter().rev() {
            let Some(gout) = grads[rec.output].take() else { continue };
            let input_grads = self.vjp(rec, &gout)?;
            for (&input, g) in rec.inputs.iter().zip(input_grads) {
                let (Some(g), true) = (g, self.nodes[input].requires_grad) else { continue };
                match &mut grads[input] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut out = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.leaf && node.requires_grad {
                let g = grads[id].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                if !g.is_finite() {
                    return Err(Error::NonFinite("backward".into()));
                }
                out.insert(Var(id), g);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn vjp(&self, rec: &Record<S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let val = |i: usize| &self.nodes[rec.inputs[i]].value;
        let wants = |i: usize| self.nodes[rec.inputs[i]].requires_grad;
        let out = &self.nodes[rec.output].value;
        let grads = match &rec.kind {
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                vec![wants(0).then(|| matmul_nt(g, b)), wants(1).then(|| matmul_tn(a, g))]
            }
            OpKind::Add => {
                let gb = wants(1).then(|| reduce_broadcast(g, val(0), val(1))).transpose()?;
                vec![Some(g.clone()), gb]
            }
            OpKind::Mul => {
                let (a, b) = (val(0), val(1));
                let ga = wants(0).then(|| forward_op(&OpKind::Mul, &[g, b])).transpose()?;
                let gb = if wants(1) {
                    let prod =
                        Tensor::new(g.shape().to_vec(), g.data().iter().zip(a.data()).map(|(&x, &y)| x * y).collect())?;
                    Some(reduce_broadcast(&prod, a, b)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            OpKind::Tanh => {
                vec![Some(zip_map(g, out, |gv, y| gv * (S::one() - y * y)))]
            }
            OpKind::Exp => vec![Some(zip_map(g, out, |gv, y| gv * y))],
            OpKind::Sum => {
                let a = val(0);
                vec![Some(Tensor::full(a.shape(), g.item()))]
            }
            OpKind::Slice { start, end } => {
                let a = val(0);
                let (n, w) = (a.cols(), end - start);
                let mut data = vec![S::zero(); a.numel()];
                for r in 0..a.rows() {
                    data[r * n + start..r * n + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                vec![Some(Tensor::new(a.shape().to_vec(), data)?)]
            }
            OpKind::Concat => {
                let na = val(0).cols();
                let nb = val(1).cols();
                let rows = g.rows();
                let mut ga = Vec::with_capacity(rows * na);
                let mut gb = Vec::with_capacity(rows * nb);
                for r in 0..rows {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..na]);
                    gb.extend_from_slice(&row[na..]);
                }
                vec![Some(Tensor::new(vec![rows, na], ga)?), Some(Tensor::new(vec![rows, nb], gb)?)]
            }
            OpKind::Scale(c) => vec![Some(g.map(|v| v * *c))],
            OpKind::Shift(_) => vec![Some(g.clone())],
        };
        Ok(grads)
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Sums a full-shape gradient down to the shape of a broadcast operand.
fn reduce_broadcast<S: Scalar>(g: &Tensor<S>, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    Ok(match broadcast_kind(a, b)? {
        Broadcast::Same => g.clone(),
        Broadcast::Scalar => Tensor::new(b.shape().to_vec(), vec![g.data().iter().copied().sum()])?,
        Broadcast::Row => {
            let n = g.cols();
            let mut acc = vec![S::zero(); n];
            for row in g.data().chunks(n) {
                acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
            }
            Tensor::new(vec![1, n], acc)?
        }
    })
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: HashMap<Var, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Evaluation target for model code: either the tape or plain tensors.
pub trait Backend<S: Scalar> {
    type Value: Clone;

    /// Model parameter identified by a stable slot number. Repeated requests
    /// for the same slot return the same value.
    fn param(&mut self, slot: usize, value: &Tensor<S>) -> Self::Value;

    fn input(&mut self, value: Tensor<S>) -> Self::Value;

    fn op(&mut self, kind: OpKind<S>, inputs: &[&Self::Value]) -> Result<Self::Value>;

    fn get<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<S>;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.op(OpKind::MatMul, &[a, b])
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.op(OpKind::Add, &[a, b])
    }

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.op(OpKind::Mul, &[a, b])
    }

    fn tanh(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.op(OpKind::Tanh, &[a])
    }

    fn exp(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.op(OpKind::Exp, &[a])
    }

    fn sum(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.op(OpKind::Sum, &[a])
    }

    fn slice(&mut self, a: &Self::Value, start: usize, end: usize) -> Result<Self::Value> {
        self.op(OpKind::Slice { start, end }, &[a])
    }

    fn concat(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.op(OpKind::Concat, &[a, b])
    }

    fn scale(&mut self, a: &Self::Value, c: S) -> Result<Self::Value> {
        self.op(OpKind::Scale(c), &[a])
    }

    fn shift(&mut self, a: &Self::Value, c: S) -> Result<Self::Value> {
        self.op(OpKind::Shift(c), &[a])
    }

    /// `a - b` for same-shape operands.
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        let nb = self.scale(b, -S::one())?;
        self.add(a, &nb)
    }

    /// Logistic sigmoid written as `0.5 * tanh(x / 2) + 0.5`, exactly within `[0, 1]`.
    fn sigmoid(&mut self, a: &Self::Value) -> Result<Self::Value> {
        let half = S::lit(0.5);
        let h = self.scale(a, half)?;
        let t = self.tanh(&h)?;
        let t = self.scale(&t, half)?;
        self.shift(&t, half)
    }
}

impl<S: Scalar> Backend<S> for Graph<S> {
    type Value = Var;

    fn param(&mut self, slot: usize, value: &Tensor<S>) -> Var {
        if let Some(v) = self.slots.get(&slot) {
            return *v;
        }
        let v = Graph::param(self, value.clone());
        self.slots.insert(slot, v);
        v
    }

    fn input(&mut self, value: Tensor<S>) -> Var {
        self.constant(value)
    }

    fn op(&mut self, kind: OpKind<S>, inputs: &[&Var]) -> Result<Var> {
        let ids: Vec<Var> = inputs.iter().map(|v| **v).collect();
        self.apply(kind, &ids)
    }

    fn get<'a>(&'a self, v: &'a Var) -> &'a Tensor<S> {
        self.value(*v)
    }
}

/// Gradient-free evaluation on owned tensors.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<S: Scalar> Backend<S> for Eager {
    type Value = Tensor<S>;

    fn param(&mut self, _slot: usize, value: &Tensor<S>) -> Tensor<S> {
        value.clone()
    }

    fn input(&mut self, value: Tensor<S>) -> Tensor<S> {
        value
    }

    fn op(&mut self, kind: OpKind<S>, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        forward_op(&kind, inputs)
    }

    fn get<'a>(&'a self, v: &'a Tensor<S>) -> &'a Tensor<S> {
        v
    }
}

/// Central-difference gradient `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)`.
pub fn finite_diff_grad<S, F>(mut f: F, params: &Tensor<S>, eps: S) -> Result<Tensor<S>>
where
    S: Scalar,
    F: FnMut(&Tensor<S>) -> Result<S>,
{
    if !(eps > S::zero()) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.numel());
    for i in 0..params.numel() {
        let orig = params.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation".into()));
        }
        grad.push((up - down) / (eps + eps));
    }
    Tensor::new(params.shape().to_vec(), grad)
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    let norm = |t: &Tensor<S>| t.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
