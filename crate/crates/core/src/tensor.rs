//! Dense `f64` tensors with a reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are
//! created with [`Tape::param`] (tracked) or [`Tape::constant`] (data).
//! Operations on [`Var`] handles append nodes; [`backward`] walks the
//! tape once in reverse insertion order, which is a reverse topological
//! order because a node's parents always precede it.
//!
//! ```
//! use aapl_core::tensor::{backward, Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
//! let loss = x.mul(x).unwrap().sum().unwrap();
//! let grads = backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::dim(format!("zero-sized axis in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            shape: vec![n],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&s| s == 1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle of a node on a tape.
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sum(NodeId),
    Concat(Vec<NodeId>),
    Stack(Vec<NodeId>),
    L2Normalize(NodeId),
    Cosine(NodeId, NodeId),
    Euclidean(NodeId, NodeId),
    SoftmaxCrossEntropy(NodeId, usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), false)
    }

    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, parents: &[NodeId]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{op:?} produced a non-finite value")));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }
}

/// A tensor participating in a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands live on different tapes"))
        }
    }

    fn same_shape(&self, other: &Var<'_>, what: &str) -> Result<(Arc<Tensor>, Arc<Tensor>)> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        Ok((a, b))
    }

    /// Matrix product. A 1-D left operand of length `k` is treated as a
    /// `1×k` row and yields a 1-D result.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let (m, k) = match a.shape() {
            [k] => (1, *k),
            [m, k] => (*m, *k),
            s => return Err(Error::dim(format!("matmul lhs must be 1-D or 2-D, got {s:?}"))),
        };
        let (k2, n) = match b.shape() {
            [k2, n] => (*k2, *n),
            s => return Err(Error::dim(format!("matmul rhs must be 2-D, got {s:?}"))),
        };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (a.data(), b.data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &w) in row.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let shape = if a.shape().len() == 1 { vec![n] } else { vec![m, n] };
        self.tape.push(
            Tensor::new(shape, out)?,
            Op::MatMul(self.id, other.id),
            &[self.id, other.id],
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "add")?;
        self.tape
            .push(a.zip_with(&b, |x, y| x + y), Op::Add(self.id, other.id), &[self.id, other.id])
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "sub")?;
        self.tape
            .push(a.zip_with(&b, |x, y| x - y), Op::Sub(self.id, other.id), &[self.id, other.id])
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "mul")?;
        self.tape
            .push(a.zip_with(&b, |x, y| x * y), Op::Mul(self.id, other.id), &[self.id, other.id])
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        let a = self.value();
        self.tape
            .push(a.map(|x| x * factor), Op::Scale(self.id, factor), &[self.id])
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Result<Var<'t>> {
        let a = self.value();
        self.tape
            .push(a.map(|x| if x > 0.0 { x } else { 0.0 }), Op::Relu(self.id), &[self.id])
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let a = self.value();
        self.tape
            .push(Tensor::scalar(a.data().iter().sum()), Op::Sum(self.id), &[self.id])
    }

    /// Concatenates 1-D tensors in order.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let mut data = Vec::new();
        for p in parts {
            first.same_tape(p)?;
            let v = p.value();
            if v.shape().len() != 1 {
                return Err(Error::dim(format!("concat expects 1-D parts, got {:?}", v.shape())));
            }
            data.extend_from_slice(v.data());
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        first
            .tape
            .push(Tensor::from_vec(data), Op::Concat(ids.clone()), &ids)
    }

    /// Stacks scalars into a 1-D tensor.
    pub fn stack(scalars: &[Var<'t>]) -> Result<Var<'t>> {
        let first = scalars
            .first()
            .ok_or_else(|| Error::contract("stack of zero scalars"))?;
        let mut data = Vec::with_capacity(scalars.len());
        for s in scalars {
            first.same_tape(s)?;
            let v = s.value();
            if v.len() != 1 {
                return Err(Error::dim(format!("stack expects scalars, got {:?}", v.shape())));
            }
            data.push(v.item());
        }
        let ids: Vec<NodeId> = scalars.iter().map(|p| p.id).collect();
        first
            .tape
            .push(Tensor::from_vec(data), Op::Stack(ids.clone()), &ids)
    }

    /// `x / ‖x‖`. Norms below `1e-9` are rejected rather than amplified.
    pub fn l2_normalize(self) -> Result<Var<'t>> {
        let a = self.value();
        let n = a.norm();
        if n < 1e-9 {
            return Err(Error::Degenerate(format!("cannot normalize vector of norm {n:e}")));
        }
        self.tape
            .push(a.map(|x| x / n), Op::L2Normalize(self.id), &[self.id])
    }

    pub fn cosine_similarity(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "cosine_similarity")?;
        let (na, nb) = (a.norm(), b.norm());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
        }
        let s = a.dot(&b) / (na * nb);
        self.tape.push(
            Tensor::scalar(s),
            Op::Cosine(self.id, other.id),
            &[self.id, other.id],
        )
    }

    /// `‖u − v‖₂`; its gradient at `u = v` is defined as zero.
    pub fn euclidean_distance(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "euclidean_distance")?;
        let d = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        self.tape.push(
            Tensor::scalar(d),
            Op::Euclidean(self.id, other.id),
            &[self.id, other.id],
        )
    }

    /// `−log softmax(self)[label]` for a 1-D logit vector.
    pub fn softmax_cross_entropy(self, label: usize) -> Result<Var<'t>> {
        let z = self.value();
        if z.shape().len() != 1 {
            return Err(Error::dim(format!("logits must be 1-D, got {:?}", z.shape())));
        }
        if label >= z.len() {
            return Err(Error::Index(format!("label {label} for {} classes", z.len())));
        }
        let lse = log_sum_exp(z.data());
        self.tape.push(
            Tensor::scalar(lse - z.data()[label]),
            Op::SoftmaxCrossEntropy(self.id, label),
            &[self.id],
        )
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Gradients of tracked leaves, keyed by node id.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn contains(&self, var: Var<'_>) -> bool {
        self.grads.contains_key(&var.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Reverse pass from a scalar `loss`.
pub fn backward(loss: Var<'_>) -> Result<Gradients> {
    let tape = loss.tape;
    let nodes = tape.nodes.borrow();
    if !nodes[loss.id].value.is_scalar() {
        return Err(Error::contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            nodes[loss.id].value.shape()
        )));
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
    grads[loss.id] = Some(Tensor::new(nodes[loss.id].value.shape().to_vec(), vec![1.0])?);

    let mut out = Gradients::default();
    for id in (0..=loss.id).rev() {
        let node = &nodes[id];
        if !node.requires_grad {
            continue;
        }
        let Some(g) = grads[id].take() else { continue };
        let mut send = |pid: NodeId, contribution: Tensor| {
            if !nodes[pid].requires_grad {
                return;
            }
            match &mut grads[pid] {
                Some(acc) => acc.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {
                out.grads.insert(id, g);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.len() / k;
                let gd = g.data();
                if nodes[*a].requires_grad {
                    let bd = bv.data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    send(*a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if nodes[*b].requires_grad {
                    let ad = av.data();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = ad[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * gv;
                            }
                        }
                    }
                    send(*b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::Sub(a, b) => {
                send(*b, g.map(|x| -x));
                send(*a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                send(*a, g.zip_with(bv, |x, y| x * y));
                send(*b, g.zip_with(av, |x, y| x * y));
            }
            Op::Scale(a, c) => send(*a, g.map(|x| x * c)),
            Op::Relu(a) => {
                let av = &nodes[*a].value;
                send(*a, g.zip_with(av, |x, v| if v > 0.0 { x } else { 0.0 }));
            }
            Op::Sum(a) => {
                let av = &nodes[*a].value;
                let s = g.item();
                send(*a, av.map(|_| s));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    let slice = g.data()[offset..offset + len].to_vec();
                    offset += len;
                    send(p, Tensor::new(nodes[p].value.shape().to_vec(), slice)?);
                }
            }
            Op::Stack(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    send(p, Tensor::new(nodes[p].value.shape().to_vec(), vec![g.data()[i]])?);
                }
            }
            Op::L2Normalize(a) => {
                let av = &nodes[*a].value;
                let y = &node.value;
                let n = av.norm();
                let yg = y.dot(&g);
                send(*a, g.zip_with(y, |gi, yi| (gi - yi * yg) / n));
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (na, nb) = (av.norm(), bv.norm());
                let s = node.value.item();
                let gs = g.item();
                send(
                    *a,
                    bv.zip_with(av, |bi, ai| gs * (bi / (na * nb) - s * ai / (na * na))),
                );
                send(
                    *b,
                    av.zip_with(bv, |ai, bi| gs * (ai / (na * nb) - s * bi / (nb * nb))),
                );
            }
            Op::Euclidean(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let d = node.value.item();
                let gs = g.item();
                let du = if d > 0.0 {
                    av.zip_with(bv, |x, y| gs * (x - y) / d)
                } else {
                    av.map(|_| 0.0)
                };
                send(*b, du.map(|x| -x));
                send(*a, du);
            }
            Op::SoftmaxCrossEntropy(a, label) => {
                let z = &nodes[*a].value;
                let gs = g.item();
                let mut p = softmax(z.data());
                p[*label] -= 1.0;
                send(*a, Tensor::from_vec(p.into_iter().map(|v| v * gs).collect()));
            }
        }
    }
    Ok(out)
}

/// Largest coordinate-wise `|analytic − central difference| / max(1, |analytic|)`
/// of a scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        eps,
    )
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::config(format!("grad_check eps must lie in (0, 1e-2], got {eps}")));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = points.iter().map(|p| tape.param(p.clone())).collect();
    let y = f(&tape, &vars)?;
    let grads = backward(y)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|p| tape.constant(p.clone())).collect();
        let v = f(&tape, &vars)
            .map_err(|e| Error::Numeric(format!("probe evaluation failed: {e}")))?
            .item();
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite value at probe point".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = points.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(points[which].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros).clone();
        for i in 0..points[which].len() {
            let orig = points[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let eye = tape.constant(
            Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let a_data: Vec<f64> = (0..9).map(|i| i as f64 * 0.5 - 2.0).collect();
        let a = tape.constant(Tensor::new(vec![3, 3], a_data.clone()).unwrap());
        assert_eq!(eye.matmul(a).unwrap().value().data(), &a_data[..]);
    }

    #[test]
    fn small_matmul_by_hand() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap());
        let c = a.matmul(b).unwrap().value();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(a.matmul(b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, &[4, 5]);
        let b = random(&mut rng, &[5, 3]);
        let err = grad_check_many(
            |_, v| v[0].matmul(v[1])?.sum(),
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn relu_and_sub() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(x.sub(x).unwrap().value().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn add_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![0.3, -0.7, 1.1]));
        let y = tape.constant(Tensor::from_vec(vec![2.0, 2.0, 2.0]));
        let g = backward(x.add(y).unwrap().sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(!g.contains(y));

        let err = grad_check(
            |t, x| {
                let c = t.constant(Tensor::from_vec(vec![0.5, 0.25, -1.0]));
                x.add(c)?.sum()
            },
            &Tensor::from_vec(vec![0.3, -0.7, 1.1]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(a.add(b), Err(Error::Dimension(_))));
        assert!(matches!(a.sub(b), Err(Error::Dimension(_))));
    }

    #[test]
    fn cosine_values() {
        let tape = Tape::new();
        let u = tape.constant(Tensor::from_vec(vec![1.0, 0.0]));
        let v = tape.constant(Tensor::from_vec(vec![0.0, 1.0]));
        let w = tape.constant(Tensor::from_vec(vec![1.0, 1.0]));
        let r = tape.constant(Tensor::from_vec(vec![0.3, -2.0]));
        assert!((r.cosine_similarity(r).unwrap().item() - 1.0).abs() < 1e-15);
        assert_eq!(u.cosine_similarity(v).unwrap().item(), 0.0);
        assert!((w.cosine_similarity(u).unwrap().item() - 0.7071067811865475).abs() < 1e-15);
        let z = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(z.cosine_similarity(u), Err(Error::Degenerate(_))));
    }

    #[test]
    fn euclidean_values_and_coincident_gradient() {
        let tape = Tape::new();
        let o = tape.param(Tensor::from_vec(vec![0.0, 0.0]));
        let p = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
        assert_eq!(o.euclidean_distance(p).unwrap().item(), 5.0);
        let d = o.euclidean_distance(o).unwrap();
        assert_eq!(d.item(), 0.0);
        let g = backward(d).unwrap();
        assert_eq!(g.get(o).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn euclidean_gradient_at_distinct_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let u = random(&mut rng, &[6]);
            let v = random(&mut rng, &[6]);
            let err =
                grad_check_many(|_, x| x[0].euclidean_distance(x[1]), &[u, v], 1e-5).unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn cross_entropy_values() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::from_vec(vec![0.7; 4]));
        let l = z.softmax_cross_entropy(2).unwrap().item();
        assert!((l - 1.3862943611198906).abs() < 1e-12);
        let big = tape.constant(Tensor::from_vec(vec![0.0, 800.0, 0.0]));
        let l = big.softmax_cross_entropy(1).unwrap().item();
        assert!(l < 1e-300);
        assert!(matches!(z.softmax_cross_entropy(4), Err(Error::Index(_))));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = random(&mut rng, &[5]);
        let tape = Tape::new();
        let zv = tape.param(z.clone());
        let g = backward(zv.softmax_cross_entropy(3).unwrap()).unwrap();
        let mut expected = softmax(z.data());
        expected[3] -= 1.0;
        for (a, b) in g.get(zv).unwrap().data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let err = grad_check(|_, x| x.softmax_cross_entropy(3), &z, 1e-5).unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_and_square_norm_gradients() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.5, -0.5, 2.0]));
        let g = backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.5, -0.5, 2.0]));
        let g = backward(x.mul(x).unwrap().sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, -1.0, 4.0]);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1e308, 1e308]));
        assert!(matches!(x.scale(10.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn grad_check_of_sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random(&mut rng, &[7]);
        let err = grad_check(|_, x| x.sum(), &p, 1e-5).unwrap();
        assert!(err < 1e-10);
        assert!(grad_check(|_, x| x.sum(), &p, 0.5).is_err());
    }

    #[test]
    fn grad_check_of_cosine_against_fixed_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = random(&mut rng, &[8]);
        let fixed = random(&mut rng, &[8]);
        let err = grad_check(
            |t, x| {
                let v = t.constant(fixed.clone());
                x.cosine_similarity(v)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn normalize_gradient_and_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random(&mut rng, &[5]);
        let w = random(&mut rng, &[5]);
        let err = grad_check(
            |t, x| {
                let w = t.constant(w.clone());
                x.l2_normalize()?.mul(w)?.sum()
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let tape = Tape::new();
        let z = tape.constant(Tensor::from_vec(vec![1e-12, 0.0]));
        assert!(matches!(z.l2_normalize(), Err(Error::Degenerate(_))));
    }

    #[test]
    fn concat_and_stack_route_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(&mut rng, &[3]);
        let b = random(&mut rng, &[2]);
        let w = random(&mut rng, &[5]);
        let err = grad_check_many(
            |t, v| {
                let w = t.constant(w.clone());
                let c = Var::concat(&[v[0], v[1]])?;
                let s = Var::stack(&[v[0].sum()?, v[1].mul(v[1])?.sum()?])?;
                c.mul(w)?.sum()?.add(s.softmax_cross_entropy(0)?)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
