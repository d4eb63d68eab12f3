//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] appends one node to its [`Tape`]. Node ids
//! increase in creation order, so walking the tape backwards from the loss
//! visits every node after all of its consumers.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    axis_split, inverse_permutation, last_two_swapped, permute_data, permuted_shape, row_width,
    softmax_in_place, MatmulDims, Tensor,
};

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MulConst(usize, Vec<f64>),
    MatMul(usize, usize, MatmulDims),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Sum(usize, usize),
    Mean(usize, usize),
    SumAll(usize),
    Softmax(usize, usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(usize),
    GatherRows(usize, Vec<usize>),
    ScatterAddRows(usize, Vec<usize>),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAll(..) => "sum_all",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu(..) => "relu",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of the operations of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_leaves: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
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

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Record a leaf. It receives a gradient iff `requires_grad` is set.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let needs = value.requires_grad;
        self.push(value, Op::Leaf, needs)
    }

    /// Record a non-differentiable constant.
    pub fn constant(&self, mut value: Tensor) -> Var<'_> {
        value.requires_grad = false;
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.param_leaves.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let mut value = store.get(id).clone();
        value.grad = None;
        let needs = store.is_trainable(id);
        let var = self.push(value, Op::Param, needs);
        self.param_leaves.borrow_mut().insert(id, var.id);
        var
    }

    /// First node whose value holds NaN or infinity, with the producing op.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Which side of zero every relu input lies on, in tape order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for n in nodes.iter() {
            if let Op::Relu(a) = n.op {
                out.extend(nodes[a].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let params = self
            .param_leaves
            .borrow()
            .iter()
            .map(|(&p, &node)| (p, node))
            .collect();
        Ok(Gradients {
            shapes: nodes[..=loss.id].iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            params,
        })
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

/// Accumulate the adjoint of node `id` (upstream gradient `g`) into its inputs.
fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf | Op::Param => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                let len = gb.len();
                for (i, y) in g.iter().enumerate() {
                    gb[i % len] += sign * y;
                }
            }
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let len = bv.len();
            if let Some(ga) = slot(grads, nodes, *a) {
                for (i, y) in g.iter().enumerate() {
                    ga[i] += y * bv[i % len];
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for (i, y) in g.iter().enumerate() {
                    gb[i % len] += y * av[i];
                }
            }
        }
        Op::Scale(a, f) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
            }
        }
        Op::MulConst(a, c) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, y), c) in ga.iter_mut().zip(g).zip(c) {
                    *x += y * c;
                }
            }
        }
        Op::MatMul(a, b, dims) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            // Two slots may not be borrowed at once; take them out temporarily.
            let mut ga = slot(grads, nodes, *a).map(std::mem::take);
            let mut gb = if a == b {
                None
            } else {
                slot(grads, nodes, *b).map(std::mem::take)
            };
            if a == b {
                // x·x: both operand roles accumulate into the same buffer.
                let mut tmp = vec![0.0; av.len()];
                dims.backward(av, bv, g, None, Some(&mut tmp));
                if let Some(ga) = ga.as_mut() {
                    dims.backward(av, bv, g, Some(ga), None);
                    ga.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
                }
            } else {
                dims.backward(av, bv, g, ga.as_deref_mut(), gb.as_deref_mut());
            }
            if let Some(ga) = ga {
                grads[*a] = Some(ga);
            }
            if let Some(gb) = gb {
                grads[*b] = Some(gb);
            }
        }
        Op::Permute(a, perm) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                let inv = inverse_permutation(perm);
                let back = permute_data(g, node.value.shape(), &inv);
                ga.iter_mut().zip(back).for_each(|(x, y)| *x += y);
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Concat(inputs, axis) => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis] * inner;
            let mut offset = 0;
            for &inp in inputs {
                let width = nodes[inp].value.shape()[*axis] * inner;
                if let Some(gi) = slot(grads, nodes, inp) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + width];
                        gi[o * width..(o + 1) * width]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                }
                offset += width;
            }
        }
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            let shape = nodes[*a].value.shape().to_vec();
            let (outer, len, inner) = axis_split(&shape, *axis, "sum").expect("checked at forward");
            let f = if matches!(node.op, Op::Mean(..)) {
                1.0 / len as f64
            } else {
                1.0
            };
            if let Some(ga) = slot(grads, nodes, *a) {
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            ga[(o * len + l) * inner + i] += f * g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Softmax(a, axis) => {
            let y = node.value.data();
            let (outer, len, inner) =
                axis_split(node.value.shape(), *axis, "softmax").expect("checked at forward");
            if let Some(ga) = slot(grads, nodes, *a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|l| g[base + l * inner] * y[base + l * inner])
                            .sum();
                        for l in 0..len {
                            let k = base + l * inner;
                            ga[k] += y[k] * (g[k] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = nodes[*gamma].value.data();
            let d = gv.len();
            let rows = xhat.len() / d;
            if let Some(gg) = slot(grads, nodes, *gamma) {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *beta) {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            if let Some(gx) = slot(grads, nodes, *x) {
                for r in 0..rows {
                    let row = r * d..(r + 1) * d;
                    let dxhat: Vec<f64> = (0..d).map(|j| g[r * d + j] * gv[j]).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = dxhat
                        .iter()
                        .zip(&xhat[row.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / d as f64;
                    for j in 0..d {
                        gx[r * d + j] +=
                            rstd[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                    }
                }
            }
        }
        Op::Relu(a) => {
            let y = node.value.data();
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..ga.len() {
                    if y[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::GatherRows(a, index) => {
            let width = row_width(nodes[*a].value.shape()).expect("checked at forward");
            if let Some(ga) = slot(grads, nodes, *a) {
                for (k, &r) in index.iter().enumerate() {
                    for j in 0..width {
                        ga[r * width + j] += g[k * width + j];
                    }
                }
            }
        }
        Op::ScatterAddRows(a, index) => {
            let width = row_width(nodes[*a].value.shape()).expect("checked at forward");
            if let Some(ga) = slot(grads, nodes, *a) {
                for (k, &r) in index.iter().enumerate() {
                    for j in 0..width {
                        ga[k * width + j] += g[r * width + j];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let rows = labels.len();
            let classes = probs.len() / rows;
            if let Some(gl) = slot(grads, nodes, *logits) {
                let f = g[0] / rows as f64;
                for (r, &y) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let target = if c == y { 1.0 } else { 0.0 };
                        gl[r * classes + c] += f * (probs[r * classes + c] - target);
                    }
                }
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` if the loss
    /// does not depend on it through differentiable paths.
    pub fn wrt(&self, var: Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Some(Tensor::new(&self.shapes[var.id], g.clone()).expect("gradient matches value shape"))
    }

    /// `(parameter, gradient)` pairs for every parameter that appeared on the tape.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(p, node)| self.grads.get(node)?.as_deref().map(|g| (p, g)))
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the recorded value.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn needs(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = {
            let a = self.value();
            let b = other.value();
            if !broadcast_ok(a.shape(), b.shape()) {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            let bd = b.data();
            let len = bd.len();
            let data = a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % len])).collect();
            Tensor::new(a.shape(), data)?
        };
        let needs = self.needs() || other.needs();
        Ok(self.tape.push(out, op(self.id, other.id), needs))
    }

    /// Elementwise sum; `other` may omit leading dimensions of `self`.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        if broadcast_ok(&other.shape(), &self.shape()) && self.shape() != other.shape() {
            return other.add(*self);
        }
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        if broadcast_ok(&other.shape(), &self.shape()) && self.shape() != other.shape() {
            return other.mul(*self);
        }
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        let out = self.value().map(|v| v * factor);
        self.tape.push(out, Op::Scale(self.id, factor), self.needs())
    }

    /// Elementwise product with a same-shaped constant.
    pub fn mul_const(&self, c: &Tensor) -> Result<Var<'t>> {
        let out = self
            .value()
            .zip_map(c, |a, b| a * b)
            .map_err(|_| Error::shape("mul_const", &self.shape(), c.shape()))?;
        Ok(self
            .tape
            .push(out, Op::MulConst(self.id, c.data().to_vec()), self.needs()))
    }

    /// Sum with a non-differentiable constant (same broadcast rule as `add`).
    pub fn add_const(&self, c: &Tensor) -> Result<Var<'t>> {
        let cv = self.tape.constant(c.clone());
        self.add(cv)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (out, dims) = {
            let a = self.value();
            let b = other.value();
            let dims = MatmulDims::infer(a.shape(), b.shape())?;
            let mut out = vec![0.0; dims.out_numel()];
            dims.forward(a.data(), b.data(), &mut out);
            (Tensor::new(&dims.out_shape, out)?, dims)
        };
        let needs = self.needs() || other.needs();
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id, dims), needs))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let out = {
            let v = self.value();
            let shape = permuted_shape(v.shape(), perm)?;
            Tensor::new(&shape, permute_data(v.data(), v.shape(), perm))?
        };
        Ok(self
            .tape
            .push(out, Op::Permute(self.id, perm.to_vec()), self.needs()))
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        self.permute(&last_two_swapped(self.shape().len())?)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id), self.needs()))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut shape = base.clone();
        shape[axis] = 0;
        for p in parts {
            first.same_tape(p);
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
            if !compatible {
                return Err(Error::shape("concat", &base, &s));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        {
            let values: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
            for o in 0..outer {
                for v in &values {
                    let width = v.numel() / outer;
                    data.extend_from_slice(&v.data()[o * width..(o + 1) * width]);
                }
            }
        }
        let out = Tensor::new(&shape, data)?;
        let needs = parts.iter().any(|p| p.needs());
        Ok(tape.push(out, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), needs))
    }

    fn reduce(&self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let out = {
            let v = self.value();
            let (outer, len, inner) = axis_split(v.shape(), axis, "reduce")?;
            let d = v.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += d[(o * len + l) * inner + i];
                    }
                }
            }
            if mean {
                out.iter_mut().for_each(|x| *x /= len as f64);
            }
            let mut shape = v.shape().to_vec();
            shape.remove(axis);
            Tensor::new(&shape, out)?
        };
        let op = if mean {
            Op::Mean(self.id, axis)
        } else {
            Op::Sum(self.id, axis)
        };
        Ok(self.tape.push(out, op, self.needs()))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, true)
    }

    pub fn sum_all(&self) -> Var<'t> {
        let total = self.value().data().iter().sum();
        self.tape
            .push(Tensor::scalar(total), Op::SumAll(self.id), self.needs())
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let out = self.value().softmax(axis)?;
        Ok(self.tape.push(out, Op::Softmax(self.id, axis), self.needs()))
    }

    /// Normalize over the last axis, then apply `gamma * x̂ + beta`.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (out, xhat, rstd) = {
            let x = self.value();
            let gv = gamma.value();
            let bv = beta.value();
            let d = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", &[], gv.shape()))?;
            if gv.shape() != [d] || bv.shape() != [d] {
                return Err(Error::shape("layer_norm", x.shape(), gv.shape()));
            }
            let rows = x.numel() / d;
            let mut xhat = vec![0.0; x.numel()];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; x.numel()];
            for r in 0..rows {
                let row = &x.data()[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let s = 1.0 / (var + eps).sqrt();
                rstd[r] = s;
                for j in 0..d {
                    let h = (row[j] - mean) * s;
                    xhat[r * d + j] = h;
                    out[r * d + j] = gv.data()[j] * h + bv.data()[j];
                }
            }
            (Tensor::new(x.shape(), out)?, xhat, rstd)
        };
        let needs = self.needs() || gamma.needs() || beta.needs();
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    pub fn relu(&self) -> Var<'t> {
        let out = self.value().map(|v| v.max(0.0));
        self.tape.push(out, Op::Relu(self.id), self.needs())
    }

    /// Inverted dropout with a mask drawn from `seed`. Rate 0 returns `self`.
    pub fn dropout(&self, rate: f64, seed: u64) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(*self);
        }
        let mask = dropout_mask(&self.shape(), rate, seed);
        self.mul_const(&mask)
    }

    /// Rows along axis 0 selected by `index` (embedding lookup, cluster gather).
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t>> {
        let out = self.value().gather_rows(index)?;
        Ok(self
            .tape
            .push(out, Op::GatherRows(self.id, index.to_vec()), self.needs()))
    }

    /// Sum rows of `self` into `rows` output rows: `out[index[k]] += self[k]`.
    pub fn scatter_add_rows(&self, index: &[usize], rows: usize) -> Result<Var<'t>> {
        let out = {
            let v = self.value();
            let width = row_width(v.shape())?;
            if index.len() != v.shape()[0] {
                return Err(Error::shape("scatter_add_rows", v.shape(), &[index.len()]));
            }
            if rows == 0 {
                return Err(Error::Contract("scatter_add_rows into zero rows".into()));
            }
            let mut out = vec![0.0; rows * width];
            for (k, &r) in index.iter().enumerate() {
                if r >= rows {
                    return Err(Error::Contract(format!("scatter index {r} >= {rows}")));
                }
                for j in 0..width {
                    out[r * width + j] += v.data()[k * width + j];
                }
            }
            let mut shape = v.shape().to_vec();
            shape[0] = rows;
            Tensor::new(&shape, out)?
        };
        Ok(self
            .tape
            .push(out, Op::ScatterAddRows(self.id, index.to_vec()), self.needs()))
    }

    /// Mean softmax cross-entropy of `[rows, classes]` logits against labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = {
            let v = self.value();
            if v.rank() != 2 || v.shape()[0] != labels.len() {
                return Err(Error::shape("cross_entropy", v.shape(), &[labels.len()]));
            }
            let classes = v.shape()[1];
            if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
                return Err(Error::Contract(format!(
                    "label {bad} out of range for {classes} classes"
                )));
            }
            let mut probs = v.data().to_vec();
            let mut loss = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                let row = &v.data()[r * classes..(r + 1) * classes];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                loss += lse - row[y];
            }
            softmax_in_place(&mut probs, labels.len(), classes, 1);
            (loss / labels.len() as f64, probs)
        };
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            self.needs(),
        ))
    }
}

/// Keep-mask scaled by `1 / (1 - rate)`, reproducible from `seed`.
pub fn dropout_mask(shape: &[usize], rate: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - rate;
    Tensor::from_fn(shape, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
}
