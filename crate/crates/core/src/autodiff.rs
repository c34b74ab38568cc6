//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive in execution order; [`Tape::backward`]
//! replays the record in reverse. Model code is written against the [`Ops`]
//! trait so the same forward pass runs either on a tape (training) or on
//! plain tensors through [`Eval`] (inference, frozen reference branches).
//! Both paths call the same [`Tensor`] kernels, so their values agree
//! bit for bit.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    AddRow(usize, usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Silu(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Concat(Vec<usize>, usize),
    NarrowCols(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations for one loss evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Accumulated gradients, indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    leaves: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero (with `v`'s shape) when the loss
    /// does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// `(node id, gradient)` for every grad-requiring leaf.
    pub fn leaves(&self) -> impl Iterator<Item = (usize, Tensor)> + '_ {
        self.leaves.iter().map(|&id| (id, self.get(Var(id))))
    }
}

/// Reduce a broadcast gradient back to the operand's shape.
fn unbroadcast(grad: &Tensor, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    if grad.shape() == shape {
        grad.clone()
    } else if n == 1 {
        Tensor::from_parts(shape.to_vec(), vec![grad.data().iter().sum()])
    } else {
        Tensor::from_parts(shape.to_vec(), grad.data().to_vec())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            let data: Vec<f64> = acc.data().iter().zip(g.data()).map(|(a, b)| a + b).collect();
            *acc = Tensor::from_parts(acc.shape().to_vec(), data);
        }
        None => *slot = Some(g),
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var> {
        let value = f(&self.nodes[a.0].value)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, op, rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var> {
        let value = f(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a.0, b.0), Tensor::add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a.0, b.0), Tensor::sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a.0, b.0), Tensor::mul)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::MatMul(a.0, b.0), Tensor::matmul)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.binary(a, row, Op::AddRow(a.0, row.0), Tensor::add_row)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a.0, c), |t| t.scale(c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a.0), Tensor::sigmoid)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::LogSigmoid(a.0), Tensor::log_sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Silu(a.0), Tensor::silu)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a.0), Tensor::square)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sum(a.0), Tensor::sum)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Mean(a.0), Tensor::mean)
    }

    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::SumLast(a.0), Tensor::sum_last)
    }

    pub fn narrow_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.unary(a, Op::NarrowCols(a.0, start), |t| t.narrow_cols(start, end))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let tensors: Vec<&Tensor> = ids.iter().map(|&i| &self.nodes[i].value).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::Concat(ids, axis), rg))
    }

    /// Reverse sweep from a scalar `loss`. The tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NotScalar(loss_shape));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::from_parts(loss_shape, vec![1.0]));
        }

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let val = |i: usize| &self.nodes[i].value;
            let wants = |i: usize| self.nodes[i].requires_grad;
            let push = |i: usize, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if wants(i) {
                    accumulate(&mut grads[i], t);
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                &Op::Add(a, b) => {
                    push(a, unbroadcast(&g, val(a).shape()), &mut grads);
                    push(b, unbroadcast(&g, val(b).shape()), &mut grads);
                }
                &Op::Sub(a, b) => {
                    push(a, unbroadcast(&g, val(a).shape()), &mut grads);
                    let neg = g.map("sub_grad", |v| -v)?;
                    push(b, unbroadcast(&neg, val(b).shape()), &mut grads);
                }
                &Op::Mul(a, b) => {
                    if wants(a) {
                        let ga = g.mul(val(b))?;
                        push(a, unbroadcast(&ga, val(a).shape()), &mut grads);
                    }
                    if wants(b) {
                        let gb = g.mul(val(a))?;
                        push(b, unbroadcast(&gb, val(b).shape()), &mut grads);
                    }
                }
                &Op::Scale(a, c) => push(a, g.scale(c)?, &mut grads),
                &Op::MatMul(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    let g2 = if bv.shape().len() == 1 {
                        g.reshape(vec![g.numel(), 1])?
                    } else {
                        g.clone()
                    };
                    if wants(a) {
                        let bt = if bv.shape().len() == 1 {
                            bv.reshape(vec![1, bv.numel()])?
                        } else {
                            bv.transpose()?
                        };
                        push(a, g2.matmul(&bt)?, &mut grads);
                    }
                    if wants(b) {
                        let gb = av.transpose()?.matmul(&g2)?;
                        push(b, gb.reshape(bv.shape().to_vec())?, &mut grads);
                    }
                }
                &Op::AddRow(a, row) => {
                    push(a, g.clone(), &mut grads);
                    if wants(row) {
                        let s = g.sum_rows()?;
                        push(row, s.reshape(val(row).shape().to_vec())?, &mut grads);
                    }
                }
                &Op::Sigmoid(a) => {
                    let s = &node.value;
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(s.data())
                        .map(|(gi, si)| gi * si * (1.0 - si))
                        .collect();
                    push(a, Tensor::from_parts(g.shape().to_vec(), d), &mut grads);
                }
                &Op::LogSigmoid(a) => {
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(val(a).data())
                        .map(|(gi, &u)| gi * tensor::sigmoid(-u))
                        .collect();
                    push(a, Tensor::from_parts(g.shape().to_vec(), d), &mut grads);
                }
                &Op::Silu(a) => {
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(val(a).data())
                        .map(|(gi, &u)| gi * tensor::silu_grad(u))
                        .collect();
                    push(a, Tensor::from_parts(g.shape().to_vec(), d), &mut grads);
                }
                &Op::Square(a) => {
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(val(a).data())
                        .map(|(gi, &u)| 2.0 * u * gi)
                        .collect();
                    push(a, Tensor::from_parts(g.shape().to_vec(), d), &mut grads);
                }
                &Op::Sum(a) => {
                    let gv = g.data()[0];
                    let shape = val(a).shape().to_vec();
                    let n = val(a).numel();
                    push(a, Tensor::from_parts(shape, vec![gv; n]), &mut grads);
                }
                &Op::Mean(a) => {
                    let n = val(a).numel();
                    let gv = g.data()[0] / n as f64;
                    let shape = val(a).shape().to_vec();
                    push(a, Tensor::from_parts(shape, vec![gv; n]), &mut grads);
                }
                &Op::SumLast(a) => {
                    let av = val(a);
                    let c = av.cols();
                    let d: Vec<f64> = g.data().iter().flat_map(|&gi| std::iter::repeat_n(gi, c)).collect();
                    push(a, Tensor::from_parts(av.shape().to_vec(), d), &mut grads);
                }
                Op::Concat(ids, axis) => {
                    let mut offset = 0;
                    for &i in ids {
                        let shape = val(i).shape().to_vec();
                        let part = if shape.len() == 1 || *axis == 0 {
                            let n = val(i).numel();
                            let t = Tensor::from_parts(shape, g.data()[offset..offset + n].to_vec());
                            offset += n;
                            t
                        } else {
                            let w = shape[1];
                            let t = g.narrow_cols(offset, offset + w)?;
                            offset += w;
                            t
                        };
                        push(i, part, &mut grads);
                    }
                }
                &Op::NarrowCols(a, start) => {
                    let av = val(a);
                    let (c, w) = (av.cols(), g.cols());
                    let mut d = vec![0.0; av.numel()];
                    for (r, grow) in g.data().chunks(w).enumerate() {
                        d[r * c + start..r * c + start + w].copy_from_slice(grow);
                    }
                    push(a, Tensor::from_parts(av.shape().to_vec(), d), &mut grads);
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.requires_grad)
            .map(|(i, _)| i)
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            leaves,
        })
    }
}

/// Primitive set shared by the tape and plain evaluation.
pub trait Ops {
    type Value: Clone;

    fn constant(&mut self, t: Tensor) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, c: f64) -> Result<Self::Value>;
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add_row(&mut self, a: &Self::Value, row: &Self::Value) -> Result<Self::Value>;
    fn silu(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn square(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn sum_last(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn log_sigmoid(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn mean(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn concat(&mut self, parts: &[Self::Value], axis: usize) -> Result<Self::Value>;
    fn narrow_cols(&mut self, a: &Self::Value, start: usize, end: usize) -> Result<Self::Value>;
}

impl Ops for Tape {
    type Value = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        Tape::constant(self, t)
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        Tape::value(self, *v)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::add(self, *a, *b)
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::sub(self, *a, *b)
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::mul(self, *a, *b)
    }
    fn scale(&mut self, a: &Var, c: f64) -> Result<Var> {
        Tape::scale(self, *a, c)
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::matmul(self, *a, *b)
    }
    fn add_row(&mut self, a: &Var, row: &Var) -> Result<Var> {
        Tape::add_row(self, *a, *row)
    }
    fn silu(&mut self, a: &Var) -> Result<Var> {
        Tape::silu(self, *a)
    }
    fn square(&mut self, a: &Var) -> Result<Var> {
        Tape::square(self, *a)
    }
    fn sum_last(&mut self, a: &Var) -> Result<Var> {
        Tape::sum_last(self, *a)
    }
    fn log_sigmoid(&mut self, a: &Var) -> Result<Var> {
        Tape::log_sigmoid(self, *a)
    }
    fn mean(&mut self, a: &Var) -> Result<Var> {
        Tape::mean(self, *a)
    }
    fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        Tape::concat(self, parts, axis)
    }
    fn narrow_cols(&mut self, a: &Var, start: usize, end: usize) -> Result<Var> {
        Tape::narrow_cols(self, *a, start, end)
    }
}

/// Gradient-free evaluation on plain tensors.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Ops for Eval {
    type Value = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.sub(b)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.mul(b)
    }
    fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        a.scale(c)
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.matmul(b)
    }
    fn add_row(&mut self, a: &Tensor, row: &Tensor) -> Result<Tensor> {
        a.add_row(row)
    }
    fn silu(&mut self, a: &Tensor) -> Result<Tensor> {
        a.silu()
    }
    fn square(&mut self, a: &Tensor) -> Result<Tensor> {
        a.square()
    }
    fn sum_last(&mut self, a: &Tensor) -> Result<Tensor> {
        a.sum_last()
    }
    fn log_sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        a.log_sigmoid()
    }
    fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        a.mean()
    }
    fn concat(&mut self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat(&refs, axis)
    }
    fn narrow_cols(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        a.narrow_cols(start, end)
    }
}
