//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is applied, so node indices are
//! already a topological order and the backward pass is a single reverse
//! sweep. Parameters are bound from a [`ParamStore`] as leaves; binding the
//! same parameter twice yields the same node.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use super::NumericsError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction target for `sum` and `mean`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// Everything to a `1 x 1` scalar.
    All,
    /// Each row to one value, giving an `m x 1` column.
    PerRow,
    /// Each column to one value, giving a `1 x n` row.
    PerColumn,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Sum(Var, Reduce),
    Mean(Var, Reduce),
    Concat(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat(_) => "concat",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    param: Option<ParamId>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn broadcast_shape(a: [usize; 2], b: [usize; 2]) -> Option<[usize; 2]> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some([dim(a[0], b[0])?, dim(a[1], b[1])?])
}

#[inline]
fn bidx(shape: [usize; 2], r: usize, c: usize) -> usize {
    let rr = if shape[0] == 1 { 0 } else { r };
    let cc = if shape[1] == 1 { 0 } else { c };
    rr * shape[1] + cc
}

fn broadcast_zip(a: &Tensor, b: &Tensor, out: [usize; 2], f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (sa, sb) = (a.shape(), b.shape());
    let (da, db) = (a.data(), b.data());
    let mut data = Vec::with_capacity(out[0] * out[1]);
    for r in 0..out[0] {
        for c in 0..out[1] {
            data.push(f(da[bidx(sa, r, c)], db[bidx(sb, r, c)]));
        }
    }
    Tensor::new(out[0], out[1], data).expect("broadcast output shape")
}

/// Sums a full-size gradient back down to a broadcast operand's shape.
fn reduce_to(grad: &Tensor, shape: [usize; 2]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    let g = grad.data();
    let cols = grad.cols();
    let od = out.data_mut();
    for r in 0..grad.rows() {
        for c in 0..cols {
            od[bidx(shape, r, c)] += g[r * cols + c];
        }
    }
    out
}

fn reduce_value(x: &Tensor, how: Reduce, mean: bool) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let d = x.data();
    match how {
        Reduce::All => {
            let s = x.sum();
            Tensor::scalar(if mean { s / (m * n) as f64 } else { s })
        }
        Reduce::PerRow => {
            let k = if mean { 1.0 / n as f64 } else { 1.0 };
            let v: Vec<f64> = (0..m).map(|r| d[r * n..(r + 1) * n].iter().sum::<f64>() * k).collect();
            Tensor::column(&v)
        }
        Reduce::PerColumn => {
            let k = if mean { 1.0 / m as f64 } else { 1.0 };
            let mut v = vec![0.0; n];
            for r in 0..m {
                for (c, acc) in v.iter_mut().enumerate() {
                    *acc += d[r * n + c];
                }
            }
            v.iter_mut().for_each(|x| *x *= k);
            Tensor::row(&v)
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var, NumericsError> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(NumericsError::Domain {
                node: id,
                op: op.name(),
                detail: "non-finite output".into(),
            });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => {
                self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
            }
            Op::Neg(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Clamp(a, ..)
            | Op::Sum(a, _)
            | Op::Mean(a, _) => self.nodes[a.0].requires_grad,
            Op::Concat(parts) => parts.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            param: None,
            requires_grad,
        });
        Ok(Var(id))
    }

    /// A non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            param: None,
            requires_grad: false,
        });
        Var(id)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Binds a trainable parameter; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            value: store.get(id).clone(),
            param: Some(id),
            requires_grad: true,
        });
        self.bound.insert(id, Var(idx));
        Var(idx)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v)
    }

    fn binary_shape(&self, a: Var, b: Var, op: &str) -> Result<[usize; 2], NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        broadcast_shape(sa, sb).ok_or_else(|| {
            NumericsError::Shape(format!("{op}: cannot broadcast {sa:?} with {sb:?}"))
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.binary_shape(a, b, "add")?;
        let v = broadcast_zip(self.value(a), self.value(b), out, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.binary_shape(a, b, "mul")?;
        let v = broadcast_zip(self.value(a), self.value(b), out, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).map(|x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
            return Err(NumericsError::Domain {
                node: self.nodes.len(),
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let v = x.map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    /// Elementwise clamp; gradient passes only where the input is inside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, NumericsError> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    pub fn sum(&mut self, a: Var, how: Reduce) -> Result<Var, NumericsError> {
        let v = reduce_value(self.value(a), how, false);
        self.push(Op::Sum(a, how), v)
    }

    pub fn mean(&mut self, a: Var, how: Reduce) -> Result<Var, NumericsError> {
        let v = reduce_value(self.value(a), how, true);
        self.push(Op::Mean(a, how), v)
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::hcat(&tensors)?;
        self.push(Op::Concat(parts.to_vec()), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, NumericsError> {
        let kv = self.scalar(k);
        self.mul(a, kv)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.mul(a, a)
    }

    /// Reverse sweep from a scalar output. Parameters the output does not
    /// depend on receive zero gradients.
    pub fn backward(&self, output: Var, store: &ParamStore) -> Result<Gradients, NumericsError> {
        let out = self.value(output);
        if out.shape() != [1, 1] {
            return Err(NumericsError::Shape(format!(
                "backward needs a scalar output, got {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));
        let mut result = Gradients::zeros_like(store);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if let Some(pid) = node.param {
                        result.accumulate(pid, &g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].requires_grad {
                        let mut ga = vec![0.0; ta.len()];
                        gemm(&g, false, tb, true, &mut ga, 0.0);
                        let ga = Tensor::new(ta.rows(), ta.cols(), ga)?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut gb = vec![0.0; tb.len()];
                        gemm(ta, true, &g, false, &mut gb, 0.0);
                        let gb = Tensor::new(tb.rows(), tb.cols(), gb)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.nodes[v.0].requires_grad {
                            let r = reduce_to(&g, self.value(v).shape());
                            accumulate(&mut grads, v, r);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let shape = g.shape();
                    for (v, other) in [(*a, *b), (*b, *a)] {
                        if self.nodes[v.0].requires_grad {
                            let full = broadcast_zip(&g, self.value(other), shape, |x, y| x * y);
                            let r = reduce_to(&full, self.value(v).shape());
                            accumulate(&mut grads, v, r);
                        }
                    }
                }
                Op::Neg(a) => accumulate(&mut grads, *a, g.map(|x| -x)),
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let d = g.zip_map(self.value(*a), |gi, x| gi * sigmoid(x));
                    accumulate(&mut grads, *a, d);
                }
                Op::Log(a) => {
                    let d = g.zip_map(self.value(*a), |gi, x| gi / x);
                    accumulate(&mut grads, *a, d);
                }
                Op::Exp(a) => {
                    let d = g.zip_map(&node.value, |gi, y| gi * y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let d = g.zip_map(self.value(*a), |gi, x| {
                        if x >= lo && x <= hi {
                            gi
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a, how) | Op::Mean(a, how) => {
                    let x = self.value(*a);
                    let (m, n) = (x.rows(), x.cols());
                    let mean = matches!(node.op, Op::Mean(..));
                    let k = match (how, mean) {
                        (_, false) => 1.0,
                        (Reduce::All, true) => 1.0 / (m * n) as f64,
                        (Reduce::PerRow, true) => 1.0 / n as f64,
                        (Reduce::PerColumn, true) => 1.0 / m as f64,
                    };
                    let gd = g.data();
                    let mut data = Vec::with_capacity(m * n);
                    for r in 0..m {
                        for c in 0..n {
                            let gv = match how {
                                Reduce::All => gd[0],
                                Reduce::PerRow => gd[r],
                                Reduce::PerColumn => gd[c],
                            };
                            data.push(gv * k);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(m, n, data)?);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pt = self.value(*p);
                        let (m, w) = (pt.rows(), pt.cols());
                        if self.nodes[p.0].requires_grad {
                            let mut data = Vec::with_capacity(m * w);
                            for r in 0..m {
                                let row = g.row_slice(r);
                                data.extend_from_slice(&row[offset..offset + w]);
                            }
                            accumulate(&mut grads, *p, Tensor::new(m, w, data)?);
                        }
                        offset += w;
                    }
                }
            }
        }
        Ok(result)
    }

    /// Value of the scalar output together with all parameter gradients.
    pub fn value_and_grad(
        &self,
        output: Var,
        store: &ParamStore,
    ) -> Result<(f64, Gradients), NumericsError> {
        let grads = self.backward(output, store)?;
        Ok((self.value(output).item(), grads))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| store.add(*n, t.clone()))
            .collect();
        (store, ids)
    }

    #[test]
    fn square_at_three() {
        let (store, ids) = store_with(&[("x", Tensor::scalar(3.0))]);
        let mut g = Graph::new();
        let x = g.param(&store, ids[0]);
        let y = g.mul(x, x).unwrap();
        let (v, grads) = g.value_and_grad(y, &store).unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(grads.get(ids[0]).item(), 6.0);
    }

    #[test]
    fn sigmoid_at_zero() {
        let (store, ids) = store_with(&[("x", Tensor::scalar(0.0))]);
        let mut g = Graph::new();
        let x = g.param(&store, ids[0]);
        let y = g.sigmoid(x).unwrap();
        let (v, grads) = g.value_and_grad(y, &store).unwrap();
        assert_eq!(v, 0.5);
        assert_eq!(grads.get(ids[0]).item(), 0.25);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let (store, ids) = store_with(&[
            ("used", Tensor::row(&[1.0, 2.0])),
            ("unused", Tensor::row(&[5.0, 6.0, 7.0])),
        ]);
        let mut g = Graph::new();
        let x = g.param(&store, ids[0]);
        let y = g.sum(x, Reduce::All).unwrap();
        let grads = g.backward(y, &store).unwrap();
        assert_eq!(grads.get(ids[1]).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_distributes_one_over_n() {
        let (store, ids) = store_with(&[("x", Tensor::new(2, 3, vec![1.0; 6]).unwrap())]);
        let mut g = Graph::new();
        let x = g.param(&store, ids[0]);
        let y = g.mean(x, Reduce::All).unwrap();
        let grads = g.backward(y, &store).unwrap();
        assert!(grads.get(ids[0]).data().iter().all(|&d| d == 1.0 / 6.0));
    }

    #[test]
    fn log_of_non_positive_reports_node() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[1.0, -1.0]));
        match g.log(x) {
            Err(NumericsError::Domain { node, op, .. }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "log");
            }
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn exp_overflow_is_a_numeric_error() {
        let mut g = Graph::new();
        let x = g.scalar(1000.0);
        assert!(matches!(g.exp(x), Err(NumericsError::Domain { op: "exp", .. })));
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(3, 2));
        assert!(matches!(g.add(a, b), Err(NumericsError::Shape(_))));
        assert!(matches!(g.matmul(a, a), Err(NumericsError::Shape(_))));
        let c = g.constant(Tensor::zeros(3, 2));
        assert!(matches!(g.concat(&[a, c]), Err(NumericsError::Shape(_))));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 2));
        assert!(g.backward(a, &store).is_err());
    }

    #[test]
    fn softplus_sign() {
        for x in [-50.0, -3.0, 0.0, 2.0, 40.0] {
            assert!(softplus(x) > 0.0);
            assert!(-softplus(x) < 0.0);
        }
    }

    #[test]
    fn broadcast_bias_gradient_sums_rows() {
        let (store, ids) = store_with(&[("b", Tensor::row(&[0.0, 0.0]))]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = g.param(&store, ids[0]);
        let y = g.add(x, b).unwrap();
        let s = g.sum(y, Reduce::All).unwrap();
        let grads = g.backward(s, &store).unwrap();
        assert_eq!(grads.get(ids[0]).data(), &[3.0, 3.0]);
    }
}
