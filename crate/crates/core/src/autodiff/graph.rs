//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and [`Graph::backward`] simply walks it in reverse.

use std::collections::HashMap;
use std::sync::Arc;

use super::array::Array;
use super::conv;
use crate::error::{Error, Result};

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Conv2d { x: Var, w: Var, stride: usize },
    Deconv2d { x: Var, w: Var, stride: usize },
    AddBias { x: Var, b: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Selu(Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatLast(Vec<Var>),
    SliceLast { x: Var, lo: usize },
    Dot(Var, Var),
    Stack(Vec<Var>),
    Scale(Var, f64),
    Softmax(Var),
    ScalarMul { s: Var, x: Var },
    Sum(Var),
    SqErr { pred: Var, target: Arc<Array> },
}

#[derive(Debug)]
struct Node {
    value: Arc<Array>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
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

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Array> {
        Arc::clone(&self.nodes[v.0].value)
    }

    /// A constant (non-trainable) input.
    pub fn input(&mut self, value: impl Into<Arc<Array>>) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op: Op::Input,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf identified by `id`; repeated calls with the same id
    /// return the same node.
    pub fn param(&mut self, id: usize, value: &Arc<Array>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Arc::clone(value),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let out = conv::conv2d(self.value(x), self.value(w), stride)?;
        Ok(self.push(out, Op::Conv2d { x, w, stride }))
    }

    pub fn deconv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        target: (usize, usize),
    ) -> Result<Var> {
        let out = conv::deconv2d(self.value(x), self.value(w), stride, target)?;
        Ok(self.push(out, Op::Deconv2d { x, w, stride }))
    }

    /// Add a per-channel bias along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = *xv.shape().last().unwrap_or(&0);
        if bv.shape() != [c] {
            return Err(Error::Shape(format!(
                "bias of shape {:?} does not match {c} channels",
                bv.shape()
            )));
        }
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias { x, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).check_same_shape(self.value(b), "add")?;
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).check_same_shape(self.value(b), "mul")?;
        let out = self.value(a).zip_map(self.value(b), |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn selu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(selu);
        self.push(out, Op::Selu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    /// Concatenate along the last axis; all other axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(
            *parts
                .first()
                .ok_or_else(|| Error::Shape("empty concat".into()))?,
        );
        let lead = first.shape()[..first.shape().len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::Shape(format!(
                    "concat: shape {s:?} incompatible with leading dims {lead:?}"
                )));
            }
            widths.push(s[lead.len()]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Array::from_vec(shape, out)?;
        Ok(self.push(out, Op::ConcatLast(parts.to_vec())))
    }

    /// Channels `lo..hi` of the last axis.
    pub fn slice_last(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap_or(&0);
        if lo >= hi || hi > c {
            return Err(Error::Shape(format!(
                "slice {lo}..{hi} out of {c} channels"
            )));
        }
        let data: Vec<f64> = xv
            .data()
            .chunks(c)
            .flat_map(|row| row[lo..hi].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = hi - lo;
        let out = Array::from_vec(shape, data)?;
        Ok(self.push(out, Op::SliceLast { x, lo }))
    }

    /// Inner product of the flattened operands, as a 1-element array.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).check_same_shape(self.value(b), "dot")?;
        let out = Array::scalar(self.value(a).dot(self.value(b)));
        Ok(self.push(out, Op::Dot(a, b)))
    }

    /// Stack scalar nodes into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(scalars.len());
        for &s in scalars {
            let v = self.value(s);
            if v.len() != 1 {
                return Err(Error::Shape(format!(
                    "stack expects scalars, got {:?}",
                    v.shape()
                )));
            }
            data.push(v.data()[0]);
        }
        let out = Array::from_vec(vec![scalars.len()], data)?;
        Ok(self.push(out, Op::Stack(scalars.to_vec())))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k))
    }

    pub fn softmax(&mut self, v: Var) -> Var {
        let xv = self.value(v);
        let out = Array::from_vec(xv.shape().to_vec(), softmax(xv.data())).expect("same length");
        self.push(out, Op::Softmax(v))
    }

    /// Element `i` of a vector as a scalar node (implemented as a one-hot dot).
    pub fn pick(&mut self, v: Var, i: usize) -> Result<Var> {
        let len = self.value(v).len();
        if i >= len {
            return Err(Error::Shape(format!("index {i} out of {len}")));
        }
        let onehot = self.input(Array::from_fn(&[len], |k| if k == i { 1.0 } else { 0.0 }));
        let shape = self.value(v).shape().to_vec();
        if shape != [len] {
            return Err(Error::Shape(format!(
                "pick expects a vector, got {shape:?}"
            )));
        }
        self.dot(v, onehot)
    }

    /// Scalar node `s` times array node `x`.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::Shape(format!(
                "scalar_mul expects a scalar, got {:?}",
                sv.shape()
            )));
        }
        let k = sv.data()[0];
        let out = self.value(x).map(|v| v * k);
        Ok(self.push(out, Op::ScalarMul { s, x }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Array::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// `sum((pred - target)^2)` against a constant target.
    pub fn sq_err(&mut self, pred: Var, target: Arc<Array>) -> Result<Var> {
        self.value(pred).check_same_shape(&target, "sq_err")?;
        let loss: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(Array::scalar(loss), Op::SqErr { pred, target }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Input | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input | Op::Param => unreachable!(),
                Op::Conv2d { x, w, stride } => {
                    let (dx, dw) =
                        conv::conv2d_backward(self.value(*x), self.value(*w), *stride, &g)?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::Deconv2d { x, w, stride } => {
                    let (dx, dw) =
                        conv::deconv2d_backward(self.value(*x), self.value(*w), *stride, &g)?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::AddBias { x, b } => {
                    let c = self.value(*b).len();
                    let mut db = Array::zeros(&[c]);
                    for chunk in g.data().chunks(c) {
                        for (d, v) in db.data_mut().iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |p, q| p * q);
                    let db = g.zip_map(self.value(*a), |p, q| p * q);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Selu(x) => {
                    let dx = g.zip_map(self.value(*x), |gv, xv| gv * selu_grad(xv));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let dx = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y));
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatLast(parts) => {
                    let widths: Vec<usize> = parts
                        .iter()
                        .map(|p| *self.value(*p).shape().last().unwrap())
                        .collect();
                    let total: usize = widths.iter().sum();
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        let data: Vec<f64> = g
                            .data()
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        offset += w;
                        let part = Array::from_vec(self.value(p).shape().to_vec(), data)?;
                        accumulate(&mut grads, p, part);
                    }
                }
                Op::SliceLast { x, lo } => {
                    let xv = self.value(*x);
                    let c = *xv.shape().last().unwrap();
                    let w = *g.shape().last().unwrap();
                    let mut dx = Array::zeros(xv.shape());
                    for (dst, src) in dx.data_mut().chunks_mut(c).zip(g.data().chunks(w)) {
                        dst[*lo..*lo + w].copy_from_slice(src);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dot(a, b) => {
                    let k = g.data()[0];
                    let da = self.value(*b).map(|v| v * k);
                    let db = self.value(*a).map(|v| v * k);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Stack(parts) => {
                    for (&p, &gv) in parts.iter().zip(g.data()) {
                        accumulate(&mut grads, p, Array::full(self.value(p).shape(), gv));
                    }
                }
                Op::Scale(x, k) => accumulate(&mut grads, *x, g.map(|v| v * k)),
                Op::Softmax(v) => {
                    let y = &node.value;
                    let gy = g.dot(y);
                    let dv = y.zip_map(&g, |yv, gv| yv * (gv - gy));
                    accumulate(&mut grads, *v, dv);
                }
                Op::ScalarMul { s, x } => {
                    let k = self.value(*s).data()[0];
                    let ds = Array::full(self.value(*s).shape(), g.dot(self.value(*x)));
                    accumulate(&mut grads, *s, ds);
                    accumulate(&mut grads, *x, g.map(|v| v * k));
                }
                Op::Sum(x) => {
                    let dx = Array::full(self.value(*x).shape(), g.data()[0]);
                    accumulate(&mut grads, *x, dx);
                }
                Op::SqErr { pred, target } => {
                    let k = 2.0 * g.data()[0];
                    let dp = self.value(*pred).zip_map(target, |p, t| k * (p - t));
                    accumulate(&mut grads, *pred, dp);
                }
            }
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params.clone(),
        })
    }
}

fn accumulate(grads: &mut [Option<Array>], v: Var, g: Array) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`]: gradients for leaf nodes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<usize, Var>,
}

impl Gradients {
    /// Gradient of a leaf; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Array {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Array::zeros(&self.shapes[v.0]))
    }

    /// Gradient for the parameter registered under `id`, if it was used.
    pub fn param(&self, id: usize) -> Option<&Array> {
        self.params.get(&id).and_then(|v| self.grads[v.0].as_ref())
    }

    /// Move out all parameter gradients, indexed by parameter id.
    pub fn into_param_grads(mut self, count: usize) -> Vec<Option<Array>> {
        let mut out = vec![None; count];
        for (&id, v) in &self.params {
            if id < count {
                out[id] = self.grads[v.0].take();
            }
        }
        out
    }
}
