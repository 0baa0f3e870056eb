//! Reverse-mode differentiation on a linear tape.
//!
//! Every operation on a [`Var`] appends one node holding its value and enough
//! saved state to run its vector-Jacobian product. Nodes are appended in
//! topological order, so [`Tape::backward`] is a single reverse sweep.
//! Values that do not depend on any parameter are recorded as leaves and cost
//! nothing during the backward pass.

use std::cell::RefCell;
use std::sync::Arc;

use super::tensor::{
    broadcast_shape, for_each_broadcast, gemm_nt, gemm_tn, split_axis, Tensor,
};
use super::Scalar;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const COSINE_MIN_NORM: f64 = 1e-12;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    Shift(usize),
    MatMul(usize, usize),
    Affine(usize, usize, usize),
    Transpose(usize, Vec<usize>),
    Reshape(usize),
    Narrow { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Broadcast(usize),
    Sum(usize),
    SumOver { x: usize, axis: usize, factor: T },
    Softmax(usize, usize),
    Sigmoid(usize),
    Gelu(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    LayerNorm { x: usize, gain: usize, shift: usize, xhat: Vec<T>, rstd: Vec<T> },
    Cosine { a: usize, b: usize },
    CrossEntropy { logits: usize, label: usize, probs: Vec<T> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    grad: bool,
}

/// Recording context for one forward/backward evaluation.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(1024)),
        }
    }

    /// A differentiable input.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// [`Tape::param`] over an already shared value, without copying it.
    pub fn param_shared(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.leaf_arc(value, true)
    }

    /// [`Tape::constant`] over an already shared value, without copying it.
    pub fn constant_shared(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.leaf_arc(value, false)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Tensor<T>, grad: bool) -> Var<'_, T> {
        self.leaf_arc(Arc::new(value), grad)
    }

    fn leaf_arc(&self, value: Arc<Tensor<T>>, grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].grad
    }

    fn push(&self, op_name: &str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name.to_string()));
        }
        let grad = inputs.iter().any(|&i| self.needs_grad(i));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op: if grad { op } else { Op::Leaf },
            grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Gradients of the one-element `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a single element, got {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.grad {
                vjp(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// ∂loss/∂`var`; exactly zero when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape().to_vec()),
        }
    }

    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads[var.id].as_ref()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize, f: impl FnOnce(&mut [T])) {
    if !nodes[id].grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()]);
    f(slot);
}

fn add_into<T: Scalar>(dst: &mut [T], src: impl IntoIterator<Item = T>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn vjp<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| nodes[i].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().copied()));
            accumulate(grads, nodes, *b, |d| add_into(d, g.iter().copied()));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().copied()));
            accumulate(grads, nodes, *b, |d| add_into(d, g.iter().map(|&v| -v)));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().zip(vb).map(|(&g, &y)| g * y)));
            accumulate(grads, nodes, *b, |d| add_into(d, g.iter().zip(va).map(|(&g, &x)| g * x)));
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().zip(vb).map(|(&g, &y)| g / y)));
            accumulate(grads, nodes, *b, |d| {
                add_into(d, g.iter().zip(va).zip(vb).map(|((&g, &x), &y)| -g * x / (y * y)))
            });
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, |d| add_into(d, g.iter().map(|&v| v * *c))),
        Op::Shift(a) => accumulate(grads, nodes, *a, |d| add_into(d, g.iter().copied())),
        Op::MatMul(a, b) | Op::Affine(a, b, _) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if nodes[*a].grad {
                let ga = gemm_nt(m, n, k, g, val(*b));
                accumulate(grads, nodes, *a, |d| add_into(d, ga));
            }
            if nodes[*b].grad {
                let gb = gemm_tn(k, m, n, val(*a), g);
                accumulate(grads, nodes, *b, |d| add_into(d, gb));
            }
            if let Op::Affine(_, _, bias) = &nodes[id].op {
                accumulate(grads, nodes, *bias, |d| {
                    for row in g.chunks(n) {
                        add_into(d, row.iter().copied());
                    }
                });
            }
        }
        Op::Transpose(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let gt = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
            let back = gt.transpose(&inv).expect("inverse permutation");
            accumulate(grads, nodes, *a, |d| add_into(d, back.into_data()));
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, |d| add_into(d, g.iter().copied())),
        Op::Narrow { x, axis, start } => {
            let in_shape = nodes[*x].value.shape();
            let (outer, ext, inner) = split_axis(in_shape, *axis);
            let len = out.shape()[*axis];
            accumulate(grads, nodes, *x, |d| {
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    let src = o * len * inner;
                    add_into(&mut d[dst..dst + len * inner], g[src..src + len * inner].iter().copied());
                }
            });
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &x in xs {
                let ext = nodes[x].value.shape()[*axis];
                accumulate(grads, nodes, x, |d| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * ext * inner;
                        add_into(&mut d[dst..dst + ext * inner], g[src..src + ext * inner].iter().copied());
                    }
                });
                offset += ext;
            }
        }
        Op::Broadcast(a) => {
            let src = nodes[*a].value.shape().to_vec();
            accumulate(grads, nodes, *a, |d| {
                for_each_broadcast(&src, out.shape(), |o, s| d[s] = d[s] + g[o]);
            });
        }
        Op::Sum(a) => accumulate(grads, nodes, *a, |d| d.iter_mut().for_each(|v| *v = *v + g[0])),
        Op::SumOver { x, axis, factor } => {
            let (outer, ext, inner) = split_axis(nodes[*x].value.shape(), *axis);
            accumulate(grads, nodes, *x, |d| {
                for o in 0..outer {
                    for j in 0..ext {
                        for i in 0..inner {
                            let t = (o * ext + j) * inner + i;
                            d[t] = d[t] + g[o * inner + i] * *factor;
                        }
                    }
                }
            });
        }
        Op::Softmax(a, axis) => {
            let y = out.data();
            let (outer, ext, inner) = split_axis(out.shape(), *axis);
            accumulate(grads, nodes, *a, |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * ext + j) * inner + i;
                        let dot: T = (0..ext).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..ext {
                            let t = idx(j);
                            d[t] = d[t] + y[t] * (g[t] - dot);
                        }
                    }
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            accumulate(grads, nodes, *a, |d| {
                add_into(d, g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)))
            });
        }
        Op::Gelu(a) => {
            let x = val(*a);
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().zip(x).map(|(&g, &x)| g * gelu_grad(x))));
        }
        Op::Relu(a) => {
            let x = val(*a);
            accumulate(grads, nodes, *a, |d| {
                add_into(d, g.iter().zip(x).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }))
            });
        }
        Op::Exp(a) => {
            let y = out.data();
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().zip(y).map(|(&g, &y)| g * y)));
        }
        Op::Ln(a) => {
            let x = val(*a);
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().zip(x).map(|(&g, &x)| g / x)));
        }
        Op::Sqrt(a) => {
            let y = out.data();
            let two = T::lit(2.0);
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().zip(y).map(|(&g, &y)| g / (two * y))));
        }
        Op::LayerNorm { x, gain, shift, xhat, rstd } => {
            let width = *nodes[*gain].value.shape().last().unwrap();
            let gamma = val(*gain);
            accumulate(grads, nodes, *gain, |d| {
                for (gr, xr) in g.chunks(width).zip(xhat.chunks(width)) {
                    add_into(d, gr.iter().zip(xr).map(|(&g, &h)| g * h));
                }
            });
            accumulate(grads, nodes, *shift, |d| {
                for gr in g.chunks(width) {
                    add_into(d, gr.iter().copied());
                }
            });
            let w = T::from_usize(width).unwrap();
            accumulate(grads, nodes, *x, |d| {
                for (r, ((dr, gr), xr)) in d.chunks_mut(width).zip(g.chunks(width)).zip(xhat.chunks(width)).enumerate() {
                    let gh: Vec<T> = gr.iter().zip(gamma).map(|(&g, &c)| g * c).collect();
                    let s1: T = gh.iter().copied().sum();
                    let s2: T = gh.iter().zip(xr).map(|(&a, &h)| a * h).sum();
                    for j in 0..width {
                        dr[j] = dr[j] + rstd[r] / w * (w * gh[j] - s1 - xr[j] * s2);
                    }
                }
            });
        }
        Op::Cosine { a, b } => {
            let (va, vb) = (val(*a), val(*b));
            let na = va.iter().map(|&v| v * v).sum::<T>().sqrt();
            let nb = vb.iter().map(|&v| v * v).sum::<T>().sqrt();
            let c = out.data()[0];
            let g0 = g[0];
            accumulate(grads, nodes, *a, |d| {
                add_into(d, va.iter().zip(vb).map(|(&x, &y)| g0 * (y / (na * nb) - c * x / (na * na))))
            });
            accumulate(grads, nodes, *b, |d| {
                add_into(d, va.iter().zip(vb).map(|(&x, &y)| g0 * (x / (na * nb) - c * y / (nb * nb))))
            });
        }
        Op::CrossEntropy { logits, label, probs } => {
            accumulate(grads, nodes, *logits, |d| {
                for (k, (dv, &p)) in d.iter_mut().zip(probs).enumerate() {
                    let t = if k == *label { T::one() } else { T::zero() };
                    *dv = *dv + g[0] * (p - t);
                }
            });
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
    let th = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_K) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * du
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// The single element of a one-element value.
    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(self) -> Var<'t, T> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(self, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        let v = self.value().map(f);
        self.tape.push(name, v, op, &[self.id])
    }

    fn binary(self, rhs: Var<'t, T>, kind: Binary) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        let (a, b) = if sa == sb {
            (self, rhs)
        } else {
            let target = broadcast_shape(&sa, &sb).ok_or_else(|| {
                Error::shape("elementwise", format!("cannot broadcast {sa:?} with {sb:?}"))
            })?;
            (self.broadcast_to(&target)?, rhs.broadcast_to(&target)?)
        };
        let (va, vb) = (a.value(), b.value());
        let (name, f, op): (&'static str, fn(T, T) -> T, Op<T>) = match kind {
            Binary::Add => ("add", |x, y| x + y, Op::Add(a.id, b.id)),
            Binary::Sub => ("sub", |x, y| x - y, Op::Sub(a.id, b.id)),
            Binary::Mul => ("mul", |x, y| x * y, Op::Mul(a.id, b.id)),
            Binary::Div => ("div", |x, y| x / y, Op::Div(a.id, b.id)),
        };
        let v = va.zip_map(&vb, f)?;
        self.tape.push(name, v, op, &[a.id, b.id])
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Binary::Sub)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Binary::Mul)
    }

    pub fn div(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Binary::Div)
    }

    pub fn scale(self, c: T) -> Result<Var<'t, T>> {
        self.unary("scale", |x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'t, T>> {
        self.unary("add_scalar", |x| x + c, Op::Shift(self.id))
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.scale(-T::one())
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.value().matmul(&rhs.value())?;
        self.tape.push("matmul", v, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id])
    }

    /// `x · weight + bias` row by row, for `x: n×d_in`, `weight: d_in×d_out`, `bias: d_out`.
    pub fn affine(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.shape()[1] != w.shape()[0] || w.shape()[1] != b.shape()[0] {
            return Err(Error::shape(
                "affine",
                format!("x {:?} · weight {:?} + bias {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(b.data());
        }
        T::gemm(m, k, n, x.data(), (k as isize, 1), w.data(), (n as isize, 1), T::one(), &mut out);
        self.tape.push(
            "affine",
            Tensor::from_parts(vec![m, n], out),
            Op::Affine(self.id, weight.id, bias.id),
            &[self.id, weight.id, bias.id],
        )
    }

    pub fn transpose(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().transpose(perm)?;
        self.tape.push("transpose", v, Op::Transpose(self.id, perm.to_vec()), &[self.id])
    }

    /// Matrix transpose.
    pub fn t(self) -> Result<Var<'t, T>> {
        self.transpose(&[1, 0])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().reshape(shape.to_vec())?;
        self.tape.push("reshape", v, Op::Reshape(self.id), &[self.id])
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = self.value().narrow(axis, start, len)?;
        self.tape.push("narrow", v, Op::Narrow { x: self.id, axis, start }, &[self.id])
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat(&refs, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first.tape.push("concat", v, Op::Concat { xs: ids.clone(), axis }, &ids)
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let src = self.shape();
        if src == shape {
            return Ok(self);
        }
        if broadcast_shape(&src, shape).as_deref() != Some(shape) {
            return Err(Error::shape("broadcast", format!("{src:?} -> {shape:?}")));
        }
        let x = self.value();
        let mut data = vec![T::zero(); shape.iter().product()];
        for_each_broadcast(&src, shape, |o, s| data[o] = x.data()[s]);
        self.tape.push(
            "broadcast",
            Tensor::from_parts(shape.to_vec(), data),
            Op::Broadcast(self.id),
            &[self.id],
        )
    }

    /// Sum of all elements, as a rank-0 value.
    pub fn sum(self) -> Result<Var<'t, T>> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push("sum", v, Op::Sum(self.id), &[self.id])
    }

    fn reduce_axis(self, name: &'static str, axis: usize, mean: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape(name, format!("axis {axis} of {:?}", x.shape())));
        }
        let (outer, ext, inner) = split_axis(x.shape(), axis);
        let factor = if mean {
            T::one() / T::from_usize(ext).unwrap()
        } else {
            T::one()
        };
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..ext {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + x.data()[(o * ext + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * factor);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        self.tape.push(
            name,
            Tensor::from_parts(shape, out),
            Op::SumOver { x: self.id, axis, factor },
            &[self.id],
        )
    }

    /// Sum along `axis`, removing it.
    pub fn sum_over(self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis("sum_over", axis, false)
    }

    /// Mean along `axis`, removing it.
    pub fn mean_over(self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis("mean_over", axis, true)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let v = self.value().softmax(axis)?;
        self.tape.push("softmax", v, Op::Softmax(self.id, axis), &[self.id])
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary("sigmoid", |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(self.id))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Result<Var<'t, T>> {
        self.unary("gelu", gelu, Op::Gelu(self.id))
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary("relu", |x| x.max(T::zero()), Op::Relu(self.id))
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary("exp", T::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Result<Var<'t, T>> {
        self.unary("ln", T::ln, Op::Ln(self.id))
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        self.unary("sqrt", T::sqrt, Op::Sqrt(self.id))
    }

    /// Normalizes over the last axis, then applies per-channel `gain` and `shift`.
    pub fn layer_norm(self, gain: Var<'t, T>, shift: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let width = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        let (gv, sv) = (gain.value(), shift.value());
        if gv.shape() != [width] || sv.shape() != [width] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, shift {:?}", x.shape(), gv.shape(), sv.shape()),
            ));
        }
        let w = T::from_usize(width).unwrap();
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(x.len() / width);
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(width) {
            let mu = row.iter().copied().sum::<T>() / w;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / w;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * r;
                xhat.push(h);
                out.push(h * gv.data()[j] + sv.data()[j]);
            }
        }
        self.tape.push(
            "layer_norm",
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm { x: self.id, gain: gain.id, shift: shift.id, xhat, rstd },
            &[self.id, gain.id, shift.id],
        )
    }

    /// Cosine of the angle between two equally shaped values (flattened).
    pub fn cosine_similarity(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(Error::shape("cosine_similarity", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let na = a.data().iter().map(|&v| v * v).sum::<T>().sqrt();
        let nb = b.data().iter().map(|&v| v * v).sum::<T>().sqrt();
        let floor = T::lit(COSINE_MIN_NORM);
        if na <= floor || nb <= floor {
            return Err(Error::Degenerate {
                op: "cosine_similarity",
                detail: format!("vector norms {na} and {nb} (need > {floor})"),
            });
        }
        let dot: T = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum();
        self.tape.push(
            "cosine_similarity",
            Tensor::scalar(dot / (na * nb)),
            Op::Cosine { a: self.id, b: rhs.id },
            &[self.id, rhs.id],
        )
    }

    /// `−log softmax(logits)[label]` for a rank-1 logit vector.
    pub fn cross_entropy(self, label: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 1 {
            return Err(Error::shape("cross_entropy", format!("logits must be rank 1, got {:?}", x.shape())));
        }
        if label >= x.len() {
            return Err(Error::shape("cross_entropy", format!("label {label} out of range for {} classes", x.len())));
        }
        let probs = x.softmax(0)?.into_data();
        let mx = x.max();
        let lse = mx + x.data().iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        self.tape.push(
            "cross_entropy",
            Tensor::scalar(lse - x.data()[label]),
            Op::CrossEntropy { logits: self.id, label, probs },
            &[self.id],
        )
    }
}
