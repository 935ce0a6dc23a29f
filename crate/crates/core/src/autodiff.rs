//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to the
//! tape that created it. Nodes are stored in creation order, so the tape is
//! always topologically sorted and [`Tape::backward`] is a single reverse
//! sweep. A tape lives for one forward/backward pass.

use std::cell::{Cell, RefCell};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::kernels::{self, Broadcast, MatmulDims};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default epsilon added to the variance inside layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        dims: MatmulDims,
    },
    Add { a: usize, b: usize, plan: Broadcast },
    Sub { a: usize, b: usize, plan: Broadcast },
    Mul { a: usize, b: usize, plan: Broadcast },
    Div { a: usize, b: usize, plan: Broadcast },
    Scale { a: usize, factor: T },
    AddScalar { a: usize },
    Reshape { a: usize },
    Permute { a: usize, order: Vec<usize> },
    Gelu { a: usize },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        axis: usize,
        normalized: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax { a: usize, axis: usize },
    MseLoss { pred: usize, target: usize },
    Sum { a: usize },
    Mean { a: usize },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f64> {
    nodes: RefCell<Vec<Node<T>>>,
    backward_done: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t, T: Scalar = f64> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Tensor::new(self.shapes[var.id].clone(), g.clone()).ok()
    }

    pub fn get_raw(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id)?.as_deref()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf; it participates in backward iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        let requires_grad = tensor.requires_grad();
        self.push_leaf(tensor.shape().to_vec(), tensor.data().to_vec(), requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push_leaf(tensor.shape().to_vec(), tensor.data().to_vec(), true)
    }

    /// Records a constant leaf.
    pub fn constant(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push_leaf(tensor.shape().to_vec(), tensor.data().to_vec(), false)
    }

    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<T>) -> Result<Var<'_, T>> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ElementCount {
                from: vec![data.len()],
                to: shape,
            });
        }
        Ok(self.push_leaf(shape, data, false))
    }

    fn push_leaf(&self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        #[cfg(debug_assertions)]
        {
            let inputs_finite = inputs
                .iter()
                .all(|&i| nodes[i].data.iter().all(|v| v.is_finite()));
            debug_assert!(
                !inputs_finite || data.iter().all(|v| v.is_finite()),
                "{op:?} produced non-finite values from finite inputs"
            );
        }
        nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Propagates d(loss)/d(node) back to every leaf that requires a gradient.
    ///
    /// Gradients from repeated uses of a leaf are summed.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.data.len() != 1 {
            return Err(Error::NotScalar(root.shape.clone()));
        }
        if self.backward_done.replace(true) {
            return Err(Error::BackwardTwice);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contribution) in node_backward(&nodes, node, &g) {
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += *c),
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }
}

fn reduce_broadcast<T: Scalar>(plan: &Broadcast, g: &[T], b_len: usize, f: impl Fn(usize, T) -> T) -> Vec<T> {
    let mut out = vec![T::zero(); b_len];
    plan.for_each(g.len(), |i, j| out[j] += f(i, g[i]));
    out
}

fn node_backward<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T]) -> Vec<(usize, Vec<T>)> {
    let wants = |i: usize| nodes[i].requires_grad;
    let mut out = Vec::with_capacity(2);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b, dims } => {
            let (da, db) = dims.backward(&nodes[*a].data, &nodes[*b].data, g, *trans_b, wants(*a), wants(*b));
            out.extend(da.map(|d| (*a, d)));
            out.extend(db.map(|d| (*b, d)));
        }
        Op::Add { a, b, plan } | Op::Sub { a, b, plan } => {
            let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
            if wants(*a) {
                out.push((*a, g.to_vec()));
            }
            if wants(*b) {
                out.push((*b, reduce_broadcast(plan, g, nodes[*b].data.len(), |_, gi| sign * gi)));
            }
        }
        Op::Mul { a, b, plan } => {
            let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
            if wants(*a) {
                let mut da = vec![T::zero(); av.len()];
                plan.for_each(g.len(), |i, j| da[i] = g[i] * bv[j]);
                out.push((*a, da));
            }
            if wants(*b) {
                out.push((*b, reduce_broadcast(plan, g, bv.len(), |i, gi| gi * av[i])));
            }
        }
        Op::Div { a, b, plan } => {
            let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
            if wants(*a) {
                let mut da = vec![T::zero(); av.len()];
                plan.for_each(g.len(), |i, j| da[i] = g[i] / bv[j]);
                out.push((*a, da));
            }
            if wants(*b) {
                let mut db = vec![T::zero(); bv.len()];
                plan.for_each(g.len(), |i, j| db[j] -= g[i] * av[i] / (bv[j] * bv[j]));
                out.push((*b, db));
            }
        }
        Op::Scale { a, factor } => {
            if wants(*a) {
                out.push((*a, g.iter().map(|&v| v * *factor).collect()));
            }
        }
        Op::AddScalar { a } | Op::Reshape { a } => {
            if wants(*a) {
                out.push((*a, g.to_vec()));
            }
        }
        Op::Permute { a, order } => {
            if wants(*a) {
                let inv = kernels::inverse_permutation(order);
                out.push((*a, kernels::permute(g, &node.shape, &inv).0));
            }
        }
        Op::Gelu { a } => {
            if wants(*a) {
                let x = &nodes[*a].data;
                out.push((*a, g.iter().zip(x).map(|(&gi, &xi)| gi * gelu_derivative(xi)).collect()));
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            axis,
            normalized,
            rstd,
        } => {
            let (outer, len, inner) = kernels::axis_extents(&node.shape, *axis).expect("validated in forward");
            let gv = &nodes[*gain].data;
            let n = T::from_f64(len as f64);
            let mut dx = wants(*x).then(|| vec![T::zero(); g.len()]);
            let mut dgain = wants(*gain).then(|| vec![T::zero(); len]);
            let mut dbias = wants(*bias).then(|| vec![T::zero(); len]);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let slice = o * inner + i;
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..len {
                        let k = at(j);
                        let d = g[k] * gv[j];
                        sum_d += d;
                        sum_dx += d * normalized[k];
                        if let Some(dg) = dgain.as_mut() {
                            dg[j] += g[k] * normalized[k];
                        }
                        if let Some(db) = dbias.as_mut() {
                            db[j] += g[k];
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mean_d = sum_d / n;
                        let mean_dx = sum_dx / n;
                        for j in 0..len {
                            let k = at(j);
                            dx[k] = rstd[slice] * (g[k] * gv[j] - mean_d - normalized[k] * mean_dx);
                        }
                    }
                }
            }
            out.extend(dx.map(|d| (*x, d)));
            out.extend(dgain.map(|d| (*gain, d)));
            out.extend(dbias.map(|d| (*bias, d)));
        }
        Op::Softmax { a, axis } => {
            if wants(*a) {
                let (outer, len, inner) = kernels::axis_extents(&node.shape, *axis).expect("validated in forward");
                let y = &node.data;
                let mut da = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            let k = at(j);
                            da[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                out.push((*a, da));
            }
        }
        Op::MseLoss { pred, target } => {
            let (p, t) = (&nodes[*pred].data, &nodes[*target].data);
            let scale = g[0] / T::from_f64(p.len() as f64);
            let diff: Vec<T> = p.iter().zip(t).map(|(&pi, &ti)| (pi - ti) * scale).collect();
            if wants(*target) {
                out.push((*target, diff.iter().map(|&d| -d).collect()));
            }
            if wants(*pred) {
                out.push((*pred, diff));
            }
        }
        Op::Sum { a } => {
            if wants(*a) {
                out.push((*a, vec![g[0]; nodes[*a].data.len()]));
            }
        }
        Op::Mean { a } => {
            if wants(*a) {
                let n = nodes[*a].data.len();
                out.push((*a, vec![g[0] / T::from_f64(n as f64); n]));
            }
        }
    }
    out
}

/// Standard-normal CDF via the exact error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_f64(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu<T: Scalar>(x: T) -> T {
    T::from_f64(gelu_f64(x.as_f64()))
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let x = x.as_f64();
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    T::from_f64(normal_cdf(x) + x * pdf)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].data.len()
    }

    /// Copies the current value out of the tape.
    pub fn value(&self) -> Tensor<T> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape nodes are consistent")
    }

    pub fn item(&self) -> Result<T> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if n.data.len() != 1 {
            return Err(Error::NotScalar(n.shape.clone()));
        }
        Ok(n.data[0])
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars belong to different tapes");
    }

    /// Matrix product over the last two axes; leading axes are batch axes and
    /// may be absent on either side.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, false)
    }

    /// `self x other^T` over the last two axes.
    pub fn matmul_nt(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (dims, data) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let dims = MatmulDims::new(&a.shape, &b.shape, trans_b)?;
            let data = dims.forward(&a.data, &b.data, trans_b);
            (dims, data)
        };
        Ok(self.tape.push(
            dims.out_shape.clone(),
            data,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
                dims,
            },
            &[self.id, other.id],
        ))
    }

    fn binary(&self, other: &Var<'t, T>, kind: BinaryKind) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (shape, data, plan) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let plan = Broadcast::plan(kind.name(), &a.shape, &b.shape)?;
            let mut data = vec![T::zero(); a.data.len()];
            let (av, bv) = (&a.data, &b.data);
            match kind {
                BinaryKind::Add => plan.for_each(av.len(), |i, j| data[i] = av[i] + bv[j]),
                BinaryKind::Sub => plan.for_each(av.len(), |i, j| data[i] = av[i] - bv[j]),
                BinaryKind::Mul => plan.for_each(av.len(), |i, j| data[i] = av[i] * bv[j]),
                BinaryKind::Div => plan.for_each(av.len(), |i, j| data[i] = av[i] / bv[j]),
            }
            (a.shape.clone(), data, plan)
        };
        let (a, b) = (self.id, other.id);
        let op = match kind {
            BinaryKind::Add => Op::Add { a, b, plan },
            BinaryKind::Sub => Op::Sub { a, b, plan },
            BinaryKind::Mul => Op::Mul { a, b, plan },
            BinaryKind::Div => Op::Div { a, b, plan },
        };
        Ok(self.tape.push(shape, data, op, &[a, b]))
    }

    /// Elementwise sum; `other` may broadcast along trailing (right-aligned) axes.
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Div)
    }

    fn unary(&self, f: impl Fn(T) -> T, op: Op<T>) -> Var<'t, T> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.shape.clone(), a.data.iter().map(|&v| f(v)).collect())
        };
        self.tape.push(shape, data, op, &[self.id])
    }

    pub fn scale(&self, factor: f64) -> Var<'t, T> {
        let factor = T::from_f64(factor);
        self.unary(|v| v * factor, Op::Scale { a: self.id, factor })
    }

    pub fn add_scalar(&self, value: f64) -> Var<'t, T> {
        let value = T::from_f64(value);
        self.unary(|v| v + value, Op::AddScalar { a: self.id })
    }

    pub fn gelu(&self) -> Var<'t, T> {
        self.unary(gelu, Op::Gelu { a: self.id })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::ElementCount {
                    from: a.shape.clone(),
                    to: shape.to_vec(),
                });
            }
            a.data.clone()
        };
        Ok(self.tape.push(shape.to_vec(), data, Op::Reshape { a: self.id }, &[self.id]))
    }

    pub fn permute(&self, order: &[usize]) -> Result<Var<'t, T>> {
        let (data, shape) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            kernels::check_permutation(order, a.shape.len())?;
            kernels::permute(&a.data, &a.shape, order)
        };
        Ok(self.tape.push(
            shape,
            data,
            Op::Permute {
                a: self.id,
                order: order.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Normalizes every slice along `axis` to zero mean and unit variance,
    /// then applies the per-position `gain` and `bias` (both of the axis length).
    pub fn layer_norm(&self, axis: usize, gain: &Var<'t, T>, bias: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        self.same_tape(gain);
        self.same_tape(bias);
        let (shape, data, normalized, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let (outer, len, inner) = kernels::axis_extents(&x.shape, axis)?;
            let (gv, bv) = (&nodes[gain.id], &nodes[bias.id]);
            if gv.data.len() != len || bv.data.len() != len {
                return Err(Error::shape("layer_norm", &x.shape, &gv.shape));
            }
            let n = T::from_f64(len as f64);
            let eps = T::from_f64(eps);
            let mut normalized = vec![T::zero(); x.data.len()];
            let mut data = vec![T::zero(); x.data.len()];
            let mut rstd = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let mean = (0..len).map(|j| x.data[at(j)]).sum::<T>() / n;
                    let var = (0..len)
                        .map(|j| {
                            let d = x.data[at(j)] - mean;
                            d * d
                        })
                        .sum::<T>()
                        / n;
                    let r = T::one() / (var + eps).sqrt();
                    rstd[o * inner + i] = r;
                    for j in 0..len {
                        let k = at(j);
                        normalized[k] = (x.data[k] - mean) * r;
                        data[k] = normalized[k] * gv.data[j] + bv.data[j];
                    }
                }
            }
            (x.shape.clone(), data, normalized, rstd)
        };
        Ok(self.tape.push(
            shape,
            data,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                axis,
                normalized,
                rstd,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let (outer, len, inner) = kernels::axis_extents(&x.shape, axis)?;
            let mut data = vec![T::zero(); x.data.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let max = (0..len).map(|j| x.data[at(j)]).fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for j in 0..len {
                        let e = (x.data[at(j)] - max).exp();
                        data[at(j)] = e;
                        total += e;
                    }
                    for j in 0..len {
                        data[at(j)] /= total;
                    }
                }
            }
            (x.shape.clone(), data)
        };
        Ok(self.tape.push(shape, data, Op::Softmax { a: self.id, axis }, &[self.id]))
    }

    /// Mean over all elements of `0.5 * (self - target)^2`.
    pub fn mse_loss(&self, target: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(target);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (p, t) = (&nodes[self.id], &nodes[target.id]);
            if p.shape != t.shape {
                return Err(Error::shape("mse_loss", &p.shape, &t.shape));
            }
            let half = T::from_f64(0.5);
            let total: T = p
                .data
                .iter()
                .zip(&t.data)
                .map(|(&a, &b)| {
                    let d = a - b;
                    half * d * d
                })
                .sum();
            total / T::from_f64(p.data.len() as f64)
        };
        Ok(self.tape.push(
            Vec::new(),
            vec![value],
            Op::MseLoss {
                pred: self.id,
                target: target.id,
            },
            &[self.id, target.id],
        ))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let total = self.tape.nodes.borrow()[self.id].data.iter().copied().sum();
        self.tape.push(Vec::new(), vec![total], Op::Sum { a: self.id }, &[self.id])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let mean = {
            let nodes = self.tape.nodes.borrow();
            let d = &nodes[self.id].data;
            d.iter().copied().sum::<T>() / T::from_f64(d.len() as f64)
        };
        self.tape.push(Vec::new(), vec![mean], Op::Mean { a: self.id }, &[self.id])
    }
}

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let tape = Tape::new();
        let eye = tape.constant(&t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
        assert_eq!(eye.matmul(&m).unwrap().value().data(), &[1., 2., 3., 4.]);
        let row = tape.constant(&t(&[1, 2], &[1., 2.]));
        let col = tape.constant(&t(&[2, 1], &[3., 4.]));
        let p = row.matmul(&col).unwrap();
        assert_eq!(p.shape(), vec![1, 1]);
        assert_eq!(p.item().unwrap(), 11.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[2], &[2., 3.]));
        let y = tape.constant(&t(&[2], &[4., 5.]));
        assert_eq!(x.mul(&y).unwrap().value().data(), &[8., 15.]);
        let z = tape.constant(&Tensor::zeros(&[2]));
        assert_eq!(x.add(&z).unwrap().value().data(), x.value().data());
        assert_eq!(x.scale(2.0).value().data(), &[4., 6.]);
        let bad = tape.constant(&Tensor::zeros(&[3]));
        assert!(x.add(&bad).is_err());
    }

    #[test]
    fn gelu_values() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[3], &[0.0, 1.0, -10.0]));
        let y = x.gelu().value();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841345).abs() < 1e-5);
        assert!(y.data()[2].abs() < 1e-8);
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let one = tape.constant(&Tensor::ones(&[2]));
        let zero = tape.constant(&Tensor::zeros(&[2]));
        let x = tape.constant(&t(&[1, 2], &[1., 3.]));
        let y = x.layer_norm(1, &one, &zero, 0.0).unwrap();
        assert_eq!(y.value().data(), &[-1.0, 1.0]);
        let c = tape.constant(&t(&[1, 2], &[0.7, 0.7]));
        let y = c.layer_norm(1, &one, &zero, LAYER_NORM_EPS).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0]);
        assert!(matches!(
            x.layer_norm(2, &one, &zero, 1e-5),
            Err(Error::AxisOutOfRange { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let u = tape.constant(&Tensor::full(&[4], 0.3));
        assert!(u.softmax(0).unwrap().value().data().iter().all(|&v: &f64| (v - 0.25).abs() < 1e-15));
        let x = tape.constant(&t(&[2], &[0.0, 3f64.ln()]));
        let y = x.softmax(0).unwrap().value();
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn mse_examples() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[2], &[0., 2.]));
        let z = tape.constant(&t(&[2], &[0., 0.]));
        assert_eq!(x.mse_loss(&x).unwrap().item().unwrap(), 0.0);
        assert_eq!(x.mse_loss(&z).unwrap().item().unwrap(), 1.0);
        let w = tape.constant(&Tensor::zeros(&[3]));
        assert!(x.mse_loss(&w).is_err());
    }

    #[test]
    fn mse_gradient_is_scaled_difference() {
        let tape = Tape::new();
        let p = tape.param(&t(&[3], &[1.0, -2.0, 0.5]));
        let q = tape.constant(&t(&[3], &[0.0, 1.0, 0.5]));
        let loss = p.mse_loss(&q).unwrap();
        let g = tape.backward(loss).unwrap().get(p).unwrap();
        assert_eq!(g.data(), &[1.0 / 3.0, -1.0, 0.0]);
    }

    #[test]
    fn weighted_sum_gradient_is_input() {
        let tape = Tape::new();
        let w = tape.param(&t(&[3], &[0.1, 0.2, 0.3]));
        let x = tape.constant(&t(&[3], &[4.0, -5.0, 6.0]));
        let loss = w.mul(&x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), x.value().data());
        assert!(g.get(x).is_none());
    }

    #[test]
    fn repeated_leaf_accumulates() {
        let tape = Tape::new();
        let w = tape.param(&t(&[2], &[1.0, 2.0]));
        let up = tape.constant(&t(&[2], &[3.0, -1.0]));
        let y = w.add(&w).unwrap();
        let loss = y.mul(&up).unwrap().sum();
        let g = tape.backward(loss).unwrap().get(w).unwrap();
        assert_eq!(g.data(), &[6.0, -2.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let w = tape.param(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::NotScalar(_))));
        let loss = w.sum();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::BackwardTwice)));
    }

    #[test]
    fn broadcast_bias_gradient_is_column_sum() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.param(&t(&[3], &[0.0, 0.0, 0.0]));
        let up = tape.constant(&t(&[2, 3], &[1., 2., 3., 10., 20., 30.]));
        let loss = x.add(&b).unwrap().mul(&up).unwrap().sum();
        let g = tape.backward(loss).unwrap().get(b).unwrap();
        assert_eq!(g.data(), &[11., 22., 33.]);
    }

    #[test]
    fn reshape_and_permute_round_trip() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::from_fn(&[6], |i| i as f64 * 0.5));
        let y = x.reshape(&[2, 3]).unwrap().reshape(&[6]).unwrap();
        assert_eq!(y.value(), x.value());
        assert!(x.reshape(&[4]).is_err());
        let m = tape.constant(&Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sin()));
        let p = m.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
        assert_eq!(p.value(), m.value());
        assert!(m.permute(&[0, 1, 1]).is_err());
    }
}
