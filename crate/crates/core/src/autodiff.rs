//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every backward rule is itself expressed with graph operations, so the gradients
//! returned by [`Graph::grad`] are ordinary [`Var`]s that can be differentiated again.
//! The R1 penalty on the discriminator relies on this.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{self, ConvGeom, Tensor};

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Recip(usize),
    Sqrt(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    LeakyRelu(usize, f64),
    MulConst(usize, Rc<Tensor>),
    FloorMax(usize, f64),
    Huber(usize),
    ClampUnit(usize),
    SumAll(usize),
    Expand(usize),
    Reshape(usize),
    Transpose(usize),
    MatMul(usize, usize),
    Conv2d(usize, usize, ConvGeom),
    ConvTranspose(usize, usize, ConvGeom),
    ConvWeightGrad(usize, usize, ConvGeom),
    Upsample2(usize),
    SumPool2(usize),
    BroadcastAxis1(usize),
    SumToAxis1(usize),
    RowSum(usize),
    RowBroadcast(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// An append-only computation tape. Build one per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients are tracked for.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(Rc::new(value), true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(Rc::new(value), false)
    }

    pub fn leaf(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { id, graph: self }
    }

    /// Gradients of the scalar `y` with respect to each of `xs`.
    ///
    /// Inputs that `y` does not depend on get a zero constant of matching shape.
    pub fn grad<'g>(&'g self, y: Var<'g>, xs: &[Var<'g>]) -> Vec<Var<'g>> {
        assert!(std::ptr::eq(y.graph, self), "variable from another graph");
        assert_eq!(y.value().len(), 1, "grad() needs a scalar output");
        let n = y.id + 1;
        let mut grads: Vec<Option<usize>> = vec![None; n];
        grads[y.id] = Some(self.constant(Tensor::full(&y.shape(), 1.0)).id);
        for id in (0..n).rev() {
            let Some(gid) = grads[id] else { continue };
            let (op, rg) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].requires_grad)
            };
            if !rg {
                continue;
            }
            for (input, contrib) in self.backward(id, &op, self.var(gid)) {
                grads[input] = Some(match grads[input] {
                    None => contrib.id,
                    Some(prev) => self.var(prev).add(contrib).id,
                });
            }
        }
        xs.iter()
            .map(|x| match grads.get(x.id).copied().flatten() {
                Some(g) => self.var(g),
                None => self.constant(Tensor::zeros(&x.shape())),
            })
            .collect()
    }

    fn backward<'g>(&'g self, id: usize, op: &Op, g: Var<'g>) -> Vec<(usize, Var<'g>)> {
        let out = self.var(id);
        let mut res = Vec::with_capacity(2);
        let mut emit = |input: usize, f: &dyn Fn() -> Var<'g>| {
            if self.requires(input) {
                res.push((input, f()));
            }
        };
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(a, &|| g);
                emit(b, &|| g);
            }
            Op::Sub(a, b) => {
                emit(a, &|| g);
                emit(b, &|| g.neg());
            }
            Op::Mul(a, b) => {
                emit(a, &|| g.mul(self.var(b)));
                emit(b, &|| g.mul(self.var(a)));
            }
            Op::Neg(a) => emit(a, &|| g.neg()),
            Op::Scale(a, k) => emit(a, &|| g.scale(k)),
            Op::AddScalar(a) => emit(a, &|| g),
            Op::Recip(a) => emit(a, &|| g.mul(out.mul(out)).neg()),
            Op::Sqrt(a) => emit(a, &|| g.mul(out.recip()).scale(0.5)),
            Op::Tanh(a) => emit(a, &|| g.mul(out.mul(out).neg().add_scalar(1.0))),
            Op::Sigmoid(a) => emit(a, &|| g.mul(out.mul(out.neg().add_scalar(1.0)))),
            Op::Softplus(a) => emit(a, &|| g.mul(self.var(a).sigmoid())),
            Op::LeakyRelu(a, slope) => emit(a, &|| {
                let mask = self.value_of(a).map(|v| if v > 0.0 { 1.0 } else { slope });
                g.mul_const(Rc::new(mask))
            }),
            Op::MulConst(a, ref c) => emit(a, &|| g.mul_const(c.clone())),
            Op::FloorMax(a, eps) => emit(a, &|| {
                let mask = self.value_of(a).map(|v| if v > eps { 1.0 } else { 0.0 });
                g.mul_const(Rc::new(mask))
            }),
            Op::Huber(a) => emit(a, &|| g.mul(self.var(a).clamp_unit())),
            Op::ClampUnit(a) => emit(a, &|| {
                let mask = self.value_of(a).map(|v| if v.abs() < 1.0 { 1.0 } else { 0.0 });
                g.mul_const(Rc::new(mask))
            }),
            Op::SumAll(a) => emit(a, &|| g.expand(&self.value_of(a).shape().to_vec())),
            Op::Expand(a) => emit(a, &|| g.sum().reshape(&self.value_of(a).shape().to_vec())),
            Op::Reshape(a) => emit(a, &|| g.reshape(&self.value_of(a).shape().to_vec())),
            Op::Transpose(a) => emit(a, &|| g.t()),
            Op::MatMul(a, b) => {
                emit(a, &|| g.matmul(self.var(b).t()));
                emit(b, &|| self.var(a).t().matmul(g));
            }
            Op::Conv2d(x, w, geom) => {
                emit(x, &|| g.conv2d_transpose(self.var(w), geom, &self.value_of(x).shape().to_vec()));
                emit(w, &|| self.var(x).conv2d_weight_grad(g, geom, &self.value_of(w).shape().to_vec()));
            }
            Op::ConvTranspose(gy, w, geom) => {
                emit(gy, &|| g.conv2d(self.var(w), geom));
                emit(w, &|| g.conv2d_weight_grad(self.var(gy), geom, &self.value_of(w).shape().to_vec()));
            }
            Op::ConvWeightGrad(x, gy, geom) => {
                emit(x, &|| self.var(gy).conv2d_transpose(g, geom, &self.value_of(x).shape().to_vec()));
                emit(gy, &|| self.var(x).conv2d(g, geom));
            }
            Op::Upsample2(a) => emit(a, &|| g.sum_pool2()),
            Op::SumPool2(a) => emit(a, &|| g.upsample2()),
            Op::BroadcastAxis1(a) => emit(a, &|| g.sum_to_axis1()),
            Op::SumToAxis1(a) => emit(a, &|| g.broadcast_axis1(&self.value_of(a).shape().to_vec())),
            Op::RowSum(a) => emit(a, &|| g.row_broadcast(self.value_of(a).shape()[1])),
            Op::RowBroadcast(a) => emit(a, &|| g.row_sum()),
        }
        res
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// Same value, cut from the gradient tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.leaf(self.value(), false)
    }

    fn check(&self, other: &Var<'g>) {
        assert!(std::ptr::eq(self.graph, other.graph), "variables from different graphs");
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op, &[self.id])
    }

    fn binary(&self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        self.check(&other);
        self.graph.push(value, op, &[self.id, other.id])
    }

    pub fn add(&self, other: Var<'g>) -> Var<'g> {
        let v = tensor::add(&self.value(), &other.value());
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'g>) -> Var<'g> {
        self.mul(other.recip())
    }

    pub fn neg(&self) -> Var<'g> {
        self.unary(self.value().map(|v| -v), Op::Neg(self.id))
    }

    pub fn scale(&self, k: f64) -> Var<'g> {
        self.unary(self.value().map(|v| v * k), Op::Scale(self.id, k))
    }

    pub fn add_scalar(&self, k: f64) -> Var<'g> {
        self.unary(self.value().map(|v| v + k), Op::AddScalar(self.id))
    }

    pub fn recip(&self) -> Var<'g> {
        self.unary(self.value().map(|v| 1.0 / v), Op::Recip(self.id))
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(self.value().map(f64::sqrt), Op::Sqrt(self.id))
    }

    pub fn square(&self) -> Var<'g> {
        self.mul(*self)
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(self.value().map(f64::tanh), Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(self.value().map(tensor::sigmoid), Op::Sigmoid(self.id))
    }

    pub fn softplus(&self) -> Var<'g> {
        self.unary(self.value().map(tensor::softplus), Op::Softplus(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g> {
        let v = self.value().map(|v| if v > 0.0 { v } else { slope * v });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&self, c: Rc<Tensor>) -> Var<'g> {
        let v = self.value().zip_map(&c, |a, b| a * b);
        self.unary(v, Op::MulConst(self.id, c))
    }

    /// `max(x, floor)` elementwise.
    pub fn floor_at(&self, floor: f64) -> Var<'g> {
        self.unary(self.value().map(|v| v.max(floor)), Op::FloorMax(self.id, floor))
    }

    /// Smooth-L1 kernel with unit knee, elementwise.
    pub fn huber(&self) -> Var<'g> {
        self.unary(self.value().map(tensor::huber), Op::Huber(self.id))
    }

    pub fn clamp_unit(&self) -> Var<'g> {
        self.unary(self.value().map(|v| v.clamp(-1.0, 1.0)), Op::ClampUnit(self.id))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Var<'g> {
        self.unary(Tensor::scalar(self.value().sum()), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Var<'g> {
        let v = self.value();
        assert_eq!(v.len(), 1, "expand needs a single element");
        self.unary(Tensor::full(shape, v.item()), Op::Expand(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'g> {
        let v = self.value().reshape(shape).expect("reshape element count");
        self.unary(v, Op::Reshape(self.id))
    }

    pub fn t(&self) -> Var<'g> {
        self.unary(tensor::transpose(&self.value()), Op::Transpose(self.id))
    }

    pub fn matmul(&self, other: Var<'g>) -> Var<'g> {
        let v = tensor::matmul(&self.value(), &other.value());
        self.binary(other, v, Op::MatMul(self.id, other.id))
    }

    pub fn conv2d(&self, w: Var<'g>, geom: ConvGeom) -> Var<'g> {
        let v = tensor::conv2d(&self.value(), &w.value(), geom);
        self.binary(w, v, Op::Conv2d(self.id, w.id, geom))
    }

    pub fn conv2d_transpose(&self, w: Var<'g>, geom: ConvGeom, in_shape: &[usize]) -> Var<'g> {
        let v = tensor::conv2d_transpose(&self.value(), &w.value(), geom, in_shape);
        self.binary(w, v, Op::ConvTranspose(self.id, w.id, geom))
    }

    /// `self` is the convolution input, `gy` the output-side gradient.
    pub fn conv2d_weight_grad(&self, gy: Var<'g>, geom: ConvGeom, w_shape: &[usize]) -> Var<'g> {
        let v = tensor::conv2d_weight_grad(&self.value(), &gy.value(), geom, w_shape);
        self.binary(gy, v, Op::ConvWeightGrad(self.id, gy.id, geom))
    }

    pub fn upsample2(&self) -> Var<'g> {
        self.unary(tensor::upsample2(&self.value()), Op::Upsample2(self.id))
    }

    pub fn sum_pool2(&self) -> Var<'g> {
        self.unary(tensor::sum_pool2(&self.value()), Op::SumPool2(self.id))
    }

    pub fn broadcast_axis1(&self, shape: &[usize]) -> Var<'g> {
        self.unary(tensor::broadcast_axis1(&self.value(), shape), Op::BroadcastAxis1(self.id))
    }

    pub fn sum_to_axis1(&self) -> Var<'g> {
        self.unary(tensor::sum_to_axis1(&self.value()), Op::SumToAxis1(self.id))
    }

    /// `[R, D] -> [R]`
    pub fn row_sum(&self) -> Var<'g> {
        self.unary(tensor::row_sum(&self.value()), Op::RowSum(self.id))
    }

    /// `[R] -> [R, D]`
    pub fn row_broadcast(&self, d: usize) -> Var<'g> {
        self.unary(tensor::row_broadcast(&self.value(), d), Op::RowBroadcast(self.id))
    }

    /// Adds a per-channel bias along axis 1.
    pub fn add_bias(&self, b: Var<'g>) -> Var<'g> {
        self.add(b.broadcast_axis1(&self.shape()))
    }

    /// `[N, in] x [in, out] + [out]`
    pub fn linear(&self, w: Var<'g>, b: Var<'g>) -> Var<'g> {
        self.matmul(w).add_bias(b)
    }

    /// Per-row mean of an `[R, D]` matrix, shape `[R]`.
    pub fn row_mean(&self) -> Var<'g> {
        let d = self.shape()[1] as f64;
        self.row_sum().scale(1.0 / d)
    }

    /// Scales each row to unit L2 norm, with the norm floored at `eps`.
    pub fn row_normalize(&self, eps: f64) -> Var<'g> {
        let d = self.shape()[1];
        let norm = self.square().row_sum().floor_at(eps * eps).sqrt();
        self.mul(norm.recip().row_broadcast(d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn product_rule() {
        let g = Graph::new();
        let a = g.param(t(&[2], &[1.5, -2.0]));
        let b = g.param(t(&[2], &[3.0, 0.5]));
        let y = a.mul(b).sum();
        let grads = g.grad(y, &[a, b]);
        assert_eq!(grads[0].value().data(), &[3.0, 0.5]);
        assert_eq!(grads[1].value().data(), &[1.5, -2.0]);
    }

    #[test]
    fn second_derivative_of_cube() {
        // d²/dx² x³ = 6x
        let g = Graph::new();
        let x = g.param(t(&[1], &[2.0]));
        let y = x.mul(x).mul(x).sum();
        let dx = g.grad(y, &[x])[0];
        assert_eq!(dx.value().item(), 12.0);
        let ddx = g.grad(dx.sum(), &[x])[0];
        assert_eq!(ddx.value().item(), 12.0);
    }

    #[test]
    fn constants_get_zero_gradients() {
        let g = Graph::new();
        let a = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let c = g.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let y = a.add(c).sum();
        let grads = g.grad(y, &[a, c]);
        assert_eq!(grads[0].value().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads[1].value().data(), &[0.0, 0.0, 0.0]);
        assert!(!c.requires_grad());
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::new();
        let a = g.param(t(&[1], &[4.0]));
        let y = a.mul(a.detach()).sum();
        assert_eq!(g.grad(y, &[a])[0].value().item(), 4.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let g = Graph::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let y = a.add(a).add(a).sum();
        assert_eq!(g.grad(y, &[a])[0].value().data(), &[3.0, 3.0]);
    }
}
