//! A small tape-based reverse-mode autodiff over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so reverse creation order is a
//! valid topological order for the backward sweep. Nodes that do not depend
//! on any trainable leaf are stored as constants and never visited.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::kernels::{self, ConvGeom, ConvTransposeGeom};
use crate::nn::params::ParamStore;
use crate::tensor::{Nhwc, Real, Tensor};

enum Op<T> {
    Leaf,
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    ConvTranspose2d { x: usize, w: usize, b: Option<usize>, geom: ConvTransposeGeom },
    ReflectPad { x: usize, pad: usize },
    InstanceNorm { x: usize, inv_std: Vec<T> },
    Relu { x: usize },
    LeakyRelu { x: usize, slope: T },
    Tanh { x: usize },
    Sigmoid { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Scale { x: usize, factor: T },
    Abs { x: usize },
    Square { x: usize },
    Ln { x: usize },
    Clamp { x: usize, lo: T, hi: T },
    Mean { x: usize },
    Gram { x: usize },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Insert every tensor of `params` as a leaf. Frozen stores become constants.
    pub fn bind<'g>(&'g self, params: &ParamStore<T>, trainable: bool) -> Bound<'g, T> {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable { self.variable(t.clone()) } else { self.constant(t.clone()) };
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `root`, returning gradients of all
    /// trainable leaves.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        assert_eq!(root_node.value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        let mut leaves = HashMap::new();
        if !root_node.requires_grad {
            return Gradients { leaves };
        }
        grads[root.id] = Some(Tensor::full(root_node.value.shape(), T::ONE));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
            let req = |i: usize| nodes[i].requires_grad;
            let mut send = |i: usize, t: Tensor<T>| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    leaves.insert(id, g);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let cg = kernels::conv2d_backward(val(*x), val(*w), b.is_some(), *geom, &g, req(*x));
                    if let Some(dx) = cg.input {
                        send(*x, dx);
                    }
                    send(*w, cg.weight);
                    if let (Some(b), Some(db)) = (b, cg.bias) {
                        send(*b, db);
                    }
                }
                Op::ConvTranspose2d { x, w, b, geom } => {
                    let cg = kernels::conv_transpose2d_backward(
                        val(*x),
                        val(*w),
                        b.is_some(),
                        *geom,
                        &g,
                        req(*x),
                    );
                    if let Some(dx) = cg.input {
                        send(*x, dx);
                    }
                    send(*w, cg.weight);
                    if let (Some(b), Some(db)) = (b, cg.bias) {
                        send(*b, db);
                    }
                }
                Op::ReflectPad { x, pad } => {
                    let s = Nhwc::of(val(*x)).expect("pad input");
                    send(*x, kernels::reflect_pad_backward(s, *pad, &g));
                }
                Op::InstanceNorm { x, inv_std } => {
                    send(*x, kernels::instance_norm_backward(&node.value, inv_std, &g));
                }
                Op::Relu { x } => {
                    send(*x, g.zip_map(val(*x), |g, v| if v > T::ZERO { g } else { T::ZERO }));
                }
                Op::LeakyRelu { x, slope } => {
                    let s = *slope;
                    send(*x, g.zip_map(val(*x), |g, v| if v > T::ZERO { g } else { g * s }));
                }
                Op::Tanh { x } => {
                    send(*x, g.zip_map(&node.value, |g, y| g * (T::ONE - y * y)));
                }
                Op::Sigmoid { x } => {
                    send(*x, g.zip_map(&node.value, |g, y| g * y * (T::ONE - y)));
                }
                Op::Add { a, b } => {
                    if a == b {
                        send(*a, g.map(|v| v + v));
                    } else {
                        send(*b, g.clone());
                        send(*a, g);
                    }
                }
                Op::Sub { a, b } => {
                    if a != b {
                        send(*b, g.map(|v| -v));
                        send(*a, g);
                    }
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    send(*x, g.map(|v| v * f));
                }
                Op::Abs { x } => {
                    send(
                        *x,
                        g.zip_map(val(*x), |g, v| {
                            if v > T::ZERO {
                                g
                            } else if v < T::ZERO {
                                -g
                            } else {
                                T::ZERO
                            }
                        }),
                    );
                }
                Op::Square { x } => {
                    send(*x, g.zip_map(val(*x), |g, v| g * (v + v)));
                }
                Op::Ln { x } => {
                    send(*x, g.zip_map(val(*x), |g, v| g / v));
                }
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    send(*x, g.zip_map(val(*x), |g, v| if v < lo || v > hi { T::ZERO } else { g }));
                }
                Op::Mean { x } => {
                    let src = val(*x);
                    let scale = g.item() * T::from_f64(1.0 / src.len() as f64);
                    send(*x, Tensor::full(src.shape(), scale));
                }
                Op::Gram { x } => {
                    send(*x, kernels::gram_backward(val(*x), &g));
                }
            }
        }
        Gradients { leaves }
    }
}

pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&v.id)
    }
}

/// Parameters of one network inserted into a graph, addressable by name.
pub struct Bound<'g, T: Real> {
    vars: BTreeMap<String, Var<'g, T>>,
}

impl<'g, T: Real> Bound<'g, T> {
    pub fn get(&self, name: &str) -> Var<'g, T> {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'g, T>> {
        self.vars.get(name).copied()
    }

    /// Gradient for every bound parameter; zeros where none flowed.
    pub fn collect_grads(&self, grads: &Gradients<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, v) in &self.vars {
            let g = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(v.value().shape()));
            out.insert(name, g);
        }
        out
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        self.graph.push(value, op, self.requires_grad())
    }

    pub fn conv2d(self, w: Var<'g, T>, b: Option<Var<'g, T>>, geom: ConvGeom) -> Var<'g, T> {
        let out = kernels::conv2d_forward(&self.value(), &w.value(), b.map(|b| b.value()).as_deref(), geom);
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        self.graph.push(out, Op::Conv2d { x: self.id, w: w.id, b: b.map(|b| b.id), geom }, rg)
    }

    pub fn conv_transpose2d(
        self,
        w: Var<'g, T>,
        b: Option<Var<'g, T>>,
        geom: ConvTransposeGeom,
    ) -> Var<'g, T> {
        let out = kernels::conv_transpose2d_forward(
            &self.value(),
            &w.value(),
            b.map(|b| b.value()).as_deref(),
            geom,
        );
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        self.graph.push(out, Op::ConvTranspose2d { x: self.id, w: w.id, b: b.map(|b| b.id), geom }, rg)
    }

    pub fn reflect_pad(self, pad: usize) -> Var<'g, T> {
        if pad == 0 {
            return self;
        }
        let out = kernels::reflect_pad_forward(&self.value(), pad);
        self.unary(out, Op::ReflectPad { x: self.id, pad })
    }

    pub fn instance_norm(self) -> Var<'g, T> {
        let (out, inv_std) = kernels::instance_norm_forward(&self.value());
        self.unary(out, Op::InstanceNorm { x: self.id, inv_std })
    }

    pub fn relu(self) -> Var<'g, T> {
        let out = self.value().map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.unary(out, Op::Relu { x: self.id })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g, T> {
        let s = T::from_f64(slope);
        let out = self.value().map(|v| if v > T::ZERO { v } else { v * s });
        self.unary(out, Op::LeakyRelu { x: self.id, slope: s })
    }

    pub fn tanh(self) -> Var<'g, T> {
        let out = self.value().map(|v| v.tanh());
        self.unary(out, Op::Tanh { x: self.id })
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let out = self.value().map(|v| {
            if v >= T::ZERO {
                T::ONE / (T::ONE + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::ONE + e)
            }
        });
        self.unary(out, Op::Sigmoid { x: self.id })
    }

    fn binary(self, other: Var<'g, T>, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, rg)
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        self.binary(other, out, Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(other, out, Op::Sub { a: self.id, b: other.id })
    }

    pub fn scale(self, factor: f64) -> Var<'g, T> {
        let f = T::from_f64(factor);
        let out = self.value().map(|v| v * f);
        self.unary(out, Op::Scale { x: self.id, factor: f })
    }

    pub fn abs(self) -> Var<'g, T> {
        let out = self.value().map(|v| v.abs());
        self.unary(out, Op::Abs { x: self.id })
    }

    pub fn square(self) -> Var<'g, T> {
        let out = self.value().map(|v| v * v);
        self.unary(out, Op::Square { x: self.id })
    }

    pub fn ln(self) -> Var<'g, T> {
        let out = self.value().map(|v| v.ln());
        self.unary(out, Op::Ln { x: self.id })
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g, T> {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let out = self.value().map(|v| if v < lo { lo } else if v > hi { hi } else { v });
        self.unary(out, Op::Clamp { x: self.id, lo, hi })
    }

    /// Mean of all elements as a rank-0 tensor (accumulated in f64).
    pub fn mean(self) -> Var<'g, T> {
        let out = Tensor::scalar(T::from_f64(self.value().mean_f64()));
        self.unary(out, Op::Mean { x: self.id })
    }

    /// Per-sample Gram matrices, `[n, d, d]`.
    pub fn gram(self) -> Var<'g, T> {
        let out = kernels::gram_forward(&self.value());
        self.unary(out, Op::Gram { x: self.id })
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    /// A constant on the same graph.
    pub fn graph_constant(&self, value: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(value)
    }
}
