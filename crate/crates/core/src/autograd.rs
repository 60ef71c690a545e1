//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value. `backward` walks the
//! tape from a scalar root towards the leaves. Losses are inserted as fused
//! nodes carrying their analytic local gradients (see [`Tape::loss`]).

use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeometry,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat {
        a: Var,
        b: Var,
        split: usize,
    },
    Add(Var, Var),
    MulConst {
        x: Var,
        factor: Tensor<T>,
    },
    Softmax(Var),
    Loss(Vec<(Var, Tensor<T>)>),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, g: ConvGeometry) -> Var {
        let value = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), g);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::Conv { x, w, b, g }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (value, argmax) = kernels::max_pool2_forward(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::MaxPool2 { x, argmax }, rg)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let value = kernels::upsample2_forward(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::Upsample2(x), rg)
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let split = self.value(a).dims4().1;
        let value = kernels::concat_channels(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Concat { a, b, split }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Tensor<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), factor.shape(), "mul_const shape");
        let data = xv.data().iter().zip(factor.data()).map(|(&a, &b)| a * b).collect();
        let value = Tensor::from_vec(xv.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::MulConst { x, factor }, rg)
    }

    /// Softmax over the channel axis of an NCHW tensor.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = kernels::softmax_channels(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Inserts a scalar node with externally computed value and local
    /// gradients `d value / d input` for each input.
    pub fn loss(&mut self, value: T, parts: Vec<(Var, Tensor<T>)>) -> Var {
        for (v, g) in &parts {
            assert_eq!(self.value(*v).shape(), g.shape(), "loss gradient shape");
        }
        let rg = parts.iter().any(|(v, _)| self.rg(*v));
        self.push(Tensor::scalar(value), Op::Loss(parts), rg)
    }

    /// `sum_i c_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut total = T::zero();
        for &(v, c) in terms {
            total += c * self.value(v).item();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg)
    }

    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        let mut out: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let send = |v: Var, t: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.rg(v) {
                    return;
                }
                match grads[v.0].as_mut() {
                    Some(acc) => acc.add_assign(&t),
                    None => grads[v.0] = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    out[idx] = Some(g);
                }
                Op::Conv { x, w, b, g: geom } => {
                    let (gx, gw, gb) =
                        kernels::conv2d_backward(self.value(*x), self.value(*w), &g, *geom, self.rg(*x));
                    if let Some(gx) = gx {
                        send(*x, gx, &mut grads);
                    }
                    send(*w, gw, &mut grads);
                    if let Some(b) = b {
                        send(*b, gb, &mut grads);
                    }
                }
                Op::Relu(x) => {
                    let y = &node.value;
                    let gx = zip_map(&g, y, |gv, yv| if yv > T::zero() { gv } else { T::zero() });
                    send(*x, gx, &mut grads);
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = self.value(*x);
                    let s = *slope;
                    let gx = zip_map(&g, xv, |gv, v| if v > T::zero() { gv } else { gv * s });
                    send(*x, gx, &mut grads);
                }
                Op::Tanh(x) => {
                    let gx = zip_map(&g, &node.value, |gv, y| gv * (T::one() - y * y));
                    send(*x, gx, &mut grads);
                }
                Op::Sigmoid(x) => {
                    let gx = zip_map(&g, &node.value, |gv, y| gv * y * (T::one() - y));
                    send(*x, gx, &mut grads);
                }
                Op::MaxPool2 { x, argmax } => {
                    let gx = kernels::max_pool2_backward(self.value(*x).shape(), argmax, &g);
                    send(*x, gx, &mut grads);
                }
                Op::Upsample2(x) => {
                    send(*x, kernels::upsample2_backward(&g), &mut grads);
                }
                Op::Concat { a, b, split } => {
                    let (ga, gb) = kernels::split_channels(&g, *split);
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::MulConst { x, factor } => {
                    send(*x, zip_map(&g, factor, |gv, f| gv * f), &mut grads);
                }
                Op::Softmax(x) => {
                    send(*x, kernels::softmax_channels_backward(&node.value, &g), &mut grads);
                }
                Op::Loss(parts) => {
                    let up = g.item();
                    for (v, local) in parts {
                        send(*v, local.scale(up), &mut grads);
                    }
                }
                Op::WeightedSum(terms) => {
                    let up = g.item();
                    for &(v, c) in terms {
                        send(v, Tensor::scalar(up * c), &mut grads);
                    }
                }
            }
        }
        Gradients { leaves: out }
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

/// Gradients of the root with respect to leaf nodes.
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaves.get_mut(v.0).and_then(|g| g.take())
    }
}
