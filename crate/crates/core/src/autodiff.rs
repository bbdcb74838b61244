//! Reverse-mode differentiation over a single-use tape.
//!
//! Every value produced through a [`Graph`] is appended to its tape, so node
//! ids are already a topological order. [`Graph::backward`] sweeps the tape
//! once in reverse and accumulates into every `requires_grad` leaf.

use std::cell::RefCell;
use std::rc::Rc;

use crate::backend::{sigmoid, Backend, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::{self, PoolKind, Tensor};

/// Handle to a value recorded on a [`Graph`].
///
/// A `Var` is only meaningful for the graph that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MulScalar(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Recip(usize),
    ClampMin(usize, f64),
    SoftmaxRows(usize),
    Sum(usize),
    MeanAxis(usize, usize),
    Reshape(usize),
    Trace(usize),
    Conv2d {
        x: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Pool2d {
        x: usize,
        kind: PoolKind,
        window: usize,
        stride: usize,
    },
    Upsample2x(usize),
    ChannelMul(usize, usize),
    ChannelAdd(usize, usize),
    SliceChannels(usize, usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match *self {
            Leaf => vec![],
            MatMul(a, b)
            | Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | MulScalar(a, b)
            | ChannelMul(a, b)
            | ChannelAdd(a, b) => {
                vec![a, b]
            }
            Conv2d { x, k, .. } | ConvTranspose2d { x, k, .. } => vec![x, k],
            Transpose(a)
            | Scale(a, _)
            | AddScalar(a)
            | Relu(a)
            | Sigmoid(a)
            | Exp(a)
            | Ln(a)
            | Sqrt(a)
            | Recip(a)
            | ClampMin(a, _)
            | SoftmaxRows(a)
            | Sum(a)
            | MeanAxis(a, _)
            | Reshape(a)
            | Trace(a)
            | Upsample2x(a)
            | SliceChannels(a, _) => vec![a],
            Pool2d { x, .. } => vec![x],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Tensor>,
}

/// A tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a leaf tensor. Leaves created with `requires_grad` receive
    /// gradients from [`Graph::backward`].
    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var {
        self.push_node(t, Op::Leaf, requires_grad)
    }

    pub fn param(&self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tensor(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].requires_grad
    }

    /// Accumulated gradient of a `requires_grad` leaf, if any has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = requires_grad || op.inputs().iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            needs_grad,
            grad: None,
        });
        Var {
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        self.push_node(value, op, false)
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Repeated calls without [`Graph::zero_grad`] accumulate.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let n_loss = nodes[loss.id].value.len();
        if n_loss != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut pending: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        pending[loss.id] = Some(Tensor::new(nodes[loss.id].value.shape(), vec![1.0])?);

        for id in (0..=loss.id).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            if !nodes[id].needs_grad {
                continue;
            }
            let contributions = local_gradients(&nodes, id, &g);
            for (input, grad) in contributions {
                if !nodes[input].needs_grad {
                    continue;
                }
                match &mut pending[input] {
                    Some(acc) => acc.add_assign(&grad)?,
                    slot @ None => *slot = Some(grad),
                }
            }
            let node = &mut nodes[id];
            if node.requires_grad {
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape(), data).expect("shape preserved")
}

fn pointwise(x: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    like(
        x,
        x.data()
            .iter()
            .zip(g.data())
            .map(|(&x, &g)| f(x, g))
            .collect(),
    )
}

/// Vector-Jacobian products of node `id` for upstream gradient `g`.
fn local_gradients(nodes: &[Node], id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let want = |i: usize| nodes[i].needs_grad;
    let out = &nodes[id].value;
    match nodes[id].op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut res = Vec::new();
            if want(a) {
                let mut da = vec![0.0; m * k];
                tensor::gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                res.push((a, like(av, da)));
            }
            if want(b) {
                let mut db = vec![0.0; k * n];
                tensor::gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                res.push((b, like(bv, db)));
            }
            res
        }
        Op::Transpose(a) => vec![(a, tensor::transpose(g).expect("rank 2"))],
        Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
        Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|v| -v))],
        Op::Mul(a, b) => vec![
            (
                a,
                g.zip_map(val(b), "mul", |g, y| g * y).expect("same shape"),
            ),
            (
                b,
                g.zip_map(val(a), "mul", |g, x| g * x).expect("same shape"),
            ),
        ],
        Op::Scale(a, f) => vec![(a, g.map(|v| v * f))],
        Op::AddScalar(a) => vec![(a, g.clone())],
        Op::MulScalar(a, s) => {
            let sv = val(s).item();
            let ds: f64 = g.data().iter().zip(val(a).data()).map(|(g, x)| g * x).sum();
            vec![
                (a, g.map(|v| v * sv)),
                (s, Tensor::new(val(s).shape(), vec![ds]).expect("scalar")),
            ]
        }
        Op::Relu(a) => vec![(
            a,
            pointwise(val(a), g, |x, g| if x > 0.0 { g } else { 0.0 }),
        )],
        Op::Sigmoid(a) => vec![(a, pointwise(out, g, |y, g| g * y * (1.0 - y)))],
        Op::Exp(a) => vec![(a, pointwise(out, g, |y, g| g * y))],
        Op::Ln(a) => vec![(
            a,
            pointwise(val(a), g, |x, g| if x > LOG_FLOOR { g / x } else { 0.0 }),
        )],
        Op::Sqrt(a) => vec![(a, pointwise(out, g, |y, g| g * 0.5 / y))],
        Op::Recip(a) => vec![(a, pointwise(out, g, |y, g| -g * y * y))],
        Op::ClampMin(a, floor) => vec![(
            a,
            pointwise(val(a), g, |x, g| if x > floor { g } else { 0.0 }),
        )],
        Op::SoftmaxRows(a) => vec![(a, tensor::softmax_rows_backward(out, g))],
        Op::Sum(a) => vec![(a, Tensor::full(val(a).shape(), g.item()))],
        Op::MeanAxis(a, axis) => {
            let av = val(a);
            let (m, n) = (av.shape()[0], av.shape()[1]);
            let mut da = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    da[i * n + j] = if axis == 0 {
                        g.data()[j] / m as f64
                    } else {
                        g.data()[i] / n as f64
                    };
                }
            }
            vec![(a, like(av, da))]
        }
        Op::Reshape(a) => vec![(a, g.reshaped(val(a).shape()).expect("same size"))],
        Op::Trace(a) => {
            let n = val(a).shape()[0];
            let mut d = Tensor::zeros(&[n, n]);
            for i in 0..n {
                d.data_mut()[i * n + i] = g.item();
            }
            vec![(a, d)]
        }
        Op::Conv2d { x, k, stride, pad } => {
            let (dx, dk) =
                tensor::conv2d_backward(val(x), val(k), stride, pad, g, want(x), want(k));
            dx.map(|d| (x, d))
                .into_iter()
                .chain(dk.map(|d| (k, d)))
                .collect()
        }
        Op::ConvTranspose2d { x, k, stride, pad } => {
            let (dx, dk) =
                tensor::conv_transpose2d_backward(val(x), val(k), stride, pad, g, want(x), want(k));
            dx.map(|d| (x, d))
                .into_iter()
                .chain(dk.map(|d| (k, d)))
                .collect()
        }
        Op::Pool2d {
            x,
            kind,
            window,
            stride,
        } => vec![(x, tensor::pool2d_backward(val(x), kind, window, stride, g))],
        Op::Upsample2x(a) => vec![(a, tensor::upsample2x_backward(val(a).shape(), g))],
        Op::ChannelMul(x, s) => {
            let dx = tensor::channel_mul(g, val(s)).expect("validated");
            let prod = g.zip_map(val(x), "mul", |g, x| g * x).expect("same shape");
            vec![
                (x, dx),
                (
                    s,
                    tensor::channel_sum(&prod)
                        .reshaped(val(s).shape())
                        .expect("len C"),
                ),
            ]
        }
        Op::ChannelAdd(x, b) => vec![
            (x, g.clone()),
            (
                b,
                tensor::channel_sum(g)
                    .reshaped(val(b).shape())
                    .expect("len C"),
            ),
        ],
        Op::SliceChannels(a, start) => {
            vec![(a, tensor::slice_channels_backward(val(a).shape(), start, g))]
        }
    }
}

fn scalar_of(t: &Tensor, op: &'static str) -> Result<()> {
    if t.len() != 1 {
        return Err(Error::dim(op, t.shape(), &[1]));
    }
    Ok(())
}

impl Backend for Graph {
    type Value = Var;

    fn constant(&self, t: Tensor) -> Var {
        self.leaf(t, false)
    }
    fn parameter(&self, t: Tensor) -> Var {
        self.leaf(t, true)
    }
    fn value(&self, v: &Var) -> Tensor {
        (*self.tensor(*v)).clone()
    }
    fn shape(&self, v: &Var) -> Vec<usize> {
        self.tensor(*v).shape().to_vec()
    }
    fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::matmul(&self.tensor(*a), &self.tensor(*b))?;
        Ok(self.push(out, Op::MatMul(a.id, b.id)))
    }
    fn transpose(&self, a: &Var) -> Result<Var> {
        let out = tensor::transpose(&self.tensor(*a))?;
        Ok(self.push(out, Op::Transpose(a.id)))
    }
    fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = self
            .tensor(*a)
            .zip_map(&self.tensor(*b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a.id, b.id)))
    }
    fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = self
            .tensor(*a)
            .zip_map(&self.tensor(*b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a.id, b.id)))
    }
    fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = self
            .tensor(*a)
            .zip_map(&self.tensor(*b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a.id, b.id)))
    }
    fn scale(&self, a: &Var, factor: f64) -> Var {
        let out = self.tensor(*a).map(|v| v * factor);
        self.push(out, Op::Scale(a.id, factor))
    }
    fn add_scalar(&self, a: &Var, offset: f64) -> Var {
        let out = self.tensor(*a).map(|v| v + offset);
        self.push(out, Op::AddScalar(a.id))
    }
    fn mul_scalar(&self, a: &Var, s: &Var) -> Result<Var> {
        let st = self.tensor(*s);
        scalar_of(&st, "mul_scalar")?;
        let sv = st.item();
        let out = self.tensor(*a).map(|v| v * sv);
        Ok(self.push(out, Op::MulScalar(a.id, s.id)))
    }
    fn relu(&self, a: &Var) -> Var {
        let out = self.tensor(*a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a.id))
    }
    fn sigmoid(&self, a: &Var) -> Var {
        let out = self.tensor(*a).map(sigmoid);
        self.push(out, Op::Sigmoid(a.id))
    }
    fn exp(&self, a: &Var) -> Var {
        let out = self.tensor(*a).map(f64::exp);
        self.push(out, Op::Exp(a.id))
    }
    fn ln(&self, a: &Var) -> Var {
        let out = self.tensor(*a).map(|v| v.max(LOG_FLOOR).ln());
        self.push(out, Op::Ln(a.id))
    }
    fn sqrt(&self, a: &Var) -> Var {
        let out = self.tensor(*a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a.id))
    }
    fn recip(&self, a: &Var) -> Var {
        let out = self.tensor(*a).map(|v| 1.0 / v);
        self.push(out, Op::Recip(a.id))
    }
    fn clamp_min(&self, a: &Var, floor: f64) -> Var {
        let out = self.tensor(*a).map(|v| v.max(floor));
        self.push(out, Op::ClampMin(a.id, floor))
    }
    fn softmax_rows(&self, a: &Var) -> Result<Var> {
        let out = tensor::softmax_rows(&self.tensor(*a))?;
        Ok(self.push(out, Op::SoftmaxRows(a.id)))
    }
    fn sum(&self, a: &Var) -> Var {
        let out = Tensor::scalar(self.tensor(*a).sum());
        self.push(out, Op::Sum(a.id))
    }
    fn mean_axis(&self, a: &Var, axis: usize) -> Result<Var> {
        let out = tensor::mean_axis(&self.tensor(*a), axis)?;
        Ok(self.push(out, Op::MeanAxis(a.id, axis)))
    }
    fn reshape(&self, a: &Var, shape: &[usize]) -> Result<Var> {
        let out = self.tensor(*a).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a.id)))
    }
    fn trace(&self, a: &Var) -> Result<Var> {
        let out = Tensor::scalar(tensor::trace(&self.tensor(*a))?);
        Ok(self.push(out, Op::Trace(a.id)))
    }
    fn conv2d(&self, x: &Var, k: &Var, stride: usize, pad: usize) -> Result<Var> {
        let out = tensor::conv2d(&self.tensor(*x), &self.tensor(*k), stride, pad)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x: x.id,
                k: k.id,
                stride,
                pad,
            },
        ))
    }
    fn conv_transpose2d(&self, x: &Var, k: &Var, stride: usize, pad: usize) -> Result<Var> {
        let out = tensor::conv_transpose2d(&self.tensor(*x), &self.tensor(*k), stride, pad)?;
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                x: x.id,
                k: k.id,
                stride,
                pad,
            },
        ))
    }
    fn pool2d(&self, x: &Var, kind: PoolKind, window: usize, stride: usize) -> Result<Var> {
        let out = tensor::pool2d(&self.tensor(*x), kind, window, stride)?;
        Ok(self.push(
            out,
            Op::Pool2d {
                x: x.id,
                kind,
                window,
                stride,
            },
        ))
    }
    fn upsample2x(&self, x: &Var) -> Result<Var> {
        let out = tensor::upsample2x(&self.tensor(*x))?;
        Ok(self.push(out, Op::Upsample2x(x.id)))
    }
    fn channel_mul(&self, x: &Var, s: &Var) -> Result<Var> {
        let out = tensor::channel_mul(&self.tensor(*x), &self.tensor(*s))?;
        Ok(self.push(out, Op::ChannelMul(x.id, s.id)))
    }
    fn channel_add(&self, x: &Var, b: &Var) -> Result<Var> {
        let out = tensor::channel_add(&self.tensor(*x), &self.tensor(*b))?;
        Ok(self.push(out, Op::ChannelAdd(x.id, b.id)))
    }
    fn slice_channels(&self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let out = tensor::slice_channels(&self.tensor(*x), start, len)?;
        Ok(self.push(out, Op::SliceChannels(x.id, start)))
    }
}
