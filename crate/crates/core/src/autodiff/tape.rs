//! Reverse-mode tape.
//!
//! Backward rules are expressed with the same recorded operations as the
//! forward pass, so a gradient is itself a node on the tape and can be
//! differentiated again. That is what makes exact mixed second-order
//! products available (see [`crate::autodiff::mixed_hvp_exact`]).

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{self, correlate, correlate_input_grad, correlate_weight_grad, ConvSpec, Tensor};

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// tensor times rank-0 node
    ScaleBy(usize, usize),
    /// tensor plus rank-0 node
    ShiftBy(usize, usize),
    MulConst(usize, T),
    AddConst(usize),
    Recip(usize),
    Relu(usize),
    LeakyRelu(usize, T),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Abs(usize),
    SumAll(usize),
    Expand(usize),
    ChannelSum(usize),
    ChannelBroadcast(usize),
    SliceChannels(usize, usize),
    EmbedChannels(usize, usize),
    Concat(Vec<usize>),
    Index(usize, usize),
    Scatter(usize, usize),
    Softmax(usize),
    Conv { x: usize, w: usize, stride: usize, padding: usize },
    ConvT { g: usize, w: usize, stride: usize, padding: usize },
    ConvW { x: usize, g: usize, stride: usize, padding: usize },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | ScaleBy(a, b) | ShiftBy(a, b) => vec![*a, *b],
            MulConst(a, _) | AddConst(a) | Recip(a) | Relu(a) | LeakyRelu(a, _) | Sigmoid(a) | Tanh(a) | Exp(a)
            | Log(a) | Softplus(a) | Abs(a) | SumAll(a) | Expand(a) | ChannelSum(a) | ChannelBroadcast(a)
            | SliceChannels(a, _) | EmbedChannels(a, _) | Index(a, _) | Scatter(a, _) | Softmax(a) => vec![*a],
            Concat(parts) => parts.clone(),
            Conv { x, w, .. } => vec![*x, *w],
            ConvT { g, w, .. } => vec![*g, *w],
            ConvW { x, g, .. } => vec![*x, *g],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
}

/// A single-owner recording of tensor operations.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Records a leaf. Whether it is treated as a variable or a constant is
    /// decided per [`Tape::gradients`] call by the `wrt` list.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.leaf(Tensor::scalar(value))
    }

    /// Records every tensor of a group as a leaf, in group order.
    pub fn bind(&self, group: &crate::autodiff::ParamGroup<T>) -> Vec<Var<'_, T>> {
        group.tensors().map(|t| self.leaf(t.clone())).collect()
    }

    /// Gradients of a scalar `loss` with respect to each of `wrt`.
    ///
    /// The returned gradients are themselves recorded, so they may be used in
    /// further computation and differentiated again. Targets the loss does
    /// not depend on receive zeros.
    pub fn gradients<'t>(&'t self, loss: Var<'t, T>, wrt: &[Var<'t, T>]) -> Result<Vec<Var<'t, T>>> {
        let loss_val = loss.value();
        if loss_val.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let n = loss.id + 1;
        let ops: Vec<Op<T>> = self.nodes.borrow()[..n].iter().map(|node| node.op.clone()).collect();

        let mut is_target = vec![false; n];
        for v in wrt {
            if v.id < n {
                is_target[v.id] = true;
            }
        }
        // A node is relevant iff some target lies in its ancestry.
        let mut relevant = is_target.clone();
        for id in 0..n {
            if !relevant[id] {
                relevant[id] = ops[id].inputs().iter().any(|&i| relevant[i]);
            }
        }

        let mut grads: Vec<Option<Var<'t, T>>> = vec![None; n];
        let mut found: Vec<Option<Var<'t, T>>> = vec![None; n];
        grads[loss.id] = Some(self.leaf(Tensor::full(loss_val.shape(), T::one())));

        for id in (0..n).rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if is_target[id] {
                found[id] = Some(g);
            }
            let node = Var { tape: self, id };
            for (input, contribution) in self.backward_rule(&ops[id], node, g, &relevant)? {
                grads[input] = Some(match grads[input] {
                    Some(acc) => acc.add(contribution)?,
                    None => contribution,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|v| match found.get(v.id).copied().flatten() {
                Some(g) => g,
                None => self.leaf(Tensor::zeros_like_shape(&v.value())),
            })
            .collect())
    }

    fn backward_rule<'t>(
        &'t self,
        op: &Op<T>,
        y: Var<'t, T>,
        g: Var<'t, T>,
        relevant: &[bool],
    ) -> Result<Vec<(usize, Var<'t, T>)>> {
        let v = |id: usize| Var { tape: self, id };
        let mut out = Vec::with_capacity(2);
        let mut emit = |id: usize, f: &mut dyn FnMut() -> Result<Var<'t, T>>| -> Result<()> {
            if relevant[id] {
                out.push((id, f()?));
            }
            Ok(())
        };
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(a, &mut || Ok(g))?;
                emit(b, &mut || Ok(g))?;
            }
            Op::Sub(a, b) => {
                emit(a, &mut || Ok(g))?;
                emit(b, &mut || Ok(g.neg()))?;
            }
            Op::Mul(a, b) => {
                emit(a, &mut || g.mul(v(b)))?;
                emit(b, &mut || g.mul(v(a)))?;
            }
            Op::ScaleBy(x, s) => {
                emit(x, &mut || g.scale_by(v(s)))?;
                emit(s, &mut || Ok(g.mul(v(x))?.sum()))?;
            }
            Op::ShiftBy(x, s) => {
                emit(x, &mut || Ok(g))?;
                emit(s, &mut || Ok(g.sum()))?;
            }
            Op::MulConst(x, c) => emit(x, &mut || Ok(g.mul_const(c)))?,
            Op::AddConst(x) => emit(x, &mut || Ok(g))?,
            Op::Recip(x) => emit(x, &mut || g.mul(y)?.mul(y).map(|t| t.neg()))?,
            Op::Relu(x) => emit(x, &mut || {
                let mask = v(x).value().map(|a| if a > T::zero() { T::one() } else { T::zero() });
                g.mul(self.leaf(mask))
            })?,
            Op::LeakyRelu(x, slope) => emit(x, &mut || {
                let mask = v(x).value().map(|a| if a > T::zero() { T::one() } else { slope });
                g.mul(self.leaf(mask))
            })?,
            Op::Sigmoid(x) => emit(x, &mut || {
                // g · y · (1 − y)
                let one_minus = y.neg().add_const(T::one());
                g.mul(y)?.mul(one_minus)
            })?,
            Op::Tanh(x) => emit(x, &mut || {
                let gyy = g.mul(y)?.mul(y)?;
                g.sub(gyy)
            })?,
            Op::Exp(x) => emit(x, &mut || g.mul(y))?,
            Op::Log(x) => emit(x, &mut || g.mul(v(x).recip()))?,
            Op::Softplus(x) => emit(x, &mut || g.mul(v(x).sigmoid()))?,
            Op::Abs(x) => emit(x, &mut || {
                let sign = v(x).value().map(|a| if a > T::zero() { T::one() } else if a < T::zero() { -T::one() } else { T::zero() });
                g.mul(self.leaf(sign))
            })?,
            Op::SumAll(x) => emit(x, &mut || g.expand(v(x).value().shape()))?,
            Op::Expand(s) => emit(s, &mut || Ok(g.sum()))?,
            Op::ChannelSum(x) => emit(x, &mut || g.channel_broadcast(v(x).value().shape()))?,
            Op::ChannelBroadcast(b) => emit(b, &mut || g.channel_sum())?,
            Op::SliceChannels(x, start) => emit(x, &mut || g.embed_channels(start, v(x).value().shape()[1]))?,
            Op::EmbedChannels(x, start) => emit(x, &mut || g.slice_channels(start, v(x).value().shape()[1]))?,
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = v(p).value().shape()[1];
                    emit(p, &mut || g.slice_channels(offset, c))?;
                    offset += c;
                }
            }
            Op::Index(x, flat) => emit(x, &mut || g.scatter(flat, v(x).value().shape()))?,
            Op::Scatter(s, flat) => emit(s, &mut || g.index(flat))?,
            Op::Softmax(x) => emit(x, &mut || {
                // y ⊙ (g − ⟨g, y⟩)
                let inner = g.mul(y)?.sum().neg();
                y.mul(g.shift_by(inner)?)
            })?,
            Op::Conv { x, w, stride, padding } => {
                let xs = v(x).value().shape().to_vec();
                emit(x, &mut || g.conv_input_grad(v(w), stride, padding, (xs[2], xs[3])))?;
                emit(w, &mut || v(x).conv_weight_grad(g, stride, padding, v(w).value().shape()[2]))?;
            }
            Op::ConvT { g: g0, w, stride, padding } => {
                emit(g0, &mut || g.correlate(v(w), stride, padding))?;
                emit(w, &mut || g.conv_weight_grad(v(g0), stride, padding, v(w).value().shape()[2]))?;
            }
            Op::ConvW { x, g: g0, stride, padding } => {
                let xs = v(x).value().shape().to_vec();
                emit(x, &mut || v(g0).conv_input_grad(g, stride, padding, (xs[2], xs[3])))?;
                emit(g0, &mut || v(x).correlate(g, stride, padding))?;
            }
        }
        Ok(out)
    }
}

impl<T: Real> Tensor<T> {
    fn zeros_like_shape(other: &Tensor<T>) -> Tensor<T> {
        if other.rank() == 0 {
            Tensor::scalar(T::zero())
        } else {
            Tensor::zeros(other.shape())
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// A constant copy: gradients never flow through the returned handle.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.leaf((*self.value()).clone())
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let value = self.value().map(f);
        self.tape.push(value, op)
    }

    fn binary(&self, other: Var<'t, T>, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var<'t, T>> {
        let value = self.value().zip_with(&other.value(), name, f)?;
        Ok(self.tape.push(value, op))
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    fn expect_scalar(s: &Var<'t, T>, op: &'static str) -> Result<T> {
        let v = s.value();
        if v.numel() != 1 {
            return Err(Error::InvalidShape {
                op,
                msg: format!("expected a scalar, got {:?}", v.shape()),
            });
        }
        Ok(v.item())
    }

    /// Multiplies every element by the scalar node `s`.
    pub fn scale_by(&self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        let c = Self::expect_scalar(&s, "scale_by")?;
        Ok(self.tape.push(self.value().scale(c), Op::ScaleBy(self.id, s.id)))
    }

    /// Adds the scalar node `s` to every element.
    pub fn shift_by(&self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        let c = Self::expect_scalar(&s, "shift_by")?;
        Ok(self.tape.push(self.value().add_scalar(c), Op::ShiftBy(self.id, s.id)))
    }

    pub fn mul_const(&self, c: T) -> Var<'t, T> {
        self.unary(Op::MulConst(self.id, c), |a| a * c)
    }

    pub fn add_const(&self, c: T) -> Var<'t, T> {
        self.unary(Op::AddConst(self.id), |a| a + c)
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.mul_const(-T::one())
    }

    pub fn recip(&self) -> Var<'t, T> {
        self.unary(Op::Recip(self.id), |a| T::one() / a)
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), tensor::relu)
    }

    pub fn leaky_relu(&self, slope: T) -> Var<'t, T> {
        self.unary(Op::LeakyRelu(self.id, slope), move |a| if a > T::zero() { a } else { a * slope })
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(Op::Sigmoid(self.id), tensor::sigmoid)
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.unary(Op::Tanh(self.id), T::tanh)
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(Op::Exp(self.id), T::exp)
    }

    pub fn log(&self) -> Var<'t, T> {
        self.unary(Op::Log(self.id), T::ln)
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&self) -> Var<'t, T> {
        self.unary(Op::Softplus(self.id), tensor::softplus)
    }

    pub fn abs(&self) -> Var<'t, T> {
        self.unary(Op::Abs(self.id), T::abs)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Result<Var<'t, T>> {
        self.mul(self.sigmoid())
    }

    /// Sum of all elements as a rank-0 node.
    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().sum_all();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().numel();
        self.sum().mul_const(T::one() / T::lit(n as f64))
    }

    /// `⟨self, other⟩` as a rank-0 node.
    pub fn dot(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.mul(other)?.sum())
    }

    /// Broadcasts a rank-0 node to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let c = Self::expect_scalar(self, "expand")?;
        let value = if shape.is_empty() { Tensor::scalar(c) } else { Tensor::full(shape, c) };
        Ok(self.tape.push(value, Op::Expand(self.id)))
    }

    pub fn channel_sum(&self) -> Result<Var<'t, T>> {
        let value = self.value().channel_sum()?;
        Ok(self.tape.push(value, Op::ChannelSum(self.id)))
    }

    pub fn channel_broadcast(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().channel_broadcast(shape)?;
        Ok(self.tape.push(value, Op::ChannelBroadcast(self.id)))
    }

    /// Adds a per-channel bias vector to an NCHW node.
    pub fn add_bias(&self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = bias.channel_broadcast(self.value().shape())?;
        self.add(b)
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let value = self.value().slice_channels(start, len)?;
        Ok(self.tape.push(value, Op::SliceChannels(self.id, start)))
    }

    pub fn embed_channels(&self, start: usize, total: usize) -> Result<Var<'t, T>> {
        let value = self.value().embed_channels(start, total)?;
        Ok(self.tape.push(value, Op::EmbedChannels(self.id, start)))
    }

    pub fn concat_channels(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero nodes"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let value = Tensor::concat_channels(&refs)?;
        Ok(first.tape.push(value, Op::Concat(parts.iter().map(|p| p.id).collect())))
    }

    /// Element `flat` (row-major) as a rank-0 node.
    pub fn index(&self, flat: usize) -> Result<Var<'t, T>> {
        let value = self.value();
        let x = *value.data().get(flat).ok_or_else(|| Error::InvalidShape {
            op: "index",
            msg: format!("index {flat} out of {} elements", value.numel()),
        })?;
        Ok(self.tape.push(Tensor::scalar(x), Op::Index(self.id, flat)))
    }

    /// A zero tensor of `shape` holding this scalar at position `flat`.
    pub fn scatter(&self, flat: usize, shape: &[usize]) -> Result<Var<'t, T>> {
        let c = Self::expect_scalar(self, "scatter")?;
        if flat >= tensor::numel(shape) {
            return Err(Error::invalid(format!("scatter index {flat} out of {shape:?}")));
        }
        let value = Tensor::from_fn(shape, |i| if i == flat { c } else { T::zero() });
        Ok(self.tape.push(value, Op::Scatter(self.id, flat)))
    }

    /// Softmax of a rank-1 node.
    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let value = self.value();
        value.expect_rank(1, "softmax")?;
        Ok(self.tape.push(value.softmax(0)?, Op::Softmax(self.id)))
    }

    fn correlate(&self, w: Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        let value = correlate(&self.value(), &w.value(), stride, padding)?;
        Ok(self.tape.push(
            value,
            Op::Conv {
                x: self.id,
                w: w.id,
                stride,
                padding,
            },
        ))
    }

    fn conv_input_grad(&self, w: Var<'t, T>, stride: usize, padding: usize, hw: (usize, usize)) -> Result<Var<'t, T>> {
        let value = correlate_input_grad(&self.value(), &w.value(), stride, padding, hw)?;
        Ok(self.tape.push(
            value,
            Op::ConvT {
                g: self.id,
                w: w.id,
                stride,
                padding,
            },
        ))
    }

    fn conv_weight_grad(&self, g: Var<'t, T>, stride: usize, padding: usize, k: usize) -> Result<Var<'t, T>> {
        let value = correlate_weight_grad(&self.value(), &g.value(), stride, padding, k)?;
        Ok(self.tape.push(
            value,
            Op::ConvW {
                x: self.id,
                g: g.id,
                stride,
                padding,
            },
        ))
    }

    /// Convolution or transposed convolution; weight layouts as in
    /// [`crate::tensor::conv2d`].
    pub fn conv2d(&self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, spec: ConvSpec) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        x.expect_rank(4, "conv2d")?;
        w.expect_rank(4, "conv2d")?;
        if w.shape()[2] != spec.kernel || w.shape()[3] != spec.kernel {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("weight {:?} disagrees with {spec}", w.shape()),
            });
        }
        let out = if spec.transposed {
            let hw = (spec.output_extent(x.shape()[2])?, spec.output_extent(x.shape()[3])?);
            self.conv_input_grad(weight, spec.stride, spec.padding, hw)?
        } else {
            self.correlate(weight, spec.stride, spec.padding)?
        };
        match bias {
            Some(b) => out.add_bias(b),
            None => Ok(out),
        }
    }
}
