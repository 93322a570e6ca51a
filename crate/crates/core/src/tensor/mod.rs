//! Dense row-major tensors and the arithmetic the models are built from.
//!
//! Every operation here is pure: inputs are borrowed immutably and a fresh
//! tensor is returned. Layout for image data is NCHW throughout.

mod conv;

pub use conv::{conv2d, ConvSpec, CANDIDATE_SPECS};
pub(crate) use conv::{correlate, correlate_input_grad, correlate_weight_grad};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
}

impl<T: std::fmt::Debug> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Element-wise binary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Element-wise unary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
}

/// Right-hand side of a binary element-wise operation.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "new",
                msg: format!("zero extent in {shape:?}"),
            });
        }
        if numel(&shape) != data.len() {
            return Err(Error::LengthMismatch {
                expected: numel(&shape),
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    /// Rank-0 tensor.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self::new(shape.to_vec(), data).expect("consistent shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a tensor holding exactly one element.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn binary(&self, op: BinaryOp, rhs: Operand<'_, T>) -> Result<Self> {
        let f = match op {
            BinaryOp::Add => |a: T, b: T| a + b,
            BinaryOp::Sub => |a: T, b: T| a - b,
            BinaryOp::Mul => |a: T, b: T| a * b,
        };
        match rhs {
            Operand::Tensor(b) => self.zip_with(b, op_name(op), f),
            Operand::Scalar(s) => Ok(self.map(|a| f(a, s))),
        }
    }

    pub fn unary(&self, op: UnaryOp) -> Self {
        match op {
            UnaryOp::Relu => self.map(relu),
            UnaryOp::Sigmoid => self.map(sigmoid),
            UnaryOp::Tanh => self.map(T::tanh),
            UnaryOp::Exp => self.map(T::exp),
            UnaryOp::Log => self.map(T::ln),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(BinaryOp::Add, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(BinaryOp::Sub, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(BinaryOp::Mul, Operand::Tensor(other))
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|a| a * c)
    }

    pub fn add_scalar(&self, c: T) -> Self {
        self.map(|a| a + c)
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::lit(self.numel() as f64)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "dot")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> T {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Reduces over `axes` (duplicates ignored, order irrelevant). Reducing
    /// every axis yields a rank-0 tensor.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &axis in axes {
            if axis >= rank {
                return Err(Error::InvalidAxis { axis, rank });
            }
            reduced[axis] = true;
        }
        let out_shape: Vec<usize> = (0..rank).filter(|&d| !reduced[d]).map(|d| self.shape[d]).collect();
        let count: usize = (0..rank).filter(|&d| reduced[d]).map(|d| self.shape[d]).product();
        let mut out = vec![T::zero(); numel(&out_shape)];
        let strides = strides(&self.shape);
        let out_strides = strides_of_kept(&self.shape, &reduced);
        for (flat, &v) in self.data.iter().enumerate() {
            let mut o = 0;
            for d in 0..rank {
                let idx = (flat / strides[d]) % self.shape[d];
                o += idx * out_strides[d];
            }
            out[o] += v;
        }
        if op == ReduceOp::Mean {
            let c = T::lit(count as f64);
            out.iter_mut().for_each(|x| *x = *x / c);
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    /// Softmax along `axis`, stabilized by subtracting the per-slice max.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * extent * inner + k * inner + i;
                let max = (0..extent).map(|k| self.data[at(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..extent {
                    let e = (self.data[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..extent {
                    out[at(k)] = out[at(k)] / total;
                }
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    // --- NCHW helpers -------------------------------------------------------

    pub(crate) fn expect_rank(&self, rank: usize, op: &'static str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::InvalidShape {
                op,
                msg: format!("expected rank {rank}, got shape {:?}", self.shape),
            });
        }
        Ok(())
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        first.expect_rank(4, "concat_channels")?;
        let (n, h, w) = (first.shape[0], first.shape[2], first.shape[3]);
        for p in parts {
            p.expect_rank(4, "concat_channels")?;
            if p.shape[0] != n || p.shape[2] != h || p.shape[3] != w {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let c_total: usize = parts.iter().map(|p| p.shape[1]).sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c_total * plane);
        for b in 0..n {
            for p in parts {
                let c = p.shape[1];
                data.extend_from_slice(&p.data[b * c * plane..(b + 1) * c * plane]);
            }
        }
        Self::new(vec![n, c_total, h, w], data)
    }

    /// Channels `[start, start + len)` of an NCHW tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        self.expect_rank(4, "slice_channels")?;
        let [n, c, h, w] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        if len == 0 || start + len > c {
            return Err(Error::InvalidShape {
                op: "slice_channels",
                msg: format!("range {start}..{} out of {c} channels", start + len),
            });
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Self::new(vec![n, len, h, w], data)
    }

    /// Places this tensor's channels at `start` inside a zero tensor with
    /// `total` channels (adjoint of [`Tensor::slice_channels`]).
    pub fn embed_channels(&self, start: usize, total: usize) -> Result<Self> {
        self.expect_rank(4, "embed_channels")?;
        let [n, c, h, w] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        if start + c > total {
            return Err(Error::InvalidShape {
                op: "embed_channels",
                msg: format!("{c} channels at {start} exceed {total}"),
            });
        }
        let plane = h * w;
        let mut out = Self::zeros(&[n, total, h, w]);
        for b in 0..n {
            let dst = (b * total + start) * plane;
            let src = b * c * plane;
            out.data[dst..dst + c * plane].copy_from_slice(&self.data[src..src + c * plane]);
        }
        Ok(out)
    }

    /// Sums an NCHW tensor into a per-channel vector.
    pub fn channel_sum(&self) -> Result<Self> {
        self.expect_rank(4, "channel_sum")?;
        let [n, c, h, w] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        let plane = h * w;
        let mut out = vec![T::zero(); c];
        for b in 0..n {
            for (ch, o) in out.iter_mut().enumerate() {
                let base = (b * c + ch) * plane;
                *o += self.data[base..base + plane].iter().copied().sum::<T>();
            }
        }
        Self::new(vec![c], out)
    }

    /// Broadcasts a per-channel vector to an NCHW shape.
    pub fn channel_broadcast(&self, shape: &[usize]) -> Result<Self> {
        self.expect_rank(1, "channel_broadcast")?;
        if shape.len() != 4 || shape[1] != self.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "channel_broadcast",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let plane = shape[2] * shape[3];
        let c = shape[1];
        let mut data = Vec::with_capacity(numel(shape));
        for _ in 0..shape[0] {
            for ch in 0..c {
                data.extend(std::iter::repeat_n(self.data[ch], plane));
            }
        }
        Self::new(shape.to_vec(), data)
    }

    /// Selects samples `[start, start + len)` along the batch axis.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Self> {
        if self.rank() == 0 || start + len > self.shape[0] || len == 0 {
            return Err(Error::InvalidShape {
                op: "slice_batch",
                msg: format!("range {start}..{} of shape {:?}", start + len, self.shape),
            });
        }
        let item: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Self::new(shape, self.data[start * item..(start + len) * item].to_vec())
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            first.check_same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(shape, data)
    }
}

fn op_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn strides_of_kept(shape: &[usize], reduced: &[bool]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        if !reduced[d] {
            s[d] = acc;
            acc *= shape[d];
        }
    }
    s
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_example() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn relu_example() {
        let a = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(a.unary(UnaryOp::Relu).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        assert_eq!(Tensor::scalar(0.0f64).unary(UnaryOp::Sigmoid).item(), 0.5);
    }

    #[test]
    fn scalar_operand_broadcasts() {
        let a = t(&[2], &[1.0, -1.0]);
        let r = a.binary(BinaryOp::Mul, Operand::Scalar(3.0)).unwrap();
        assert_eq!(r.data(), &[3.0, -3.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        let msg = a.add(&b).unwrap_err().to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn reduce_examples() {
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.reduce(ReduceOp::Sum, &[0, 1]).unwrap().item(), 10.0);
        assert_eq!(t(&[2], &[2.0, 4.0]).reduce(ReduceOp::Mean, &[0]).unwrap().item(), 3.0);
        assert_eq!(Tensor::<f64>::zeros(&[5, 5]).reduce(ReduceOp::Sum, &[0, 1]).unwrap().item(), 0.0);
        assert_eq!(m.reduce(ReduceOp::Sum, &[0]).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(m.reduce(ReduceOp::Mean, &[1]).unwrap().data(), &[1.5, 3.5]);
        assert!(matches!(m.reduce(ReduceOp::Sum, &[2]), Err(Error::InvalidAxis { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[3], &[0.0, 0.0, 0.0]).softmax(0).unwrap();
        for &x in s.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        // exp(ln k) = k, so the weights are k / 6
        let s = t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]).softmax(0).unwrap();
        for (x, want) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((x - want).abs() < 1e-15);
        }
        let base = t(&[2, 3], &[0.3, -1.2, 2.0, 5.0, 5.0, -5.0]);
        let shifted = base.add_scalar(123.0);
        let (a, b) = (base.softmax(1).unwrap(), shifted.softmax(1).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        let row: f64 = a.data()[3..].iter().sum();
        assert!((row - 1.0).abs() < 1e-15);
    }

    #[test]
    fn channel_helpers_are_adjoint() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let s = x.slice_channels(1, 2).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2, 2]);
        let e = s.embed_channels(1, 3).unwrap();
        // <slice(x), s> == <x, embed(s)>
        assert_eq!(s.dot(&s).unwrap(), x.dot(&e).unwrap());
        let c = Tensor::concat_channels(&[&x.slice_channels(0, 1).unwrap(), &s]).unwrap();
        assert_eq!(c, x);
        let b = Tensor::from_vec(vec![1.0, 2.0, 3.0]).channel_broadcast(&[2, 3, 2, 2]).unwrap();
        assert_eq!(b.channel_sum().unwrap().data(), &[8.0, 16.0, 24.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
    }
}
