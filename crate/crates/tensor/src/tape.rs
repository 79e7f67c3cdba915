//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`]s during a forward
//! pass. [`Var::backward`] walks the tape in reverse and returns
//! [`Gradients`] for every leaf that requires a gradient. Nodes that do not
//! depend on any differentiable leaf are recorded as constants and skipped
//! entirely during the backward pass.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom, Lu};
use crate::params::{ParamId, ParamTree};
use crate::real::{gemm, MatRef};
use crate::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnKind {
    Neg,
    Exp,
    Ln,
    Sigmoid,
    Tanh,
    Relu,
    Silu,
    Gelu,
    Softplus,
    Sin,
    Cos,
    Square,
    Abs,
    Sqrt,
}

enum Op<T> {
    Leaf,
    Binary { a: usize, b: usize, kind: BinKind },
    Unary { a: usize, kind: UnKind },
    Scale { a: usize, s: T },
    MatMul { a: usize, b: usize },
    Bmm { a: usize, b: usize, ta: bool, tb: bool },
    SumAxis { a: usize, axis: usize },
    SumAll { a: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    IndexSelect { a: usize, idx: Rc<Vec<usize>> },
    Softmax { a: usize },
    LayerNorm { a: usize, rstd: Vec<T> },
    GroupNorm { a: usize, groups: usize, rstd: Vec<T>, xhat: Vec<T> },
    Conv2d { x: usize, w: usize, geom: ConvGeom, cols: Vec<T> },
    Resize { a: usize },
    CumSumEx { a: usize },
    Inverse { a: usize },
    LogAbsDet { a: usize, inv_t: Vec<f64> },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a differentiable computation.
pub struct Tape<'a, T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: Option<&'a ParamTree<T>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    no_grad: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<'t, T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'a, T: Real> Tape<'a, T> {
    /// A tape without parameters; only explicit [`Tape::var`] leaves are differentiable.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: None,
            param_nodes: RefCell::new(HashMap::new()),
            no_grad: false,
        }
    }

    /// A tape that can bind the parameters of `params` as leaves.
    pub fn with_params(params: &'a ParamTree<T>) -> Self {
        Self { params: Some(params), ..Self::new() }
    }

    /// An inference tape: parameters are bound as constants and nothing is differentiable.
    pub fn inference(params: &'a ParamTree<T>) -> Self {
        Self { params: Some(params), no_grad: true, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        nodes.len() - 1
    }

    fn wrap<'t>(&'t self, id: usize) -> Var<'t, T>
    where
        'a: 't,
    {
        Var { tape: self, id }
    }

    /// Differentiable leaf.
    pub fn var<'t>(&'t self, value: Tensor<T>) -> Var<'t, T>
    where
        'a: 't,
    {
        let id = self.push(value, Op::Leaf, !self.no_grad);
        self.wrap(id)
    }

    /// Non-differentiable leaf.
    pub fn constant<'t>(&'t self, value: Tensor<T>) -> Var<'t, T>
    where
        'a: 't,
    {
        let id = self.push(value, Op::Leaf, false);
        self.wrap(id)
    }

    pub fn scalar<'t>(&'t self, value: f64) -> Var<'t, T>
    where
        'a: 't,
    {
        self.constant(Tensor::scalar(T::of(value)))
    }

    /// Binds a parameter as a leaf (once per tape).
    pub fn param<'t>(&'t self, id: ParamId) -> Var<'t, T>
    where
        'a: 't,
    {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return self.wrap(node);
        }
        let params = self.params.expect("tape has no parameter tree bound");
        let value = params.value_rc(id);
        let node = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node { value, op: Op::Leaf, requires_grad: !self.no_grad });
            nodes.len() - 1
        };
        self.param_nodes.borrow_mut().insert(id, node);
        self.wrap(node)
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Var<'t, T>
    where
        'a: 't,
    {
        assert!(!parts.is_empty(), "concat of nothing");
        if parts.len() == 1 {
            return parts[0];
        }
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = kernels::concat(&refs, axis);
        let rg = parts.iter().any(|p| p.requires_grad());
        let id = self.push(out, Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis }, rg);
        self.wrap(id)
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Var::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradients of all bound parameters that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params.iter().filter_map(|&(p, n)| self.grads[n].as_ref().map(|g| (p, g)))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), g.shape());
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<'t, T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.tape.nodes.borrow()[self.id].value.dim(axis)
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn new_node(&self, value: Tensor<T>, op: Op<T>, rg: bool) -> Var<'t, T> {
        let id = self.tape.push(value, op, rg);
        Var { tape: self.tape, id }
    }

    fn binary(self, other: Var<'t, T>, kind: BinKind) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        let out = match kind {
            BinKind::Add => kernels::broadcast_binary(&a, &b, |x, y| x + y),
            BinKind::Sub => kernels::broadcast_binary(&a, &b, |x, y| x - y),
            BinKind::Mul => kernels::broadcast_binary(&a, &b, |x, y| x * y),
            BinKind::Div => kernels::broadcast_binary(&a, &b, |x, y| x / y),
        };
        let rg = self.requires_grad() || other.requires_grad();
        self.new_node(out, Op::Binary { a: self.id, b: other.id, kind }, rg)
    }

    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(other, BinKind::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(other, BinKind::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(other, BinKind::Mul)
    }

    pub fn div(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(other, BinKind::Div)
    }

    fn unary(self, kind: UnKind) -> Var<'t, T> {
        let x = self.value();
        let half = T::of(0.5);
        let out = x.map(|v| match kind {
            UnKind::Neg => -v,
            UnKind::Exp => v.exp(),
            UnKind::Ln => v.ln(),
            UnKind::Sigmoid => sigmoid(v),
            UnKind::Tanh => v.tanh(),
            UnKind::Relu => v.max(T::zero()),
            UnKind::Silu => v * sigmoid(v),
            UnKind::Gelu => half * v * (T::one() + fast_tanh(gelu_inner(v))),
            UnKind::Softplus => v.max(T::zero()) + (-v.abs()).exp().ln_1p(),
            UnKind::Sin => v.sin(),
            UnKind::Cos => v.cos(),
            UnKind::Square => v * v,
            UnKind::Abs => v.abs(),
            UnKind::Sqrt => v.sqrt(),
        });
        let rg = self.requires_grad();
        self.new_node(out, Op::Unary { a: self.id, kind }, rg)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(UnKind::Neg)
    }
    pub fn exp(self) -> Var<'t, T> {
        self.unary(UnKind::Exp)
    }
    pub fn ln(self) -> Var<'t, T> {
        self.unary(UnKind::Ln)
    }
    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(UnKind::Sigmoid)
    }
    pub fn tanh(self) -> Var<'t, T> {
        self.unary(UnKind::Tanh)
    }
    pub fn relu(self) -> Var<'t, T> {
        self.unary(UnKind::Relu)
    }
    /// `x * sigmoid(x)`, a.k.a. swish.
    pub fn silu(self) -> Var<'t, T> {
        self.unary(UnKind::Silu)
    }
    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t, T> {
        self.unary(UnKind::Gelu)
    }
    pub fn softplus(self) -> Var<'t, T> {
        self.unary(UnKind::Softplus)
    }
    /// `log(sigmoid(x))`, computed stably.
    pub fn log_sigmoid(self) -> Var<'t, T> {
        self.neg().softplus().neg()
    }
    pub fn sin(self) -> Var<'t, T> {
        self.unary(UnKind::Sin)
    }
    pub fn cos(self) -> Var<'t, T> {
        self.unary(UnKind::Cos)
    }
    pub fn square(self) -> Var<'t, T> {
        self.unary(UnKind::Square)
    }
    pub fn abs(self) -> Var<'t, T> {
        self.unary(UnKind::Abs)
    }
    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(UnKind::Sqrt)
    }

    pub fn scale(self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        let out = self.value().map(|v| v * s);
        let rg = self.requires_grad();
        self.new_node(out, Op::Scale { a: self.id, s }, rg)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t, T> {
        self.add(self.tape.scalar(s))
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(self, w: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), w.value());
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2-D, got {:?}", b.shape());
        let k = *a.shape().last().expect("matmul lhs must have rank >= 1");
        assert_eq!(k, b.dim(0), "matmul inner dim mismatch {:?} x {:?}", a.shape(), b.shape());
        let n = b.dim(1);
        let rows = a.numel() / k.max(1);
        let mut out = vec![T::zero(); rows * n];
        gemm(MatRef::new(a.data(), rows, k, false), MatRef::new(b.data(), k, n, false), &mut out, false);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.requires_grad() || w.requires_grad();
        self.new_node(Tensor::new(shape, out), Op::MatMul { a: self.id, b: w.id }, rg)
    }

    /// Batched matmul of rank-3 tensors with optional transposes of the last two axes.
    pub fn bmm(self, other: Var<'t, T>, ta: bool, tb: bool) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        assert!(a.ndim() == 3 && b.ndim() == 3, "bmm expects rank-3 operands");
        assert_eq!(a.dim(0), b.dim(0), "bmm batch mismatch");
        let batch = a.dim(0);
        let (m, k) = if ta { (a.dim(2), a.dim(1)) } else { (a.dim(1), a.dim(2)) };
        let (k2, n) = if tb { (b.dim(2), b.dim(1)) } else { (b.dim(1), b.dim(2)) };
        assert_eq!(k, k2, "bmm inner dim mismatch {:?} x {:?}", a.shape(), b.shape());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k, ta),
                MatRef::new(&b.data()[i * k * n..(i + 1) * k * n], k, n, tb),
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.requires_grad() || other.requires_grad();
        self.new_node(Tensor::new(vec![batch, m, n], out), Op::Bmm { a: self.id, b: other.id, ta, tb }, rg)
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Var<'t, T> {
        let x = self.value();
        let data = kernels::sum_axis(&x, axis);
        let mut shape = x.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let rg = self.requires_grad();
        self.new_node(Tensor::new(shape, data), Op::SumAxis { a: self.id, axis }, rg)
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Var<'t, T> {
        let n = self.dim(axis);
        self.sum_axis(axis, keepdim).scale(1.0 / n as f64)
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().sum();
        let rg = self.requires_grad();
        self.new_node(Tensor::scalar(s), Op::SumAll { a: self.id }, rg)
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'t, T> {
        let out = (*self.value()).clone().reshape(shape);
        let rg = self.requires_grad();
        self.new_node(out, Op::Reshape { a: self.id }, rg)
    }

    pub fn permute(self, perm: &[usize]) -> Var<'t, T> {
        let out = kernels::permute(&self.value(), perm);
        let rg = self.requires_grad();
        self.new_node(out, Op::Permute { a: self.id, perm: perm.to_vec() }, rg)
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(self) -> Var<'t, T> {
        self.permute(&[1, 0])
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        let out = kernels::narrow(&self.value(), axis, start, len);
        let rg = self.requires_grad();
        self.new_node(out, Op::Narrow { a: self.id, axis, start }, rg)
    }

    /// Gathers rows along axis 0.
    pub fn index_select(self, idx: Rc<Vec<usize>>) -> Var<'t, T> {
        let out = kernels::index_select(&self.value(), &idx);
        let rg = self.requires_grad();
        self.new_node(out, Op::IndexSelect { a: self.id, idx }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t, T> {
        let out = kernels::softmax_rows(&self.value());
        let rg = self.requires_grad();
        self.new_node(out, Op::Softmax { a: self.id }, rg)
    }

    /// Zero-mean unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(self, eps: f64) -> Var<'t, T> {
        let x = self.value();
        let n = *x.shape().last().expect("layer_norm of a scalar");
        let (out, rstd) = kernels::normalize_groups(x.data(), n, T::of(eps));
        let rg = self.requires_grad();
        self.new_node(Tensor::new(x.shape().to_vec(), out), Op::LayerNorm { a: self.id, rstd }, rg)
    }

    /// Group normalization of an NHWC tensor (no affine).
    pub fn group_norm(self, groups: usize, eps: f64) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.ndim(), 4, "group_norm expects NHWC");
        let (n, hw, c) = (x.dim(0), x.dim(1) * x.dim(2), x.dim(3));
        assert_eq!(c % groups, 0, "channels {c} not divisible by {groups} groups");
        let blocks = kernels::group_gather(x.data(), n, hw, c, groups);
        let (xhat, rstd) = kernels::normalize_groups(&blocks, hw * c / groups, T::of(eps));
        let out = kernels::group_scatter(&xhat, n, hw, c, groups);
        let rg = self.requires_grad();
        self.new_node(Tensor::new(x.shape().to_vec(), out), Op::GroupNorm { a: self.id, groups, rstd, xhat }, rg)
    }

    /// Square-kernel NHWC convolution; `w` is `[k, k, cin, cout]`.
    pub fn conv2d(self, w: Var<'t, T>, stride: usize, pad: usize) -> Var<'t, T> {
        let (x, wv) = (self.value(), w.value());
        assert_eq!(wv.ndim(), 4, "conv2d weight must be [k, k, cin, cout]");
        let k = wv.dim(0);
        let cout = wv.dim(3);
        let geom = ConvGeom::new(x.shape(), k, stride, pad);
        assert_eq!(wv.dim(2), geom.cin, "conv2d channel mismatch");
        let cols = kernels::im2col(x.data(), &geom);
        let mut out = vec![T::zero(); geom.rows() * cout];
        gemm(
            MatRef::new(&cols, geom.rows(), geom.col_width(), false),
            MatRef::new(wv.data(), geom.col_width(), cout, false),
            &mut out,
            false,
        );
        let rg = self.requires_grad() || w.requires_grad();
        let shape = vec![geom.n, geom.ho, geom.wo, cout];
        let cols = if rg { cols } else { Vec::new() };
        self.new_node(Tensor::new(shape, out), Op::Conv2d { x: self.id, w: w.id, geom, cols }, rg)
    }

    /// Bilinear NHWC resize with half-pixel centers.
    pub fn resize_bilinear(self, ho: usize, wo: usize) -> Var<'t, T> {
        let out = kernels::resize_bilinear(&self.value(), ho, wo);
        let rg = self.requires_grad();
        self.new_node(out, Op::Resize { a: self.id }, rg)
    }

    /// Exclusive prefix sum along the last axis.
    pub fn cumsum_exclusive(self) -> Var<'t, T> {
        let out = kernels::cumsum_exclusive(&self.value());
        let rg = self.requires_grad();
        self.new_node(out, Op::CumSumEx { a: self.id }, rg)
    }

    /// Inverse of a square matrix. Panics if singular; check with [`Var::log_abs_det`] first.
    pub fn inverse(self) -> Var<'t, T> {
        let a = self.value();
        let n = square_dim(&a);
        let lu = Lu::factor(&a.to_f64_vec(), n).expect("inverse of a singular matrix");
        let out = Tensor::from_f64(vec![n, n], &lu.inverse());
        let rg = self.requires_grad();
        self.new_node(out, Op::Inverse { a: self.id }, rg)
    }

    /// `log|det A|` of a square matrix, `None` if numerically singular.
    pub fn log_abs_det(self) -> Option<Var<'t, T>> {
        let a = self.value();
        let n = square_dim(&a);
        let lu = Lu::factor(&a.to_f64_vec(), n)?;
        let value = lu.log_abs_det();
        let inv_t = kernels::transpose2(&lu.inverse(), n, n);
        let rg = self.requires_grad();
        Some(self.new_node(Tensor::scalar(T::of(value)), Op::LogAbsDet { a: self.id, inv_t }, rg))
    }

    /// Broadcasts to `shape` by adding zeros.
    pub fn broadcast_to(self, shape: &[usize]) -> Var<'t, T> {
        self.tape.constant(Tensor::zeros(shape.to_vec())).add(self)
    }

    /// Reverse pass from a scalar.
    pub fn backward(self) -> Gradients<T> {
        let nodes = self.tape.nodes.borrow();
        assert_eq!(nodes[self.id].value.numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let params: Vec<(ParamId, usize)> =
            self.tape.param_nodes.borrow().iter().map(|(&p, &n)| (p, n)).collect();
        if !nodes[self.id].requires_grad {
            return Gradients { grads, params };
        }
        grads[self.id] = Some(Tensor::new(nodes[self.id].value.shape().to_vec(), vec![T::one()]));
        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }
        Gradients { grads, params }
    }
}

fn square_dim<T: Real>(a: &Tensor<T>) -> usize {
    assert!(a.ndim() == 2 && a.dim(0) == a.dim(1), "expected a square matrix, got {:?}", a.shape());
    a.dim(0)
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// `tanh` through a single `exp`; libm's `tanhf` dominated GELU-heavy profiles.
#[inline]
fn fast_tanh<T: Real>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

#[inline]
fn gelu_inner<T: Real>(v: T) -> T {
    T::of(GELU_C) * (v + T::of(GELU_A) * v * v * v)
}

fn unary_grad<T: Real>(kind: UnKind, x: T, y: T, g: T) -> T {
    let one = T::one();
    match kind {
        UnKind::Neg => -g,
        UnKind::Exp => g * y,
        UnKind::Ln => g / x,
        UnKind::Sigmoid => g * y * (one - y),
        UnKind::Tanh => g * (one - y * y),
        UnKind::Relu => {
            if x > T::zero() {
                g
            } else {
                T::zero()
            }
        }
        UnKind::Silu => {
            let s = sigmoid(x);
            g * (s + x * s * (one - s))
        }
        UnKind::Gelu => {
            let half = T::of(0.5);
            let th = fast_tanh(gelu_inner(x));
            let du = T::of(GELU_C) * (one + T::of(3.0 * GELU_A) * x * x);
            g * (half * (one + th) + half * x * (one - th * th) * du)
        }
        UnKind::Softplus => g * sigmoid(x),
        UnKind::Sin => g * x.cos(),
        UnKind::Cos => -g * x.sin(),
        UnKind::Square => g * (x + x),
        UnKind::Abs => g * x.signum() * if x == T::zero() { T::zero() } else { one },
        UnKind::Sqrt => g / (y + y),
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let val = |id: usize| -> &Tensor<T> { &nodes[id].value };
    let rg = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::Binary { a, b, kind } => {
            let (av, bv) = (val(a), val(b));
            if rg(a) {
                let ga = match kind {
                    BinKind::Add | BinKind::Sub => kernels::reduce_to_shape(g, av.shape()),
                    BinKind::Mul => kernels::reduce_to_shape(&kernels::broadcast_binary(g, bv, |x, y| x * y), av.shape()),
                    BinKind::Div => kernels::reduce_to_shape(&kernels::broadcast_binary(g, bv, |x, y| x / y), av.shape()),
                };
                accumulate(&mut grads[a], ga);
            }
            if rg(b) {
                let gb = match kind {
                    BinKind::Add => kernels::reduce_to_shape(g, bv.shape()),
                    BinKind::Sub => kernels::reduce_to_shape(&g.map(|v| -v), bv.shape()),
                    BinKind::Mul => kernels::reduce_to_shape(&kernels::broadcast_binary(g, av, |x, y| x * y), bv.shape()),
                    BinKind::Div => {
                        // d(a/b)/db = -out / b
                        let t = kernels::broadcast_binary(g, &node.value, |x, y| -x * y);
                        kernels::reduce_to_shape(&kernels::broadcast_binary(&t, bv, |x, y| x / y), bv.shape())
                    }
                };
                accumulate(&mut grads[b], gb);
            }
        }
        &Op::Unary { a, kind } => {
            let x = val(a);
            let data = x
                .data()
                .iter()
                .zip(node.value.data())
                .zip(g.data())
                .map(|((&xv, &yv), &gv)| unary_grad(kind, xv, yv, gv))
                .collect();
            accumulate(&mut grads[a], Tensor::new(x.shape().to_vec(), data));
        }
        &Op::Scale { a, s } => accumulate(&mut grads[a], g.map(|v| v * s)),
        &Op::MatMul { a, b } => {
            let (av, bv) = (val(a), val(b));
            let (k, n) = (bv.dim(0), bv.dim(1));
            let rows = av.numel() / k.max(1);
            if rg(a) {
                let mut ga = vec![T::zero(); rows * k];
                gemm(MatRef::new(g.data(), rows, n, false), MatRef::new(bv.data(), n, k, true), &mut ga, false);
                accumulate(&mut grads[a], Tensor::new(av.shape().to_vec(), ga));
            }
            if rg(b) {
                let mut gb = vec![T::zero(); k * n];
                gemm(MatRef::new(av.data(), k, rows, true), MatRef::new(g.data(), rows, n, false), &mut gb, false);
                accumulate(&mut grads[b], Tensor::new(vec![k, n], gb));
            }
        }
        &Op::Bmm { a, b, ta, tb } => {
            let (av, bv) = (val(a), val(b));
            let batch = av.dim(0);
            let (m, k) = if ta { (av.dim(2), av.dim(1)) } else { (av.dim(1), av.dim(2)) };
            let n = if tb { bv.dim(1) } else { bv.dim(2) };
            if rg(a) {
                let mut ga = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    let dst = &mut ga[i * m * k..(i + 1) * m * k];
                    if ta {
                        // dA[k,m] = op(B) G^T
                        gemm(MatRef::new(bi, k, n, tb), MatRef::new(gi, n, m, true), dst, false);
                    } else {
                        // dA[m,k] = G op(B)^T
                        gemm(MatRef::new(gi, m, n, false), MatRef::new(bi, n, k, !tb), dst, false);
                    }
                }
                accumulate(&mut grads[a], Tensor::new(av.shape().to_vec(), ga));
            }
            if rg(b) {
                let mut gb = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if tb {
                        // dB[n,k] = G^T op(A)
                        gemm(MatRef::new(gi, n, m, true), MatRef::new(ai, m, k, ta), dst, false);
                    } else {
                        // dB[k,n] = op(A)^T G
                        gemm(MatRef::new(ai, k, m, !ta), MatRef::new(gi, m, n, false), dst, false);
                    }
                }
                accumulate(&mut grads[b], Tensor::new(bv.shape().to_vec(), gb));
            }
        }
        &Op::SumAxis { a, axis } => {
            let shape = val(a).shape().to_vec();
            accumulate(&mut grads[a], Tensor::new(shape.clone(), kernels::expand_axis(g.data(), &shape, axis)));
        }
        &Op::SumAll { a } => {
            let gv = g.item();
            accumulate(&mut grads[a], Tensor::full(val(a).shape().to_vec(), gv));
        }
        &Op::Reshape { a } => accumulate(&mut grads[a], g.clone().reshape(val(a).shape().to_vec())),
        Op::Permute { a, perm } => {
            accumulate(&mut grads[*a], kernels::permute(g, &kernels::inverse_permutation(perm)));
        }
        Op::Concat { parts, axis } => {
            let mut start = 0;
            for &p in parts {
                let len = val(p).dim(*axis);
                if rg(p) {
                    accumulate(&mut grads[p], kernels::narrow(g, *axis, start, len));
                }
                start += len;
            }
        }
        &Op::Narrow { a, axis, start } => {
            accumulate(&mut grads[a], kernels::unnarrow(g, val(a).shape(), axis, start));
        }
        Op::IndexSelect { a, idx } => {
            accumulate(&mut grads[*a], kernels::index_add(g, idx, val(*a).shape()));
        }
        &Op::Softmax { a } => accumulate(&mut grads[a], kernels::softmax_rows_backward(&node.value, g)),
        Op::LayerNorm { a, rstd } => {
            let n = *node.value.shape().last().unwrap();
            let gx = kernels::normalize_groups_backward(node.value.data(), rstd, g.data(), n);
            accumulate(&mut grads[*a], Tensor::new(node.value.shape().to_vec(), gx));
        }
        Op::GroupNorm { a, groups, rstd, xhat } => {
            let s = node.value.shape();
            let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
            let gb = kernels::group_gather(g.data(), n, hw, c, *groups);
            let gx = kernels::normalize_groups_backward(xhat, rstd, &gb, hw * c / groups);
            let gx = kernels::group_scatter(&gx, n, hw, c, *groups);
            accumulate(&mut grads[*a], Tensor::new(s.to_vec(), gx));
        }
        Op::Conv2d { x, w, geom, cols } => {
            let wv = val(*w);
            let cout = wv.dim(3);
            let (rows, cw) = (geom.rows(), geom.col_width());
            if rg(*w) {
                let mut gw = vec![T::zero(); cw * cout];
                gemm(MatRef::new(cols, cw, rows, true), MatRef::new(g.data(), rows, cout, false), &mut gw, false);
                accumulate(&mut grads[*w], Tensor::new(wv.shape().to_vec(), gw));
            }
            if rg(*x) {
                let mut gcols = vec![T::zero(); rows * cw];
                gemm(MatRef::new(g.data(), rows, cout, false), MatRef::new(wv.data(), cout, cw, true), &mut gcols, false);
                let gx = kernels::col2im(&gcols, geom);
                accumulate(&mut grads[*x], Tensor::new(val(*x).shape().to_vec(), gx));
            }
        }
        &Op::Resize { a } => accumulate(&mut grads[a], kernels::resize_bilinear_backward(g, val(a).shape())),
        &Op::CumSumEx { a } => accumulate(&mut grads[a], kernels::cumsum_exclusive_backward(g)),
        &Op::Inverse { a } => {
            // dA = -Y^T G Y^T with Y = A^{-1}
            let y = &node.value;
            let n = y.dim(0);
            let mut tmp = vec![T::zero(); n * n];
            gemm(MatRef::new(y.data(), n, n, true), MatRef::new(g.data(), n, n, false), &mut tmp, false);
            let mut ga = vec![T::zero(); n * n];
            gemm(MatRef::new(&tmp, n, n, false), MatRef::new(y.data(), n, n, true), &mut ga, false);
            ga.iter_mut().for_each(|v| *v = -*v);
            accumulate(&mut grads[a], Tensor::new(vec![n, n], ga));
        }
        Op::LogAbsDet { a, inv_t } => {
            let gv = g.item();
            let n = val(*a).dim(0);
            let ga = inv_t.iter().map(|&v| T::of(v) * gv).collect();
            accumulate(&mut grads[*a], Tensor::new(vec![n, n], ga));
        }
    }
}
