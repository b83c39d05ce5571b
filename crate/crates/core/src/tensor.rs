//! Dense float64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar root walks the tape in reverse creation
//! order and accumulates gradients on every node that depends on a leaf
//! created with [`Tape::leaf`]. Nodes created with [`Tape::constant`] never
//! receive gradient, and operations whose inputs are all constant skip
//! their backward pass entirely.
//!
//! Shape contract violations and non-finite outputs surface as errors at
//! the op that produced them.

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

/// Argument of `acos` whose derivative is used in place of the singular
/// derivative at +/-1.
pub const ACOS_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("tensor shape {shape:?} holds {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor shape {0:?} has a zero extent")]
    EmptyExtent(Vec<usize>),
    #[error("{op}: division by zero")]
    DivisionByZero { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::EmptyExtent(shape));
        }
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Inputs handed to a backward closure.
pub struct BackwardCtx<'a> {
    /// Gradient of the root with respect to this node's output.
    pub grad: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: &'a [Rc<Tensor>],
    needs: &'a [bool],
}

impl BackwardCtx<'_> {
    /// Whether input `i` participates in differentiation.
    pub fn needs_grad(&self, i: usize) -> bool {
        self.needs[i]
    }
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Recording tape. Nodes are append-only, so creation order is a
/// topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, inputs: Vec<usize>, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        let backward = if requires_grad { backward } else { None };
        nodes.push(Node {
            value: Rc::new(value),
            inputs,
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input (parameter).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Records an operation with a hand-written backward pass. The closure
    /// returns one optional gradient per input, in input order.
    pub fn custom<'t>(
        &'t self,
        op: &'static str,
        inputs: &[Var<'t>],
        value: Tensor,
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    ) -> Result<Var<'t>> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        for v in inputs {
            debug_assert!(std::ptr::eq(v.tape, self), "{op}: variable from another tape");
        }
        Ok(self.push(
            value,
            inputs.iter().map(|v| v.id).collect(),
            Some(Box::new(backward)),
        ))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Accumulates d(root)/d(node) into every node reachable from `root`.
    /// Gradients add up across calls until [`Tape::zero_grad`].
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape().to_vec();
        if numel(&root_shape) != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize_with(nodes.len(), || None);
        }
        let mut pending: Vec<Option<Tensor>> = Vec::new();
        pending.resize_with(root.id + 1, || None);
        pending[root.id] = Some(Tensor::full(&root_shape, 1.0));

        for id in (0..=root.id).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let inputs: Vec<Rc<Tensor>> =
                    node.inputs.iter().map(|&i| Rc::clone(&nodes[i].value)).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                let ctx = BackwardCtx {
                    grad: &g,
                    output: &node.value,
                    inputs: &inputs,
                    needs: &needs,
                };
                let input_grads = bw(&ctx);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (k, ig) in input_grads.into_iter().enumerate() {
                    let Some(ig) = ig else { continue };
                    if !needs[k] {
                        continue;
                    }
                    let pid = node.inputs[k];
                    debug_assert_eq!(ig.shape(), nodes[pid].value.shape());
                    match &mut pending[pid] {
                        Some(acc) => acc.add_assign(&ig),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            match &mut grads[id] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(var.id).and_then(|g| g.clone())
    }
}


fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis < shape.len() {
        Ok(())
    } else {
        Err(TensorError::InvalidAxis {
            op,
            axis,
            shape: shape.to_vec(),
        })
    }
}

/// Split a shape around `axis` into (outer, extent, inner) strides.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

type BinFn = fn(f64, f64) -> f64;

/// Elementwise binary op where the operands have equal shapes or one of
/// them holds a single element.
fn binary<'t>(
    op: &'static str,
    a: Var<'t>,
    b: Var<'t>,
    f: BinFn,
    da: BinFn,
    db: BinFn,
) -> Result<Var<'t>> {
    let tape = a.tape;
    let av = tape.value(a.id);
    let bv = tape.value(b.id);
    let out_shape = if av.shape() == bv.shape() {
        av.shape().to_vec()
    } else if bv.is_scalar() {
        av.shape().to_vec()
    } else if av.is_scalar() {
        bv.shape().to_vec()
    } else {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        });
    };
    let n = numel(&out_shape);
    let at = |t: &Tensor, i: usize| if t.len() == 1 { t.data[0] } else { t.data[i] };
    let data: Vec<f64> = (0..n).map(|i| f(at(&av, i), at(&bv, i))).collect();
    let value = Tensor {
        shape: out_shape,
        data,
    };
    tape.custom(op, &[a, b], value, move |ctx| {
        let (x, y) = (&ctx.inputs[0], &ctx.inputs[1]);
        let g = ctx.grad;
        let reduce = |t: &Tensor, d: BinFn| -> Tensor {
            let mut out = Tensor::zeros(t.shape());
            if t.len() == 1 && g.len() != 1 {
                out.data[0] = (0..g.len()).map(|i| g.data[i] * d(at(x, i), at(y, i))).sum();
            } else {
                for i in 0..g.len() {
                    out.data[i] = g.data[i] * d(at(x, i), at(y, i));
                }
            }
            out
        };
        vec![
            ctx.needs_grad(0).then(|| reduce(x, da)),
            ctx.needs_grad(1).then(|| reduce(y, db)),
        ]
    })
}

fn unary<'t>(
    op: &'static str,
    a: Var<'t>,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Var<'t>> {
    let av = a.tape.value(a.id);
    let value = Tensor {
        shape: av.shape.clone(),
        data: av.data.iter().map(|&x| f(x)).collect(),
    };
    a.tape.custom(op, &[a], value, move |ctx| {
        let x = &ctx.inputs[0];
        let data = ctx
            .grad
            .data
            .iter()
            .zip(&x.data)
            .zip(&ctx.output.data)
            .map(|((g, &xi), &yi)| g * df(xi, yi))
            .collect();
        vec![Some(Tensor {
            shape: x.shape.clone(),
            data,
        })]
    })
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` via matrixmultiply.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    // a is m x k (or k x m stored when a_t); b is k x n (or n x k when b_t).
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices are sized m*k, k*n and m*n by the callers and the
    // strides above address exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    // ---- elementwise ----

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        binary("add", self, other, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        binary("sub", self, other, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        binary("mul", self, other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        if other.value().data.iter().any(|&d| d == 0.0) {
            return Err(TensorError::DivisionByZero { op: "div" });
        }
        binary("div", self, other, |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>> {
        binary(
            "max",
            self,
            other,
            f64::max,
            |a, b| if a >= b { 1.0 } else { 0.0 },
            |a, b| if a >= b { 0.0 } else { 1.0 },
        )
    }

    /// `atan2(self, x)` with `self` as the ordinate.
    pub fn atan2(self, x: Var<'t>) -> Result<Var<'t>> {
        binary(
            "atan2",
            self,
            x,
            f64::atan2,
            |y, x| x / (x * x + y * y),
            |y, x| -y / (x * x + y * y),
        )
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        unary("add_scalar", self, move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(self, c: f64) -> Result<Var<'t>> {
        unary("mul_scalar", self, move |x| x * c, move |_, _| c)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        unary("neg", self, |x| -x, |_, _| -1.0)
    }

    /// Absolute value; the subgradient at zero is taken as 0.
    pub fn abs(self) -> Result<Var<'t>> {
        unary("abs", self, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        if self.value().data.iter().any(|&x| x < 0.0) {
            return Err(TensorError::NonFinite { op: "sqrt" });
        }
        unary("sqrt", self, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Result<Var<'t>> {
        unary("square", self, |x| x * x, |x, _| 2.0 * x)
    }

    /// Arc cosine. The forward pass clamps the argument to [-1, 1]; the
    /// backward pass evaluates the derivative at the argument clamped to
    /// [-1 + ACOS_EPS, 1 - ACOS_EPS] so gradients stay finite at aligned
    /// rotations.
    pub fn acos(self) -> Result<Var<'t>> {
        unary(
            "acos",
            self,
            |x| x.clamp(-1.0, 1.0).acos(),
            |x, _| {
                let c = x.clamp(-1.0 + ACOS_EPS, 1.0 - ACOS_EPS);
                -1.0 / (1.0 - c * c).sqrt()
            },
        )
    }

    /// Clamp to `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        unary("clamp", self, move |x| x.clamp(lo, hi), move |x, _| {
            if x < lo || x > hi {
                0.0
            } else {
                1.0
            }
        })
    }

    /// `max(self, c)` elementwise; ties route the gradient to `self`.
    pub fn max_scalar(self, c: f64) -> Result<Var<'t>> {
        unary("max_scalar", self, move |x| x.max(c), move |x, _| {
            if x >= c {
                1.0
            } else {
                0.0
            }
        })
    }

    // ---- linear algebra ----

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let av = self.value();
        let bv = other.value();
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[1] != bv.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, &av.data, false, &bv.data, false, &mut data, 0.0);
        let value = Tensor {
            shape: vec![m, n],
            data,
        };
        self.tape.custom("matmul", &[self, other], value, move |ctx| {
            let (a, b, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
            let da = ctx.needs_grad(0).then(|| {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, &g.data, false, &b.data, true, &mut d, 0.0);
                Tensor {
                    shape: vec![m, k],
                    data: d,
                }
            });
            let db = ctx.needs_grad(1).then(|| {
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, &a.data, true, &g.data, false, &mut d, 0.0);
                Tensor {
                    shape: vec![k, n],
                    data: d,
                }
            });
            vec![da, db]
        })
    }

    // ---- structural ----

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let av = self.value();
        let value = (*av).clone().reshaped(shape)?;
        let in_shape = av.shape.clone();
        self.tape.custom("reshape", &[self], value, move |ctx| {
            vec![Some(Tensor {
                shape: in_shape.clone(),
                data: ctx.grad.data.clone(),
            })]
        })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let av = self.value();
        let rank = av.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Contract {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {rank}"),
            });
        }
        let value = permute_tensor(&av, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.tape.custom("permute", &[self], value, move |ctx| {
            vec![Some(permute_tensor(ctx.grad, &inverse))]
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        if self.shape().len() != 2 {
            return Err(TensorError::Contract {
                op: "transpose",
                msg: format!("expected rank 2, got {:?}", self.shape()),
            });
        }
        self.permute(&[1, 0])
    }

    /// Broadcast size-1 axes to `shape` (ranks must match).
    pub fn expand(self, shape: &[usize]) -> Result<Var<'t>> {
        let av = self.value();
        let in_shape = av.shape.clone();
        let ok = in_shape.len() == shape.len()
            && in_shape.iter().zip(shape).all(|(&a, &b)| a == b || a == 1);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "expand",
                lhs: in_shape,
                rhs: shape.to_vec(),
            });
        }
        let src_index = broadcast_index_map(&in_shape, shape);
        let data = src_index.iter().map(|&i| av.data[i]).collect();
        let value = Tensor {
            shape: shape.to_vec(),
            data,
        };
        self.tape.custom("expand", &[self], value, move |ctx| {
            let mut g = Tensor::zeros(&in_shape);
            for (o, &i) in src_index.iter().enumerate() {
                g.data[i] += ctx.grad.data[o];
            }
            vec![Some(g)]
        })
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let av = self.value();
        let in_shape = av.shape.clone();
        let value = Tensor::scalar(av.data.iter().sum());
        self.tape.custom("sum", &[self], value, move |ctx| {
            vec![Some(Tensor::full(&in_shape, ctx.grad.item()))]
        })
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let n = self.value().len() as f64;
        self.sum_all()?.mul_scalar(1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let av = self.value();
        check_axis("sum_axis", &av.shape, axis)?;
        let (outer, extent, inner) = split_axis(&av.shape, axis);
        let mut out_shape = av.shape.clone();
        out_shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &av.data[(o * extent + e) * inner..][..inner];
                let dst = &mut data[o * inner..][..inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let in_shape = av.shape.clone();
        let value = Tensor {
            shape: out_shape,
            data,
        };
        self.tape.custom("sum_axis", &[self], value, move |ctx| {
            let mut g = Tensor::zeros(&in_shape);
            for o in 0..outer {
                let src = &ctx.grad.data[o * inner..][..inner];
                for e in 0..extent {
                    g.data[(o * extent + e) * inner..][..inner].copy_from_slice(src);
                }
            }
            vec![Some(g)]
        })
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        check_axis("mean_axis", &shape, axis)?;
        let extent = shape[axis] as f64;
        self.sum_axis(axis)?.mul_scalar(1.0 / extent)
    }

    /// Maximum over `axis`, removing it. The gradient goes to the arg-max
    /// element; ties pick the lowest index.
    pub fn max_axis(self, axis: usize) -> Result<Var<'t>> {
        let av = self.value();
        check_axis("max_axis", &av.shape, axis)?;
        let (outer, extent, inner) = split_axis(&av.shape, axis);
        let mut out_shape = av.shape.clone();
        out_shape.remove(axis);
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                for i in 0..inner {
                    let v = av.data[(o * extent + e) * inner + i];
                    let slot = o * inner + i;
                    if v > data[slot] {
                        data[slot] = v;
                        arg[slot] = e;
                    }
                }
            }
        }
        let in_shape = av.shape.clone();
        let value = Tensor {
            shape: out_shape,
            data,
        };
        self.tape.custom("max_axis", &[self], value, move |ctx| {
            let mut g = Tensor::zeros(&in_shape);
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    g.data[(o * extent + arg[slot]) * inner + i] = ctx.grad.data[slot];
                }
            }
            vec![Some(g)]
        })
    }

    /// Gather entries along `axis` by index; indices may repeat.
    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let av = self.value();
        check_axis("index_select", &av.shape, axis)?;
        if indices.is_empty() {
            return Err(TensorError::Contract {
                op: "index_select",
                msg: "empty index list".into(),
            });
        }
        let (outer, extent, inner) = split_axis(&av.shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(TensorError::IndexOutOfRange {
                op: "index_select",
                index: bad,
                extent,
            });
        }
        let m = indices.len();
        let mut out_shape = av.shape.clone();
        out_shape[axis] = m;
        let mut data = Vec::with_capacity(outer * m * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            if inner == 1 {
                data.extend(indices.iter().map(|&idx| av.data[base + idx]));
            } else {
                for &idx in indices {
                    data.extend_from_slice(&av.data[base + idx * inner..][..inner]);
                }
            }
        }
        let in_shape = av.shape.clone();
        let indices = indices.to_vec();
        let value = Tensor {
            shape: out_shape,
            data,
        };
        self.tape.custom("index_select", &[self], value, move |ctx| {
            let mut g = Tensor::zeros(&in_shape);
            for o in 0..outer {
                let base = o * extent * inner;
                for (j, &idx) in indices.iter().enumerate() {
                    let src = &ctx.grad.data[(o * m + j) * inner..][..inner];
                    let dst = &mut g.data[base + idx * inner..][..inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            vec![Some(g)]
        })
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<'t>(vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let Some(first) = vars.first() else {
        return Err(TensorError::Contract {
            op: "concat",
            msg: "no inputs".into(),
        });
    };
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
    let base = values[0].shape.clone();
    check_axis("concat", &base, axis)?;
    for v in &values[1..] {
        let same_rank = v.shape.len() == base.len();
        if !same_rank || v.shape.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: base,
                rhs: v.shape.clone(),
            });
        }
    }
    let outer = numel(&base[..axis]);
    let inner = numel(&base[axis + 1..]);
    let extents: Vec<usize> = values.iter().map(|v| v.shape[axis]).collect();
    let total: usize = extents.iter().sum();
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &e) in values.iter().zip(&extents) {
            data.extend_from_slice(&v.data[o * e * inner..][..e * inner]);
        }
    }
    let value = Tensor {
        shape: out_shape,
        data,
    };
    tape.custom("concat", vars, value, move |ctx| {
        let mut offset = 0;
        let mut grads = Vec::with_capacity(extents.len());
        for (k, &e) in extents.iter().enumerate() {
            if ctx.needs_grad(k) {
                let mut g = Vec::with_capacity(outer * e * inner);
                for o in 0..outer {
                    g.extend_from_slice(&ctx.grad.data[(o * total + offset) * inner..][..e * inner]);
                }
                grads.push(Some(Tensor {
                    shape: ctx.inputs[k].shape.clone(),
                    data: g,
                }));
            } else {
                grads.push(None);
            }
            offset += e;
        }
        grads
    })
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_strides = strides(&t.shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape[p]).collect();
    let n = t.len();
    let mut data = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let src: usize = (0..rank).map(|i| idx[i] * in_strides[perm[i]]).sum();
        data.push(t.data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor {
        shape: out_shape,
        data,
    }
}

/// For each flat index of `out_shape`, the flat index in `in_shape` it
/// reads from under size-1 broadcasting.
fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let rank = out_shape.len();
    let n = numel(out_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let src: usize = (0..rank)
            .map(|i| if in_shape[i] == 1 { 0 } else { idx[i] * in_strides[i] })
            .sum();
        map.push(src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}
