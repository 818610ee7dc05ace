//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Every operation records its inputs and a pullback closure on the `Tape`
//! that owns its operands. Calling [`Tensor::backward`] on a scalar walks the
//! tape in reverse construction order (which is already topological) and
//! accumulates gradients into every reachable tensor that requires them.
//!
//! All math is `f64`. A tape and the tensors on it are confined to one thread
//! (`Rc` enforces this at compile time); independent tapes may live on
//! independent threads.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

pub type NodeId = usize;

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct TapeInner {
    nodes: Vec<Node>,
}

/// Ordered record of primitive operations. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push(
        &self,
        data: Rc<[f64]>,
        shape: Vec<usize>,
        parents: Vec<NodeId>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            requires_grad,
            grad: None,
            parents,
            backward,
        });
        Tensor {
            tape: self.inner.clone(),
            id,
            shape,
            data,
            requires_grad,
        }
    }

    fn leaf(&self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(Error::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(self.push(data.into(), shape.to_vec(), vec![], requires_grad, None))
    }

    /// Leaf that does not participate in differentiation.
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(data, shape, false)
    }

    /// Leaf tracked for gradients.
    pub fn variable(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(data, shape, true)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.leaf(vec![v], &[1], false).expect("scalar leaf")
    }

    /// Constant leaf sharing `data` without copying.
    pub fn constant_shared(&self, data: Rc<[f64]>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(Error::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(self.push(data, shape.to_vec(), vec![], false, None))
    }
}

/// Handle to one tape node. Values are immutable once recorded; gradients
/// appear on `requires_grad` nodes after a `backward` call.
#[derive(Clone)]
pub struct Tensor {
    tape: Rc<RefCell<TapeInner>>,
    id: NodeId,
    shape: Vec<usize>,
    data: Rc<[f64]>,
    requires_grad: bool,
}

// How the smaller operand of a binary op maps onto the larger one. Only
// leading-dimension expansion is supported: the small shape must equal the
// trailing dimensions of the large one (a single-element tensor matches
// anything). Element i of the result reads small[i % small_len].
fn suffix_compatible(small: &[usize], big: &[usize]) -> bool {
    numel(small) == 1 || (small.len() <= big.len() && big.ends_with(small))
}

impl Tensor {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn value(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::InvalidShape {
                op: "item",
                expected: "a single element",
                got: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// Gradient recorded by the last `backward` call, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.borrow().nodes[self.id].grad.clone()
    }

    /// Handle to the tape this tensor lives on, for building co-located
    /// constants without threading the tape through every signature.
    pub fn owner(&self) -> Tape {
        Tape {
            inner: self.tape.clone(),
        }
    }

    /// Same values, detached from the graph.
    pub fn detach(&self) -> Tensor {
        let tape = Tape {
            inner: self.tape.clone(),
        };
        tape.push(self.data.clone(), self.shape.clone(), vec![], false, None)
    }

    fn same_tape(&self, other: &Tensor) -> Result<()> {
        if Rc::ptr_eq(&self.tape, &other.tape) {
            Ok(())
        } else {
            Err(Error::TapeMismatch)
        }
    }

    fn emit(
        &self,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<NodeId>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        let requires_grad = backward.is_some();
        let mut inner = self.tape.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            requires_grad,
            grad: None,
            parents,
            backward,
        });
        Tensor {
            tape: self.tape.clone(),
            id,
            shape,
            data: data.into(),
            requires_grad,
        }
    }

    // ---- elementwise machinery ----

    fn unary_op(
        &self,
        f: impl Fn(f64) -> f64,
        // derivative as a function of (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let out: Vec<f64> = self.data.iter().map(|&x| f(x)).collect();
        let bw: Option<BackwardFn> = if self.requires_grad {
            let x = self.data.clone();
            let y: Rc<[f64]> = out.clone().into();
            Some(Box::new(move |g| {
                let gx = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| df(x[i], y[i]) * gi)
                    .collect();
                vec![Some(gx)]
            }))
        } else {
            None
        };
        self.emit(out, self.shape.clone(), vec![self.id], bw)
    }

    fn binary_op(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        dfa: impl Fn(f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        self.same_tape(rhs)?;
        let (an, bn) = (self.numel(), rhs.numel());
        let out_shape = if self.shape == rhs.shape {
            self.shape.clone()
        } else if suffix_compatible(&rhs.shape, &self.shape) {
            self.shape.clone()
        } else if suffix_compatible(&self.shape, &rhs.shape) {
            rhs.shape.clone()
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        };
        let n = numel(&out_shape);
        let a = self.data.clone();
        let b = rhs.data.clone();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(f(a[i % an], b[i % bn]));
        }
        let (need_a, need_b) = (self.requires_grad, rhs.requires_grad);
        let bw: Option<BackwardFn> = if need_a || need_b {
            Some(Box::new(move |g| {
                let ga = need_a.then(|| {
                    let mut acc = vec![0.0; an];
                    for (i, &gi) in g.iter().enumerate() {
                        acc[i % an] += dfa(a[i % an], b[i % bn]) * gi;
                    }
                    acc
                });
                let gb = need_b.then(|| {
                    let mut acc = vec![0.0; bn];
                    for (i, &gi) in g.iter().enumerate() {
                        acc[i % bn] += dfb(a[i % an], b[i % bn]) * gi;
                    }
                    acc
                });
                vec![ga, gb]
            }))
        } else {
            None
        };
        Ok(self.emit(out, out_shape, vec![self.id, rhs.id], bw))
    }

    // ---- arithmetic ----

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_op(rhs, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_op(rhs, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_op(rhs, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_op(
            rhs,
            "div",
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    /// Elementwise minimum; on ties the left operand receives the gradient.
    pub fn minimum(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_op(
            rhs,
            "minimum",
            |a, b| a.min(b),
            |a, b| if a <= b { 1.0 } else { 0.0 },
            |a, b| if a <= b { 0.0 } else { 1.0 },
        )
    }

    /// Elementwise maximum; on ties the left operand receives the gradient.
    pub fn maximum(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_op(
            rhs,
            "maximum",
            |a, b| a.max(b),
            |a, b| if a >= b { 1.0 } else { 0.0 },
            |a, b| if a >= b { 0.0 } else { 1.0 },
        )
    }

    pub fn neg(&self) -> Tensor {
        self.unary_op(|x| -x, |_, _| -1.0)
    }

    pub fn abs(&self) -> Tensor {
        self.unary_op(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn exp(&self) -> Tensor {
        self.unary_op(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Tensor {
        self.unary_op(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary_op(sigmoid, |_, y| y * (1.0 - y))
    }

    /// `ln(1 + e^x)`, computed stably for large |x|.
    pub fn softplus(&self) -> Tensor {
        self.unary_op(softplus, |x, _| sigmoid(x))
    }

    pub fn relu(&self) -> Tensor {
        self.unary_op(
            |x| x.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    /// Gaussian error linear unit (tanh approximation).
    pub fn gelu(&self) -> Tensor {
        self.unary_op(gelu, |x, _| gelu_grad(x))
    }

    /// Elementwise `x^p` for a fixed exponent.
    pub fn powf(&self, p: f64) -> Tensor {
        self.unary_op(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary_op(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary_op(move |x| x + c, |_, _| 1.0)
    }

    // ---- linear algebra ----

    fn as_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::InvalidShape {
                op,
                expected: "a rank-2 tensor",
                got: self.shape.clone(),
            }),
        }
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_tape(rhs)?;
        let (m, k) = self.as_2d("matmul")?;
        let (k2, n) = rhs.as_2d("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let a = self.data.clone();
        let b = rhs.data.clone();
        let out = matmul_kernel(&a, &b, m, k, n);
        let (need_a, need_b) = (self.requires_grad, rhs.requires_grad);
        let bw: Option<BackwardFn> = if need_a || need_b {
            Some(Box::new(move |g| {
                let ga = need_a.then(|| matmul_nt(g, &b, m, n, k));
                let gb = need_b.then(|| matmul_tn(&a, g, m, k, n));
                vec![ga, gb]
            }))
        } else {
            None
        };
        Ok(self.emit(out, vec![m, n], vec![self.id, rhs.id], bw))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.as_2d("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        let bw: Option<BackwardFn> = if self.requires_grad {
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(gx)]
            }))
        } else {
            None
        };
        Ok(self.emit(out, vec![c, r], vec![self.id], bw))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                expected: "a shape with the same element count",
                got: shape.to_vec(),
            });
        }
        let bw: Option<BackwardFn> = if self.requires_grad {
            Some(Box::new(move |g| vec![Some(g.to_vec())]))
        } else {
            None
        };
        // Row-major data is shared, not copied.
        let mut inner = self.tape.borrow_mut();
        let id = inner.nodes.len();
        let requires_grad = bw.is_some();
        inner.nodes.push(Node {
            requires_grad,
            grad: None,
            parents: vec![self.id],
            backward: bw,
        });
        Ok(Tensor {
            tape: self.tape.clone(),
            id,
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad,
        })
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                shape: self.shape.clone(),
            });
        }
        let extent = self.shape[axis];
        if start + len > extent || len == 0 {
            return Err(Error::SliceOutOfRange {
                axis,
                start,
                len,
                extent,
            });
        }
        let (outer, _, inner) = axis_split(&self.shape, axis);
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let total = self.numel();
        let bw: Option<BackwardFn> = if self.requires_grad {
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; total];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * extent + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(gx)]
            }))
        } else {
            None
        };
        Ok(self.emit(out, out_shape, vec![self.id], bw))
    }

    /// Concatenate along `axis`. All parts must share rank, tape, and every
    /// dimension except `axis`.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::InvalidShape {
            op: "concat",
            expected: "at least one tensor",
            got: vec![],
        })?;
        if axis >= first.shape.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                shape: first.shape.clone(),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            first.same_tape(p)?;
            if p.shape.len() != first.shape.len()
                || p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            axis_total += p.shape[axis];
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = vec![0.0; numel(&out_shape)];
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let ext = p.shape[axis];
            for o in 0..outer {
                let src = o * ext * inner;
                let dst = (o * axis_total + offset) * inner;
                out[dst..dst + ext * inner].copy_from_slice(&p.data[src..src + ext * inner]);
            }
            spans.push((offset, ext, p.requires_grad));
            offset += ext;
        }
        let any_grad = parts.iter().any(|p| p.requires_grad);
        let bw: Option<BackwardFn> = if any_grad {
            let spans = spans.clone();
            Some(Box::new(move |g| {
                spans
                    .iter()
                    .map(|&(off, ext, need)| {
                        need.then(|| {
                            let mut gp = vec![0.0; outer * ext * inner];
                            for o in 0..outer {
                                let src = (o * axis_total + off) * inner;
                                let dst = o * ext * inner;
                                gp[dst..dst + ext * inner]
                                    .copy_from_slice(&g[src..src + ext * inner]);
                            }
                            gp
                        })
                    })
                    .collect()
            }))
        } else {
            None
        };
        Ok(first.emit(out, out_shape, parts.iter().map(|p| p.id).collect(), bw))
    }

    // ---- reductions ----

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data.iter().sum();
        let n = self.numel();
        let bw: Option<BackwardFn> = if self.requires_grad {
            Some(Box::new(move |g| vec![Some(vec![g[0]; n])]))
        } else {
            None
        };
        self.emit(vec![total], vec![1], vec![self.id], bw)
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let total: f64 = self.data.iter().sum();
        let inv = 1.0 / n as f64;
        let bw: Option<BackwardFn> = if self.requires_grad {
            Some(Box::new(move |g| vec![Some(vec![g[0] * inv; n])]))
        } else {
            None
        };
        self.emit(vec![total * inv], vec![1], vec![self.id], bw)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                shape: self.shape.clone(),
            });
        }
        let (outer, len, inner) = axis_split(&self.shape, axis);
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i];
                }
            }
        }
        if mean {
            for v in &mut out {
                *v *= scale;
            }
        }
        let mut out_shape: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .filter(|&(d, _)| d != axis)
            .map(|(_, &s)| s)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let bw: Option<BackwardFn> = if self.requires_grad {
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        for i in 0..inner {
                            gx[base + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                vec![Some(gx)]
            }))
        } else {
            None
        };
        Ok(self.emit(out, out_shape, vec![self.id], bw))
    }

    // ---- normalizations ----

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                shape: self.shape.clone(),
            });
        }
        let (outer, len, inner) = axis_split(&self.shape, axis);
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(self.data[idx(j)]);
                }
                let mut denom = 0.0;
                for j in 0..len {
                    let e = (self.data[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    denom += e;
                }
                for j in 0..len {
                    out[idx(j)] /= denom;
                }
            }
        }
        let bw: Option<BackwardFn> = if self.requires_grad {
            let y: Rc<[f64]> = out.clone().into();
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += g[idx(j)] * y[idx(j)];
                        }
                        for j in 0..len {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }))
        } else {
            None
        };
        Ok(self.emit(out, self.shape.clone(), vec![self.id], bw))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&self, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        self.same_tape(weight)?;
        self.same_tape(bias)?;
        let d = *self.shape.last().ok_or(Error::InvalidShape {
            op: "layer_norm",
            expected: "rank >= 1",
            got: self.shape.clone(),
        })?;
        if weight.shape != [d] || bias.shape != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: weight.shape.clone(),
            });
        }
        let rows = self.numel() / d;
        let x = self.data.clone();
        let w = weight.data.clone();
        let b = bias.data.clone();
        let mut out = vec![0.0; self.numel()];
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let h = (row[j] - mu) * istd;
                xhat[r * d + j] = h;
                out[r * d + j] = h * w[j] + b[j];
            }
        }
        let needs = [self.requires_grad, weight.requires_grad, bias.requires_grad];
        let bw: Option<BackwardFn> = if needs.iter().any(|&n| n) {
            let xhat: Rc<[f64]> = xhat.into();
            let inv_std: Rc<[f64]> = inv_std.into();
            Some(Box::new(move |g| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for j in 0..d {
                            let dh = g[r * d + j] * w[j];
                            m1 += dh;
                            m2 += dh * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = g[r * d + j] * w[j];
                            gx[r * d + j] = inv_std[r] * (dh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gw[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    gw
                });
                let gb = needs[2].then(|| {
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                    gb
                });
                vec![gx, gw, gb]
            }))
        } else {
            None
        };
        Ok(self.emit(
            out,
            self.shape.clone(),
            vec![self.id, weight.id, bias.id],
            bw,
        ))
    }

    /// Scale each lane of the last axis to unit Euclidean norm. Norms below
    /// 1e-12 are clamped to keep the op defined at the origin.
    pub fn l2_normalize(&self) -> Result<Tensor> {
        let d = *self.shape.last().ok_or(Error::InvalidShape {
            op: "l2_normalize",
            expected: "rank >= 1",
            got: self.shape.clone(),
        })?;
        let rows = self.numel() / d;
        let mut out = vec![0.0; self.numel()];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &self.data[r * d..(r + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms[r] = norm;
            for j in 0..d {
                out[r * d + j] = row[j] / norm;
            }
        }
        let bw: Option<BackwardFn> = if self.requires_grad {
            let y: Rc<[f64]> = out.clone().into();
            let norms: Rc<[f64]> = norms.into();
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                for r in 0..rows {
                    let mut dot = 0.0;
                    for j in 0..d {
                        dot += g[r * d + j] * y[r * d + j];
                    }
                    for j in 0..d {
                        gx[r * d + j] = (g[r * d + j] - y[r * d + j] * dot) / norms[r];
                    }
                }
                vec![Some(gx)]
            }))
        } else {
            None
        };
        Ok(self.emit(out, self.shape.clone(), vec![self.id], bw))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Gradients of earlier sweeps on the
    /// same tape are overwritten, not accumulated.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape.clone()));
        }
        let mut inner = self.tape.borrow_mut();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.id + 1);
        grads.resize_with(self.id + 1, || None);
        grads[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if inner.nodes[id].requires_grad {
                inner.nodes[id].grad = Some(g.clone());
            }
            let node = &inner.nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let parent_grads = bw(&g);
            let parents = node.parents.clone();
            for (pid, pg) in parents.into_iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&pg) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }
}

// index layout helper: element [o, j, i] of a tensor split at `axis`
// lives at (o * len + j) * inner + i.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// [m,k] x [k,n], row-major, fixed accumulation order.
fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

// a [m,n] times b^T where b is [k,n]; result [m,k].
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for l in 0..n {
                s += arow[l] * brow[l];
            }
            out[i * k + j] = s;
        }
    }
    out
}

// a^T times b where a is [m,k] and b is [m,n]; result [k,n].
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for l in 0..m {
        let arow = &a[l * k..(l + 1) * k];
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..k {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}
