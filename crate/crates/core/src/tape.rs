//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records primitive applications during a forward pass
//! (define-by-run; the tape is rebuilt every pass) and replays them in
//! reverse to accumulate gradients. Tensors whose inputs are all
//! untracked are computed eagerly and nothing is recorded, so the same
//! forward code serves both differentiation and plain inference.
//!
//! A tape and the tensors tracked on it are confined to one thread;
//! distinct tapes may run in parallel.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{axis_split, NodeRef, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// One operand of a recorded op: either an earlier node or a captured
/// constant (untracked tensor).
pub(crate) enum Input<S: Scalar> {
    Node(usize),
    Const { data: Arc<Vec<S>>, shape: Vec<usize> },
}

/// Backward rule for a fused op recorded via [`Tape::record_custom`].
/// `upstream` has the op's output length; the result must have the op's
/// input length.
pub(crate) trait CustomVjp<S: Scalar> {
    fn input_grad(&self, upstream: &[S]) -> Vec<S>;
}

pub(crate) enum Op<S: Scalar> {
    Leaf,
    Add(Input<S>, Input<S>),
    Sub(Input<S>, Input<S>),
    Mul(Input<S>, Input<S>),
    ScalarMul(Input<S>, S),
    MatMul(Input<S>, Input<S>),
    Concat { axis: usize, inputs: Vec<Input<S>> },
    Slice { axis: usize, start: usize, input: Input<S> },
    PadZeros { axis: usize, before: usize, input: Input<S> },
    Tanh(Input<S>),
    Sigmoid(Input<S>),
    Relu(Input<S>),
    Exp(Input<S>),
    Log(Input<S>),
    Square(Input<S>),
    ReduceSum { axis: Option<usize>, input: Input<S> },
    // ties resolve to the first (lowest-index) maximum
    ReduceMax { input: Input<S>, argmax: Vec<usize> },
    Softmax { axis: usize, input: Input<S> },
    LogSoftmax { axis: usize, input: Input<S> },
    Gather { indices: Vec<usize>, input: Input<S> },
    Stack { axis: usize, inputs: Vec<Input<S>> },
    Reshape(Input<S>),
    Custom { input: Input<S>, vjp: Box<dyn CustomVjp<S>> },
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    out: Arc<Vec<S>>,
    op: Op<S>,
}

/// Primitive kinds accepted by [`Tape::apply_primitive`].
#[derive(Debug, Clone)]
pub enum PrimitiveKind {
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    MatMul,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    PadZeros { axis: usize, before: usize, after: usize },
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Square,
    ReduceSum { axis: Option<usize> },
    ReduceMax { axis: Option<usize> },
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    Gather { indices: Vec<usize> },
    Stack { axis: usize },
}

pub struct Tape<S: Scalar> {
    id: u64,
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Register a differentiable input. Gradients flow back to the
    /// returned tensor's node; the argument itself stays untracked.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Tensor<S> {
        let shape = t.shape().to_vec();
        let data = t.buffer();
        self.push(shape, data, Op::Leaf)
    }

    fn push(&mut self, shape: Vec<usize>, data: Arc<Vec<S>>, op: Op<S>) -> Tensor<S> {
        let index = self.nodes.len();
        self.nodes.push(Node {
            shape: shape.clone(),
            out: Arc::clone(&data),
            op,
        });
        Tensor::tracked(
            shape,
            data,
            NodeRef {
                tape: self.id,
                index,
            },
        )
    }

    /// Panics on tensors tracked by a different tape: mixing tapes is a
    /// programming error (use `detached()` to cross tapes on purpose).
    fn check_tape(&self, inputs: &[&Tensor<S>]) {
        for t in inputs {
            if let Some(n) = t.node_ref() {
                assert!(
                    n.tape == self.id,
                    "tensor belongs to tape {} but was used on tape {}; detach it first",
                    n.tape,
                    self.id
                );
            }
        }
    }

    fn capture(&self, t: &Tensor<S>) -> Input<S> {
        match t.node_ref() {
            Some(n) => Input::Node(n.index),
            None => Input::Const {
                data: t.buffer(),
                shape: t.shape().to_vec(),
            },
        }
    }

    fn emit(&mut self, shape: Vec<usize>, data: Vec<S>, op: Option<Op<S>>) -> Tensor<S> {
        let data = Arc::new(data);
        match op {
            Some(op) => self.push(shape, data, op),
            None => Tensor::untracked(shape, data),
        }
    }

    /// Record a fused op with a hand-written backward rule. When the
    /// input is untracked the result is returned untracked and nothing
    /// is recorded.
    pub(crate) fn record_custom(
        &mut self,
        input: &Tensor<S>,
        shape: Vec<usize>,
        data: Vec<S>,
        vjp: impl FnOnce() -> Box<dyn CustomVjp<S>>,
    ) -> Tensor<S> {
        self.check_tape(&[input]);
        let op = input.node_ref().map(|_| Op::Custom {
            input: self.capture(input),
            vjp: vjp(),
        });
        self.emit(shape, data, op)
    }

    // ── elementwise binary ───────────────────────────────────────────

    fn binary(
        &mut self,
        kind: &'static str,
        a: &Tensor<S>,
        b: &Tensor<S>,
        f: impl Fn(S, S) -> S,
        mk: impl FnOnce(Input<S>, Input<S>) -> Op<S>,
    ) -> Result<Tensor<S>> {
        self.check_tape(&[a, b]);
        if a.shape() != b.shape() {
            return Err(Error::shape(
                kind,
                format!("{:?} vs {:?} (exact match required)", a.shape(), b.shape()),
            ));
        }
        let data: Vec<S> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let tracked = a.node_ref().is_some() || b.node_ref().is_some();
        let op = tracked.then(|| mk(self.capture(a), self.capture(b)));
        Ok(self.emit(a.shape().to_vec(), data, op))
    }

    pub fn add(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scalar_mul(&mut self, a: &Tensor<S>, c: S) -> Result<Tensor<S>> {
        self.check_tape(&[a]);
        let data: Vec<S> = a.data().iter().map(|&x| x * c).collect();
        let op = a.node_ref().map(|_| Op::ScalarMul(self.capture(a), c));
        Ok(self.emit(a.shape().to_vec(), data, op))
    }

    // ── matmul ───────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_tape(&[a, b]);
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} @ {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let data = mm_nn(a.data(), b.data(), m, k, n);
        let tracked = a.node_ref().is_some() || b.node_ref().is_some();
        let op = tracked.then(|| Op::MatMul(self.capture(a), self.capture(b)));
        Ok(self.emit(vec![m, n], data, op))
    }

    // ── shape ops ────────────────────────────────────────────────────

    pub fn concat(&mut self, axis: usize, parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        self.check_tape(parts);
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} out of rank {rank}")));
        }
        let mut total = 0usize;
        for p in parts {
            if p.rank() != rank {
                return Err(Error::shape("concat", "rank mismatch"));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != first.shape()[d] {
                    return Err(Error::shape(
                        "concat",
                        format!("{:?} vs {:?} on axis {d}", p.shape(), first.shape()),
                    ));
                }
            }
            total += p.shape()[axis];
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = vec![S::zero(); outer * total * inner];
        for o in 0..outer {
            let mut off = 0usize;
            for p in parts {
                let n = p.shape()[axis];
                let src = &p.data()[o * n * inner..(o + 1) * n * inner];
                let dst_at = o * total * inner + off * inner;
                data[dst_at..dst_at + n * inner].copy_from_slice(src);
                off += n;
            }
        }
        let tracked = parts.iter().any(|p| p.node_ref().is_some());
        let op = tracked.then(|| Op::Concat {
            axis,
            inputs: parts.iter().map(|p| self.capture(p)).collect(),
        });
        Ok(self.emit(shape, data, op))
    }

    pub fn slice(&mut self, axis: usize, range: std::ops::Range<usize>, t: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_tape(&[t]);
        if axis >= t.rank() {
            return Err(Error::shape("slice", format!("axis {axis} out of rank {}", t.rank())));
        }
        let n = t.shape()[axis];
        if range.start >= range.end || range.end > n {
            return Err(Error::shape(
                "slice",
                format!("range {range:?} out of extent {n}"),
            ));
        }
        let (outer, _, inner) = axis_split(t.shape(), axis);
        let width = range.end - range.start;
        let mut shape = t.shape().to_vec();
        shape[axis] = width;
        let mut data = vec![S::zero(); outer * width * inner];
        for o in 0..outer {
            let src_at = o * n * inner + range.start * inner;
            let dst_at = o * width * inner;
            data[dst_at..dst_at + width * inner]
                .copy_from_slice(&t.data()[src_at..src_at + width * inner]);
        }
        let op = t.node_ref().map(|_| Op::Slice {
            axis,
            start: range.start,
            input: self.capture(t),
        });
        Ok(self.emit(shape, data, op))
    }

    pub fn pad_zeros(&mut self, axis: usize, before: usize, after: usize, t: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_tape(&[t]);
        if axis >= t.rank() {
            return Err(Error::shape("pad-zeros", format!("axis {axis} out of rank {}", t.rank())));
        }
        let n = t.shape()[axis];
        let total = before + n + after;
        let (outer, _, inner) = axis_split(t.shape(), axis);
        let mut shape = t.shape().to_vec();
        shape[axis] = total;
        let mut data = vec![S::zero(); outer * total * inner];
        for o in 0..outer {
            let src_at = o * n * inner;
            let dst_at = o * total * inner + before * inner;
            data[dst_at..dst_at + n * inner].copy_from_slice(&t.data()[src_at..src_at + n * inner]);
        }
        let op = t.node_ref().map(|_| Op::PadZeros {
            axis,
            before,
            input: self.capture(t),
        });
        Ok(self.emit(shape, data, op))
    }

    pub fn stack(&mut self, axis: usize, parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        self.check_tape(parts);
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack", "no inputs"))?;
        if axis > first.rank() {
            return Err(Error::shape("stack", format!("axis {axis} out of rank {}", first.rank())));
        }
        if parts.iter().any(|p| p.shape() != first.shape()) {
            return Err(Error::shape("stack", "all inputs must share one shape"));
        }
        let k = parts.len();
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis..].iter().product();
        let mut shape = first.shape().to_vec();
        shape.insert(axis, k);
        let mut data = vec![S::zero(); outer * k * inner];
        for o in 0..outer {
            for (j, p) in parts.iter().enumerate() {
                let dst_at = (o * k + j) * inner;
                data[dst_at..dst_at + inner].copy_from_slice(&p.data()[o * inner..(o + 1) * inner]);
            }
        }
        let tracked = parts.iter().any(|p| p.node_ref().is_some());
        let op = tracked.then(|| Op::Stack {
            axis,
            inputs: parts.iter().map(|p| self.capture(p)).collect(),
        });
        Ok(self.emit(shape, data, op))
    }

    /// Reinterpret the value buffer under a new shape (no data movement).
    pub fn reshape(&mut self, t: &Tensor<S>, shape: Vec<usize>) -> Result<Tensor<S>> {
        self.check_tape(&[t]);
        let want: usize = shape.iter().product();
        if want != t.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", t.shape(), shape),
            ));
        }
        let op = t.node_ref().map(|_| Op::Reshape(self.capture(t)));
        let data = t.buffer();
        match op {
            Some(op) => Ok(self.push(shape, data, op)),
            None => Ok(Tensor::untracked(shape, data)),
        }
    }

    pub fn gather(&mut self, indices: &[usize], t: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_tape(&[t]);
        if t.rank() == 0 {
            return Err(Error::shape("gather", "input must have rank >= 1"));
        }
        if indices.is_empty() {
            return Err(Error::shape("gather", "no indices"));
        }
        let rows = t.shape()[0];
        let block: usize = t.shape()[1..].iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather", format!("index {bad} out of {rows} rows")));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let mut data = vec![S::zero(); indices.len() * block];
        for (r, &src) in indices.iter().enumerate() {
            data[r * block..(r + 1) * block].copy_from_slice(&t.data()[src * block..(src + 1) * block]);
        }
        let op = t.node_ref().map(|_| Op::Gather {
            indices: indices.to_vec(),
            input: self.capture(t),
        });
        Ok(self.emit(shape, data, op))
    }

    // ── elementwise unary ────────────────────────────────────────────

    fn unary(
        &mut self,
        t: &Tensor<S>,
        f: impl Fn(S) -> S,
        mk: impl FnOnce(Input<S>) -> Op<S>,
    ) -> Tensor<S> {
        self.check_tape(&[t]);
        let data: Vec<S> = t.data().iter().map(|&x| f(x)).collect();
        let op = t.node_ref().map(|_| mk(self.capture(t)));
        self.emit(t.shape().to_vec(), data, op)
    }

    pub fn tanh(&mut self, t: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.unary(t, |x| x.tanh(), Op::Tanh))
    }

    pub fn sigmoid(&mut self, t: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.unary(t, sigmoid, Op::Sigmoid))
    }

    pub fn relu(&mut self, t: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.unary(t, |x| if x > S::zero() { x } else { S::zero() }, Op::Relu))
    }

    pub fn exp(&mut self, t: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.unary(t, |x| x.exp(), Op::Exp))
    }

    pub fn log(&mut self, t: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_tape(&[t]);
        if t.data().iter().any(|&x| !(x > S::zero()) || !x.is_finite()) {
            return Err(Error::domain("log", "inputs must be finite and > 0"));
        }
        Ok(self.unary(t, |x| x.ln(), Op::Log))
    }

    pub fn square(&mut self, t: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.unary(t, |x| x * x, Op::Square))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn reduce_sum(&mut self, axis: Option<usize>, t: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_tape(&[t]);
        let (shape, data) = match axis {
            None => (Vec::new(), vec![t.data().iter().copied().sum::<S>()]),
            Some(a) => {
                if a >= t.rank() {
                    return Err(Error::shape("reduce-sum", format!("axis {a} out of rank {}", t.rank())));
                }
                let (outer, n, inner) = axis_split(t.shape(), a);
                let mut data = vec![S::zero(); outer * inner];
                for o in 0..outer {
                    for i in 0..n {
                        let base = o * n * inner + i * inner;
                        for k in 0..inner {
                            data[o * inner + k] += t.data()[base + k];
                        }
                    }
                }
                let mut shape = t.shape().to_vec();
                shape.remove(a);
                (shape, data)
            }
        };
        let op = t.node_ref().map(|_| Op::ReduceSum {
            axis,
            input: self.capture(t),
        });
        Ok(self.emit(shape, data, op))
    }

    pub fn reduce_max(&mut self, axis: Option<usize>, t: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_tape(&[t]);
        let (shape, data, argmax) = match axis {
            None => {
                let mut best = 0usize;
                for (i, &v) in t.data().iter().enumerate() {
                    if v > t.data()[best] {
                        best = i;
                    }
                }
                (Vec::new(), vec![t.data()[best]], vec![best])
            }
            Some(a) => {
                if a >= t.rank() {
                    return Err(Error::shape("reduce-max", format!("axis {a} out of rank {}", t.rank())));
                }
                let (outer, n, inner) = axis_split(t.shape(), a);
                let mut data = vec![S::zero(); outer * inner];
                let mut argmax = vec![0usize; outer * inner];
                for o in 0..outer {
                    for k in 0..inner {
                        let mut best = 0usize;
                        let mut bv = t.data()[o * n * inner + k];
                        for i in 1..n {
                            let v = t.data()[o * n * inner + i * inner + k];
                            if v > bv {
                                bv = v;
                                best = i;
                            }
                        }
                        data[o * inner + k] = bv;
                        argmax[o * inner + k] = o * n * inner + best * inner + k;
                    }
                }
                let mut shape = t.shape().to_vec();
                shape.remove(a);
                (shape, data, argmax)
            }
        };
        let op = t.node_ref().map(|_| Op::ReduceMax {
            input: self.capture(t),
            argmax,
        });
        Ok(self.emit(shape, data, op))
    }

    // ── normalizations ───────────────────────────────────────────────

    fn softmax_values(&self, kind: &'static str, axis: usize, t: &Tensor<S>, log_form: bool) -> Result<Vec<S>> {
        if axis >= t.rank() {
            return Err(Error::shape(kind, format!("axis {axis} out of rank {}", t.rank())));
        }
        if !t.all_finite() {
            return Err(Error::domain(kind, "inputs must be finite"));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut out = vec![S::zero(); t.len()];
        for o in 0..outer {
            for k in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + k;
                // max-subtracted for stability
                let mut m = t.data()[at(0)];
                for i in 1..n {
                    m = m.max(t.data()[at(i)]);
                }
                let mut z = S::zero();
                for i in 0..n {
                    z += (t.data()[at(i)] - m).exp();
                }
                if log_form {
                    let lz = z.ln();
                    for i in 0..n {
                        out[at(i)] = t.data()[at(i)] - m - lz;
                    }
                } else {
                    for i in 0..n {
                        out[at(i)] = (t.data()[at(i)] - m).exp() / z;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn softmax(&mut self, axis: usize, t: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_tape(&[t]);
        let data = self.softmax_values("softmax", axis, t, false)?;
        let op = t.node_ref().map(|_| Op::Softmax {
            axis,
            input: self.capture(t),
        });
        Ok(self.emit(t.shape().to_vec(), data, op))
    }

    pub fn log_softmax(&mut self, axis: usize, t: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_tape(&[t]);
        let data = self.softmax_values("log-softmax", axis, t, true)?;
        let op = t.node_ref().map(|_| Op::LogSoftmax {
            axis,
            input: self.capture(t),
        });
        Ok(self.emit(t.shape().to_vec(), data, op))
    }

    // ── dispatch ─────────────────────────────────────────────────────

    /// Kind-driven entry point over the primitive set. Fixed-arity kinds
    /// reject wrong input counts with a conformance error.
    pub fn apply_primitive(&mut self, kind: &PrimitiveKind, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        use PrimitiveKind as K;
        let need = |n: usize| -> Result<()> {
            if inputs.len() != n {
                Err(Error::shape(
                    "apply-primitive",
                    format!("{kind:?} takes {n} inputs, got {}", inputs.len()),
                ))
            } else {
                Ok(())
            }
        };
        match kind {
            K::Add => {
                need(2)?;
                self.add(inputs[0], inputs[1])
            }
            K::Sub => {
                need(2)?;
                self.sub(inputs[0], inputs[1])
            }
            K::Mul => {
                need(2)?;
                self.mul(inputs[0], inputs[1])
            }
            K::ScalarMul(c) => {
                need(1)?;
                self.scalar_mul(inputs[0], S::of(*c))
            }
            K::MatMul => {
                need(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            K::Concat { axis } => self.concat(*axis, inputs),
            K::Slice { axis, start, end } => {
                need(1)?;
                self.slice(*axis, *start..*end, inputs[0])
            }
            K::PadZeros { axis, before, after } => {
                need(1)?;
                self.pad_zeros(*axis, *before, *after, inputs[0])
            }
            K::Tanh => {
                need(1)?;
                self.tanh(inputs[0])
            }
            K::Sigmoid => {
                need(1)?;
                self.sigmoid(inputs[0])
            }
            K::Relu => {
                need(1)?;
                self.relu(inputs[0])
            }
            K::Exp => {
                need(1)?;
                self.exp(inputs[0])
            }
            K::Log => {
                need(1)?;
                self.log(inputs[0])
            }
            K::Square => {
                need(1)?;
                self.square(inputs[0])
            }
            K::ReduceSum { axis } => {
                need(1)?;
                self.reduce_sum(*axis, inputs[0])
            }
            K::ReduceMax { axis } => {
                need(1)?;
                self.reduce_max(*axis, inputs[0])
            }
            K::Softmax { axis } => {
                need(1)?;
                self.softmax(*axis, inputs[0])
            }
            K::LogSoftmax { axis } => {
                need(1)?;
                self.log_softmax(*axis, inputs[0])
            }
            K::Gather { indices } => {
                need(1)?;
                self.gather(indices, inputs[0])
            }
            K::Stack { axis } => self.stack(*axis, inputs),
        }
    }

    // ── backward ─────────────────────────────────────────────────────

    fn input_shape<'a>(&'a self, inp: &'a Input<S>) -> &'a [usize] {
        match inp {
            Input::Node(i) => &self.nodes[*i].shape,
            Input::Const { shape, .. } => shape,
        }
    }

    fn input_data<'a>(&'a self, inp: &'a Input<S>) -> &'a [S] {
        match inp {
            Input::Node(i) => &self.nodes[*i].out,
            Input::Const { data, .. } => data,
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate in tape
    /// order, so repeated runs are bitwise identical. Nodes unreachable
    /// from the loss read back as zero gradients.
    pub fn backward(&self, loss: &Tensor<S>) -> Result<GradientMap<S>> {
        let node = loss
            .node_ref()
            .ok_or_else(|| Error::contract("backward: loss is not tracked on a tape"))?;
        if node.tape != self.id {
            return Err(Error::contract("backward: loss belongs to a different tape"));
        }
        if !loss.is_scalar() {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[node.index] = Some(vec![S::one()]);

        for idx in (0..=node.index).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(GradientMap {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            grads,
        })
    }

    fn propagate(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc_slice(grads, a, g);
                acc_slice(grads, b, g);
            }
            Op::Sub(a, b) => {
                acc_slice(grads, a, g);
                acc_with(grads, b, g.len(), |d| {
                    for (di, &gi) in d.iter_mut().zip(g) {
                        *di -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.input_data(a);
                let bv = self.input_data(b);
                acc_with(grads, a, g.len(), |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc_with(grads, b, g.len(), |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::ScalarMul(a, c) => {
                let c = *c;
                acc_with(grads, a, g.len(), |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * c;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = {
                    let s = self.input_shape(a);
                    (s[0], s[1])
                };
                let n = self.input_shape(b)[1];
                let av = self.input_data(a);
                let bv = self.input_data(b);
                if is_node(a) {
                    let da = mm_nt(g, bv, m, n, k);
                    acc_owned(grads, a, da);
                }
                if is_node(b) {
                    let db = mm_tn(av, g, m, k, n);
                    acc_owned(grads, b, db);
                }
            }
            Op::Concat { axis, inputs } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut off = 0usize;
                for inp in inputs {
                    let n = self.input_shape(inp)[*axis];
                    if is_node(inp) {
                        let mut d = vec![S::zero(); outer * n * inner];
                        for o in 0..outer {
                            let src_at = o * total * inner + off * inner;
                            let dst_at = o * n * inner;
                            for j in 0..n * inner {
                                d[dst_at + j] = g[src_at + j];
                            }
                        }
                        acc_owned(grads, inp, d);
                    }
                    off += n;
                }
            }
            Op::Slice { axis, start, input } => {
                if is_node(input) {
                    let in_shape = self.input_shape(input);
                    let (outer, n, inner) = axis_split(in_shape, *axis);
                    let width = node.shape[*axis];
                    let mut d = vec![S::zero(); outer * n * inner];
                    for o in 0..outer {
                        let dst_at = o * n * inner + start * inner;
                        let src_at = o * width * inner;
                        for j in 0..width * inner {
                            d[dst_at + j] = g[src_at + j];
                        }
                    }
                    acc_owned(grads, input, d);
                }
            }
            Op::PadZeros { axis, before, input } => {
                if is_node(input) {
                    let in_shape = self.input_shape(input);
                    let (outer, n, inner) = axis_split(in_shape, *axis);
                    let total = node.shape[*axis];
                    let mut d = vec![S::zero(); outer * n * inner];
                    for o in 0..outer {
                        let src_at = o * total * inner + before * inner;
                        let dst_at = o * n * inner;
                        for j in 0..n * inner {
                            d[dst_at + j] = g[src_at + j];
                        }
                    }
                    acc_owned(grads, input, d);
                }
            }
            Op::Stack { axis, inputs } => {
                let k = inputs.len();
                let inner: usize = self.input_shape(&inputs[0])[*axis..].iter().product();
                let outer: usize = self.input_shape(&inputs[0])[..*axis].iter().product();
                for (j, inp) in inputs.iter().enumerate() {
                    if is_node(inp) {
                        let mut d = vec![S::zero(); outer * inner];
                        for o in 0..outer {
                            let src_at = (o * k + j) * inner;
                            d[o * inner..(o + 1) * inner]
                                .iter_mut()
                                .zip(&g[src_at..src_at + inner])
                                .for_each(|(di, &gi)| *di = gi);
                        }
                        acc_owned(grads, inp, d);
                    }
                }
            }
            Op::Reshape(input) => {
                acc_slice(grads, input, g);
            }
            Op::Gather { indices, input } => {
                if is_node(input) {
                    let in_shape = self.input_shape(input);
                    let block: usize = in_shape[1..].iter().product();
                    let mut d = vec![S::zero(); in_shape.iter().product()];
                    for (r, &src) in indices.iter().enumerate() {
                        for j in 0..block {
                            d[src * block + j] += g[r * block + j];
                        }
                    }
                    acc_owned(grads, input, d);
                }
            }
            Op::Tanh(a) => {
                let y = &node.out;
                acc_with(grads, a, g.len(), |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * (S::one() - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.out;
                acc_with(grads, a, g.len(), |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * y[i] * (S::one() - y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.input_data(a);
                acc_with(grads, a, g.len(), |d| {
                    for i in 0..g.len() {
                        if x[i] > S::zero() {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.out;
                acc_with(grads, a, g.len(), |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let x = self.input_data(a);
                acc_with(grads, a, g.len(), |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] / x[i];
                    }
                });
            }
            Op::Square(a) => {
                let x = self.input_data(a);
                acc_with(grads, a, g.len(), |d| {
                    let two = S::of(2.0);
                    for i in 0..g.len() {
                        d[i] += g[i] * two * x[i];
                    }
                });
            }
            Op::ReduceSum { axis, input } => {
                if is_node(input) {
                    let in_shape = self.input_shape(input);
                    let len: usize = in_shape.iter().product();
                    match axis {
                        None => {
                            let gv = g[0];
                            acc_with(grads, input, len, |d| {
                                for di in d.iter_mut() {
                                    *di += gv;
                                }
                            });
                        }
                        Some(a) => {
                            let (outer, n, inner) = axis_split(in_shape, *a);
                            acc_with(grads, input, len, |d| {
                                for o in 0..outer {
                                    for i in 0..n {
                                        let base = o * n * inner + i * inner;
                                        for k in 0..inner {
                                            d[base + k] += g[o * inner + k];
                                        }
                                    }
                                }
                            });
                        }
                    }
                }
            }
            Op::ReduceMax { input, argmax } => {
                if is_node(input) {
                    let in_shape = self.input_shape(input);
                    let len: usize = in_shape.iter().product();
                    acc_with(grads, input, len, |d| {
                        for (lane, &src) in argmax.iter().enumerate() {
                            d[src] += g[lane];
                        }
                    });
                }
            }
            Op::Softmax { axis, input } => {
                if is_node(input) {
                    let y = &node.out;
                    let (outer, n, inner) = axis_split(&node.shape, *axis);
                    acc_with(grads, input, g.len(), |d| {
                        for o in 0..outer {
                            for k in 0..inner {
                                let at = |i: usize| o * n * inner + i * inner + k;
                                let mut dot = S::zero();
                                for i in 0..n {
                                    dot += g[at(i)] * y[at(i)];
                                }
                                for i in 0..n {
                                    d[at(i)] += y[at(i)] * (g[at(i)] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::LogSoftmax { axis, input } => {
                if is_node(input) {
                    let y = &node.out;
                    let (outer, n, inner) = axis_split(&node.shape, *axis);
                    acc_with(grads, input, g.len(), |d| {
                        for o in 0..outer {
                            for k in 0..inner {
                                let at = |i: usize| o * n * inner + i * inner + k;
                                let mut gsum = S::zero();
                                for i in 0..n {
                                    gsum += g[at(i)];
                                }
                                for i in 0..n {
                                    d[at(i)] += g[at(i)] - y[at(i)].exp() * gsum;
                                }
                            }
                        }
                    });
                }
            }
            Op::Custom { input, vjp } => {
                if is_node(input) {
                    let d = vjp.input_grad(g);
                    debug_assert_eq!(
                        d.len(),
                        self.input_shape(input).iter().product::<usize>(),
                        "custom vjp returned wrong gradient length"
                    );
                    acc_owned(grads, input, d);
                }
            }
        }
    }
}

fn is_node<S: Scalar>(inp: &Input<S>) -> bool {
    matches!(inp, Input::Node(_))
}

fn acc_with<S: Scalar>(
    grads: &mut [Option<Vec<S>>],
    inp: &Input<S>,
    len: usize,
    f: impl FnOnce(&mut [S]),
) {
    if let Input::Node(i) = inp {
        let slot = grads[*i].get_or_insert_with(|| vec![S::zero(); len]);
        f(slot);
    }
}

fn acc_slice<S: Scalar>(grads: &mut [Option<Vec<S>>], inp: &Input<S>, contrib: &[S]) {
    acc_with(grads, inp, contrib.len(), |d| {
        for (di, &ci) in d.iter_mut().zip(contrib) {
            *di += ci;
        }
    });
}

fn acc_owned<S: Scalar>(grads: &mut [Option<Vec<S>>], inp: &Input<S>, contrib: Vec<S>) {
    if let Input::Node(i) = inp {
        match &mut grads[*i] {
            Some(d) => {
                for (di, ci) in d.iter_mut().zip(contrib) {
                    *di += ci;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

// [m,k] @ [k,n]
fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..k {
            let aij = a[i * k + j];
            let brow = &b[j * n..(j + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for l in 0..n {
                orow[l] += aij * brow[l];
            }
        }
    }
    out
}

// g[m,n] @ b^T where b is [k,n]; result [m,k]
fn mm_nt<S: Scalar>(g: &[S], b: &[S], m: usize, n: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = S::zero();
            for l in 0..n {
                s += grow[l] * brow[l];
            }
            out[i * k + j] = s;
        }
    }
    out
}

// a^T @ g where a is [m,k], g is [m,n]; result [k,n]
fn mm_tn<S: Scalar>(a: &[S], g: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for j in 0..k {
            let aij = a[i * k + j];
            let orow = &mut out[j * n..(j + 1) * n];
            for l in 0..n {
                orow[l] += aij * grow[l];
            }
        }
    }
    out
}

/// Gradients produced by one backward pass, queryable by tracked tensor.
pub struct GradientMap<S: Scalar> {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> GradientMap<S> {
    /// Gradient of the loss w.r.t. a tracked tensor. Unreached nodes get
    /// zeros. Panics if the tensor is untracked or from another tape.
    pub fn wrt(&self, t: &Tensor<S>) -> Tensor<S> {
        let node = t
            .node_ref()
            .expect("gradient queried for an untracked tensor");
        assert!(node.tape == self.tape, "tensor belongs to a different tape");
        self.by_index(node.index)
    }

    pub fn by_index(&self, index: usize) -> Tensor<S> {
        let shape = &self.shapes[index];
        match &self.grads[index] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Compare the analytic gradient of `f` at `point` against central finite
/// differences with the given step. Returns the max over coordinates of
/// `|analytic - central| / max(1, |analytic|)`.
pub fn finite_difference_check<S: Scalar, F>(mut f: F, point: &Tensor<S>, step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<S>, &Tensor<S>) -> Result<Tensor<S>>,
{
    if !(step > 0.0) {
        return Err(Error::contract("finite_difference_check: step must be > 0"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point);
    let loss = f(&mut tape, &x)?;
    if !loss.is_scalar() {
        return Err(Error::contract("finite_difference_check: f must return a scalar"));
    }
    let analytic = tape.backward(&loss)?.wrt(&x);

    let h = S::of(step);
    let mut worst = 0.0f64;
    let base = point.to_vec();
    for i in 0..base.len() {
        let mut probe = |v: S| -> Result<f64> {
            let mut vals = base.clone();
            vals[i] = v;
            let t = Tensor::new(point.shape().to_vec(), vals)?;
            let mut scratch = Tape::new();
            let out = f(&mut scratch, &t)?.to_scalar()?;
            if !out.is_finite() {
                return Err(Error::domain(
                    "finite-difference",
                    format!("f is non-finite at probe coordinate {i}"),
                ));
            }
            Ok(out.as_f64())
        };
        let plus = probe(base[i] + h)?;
        let minus = probe(base[i] - h)?;
        let central = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i].as_f64();
        let err = (a - central).abs() / f64::max(1.0, a.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(vals: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let out = tape.add(&t(&[1.0, 2.0]), &t(&[3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = tape.matmul(&eye, &m).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn log_softmax_uniform_pair() {
        let mut tape = Tape::<f64>::new();
        let out = tape.log_softmax(0, &t(&[0.0, 0.0])).unwrap();
        let expect = -(2.0f64.ln());
        assert!((out.data()[0] - expect).abs() < 1e-15);
        assert!((out.data()[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_kind() {
        let mut tape = Tape::<f64>::new();
        let err = tape.add(&t(&[1.0]), &t(&[1.0, 2.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[1]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1.0, -2.0, 3.0]));
        let loss = tape.reduce_sum(None, &x).unwrap();
        let g = tape.backward(&loss).unwrap().wrt(&x);
        assert_eq!(g.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2.0, -3.0]));
        let sq = tape.square(&x).unwrap();
        let loss = tape.reduce_sum(None, &sq).unwrap();
        let g = tape.backward(&loss).unwrap().wrt(&x);
        assert_eq!(g.data(), &[4.0, -6.0]);
    }

    #[test]
    fn chain_rule_two_ops() {
        // loss = sum(square(3 * x)) => d/dx = 18 x
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1.0, -2.0]));
        let y = tape.scalar_mul(&x, 3.0).unwrap();
        let sq = tape.square(&y).unwrap();
        let loss = tape.reduce_sum(None, &sq).unwrap();
        let g = tape.backward(&loss).unwrap().wrt(&x);
        assert_eq!(g.data(), &[18.0, -36.0]);
    }

    #[test]
    fn backward_twice_bitwise_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[0.3, -1.7, 2.9]));
        let e = tape.exp(&x).unwrap();
        let s = tape.softmax(0, &e).unwrap();
        let sq = tape.square(&s).unwrap();
        let loss = tape.reduce_sum(None, &sq).unwrap();
        let g1 = tape.backward(&loss).unwrap().wrt(&x);
        let g2 = tape.backward(&loss).unwrap().wrt(&x);
        let bits1: Vec<u64> = g1.data().iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = g2.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2);
    }

    #[test]
    fn unreachable_node_grad_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1.0, 2.0]));
        let y = tape.leaf(&t(&[5.0]));
        let loss = tape.reduce_sum(None, &x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&y).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1.0, 2.0]));
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut tape = Tape::<f64>::new();
        let out = tape.add(&t(&[1.0]), &t(&[2.0])).unwrap();
        assert!(out.node_ref().is_none());
        assert_eq!(tape.node_count(), 0);
    }

    #[test]
    #[should_panic(expected = "detach")]
    fn cross_tape_use_panics() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.leaf(&t(&[1.0]));
        let _ = t2.square(&x);
    }

    #[test]
    fn gather_and_scatter_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let picked = tape.gather(&[2, 0, 2], &x).unwrap();
        assert_eq!(picked.data(), &[5., 6., 1., 2., 5., 6.]);
        let loss = tape.reduce_sum(None, &picked).unwrap();
        let g = tape.backward(&loss).unwrap().wrt(&x);
        assert_eq!(g.data(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn slice_pad_roundtrip_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1.0, 2.0, 3.0]));
        let s = tape.slice(0, 1..3, &x).unwrap();
        assert_eq!(s.data(), &[2.0, 3.0]);
        let p = tape.pad_zeros(0, 1, 2, &s).unwrap();
        assert_eq!(p.data(), &[0.0, 2.0, 3.0, 0.0, 0.0]);
        let loss = tape.reduce_sum(None, &p).unwrap();
        let g = tape.backward(&loss).unwrap().wrt(&x);
        assert_eq!(g.data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn stack_makes_new_axis() {
        let mut tape = Tape::<f64>::new();
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![10., 20., 30., 40., 50., 60.]).unwrap();
        let s = tape.stack(1, &[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 3]);
        assert_eq!(s.data(), &[1., 2., 3., 10., 20., 30., 4., 5., 6., 40., 50., 60.]);
    }

    #[test]
    fn finite_difference_linear_is_exact() {
        let err = finite_difference_check(
            |tape, x| {
                let s = tape.reduce_sum(None, x)?;
                Ok(s)
            },
            &t(&[0.4, -0.2, 0.9]),
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-8, "err={err}");
    }

    #[test]
    fn finite_difference_quadratic() {
        let err = finite_difference_check(
            |tape, x| {
                let sq = tape.square(x)?;
                tape.reduce_sum(None, &sq)
            },
            &t(&[1.0, 2.0, 3.0]),
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-6, "err={err}");
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut tape = Tape::<f64>::new();
        assert!(tape.log(&t(&[1.0, 0.0])).is_err());
        assert!(tape.log(&t(&[1.0, -2.0])).is_err());
    }

    #[test]
    fn primitive_dispatch_matches_methods() {
        let mut tape = Tape::<f64>::new();
        let a = t(&[1.0, 2.0]);
        let out = tape
            .apply_primitive(&PrimitiveKind::ScalarMul(2.5), &[&a])
            .unwrap();
        assert_eq!(out.data(), &[2.5, 5.0]);
        assert!(tape
            .apply_primitive(&PrimitiveKind::Add, &[&a])
            .is_err());
    }
}
