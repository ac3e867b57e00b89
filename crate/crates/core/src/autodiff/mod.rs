//! Define-then-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built once from placeholders and ops, then evaluated any
//! number of times with [`Graph::forward`] against a set of [`Bindings`].
//! Nodes are appended in topological order, so every input id precedes its
//! consumer and the graph is acyclic by construction. Forward values are
//! cached on the graph and read (never mutated) by [`Graph::backward`].
//!
//! The op set is deliberately small: matmul, bias add, stride-1 2D
//! convolution, ReLU, 2x2 max pooling, flatten, softmax cross-entropy,
//! elementwise add/mul and sum/mean reductions.

mod array;
mod kernels;

use std::collections::HashMap;

pub use array::{Array, Real};
use kernels::ConvGeometry;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {op}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("placeholder `{0}` is not bound")]
    Unbound(String),
    #[error("placeholder `{name}` bound to the wrong kind of value")]
    BindingKind { name: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("no loss node designated")]
    NoLoss,
    #[error("loss node must be a scalar, got shape {0:?}")]
    LossNotScalar(Vec<usize>),
    #[error("node {0} is not a differentiable input")]
    NotDifferentiable(usize),
    #[error("node {0} has no cached value")]
    NotEvaluated(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlaceholderKind {
    /// Trainable parameter; always receives a gradient.
    Parameter,
    /// Data input; receives a gradient only when `differentiable`.
    Input { differentiable: bool },
    /// Integer class labels consumed by softmax cross-entropy.
    Labels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Valid,
    /// Zero padding that preserves the spatial extent (odd kernels only).
    Same,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Placeholder { name: String, kind: PlaceholderKind },
    Constant(Array<T>),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Conv2d(NodeId, NodeId, Padding),
    Relu(NodeId),
    MaxPool2(NodeId),
    Flatten(NodeId),
    SoftmaxCrossEntropy(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Placeholder { .. } | Op::Constant(_) => vec![],
            Op::Relu(a) | Op::MaxPool2(a) | Op::Flatten(a) | Op::Sum(a) | Op::Mean(a) => vec![a],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Conv2d(a, b, _)
            | Op::SoftmaxCrossEntropy(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b) => vec![a, b],
        }
    }
}

/// A value bound to a placeholder.
#[derive(Clone, Debug, PartialEq)]
pub enum Value<T = f64> {
    Array(Array<T>),
    Labels(Vec<usize>),
}

#[derive(Clone, Debug, Default)]
pub struct Bindings<T = f64> {
    values: HashMap<NodeId, Value<T>>,
}

impl<T: Real> Bindings<T> {
    pub fn new() -> Self {
        Self { values: HashMap::new() }
    }

    pub fn bind(&mut self, node: NodeId, value: Array<T>) -> &mut Self {
        self.values.insert(node, Value::Array(value));
        self
    }

    pub fn bind_labels(&mut self, node: NodeId, labels: Vec<usize>) -> &mut Self {
        self.values.insert(node, Value::Labels(labels));
        self
    }
}

/// Reverse-mode gradients keyed by node. Missing entries mean zero gradient.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T = f64> {
    grads: HashMap<NodeId, Array<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, node: NodeId) -> Option<&Array<T>> {
        self.grads.get(&node)
    }

    pub fn take(&mut self, node: NodeId) -> Option<Array<T>> {
        self.grads.remove(&node)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Clone, Debug)]
enum Aux<T> {
    None,
    Argmax(Vec<usize>),
    Probs(Vec<T>),
}

#[derive(Clone, Debug)]
struct Cached<T> {
    value: Array<T>,
    aux: Aux<T>,
}

#[derive(Clone, Debug)]
pub struct Graph<T = f64> {
    ops: Vec<Op<T>>,
    loss: Option<NodeId>,
    cache: Vec<Option<Cached<T>>>,
    labels: Vec<Option<Vec<usize>>>,
    evaluated_loss: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            loss: None,
            cache: Vec::new(),
            labels: Vec::new(),
            evaluated_loss: false,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op<T>) -> NodeId {
        for input in op.inputs() {
            assert!(
                input.0 < self.ops.len(),
                "node {} does not belong to this graph",
                input.0
            );
        }
        self.ops.push(op);
        self.cache.push(None);
        self.labels.push(None);
        self.evaluated_loss = false;
        NodeId(self.ops.len() - 1)
    }

    pub fn parameter(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Placeholder {
            name: name.into(),
            kind: PlaceholderKind::Parameter,
        })
    }

    pub fn input(&mut self, name: impl Into<String>, differentiable: bool) -> NodeId {
        self.push(Op::Placeholder {
            name: name.into(),
            kind: PlaceholderKind::Input { differentiable },
        })
    }

    pub fn labels(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Placeholder {
            name: name.into(),
            kind: PlaceholderKind::Labels,
        })
    }

    pub fn constant(&mut self, value: Array<T>) -> NodeId {
        self.push(Op::Constant(value))
    }

    /// `(n, k) x (k, m) -> (n, m)`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// Adds a bias along the last axis of a 2D input or the channel axis of
    /// a 4D NCHW input.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(x, bias))
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, padding: Padding) -> NodeId {
        self.push(Op::Conv2d(x, kernel, padding))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MaxPool2(x))
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Flatten(x))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy(logits, labels))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    /// Designates the scalar node that [`Graph::forward`] returns and
    /// [`Graph::backward`] differentiates.
    pub fn set_loss(&mut self, node: NodeId) {
        assert!(node.0 < self.ops.len());
        self.loss = Some(node);
        self.evaluated_loss = false;
    }

    pub fn loss(&self) -> Option<NodeId> {
        self.loss
    }

    fn placeholder_kind(&self, node: NodeId) -> Option<PlaceholderKind> {
        match &self.ops[node.0] {
            Op::Placeholder { kind, .. } => Some(*kind),
            _ => None,
        }
    }

    /// All parameter placeholders and differentiable inputs, in node order.
    pub fn gradient_sources(&self) -> Vec<NodeId> {
        (0..self.ops.len())
            .map(NodeId)
            .filter(|&n| {
                matches!(
                    self.placeholder_kind(n),
                    Some(PlaceholderKind::Parameter) | Some(PlaceholderKind::Input { differentiable: true })
                )
            })
            .collect()
    }

    /// Evaluates the loss node and returns its scalar value.
    pub fn forward(&mut self, bindings: &Bindings<T>) -> Result<T, AutodiffError> {
        let loss = self.loss.ok_or(AutodiffError::NoLoss)?;
        self.evaluated_loss = false;
        let value = self.evaluate(bindings, loss)?;
        // Differentiable inputs the loss ignores still get a value, so their
        // (zero) gradient has the right shape.
        let used = self.ancestors(loss);
        for i in 0..self.ops.len() {
            let input = matches!(
                self.placeholder_kind(NodeId(i)),
                Some(PlaceholderKind::Input { differentiable: true })
            );
            if input && !used.get(i).copied().unwrap_or(false) {
                self.cache[i] = None;
                self.eval_node(NodeId(i), bindings)?;
            }
        }
        let scalar = value
            .item()
            .ok_or_else(|| AutodiffError::LossNotScalar(value.shape().to_vec()))?;
        self.evaluated_loss = true;
        Ok(scalar)
    }

    /// Evaluates `target` and every node it depends on; other nodes are left
    /// untouched. Returns a clone of the target value.
    pub fn evaluate(&mut self, bindings: &Bindings<T>, target: NodeId) -> Result<Array<T>, AutodiffError> {
        self.evaluated_loss = false;
        let needed = self.ancestors(target);
        for i in 0..=target.0 {
            if !needed[i] {
                continue;
            }
            self.cache[i] = None;
            self.labels[i] = None;
            self.eval_node(NodeId(i), bindings)?;
        }
        Ok(self.cache[target.0].as_ref().expect("just evaluated").value.clone())
    }

    /// Marks `target` and every node it depends on.
    fn ancestors(&self, target: NodeId) -> Vec<bool> {
        let mut needed = vec![false; target.0 + 1];
        needed[target.0] = true;
        for i in (0..=target.0).rev() {
            if needed[i] {
                for input in self.ops[i].inputs() {
                    needed[input.0] = true;
                }
            }
        }
        needed
    }

    /// Cached value of a node from the most recent evaluation.
    pub fn value(&self, node: NodeId) -> Option<&Array<T>> {
        self.cache.get(node.0)?.as_ref().map(|c| &c.value)
    }

    fn val(&self, node: NodeId) -> Result<&Array<T>, AutodiffError> {
        self.value(node).ok_or(AutodiffError::NotEvaluated(node.0))
    }

    fn eval_node(&mut self, id: NodeId, bindings: &Bindings<T>) -> Result<(), AutodiffError> {
        let op = self.ops[id.0].clone();
        let (value, aux) = match op {
            Op::Placeholder { name, kind } => match (kind, bindings.values.get(&id)) {
                (_, None) => return Err(AutodiffError::Unbound(name)),
                (PlaceholderKind::Labels, Some(Value::Labels(l))) => {
                    self.labels[id.0] = Some(l.clone());
                    (
                        Array::vector(l.iter().map(|&v| T::from_f64(v as f64)).collect()),
                        Aux::None,
                    )
                }
                (PlaceholderKind::Labels, Some(Value::Array(_))) | (_, Some(Value::Labels(_))) => {
                    return Err(AutodiffError::BindingKind { name })
                }
                (_, Some(Value::Array(a))) => (a.clone(), Aux::None),
            },
            Op::Constant(a) => (a, Aux::None),
            Op::MatMul(a, b) => (self.matmul_fwd(a, b)?, Aux::None),
            Op::AddBias(x, b) => (self.add_bias_fwd(x, b)?, Aux::None),
            Op::Conv2d(x, k, p) => {
                let g = self.conv_geometry(x, k, p)?;
                let out = kernels::conv2d_forward(&g, self.val(x)?.data(), self.val(k)?.data());
                (
                    Array::new(vec![g.batch, g.out_channels, g.out_h, g.out_w], out)?,
                    Aux::None,
                )
            }
            Op::Relu(x) => (
                self.val(x)?.map(|v| if v > T::zero() { v } else { T::zero() }),
                Aux::None,
            ),
            Op::MaxPool2(x) => {
                let xv = self.val(x)?;
                let s = xv.shape();
                if s.len() != 4 || s[2] < 2 || s[3] < 2 {
                    return Err(AutodiffError::InvalidShape {
                        op: "max_pool2",
                        shape: s.to_vec(),
                        reason: "expected NCHW with spatial extent >= 2",
                    });
                }
                let (out, arg) = kernels::maxpool2_forward(xv.data(), s[0] * s[1], s[2], s[3]);
                (Array::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)?, Aux::Argmax(arg))
            }
            Op::Flatten(x) => {
                let xv = self.val(x)?;
                let s = xv.shape();
                if s.is_empty() {
                    return Err(AutodiffError::InvalidShape {
                        op: "flatten",
                        shape: vec![],
                        reason: "cannot flatten a scalar",
                    });
                }
                let rest = s[1..].iter().product();
                (xv.clone().reshape(vec![s[0], rest])?, Aux::None)
            }
            Op::SoftmaxCrossEntropy(logits, labels) => self.softmax_ce_fwd(logits, labels)?,
            Op::Add(a, b) => {
                let (av, bv) = self.same_shape("add", a, b)?;
                let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
                (Array::new(av.shape().to_vec(), data)?, Aux::None)
            }
            Op::Mul(a, b) => {
                let (av, bv) = self.same_shape("mul", a, b)?;
                let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                (Array::new(av.shape().to_vec(), data)?, Aux::None)
            }
            Op::Sum(x) => (Array::scalar(self.val(x)?.data().iter().copied().sum()), Aux::None),
            Op::Mean(x) => {
                let xv = self.val(x)?;
                let n = T::from_f64(xv.len() as f64);
                (Array::scalar(xv.data().iter().copied().sum::<T>() / n), Aux::None)
            }
        };
        self.cache[id.0] = Some(Cached { value, aux });
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(&Array<T>, &Array<T>), AutodiffError> {
        let av = self.val(a)?;
        let bv = self.val(b)?;
        if av.shape() != bv.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        Ok((av, bv))
    }

    fn matmul_fwd(&self, a: NodeId, b: NodeId) -> Result<Array<T>, AutodiffError> {
        let av = self.val(a)?;
        let bv = self.val(b)?;
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            av.data(),
            (k, 1),
            bv.data(),
            (m, 1),
            T::zero(),
            &mut out,
            (m, 1),
        );
        Array::new(vec![n, m], out)
    }

    /// Returns (outer, channels, inner) such that the bias index of flat
    /// element `i` is `(i / inner) % channels`.
    fn bias_layout(&self, x: NodeId, b: NodeId) -> Result<(usize, usize, usize), AutodiffError> {
        let xs = self.val(x)?.shape();
        let bs = self.val(b)?.shape();
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "add_bias",
            left: xs.to_vec(),
            right: bs.to_vec(),
        };
        if bs.len() != 1 {
            return Err(mismatch());
        }
        match xs.len() {
            2 if xs[1] == bs[0] => Ok((xs[0], xs[1], 1)),
            4 if xs[1] == bs[0] => Ok((xs[0], xs[1], xs[2] * xs[3])),
            _ => Err(mismatch()),
        }
    }

    fn add_bias_fwd(&self, x: NodeId, b: NodeId) -> Result<Array<T>, AutodiffError> {
        let (_, channels, inner) = self.bias_layout(x, b)?;
        let xv = self.val(x)?;
        let bv = self.val(b)?.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[(i / inner) % channels])
            .collect();
        Array::new(xv.shape().to_vec(), data)
    }

    fn conv_geometry(&self, x: NodeId, k: NodeId, padding: Padding) -> Result<ConvGeometry, AutodiffError> {
        let xs = self.val(x)?.shape();
        let ks = self.val(k)?.shape();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                left: xs.to_vec(),
                right: ks.to_vec(),
            });
        }
        let (kh, kw) = (ks[2], ks[3]);
        let (pad_h, pad_w) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(AutodiffError::InvalidShape {
                        op: "conv2d",
                        shape: ks.to_vec(),
                        reason: "same padding needs odd kernel extents",
                    });
                }
                (kh / 2, kw / 2)
            }
        };
        if xs[2] + 2 * pad_h < kh || xs[3] + 2 * pad_w < kw {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                left: xs.to_vec(),
                right: ks.to_vec(),
            });
        }
        Ok(ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ks[0],
            kernel_h: kh,
            kernel_w: kw,
            pad_h,
            pad_w,
            out_h: xs[2] + 2 * pad_h - kh + 1,
            out_w: xs[3] + 2 * pad_w - kw + 1,
        })
    }

    fn softmax_ce_fwd(&self, logits: NodeId, labels: NodeId) -> Result<(Array<T>, Aux<T>), AutodiffError> {
        let lv = self.val(logits)?;
        let s = lv.shape();
        let ys = self.labels[labels.0]
            .as_ref()
            .ok_or(AutodiffError::NotEvaluated(labels.0))?;
        if s.len() != 2 || s[0] != ys.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: s.to_vec(),
                right: vec![ys.len()],
            });
        }
        let (n, k) = (s[0], s[1]);
        let mut probs = Vec::with_capacity(n * k);
        let mut total = T::zero();
        for (row, &y) in lv.data().chunks_exact(k).zip(ys) {
            if y >= k {
                return Err(AutodiffError::LabelOutOfRange { label: y, classes: k });
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&z| (z - max).exp()).sum();
            let log_denom = denom.ln();
            total = total + (log_denom - (row[y] - max));
            probs.extend(row.iter().map(|&z| (z - max).exp() / denom));
        }
        Ok((Array::scalar(total / T::from_f64(n as f64)), Aux::Probs(probs)))
    }

    /// Gradients of the loss with respect to every parameter and every
    /// differentiable input.
    pub fn backward(&mut self) -> Result<Gradients<T>, AutodiffError> {
        let sources = self.gradient_sources();
        self.backward_for(&sources)
    }

    /// Gradients with respect to `wrt` only. Branches that do not lead to any
    /// requested node are skipped.
    pub fn backward_for(&mut self, wrt: &[NodeId]) -> Result<Gradients<T>, AutodiffError> {
        let loss = self.loss.ok_or(AutodiffError::NoLoss)?;
        if !self.evaluated_loss {
            return Err(AutodiffError::BackwardBeforeForward);
        }
        for &w in wrt {
            match self.placeholder_kind(w) {
                Some(PlaceholderKind::Parameter) | Some(PlaceholderKind::Input { differentiable: true }) => {}
                _ => return Err(AutodiffError::NotDifferentiable(w.0)),
            }
        }
        let count = loss.0 + 1;
        let mut needs = vec![false; count];
        for &w in wrt {
            if w.0 < count {
                needs[w.0] = true;
            }
        }
        for i in 0..count {
            if !needs[i] && self.ops[i].inputs().iter().any(|u| needs[u.0]) {
                needs[i] = true;
            }
        }

        let mut grads: Vec<Option<Array<T>>> = vec![None; count];
        grads[loss.0] = Some(Array::full(self.val(loss)?.shape(), T::one()));
        for i in (0..count).rev() {
            if !needs[i] {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let contributions = self.node_backward(NodeId(i), &upstream, &needs)?;
            for (input, g) in contributions {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(self.ops[i], Op::Placeholder { .. }) {
                grads[i] = Some(upstream);
            }
        }

        let mut out = Gradients::default();
        for &w in wrt {
            if let Some(Some(g)) = grads.get_mut(w.0).map(Option::take) {
                out.grads.insert(w, g);
            }
        }
        Ok(out)
    }

    /// Gradient of the loss with respect to a differentiable input; the loss
    /// must have been evaluated. Same shape as the input.
    pub fn input_gradient(&mut self, input: NodeId) -> Result<Array<T>, AutodiffError> {
        if self.placeholder_kind(input) != Some(PlaceholderKind::Input { differentiable: true }) {
            return Err(AutodiffError::NotDifferentiable(input.0));
        }
        let mut grads = self.backward_for(&[input])?;
        match grads.take(input) {
            Some(g) => Ok(g),
            None => Ok(Array::zeros(self.val(input)?.shape())),
        }
    }

    fn node_backward(
        &self,
        id: NodeId,
        up: &Array<T>,
        needs: &[bool],
    ) -> Result<Vec<(NodeId, Array<T>)>, AutodiffError> {
        let need = |n: NodeId| needs[n.0];
        let mut out = Vec::with_capacity(2);
        match self.ops[id.0] {
            Op::Placeholder { .. } | Op::Constant(_) => {}
            Op::MatMul(a, b) => {
                let av = self.val(a)?;
                let bv = self.val(b)?;
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if need(a) {
                    // dA = dC (n x m) * B^T (m x k)
                    let mut g = vec![T::zero(); n * k];
                    T::gemm(n, m, k, up.data(), (m, 1), bv.data(), (1, m), T::zero(), &mut g, (k, 1));
                    out.push((a, Array::new(vec![n, k], g)?));
                }
                if need(b) {
                    // dB = A^T (k x n) * dC (n x m)
                    let mut g = vec![T::zero(); k * m];
                    T::gemm(k, n, m, av.data(), (1, k), up.data(), (m, 1), T::zero(), &mut g, (m, 1));
                    out.push((b, Array::new(vec![k, m], g)?));
                }
            }
            Op::AddBias(x, b) => {
                if need(x) {
                    out.push((x, up.clone()));
                }
                if need(b) {
                    let (_, channels, inner) = self.bias_layout(x, b)?;
                    let mut g = vec![T::zero(); channels];
                    for (i, &v) in up.data().iter().enumerate() {
                        let c = (i / inner) % channels;
                        g[c] = g[c] + v;
                    }
                    out.push((b, Array::vector(g)));
                }
            }
            Op::Conv2d(x, k, p) => {
                let geom = self.conv_geometry(x, k, p)?;
                let xv = self.val(x)?;
                let kv = self.val(k)?;
                let (dx, dk) = kernels::conv2d_backward(&geom, xv.data(), kv.data(), up.data(), need(x), need(k));
                if let Some(dx) = dx {
                    out.push((x, Array::new(xv.shape().to_vec(), dx)?));
                }
                if let Some(dk) = dk {
                    out.push((k, Array::new(kv.shape().to_vec(), dk)?));
                }
            }
            Op::Relu(x) => {
                if need(x) {
                    let xv = self.val(x)?;
                    let data = xv
                        .data()
                        .iter()
                        .zip(up.data())
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    out.push((x, Array::new(xv.shape().to_vec(), data)?));
                }
            }
            Op::MaxPool2(x) => {
                if need(x) {
                    let xv = self.val(x)?;
                    let Some(Cached {
                        aux: Aux::Argmax(arg), ..
                    }) = &self.cache[id.0]
                    else {
                        return Err(AutodiffError::NotEvaluated(id.0));
                    };
                    let mut g = vec![T::zero(); xv.len()];
                    for (&src, &v) in arg.iter().zip(up.data()) {
                        g[src] = g[src] + v;
                    }
                    out.push((x, Array::new(xv.shape().to_vec(), g)?));
                }
            }
            Op::Flatten(x) => {
                if need(x) {
                    out.push((x, up.clone().reshape(self.val(x)?.shape().to_vec())?));
                }
            }
            Op::SoftmaxCrossEntropy(logits, labels) => {
                if need(logits) {
                    let Some(Cached { aux: Aux::Probs(p), .. }) = &self.cache[id.0] else {
                        return Err(AutodiffError::NotEvaluated(id.0));
                    };
                    let ys = self.labels[labels.0]
                        .as_ref()
                        .ok_or(AutodiffError::NotEvaluated(labels.0))?;
                    let shape = self.val(logits)?.shape().to_vec();
                    let k = shape[1];
                    let scale = up.data()[0] / T::from_f64(ys.len() as f64);
                    let mut g: Vec<T> = p.iter().map(|&v| v * scale).collect();
                    for (i, &y) in ys.iter().enumerate() {
                        g[i * k + y] = g[i * k + y] - scale;
                    }
                    out.push((logits, Array::new(shape, g)?));
                }
            }
            Op::Add(a, b) => {
                if need(a) {
                    out.push((a, up.clone()));
                }
                if need(b) {
                    out.push((b, up.clone()));
                }
            }
            Op::Mul(a, b) => {
                let av = self.val(a)?;
                let bv = self.val(b)?;
                if need(a) {
                    let data = up.data().iter().zip(bv.data()).map(|(&g, &v)| g * v).collect();
                    out.push((a, Array::new(av.shape().to_vec(), data)?));
                }
                if need(b) {
                    let data = up.data().iter().zip(av.data()).map(|(&g, &v)| g * v).collect();
                    out.push((b, Array::new(bv.shape().to_vec(), data)?));
                }
            }
            Op::Sum(x) => {
                if need(x) {
                    out.push((x, Array::full(self.val(x)?.shape(), up.data()[0])));
                }
            }
            Op::Mean(x) => {
                if need(x) {
                    let xv = self.val(x)?;
                    let g = up.data()[0] / T::from_f64(xv.len() as f64);
                    out.push((x, Array::full(xv.shape(), g)));
                }
            }
        }
        Ok(out)
    }
}
