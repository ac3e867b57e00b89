//! Model definitions shared by the natural learner, the robust learner and
//! the global learner. All three use the same [`ModelSpec`], so a
//! [`ParamVector`] from one can be loaded into any of the others.
//!
//! Parameter layout is the forward order of the layers, each contributing
//! its weight (row-major) followed by its bias:
//!
//! * `mlp`: `dense{i}.weight` of shape `(in, out)`, then `dense{i}.bias` of
//!   shape `(out,)`, for every hidden layer and the output layer.
//! * `tiny-cnn`: `conv1.weight (c1, in, 3, 3)`, `conv1.bias (c1,)`,
//!   `conv2.weight (c2, c1, 3, 3)`, `conv2.bias (c2,)`,
//!   `dense.weight (c2*h*w, K)`, `dense.bias (K,)`.
//!
//! With `bias = false` the bias blocks are omitted.

pub mod checkpoint;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, Bindings, Graph, NodeId, Padding};
pub use params::ParamVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("parameter vector has {found} entries, model needs {expected}")]
    ParamLength { expected: usize, found: usize },
    #[error("input batch shape {found:?} does not match model input {expected:?}")]
    InputShape { expected: Vec<usize>, found: Vec<usize> },
    #[error("{labels} labels for a batch of {batch}")]
    LabelCount { batch: usize, labels: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    TinyCnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvPadding {
    #[default]
    Valid,
    Same,
}

impl From<ConvPadding> for Padding {
    fn from(p: ConvPadding) -> Self {
        match p {
            ConvPadding::Valid => Padding::Valid,
            ConvPadding::Same => Padding::Same,
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_channels() -> [usize; 2] {
    [8, 16]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Per-sample input shape: `[d]` (or any shape, flattened) for `mlp`,
    /// `[channels, height, width]` for `tiny-cnn`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    /// Hidden layer widths (`mlp` only). Empty means a linear model.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Output channels of the two conv layers (`tiny-cnn` only).
    #[serde(default = "default_channels")]
    pub channels: [usize; 2],
    #[serde(default)]
    pub padding: ConvPadding,
    #[serde(default = "default_true")]
    pub bias: bool,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_shape: vec![input_dim],
            classes,
            hidden,
            channels: default_channels(),
            padding: ConvPadding::Valid,
            bias: true,
        }
    }

    pub fn tiny_cnn(input_shape: [usize; 3], classes: usize) -> Self {
        Self {
            kind: ModelKind::TinyCnn,
            input_shape: input_shape.to_vec(),
            classes,
            hidden: Vec::new(),
            channels: default_channels(),
            padding: ConvPadding::Valid,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        ParamLayout::new(self).map(|_| ())
    }

    pub fn param_count(&self) -> Result<usize, ModelError> {
        Ok(ParamLayout::new(self)?.len())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Fan-in used by the initializer; `None` for biases.
    pub fan_in: Option<usize>,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named, ordered blocks of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    blocks: Vec<ParamBlock>,
    len: usize,
}

impl ParamLayout {
    pub fn new(spec: &ModelSpec) -> Result<Self, ModelError> {
        if spec.classes < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                spec.classes
            )));
        }
        if spec.input_shape.is_empty() || spec.input_shape.contains(&0) {
            return Err(ModelError::InvalidSpec(format!(
                "bad input shape {:?}",
                spec.input_shape
            )));
        }
        let mut layout = Self {
            blocks: Vec::new(),
            len: 0,
        };
        match spec.kind {
            ModelKind::Mlp => {
                if spec.hidden.contains(&0) {
                    return Err(ModelError::InvalidSpec("hidden widths must be positive".into()));
                }
                let mut fan_in = spec.input_len();
                let widths = spec.hidden.iter().copied().chain(std::iter::once(spec.classes));
                for (i, width) in widths.enumerate() {
                    layout.push(format!("dense{i}.weight"), vec![fan_in, width], Some(fan_in));
                    if spec.bias {
                        layout.push(format!("dense{i}.bias"), vec![width], None);
                    }
                    fan_in = width;
                }
            }
            ModelKind::TinyCnn => {
                let &[c, h, w] = spec.input_shape.as_slice() else {
                    return Err(ModelError::InvalidSpec(format!(
                        "tiny-cnn needs a [channels, height, width] input, got {:?}",
                        spec.input_shape
                    )));
                };
                let [c1, c2] = spec.channels;
                if c1 == 0 || c2 == 0 {
                    return Err(ModelError::InvalidSpec("conv channels must be positive".into()));
                }
                let (h2, w2) = cnn_feature_extent(h, w, spec.padding)
                    .ok_or_else(|| ModelError::InvalidSpec(format!("input {h}x{w} too small for tiny-cnn")))?;
                layout.push("conv1.weight".into(), vec![c1, c, 3, 3], Some(c * 9));
                if spec.bias {
                    layout.push("conv1.bias".into(), vec![c1], None);
                }
                layout.push("conv2.weight".into(), vec![c2, c1, 3, 3], Some(c1 * 9));
                if spec.bias {
                    layout.push("conv2.bias".into(), vec![c2], None);
                }
                let flat = c2 * h2 * w2;
                layout.push("dense.weight".into(), vec![flat, spec.classes], Some(flat));
                if spec.bias {
                    layout.push("dense.bias".into(), vec![spec.classes], None);
                }
            }
        }
        Ok(layout)
    }

    fn push(&mut self, name: String, shape: Vec<usize>, fan_in: Option<usize>) {
        let block = ParamBlock {
            name,
            shape,
            offset: self.len,
            fan_in,
        };
        self.len += block.len();
        self.blocks.push(block);
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Name of the block containing flat index `index`.
    pub fn block_of(&self, index: usize) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.range().contains(&index))
    }

    /// Splits a flat vector into one array per block.
    pub fn split(&self, params: &[f64]) -> Result<Vec<Array>, ModelError> {
        self.check_len(params.len())?;
        self.blocks
            .iter()
            .map(|b| Ok(Array::new(b.shape.clone(), params[b.range()].to_vec())?))
            .collect()
    }

    /// Inverse of [`ParamLayout::split`].
    pub fn join(&self, arrays: &[Array]) -> Result<ParamVector, ModelError> {
        if arrays.len() != self.blocks.len() {
            return Err(ModelError::InvalidSpec(format!(
                "expected {} parameter blocks, got {}",
                self.blocks.len(),
                arrays.len()
            )));
        }
        let mut flat = Vec::with_capacity(self.len);
        for (block, array) in self.blocks.iter().zip(arrays) {
            if array.shape() != block.shape.as_slice() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "join",
                    left: block.shape.clone(),
                    right: array.shape().to_vec(),
                }
                .into());
            }
            flat.extend_from_slice(array.data());
        }
        Ok(ParamVector::new(flat))
    }

    pub fn check_len(&self, found: usize) -> Result<(), ModelError> {
        if found != self.len {
            return Err(ModelError::ParamLength {
                expected: self.len,
                found,
            });
        }
        Ok(())
    }
}

fn cnn_feature_extent(h: usize, w: usize, padding: ConvPadding) -> Option<(usize, usize)> {
    let conv = |d: usize| match padding {
        ConvPadding::Valid => d.checked_sub(2).filter(|&v| v > 0),
        ConvPadding::Same => Some(d),
    };
    let pool = |d: usize| Some(d / 2).filter(|&v| v > 0);
    let h = pool(conv(pool(conv(h)?)?)?)?;
    let w = pool(conv(pool(conv(w)?)?)?)?;
    Some((h, w))
}

/// He-normal weights (variance `2 / fan_in`), zero biases. Deterministic in
/// `seed`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector, ModelError> {
    let layout = ParamLayout::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; layout.len()];
    for block in layout.blocks() {
        if let Some(fan_in) = block.fan_in {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in &mut params[block.range()] {
                *v = normal.sample(&mut rng);
            }
        }
    }
    Ok(ParamVector::new(params))
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// A [`ModelSpec`] compiled into an autodiff graph. Owns the graph's forward
/// caches, so each concurrently training learner needs its own instance.
#[derive(Clone, Debug)]
pub struct Network {
    spec: ModelSpec,
    layout: ParamLayout,
    graph: Graph,
    input: NodeId,
    labels: NodeId,
    logits: NodeId,
    params: Vec<NodeId>,
}

impl Network {
    pub fn new(spec: &ModelSpec) -> Result<Self, ModelError> {
        let layout = ParamLayout::new(spec)?;
        let mut g = Graph::new();
        let input = g.input("x", true);
        let labels = g.labels("y");
        let params: Vec<NodeId> = layout.blocks().iter().map(|b| g.parameter(b.name.clone())).collect();
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("layout and graph agree");

        let logits = match spec.kind {
            ModelKind::Mlp => {
                let mut h = if spec.input_shape.len() > 1 {
                    g.flatten(input)
                } else {
                    input
                };
                let layers = spec.hidden.len() + 1;
                for i in 0..layers {
                    let w = take();
                    h = g.matmul(h, w);
                    if spec.bias {
                        let b = take();
                        h = g.add_bias(h, b);
                    }
                    if i + 1 < layers {
                        h = g.relu(h);
                    }
                }
                h
            }
            ModelKind::TinyCnn => {
                let padding = spec.padding.into();
                let mut h = input;
                for _ in 0..2 {
                    let k = take();
                    h = g.conv2d(h, k, padding);
                    if spec.bias {
                        let b = take();
                        h = g.add_bias(h, b);
                    }
                    h = g.relu(h);
                    h = g.max_pool2(h);
                }
                h = g.flatten(h);
                let w = take();
                h = g.matmul(h, w);
                if spec.bias {
                    let b = take();
                    h = g.add_bias(h, b);
                }
                h
            }
        };
        let loss = g.softmax_cross_entropy(logits, labels);
        g.set_loss(loss);
        Ok(Self {
            spec: spec.clone(),
            layout,
            graph: g,
            input,
            labels,
            logits,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    fn check_batch(&self, x: &Array) -> Result<usize, ModelError> {
        let s = x.shape();
        if s.len() != self.spec.input_shape.len() + 1 || s[1..] != self.spec.input_shape[..] {
            let mut expected = vec![s.first().copied().unwrap_or(1)];
            expected.extend_from_slice(&self.spec.input_shape);
            return Err(ModelError::InputShape {
                expected,
                found: s.to_vec(),
            });
        }
        Ok(s[0])
    }

    fn bindings(&self, params: &[f64], x: &Array, labels: Option<&[usize]>) -> Result<Bindings, ModelError> {
        let batch = self.check_batch(x)?;
        let mut b = Bindings::new();
        for (node, array) in self.params.iter().zip(self.layout.split(params)?) {
            b.bind(*node, array);
        }
        b.bind(self.input, x.clone());
        if let Some(labels) = labels {
            if labels.len() != batch {
                return Err(ModelError::LabelCount {
                    batch,
                    labels: labels.len(),
                });
            }
            b.bind_labels(self.labels, labels.to_vec());
        }
        Ok(b)
    }

    /// Logits of shape `(batch, K)`.
    pub fn logits(&mut self, params: &[f64], x: &Array) -> Result<Array, ModelError> {
        let b = self.bindings(params, x, None)?;
        Ok(self.graph.evaluate(&b, self.logits)?)
    }

    pub fn predict_classes(&mut self, params: &[f64], x: &Array) -> Result<Vec<usize>, ModelError> {
        let logits = self.logits(params, x)?;
        Ok(logits.data().chunks_exact(self.spec.classes).map(argmax).collect())
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&mut self, params: &[f64], x: &Array, y: &[usize]) -> Result<f64, ModelError> {
        let b = self.bindings(params, x, Some(y))?;
        Ok(self.graph.forward(&b)?)
    }

    /// Mean cross-entropy and its gradient with respect to the flat
    /// parameter vector.
    pub fn loss_and_param_grad(
        &mut self,
        params: &[f64],
        x: &Array,
        y: &[usize],
    ) -> Result<(f64, ParamVector), ModelError> {
        let loss = self.loss(params, x, y)?;
        let mut grads = self.graph.backward_for(&self.params)?;
        let mut flat = Vec::with_capacity(self.layout.len());
        for (node, block) in self.params.iter().zip(self.layout.blocks()) {
            match grads.take(*node) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat_n(0.0, block.len())),
            }
        }
        Ok((loss, ParamVector::new(flat)))
    }

    /// Mean cross-entropy and its gradient with respect to the input batch.
    pub fn loss_and_input_grad(&mut self, params: &[f64], x: &Array, y: &[usize]) -> Result<(f64, Array), ModelError> {
        let loss = self.loss(params, x, y)?;
        Ok((loss, self.graph.input_gradient(self.input)?))
    }
}

/// A spec together with one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInstance {
    pub spec: ModelSpec,
    pub params: ParamVector,
}

impl ModelInstance {
    pub fn new(spec: ModelSpec, params: ParamVector) -> Result<Self, ModelError> {
        ParamLayout::new(&spec)?.check_len(params.len())?;
        Ok(Self { spec, params })
    }

    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        let params = init_params(&spec, seed)?;
        Ok(Self { spec, params })
    }

    /// Per-block arrays in layout order.
    pub fn blocks(&self) -> Result<Vec<Array>, ModelError> {
        ParamLayout::new(&self.spec)?.split(&self.params)
    }

    /// Replaces the parameters from per-block arrays.
    pub fn assign(&mut self, blocks: &[Array]) -> Result<(), ModelError> {
        self.params = ParamLayout::new(&self.spec)?.join(blocks)?;
        Ok(())
    }

    pub fn predict(&self, batch: &Array) -> Result<Array, ModelError> {
        Network::new(&self.spec)?.logits(&self.params, batch)
    }
}
