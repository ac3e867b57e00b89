use std::collections::BTreeMap;

use generalist_core::autodiff::{Bindings, NodeId, Padding};
use generalist_core::{Array, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::ensure;
use crate::Outcome;

const GRAPHS: usize = 120;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so entries that are zero up to
/// rounding do not blow it up.
const FLOOR: f64 = 1e-3;
/// Minimum distance from a ReLU or max-pool kink for a draw to be used.
const MARGIN: f64 = 1e-3;
const MAX_ENTRIES: usize = 24;

struct Sample {
    graph: Graph,
    /// Placeholders with their shapes; labels carry a class count instead.
    arrays: Vec<(NodeId, Vec<usize>, f64)>,
    labels: Option<(NodeId, usize, usize)>,
    relu_inputs: Vec<NodeId>,
    pool_inputs: Vec<NodeId>,
    ops: Vec<&'static str>,
}

impl Sample {
    fn new() -> Self {
        Self {
            graph: Graph::new(),
            arrays: Vec::new(),
            labels: None,
            relu_inputs: Vec::new(),
            pool_inputs: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn param(&mut self, shape: Vec<usize>) -> NodeId {
        let id = self.graph.parameter(format!("p{}", self.arrays.len()));
        self.arrays.push((id, shape, 0.6));
        id
    }

    fn input(&mut self, shape: Vec<usize>) -> NodeId {
        let id = self.graph.input("x", true);
        self.arrays.push((id, shape, -1.0));
        id
    }

    fn relu(&mut self, x: NodeId) -> NodeId {
        self.relu_inputs.push(x);
        self.ops.push("relu");
        self.graph.relu(x)
    }

    fn op(&mut self, name: &'static str, id: NodeId) -> NodeId {
        self.ops.push(name);
        id
    }
}

/// Builds a random graph; every op appears across the family.
fn build(rng: &mut ChaCha8Rng) -> Sample {
    let mut s = Sample::new();
    let n = rng.random_range(1..=3);
    let classes = rng.random_range(2..=4);
    let features = if rng.random_bool(0.5) {
        let c = rng.random_range(1..=2);
        let (h, w) = (rng.random_range(4..=6), rng.random_range(4..=6));
        let x = s.input(vec![n, c, h, w]);
        let kk = if rng.random_bool(0.5) { 3 } else { 1 };
        let oc = rng.random_range(1..=3);
        let padding = if rng.random_bool(0.5) {
            Padding::Same
        } else {
            Padding::Valid
        };
        let k = s.param(vec![oc, c, kk, kk]);
        let conv = s.graph.conv2d(x, k, padding);
        let mut y = s.op("conv2d", conv);
        if rng.random_bool(0.7) {
            let b = s.param(vec![oc]);
            let v = s.graph.add_bias(y, b);
            y = s.op("add_bias", v);
        }
        if rng.random_bool(0.7) {
            y = s.relu(y);
        }
        if rng.random_bool(0.7) {
            s.pool_inputs.push(y);
            let v = s.graph.max_pool2(y);
            y = s.op("max_pool2", v);
        }
        let v = s.graph.flatten(y);
        s.op("flatten", v)
    } else {
        let d = rng.random_range(1..=5);
        let x = s.input(vec![n, d]);
        if rng.random_bool(0.3) {
            let v = s.graph.flatten(x);
            s.op("flatten", v)
        } else {
            x
        }
    };
    let feat_dim = feature_dim(&s, features);

    let hidden = rng.random_range(1..=4);
    let w1 = s.param(vec![feat_dim, hidden]);
    let mm = s.graph.matmul(features, w1);
    let mut hcur = s.op("matmul", mm);
    if rng.random_bool(0.6) {
        let b = s.param(vec![hidden]);
        let v = s.graph.add_bias(hcur, b);
        hcur = s.op("add_bias", v);
    }
    if rng.random_bool(0.6) {
        hcur = s.relu(hcur);
    }
    let w2 = s.param(vec![hidden, classes]);
    let mm = s.graph.matmul(hcur, w2);
    let mut logits = s.op("matmul", mm);
    if rng.random_bool(0.5) {
        // Skip connection from the features.
        let ws = s.param(vec![feat_dim, classes]);
        let skip = s.graph.matmul(features, ws);
        s.op("matmul", skip);
        let v = s.graph.add(logits, skip);
        logits = s.op("add", v);
    }
    if rng.random_bool(0.4) {
        let data: Vec<f64> = (0..n * classes).map(|_| rng.random_range(-1.5..1.5)).collect();
        let c = s.graph.constant(Array::new(vec![n, classes], data).unwrap());
        s.op("constant", c);
        let v = s.graph.mul(logits, c);
        logits = s.op("mul", v);
    }
    let loss = match rng.random_range(0..4) {
        0 | 1 => {
            let y = s.graph.labels("y");
            s.labels = Some((y, n, classes));
            let v = s.graph.softmax_cross_entropy(logits, y);
            s.op("softmax_cross_entropy", v)
        }
        2 => {
            let sq = s.graph.mul(logits, logits);
            s.op("mul", sq);
            let v = s.graph.sum(sq);
            s.op("sum", v)
        }
        _ => {
            let v = s.graph.mean(logits);
            s.op("mean", v)
        }
    };
    s.graph.set_loss(loss);
    s
}

/// Flattened feature width, from the placeholder shapes alone.
fn feature_dim(s: &Sample, features: NodeId) -> usize {
    // Evaluate once with zeros to read the shape.
    let mut g = s.graph.clone();
    let mut b = Bindings::new();
    for (id, shape, _) in &s.arrays {
        b.bind(*id, Array::zeros(shape));
    }
    g.evaluate(&b, features).expect("feature shape").shape()[1]
}

fn draw(s: &Sample, rng: &mut ChaCha8Rng) -> (Vec<Array>, Option<Vec<usize>>) {
    let arrays = s
        .arrays
        .iter()
        .map(|(_, shape, scale)| {
            let len = shape.iter().product();
            let data = (0..len)
                .map(|_| {
                    if *scale < 0.0 {
                        rng.random_range(0.0..1.0)
                    } else {
                        rng.random_range(-*scale..*scale)
                    }
                })
                .collect();
            Array::new(shape.clone(), data).unwrap()
        })
        .collect();
    let labels = s
        .labels
        .map(|(_, n, k)| (0..n).map(|_| rng.random_range(0..k)).collect());
    (arrays, labels)
}

fn bindings(s: &Sample, arrays: &[Array], labels: &Option<Vec<usize>>) -> Bindings {
    let mut b = Bindings::new();
    for ((id, _, _), a) in s.arrays.iter().zip(arrays) {
        b.bind(*id, a.clone());
    }
    if let (Some((id, _, _)), Some(l)) = (s.labels, labels) {
        b.bind_labels(id, l.clone());
    }
    b
}

/// Every ReLU input and every max-pool window is at least `MARGIN` away
/// from a point of non-differentiability.
fn clear_of_kinks(s: &Sample) -> bool {
    let relu_ok = s
        .relu_inputs
        .iter()
        .all(|&n| s.graph.value(n).unwrap().data().iter().all(|v| v.abs() > MARGIN));
    let pool_ok = s.pool_inputs.iter().all(|&n| {
        let a = s.graph.value(n).unwrap();
        let sh = a.shape();
        let (planes, h, w) = (sh[0] * sh[1], sh[2], sh[3]);
        (0..planes).all(|p| {
            (0..h / 2).all(|i| {
                (0..w / 2).all(|j| {
                    let mut win: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(di, dj)| a.data()[p * h * w + (2 * i + di) * w + 2 * j + dj])
                        .collect();
                    win.sort_by(|x, y| y.total_cmp(x));
                    win[0] - win[1] > MARGIN
                })
            })
        })
    });
    relu_ok && pool_ok
}

pub fn criterion() -> Outcome {
    let mut worst = 0.0f64;
    let mut coverage: BTreeMap<&str, usize> = BTreeMap::new();
    let mut checked = 0usize;
    for g in 0..GRAPHS {
        let mut rng = ChaCha8Rng::seed_from_u64(0xad00 + g as u64);
        let mut s = build(&mut rng);
        let mut point = None;
        for _ in 0..200 {
            let (arrays, labels) = draw(&s, &mut rng);
            s.graph
                .forward(&bindings(&s, &arrays, &labels))
                .map_err(|e| format!("graph {g}: {e}"))?;
            if clear_of_kinks(&s) {
                point = Some((arrays, labels));
                break;
            }
        }
        let (arrays, labels) = point.ok_or_else(|| format!("graph {g}: no draw clear of kinks"))?;
        for op in &s.ops {
            *coverage.entry(op).or_default() += 1;
        }
        s.graph.forward(&bindings(&s, &arrays, &labels)).unwrap();
        let grads = s.graph.backward().map_err(|e| format!("graph {g}: {e}"))?;

        for (slot, (id, shape, _)) in s.arrays.iter().enumerate() {
            let analytic = grads.get(*id).cloned().unwrap_or_else(|| Array::zeros(shape));
            let len = analytic.len();
            let picks: Vec<usize> = if len <= MAX_ENTRIES {
                (0..len).collect()
            } else {
                (0..MAX_ENTRIES).map(|_| rng.random_range(0..len)).collect()
            };
            for i in picks {
                let eval = |delta: f64, graph: &mut Graph| {
                    let mut moved = arrays.clone();
                    moved[slot].data_mut()[i] += delta;
                    graph.forward(&bindings(&s, &moved, &labels)).unwrap()
                };
                let mut graph = s.graph.clone();
                let numeric = (eval(H, &mut graph) - eval(-H, &mut graph)) / (2.0 * H);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let all_ops = [
        "matmul",
        "add_bias",
        "conv2d",
        "relu",
        "max_pool2",
        "flatten",
        "softmax_cross_entropy",
        "add",
        "mul",
        "sum",
        "mean",
        "constant",
    ];
    let missing: Vec<_> = all_ops.iter().filter(|op| !coverage.contains_key(*op)).collect();
    ensure(missing.is_empty(), || format!("ops never exercised: {missing:?}"))?;
    let detail = format!("{GRAPHS} graphs, {checked} entries, max rel err {worst:.2e} (< {TOL:e})");
    ensure(worst < TOL, || detail.clone())?;
    Ok(detail)
}
