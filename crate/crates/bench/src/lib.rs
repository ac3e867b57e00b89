//! Fixtures shared by the benchmarks in `benches/`.

use generalist_core::models::init_params;
use generalist_core::{Array, ModelSpec, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random inputs in `[0, 1]` and labels for a model.
pub fn batch(spec: &ModelSpec, n: usize, seed: u64) -> (Array, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![n];
    shape.extend(&spec.input_shape);
    let len = n * spec.input_len();
    let x = Array::new(shape, (0..len).map(|_| rng.random_range(0.0..1.0)).collect()).expect("shape matches");
    let y = (0..n).map(|_| rng.random_range(0..spec.classes)).collect();
    (x, y)
}

pub fn params(spec: &ModelSpec) -> ParamVector {
    init_params(spec, 7).expect("valid spec")
}

/// The MNIST-sized CNN used at desk scale.
pub fn mnist_cnn() -> ModelSpec {
    let mut spec = ModelSpec::tiny_cnn([1, 28, 28], 10);
    spec.channels = [16, 32];
    spec
}
