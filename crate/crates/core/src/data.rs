//! Datasets, IDX files, synthetic blobs and deterministic batching.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::Array;
use crate::derive_seed;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated IDX file ({found} bytes, header promises {expected})")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Inputs in `[0, 1]` with one class id per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Array,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    /// `inputs` has shape `(N, ...)`.
    pub fn new(inputs: Array, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if inputs.ndim() < 2 {
            return Err(DataError::Invalid("inputs need a batch axis and a sample shape".into()));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: inputs.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(bad) = inputs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::Invalid(format!("input value {bad} outside [0, 1]")));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} not below class count {classes}"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &Array {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn with_classes(mut self, classes: usize) -> Result<Self, DataError> {
        if let Some(bad) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} not below class count {classes}"
            )));
        }
        self.classes = classes;
        Ok(self)
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Gathers the given samples, in order, into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Array, Vec<usize>) {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * len..(i + 1) * len]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Array::new(shape, data).expect("gathered batch is well formed"), labels)
    }

    /// The first `n` samples (or all of them). Datasets are never empty, so
    /// `n = 0` keeps one sample.
    pub fn take(&self, n: usize) -> Self {
        let n = n.clamp(1, self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (inputs, labels) = self.gather(&idx);
        Self {
            inputs,
            labels,
            classes: self.classes,
        }
    }

    /// Consecutive batches of at most `size` samples in dataset order.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = (Array, Vec<usize>)> + '_ {
        let size = size.max(1);
        (0..self.len())
            .step_by(size)
            .map(move |start| self.gather(&(start..(start + size).min(self.len())).collect::<Vec<_>>()))
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>, DataError> {
    let head = 4 * (1 + dims);
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: head,
            found: bytes.len(),
        });
    }
    let found = BigEndian::read_u32(&bytes[..4]);
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    if bytes.len() < head {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: head,
            found: bytes.len(),
        });
    }
    let shape: Vec<usize> = (0..dims)
        .map(|i| BigEndian::read_u32(&bytes[4 + 4 * i..]) as usize)
        .collect();
    let expected = head + shape.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(shape)
}

/// Reads an IDX image file (`N × rows × cols` unsigned bytes) and its label
/// file. Pixels are scaled by 1/255; samples have shape `(1, rows, cols)`.
/// The class count is the largest label plus one, at least 2.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let img = read(images)?;
    let shape = header(images, &img, IDX_IMAGES_MAGIC, 3)?;
    let lab = read(labels)?;
    let lshape = header(labels, &lab, IDX_LABELS_MAGIC, 1)?;
    let (n, rows, cols) = (shape[0], shape[1], shape[2]);
    if lshape[0] != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: lshape[0],
        });
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(DataError::Invalid(format!("{}: empty image file", images.display())));
    }
    let pixels = &img[16..16 + n * rows * cols];
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let inputs = Array::new(vec![n, 1, rows, cols], data).expect("extents checked");
    let labels: Vec<usize> = lab[8..8 + n].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(inputs, labels, classes)
}

/// Writes a dataset of `(1, rows, cols)` or `(rows, cols)` samples as IDX,
/// quantizing each value to `round(255 v)`.
pub fn write_idx(dataset: &Dataset, images: &Path, labels: &Path) -> Result<(), DataError> {
    let (rows, cols) = match dataset.sample_shape() {
        [1, r, c] | [r, c] => (*r, *c),
        other => {
            return Err(DataError::Invalid(format!(
                "cannot write sample shape {other:?} as IDX images"
            )))
        }
    };
    if let Some(bad) = dataset.labels.iter().find(|&&l| l > 255) {
        return Err(DataError::Invalid(format!("label {bad} does not fit in a byte")));
    }
    let n = dataset.len();
    let mut img = Vec::with_capacity(16 + dataset.inputs.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(dataset.inputs.data().iter().map(|&v| (v * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + n);
    for v in [IDX_LABELS_MAGIC, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(dataset.labels.iter().map(|&l| l as u8));
    let write = |path: &Path, bytes: &[u8]| {
        fs::write(path, bytes).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    write(images, &img)?;
    write(labels, &lab)
}

/// Isotropic Gaussian clusters, one class per center, clipped to `[0, 1]`.
/// Samples are grouped by class. `sigma = 0` places every sample on its center.
pub fn make_blobs(n_per_class: usize, centers: &[Vec<f64>], sigma: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DataError::Invalid(format!(
            "sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if centers.len() < 2 || n_per_class == 0 {
        return Err(DataError::Invalid(
            "need at least two centers and one sample per class".into(),
        ));
    }
    let d = centers[0].len();
    if d == 0 || centers.iter().any(|c| c.len() != d) {
        return Err(DataError::Invalid("centers must share a positive dimension".into()));
    }
    if centers.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(DataError::Invalid("centers must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("sigma checked");
    let mut data = Vec::with_capacity(centers.len() * n_per_class * d);
    let mut labels = Vec::with_capacity(centers.len() * n_per_class);
    for (class, c) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(c.iter().map(|&m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0)));
            labels.push(class);
        }
    }
    let n = labels.len();
    Dataset::new(
        Array::new(vec![n, d], data).expect("extents match"),
        labels,
        centers.len(),
    )
}

/// Permutation of `0..n` for one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch/{epoch}")));
    idx.shuffle(&mut rng);
    idx
}

/// Shuffled minibatch indices, reshuffled every pass. The last batch of a
/// pass may be short; batches never straddle two passes.
#[derive(Clone, Debug)]
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    pos: usize,
    perm: Vec<usize>,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        assert!(n > 0 && batch_size > 0, "empty dataset or zero batch size");
        Self {
            n,
            batch_size,
            seed,
            epoch: 0,
            pos: 0,
            perm: epoch_permutation(n, seed, 0),
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    /// Index of the pass the next batch is drawn from.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos >= self.n {
            self.epoch += 1;
            self.pos = 0;
            self.perm = epoch_permutation(self.n, self.seed, self.epoch);
        }
        let end = (self.pos + self.batch_size).min(self.n);
        let out = self.perm[self.pos..end].to_vec();
        self.pos = end;
        out
    }

    pub fn next_batch(&mut self, data: &Dataset) -> (Array, Vec<usize>) {
        debug_assert_eq!(data.len(), self.n);
        data.gather(&self.next_indices())
    }
}
