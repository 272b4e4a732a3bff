//! Labeled classification data with a train/validation/test partition, plus
//! a reader for the IDX binary format.

use std::io::Read;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TicError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

/// Index partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn indices(&self, kind: SplitKind) -> &[usize] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Validation => &self.validation,
            SplitKind::Test => &self.test,
        }
    }

    /// Seeded shuffle of `0..n` cut into train/validation/test by fraction.
    /// Test receives the remainder.
    pub fn random(n: usize, train_fraction: f64, validation_fraction: f64, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((n as f64) * train_fraction).round() as usize;
        let n_val = (((n as f64) * validation_fraction).round() as usize).min(n - n_train.min(n));
        let n_train = n_train.min(n);
        let mut train: Vec<usize> = order[..n_train].to_vec();
        let mut validation: Vec<usize> = order[n_train..n_train + n_val].to_vec();
        let mut test: Vec<usize> = order[n_train + n_val..].to_vec();
        train.sort_unstable();
        validation.sort_unstable();
        test.sort_unstable();
        Split {
            train,
            validation,
            test,
        }
    }
}

/// One input/label pair borrowed from a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example<'a> {
    pub x: &'a [f64],
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl LabeledDataset {
    /// `features` is row-major `labels.len() x dim`.
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(TicError::InvalidArgument("feature dimension must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(TicError::DimensionMismatch {
                what: "feature matrix",
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(TicError::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        let ds = LabeledDataset {
            features,
            dim,
            labels,
            num_classes,
            split,
        };
        ds.check_split()?;
        Ok(ds)
    }

    fn check_split(&self) -> Result<()> {
        let n = self.labels.len();
        let mut seen = vec![false; n];
        for &i in self
            .split
            .train
            .iter()
            .chain(&self.split.validation)
            .chain(&self.split.test)
        {
            if i >= n || seen[i] {
                return Err(TicError::InvalidArgument(format!(
                    "split index {i} is out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(TicError::InvalidArgument(
                "split does not cover every example".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn example(&self, i: usize) -> Example<'_> {
        Example {
            x: self.row(i),
            label: self.labels[i],
        }
    }

    pub fn indices(&self, kind: SplitKind) -> &[usize] {
        self.split.indices(kind)
    }

    pub fn examples(&self, kind: SplitKind) -> Vec<Example<'_>> {
        self.gather(self.indices(kind))
    }

    pub fn gather(&self, indices: &[usize]) -> Vec<Example<'_>> {
        indices.iter().map(|&i| self.example(i)).collect()
    }

    /// Same data with a different partition.
    pub fn with_split(&self, split: Split) -> Result<Self> {
        LabeledDataset::new(
            self.features.clone(),
            self.dim,
            self.labels.clone(),
            self.num_classes,
            split,
        )
    }

    /// Every example assigned to the training split.
    pub fn all_train(&self) -> Self {
        let split = Split {
            train: (0..self.len()).collect(),
            validation: Vec::new(),
            test: Vec::new(),
        };
        self.with_split(split).expect("full partition is valid")
    }

    /// Moves training example `index` into the test split.
    pub fn hold_out(&self, index: usize) -> Result<Self> {
        let pos = self
            .split
            .train
            .iter()
            .position(|&i| i == index)
            .ok_or_else(|| TicError::InvalidArgument(format!("{index} is not a training index")))?;
        let mut split = self.split.clone();
        split.train.remove(pos);
        split.test.push(index);
        split.test.sort_unstable();
        self.with_split(split)
    }
}

/// A decoded IDX tensor of unsigned bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Magic for an unsigned-byte tensor of rank 3 (images).
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Magic for an unsigned-byte tensor of rank 1 (labels).
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub fn read_idx<R: Read>(mut reader: R) -> Result<IdxArray> {
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if magic[0] != 0 || magic[1] != 0 || magic[2] != 0x08 {
        return Err(TicError::Format(format!(
            "unsupported IDX magic {:#010x}",
            u32::from_be_bytes(magic)
        )));
    }
    let rank = magic[3] as usize;
    if rank == 0 {
        return Err(TicError::Format("IDX rank must be positive".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut buf = [0u8; 4];
        reader.read_exact(&mut buf)?;
        dims.push(u32::from_be_bytes(buf) as usize);
    }
    let total: usize = dims.iter().product();
    let mut data = vec![0u8; total];
    reader
        .read_exact(&mut data)
        .map_err(|e| TicError::Format(format!("truncated IDX payload: {e}")))?;
    Ok(IdxArray { dims, data })
}

pub fn write_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, array.dims.len() as u8];
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

/// Average-pools each `rows x cols` image by `factor` in both directions.
/// Trailing rows/columns that do not fill a whole window are dropped.
pub fn pool_images(pixels: &[f64], count: usize, rows: usize, cols: usize, factor: usize) -> (Vec<f64>, usize, usize) {
    let factor = factor.max(1);
    let out_rows = rows / factor;
    let out_cols = cols / factor;
    let norm = (factor * factor) as f64;
    let mut out = Vec::with_capacity(count * out_rows * out_cols);
    for img in 0..count {
        let base = img * rows * cols;
        for r in 0..out_rows {
            for c in 0..out_cols {
                let mut acc = 0.0;
                for dr in 0..factor {
                    for dc in 0..factor {
                        acc += pixels[base + (r * factor + dr) * cols + c * factor + dc];
                    }
                }
                out.push(acc / norm);
            }
        }
    }
    (out, out_rows, out_cols)
}

/// Builds a dataset from IDX image and label streams.
///
/// Pixels are scaled to `[0, 1]` and average-pooled by `pool_factor`. At most
/// `limit` examples are kept; the partition is a seeded 70/15/15 split.
pub fn load_idx_dataset<R1: Read, R2: Read>(
    images: R1,
    labels: R2,
    pool_factor: usize,
    limit: Option<usize>,
    split_seed: u64,
) -> Result<LabeledDataset> {
    let images = read_idx(images)?;
    let labels = read_idx(labels)?;
    if images.dims.len() != 3 {
        return Err(TicError::Format(format!(
            "image file must have rank 3, got {}",
            images.dims.len()
        )));
    }
    if labels.dims.len() != 1 {
        return Err(TicError::Format(format!(
            "label file must have rank 1, got {}",
            labels.dims.len()
        )));
    }
    let (count, rows, cols) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != count {
        return Err(TicError::DimensionMismatch {
            what: "label count",
            expected: count,
            actual: labels.dims[0],
        });
    }
    let n = limit.map_or(count, |l| l.min(count));
    if n == 0 {
        return Err(TicError::Empty("IDX dataset"));
    }
    let pixels: Vec<f64> = images.data[..n * rows * cols]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let (features, out_rows, out_cols) = pool_images(&pixels, n, rows, cols, pool_factor);
    let dim = out_rows * out_cols;
    let ys: Vec<usize> = labels.data[..n].iter().map(|&b| b as usize).collect();
    let num_classes = ys.iter().copied().max().unwrap_or(0) + 1;
    LabeledDataset::new(
        features,
        dim,
        ys,
        num_classes.max(2),
        Split::random(n, 0.7, 0.15, split_seed),
    )
}
