//! Datasets in data scale [-1, 1], IDX ingestion, synthetic sets,
//! augmentation and deterministic batching.

pub mod augment;
pub mod batch;
pub mod idx;
pub mod synthetic;

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, crop_padded, hflip};
pub use batch::BatchSampler;
pub use idx::{load_idx, load_mnist, write_idx, IdxArray, Split, IMAGE_MAGIC, LABEL_MAGIC};
pub use synthetic::{make_synthetic, SyntheticKind};

/// Environment variable naming the directory holding the MNIST IDX files.
pub const DATA_DIR_ENV: &str = "ADVNET_DATA_DIR";

/// `$ADVNET_DATA_DIR`, or `data/mnist` under the workspace root.
pub fn data_dir() -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => PathBuf::from(dir),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

/// Images (NHWC, values in [-1, 1]) with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl Dataset {
    /// Validates the shape, value range and label range.
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: impl Into<String>) -> Result<Self> {
        if images.shape().len() != 4 || images.batch() != labels.len() {
            return Err(Error::dim("dataset", images.shape(), &[labels.len()]));
        }
        if let Some((i, v)) = images.data().iter().enumerate().find(|(_, v)| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Format {
                offset: i as u64,
                message: format!("image value {v} outside [-1, 1]"),
            });
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Index {
                op: "dataset label",
                index: y,
                bound: classes,
            });
        }
        Ok(Self {
            images,
            labels,
            classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample `[H, W, C]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let x = self.images.gather(indices)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(indices)?;
        Ok(Self {
            images,
            labels,
            classes: self.classes,
            split: self.split.clone(),
        })
    }

    /// First `n` samples (or all if fewer).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images.slice_batch(0, n),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split.clone(),
        }
    }
}
