//! Image datasets: IDX ingestion, normalisation, stratified splits, the
//! base/incremental class plan and train-time augmentation.

mod augment;
mod idx;
mod plan;
mod split;

pub use augment::{apply_augmentation, augment, draw_augmentation, Augmentation};
pub use idx::{load_idx, load_image_set, parse_idx, parse_label_remap, serialize_idx, IdxData};
pub use plan::{make_session_plan, SessionPlan};
pub use split::{stratified_split, train_val_test_split, SplitTriple};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// MNIST / EMNIST constants as printed in the source study.
pub const MNIST_MEAN_STD: (f64, f64) = (0.1307, 0.3801);
pub const FASHION_MNIST_MEAN_STD: (f64, f64) = (0.2860, 0.3530);
pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f64; 3] = [0.2023, 0.1994, 0.2010];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("IDX format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("label remap line {line}: {msg}")]
    Remap { line: usize, msg: String },
    #[error("standard deviation for channel {0} must be positive")]
    ZeroStd(usize),
    #[error("expected {expected} normalisation channels, got {got}")]
    ChannelCount { expected: usize, got: usize },
    #[error("fraction {0} must lie strictly between 0 and 1")]
    Fraction(f64),
    #[error("classes with fewer than two items cannot be split: {0:?}")]
    TooFewItems(Vec<usize>),
    #[error("session plan needs at least 4 classes, got {0}")]
    TooFewClasses(usize),
    #[error("label {label} at item {index} is not below class count {class_count}")]
    LabelRange {
        index: usize,
        label: usize,
        class_count: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Images `[N, C, H, W]` with one class id per item.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl ImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self, DataError> {
        if images.rank() != 4 && images.rank() != 2 {
            return Err(TensorError::Rank {
                op: "ImageSet",
                expected: 4,
                got: images.shape().to_vec(),
            }
            .into());
        }
        if images.rows() != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "ImageSet",
                expected: vec![labels.len()],
                got: images.shape().to_vec(),
            }
            .into());
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(DataError::LabelRange {
                index,
                label,
                class_count,
            });
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        ImageSet {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Items whose label is in `classes`, original order preserved.
    pub fn filter_classes(&self, classes: &[usize]) -> ImageSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.subset(&idx)
    }

    pub fn concat(parts: &[&ImageSet]) -> Result<ImageSet, DataError> {
        let images: Vec<&Tensor> = parts.iter().map(|p| &p.images).collect();
        let images = Tensor::concat_rows(&images)?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        let class_count = parts.iter().map(|p| p.class_count).max().unwrap_or(0);
        ImageSet::new(images, labels, class_count)
    }

    /// Item indices per class, ascending.
    pub fn class_indices(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        map
    }

    /// Keeps at most `cap` items per class (the first ones in order).
    pub fn cap_per_class(&self, cap: usize) -> ImageSet {
        let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = seen.entry(self.labels[i]).or_default();
                *c += 1;
                *c <= cap
            })
            .collect();
        self.subset(&idx)
    }

    /// Relabels through `map` (`map[old] = new`); the class count becomes
    /// `new_class_count`.
    pub fn relabel(&self, map: &[usize], new_class_count: usize) -> Result<ImageSet, DataError> {
        let labels = self.labels.iter().map(|&l| map[l]).collect();
        ImageSet::new(self.images.clone(), labels, new_class_count)
    }

    /// `(v / 255 - mean_c) / std_c` per channel.
    pub fn normalize(&self, mean: &[f64], std: &[f64]) -> Result<ImageSet, DataError> {
        normalize(self, mean, std)
    }
}

/// Maps raw 0..255 pixels to `(v / 255 - mean) / std` per channel.
pub fn normalize(set: &ImageSet, mean: &[f64], std: &[f64]) -> Result<ImageSet, DataError> {
    let s = set.images.shape();
    if s.len() != 4 {
        return Err(TensorError::Rank {
            op: "normalize",
            expected: 4,
            got: s.to_vec(),
        }
        .into());
    }
    let channels = s[1];
    for got in [mean.len(), std.len()] {
        if got != channels {
            return Err(DataError::ChannelCount {
                expected: channels,
                got,
            });
        }
    }
    if let Some(c) = std.iter().position(|&v| !(v > 0.0)) {
        return Err(DataError::ZeroStd(c));
    }
    let plane = s[2] * s[3];
    let mut images = set.images.clone();
    if plane > 0 {
        for (k, chunk) in images.data_mut().chunks_mut(plane).enumerate() {
            let c = k % channels;
            for v in chunk.iter_mut() {
                *v = (*v / 255.0 - mean[c]) / std[c];
            }
        }
    }
    Ok(ImageSet {
        images,
        labels: set.labels.clone(),
        class_count: set.class_count,
    })
}
