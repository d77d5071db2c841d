//! Dataset ingestion and artifact persistence: MNIST-format IDX files,
//! CIFAR-10 binary batches, deterministic desk-scale subsetting, a
//! synthetic digit corpus for offline runs, and adversarial-batch files.

mod batch;
mod cifar;
mod idx;

pub mod synth;

pub use batch::{load_batch, save_batch, AdversarialBatch, BATCH_MAGIC};
pub use cifar::{load_cifar10_bin, write_cifar10_bin};
pub use idx::{load_mnist_idx, write_mnist_idx};

use crate::container::ContainerError;
use crate::rng::SplitMix64;
use crate::tensor::{Tensor, TensorError};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic 0x{found:08x} at offset {offset} in {path} (expected 0x{expected:08x})")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
        offset: u64,
    },
    #[error("{path} truncated at offset {offset} while reading {field}")]
    Truncated {
        path: String,
        offset: u64,
        field: &'static str,
    },
    #[error("dimension mismatch in {path}: {reason}")]
    DimensionMismatch { path: String, reason: String },
    #[error("{path}: length {len} is not a multiple of record size {record}")]
    MisalignedFile { path: String, len: u64, record: u64 },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("pixel value {value} outside [0,1]")]
    PixelOutOfRange { value: f64 },
    #[error("label {label} outside 0..{class_count}")]
    LabelOutOfRange { label: u8, class_count: usize },
    #[error("class {class} has {have} examples, need {need}")]
    ClassShortfall { class: u8, have: usize, need: usize },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where a dataset came from, for reproducibility records.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub source: String,
    /// hex SHA-256 of each source file
    pub file_hashes: Vec<String>,
    pub subset_seed: Option<u64>,
    pub n_per_class: Option<usize>,
}

/// Labeled image batch with pixels in [0,1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub class_count: usize,
    pub split: String,
    pub provenance: Provenance,
}

impl Dataset {
    /// Validates the invariants: pixel range, label range, matching counts.
    pub fn new(
        images: Tensor,
        labels: Vec<u8>,
        class_count: usize,
        split: impl Into<String>,
        provenance: Provenance,
    ) -> Result<Self, DataError> {
        if images.shape()[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(&value) = images.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::PixelOutOfRange { value });
        }
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(DataError::LabelOutOfRange { label, class_count });
        }
        Ok(Self {
            images,
            labels,
            class_count,
            split: split.into(),
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` examples, preserving order.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let parts: Vec<Tensor> = (0..n).map(|i| self.images.slice_batch(i)).collect();
        let images = if n == 0 {
            let mut shape = self.images.shape().to_vec();
            shape[0] = 0;
            Tensor::zeros(shape)
        } else {
            Tensor::stack_batch(&parts).expect("take stack")
        };
        Dataset {
            images,
            labels: self.labels[..n].to_vec(),
            class_count: self.class_count,
            split: self.split.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Picks the examples at `indices`, in the order given.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let parts: Vec<Tensor> = indices.iter().map(|&i| self.images.slice_batch(i)).collect();
        let images = if indices.is_empty() {
            let mut shape = self.images.shape().to_vec();
            shape[0] = 0;
            Tensor::zeros(shape)
        } else {
            Tensor::stack_batch(&parts).expect("select stack")
        };
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            split: self.split.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Deterministic class-balanced subset: `n_per_class` examples of every
/// class, sampled with the splitmix stream derived from `seed`. The
/// subset order interleaves classes, then the provenance records the seed.
pub fn make_desk_subset(
    dataset: &Dataset,
    n_per_class: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
    for (i, &label) in dataset.labels.iter().enumerate() {
        per_class[label as usize].push(i);
    }
    let mut chosen: Vec<Vec<usize>> = Vec::with_capacity(dataset.class_count);
    for (class, indices) in per_class.iter_mut().enumerate() {
        if indices.len() < n_per_class {
            return Err(DataError::ClassShortfall {
                class: class as u8,
                have: indices.len(),
                need: n_per_class,
            });
        }
        SplitMix64::derive(seed, class as u64).shuffle(indices);
        chosen.push(indices[..n_per_class].to_vec());
    }
    let mut order = Vec::with_capacity(n_per_class * dataset.class_count);
    for round in 0..n_per_class {
        for class_list in &chosen {
            order.push(class_list[round]);
        }
    }
    let mut subset = dataset.select(&order);
    subset.provenance.subset_seed = Some(seed);
    subset.provenance.n_per_class = Some(n_per_class);
    Ok(subset)
}

pub(crate) fn sha256_file(path: &std::path::Path) -> std::io::Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(n: usize, classes: usize) -> Dataset {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            labels.push((i % classes) as u8);
            images.extend((0..4).map(|p| ((i * 7 + p) % 23) as f64 / 23.0));
        }
        Dataset::new(
            Tensor::new(vec![n, 1, 2, 2], images).unwrap(),
            labels,
            classes,
            "test",
            Provenance::default(),
        )
        .unwrap()
    }

    #[test]
    fn subset_is_balanced_and_deterministic() {
        let ds = tiny_dataset(100, 10);
        let a = make_desk_subset(&ds, 5, 42).unwrap();
        let b = make_desk_subset(&ds, 5, 42).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.images.values(), b.images.values());
        assert_eq!(a.len(), 50);
        for class in 0..10u8 {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 5);
        }
        assert_eq!(a.provenance.subset_seed, Some(42));

        let c = make_desk_subset(&ds, 5, 43).unwrap();
        assert_ne!(a.images.values(), c.images.values());
    }

    #[test]
    fn zero_subset_is_empty() {
        let ds = tiny_dataset(20, 10);
        let s = make_desk_subset(&ds, 0, 1).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn shortfall_names_class() {
        let ds = tiny_dataset(19, 10); // class 9 has only one example
        let err = make_desk_subset(&ds, 2, 1).unwrap_err();
        match err {
            DataError::ClassShortfall { class, have, need } => {
                assert_eq!((class, have, need), (9, 1, 2));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn invariants_enforced() {
        let images = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 1.5]).unwrap();
        assert!(matches!(
            Dataset::new(images, vec![0], 10, "t", Provenance::default()),
            Err(DataError::PixelOutOfRange { .. })
        ));
        let images = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            Dataset::new(images, vec![10], 10, "t", Provenance::default()),
            Err(DataError::LabelOutOfRange { .. })
        ));
    }
}
