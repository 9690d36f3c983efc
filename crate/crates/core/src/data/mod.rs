//! Datasets: MNIST ingestion, synthetic blobs and non-IID client partitions.

mod idx;
mod partition;
mod synthetic;

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use idx::{parse_idx, IdxData, IdxError, IdxTensor};
pub use partition::{dirichlet_partition, Partition, PartitionError};
pub use synthetic::synthetic_classification;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Idx {
        path: PathBuf,
        #[source]
        source: IdxError,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self, DataError> {
        if n_features == 0 || n_classes == 0 {
            return Err(DataError::Invalid("zero features or classes".into()));
        }
        if features.len() != labels.len() * n_features {
            return Err(DataError::Invalid(format!(
                "{} feature values for {} labels × {} features",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(DataError::Invalid(format!("label {bad} >= {n_classes} classes")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            n_features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            n_features: self.n_features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// Splits at `n_first` into (first, rest).
    pub fn split_at(&self, n_first: usize) -> (Dataset, Dataset) {
        let n_first = n_first.min(self.len());
        let first: Vec<usize> = (0..n_first).collect();
        let rest: Vec<usize> = (n_first..self.len()).collect();
        (self.subset(&first), self.subset(&rest))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Locations of the four MNIST IDX files. Each may be gzip-compressed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnistPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistPaths {
    /// Standard file names inside `dir`, preferring `.gz` variants when present.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        let pick = |stem: &str| {
            let gz = dir.join(format!("{stem}.gz"));
            if gz.exists() {
                gz
            } else {
                dir.join(stem)
            }
        };
        Self {
            train_images: pick("train-images-idx3-ubyte"),
            train_labels: pick("train-labels-idx1-ubyte"),
            test_images: pick("t10k-images-idx3-ubyte"),
            test_labels: pick("t10k-labels-idx1-ubyte"),
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_idx(path: &Path) -> Result<IdxTensor, DataError> {
    parse_idx(&read_maybe_gz(path)?).map_err(|source| DataError::Idx {
        path: path.to_path_buf(),
        source,
    })
}

fn images_labels_to_dataset(images: IdxTensor, labels: IdxTensor) -> Result<Dataset, DataError> {
    let (IdxData::U8(pixels), IdxData::U8(lbls)) = (images.data, labels.data) else {
        return Err(DataError::Invalid("MNIST files must hold unsigned bytes".into()));
    };
    if images.dims.len() < 2 || labels.dims.len() != 1 || images.dims[0] != labels.dims[0] {
        return Err(DataError::Invalid(format!(
            "image dims {:?} do not match label dims {:?}",
            images.dims, labels.dims
        )));
    }
    let n_features = images.dims[1..].iter().product();
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels = lbls.iter().map(|&l| l as usize).collect();
    Dataset::new(features, n_features, labels, 10)
}

/// Loads (train, test) MNIST with pixels scaled to [0, 1].
pub fn load_mnist(paths: &MnistPaths) -> Result<(Dataset, Dataset), DataError> {
    let train = images_labels_to_dataset(read_idx(&paths.train_images)?, read_idx(&paths.train_labels)?)?;
    let test = images_labels_to_dataset(read_idx(&paths.test_images)?, read_idx(&paths.test_labels)?)?;
    Ok((train, test))
}
