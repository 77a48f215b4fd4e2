//! Datasets, synthetic blob generation, IDX ingestion and client partitioning.

mod blobs;
mod idx;
mod partition;

pub use blobs::{blob_centers, gen_blobs, BlobConfig};
pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx, write_idx};
pub use partition::{partition_iid, partition_pathological, Partition};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::seed::rng_from;

/// Feature matrix with integer class labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset<T> {
    features: Matrix<T>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(features: Matrix<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(invalid("num_classes must be positive"));
        }
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset labels",
                expected: features.rows(),
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid(format!(
                "label {bad} is out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn one_hot(&self) -> Matrix<T> {
        one_hot(&self.labels, self.num_classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Classes with at least one point, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        self.class_counts()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(s, _)| s)
            .collect()
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Seeded per-class split: `round(test_fraction · n_s)` points of every
    /// class go to the test side. Returns `(train, test)`.
    pub fn stratified_split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(invalid(format!(
                "test fraction must lie in [0, 1), got {test_fraction}"
            )));
        }
        let mut rng = rng_from(seed, &[crate::seed::stream::SPLIT]);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for s in 0..self.num_classes {
            let mut idx = self.indices_of_class(s);
            idx.shuffle(&mut rng);
            let k = (test_fraction * idx.len() as f64).round() as usize;
            test.extend_from_slice(&idx[..k]);
            train.extend_from_slice(&idx[k..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }

    /// Concatenates rows of two datasets with the same dimension and class count.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.num_classes != other.num_classes {
            return Err(Error::DimensionMismatch {
                context: "concat class count",
                expected: self.num_classes,
                found: other.num_classes,
            });
        }
        let features = Matrix::vstack(&[&self.features, &other.features])?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self {
            features,
            labels,
            num_classes: self.num_classes,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            features: self.features.cast(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }
}

pub fn one_hot<T: Scalar>(labels: &[usize], num_classes: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (i, &l) in labels.iter().enumerate() {
        m[(i, l)] = T::one();
    }
    m
}
