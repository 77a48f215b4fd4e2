use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{invalid, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::seed::{rng_from, stream};

/// Isotropic Gaussian class blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub points_per_class: usize,
    /// Standard deviation of the class centers around the origin.
    pub center_spread: f64,
    /// Standard deviation of points around their class center.
    pub within_std: f64,
    pub seed: u64,
}

impl BlobConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 || self.points_per_class == 0 {
            return Err(invalid(
                "blob counts (classes, dim, points per class) must be positive",
            ));
        }
        if !(self.within_std > 0.0) || !self.within_std.is_finite() {
            return Err(invalid(format!(
                "within_std must be > 0, got {}",
                self.within_std
            )));
        }
        if !(self.center_spread >= 0.0) || !self.center_spread.is_finite() {
            return Err(invalid(format!(
                "center_spread must be >= 0, got {}",
                self.center_spread
            )));
        }
        Ok(())
    }
}

/// Points are emitted class by class; labels are `0..S` in blocks.
pub fn gen_blobs<T: Scalar>(cfg: &BlobConfig) -> Result<Dataset<T>> {
    cfg.validate()?;
    let mut rng = rng_from(cfg.seed, &[stream::DATA]);
    let centers: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| {
            (0..cfg.dim)
                .map(|_| cfg.center_spread * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let n = cfg.num_classes * cfg.points_per_class;
    let mut data = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..cfg.points_per_class {
            for &c in center {
                let z: f64 = rng.sample(StandardNormal);
                data.push(T::lit(c + cfg.within_std * z));
            }
            labels.push(class);
        }
    }
    Dataset::new(Matrix::from_vec(n, cfg.dim, data)?, labels, cfg.num_classes)
}

/// Class centers drawn by [`gen_blobs`] for the same config.
pub fn blob_centers(cfg: &BlobConfig) -> Vec<Vec<f64>> {
    let mut rng = rng_from(cfg.seed, &[stream::DATA]);
    (0..cfg.num_classes)
        .map(|_| {
            (0..cfg.dim)
                .map(|_| cfg.center_spread * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}
