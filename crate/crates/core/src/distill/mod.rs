//! Client-side dataset distillation: KIP optimization of support points and
//! the per-class GMM coreset.

mod coreset;
mod gmm;
mod kip;

pub use coreset::distill_coreset_gmm;
pub use gmm::{fit_gmm, fit_gmm_with_rng, GmmModel, GmmOptions};
pub use kip::{distill_accuracy, distill_kip, init_support};

use serde::{Deserialize, Serialize};

use crate::data::{one_hot, Dataset};
use crate::error::{invalid, Error, Result};
use crate::kernel::{KernelSpec, SupportSet};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Distilled points per owned class (Img/Cls).
    #[serde(default = "defaults::imgs_per_class")]
    pub imgs_per_class: usize,
    #[serde(default = "defaults::distill_lr")]
    pub distill_lr: f64,
    #[serde(default = "defaults::max_epochs")]
    pub max_epochs: usize,
    /// Target batch size as a fraction of the local dataset.
    #[serde(default = "defaults::target_batch_frac")]
    pub target_batch_frac: f64,
    /// Stop as soon as the epoch-end distill accuracy reaches this value.
    #[serde(default = "defaults::acc_threshold")]
    pub acc_threshold: f64,
    #[serde(default = "defaults::kernel")]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub gmm: GmmOptions,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    use crate::kernel::KernelSpec;

    pub fn imgs_per_class() -> usize {
        1
    }
    pub fn distill_lr() -> f64 {
        0.004
    }
    pub fn max_epochs() -> usize {
        3000
    }
    pub fn target_batch_frac() -> f64 {
        0.10
    }
    pub fn acc_threshold() -> f64 {
        0.999
    }
    pub fn kernel() -> KernelSpec {
        KernelSpec::rbf(1.0)
    }
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            imgs_per_class: defaults::imgs_per_class(),
            distill_lr: defaults::distill_lr(),
            max_epochs: defaults::max_epochs(),
            target_batch_frac: defaults::target_batch_frac(),
            acc_threshold: defaults::acc_threshold(),
            kernel: defaults::kernel(),
            gmm: GmmOptions::default(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.imgs_per_class == 0 {
            return Err(invalid("imgs_per_class must be positive"));
        }
        if !(self.target_batch_frac > 0.0 && self.target_batch_frac <= 1.0) {
            return Err(invalid(format!(
                "target_batch_frac must lie in (0, 1], got {}",
                self.target_batch_frac
            )));
        }
        if !(self.acc_threshold >= 0.0 && self.acc_threshold <= 1.0) {
            return Err(invalid(format!(
                "acc_threshold must lie in [0, 1], got {}",
                self.acc_threshold
            )));
        }
        if !(self.distill_lr >= 0.0) || !self.distill_lr.is_finite() {
            return Err(invalid(format!(
                "distill_lr must be >= 0, got {}",
                self.distill_lr
            )));
        }
        self.kernel.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instance {
    Coreset,
    Kip,
}

/// Per-client distillation record carried alongside the uploaded points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillStats {
    pub client_id: usize,
    pub instance: Instance,
    /// KIP epochs run, or EM iterations summed over classes for the coreset.
    pub epochs: usize,
    pub initial_accuracy: f64,
    /// Accuracy of the returned support (best snapshot for KIP).
    pub final_accuracy: f64,
    /// Accuracy of the last iterate; equals `final_accuracy` for the coreset.
    pub last_accuracy: f64,
    pub loss_trace: Vec<f64>,
}

/// Synthetic points with exact one-hot labels and per-row provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistilledDataset<T> {
    pub points: Matrix<T>,
    pub classes: Vec<usize>,
    /// Uploading client of every row.
    pub owners: Vec<usize>,
    pub num_classes: usize,
    pub stats: Vec<DistillStats>,
}

impl<T: Scalar> DistilledDataset<T> {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn support_set(&self) -> SupportSet<T> {
        SupportSet {
            points: self.points.clone(),
            labels: one_hot(&self.classes, self.num_classes),
        }
    }

    pub fn to_dataset(&self) -> Result<Dataset<T>> {
        Dataset::new(self.points.clone(), self.classes.clone(), self.num_classes)
    }

    /// One JSON record per support point: `{"client_id", "class", "vector"}`.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (i, (&class, &client_id)) in self.classes.iter().zip(&self.owners).enumerate() {
            let rec = WireRecord {
                client_id,
                class,
                vector: self.points.row(i).iter().map(|v| v.as_f64()).collect(),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses the JSONL wire format. Provenance statistics are not part of the
    /// wire format and come back empty.
    pub fn from_jsonl(text: &str, num_classes: usize) -> Result<Self> {
        let mut rows = Vec::new();
        let mut classes = Vec::new();
        let mut owners = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: WireRecord = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            if rec.class >= num_classes {
                return Err(Error::Format(format!(
                    "line {}: class {} out of range",
                    lineno + 1,
                    rec.class
                )));
            }
            rows.push(rec.vector.into_iter().map(T::lit).collect::<Vec<T>>());
            classes.push(rec.class);
            owners.push(rec.client_id);
        }
        Ok(Self {
            points: Matrix::from_rows(&rows)?,
            classes,
            owners,
            num_classes,
            stats: Vec::new(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    client_id: usize,
    class: usize,
    vector: Vec<f64>,
}
