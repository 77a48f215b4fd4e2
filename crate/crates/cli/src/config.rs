//! Experiment configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use distillfed_core::data::BlobConfig;
use distillfed_core::federation::{FedConfig, PartitionMode};
use distillfed_core::metrics::Method;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "DISTILLFED_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian blobs; the per-run seed is mixed into `seed`.
    Blobs(BlobConfig),
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Values swept by the `sweep-*` subcommands. Only the axis of the chosen
/// subcommand has to be nonempty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default)]
    pub imgs_per_class: Vec<usize>,
    #[serde(default)]
    pub clients: Vec<usize>,
    #[serde(default)]
    pub classes_per_client: Vec<usize>,
    #[serde(default)]
    pub drop_rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub seeds: Vec<u64>,
    /// Template for every cell; `method`, `seed` and the swept field are
    /// overwritten per cell.
    pub fed: FedConfig,
    /// Methods to run; defaults to `fed.method`.
    #[serde(default)]
    pub methods: Vec<Method>,
    /// Local epoch grid for model-exchanging methods; defaults to
    /// `fed.local.epochs`.
    #[serde(default)]
    pub local_epochs: Vec<usize>,
    #[serde(default)]
    pub sweep: SweepAxes,
    /// Total distilled points kept fixed by the client sweep.
    #[serde(default)]
    pub global_distilled: Option<usize>,
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub precision: Precision,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_gammas() -> Vec<f64> {
    vec![1.0]
}

impl ExperimentConfig {
    /// Parses a config, reporting the failing field path and position.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let inner = e.inner();
            let path = e.path().to_string();
            let field = if path == "." {
                String::new()
            } else {
                format!(" at `{path}`")
            };
            anyhow::anyhow!(
                "{origin}:{}:{}: invalid config{field}: {inner}",
                inner.line(),
                inner.column()
            )
        })?;
        cfg.validate()
            .with_context(|| format!("{origin}: invalid config"))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("`seeds` must not be empty");
        }
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction == 0.0 {
            bail!(
                "`test_fraction` must lie in (0, 1), got {}",
                self.test_fraction
            );
        }
        if self.gammas.iter().any(|&g| g.is_nan() || g <= 0.0 || !g.is_finite()) {
            bail!("`gammas` must be positive");
        }
        if self.local_epochs.contains(&0) {
            bail!("`local_epochs` entries must be at least 1");
        }
        if let DataSource::Blobs(b) = &self.data {
            b.validate().context("`data.blobs`")?;
        }
        let mut probe = self.fed.clone();
        for &m in &self.methods() {
            probe.method = m;
            probe.hybrid = self.fed.hybrid && !m.is_fedd3();
            probe
                .validate()
                .with_context(|| format!("`fed` with method {m}"))?;
        }
        Ok(())
    }

    pub fn methods(&self) -> Vec<Method> {
        if self.methods.is_empty() {
            vec![self.fed.method]
        } else {
            self.methods.clone()
        }
    }

    pub fn local_epoch_grid(&self) -> Vec<usize> {
        if self.local_epochs.is_empty() {
            vec![self.fed.local.epochs]
        } else {
            self.local_epochs.clone()
        }
    }

    /// Replaces the seed list from `DISTILLFED_SEED` (comma separated) when set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seeds = parse_seed_list(&raw).with_context(|| format!("{SEED_ENV}={raw:?}"))?;
        }
        Ok(())
    }

    /// Classes held per client under the template partition.
    pub fn classes_per_client(&self, num_classes: usize) -> usize {
        match self.fed.partition {
            PartitionMode::Iid => num_classes,
            PartitionMode::Pathological(c) => c,
        }
    }
}

pub fn parse_seed_list(raw: &str) -> Result<Vec<u64>> {
    let seeds = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().with_context(|| format!("bad seed {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        bail!("empty seed list");
    }
    Ok(seeds)
}
