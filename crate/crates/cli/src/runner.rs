//! Cell planning, execution and CSV aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use distillfed_core::data::Dataset;
use distillfed_core::data::{gen_blobs, load_idx, BlobConfig};
use distillfed_core::federation::{run, FedConfig, PartitionMode, RunReport};
use distillfed_core::metrics::{gce, CommLedger, Method, VolumeAccounting};
use distillfed_core::seed::derive_seed;
use distillfed_core::{Dataset64, Scalar};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Run,
    Clients,
    ImgCls,
    Ck,
    Stragglers,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Sweep::Run => "run",
            Sweep::Clients => "clients",
            Sweep::ImgCls => "imgcls",
            Sweep::Ck => "ck",
            Sweep::Stragglers => "stragglers",
        }
    }

    pub fn axis(self) -> Option<&'static str> {
        match self {
            Sweep::Run => None,
            Sweep::Clients => Some("clients"),
            Sweep::ImgCls => Some("imgs_per_class"),
            Sweep::Ck => Some("classes_per_client"),
            Sweep::Stragglers => Some("drop_rate"),
        }
    }
}

/// One (axis value, method, local epochs, seed) combination with its fully
/// resolved federation config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: String,
    pub sweep: String,
    pub axis: Option<String>,
    pub value: Option<f64>,
    pub method: Method,
    /// Only set for model-exchanging methods.
    pub local_epochs: Option<usize>,
    pub seed: u64,
    pub fed: FedConfig,
}

/// Number of classes in the configured data source.
pub fn num_classes(cfg: &ExperimentConfig) -> Result<usize> {
    match &cfg.data {
        DataSource::Blobs(b) => Ok(b.num_classes),
        DataSource::Idx { .. } => Ok(load_data(cfg, cfg.seeds[0])?.0.num_classes()),
    }
}

pub fn plan(cfg: &ExperimentConfig, sweep: Sweep) -> Result<Vec<Cell>> {
    let values: Vec<Option<f64>> = match sweep {
        Sweep::Run => vec![None],
        Sweep::Clients => axis_values(&cfg.sweep.clients, "sweep.clients")?,
        Sweep::ImgCls => axis_values(&cfg.sweep.imgs_per_class, "sweep.imgs_per_class")?,
        Sweep::Ck => axis_values(&cfg.sweep.classes_per_client, "sweep.classes_per_client")?,
        Sweep::Stragglers => {
            if cfg.sweep.drop_rates.is_empty() {
                bail!("`sweep.drop_rates` must not be empty for this sweep");
            }
            cfg.sweep.drop_rates.iter().map(|&v| Some(v)).collect()
        }
    };
    let mut methods = cfg.methods();
    if sweep == Sweep::ImgCls {
        let skipped: Vec<Method> = methods.iter().copied().filter(|m| !m.is_fedd3()).collect();
        if !skipped.is_empty() {
            log::warn!("Img/Cls sweep only applies to distillation methods; skipping {skipped:?}");
        }
        methods.retain(|m| m.is_fedd3());
        if methods.is_empty() {
            bail!("the Img/Cls sweep needs at least one of fedd3_kip, fedd3_coreset in `methods`");
        }
    }
    let classes = if sweep == Sweep::Clients {
        num_classes(cfg)?
    } else {
        0
    };

    let mut cells = Vec::new();
    for value in &values {
        let mut fed = cfg.fed.clone();
        let tag = match (sweep, *value) {
            (Sweep::Run, _) | (_, None) => "run".to_string(),
            (Sweep::Clients, Some(v)) => {
                let m = v as usize;
                fed.num_clients = m;
                fed.distill.imgs_per_class = client_sweep_imgs_per_class(cfg, m, classes)?;
                format!("clients-{m}")
            }
            (Sweep::ImgCls, Some(v)) => {
                fed.distill.imgs_per_class = v as usize;
                format!("imgcls-{}", v as usize)
            }
            (Sweep::Ck, Some(v)) => {
                fed.partition = PartitionMode::Pathological(v as usize);
                format!("ck-{}", v as usize)
            }
            (Sweep::Stragglers, Some(v)) => {
                fed.straggler_drop_rate = v;
                format!("drop-{v}")
            }
        };
        for &method in &methods {
            let epochs: Vec<Option<usize>> = if method.is_fedd3() {
                vec![None]
            } else {
                cfg.local_epoch_grid().into_iter().map(Some).collect()
            };
            for e in epochs {
                for &seed in &cfg.seeds {
                    let mut f = fed.clone();
                    f.method = method;
                    f.seed = seed;
                    f.hybrid = fed.hybrid && !method.is_fedd3();
                    if let Some(e) = e {
                        f.local.epochs = e;
                    }
                    f.validate()
                        .with_context(|| format!("cell {tag} / {method} / seed {seed}"))?;
                    let epoch_tag = e.map(|e| format!("_e{e}")).unwrap_or_default();
                    let hybrid_tag = if f.hybrid { "_hybrid" } else { "" };
                    cells.push(Cell {
                        id: format!("{tag}_{method}{hybrid_tag}{epoch_tag}_s{seed}"),
                        sweep: sweep.name().to_string(),
                        axis: sweep.axis().map(str::to_string),
                        value: *value,
                        method,
                        local_epochs: e,
                        seed,
                        fed: f,
                    });
                }
            }
        }
    }
    Ok(cells)
}

fn axis_values(values: &[usize], name: &str) -> Result<Vec<Option<f64>>> {
    if values.is_empty() {
        bail!("`{name}` must not be empty for this sweep");
    }
    if values.contains(&0) {
        bail!("`{name}` entries must be at least 1");
    }
    Ok(values.iter().map(|&v| Some(v as f64)).collect())
}

/// Img/Cls that keeps the global distilled count at `global_distilled` with
/// `m` clients: `ñ_k = ñ / m`, split evenly over the classes of a client.
pub fn client_sweep_imgs_per_class(
    cfg: &ExperimentConfig,
    m: usize,
    num_classes: usize,
) -> Result<usize> {
    let Some(total) = cfg.global_distilled else {
        bail!("the client sweep needs `global_distilled` (total distilled points to hold fixed)");
    };
    let c_k = cfg.classes_per_client(num_classes);
    let fits = |m: usize| m > 0 && total % m == 0 && (total / m).is_multiple_of(c_k) && total / m > 0;
    if !fits(m) {
        let valid: Vec<usize> = (1..=total).filter(|&m| fits(m)).collect();
        bail!(
            "global_distilled = {total} cannot be split over {m} clients with {c_k} classes each \
             (need an integral number of points per client and per class); valid client counts: {valid:?}"
        );
    }
    Ok(total / m / c_k)
}

/// Train/test split for one run seed. Blob data is regenerated per seed.
pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset64, Dataset64)> {
    let full: Dataset64 = match &cfg.data {
        DataSource::Blobs(b) => gen_blobs(&BlobConfig {
            seed: derive_seed(b.seed, &[seed]),
            ..b.clone()
        })?,
        DataSource::Idx { images, labels } => {
            load_idx(images, labels).with_context(|| format!("loading {}", images.display()))?
        }
    };
    Ok(full.stratified_split(cfg.test_fraction, seed)?)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub resume: bool,
}

/// What the aggregation needs from a finished cell.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CellSummary {
    pub test_accuracy: Vec<f64>,
    pub ledger: CommLedger,
    pub distilled_points: usize,
    pub config: FedConfig,
}

impl CellSummary {
    pub fn final_accuracy(&self) -> f64 {
        self.test_accuracy.last().copied().unwrap_or(0.0)
    }

    pub fn accounting(&self) -> VolumeAccounting {
        self.config.accounting
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub outcome: std::result::Result<CellSummary, String>,
    pub resumed: bool,
}

#[derive(Debug)]
pub struct Outcome {
    pub results: Vec<CellResult>,
    pub aggregate_csv: PathBuf,
    pub curves_csv: PathBuf,
}

impl Outcome {
    pub fn failures(&self) -> impl Iterator<Item = &CellResult> {
        self.results.iter().filter(|r| r.outcome.is_err())
    }
}

#[derive(Serialize)]
struct CellRecord<'a, T> {
    cell: &'a Cell,
    report: &'a RunReport<T>,
}

#[derive(Deserialize)]
struct StoredRecord {
    cell: Cell,
    report: CellSummary,
}

pub fn report_path(out_dir: &Path, cell: &Cell) -> PathBuf {
    out_dir.join("reports").join(format!("{}.json", cell.id))
}

/// Runs every planned cell on a pool of `jobs` workers, writes one report per
/// cell and the sweep's aggregate and curves CSVs. Failing cells are logged
/// and listed in `<sweep>_failures.csv`; the remaining cells still run.
pub fn execute(cfg: &ExperimentConfig, sweep: Sweep, opts: &RunOptions) -> Result<Outcome> {
    let cells = plan(cfg, sweep)?;
    fs::create_dir_all(opts.out_dir.join("reports"))
        .with_context(|| format!("creating {}", opts.out_dir.display()))?;

    let mut data: BTreeMap<u64, Arc<(Dataset64, Dataset64)>> = BTreeMap::new();
    for &seed in &cfg.seeds {
        data.insert(seed, Arc::new(load_data(cfg, seed)?));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .context("building worker pool")?;
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| run_cell(cfg, cell, &data[&cell.seed], opts))
            .collect()
    });

    let name = sweep.name();
    let aggregate_csv = opts.out_dir.join(format!("{name}_aggregate.csv"));
    let curves_csv = opts.out_dir.join(format!("{name}_curves.csv"));
    write_atomic(&aggregate_csv, &aggregate(&results, &cfg.gammas))?;
    write_atomic(&curves_csv, &curves(&results))?;
    let failures_csv = opts.out_dir.join(format!("{name}_failures.csv"));
    let failed: Vec<&CellResult> = results.iter().filter(|r| r.outcome.is_err()).collect();
    if failed.is_empty() {
        let _ = fs::remove_file(&failures_csv);
    } else {
        let mut csv = String::from("cell,error\n");
        for r in failed {
            let msg = r.outcome.as_ref().err().cloned().unwrap_or_default();
            let _ = writeln!(csv, "{},\"{}\"", r.cell.id, msg.replace('"', "'"));
        }
        write_atomic(&failures_csv, &csv)?;
    }
    Ok(Outcome {
        results,
        aggregate_csv,
        curves_csv,
    })
}

fn run_cell(
    cfg: &ExperimentConfig,
    cell: &Cell,
    data: &(Dataset64, Dataset64),
    opts: &RunOptions,
) -> CellResult {
    let path = report_path(&opts.out_dir, cell);
    if opts.resume {
        if let Some(summary) = read_existing(&path, cell) {
            log::info!("{}: reusing existing report", cell.id);
            return CellResult {
                cell: cell.clone(),
                outcome: Ok(summary),
                resumed: true,
            };
        }
    }
    let outcome = match cfg.precision {
        Precision::F64 => run_typed(cell, &data.0, &data.1, &path),
        Precision::F32 => run_typed(cell, &data.0.cast::<f32>(), &data.1.cast::<f32>(), &path),
    };
    match &outcome {
        Ok(s) => log::info!("{}: accuracy {:.4}", cell.id, s.final_accuracy()),
        Err(e) => log::error!("{}: {e}", cell.id),
    }
    CellResult {
        cell: cell.clone(),
        outcome,
        resumed: false,
    }
}

fn run_typed<T: Scalar + Serialize>(
    cell: &Cell,
    train: &Dataset<T>,
    test: &Dataset<T>,
    path: &Path,
) -> std::result::Result<CellSummary, String> {
    let report = run(&cell.fed, train, test).map_err(|e| e.to_string())?;
    let record = CellRecord {
        cell,
        report: &report,
    };
    let json = serde_json::to_string_pretty(&record).map_err(|e| e.to_string())?;
    write_atomic(path, &json).map_err(|e| format!("{e:#}"))?;
    Ok(CellSummary {
        test_accuracy: report.test_accuracy.clone(),
        ledger: report.ledger.clone(),
        distilled_points: report.distilled_points,
        config: report.config.clone(),
    })
}

fn read_existing(path: &Path, cell: &Cell) -> Option<CellSummary> {
    let text = fs::read_to_string(path).ok()?;
    let stored: StoredRecord = serde_json::from_str(&text).ok()?;
    (stored.cell == *cell).then_some(stored.report)
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Key of an aggregate row: everything in a cell except the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupKey {
    pub value: Option<f64>,
    pub method: Method,
    pub hybrid: bool,
    pub local_epochs: Option<usize>,
}

/// Cells grouped over seeds, in plan order.
pub fn group(results: &[CellResult]) -> Vec<(GroupKey, Vec<&CellResult>)> {
    let mut groups: Vec<(GroupKey, Vec<&CellResult>)> = Vec::new();
    for r in results {
        let key = GroupKey {
            value: r.cell.value,
            method: r.cell.method,
            hybrid: r.cell.fed.hybrid,
            local_epochs: r.cell.local_epochs,
        };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Header: `sweep,axis,value,method,hybrid,local_epochs,seeds,failed,
/// acc_median,acc_mean,acc_std,uplink_bits_median,log2_volume_median`,
/// then `gce_median_g<γ>` per γ.
pub fn aggregate(results: &[CellResult], gammas: &[f64]) -> String {
    let mut out = String::from(
        "sweep,axis,value,method,hybrid,local_epochs,seeds,failed,acc_median,acc_mean,acc_std,\
         uplink_bits_median,log2_volume_median",
    );
    for g in gammas {
        let _ = write!(out, ",gce_median_g{g}");
    }
    out.push('\n');
    for (key, members) in group(results) {
        let ok: Vec<&CellSummary> = members
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok())
            .collect();
        let first = &members[0].cell;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            first.sweep,
            fmt_opt(first.axis.as_deref()),
            fmt_opt(key.value),
            key.method,
            key.hybrid,
            fmt_opt(key.local_epochs),
            members.len(),
            members.len() - ok.len()
        );
        if ok.is_empty() {
            out.push_str(",,,,,");
            for _ in gammas {
                out.push(',');
            }
            out.push('\n');
            continue;
        }
        let acc: Vec<f64> = ok.iter().map(|s| s.final_accuracy()).collect();
        let (mean, std) = mean_std(&acc);
        let bits: Vec<f64> = ok
            .iter()
            .map(|s| s.ledger.total_uplink_bits() as f64)
            .collect();
        let logv: Vec<f64> = ok
            .iter()
            .map(|s| s.ledger.log2_volume(s.accounting()))
            .collect();
        let _ = write!(
            out,
            ",{},{},{},{},{}",
            median(&acc).unwrap_or_default(),
            mean,
            std,
            median(&bits).unwrap_or_default(),
            median(&logv).unwrap_or_default()
        );
        for &g in gammas {
            let vals: Vec<f64> = ok
                .iter()
                .filter_map(|s| gce(s.final_accuracy(), g, &s.ledger, s.accounting()).ok())
                .collect();
            // undefined GCE (perfect accuracy or zero volume) stays empty
            let cell = if vals.len() == ok.len() {
                fmt_opt(median(&vals))
            } else {
                String::new()
            };
            let _ = write!(out, ",{cell}");
        }
        out.push('\n');
    }
    out
}

/// Header: `cell,method,hybrid,value,local_epochs,seed,round,cum_uplink_bits,
/// cum_log2_volume,test_acc`; one row per round of every successful cell.
pub fn curves(results: &[CellResult]) -> String {
    let mut out = String::from(
        "cell,method,hybrid,value,local_epochs,seed,round,cum_uplink_bits,cum_log2_volume,test_acc\n",
    );
    for r in results {
        let Ok(s) = &r.outcome else { continue };
        let mut bits = 0u64;
        let mut log2 = 0.0;
        for (round, acc) in s.ledger.rounds().iter().zip(&s.test_accuracy) {
            bits += round.uplink_bits;
            log2 += round.log2_term(s.accounting());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.cell.id,
                r.cell.method,
                r.cell.fed.hybrid,
                fmt_opt(r.cell.value),
                fmt_opt(r.cell.local_epochs),
                r.cell.seed,
                round.round,
                bits,
                log2,
                acc
            );
        }
    }
    out
}
