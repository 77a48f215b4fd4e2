//! Client/server orchestration.
//!
//! * FedD3: every client distills its local data once, the server trains on
//!   the union of the uploads. One communication round.
//! * Baselines exchanging models for one or more rounds: FedAvg, FedProx,
//!   FedNova and SCAFFOLD.
//! * Hybrid: FedAvg where, before the first round, every client also receives
//!   the distilled data of all other clients and trains on its local set plus
//!   that pool in every round.
//!
//! Update rules with `p_k = n_k / Σ n_j` over the clients that delivered:
//!
//! ```text
//! FedAvg / FedProx   w ← Σ p_k w_k
//! FedNova            d_k = (w − w_k) / τ_k,  τ_eff = Σ p_k τ_k,  w ← w − τ_eff Σ p_k d_k
//! SCAFFOLD           c_k⁺ = c_k − c + (w − w_k) / (τ_k η)
//!                    w ← w + η_g Σ p_k (w_k − w)
//!                    c ← c + (|S| / m) Σ p_k (c_k⁺ − c_k)
//! ```
//!
//! where `τ_k` is the number of local optimizer steps, `η` the local learning
//! rate and `η_g` the server learning rate. FedProx adds `(μ/2)‖w_k − w‖²` to
//! the local loss; SCAFFOLD adds `c − c_k` to every local gradient.
//!
//! Every random stream is derived from the global seed and the client id, so
//! reports do not depend on how client jobs are scheduled.

use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{partition_iid, partition_pathological, Dataset, Partition};
use crate::distill::{
    distill_coreset_gmm, distill_kip, DistillConfig, DistillStats, DistilledDataset, Instance,
};
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{
    distilled_uplink_bits, gce, model_uplink_bits, CommLedger, Method, PixelFormat,
    VolumeAccounting, BITS_PER_PARAM,
};
use crate::model::{evaluate, mlp_init, sgd_train, ModelSpec, Regularizer, TrainConfig, Weights};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_from, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shots {
    OneShot,
    MultiShot(usize),
}

impl Shots {
    pub fn rounds(self) -> usize {
        match self {
            Shots::OneShot => 1,
            Shots::MultiShot(t) => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    /// Every client owns exactly this many classes.
    Pathological(usize),
}

impl PartitionMode {
    pub fn apply<T: Scalar>(self, data: &Dataset<T>, m: usize, seed: u64) -> Result<Partition> {
        let seed = derive_seed(seed, &[stream::PARTITION]);
        match self {
            PartitionMode::Iid => partition_iid(data, m, seed),
            PartitionMode::Pathological(c_k) => partition_pathological(data, m, c_k, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub method: Method,
    #[serde(default = "defaults::shots")]
    pub shots: Shots,
    pub num_clients: usize,
    #[serde(default = "defaults::partition")]
    pub partition: PartitionMode,
    /// Hidden layer widths; input and output widths come from the data.
    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
    /// Local client training; `epochs` is E_k. The seed is derived per client
    /// and round.
    pub local: TrainConfig,
    /// Server training on the aggregated distilled data.
    pub server: TrainConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    /// Distillation instance used to build the hybrid pool.
    #[serde(default = "defaults::hybrid_instance")]
    pub hybrid_instance: Instance,
    #[serde(default = "defaults::prox_mu")]
    pub prox_mu: f64,
    #[serde(default = "defaults::one")]
    pub scaffold_server_lr: f64,
    #[serde(default)]
    pub straggler_drop_rate: f64,
    #[serde(default)]
    pub hybrid: bool,
    /// One extra model-exchange round before a one-shot baseline round.
    #[serde(default)]
    pub pre_aggregation: bool,
    #[serde(default)]
    pub pixel_format: PixelFormat,
    #[serde(default)]
    pub accounting: VolumeAccounting,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    use super::*;

    pub fn shots() -> Shots {
        Shots::OneShot
    }
    pub fn partition() -> PartitionMode {
        PartitionMode::Iid
    }
    pub fn hidden() -> Vec<usize> {
        vec![64]
    }
    pub fn hybrid_instance() -> Instance {
        Instance::Kip
    }
    pub fn prox_mu() -> f64 {
        0.1
    }
    pub fn one() -> f64 {
        1.0
    }
}

impl FedConfig {
    pub fn new(method: Method, num_clients: usize) -> Self {
        Self {
            method,
            shots: defaults::shots(),
            num_clients,
            partition: defaults::partition(),
            hidden: defaults::hidden(),
            local: TrainConfig::new(1, 0.01),
            server: TrainConfig::new(100, 0.01),
            distill: DistillConfig::default(),
            hybrid_instance: defaults::hybrid_instance(),
            prox_mu: defaults::prox_mu(),
            scaffold_server_lr: 1.0,
            straggler_drop_rate: 0.0,
            hybrid: false,
            pre_aggregation: false,
            pixel_format: PixelFormat::default(),
            accounting: VolumeAccounting::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(invalid("num_clients must be at least 1"));
        }
        if self.shots.rounds() == 0 {
            return Err(invalid("multi_shot needs at least one round"));
        }
        if !(0.0..1.0).contains(&self.straggler_drop_rate) {
            return Err(invalid(format!(
                "straggler_drop_rate must lie in [0, 1), got {}",
                self.straggler_drop_rate
            )));
        }
        if self.hybrid && !matches!(self.shots, Shots::MultiShot(_)) {
            return Err(invalid("hybrid mode requires multi_shot"));
        }
        if self.hybrid && self.method != Method::Fedavg {
            return Err(invalid("hybrid mode aggregates with fedavg"));
        }
        if !(self.prox_mu >= 0.0) {
            return Err(invalid("prox_mu must be >= 0"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden widths must be positive"));
        }
        self.local.validate()?;
        self.server.validate()?;
        self.distill.validate()
    }

    pub fn model_spec(&self, input: usize, classes: usize) -> ModelSpec {
        let mut widths = vec![input];
        widths.extend_from_slice(&self.hidden);
        widths.push(classes);
        ModelSpec {
            widths,
            seed: derive_seed(self.seed, &[stream::MODEL_INIT]),
        }
    }

    fn client_distill_config(&self, client: usize) -> DistillConfig {
        DistillConfig {
            seed: derive_seed(self.seed, &[stream::DISTILL, client as u64]),
            ..self.distill.clone()
        }
    }

    fn local_train_config(&self, round: usize, client: usize) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(
                self.seed,
                &[stream::LOCAL_TRAIN, round as u64, client as u64],
            ),
            ..self.local.clone()
        }
    }
}

/// Outcome of one orchestrated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport<T> {
    pub method: Method,
    pub hybrid: bool,
    pub seed: u64,
    pub config: FedConfig,
    /// Test accuracy after every ledger round.
    pub test_accuracy: Vec<f64>,
    pub ledger: CommLedger,
    /// Clients that delivered an update in each round.
    pub participants: Vec<Vec<usize>>,
    /// Clients whose local update was non-finite and was discarded.
    pub failed: Vec<Vec<usize>>,
    pub distill_stats: Vec<DistillStats>,
    pub distilled_points: usize,
    pub final_weights: Weights<T>,
    pub wall_time_secs: f64,
}

impl<T: Scalar> RunReport<T> {
    pub fn final_accuracy(&self) -> f64 {
        self.test_accuracy.last().copied().unwrap_or(0.0)
    }

    pub fn gce(&self, gamma: f64) -> Result<f64> {
        gce(
            self.final_accuracy(),
            gamma,
            &self.ledger,
            self.config.accounting,
        )
    }

    /// Header `round,cum_uplink_bits,cum_log2_volume,test_acc`.
    pub fn curve_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("round,cum_uplink_bits,cum_log2_volume,test_acc\n");
        let mut bits = 0u64;
        let mut log2 = 0.0;
        for (r, acc) in self.ledger.rounds().iter().zip(&self.test_accuracy) {
            bits += r.uplink_bits;
            log2 += r.log2_term(self.config.accounting);
            let _ = writeln!(out, "{},{},{},{}", r.round, bits, log2, acc);
        }
        out
    }
}

/// Seeded Bernoulli dropout: client `k` misses round `round` with probability
/// `drop_rate`, independently of every other client and round.
pub fn apply_stragglers(
    clients: &[usize],
    drop_rate: f64,
    round: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(invalid(format!(
            "drop rate must lie in [0, 1), got {drop_rate}"
        )));
    }
    Ok(clients
        .iter()
        .copied()
        .filter(|&k| {
            drop_rate == 0.0
                || rng_from(seed, &[stream::STRAGGLER, round as u64, k as u64]).random::<f64>()
                    >= drop_rate
        })
        .collect())
}

/// Concatenates client uploads in ascending client order.
pub fn aggregate_distilled<T: Scalar>(
    uploads: &[DistilledDataset<T>],
) -> Result<DistilledDataset<T>> {
    let first = uploads
        .first()
        .ok_or_else(|| invalid("nothing to aggregate"))?;
    let mut order: Vec<&DistilledDataset<T>> = uploads.iter().collect();
    order.sort_by_key(|u| u.owners.iter().copied().min().unwrap_or(usize::MAX));
    for u in &order {
        if u.num_classes != first.num_classes {
            return Err(Error::DimensionMismatch {
                context: "aggregated class count",
                expected: first.num_classes,
                found: u.num_classes,
            });
        }
        if u.dim() != first.dim() && !u.is_empty() {
            return Err(Error::DimensionMismatch {
                context: "aggregated feature dimension",
                expected: first.dim(),
                found: u.dim(),
            });
        }
    }
    let points = Matrix::vstack(&order.iter().map(|u| &u.points).collect::<Vec<_>>())?;
    Ok(DistilledDataset {
        points,
        classes: order
            .iter()
            .flat_map(|u| u.classes.iter().copied())
            .collect(),
        owners: order
            .iter()
            .flat_map(|u| u.owners.iter().copied())
            .collect(),
        num_classes: first.num_classes,
        stats: order.iter().flat_map(|u| u.stats.iter().cloned()).collect(),
    })
}

fn distill_client<T: Scalar>(
    instance: Instance,
    client: usize,
    data: &Dataset<T>,
    cfg: &DistillConfig,
) -> Result<DistilledDataset<T>> {
    let out = match instance {
        Instance::Kip => distill_kip(client, data, cfg),
        Instance::Coreset => distill_coreset_gmm(client, data, cfg),
    };
    out.map_err(|e| Error::Client {
        client,
        source: Box::new(e),
    })
}

fn distill_clients<T: Scalar>(
    cfg: &FedConfig,
    instance: Instance,
    clients: &[usize],
    client_data: &[Dataset<T>],
) -> Result<Vec<DistilledDataset<T>>> {
    clients
        .par_iter()
        .map(|&k| distill_client(instance, k, &client_data[k], &cfg.client_distill_config(k)))
        .collect()
}

fn check_inputs<T: Scalar>(cfg: &FedConfig, train: &Dataset<T>, test: &Dataset<T>) -> Result<()> {
    cfg.validate()?;
    if train.dim() != test.dim() || train.num_classes() != test.num_classes() {
        return Err(invalid(
            "train and test sets disagree on dimension or classes",
        ));
    }
    if test.is_empty() {
        return Err(invalid("test set is empty"));
    }
    Ok(())
}

fn split_clients<T: Scalar>(cfg: &FedConfig, train: &Dataset<T>) -> Result<Vec<Dataset<T>>> {
    let p = cfg.partition.apply(train, cfg.num_clients, cfg.seed)?;
    Ok((0..p.num_clients())
        .map(|k| p.client_data(train, k))
        .collect())
}

/// Dispatches on method and hybrid flag.
pub fn run<T: Scalar>(
    cfg: &FedConfig,
    train: &Dataset<T>,
    test: &Dataset<T>,
) -> Result<RunReport<T>> {
    if cfg.method.is_fedd3() {
        run_fedd3(cfg, train, test)
    } else if cfg.hybrid {
        run_hybrid(cfg, train, test)
    } else {
        run_fl(cfg, train, test)
    }
}

/// One-shot FedD3: distill on every surviving client, aggregate, train the
/// server model on the union and evaluate once.
pub fn run_fedd3<T: Scalar>(
    cfg: &FedConfig,
    train: &Dataset<T>,
    test: &Dataset<T>,
) -> Result<RunReport<T>> {
    let started = Instant::now();
    check_inputs(cfg, train, test)?;
    let instance = match cfg.method {
        Method::Fedd3Kip => Instance::Kip,
        Method::Fedd3Coreset => Instance::Coreset,
        m => return Err(invalid(format!("run_fedd3 called with {m}"))),
    };
    let client_data = split_clients(cfg, train)?;
    let all: Vec<usize> = (0..cfg.num_clients).collect();
    let survivors = apply_stragglers(&all, cfg.straggler_drop_rate, 1, cfg.seed)?;

    let uploads = distill_clients(cfg, instance, &survivors, &client_data)?;
    let uplink = uploads
        .iter()
        .map(|u| distilled_uplink_bits(u, cfg.pixel_format))
        .collect::<Result<Vec<_>>>()?;

    let spec = cfg.model_spec(train.dim(), train.num_classes());
    let init: Weights<T> = mlp_init(&spec)?;
    let mut ledger = CommLedger::new(cfg.method.name());
    ledger.record(uplink, 0);

    let (weights, stats, points) = if uploads.is_empty() {
        log::warn!("every client dropped out; server model stays at initialization");
        (init, Vec::new(), 0)
    } else {
        let pooled = aggregate_distilled(&uploads)?;
        let support = pooled.support_set();
        let server_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, &[stream::SERVER_TRAIN]),
            ..cfg.server.clone()
        };
        let out = sgd_train(
            &init,
            &support.points,
            &support.labels,
            &server_cfg,
            &Regularizer::none(),
        )?;
        let points = pooled.len();
        (out.weights, pooled.stats, points)
    };

    let acc = evaluate(&weights, test)?;
    Ok(RunReport {
        method: cfg.method,
        hybrid: false,
        seed: cfg.seed,
        config: cfg.clone(),
        test_accuracy: vec![acc],
        ledger,
        participants: vec![survivors],
        failed: vec![Vec::new()],
        distill_stats: stats,
        distilled_points: points,
        final_weights: weights,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Model-exchange baselines. One-shot runs a single round, preceded by one
/// pre-aggregation round when `pre_aggregation` is set.
pub fn run_fl<T: Scalar>(
    cfg: &FedConfig,
    train: &Dataset<T>,
    test: &Dataset<T>,
) -> Result<RunReport<T>> {
    let started = Instant::now();
    check_inputs(cfg, train, test)?;
    if cfg.method.is_fedd3() {
        return Err(invalid(format!("run_fl called with {}", cfg.method)));
    }
    let client_data = split_clients(cfg, train)?;
    let rounds = match cfg.shots {
        Shots::OneShot if cfg.pre_aggregation => 2,
        s => s.rounds(),
    };
    let mut report = federated_rounds(cfg, &client_data, test, rounds, None)?;
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Hybrid FedAvg: before round 1 every client distills and uploads; each
/// client then trains on its own data plus everybody else's distilled points.
pub fn run_hybrid<T: Scalar>(
    cfg: &FedConfig,
    train: &Dataset<T>,
    test: &Dataset<T>,
) -> Result<RunReport<T>> {
    let started = Instant::now();
    check_inputs(cfg, train, test)?;
    if !cfg.hybrid {
        return Err(invalid("run_hybrid requires hybrid = true"));
    }
    let client_data = split_clients(cfg, train)?;
    let all: Vec<usize> = (0..cfg.num_clients).collect();
    let uploads = distill_clients(cfg, cfg.hybrid_instance, &all, &client_data)?;
    let upload_bits = uploads
        .iter()
        .map(|u| distilled_uplink_bits(u, cfg.pixel_format))
        .collect::<Result<Vec<_>>>()?;
    let total_bits: u64 = upload_bits.iter().sum();

    let mut augmented = Vec::with_capacity(cfg.num_clients);
    let mut downlink = 0;
    for (p, local) in client_data.iter().enumerate() {
        let others: Vec<DistilledDataset<T>> = uploads
            .iter()
            .filter(|u| !u.owners.contains(&p))
            .cloned()
            .collect();
        downlink += total_bits - upload_bits[p];
        augmented.push(if others.is_empty() {
            local.clone()
        } else {
            local.concat(&aggregate_distilled(&others)?.to_dataset()?)?
        });
    }
    let hybrid = HybridPool {
        datasets: augmented,
        upload_bits,
        downlink_bits: downlink,
        stats: uploads
            .iter()
            .flat_map(|u| u.stats.iter().cloned())
            .collect(),
        points: uploads.iter().map(DistilledDataset::len).sum(),
    };
    let mut report = federated_rounds(cfg, &client_data, test, cfg.shots.rounds(), Some(hybrid))?;
    report.hybrid = true;
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

struct HybridPool<T> {
    /// Local data plus the pool of every other client, per client.
    datasets: Vec<Dataset<T>>,
    upload_bits: Vec<u64>,
    downlink_bits: u64,
    stats: Vec<DistillStats>,
    points: usize,
}

struct ClientUpdate<T> {
    client: usize,
    weights: Weights<T>,
    steps: usize,
    /// SCAFFOLD control variate after the round.
    control: Option<Vec<T>>,
}

fn federated_rounds<T: Scalar>(
    cfg: &FedConfig,
    client_data: &[Dataset<T>],
    test: &Dataset<T>,
    rounds: usize,
    hybrid: Option<HybridPool<T>>,
) -> Result<RunReport<T>> {
    let m = cfg.num_clients;
    let spec = cfg.model_spec(test.dim(), test.num_classes());
    let mut global: Weights<T> = mlp_init(&spec)?;
    let p = global.param_count();
    let per_client_bits = model_uplink_bits(p, cfg.method)?;
    let broadcast_bits = match cfg.method {
        Method::Scaffold => 2 * BITS_PER_PARAM * p as u64,
        _ => BITS_PER_PARAM * p as u64,
    };
    let scaffold = cfg.method == Method::Scaffold;
    let mut server_c = vec![T::zero(); if scaffold { p } else { 0 }];
    let mut client_c: Vec<Vec<T>> = vec![vec![T::zero(); if scaffold { p } else { 0 }]; m];
    let sizes: Vec<usize> = client_data.iter().map(Dataset::len).collect();

    let mut ledger = CommLedger::new(cfg.method.name());
    let mut accuracy = Vec::with_capacity(rounds);
    let mut participants = Vec::with_capacity(rounds);
    let mut failed_rounds = Vec::with_capacity(rounds);
    let all: Vec<usize> = (0..m).collect();

    for round in 1..=rounds {
        let survivors = apply_stragglers(&all, cfg.straggler_drop_rate, round, cfg.seed)?;
        let training_sets = hybrid
            .as_ref()
            .map_or(client_data, |h| h.datasets.as_slice());

        let results: Vec<Result<ClientUpdate<T>>> = survivors
            .par_iter()
            .map(|&k| {
                local_update(
                    cfg,
                    round,
                    k,
                    &global,
                    &training_sets[k],
                    scaffold.then(|| (server_c.as_slice(), client_c[k].as_slice())),
                )
            })
            .collect();

        let mut updates = Vec::with_capacity(results.len());
        let mut failed = Vec::new();
        for (k, r) in survivors.iter().zip(results) {
            match r {
                Ok(u) => updates.push(u),
                Err(Error::NonFinite { context }) => {
                    log::warn!("round {round}: client {k} produced a non-finite update ({context}); excluded");
                    failed.push(*k);
                }
                Err(e) => {
                    return Err(Error::Client {
                        client: *k,
                        source: Box::new(e),
                    })
                }
            }
        }

        let mut uplink: Vec<u64> = updates.iter().map(|_| per_client_bits).collect();
        let mut downlink = m as u64 * broadcast_bits;
        if round == 1 {
            if let Some(h) = &hybrid {
                // distilled uploads travel with the first round
                for (bits, u) in uplink.iter_mut().zip(&updates) {
                    *bits += h.upload_bits[u.client];
                }
                downlink += h.downlink_bits;
            }
        }

        if updates.is_empty() {
            log::warn!("round {round}: no client delivered; global model unchanged");
        } else {
            aggregate_round(
                cfg,
                &mut global,
                &updates,
                &sizes,
                &mut server_c,
                &mut client_c,
            )?;
        }
        ledger.record(uplink, downlink);
        accuracy.push(evaluate(&global, test)?);
        participants.push(updates.iter().map(|u| u.client).collect());
        failed_rounds.push(failed);
    }

    let (stats, points) = hybrid.map_or((Vec::new(), 0), |h| (h.stats, h.points));
    Ok(RunReport {
        method: cfg.method,
        hybrid: false,
        seed: cfg.seed,
        config: cfg.clone(),
        test_accuracy: accuracy,
        ledger,
        participants,
        failed: failed_rounds,
        distill_stats: stats,
        distilled_points: points,
        final_weights: global,
        wall_time_secs: 0.0,
    })
}

fn local_update<T: Scalar>(
    cfg: &FedConfig,
    round: usize,
    client: usize,
    global: &Weights<T>,
    data: &Dataset<T>,
    controls: Option<(&[T], &[T])>,
) -> Result<ClientUpdate<T>> {
    let correction: Option<Vec<T>> =
        controls.map(|(c, ck)| c.iter().zip(ck).map(|(&a, &b)| a - b).collect());
    let reg = Regularizer {
        prox: (cfg.method == Method::Fedprox).then_some((cfg.prox_mu, global)),
        correction: correction.as_deref(),
    };
    let train_cfg = cfg.local_train_config(round, client);
    let out = sgd_train(global, data.features(), &data.one_hot(), &train_cfg, &reg)?;
    if !out.weights.is_finite() {
        return Err(Error::NonFinite {
            context: format!("local weights of client {client}"),
        });
    }
    let control = match controls {
        Some((c, ck)) if out.steps > 0 && train_cfg.lr > 0.0 => {
            let scale = T::one() / (T::lit(out.steps as f64) * T::lit(train_cfg.lr));
            Some(
                ck.iter()
                    .zip(c)
                    .zip(global.params().iter().zip(out.weights.params()))
                    .map(|((&cki, &ci), (&w, &wk))| cki - ci + (w - wk) * scale)
                    .collect(),
            )
        }
        Some((_, ck)) => Some(ck.to_vec()),
        None => None,
    };
    Ok(ClientUpdate {
        client,
        weights: out.weights,
        steps: out.steps,
        control,
    })
}

fn aggregate_round<T: Scalar>(
    cfg: &FedConfig,
    global: &mut Weights<T>,
    updates: &[ClientUpdate<T>],
    sizes: &[usize],
    server_c: &mut [T],
    client_c: &mut [Vec<T>],
) -> Result<()> {
    let total: usize = updates.iter().map(|u| sizes[u.client]).sum();
    if total == 0 {
        return Err(invalid("participating clients hold no data"));
    }
    let weight = |u: &ClientUpdate<T>| T::lit(sizes[u.client] as f64 / total as f64);
    let p = global.param_count();
    match cfg.method {
        Method::Fedavg | Method::Fedprox => {
            let mut next = vec![T::zero(); p];
            for u in updates {
                let pk = weight(u);
                for (n, &w) in next.iter_mut().zip(u.weights.params()) {
                    *n += pk * w;
                }
            }
            global.params_mut().copy_from_slice(&next);
        }
        Method::Fednova => {
            let tau_eff: T = updates
                .iter()
                .map(|u| weight(u) * T::lit(u.steps as f64))
                .sum();
            let mut direction = vec![T::zero(); p];
            for u in updates.iter().filter(|u| u.steps > 0) {
                let coef = weight(u) / T::lit(u.steps as f64);
                for ((dir, &w), &wk) in direction
                    .iter_mut()
                    .zip(global.params())
                    .zip(u.weights.params())
                {
                    *dir += coef * (w - wk);
                }
            }
            for (w, &dir) in global.params_mut().iter_mut().zip(&direction) {
                *w -= tau_eff * dir;
            }
        }
        Method::Scaffold => {
            let lr_g = T::lit(cfg.scaffold_server_lr);
            let frac = T::lit(updates.len() as f64 / cfg.num_clients as f64);
            let mut delta_w = vec![T::zero(); p];
            let mut delta_c = vec![T::zero(); p];
            for u in updates {
                let pk = weight(u);
                for ((dw, &wk), &w) in delta_w
                    .iter_mut()
                    .zip(u.weights.params())
                    .zip(global.params())
                {
                    *dw += pk * (wk - w);
                }
                let new_c = u
                    .control
                    .as_ref()
                    .expect("scaffold updates carry control variates");
                for ((dc, &nc), &oc) in delta_c.iter_mut().zip(new_c).zip(&client_c[u.client]) {
                    *dc += pk * (nc - oc);
                }
            }
            for (w, &dw) in global.params_mut().iter_mut().zip(&delta_w) {
                *w += lr_g * dw;
            }
            for (c, &dc) in server_c.iter_mut().zip(&delta_c) {
                *c += frac * dc;
            }
            for u in updates {
                client_c[u.client] = u.control.clone().expect("control variate");
            }
        }
        m => return Err(invalid(format!("{m} does not aggregate models"))),
    }
    if !global.is_finite() {
        return Err(Error::NonFinite {
            context: "aggregated global model".into(),
        });
    }
    Ok(())
}
