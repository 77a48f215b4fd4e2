use distillfed_core::data::{gen_blobs, BlobConfig};
use distillfed_core::distill::{distill_kip, DistillConfig};
use distillfed_core::federation::{
    aggregate_distilled, apply_stragglers, run, run_fedd3, run_fl, FedConfig, PartitionMode, Shots,
};
use distillfed_core::kernel::KernelSpec;
use distillfed_core::metrics::{distilled_bits, Method, PixelFormat};
use distillfed_core::model::{evaluate, loss_grad, mlp_init, Regularizer, TrainConfig};
use distillfed_core::{Dataset64, RunReport64};

fn blobs(per_class: usize, seed: u64) -> (Dataset64, Dataset64) {
    let cfg = BlobConfig {
        num_classes: 10,
        dim: 16,
        points_per_class: per_class,
        center_spread: 1.0,
        within_std: 1.0,
        seed,
    };
    gen_blobs::<f64>(&cfg)
        .unwrap()
        .stratified_split(0.2, seed)
        .unwrap()
}

fn config(method: Method, m: usize) -> FedConfig {
    let mut c = FedConfig::new(method, m);
    c.server = TrainConfig::new(100, 0.01);
    c.distill.kernel = KernelSpec::rbf(2.0);
    c.distill.max_epochs = 50;
    c
}

fn payload(r: &RunReport64) -> serde_json::Value {
    let mut v = serde_json::to_value(r).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_secs");
    v
}

#[test]
fn fedd3_is_one_shot() {
    let (train, test) = blobs(40, 1);
    let mut c = config(Method::Fedd3Kip, 5);
    c.partition = PartitionMode::Pathological(2);
    let r = run_fedd3(&c, &train, &test).unwrap();
    assert_eq!(r.ledger.len(), 1);
    assert_eq!(r.test_accuracy.len(), 1);
    assert_eq!(r.distilled_points, 10);
    let expected: u64 = 5 * distilled_bits(2, 16, PixelFormat::default(), 10).unwrap();
    assert_eq!(r.ledger.total_uplink_bits(), expected);
    assert_eq!(r.ledger.total_downlink_bits(), 0);
    assert_eq!(r.distill_stats.len(), 5);
    assert!((0.0..=1.0).contains(&r.final_accuracy()));
}

#[test]
fn ledger_counts_only_survivors() {
    let (train, test) = blobs(40, 2);
    let mut c = config(Method::Fedd3Coreset, 10);
    c.straggler_drop_rate = 0.5;
    c.seed = 3;
    let r = run_fedd3(&c, &train, &test).unwrap();
    let all: Vec<usize> = (0..10).collect();
    let expected = apply_stragglers(&all, 0.5, 1, 3).unwrap();
    assert_eq!(r.participants[0], expected);
    assert_eq!(
        r.ledger.rounds()[0].client_uplink_bits.len(),
        expected.len()
    );
    let owners: std::collections::BTreeSet<usize> =
        r.distill_stats.iter().map(|s| s.client_id).collect();
    assert_eq!(owners.into_iter().collect::<Vec<_>>(), expected);
    let bits = distilled_bits(r.distilled_points, 16, PixelFormat::default(), 10).unwrap();
    assert_eq!(r.ledger.total_uplink_bits(), bits);
}

#[test]
fn everyone_dropped_leaves_an_empty_round() {
    let (train, test) = blobs(20, 3);
    let mut c = config(Method::Fedavg, 1);
    c.straggler_drop_rate = 0.999_999;
    let r = run_fl(&c, &train, &test).unwrap();
    assert_eq!(r.ledger.len(), 1);
    assert_eq!(r.ledger.total_uplink_bits(), 0);
    assert!(r.participants[0].is_empty());
    let init = mlp_init(&c.model_spec(16, 10)).unwrap();
    assert_eq!(r.final_weights, init);
}

#[test]
fn straggler_survival_rate() {
    let clients: Vec<usize> = (0..10).collect();
    let survived: usize = (1..=100)
        .map(|round| apply_stragglers(&clients, 0.3, round, 17).unwrap().len())
        .sum();
    let frac = survived as f64 / 1000.0;
    assert!((frac - 0.7).abs() <= 0.03, "{frac}");
}

#[test]
fn aggregation_orders_by_client() {
    let (train, _) = blobs(20, 4);
    let cfg = DistillConfig {
        imgs_per_class: 1,
        max_epochs: 2,
        kernel: KernelSpec::rbf(2.0),
        ..Default::default()
    };
    let p = PartitionMode::Pathological(2).apply(&train, 10, 0).unwrap();
    let uploads: Vec<_> = (0..10)
        .map(|k| distill_kip(k, &p.client_data(&train, k), &cfg).unwrap())
        .collect();
    let agg = aggregate_distilled(&uploads).unwrap();
    assert_eq!(agg.len(), 20);
    assert!(agg.owners.windows(2).all(|w| w[0] <= w[1]));

    let mut reversed = uploads.clone();
    reversed.reverse();
    assert_eq!(aggregate_distilled(&reversed).unwrap(), agg);
    assert_eq!(aggregate_distilled(&uploads[3..4]).unwrap(), uploads[3]);

    let mut bad = uploads[0].clone();
    bad.points = distillfed_core::Matrix64::zeros(bad.len(), 3);
    assert!(aggregate_distilled(&[uploads[1].clone(), bad]).is_err());
    assert!(aggregate_distilled::<f64>(&[]).is_err());
}

#[test]
fn full_batch_fedavg_equals_centralized_step() {
    let (train, test) = blobs(20, 5);
    let mut c = config(Method::Fedavg, 4);
    c.local = TrainConfig {
        batch_size: 10_000,
        ..TrainConfig::new(1, 0.1)
    };
    let r = run_fl(&c, &train, &test).unwrap();
    let w0 = mlp_init(&c.model_spec(16, 10)).unwrap();
    let (_, g) = loss_grad(
        &w0,
        train.features(),
        &train.one_hot(),
        &Regularizer::none(),
    )
    .unwrap();
    for ((&w, &g), &got) in w0.params().iter().zip(&g).zip(r.final_weights.params()) {
        assert!((w - 0.1 * g - got).abs() < 1e-12);
    }
}

#[test]
fn fedprox_without_prox_is_fedavg() {
    let (train, test) = blobs(30, 6);
    let mut avg = config(Method::Fedavg, 3);
    avg.shots = Shots::MultiShot(3);
    avg.partition = PartitionMode::Pathological(4);
    let mut prox = avg.clone();
    prox.method = Method::Fedprox;
    prox.prox_mu = 0.0;
    let a = run_fl(&avg, &train, &test).unwrap();
    let b = run_fl(&prox, &train, &test).unwrap();
    assert_eq!(a.final_weights, b.final_weights);
    assert_eq!(a.test_accuracy, b.test_accuracy);
    prox.prox_mu = 0.1;
    assert_ne!(
        run_fl(&prox, &train, &test).unwrap().final_weights,
        a.final_weights
    );
}

#[test]
fn fednova_with_equal_steps_is_fedavg() {
    let (train, test) = blobs(25, 7);
    let mut avg = config(Method::Fedavg, 4);
    avg.shots = Shots::MultiShot(2);
    let mut nova = avg.clone();
    nova.method = Method::Fednova;
    let a = run_fl(&avg, &train, &test).unwrap();
    let b = run_fl(&nova, &train, &test).unwrap();
    for (x, y) in a
        .final_weights
        .params()
        .iter()
        .zip(b.final_weights.params())
    {
        assert!((x - y).abs() < 1e-12);
    }
    let p = a.final_weights.param_count() as u64 * 32;
    assert_eq!(b.ledger.rounds()[0].client_uplink_bits, vec![p + 8; 4]);
}

#[test]
fn single_client_baselines_fit_the_data() {
    let (train, _) = blobs(100, 8);
    for method in [
        Method::Fedavg,
        Method::Fedprox,
        Method::Fednova,
        Method::Scaffold,
    ] {
        let mut c = config(method, 1);
        c.local = TrainConfig::new(10, 0.01);
        c.shots = Shots::MultiShot(5);
        let r = run_fl(&c, &train, &train).unwrap();
        assert!(
            r.final_accuracy() >= 0.95,
            "{method}: {}",
            r.final_accuracy()
        );
        assert_eq!(r.ledger.len(), 5);
    }
}

#[test]
fn degenerate_coreset_matches_centralized_training() {
    let (train, test) = blobs(40, 9);
    let mut c = config(Method::Fedd3Coreset, 1);
    c.distill.imgs_per_class = 32;
    let r = run_fedd3(&c, &train, &test).unwrap();
    assert_eq!(r.distilled_points, train.len());

    let mut central = c.clone();
    central.method = Method::Fedavg;
    central.local = c.server.clone();
    let base = run_fl(&central, &train, &test).unwrap();
    assert!((r.final_accuracy() - base.final_accuracy()).abs() <= 0.05);
}

#[test]
fn hybrid_single_client_is_fedavg() {
    let (train, test) = blobs(20, 10);
    let mut c = config(Method::Fedavg, 1);
    c.shots = Shots::MultiShot(2);
    let plain = run(&c, &train, &test).unwrap();
    c.hybrid = true;
    let hybrid = run(&c, &train, &test).unwrap();
    assert!(hybrid.hybrid);
    assert_eq!(plain.final_weights, hybrid.final_weights);
}

#[test]
fn hybrid_ledger_carries_the_distilled_exchange() {
    let (train, test) = blobs(30, 11);
    let mut c = config(Method::Fedavg, 4);
    c.shots = Shots::MultiShot(3);
    c.partition = PartitionMode::Pathological(3);
    let plain = run(&c, &train, &test).unwrap();
    c.hybrid = true;
    let hybrid = run(&c, &train, &test).unwrap();
    let per_client = distilled_bits(3, 16, PixelFormat::default(), 10).unwrap();
    let rounds = hybrid.ledger.rounds();
    assert_eq!(
        rounds[0].uplink_bits,
        plain.ledger.rounds()[0].uplink_bits + 4 * per_client
    );
    assert_eq!(rounds[1], plain.ledger.rounds()[1]);
    assert_eq!(
        rounds[0].downlink_bits,
        plain.ledger.rounds()[0].downlink_bits + 4 * 3 * per_client
    );
    assert_eq!(hybrid.distilled_points, 12);
}

#[test]
fn hybrid_costs_little_on_iid_data() {
    let mut plain_acc = Vec::new();
    let mut hybrid_acc = Vec::new();
    for seed in 0..3 {
        let (train, test) = blobs(100, seed);
        let mut c = config(Method::Fedavg, 5);
        c.seed = seed;
        c.shots = Shots::MultiShot(5);
        plain_acc.push(run(&c, &train, &test).unwrap().final_accuracy());
        c.hybrid = true;
        hybrid_acc.push(run(&c, &train, &test).unwrap().final_accuracy());
    }
    plain_acc.sort_by(f64::total_cmp);
    hybrid_acc.sort_by(f64::total_cmp);
    assert!(
        (plain_acc[1] - hybrid_acc[1]).abs() <= 0.03,
        "{plain_acc:?} {hybrid_acc:?}"
    );
}

#[test]
fn non_finite_clients_are_excluded() {
    let (train, test) = blobs(20, 12);
    let mut c = config(Method::Fedavg, 2);
    c.local = TrainConfig::new(5, 1e200);
    let r = run_fl(&c, &train, &test).unwrap();
    assert_eq!(r.failed[0], vec![0, 1]);
    assert!(r.participants[0].is_empty());
    assert_eq!(r.ledger.total_uplink_bits(), 0);
    assert_eq!(r.final_weights, mlp_init(&c.model_spec(16, 10)).unwrap());
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let (train, test) = blobs(30, 13);
    let cases = [
        (Method::Fedd3Kip, Shots::OneShot),
        (Method::Scaffold, Shots::MultiShot(2)),
        (Method::Fednova, Shots::MultiShot(2)),
    ];
    for (method, shots) in cases {
        let mut c = config(method, 5);
        c.shots = shots;
        c.partition = PartitionMode::Pathological(2);
        c.seed = 99;
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let a = one.install(|| run(&c, &train, &test)).unwrap();
        let b = four.install(|| run(&c, &train, &test)).unwrap();
        assert_eq!(payload(&a), payload(&b), "{method}");
        assert_eq!(a.config, c);
    }
}

#[test]
fn f32_pipeline_runs() {
    let (train, test) = blobs(30, 14);
    let (train, test) = (train.cast::<f32>(), test.cast::<f32>());
    let mut c = config(Method::Fedd3Kip, 3);
    c.distill.imgs_per_class = 2;
    let r = run(&c, &train, &test).unwrap();
    assert!(r.final_accuracy() > 0.3);
    assert!(evaluate(&r.final_weights, &test).unwrap() == r.final_accuracy());
}

#[test]
fn invalid_configs_are_rejected() {
    let (train, test) = blobs(10, 15);
    let mut c = config(Method::Fedavg, 0);
    assert!(run(&c, &train, &test).is_err());
    c.num_clients = 2;
    c.shots = Shots::MultiShot(0);
    assert!(run(&c, &train, &test).is_err());
    c.shots = Shots::OneShot;
    c.straggler_drop_rate = 1.0;
    assert!(run(&c, &train, &test).is_err());
    c.straggler_drop_rate = 0.0;
    c.partition = PartitionMode::Pathological(11);
    assert!(run(&c, &train, &test).is_err());
}
