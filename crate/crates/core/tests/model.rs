use distillfed_core::data::{gen_blobs, BlobConfig};
use distillfed_core::model::{
    evaluate, loss_grad, mlp_init, sgd_train, ModelSpec, Regularizer, TrainConfig,
};
use distillfed_core::seed::{rng_from, Rng};
use distillfed_core::{Dataset64, Matrix64, Weights64};
use rand::Rng as _;

fn random_batch(rng: &mut Rng, n: usize, d: usize, s: usize) -> (Matrix64, Matrix64) {
    let x = Matrix64::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let y = Matrix64::from_fn(n, s, |_, _| rng.random::<f64>());
    let mut y = y;
    for i in 0..n {
        let row = y.row_mut(i);
        let t: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= t);
    }
    (x, y)
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = rng_from(21, &[]);
    for case in 0..60u64 {
        let depth = rng.random_range(1..4);
        let mut widths = vec![rng.random_range(1..5)];
        for _ in 0..depth {
            widths.push(rng.random_range(2..6));
        }
        let mut w: Weights64 = mlp_init(&ModelSpec {
            widths: widths.clone(),
            seed: case,
        })
        .unwrap();
        // move biases off zero so no pre-activation sits exactly on the ReLU kink
        for v in w.params_mut() {
            *v += 0.1 * (rng.random::<f64>() - 0.5);
        }
        let (x, y) = random_batch(&mut rng, 5, widths[0], *widths.last().unwrap());
        let anchor: Weights64 = mlp_init(&ModelSpec {
            widths: widths.clone(),
            seed: case + 1000,
        })
        .unwrap();
        let correction: Vec<f64> = (0..w.param_count())
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        let reg = match case % 3 {
            0 => Regularizer::none(),
            1 => Regularizer {
                prox: Some((0.1, &anchor)),
                correction: None,
            },
            _ => Regularizer {
                prox: Some((0.3, &anchor)),
                correction: Some(&correction),
            },
        };
        let (_, g) = loss_grad(&w, &x, &y, &reg).unwrap();
        // the correction term is added to the gradient only, not to the loss
        let plain_reg = Regularizer {
            correction: None,
            ..reg
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 1e-8;
        for p in 0..w.param_count() {
            let mut plus = w.clone();
            plus.params_mut()[p] += h;
            let mut minus = w.clone();
            minus.params_mut()[p] -= h;
            let mut fd = (loss_grad(&plus, &x, &y, &plain_reg).unwrap().0
                - loss_grad(&minus, &x, &y, &plain_reg).unwrap().0)
                / (2.0 * h);
            if let Some(c) = reg.correction {
                fd += c[p];
            }
            worst = worst.max((g[p] - fd).abs());
            scale = scale.max(fd.abs());
        }
        assert!(
            worst / scale < 1e-4,
            "case {case} widths {widths:?}: {}",
            worst / scale
        );
    }
}

#[test]
fn he_init_statistics() {
    let w: Weights64 = mlp_init(&ModelSpec {
        widths: vec![400, 300],
        seed: 5,
    })
    .unwrap();
    let (weights, bias) = w.layer(0);
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let var = weights.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.01);
    assert!((var.sqrt() / (2.0f64 / 400.0).sqrt() - 1.0).abs() < 0.02);
    assert!(bias.iter().all(|&b| b == 0.0));
}

#[test]
fn centralized_training_fits_blobs() {
    let cfg = BlobConfig {
        num_classes: 10,
        dim: 16,
        points_per_class: 100,
        center_spread: 1.0,
        within_std: 1.0,
        seed: 0,
    };
    let data: Dataset64 = gen_blobs(&cfg).unwrap();
    let w = mlp_init(&ModelSpec {
        widths: vec![16, 64, 10],
        seed: 0,
    })
    .unwrap();
    let out = sgd_train(
        &w,
        data.features(),
        &data.one_hot(),
        &TrainConfig::new(50, 0.01),
        &Regularizer::none(),
    )
    .unwrap();
    let acc = evaluate(&out.weights, &data).unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
    assert!(out.loss_trace.last().unwrap() < out.loss_trace.first().unwrap());
}

#[test]
fn f32_training_tracks_f64() {
    let cfg = BlobConfig {
        num_classes: 3,
        dim: 4,
        points_per_class: 30,
        center_spread: 2.0,
        within_std: 0.5,
        seed: 1,
    };
    let d64: Dataset64 = gen_blobs(&cfg).unwrap();
    let d32 = d64.cast::<f32>();
    let spec = ModelSpec {
        widths: vec![4, 8, 3],
        seed: 2,
    };
    let tc = TrainConfig::new(5, 0.05);
    let a = sgd_train(
        &mlp_init::<f64>(&spec).unwrap(),
        d64.features(),
        &d64.one_hot(),
        &tc,
        &Regularizer::none(),
    )
    .unwrap();
    let b = sgd_train(
        &mlp_init::<f32>(&spec).unwrap(),
        d32.features(),
        &d32.one_hot(),
        &tc,
        &Regularizer::none(),
    )
    .unwrap();
    for (x, y) in a.weights.params().iter().zip(b.weights.params()) {
        assert!((x - f64::from(*y)).abs() < 1e-3);
    }
}
