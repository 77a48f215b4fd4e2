use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{DistillConfig, DistillStats, DistilledDataset, Instance};
use crate::data::{one_hot, Dataset};
use crate::error::{invalid, Error, Result};
use crate::kernel::{kip_loss_grad, krr_predict, KernelSpec, SupportSet};
use crate::linalg::{argmax, Matrix};
use crate::scalar::Scalar;
use crate::seed::{rng_from, Rng};

const JITTER_STD: f64 = 1e-3;

// substreams of the client seed
const INIT: u64 = 11;
const BATCH: u64 = 12;

/// Fraction of `data` whose label equals the argmax of the KRR prediction
/// from `support`.
pub fn distill_accuracy<T: Scalar>(
    support: &SupportSet<T>,
    data: &Dataset<T>,
    spec: &KernelSpec,
) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("distill accuracy needs a nonempty dataset"));
    }
    let pred = krr_predict(support, data.features(), spec)?;
    let hits = pred
        .row_iter()
        .zip(data.labels())
        .filter(|(r, &l)| argmax(r) == l)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Samples `per_class` points of `class` from `data` into `rows`. Classes with
/// too few points are sampled with replacement and every copy is jittered.
pub(crate) fn sample_class<T: Scalar>(
    data: &Dataset<T>,
    class: usize,
    per_class: usize,
    rng: &mut Rng,
    rows: &mut Vec<Vec<T>>,
) {
    let idx = data.indices_of_class(class);
    if idx.len() >= per_class {
        let mut picked: Vec<usize> = index::sample(rng, idx.len(), per_class)
            .into_iter()
            .map(|k| idx[k])
            .collect();
        picked.sort_unstable();
        rows.extend(picked.iter().map(|&i| data.features().row(i).to_vec()));
    } else {
        log::debug!(
            "class {class} has {} points for {per_class} slots; sampling with jitter",
            idx.len()
        );
        for _ in 0..per_class {
            let i = idx[rng.random_range(0..idx.len())];
            rows.push(
                data.features()
                    .row(i)
                    .iter()
                    .map(|&x| x + T::lit(JITTER_STD * rng.sample::<f64, _>(StandardNormal)))
                    .collect(),
            );
        }
    }
}

/// Seeded subset of `imgs_per_class` real points for every class present in
/// the client data, classes ascending.
pub fn init_support<T: Scalar>(
    client_id: usize,
    data: &Dataset<T>,
    cfg: &DistillConfig,
) -> Result<DistilledDataset<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("client dataset is empty"));
    }
    let mut rng = rng_from(cfg.seed, &[INIT]);
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    for class in data.present_classes() {
        sample_class(data, class, cfg.imgs_per_class, &mut rng, &mut rows);
        classes.extend(std::iter::repeat_n(class, cfg.imgs_per_class));
    }
    Ok(DistilledDataset {
        points: Matrix::from_rows(&rows)?,
        owners: vec![client_id; classes.len()],
        classes,
        num_classes: data.num_classes(),
        stats: Vec::new(),
    })
}

/// KIP distillation: plain gradient descent on the support points against
/// seeded target batches, full support per step, labels fixed.
///
/// Distill accuracy is evaluated on the whole local dataset after every epoch;
/// the loop stops once it reaches `acc_threshold`. The returned support is the
/// best-accuracy snapshot (the initialization included), first one on ties.
pub fn distill_kip<T: Scalar>(
    client_id: usize,
    data: &Dataset<T>,
    cfg: &DistillConfig,
) -> Result<DistilledDataset<T>> {
    let mut out = init_support(client_id, data, cfg)?;
    let spec = &cfg.kernel;
    let mut support = out.support_set();
    let n = data.len();
    let batch = ((cfg.target_batch_frac * n as f64).ceil() as usize).clamp(1, n);
    let targets = data.features();
    let target_labels: Matrix<T> = one_hot(data.labels(), data.num_classes());
    let lr = T::lit(cfg.distill_lr);

    let initial = distill_accuracy(&support, data, spec)?;
    let mut best = (initial, support.points.clone());
    let mut last = initial;
    let mut loss_trace = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(cfg.seed, &[BATCH]);
    let mut epochs = 0;
    let mut step = 0usize;

    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let xb = targets.select_rows(chunk);
            let yb = target_labels.select_rows(chunk);
            let (loss, grad) = kip_loss_grad(&support, &xb, &yb, spec).map_err(|e| match e {
                Error::NonFinite { context } => non_finite(step, &loss_trace, &context),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(non_finite(step, &loss_trace, "kip loss"));
            }
            epoch_loss += loss.as_f64();
            for (p, &g) in support
                .points
                .as_mut_slice()
                .iter_mut()
                .zip(grad.as_slice())
            {
                *p -= lr * g;
            }
            step += 1;
        }
        if !support.points.is_finite() {
            return Err(non_finite(step, &loss_trace, "support points"));
        }
        loss_trace.push(epoch_loss);
        epochs += 1;
        last = distill_accuracy(&support, data, spec)?;
        if last > best.0 {
            best = (last, support.points.clone());
        }
        if last >= cfg.acc_threshold {
            break;
        }
    }

    out.points = best.1;
    out.stats = vec![DistillStats {
        client_id,
        instance: Instance::Kip,
        epochs,
        initial_accuracy: initial,
        final_accuracy: best.0,
        last_accuracy: last,
        loss_trace,
    }];
    Ok(out)
}

fn non_finite(step: usize, trace: &[f64], what: &str) -> Error {
    let tail = &trace[trace.len().saturating_sub(5)..];
    Error::NonFinite {
        context: format!("{what} at kip step {step}; recent epoch losses {tail:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class_client() -> Dataset<f64> {
        let rows = [
            [0.0, 0.1],
            [0.2, 0.0],
            [0.1, 0.1],
            [3.0, 3.1],
            [2.9, 3.0],
            [3.2, 2.8],
        ];
        let x = Matrix::from_rows(&rows).unwrap();
        Dataset::new(x, vec![3, 3, 3, 7, 7, 7], 10).unwrap()
    }

    #[test]
    fn one_point_per_owned_class() {
        let cfg = DistillConfig::default();
        let s = init_support(5, &two_class_client(), &cfg).unwrap();
        assert_eq!(s.classes, vec![3, 7]);
        assert_eq!(s.owners, vec![5, 5]);
        let lab = s.support_set().labels;
        assert_eq!(lab[(0, 3)], 1.0);
        assert_eq!(lab[(1, 7)], 1.0);
    }

    #[test]
    fn full_class_size_takes_every_point() {
        let cfg = DistillConfig {
            imgs_per_class: 3,
            ..Default::default()
        };
        let d = two_class_client();
        let s = init_support(0, &d, &cfg).unwrap();
        assert_eq!(&s.points, d.features());
    }

    #[test]
    fn short_class_is_jittered() {
        let x = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let d = Dataset::new(x, vec![0], 2).unwrap();
        let cfg = DistillConfig {
            imgs_per_class: 2,
            ..Default::default()
        };
        let s = init_support(0, &d, &cfg).unwrap();
        assert_eq!(s.len(), 2);
        for r in s.points.row_iter() {
            let dev = r.iter().map(|v| (v - 0.5f64).abs()).fold(0.0, f64::max);
            assert!(dev > 0.0 && dev < 0.01, "{dev}");
        }
    }

    #[test]
    fn zero_learning_rate_returns_initialization() {
        let cfg = DistillConfig {
            distill_lr: 0.0,
            max_epochs: 5,
            acc_threshold: 1.0,
            ..Default::default()
        };
        let d = two_class_client();
        let init = init_support(1, &d, &cfg).unwrap();
        let out = distill_kip(1, &d, &cfg).unwrap();
        assert_eq!(out.points, init.points);
    }

    #[test]
    fn zero_threshold_stops_after_one_epoch() {
        let cfg = DistillConfig {
            acc_threshold: 0.0,
            ..Default::default()
        };
        let out = distill_kip(0, &two_class_client(), &cfg).unwrap();
        assert_eq!(out.stats[0].epochs, 1);
    }
}
