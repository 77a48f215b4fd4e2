use super::gmm::fit_gmm_with_rng;
use super::kip::{distill_accuracy, sample_class};
use super::{DistillConfig, DistillStats, DistilledDataset, Instance};
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::seed::rng_from;

const GMM: u64 = 21;
const FALLBACK: u64 = 22;

/// Per owned class, the means of an `imgs_per_class`-component GMM. Classes
/// with fewer points than components use the jittered sampling fallback.
pub fn distill_coreset_gmm<T: Scalar>(
    client_id: usize,
    data: &Dataset<T>,
    cfg: &DistillConfig,
) -> Result<DistilledDataset<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("client dataset is empty"));
    }
    let mut rows: Vec<Vec<T>> = Vec::new();
    let mut classes = Vec::new();
    let mut iterations = 0;
    for class in data.present_classes() {
        let idx = data.indices_of_class(class);
        if idx.len() < cfg.imgs_per_class {
            let mut rng = rng_from(cfg.seed, &[FALLBACK, class as u64]);
            sample_class(data, class, cfg.imgs_per_class, &mut rng, &mut rows);
        } else {
            let pts = data.features().select_rows(&idx);
            let mut rng = rng_from(cfg.seed, &[GMM, class as u64]);
            let g = fit_gmm_with_rng(&pts, cfg.imgs_per_class, &mut rng, &cfg.gmm)?;
            iterations += g.log_likelihood.len().saturating_sub(1);
            rows.extend(g.means.row_iter().map(<[T]>::to_vec));
        }
        classes.extend(std::iter::repeat_n(class, cfg.imgs_per_class));
    }
    let mut out = DistilledDataset {
        points: Matrix::from_rows(&rows)?,
        owners: vec![client_id; classes.len()],
        classes,
        num_classes: data.num_classes(),
        stats: Vec::new(),
    };
    let acc = distill_accuracy(&out.support_set(), data, &cfg.kernel)?;
    out.stats.push(DistillStats {
        client_id,
        instance: Instance::Coreset,
        epochs: iterations,
        initial_accuracy: acc,
        final_accuracy: acc,
        last_accuracy: acc,
        loss_trace: Vec::new(),
    });
    Ok(out)
}
