//! Diagonal-covariance Gaussian mixture fitted by EM.

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{sq_dist, Matrix};
use crate::scalar::Scalar;
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub eps_floor: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            eps_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel<T> {
    pub means: Matrix<T>,
    /// Per-component, per-dimension variances.
    pub variances: Matrix<T>,
    pub weights: Vec<T>,
    /// Total log-likelihood evaluated at the start of every EM iteration and
    /// once more after the final M-step.
    pub log_likelihood: Vec<f64>,
    /// Components re-seeded because they lost all responsibility.
    pub reseeded: usize,
}

impl<T: Scalar> GmmModel<T> {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn total_log_likelihood(&self, points: &Matrix<T>) -> f64 {
        let mut scratch = vec![T::zero(); self.components()];
        points
            .row_iter()
            .map(|x| {
                self.log_joint(x, &mut scratch);
                log_sum_exp(&scratch).as_f64()
            })
            .sum()
    }

    /// Fills `out[c] = log w_c + log N(x | μ_c, diag σ²_c)`.
    fn log_joint(&self, x: &[T], out: &mut [T]) {
        let half = T::lit(0.5);
        let log_2pi = T::lit((2.0 * std::f64::consts::PI).ln());
        for (c, o) in out.iter_mut().enumerate() {
            let mu = self.means.row(c);
            let var = self.variances.row(c);
            let mut acc = T::zero();
            for ((&xi, &m), &v) in x.iter().zip(mu).zip(var) {
                let d = xi - m;
                acc += d * d / v + v.ln() + log_2pi;
            }
            *o = self.weights[c].ln() - half * acc;
        }
    }
}

fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

/// k-means++ seeding: the first center is uniform, each further center is
/// drawn with probability proportional to the squared distance to the nearest
/// chosen center (uniform when every distance is zero).
fn kmeanspp<T: Scalar>(points: &Matrix<T>, m: usize, rng: &mut Rng) -> Vec<usize> {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = points
        .row_iter()
        .map(|r| sq_dist(r, points.row(chosen[0])).as_f64())
        .collect();
    while chosen.len() < m {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (d, r) in nearest.iter_mut().zip(points.row_iter()) {
            *d = d.min(sq_dist(r, points.row(next)).as_f64());
        }
    }
    chosen
}

/// Seeded k-means++ initialization followed by EM until the log-likelihood
/// gain drops below `tol` or `max_iter` M-steps have run.
pub fn fit_gmm<T: Scalar>(
    points: &Matrix<T>,
    m: usize,
    seed: u64,
    opts: &GmmOptions,
) -> Result<GmmModel<T>> {
    fit_gmm_with_rng(points, m, &mut Rng::seed_from_u64(seed), opts)
}

pub fn fit_gmm_with_rng<T: Scalar>(
    points: &Matrix<T>,
    m: usize,
    rng: &mut Rng,
    opts: &GmmOptions,
) -> Result<GmmModel<T>> {
    let (n, d) = (points.rows(), points.cols());
    if m == 0 {
        return Err(invalid("gmm needs at least one component"));
    }
    if n < m {
        return Err(invalid(format!(
            "gmm with {m} components needs >= {m} points, got {n}"
        )));
    }
    if !(opts.eps_floor > 0.0) {
        return Err(invalid("gmm variance floor must be positive"));
    }
    let floor = T::lit(opts.eps_floor);
    let nf = T::lit(n as f64);

    let global_mean: Vec<T> = (0..d)
        .map(|j| points.row_iter().map(|r| r[j]).sum::<T>() / nf)
        .collect();
    let global_var: Vec<T> = (0..d)
        .map(|j| {
            let v = points
                .row_iter()
                .map(|r| (r[j] - global_mean[j]) * (r[j] - global_mean[j]))
                .sum::<T>()
                / nf;
            v.max(floor)
        })
        .collect();

    let seeds = kmeanspp(points, m, rng);
    let mut model = GmmModel {
        means: points.select_rows(&seeds),
        variances: Matrix::from_fn(m, d, |_, j| global_var[j]),
        weights: vec![T::one() / T::lit(m as f64); m],
        log_likelihood: Vec::new(),
        reseeded: 0,
    };

    let mut resp = Matrix::zeros(n, m);
    let mut scratch = vec![T::zero(); m];
    for iter in 0..=opts.max_iter {
        // E-step
        let mut ll = 0.0;
        for i in 0..n {
            model.log_joint(points.row(i), &mut scratch);
            let lse = log_sum_exp(&scratch);
            ll += lse.as_f64();
            for (c, &lj) in scratch.iter().enumerate() {
                resp[(i, c)] = (lj - lse).exp();
            }
        }
        if !ll.is_finite() {
            return Err(Error::NonFinite {
                context: format!("gmm log-likelihood at iteration {iter}"),
            });
        }
        let prev = model.log_likelihood.last().copied();
        model.log_likelihood.push(ll);
        if iter == opts.max_iter {
            break;
        }
        if let Some(p) = prev {
            if ll - p < opts.tol {
                break;
            }
        }

        // M-step
        let tiny = T::lit(1e-10) * nf;
        for c in 0..m {
            let nk: T = (0..n).map(|i| resp[(i, c)]).sum();
            if nk <= tiny {
                reseed_component(&mut model, points, c, &global_var);
                continue;
            }
            for j in 0..d {
                let mu = (0..n).map(|i| resp[(i, c)] * points[(i, j)]).sum::<T>() / nk;
                let var = (0..n)
                    .map(|i| {
                        let dv = points[(i, j)] - mu;
                        resp[(i, c)] * dv * dv
                    })
                    .sum::<T>()
                    / nk;
                model.means[(c, j)] = mu;
                model.variances[(c, j)] = var.max(floor);
            }
            model.weights[c] = nk / nf;
        }
        let wsum: T = model.weights.iter().copied().sum();
        for w in &mut model.weights {
            *w /= wsum;
        }
    }
    Ok(model)
}

/// Moves an empty component onto the point farthest from every current mean.
/// Ties resolve to the lowest point index.
fn reseed_component<T: Scalar>(
    model: &mut GmmModel<T>,
    points: &Matrix<T>,
    c: usize,
    global_var: &[T],
) {
    let m = model.components();
    let mut best = (0usize, T::neg_infinity());
    for (i, r) in points.row_iter().enumerate() {
        let near = (0..m)
            .filter(|&k| k != c)
            .map(|k| sq_dist(r, model.means.row(k)))
            .fold(T::infinity(), T::min);
        if near > best.1 {
            best = (i, near);
        }
    }
    model.means.row_mut(c).copy_from_slice(points.row(best.0));
    model.variances.row_mut(c).copy_from_slice(global_var);
    model.weights[c] = T::one() / T::lit(points.rows() as f64);
    model.reseeded += 1;
    log::debug!("gmm component {c} re-seeded at point {}", best.0);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_component_is_closed_form() {
        let pts = Matrix::from_rows(&[[0.0, 1.0], [2.0, 1.0], [4.0, 1.0]]).unwrap();
        let g = fit_gmm(&pts, 1, 0, &GmmOptions::default()).unwrap();
        assert!((g.means[(0, 0)] - 2.0f64).abs() < 1e-12);
        assert!((g.means[(0, 1)] - 1.0f64).abs() < 1e-12);
        assert!((g.variances[(0, 0)] - 8.0f64 / 3.0).abs() < 1e-12);
        assert_eq!(g.variances[(0, 1)], 1e-6);
        assert_eq!(g.weights, vec![1.0]);
    }

    #[test]
    fn too_few_points() {
        let pts = Matrix::<f64>::zeros(2, 1);
        assert!(fit_gmm(&pts, 3, 0, &GmmOptions::default()).is_err());
    }

    #[test]
    fn identical_points_collapse() {
        let pts = Matrix::from_fn(5, 3, |_, j| 0.25 * j as f64);
        let g = fit_gmm(&pts, 1, 1, &GmmOptions::default()).unwrap();
        for j in 0..3 {
            assert!((g.means[(0, j)] - 0.25 * j as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_clusters_trigger_reseed_path() {
        // three identical points and a two-component fit: responsibilities
        // stay split, weights still sum to one
        let pts = Matrix::from_fn(3, 1, |_, _| 1.0);
        let g = fit_gmm(&pts, 2, 3, &GmmOptions::default()).unwrap();
        let s: f64 = g.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}
