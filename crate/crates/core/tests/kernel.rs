use distillfed_core::kernel::{
    kernel_matrix, kip_grad, kip_loss, krr_predict, KernelSpec, Regularization, SupportSet,
};
use distillfed_core::seed::{rng_from, Rng};
use distillfed_core::Matrix64;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix64 {
    Matrix64::from_fn(rows, cols, |_, _| scale * (rng.random::<f64>() * 2.0 - 1.0))
}

fn random_labels(rng: &mut Rng, rows: usize, classes: usize) -> Matrix64 {
    let mut y = Matrix64::zeros(rows, classes);
    for i in 0..rows {
        y.row_mut(i)[rng.random_range(0..classes)] = 1.0;
    }
    y
}

fn to_na(m: &Matrix64) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn specs() -> Vec<KernelSpec> {
    vec![
        KernelSpec::rbf(0.8).with_regularization(Regularization::Absolute(1e-3)),
        KernelSpec::rbf(2.0).with_regularization(Regularization::TraceScaled(1e-4)),
        KernelSpec::arccos_ntk(3).with_regularization(Regularization::Absolute(1e-3)),
    ]
}

#[test]
fn prediction_matches_explicit_inverse() {
    let mut rng = rng_from(1, &[]);
    for spec in specs() {
        for _ in 0..20 {
            let n = rng.random_range(1..8);
            let d = rng.random_range(1..5);
            let s = SupportSet::new(
                random_matrix(&mut rng, n, d, 1.0),
                random_labels(&mut rng, n, 3),
            )
            .unwrap();
            let x = random_matrix(&mut rng, 6, d, 1.0);

            let k_ss = kernel_matrix(&s.points, &s.points, &spec).unwrap();
            let lambda = spec.ridge(&k_ss);
            let k_ts = to_na(&kernel_matrix(&x, &s.points, &spec).unwrap());
            let reg = to_na(&k_ss) + DMatrix::identity(n, n) * lambda;
            let expected = k_ts * reg.try_inverse().unwrap() * to_na(&s.labels);

            let got = to_na(&krr_predict(&s, &x, &spec).unwrap());
            let scale = expected.amax().max(1.0);
            assert!((got - expected).amax() / scale < 1e-9);
        }
    }
}

#[test]
fn rbf_gradient_matches_central_differences() {
    let mut rng = rng_from(2, &[]);
    let mut worst: f64 = 0.0;
    for case in 0..60 {
        let n = rng.random_range(1..5);
        let d = rng.random_range(1..4);
        let spec = KernelSpec::rbf(0.5 + rng.random::<f64>() * 1.5).with_regularization(
            Regularization::Absolute(10f64.powf(-rng.random_range(1.0..3.0))),
        );
        let s = SupportSet::new(
            random_matrix(&mut rng, n, d, 1.0),
            random_labels(&mut rng, n, 2),
        )
        .unwrap();
        let x = random_matrix(&mut rng, 7, d, 1.0);
        let y = random_labels(&mut rng, 7, 2);

        let g = kip_grad(&s, &x, &y, &spec).unwrap();
        let h = 1e-5;
        let mut fd = Matrix64::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                let mut plus = s.clone();
                plus.points.row_mut(i)[j] += h;
                let mut minus = s.clone();
                minus.points.row_mut(i)[j] -= h;
                fd.row_mut(i)[j] = (kip_loss(&plus, &x, &y, &spec).unwrap()
                    - kip_loss(&minus, &x, &y, &spec).unwrap())
                    / (2.0 * h);
            }
        }
        let scale = fd.as_slice().iter().fold(1e-8f64, |a, v| a.max(v.abs()));
        let rel = g.max_abs_diff(&fd) / scale;
        assert!(rel < 1e-4, "case {case}: relative error {rel}");
        worst = worst.max(rel);
    }
    assert!(worst.is_finite());
}

#[test]
fn ntk_gradient_agrees_with_coarser_differences() {
    let mut rng = rng_from(3, &[]);
    for _ in 0..5 {
        let spec = KernelSpec::arccos_ntk(2).with_regularization(Regularization::Absolute(1e-2));
        let s = SupportSet::new(
            random_matrix(&mut rng, 3, 3, 1.0),
            random_labels(&mut rng, 3, 2),
        )
        .unwrap();
        let x = random_matrix(&mut rng, 5, 3, 1.0);
        let y = random_labels(&mut rng, 5, 2);
        let g = kip_grad(&s, &x, &y, &spec).unwrap();
        let h = 1e-4;
        for i in 0..3 {
            for j in 0..3 {
                let mut plus = s.clone();
                plus.points.row_mut(i)[j] += h;
                let mut minus = s.clone();
                minus.points.row_mut(i)[j] -= h;
                let fd = (kip_loss(&plus, &x, &y, &spec).unwrap()
                    - kip_loss(&minus, &x, &y, &spec).unwrap())
                    / (2.0 * h);
                assert!(
                    (g[(i, j)] - fd).abs() < 1e-5 * fd.abs().max(1.0),
                    "{} vs {fd}",
                    g[(i, j)]
                );
            }
        }
    }
}

#[test]
fn gram_matrices_are_symmetric_psd() {
    let mut rng = rng_from(4, &[]);
    for spec in specs() {
        for _ in 0..10 {
            let x = random_matrix(&mut rng, 12, 4, 2.0);
            let k = kernel_matrix(&x, &x, &spec).unwrap();
            let na = to_na(&k);
            assert!((&na - na.transpose()).amax() < 1e-12);
            let min = SymmetricEigen::new(na.clone()).eigenvalues.min();
            assert!(min > -1e-10 * na.trace(), "min eigenvalue {min}");
        }
    }
}

#[test]
fn support_permutation_leaves_predictions_unchanged() {
    let mut rng = rng_from(5, &[]);
    for spec in specs() {
        let s = SupportSet::new(
            random_matrix(&mut rng, 5, 3, 1.0),
            random_labels(&mut rng, 5, 3),
        )
        .unwrap();
        let perm = [3, 0, 4, 1, 2];
        let p = SupportSet::new(s.points.select_rows(&perm), s.labels.select_rows(&perm)).unwrap();
        let x = random_matrix(&mut rng, 4, 3, 1.0);
        let a = krr_predict(&s, &x, &spec).unwrap();
        let b = krr_predict(&p, &x, &spec).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
    }
}

#[test]
fn larger_ridge_shrinks_fitted_values() {
    let mut rng = rng_from(6, &[]);
    let s = SupportSet::new(
        random_matrix(&mut rng, 6, 2, 1.0),
        random_labels(&mut rng, 6, 2),
    )
    .unwrap();
    let mut last = f64::INFINITY;
    for lambda in [1e-6, 1e-3, 1e-1, 1.0, 10.0] {
        let spec = KernelSpec::rbf(1.0).with_regularization(Regularization::Absolute(lambda));
        let norm = krr_predict(&s, &s.points, &spec).unwrap().frobenius_sq();
        assert!(norm <= last + 1e-12, "lambda {lambda}: {norm} > {last}");
        last = norm;
    }
}

#[test]
fn support_equal_to_targets_interpolates() {
    let mut rng = rng_from(7, &[]);
    let x = random_matrix(&mut rng, 10, 4, 1.0);
    let y = random_labels(&mut rng, 10, 3);
    let s = SupportSet::new(x.clone(), y.clone()).unwrap();
    let spec = KernelSpec::rbf(1.0).with_regularization(Regularization::Absolute(1e-12));
    assert!(kip_loss(&s, &x, &y, &spec).unwrap() < 1e-8);
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let a = Matrix64::zeros(2, 3);
    let b = Matrix64::zeros(2, 4);
    assert!(kernel_matrix(&a, &b, &KernelSpec::rbf(1.0)).is_err());
}
