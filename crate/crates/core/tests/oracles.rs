//! Library results checked against independent reference computations.

mod common;

use common::*;
use molex_core::efpca::{fit_efpca, EfpcaConfig};
use molex_core::explain::effective_weight;
use molex_core::linear::{
    logistic_fit, logistic_objective, ols_fit, LogisticConfig, LogisticModel,
};
use molex_core::spline::{assemble_g, build_basis, curve_coeffs, sample_points};
use molex_core::vib::{vib_train, vib_transform, Example, VibTrainConfig};
use molex_core::Exec;
use nalgebra::{DMatrix, DVector};

fn to_rows(m: &DMatrix<f64>) -> Mat {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[test]
fn vib_gradient_small_example() {
    let mut r = rng(1);
    let model = random_vib(&mut r, 3, 2, 2, 0.1);
    let batch: Vec<Example> = (0..4)
        .map(|i| Example {
            x: normals(&mut r, 3),
            y: i % 2,
        })
        .collect();
    let eps: Vec<Vec<f64>> = (0..4).map(|_| normals(&mut r, 2)).collect();
    let err = vib_gradient_error(&model, &batch, &eps, 1e-5);
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn vib_separates_blobs() {
    let mut r = rng(2);
    let centers = [[3.0, 0.0, 0.0, 0.0], [-3.0, 0.0, 0.0, 0.0]];
    let data: Vec<Example> = (0..120)
        .map(|i| {
            let c = centers[i % 2];
            Example {
                x: c.iter().map(|v| v + 0.5 * normal(&mut r)).collect(),
                y: i % 2,
            }
        })
        .collect();
    let config = VibTrainConfig {
        epochs: 40,
        seed: 3,
        ..VibTrainConfig::default()
    };
    let fit = vib_train(&data, 2, &config, 0.01).unwrap();
    let first = fit.loss_trace[..5].iter().sum::<f64>() / 5.0;
    let last = fit.loss_trace[fit.loss_trace.len() - 5..]
        .iter()
        .sum::<f64>()
        / 5.0;
    assert!(last < first, "loss went from {first} to {last}");

    let latent: Vec<Vec<f64>> = data
        .iter()
        .map(|e| vib_transform(&fit.model, &e.x).unwrap())
        .collect();
    let mean = |class: usize| -> Vec<f64> {
        let rows: Vec<&Vec<f64>> = latent
            .iter()
            .zip(&data)
            .filter(|(_, e)| e.y == class)
            .map(|(l, _)| l)
            .collect();
        (0..2)
            .map(|j| rows.iter().map(|v| v[j]).sum::<f64>() / rows.len() as f64)
            .collect()
    };
    let (m0, m1) = (mean(0), mean(1));
    let between = m0
        .iter()
        .zip(&m1)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let within = latent
        .iter()
        .zip(&data)
        .map(|(v, e)| {
            let m = if e.y == 0 { &m0 } else { &m1 };
            v.iter()
                .zip(m)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / latent.len() as f64;
    assert!(between > 2.0 * within, "between {between}, within {within}");
}

#[test]
fn curve_coefficients_match_normal_equations() {
    for degree in 0..=3 {
        let basis = build_basis(degree, 7).unwrap();
        let ts = sample_points(19);
        let y: Vec<f64> = ts.iter().map(|t| (5.0 * t).sin() + t.exp()).collect();
        let design: Mat = ts.iter().map(|&t| basis.eval(t, 0)).collect();
        let expected = normal_equations(&design, &y);
        let got = curve_coeffs(&basis, &y).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9, "degree {degree}: {a} vs {b}");
        }
    }
}

#[test]
fn roughness_matrix_is_positive_definite() {
    for degree in 0..=3 {
        for gamma in [0.0, 1e-4, 1e-1] {
            let basis = build_basis(degree, 9).unwrap();
            let g = assemble_g(&basis, gamma).unwrap();
            let (vals, _) = jacobi_eigen(&to_rows(&g));
            let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(
                min > 0.0,
                "degree {degree}, gamma {gamma}: min eigenvalue {min}"
            );
        }
    }
}

#[test]
fn efpca_matches_dense_generalized_eigenproblem() {
    let mut r = rng(4);
    let curves: Vec<Vec<f64>> = (0..50).map(|_| normals(&mut r, 12)).collect();
    let config = EfpcaConfig {
        components: 5,
        p: Some(10),
        gamma: 1e-3,
        ..EfpcaConfig::default()
    };
    let model = fit_efpca(&curves, &config, Exec::Sequential).unwrap();
    let g = to_rows(&model.g.to_matrix().unwrap());
    let q = to_rows(&model.q.to_matrix().unwrap());
    let oracle = generalized_eigenvalues(&g, &q);
    for (k, v) in model.variances.0.iter().enumerate() {
        assert!(
            (v - oracle[k]).abs() <= 1e-8 * oracle[k],
            "component {k}: {v} vs {}",
            oracle[k]
        );
        let a: Vec<f64> = model.component(k).iter().copied().collect();
        let qa = matvec(&q, &a);
        let ga = matvec(&g, &a);
        for (x, y) in qa.iter().zip(&ga) {
            assert!((x - v * y).abs() < 1e-8 * (1.0 + v), "Qa != lambda Ga");
        }
    }
}

fn restricted_top(g: &Mat, q: &Mat, support: &[usize]) -> f64 {
    let pick = |m: &Mat| -> Mat {
        support
            .iter()
            .map(|&i| support.iter().map(|&j| m[i][j]).collect())
            .collect()
    };
    generalized_eigenvalues(&pick(g), &pick(q))[0]
}

#[test]
fn sparse_first_component_against_support_enumeration() {
    // Piecewise-constant basis on p equal intervals, so support length is |S| / p.
    let mut r = rng(5);
    for trial in 0..12 {
        let p = 4 + trial % 5;
        let k = 2 * p;
        let scales: Vec<f64> = (0..p).map(|_| uniform(&mut r, 0.1, 2.0)).collect();
        let curves: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let amps: Vec<f64> = scales.iter().map(|s| s * normal(&mut r)).collect();
                (0..k).map(|j| amps[(j * p / k).min(p - 1)]).collect()
            })
            .collect();
        let rho = [0.05, 0.2, 0.5][trial % 3];
        let config = EfpcaConfig {
            components: 1,
            degree: 0,
            p: Some(p),
            gamma: 0.0,
            rho,
            ..EfpcaConfig::default()
        };
        let model = fit_efpca(&curves, &config, Exec::Sequential).unwrap();
        let g = to_rows(&model.g.to_matrix().unwrap());
        let q = to_rows(&model.q.to_matrix().unwrap());

        let mut best = f64::NEG_INFINITY;
        for mask in 1u32..(1 << p) {
            let support: Vec<usize> = (0..p).filter(|i| mask & (1 << i) != 0).collect();
            let objective =
                restricted_top(&g, &q, &support) - rho * support.len() as f64 / p as f64;
            best = best.max(objective);
        }
        let a = model.component(0);
        let support: Vec<usize> = (0..p).filter(|&i| a[i] != 0.0).collect();
        let own = restricted_top(&g, &q, &support);
        let achieved = model.variances.0[0] - rho * model.supports_len.0[0];
        assert!(
            (model.variances.0[0] - own).abs() < 1e-8 * own,
            "variance is not the restricted optimum"
        );
        assert!((model.supports_len.0[0] - support.len() as f64 / p as f64).abs() < 1e-12);
        assert!(
            (achieved - best).abs() < 1e-8 * best.abs().max(1.0),
            "trial {trial}: objective {achieved} vs exhaustive {best}"
        );
    }
}

#[test]
fn logistic_beats_grid_search() {
    let mut r = rng(6);
    let features: Vec<Vec<f64>> = (0..30).map(|_| normals(&mut r, 2)).collect();
    let targets: Vec<f64> = features
        .iter()
        .map(|x| {
            f64::from(u8::from(
                0.8 * x[0] - 0.5 * x[1] + 0.3 + normal(&mut r) > 0.0,
            ))
        })
        .collect();
    let config = LogisticConfig {
        l2: 0.1,
        ..LogisticConfig::default()
    };
    let fit = logistic_fit(&features, &targets, &config).unwrap();
    let fitted = logistic_objective(&fit, &features, &targets);

    let grid: Vec<f64> = (0..41).map(|i| -2.0 + 0.1 * i as f64).collect();
    let mut best = (f64::INFINITY, [0.0; 3]);
    for &w0 in &grid {
        for &w1 in &grid {
            for &b in &grid {
                let mut m = LogisticModel::new(vec![w0, w1], b);
                m.l2 = config.l2;
                let v = logistic_objective(&m, &features, &targets);
                if v < best.0 {
                    best = (v, [w0, w1, b]);
                }
            }
        }
    }
    assert!(fitted <= best.0 + 1e-12, "fit {fitted} vs grid {}", best.0);
    let params = [fit.w.0[0], fit.w.0[1], fit.b];
    for (a, b) in params.iter().zip(&best.1) {
        assert!(
            (a - b).abs() <= 0.1,
            "fit {params:?} far from grid argmin {:?}",
            best.1
        );
    }
}

#[test]
fn ols_matches_normal_equations() {
    let x: Mat = vec![
        vec![1.0, 0.5],
        vec![2.0, -1.0],
        vec![0.0, 1.5],
        vec![-1.0, 2.0],
        vec![3.0, 0.0],
        vec![1.5, 1.0],
    ];
    let y = [1.2, 0.4, 2.9, 3.1, 2.2, 2.8];
    let w = normal_equations(&x, &y);
    let rss: f64 = x
        .iter()
        .zip(&y)
        .map(|(row, yi)| (yi - dot(row, &w)).powi(2))
        .sum();
    let inv = inverse(&matmul(&transpose(&x), &x));

    let fit = ols_fit(
        &DMatrix::from_fn(6, 2, |i, j| x[i][j]),
        &DVector::from_column_slice(&y),
    )
    .unwrap();
    for j in 0..2 {
        assert!((fit.w_hat.0[j] - w[j]).abs() < 1e-12);
    }
    assert!((fit.sigma2_hat.unwrap() - rss / 4.0).abs() < 1e-12);
    let got = fit.xtx_inv.to_matrix().unwrap();
    for i in 0..2 {
        for j in 0..2 {
            assert!((got[(i, j)] - inv[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn effective_weight_is_the_adjoint() {
    let mut r = rng(7);
    let (rows, d) = (7, 5);
    let t = DMatrix::from_fn(rows, d, |_, _| normal(&mut r));
    let offset = DVector::from_vec(normals(&mut r, rows));
    let w = DVector::from_vec(normals(&mut r, rows));
    let eff = effective_weight(&t, &offset, &w, 0.3).unwrap();
    let t_rows = to_rows(&t);
    for _ in 0..100 {
        let e = normals(&mut r, d);
        let mapped: Vec<f64> = matvec(&t_rows, &e)
            .iter()
            .zip(offset.iter())
            .map(|(a, b)| a + b)
            .collect();
        let direct = dot(w.as_slice(), &mapped) + 0.3;
        assert!((eff.logit(&e) - direct).abs() < 1e-10 * direct.abs().max(1.0));
    }
}
