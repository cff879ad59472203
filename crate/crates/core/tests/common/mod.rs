//! Reference implementations shared by the integration tests. Nothing here
//! calls into the library's linear algebra, so agreement is meaningful.
#![allow(dead_code)]

use molex_core::vib::{vib_grad, vib_loss, Example, VibModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn transpose(a: &Mat) -> Mat {
    let (r, c) = (a.len(), a[0].len());
    (0..c).map(|j| (0..r).map(|i| a[i][j]).collect()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn matvec(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Cyclic Jacobi rotations on a symmetric matrix. Returns eigenvalues and
/// eigenvectors (as columns of the second result).
pub fn jacobi_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.len();
    let mut a = a.clone();
    let mut v: Mat = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Eigenvalues of the pencil `(Q, G)`, largest first, via `G^{-1/2}`.
pub fn generalized_eigenvalues(g: &Mat, q: &Mat) -> Vec<f64> {
    let n = g.len();
    let (lam, v) = jacobi_eigen(g);
    let inv_sqrt: Mat = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| v[i][k] * v[j][k] / lam[k].sqrt()).sum())
                .collect()
        })
        .collect();
    let w = matmul(&matmul(&inv_sqrt, q), &inv_sqrt);
    let (mut mu, _) = jacobi_eigen(&w);
    mu.sort_by(|a, b| b.total_cmp(a));
    mu
}

/// Gaussian elimination with partial pivoting.
pub fn solve(a: &Mat, b: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut m: Mat = a
        .iter()
        .zip(b)
        .map(|(row, &bi)| row.iter().copied().chain([bi]).collect())
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..=n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    x
}

/// Least squares via the normal equations `X^T X w = X^T y`.
pub fn normal_equations(x: &Mat, y: &[f64]) -> Vec<f64> {
    let xt = transpose(x);
    let xtx = matmul(&xt, x);
    let xty = matvec(&xt, y);
    solve(&xtx, &xty)
}

pub fn inverse(a: &Mat) -> Mat {
    let n = a.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            solve(
                a,
                &(0..n)
                    .map(|i| f64::from(u8::from(i == j)))
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    transpose(&cols)
}

/// Largest relative disagreement between the analytic VIB gradient and
/// central differences with step `h`.
pub fn vib_gradient_error(model: &VibModel, batch: &[Example], eps: &[Vec<f64>], h: f64) -> f64 {
    let analytic: Vec<f64> = vib_grad(model, batch, eps)
        .unwrap()
        .params()
        .copied()
        .collect();
    let count = analytic.len();
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let shifted = |delta: f64| {
            let mut m = model.clone();
            *m.params_mut().nth(i).unwrap() += delta;
            vib_loss(&m, batch, eps).unwrap().loss
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Random model with the given shape and parameters of order one.
pub fn random_vib(rng: &mut ChaCha8Rng, d: usize, k: usize, classes: usize, beta: f64) -> VibModel {
    let mut m = VibModel::zeros(d, k, classes, beta);
    for p in m.params_mut() {
        *p = 0.5 * normal(rng);
    }
    m
}
