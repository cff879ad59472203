//! Explainable linear models: L2-regularised logistic regression, ordinary
//! least squares with its covariance, and the orthogonal split of whitened
//! features into an explainable part and a residual part.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::codec::{Block, MatrixBlock};
use crate::efpca::{gram_schmidt, orthonormal_complement, EfpcaModel};
use crate::error::{MolexError, Result};

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + exp(z))` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean binary cross-entropy of logits against 0/1 targets.
pub fn log_loss(logits: &[f64], targets: &[f64]) -> f64 {
    let n = logits.len().max(1) as f64;
    logits
        .iter()
        .zip(targets)
        .map(|(z, y)| softplus(*z) - y * z)
        .sum::<f64>()
        / n
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticModel {
    pub w: Block,
    pub b: f64,
    pub l2: f64,
    /// Set when the gradient norm reached the tolerance.
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LogisticModel {
    pub fn new(w: Vec<f64>, b: f64) -> Self {
        LogisticModel {
            w: Block(w),
            b,
            l2: 0.0,
            converged: true,
            iterations: 0,
            grad_norm: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.0.len()
    }

    pub fn decision(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.dim() {
            return Err(MolexError::Argument(format!(
                "expected {} features, got {}",
                self.dim(),
                features.len()
            )));
        }
        Ok(dot(&self.w.0, features) + self.b)
    }
}

pub fn logistic_predict(model: &LogisticModel, features: &[f64]) -> Result<f64> {
    Ok(sigmoid(model.decision(features)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    pub l2: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            l2: 1e-4,
            tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

impl LogisticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 > 0.0 && self.l2.is_finite()) {
            return Err(MolexError::Config("logistic l2 must be positive".into()));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(MolexError::Config(
                "logistic tol and max_iter must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn check_binary(features: &[Vec<f64>], targets: &[f64]) -> Result<usize> {
    if features.len() != targets.len() {
        return Err(MolexError::Argument(
            "features and targets differ in length".into(),
        ));
    }
    let d = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| MolexError::Data("empty training set".into()))?;
    if features.iter().any(|f| f.len() != d) {
        return Err(MolexError::Argument("ragged feature rows".into()));
    }
    if targets.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(MolexError::Argument("targets must be 0 or 1".into()));
    }
    Ok(d)
}

struct Objective<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    l2: f64,
}

impl Objective<'_> {
    fn value(&self, w: &[f64], b: f64) -> f64 {
        let logits: Vec<f64> = self.x.iter().map(|f| dot(w, f) + b).collect();
        log_loss(&logits, self.y) + 0.5 * self.l2 * dot(w, w)
    }

    /// Gradient with respect to `(w, b)`; the bias is last.
    fn gradient(&self, w: &[f64], b: f64) -> Vec<f64> {
        let d = w.len();
        let n = self.x.len() as f64;
        let mut g = vec![0.0; d + 1];
        for (f, y) in self.x.iter().zip(self.y) {
            let r = sigmoid(dot(w, f) + b) - y;
            for (gj, fj) in g.iter_mut().zip(f) {
                *gj += r * fj;
            }
            g[d] += r;
        }
        for j in 0..d {
            g[j] = g[j] / n + self.l2 * w[j];
        }
        g[d] /= n;
        g
    }
}

/// Regularized Hessian of the objective in `(w, b)`, bias last.
fn hessian(x: &[Vec<f64>], w: &[f64], b: f64, l2: f64) -> DMatrix<f64> {
    let d = w.len();
    let n = x.len() as f64;
    let mut h = DMatrix::zeros(d + 1, d + 1);
    for f in x {
        let p = sigmoid(dot(w, f) + b);
        let s = p * (1.0 - p) / n;
        for i in 0..=d {
            let fi = if i < d { f[i] } else { 1.0 };
            for j in 0..=i {
                let fj = if j < d { f[j] } else { 1.0 };
                h[(i, j)] += s * fi * fj;
            }
        }
    }
    for i in 0..=d {
        for j in 0..i {
            h[(j, i)] = h[(i, j)];
        }
    }
    for j in 0..d {
        h[(j, j)] += l2;
    }
    h
}

/// Damped Newton iterations with Armijo backtracking on the regularized
/// mean log-loss; falls back to the gradient direction whenever the Newton
/// system cannot be solved.
pub fn logistic_fit(
    features: &[Vec<f64>],
    targets: &[f64],
    config: &LogisticConfig,
) -> Result<LogisticModel> {
    config.validate()?;
    let d = check_binary(features, targets)?;
    let positives = targets.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 || positives == targets.len() {
        return Err(MolexError::Data(
            "logistic regression needs both classes".into(),
        ));
    }
    let obj = Objective {
        x: features,
        y: targets,
        l2: config.l2,
    };
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut f = obj.value(&w, b);
    let mut grad = obj.gradient(&w, b);
    let mut gnorm = dot(&grad, &grad).sqrt();
    let mut iterations = 0;
    while gnorm > config.tol && iterations < config.max_iter {
        iterations += 1;
        let mut h = hessian(features, &w, b, config.l2);
        let jitter = 1e-12 * (1.0 + h.trace() / (d + 1) as f64);
        for i in 0..=d {
            h[(i, i)] += jitter;
        }
        let g = DVector::from_column_slice(&grad);
        let mut dir: Vec<f64> = match h.cholesky() {
            Some(c) => c.solve(&g).iter().copied().collect(),
            None => grad.clone(),
        };
        let mut decrease = dot(&grad, &dir);
        if !(decrease > 0.0 && decrease.is_finite()) {
            dir = grad.clone();
            decrease = gnorm * gnorm;
        }
        let mut step = 1.0;
        let mut accepted = false;
        while step >= 1e-20 {
            let w_new: Vec<f64> = w.iter().zip(&dir).map(|(wi, di)| wi - step * di).collect();
            let b_new = b - step * dir[d];
            let f_new = obj.value(&w_new, b_new);
            if f_new <= f - 1e-4 * step * decrease {
                w = w_new;
                b = b_new;
                f = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        grad = obj.gradient(&w, b);
        gnorm = dot(&grad, &grad).sqrt();
    }
    if !f.is_finite() || w.iter().any(|v| !v.is_finite()) {
        return Err(MolexError::Numeric("logistic fit diverged".into()));
    }
    Ok(LogisticModel {
        w: Block(w),
        b,
        l2: config.l2,
        converged: gnorm <= config.tol,
        iterations,
        grad_norm: gnorm,
    })
}

/// Regularised objective of a fitted model; used by the grid oracle tests.
pub fn logistic_objective(model: &LogisticModel, features: &[Vec<f64>], targets: &[f64]) -> f64 {
    Objective {
        x: features,
        y: targets,
        l2: model.l2,
    }
    .value(&model.w.0, model.b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OlsModel {
    pub w_hat: Block,
    /// `RSS / (n - d)`; absent when `n <= d`.
    pub sigma2_hat: Option<f64>,
    pub xtx_inv: MatrixBlock,
    pub n: usize,
    pub d: usize,
}

const MAX_CONDITION: f64 = 1e12;

pub fn ols_fit(e: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsModel> {
    let (n, d) = e.shape();
    if y.len() != n {
        return Err(MolexError::Argument(
            "design and response lengths differ".into(),
        ));
    }
    if n == 0 || d == 0 {
        return Err(MolexError::Data("empty design".into()));
    }
    let xtx = e.transpose() * e;
    let eig = xtx.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || max / min > MAX_CONDITION {
        return Err(MolexError::Numeric(
            "design is rank deficient (condition number > 1e12)".into(),
        ));
    }
    let chol = xtx
        .cholesky()
        .ok_or_else(|| MolexError::Numeric("E^T E is not positive definite".into()))?;
    let w_hat = chol.solve(&(e.transpose() * y));
    let inv = chol.inverse();
    let inv = (&inv + inv.transpose()) * 0.5;
    let resid = y - e * &w_hat;
    let rss = resid.dot(&resid);
    let sigma2_hat = (n > d).then(|| rss / (n - d) as f64);
    Ok(OlsModel {
        w_hat: Block(w_hat.iter().copied().collect()),
        sigma2_hat,
        xtx_inv: MatrixBlock::from_matrix(&inv),
        n,
        d,
    })
}

/// Orthogonal decomposition of whitened features `z = f_H + f_R` with
/// `f_H = U U^T z` and `f_R = (I - U U^T) z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSplit {
    /// Maps centered basis coefficients to whitened features.
    pub whitener: MatrixBlock,
    pub mean_coeffs: Block,
    /// `p x d_c`, orthonormal columns.
    #[serde(rename = "U")]
    pub u: MatrixBlock,
    /// `p x d_r`, orthonormal basis of the complement of `U`.
    #[serde(rename = "V")]
    pub v: MatrixBlock,
    pub d_c: usize,
    pub d_r: usize,
}

impl FeatureSplit {
    /// Split of raw features with no whitening or centering.
    pub fn from_directions(directions: &[DVector<f64>], dim: usize) -> Result<Self> {
        if directions.iter().any(|d| d.len() != dim) {
            return Err(MolexError::Argument(
                "direction length differs from dimension".into(),
            ));
        }
        Self::assemble(DMatrix::identity(dim, dim), vec![0.0; dim], directions)
    }

    fn assemble(
        whitener: DMatrix<f64>,
        mean: Vec<f64>,
        directions: &[DVector<f64>],
    ) -> Result<Self> {
        let dim = whitener.nrows();
        let u = gram_schmidt(directions, 1e-12);
        if u.len() != directions.len() {
            return Err(MolexError::Numeric(
                "explainable directions are linearly dependent".into(),
            ));
        }
        let v = orthonormal_complement(&u, dim);
        let to_matrix = |cols: &[DVector<f64>]| {
            if cols.is_empty() {
                DMatrix::zeros(dim, 0)
            } else {
                DMatrix::from_columns(cols)
            }
        };
        Ok(FeatureSplit {
            whitener: MatrixBlock::from_matrix(&whitener),
            mean_coeffs: Block(mean),
            d_c: u.len(),
            d_r: v.len(),
            u: MatrixBlock::from_matrix(&to_matrix(&u)),
            v: MatrixBlock::from_matrix(&to_matrix(&v)),
        })
    }

    pub fn dim(&self) -> usize {
        self.d_c + self.d_r
    }

    pub fn u_matrix(&self) -> Result<DMatrix<f64>> {
        self.u.to_matrix()
    }

    pub fn v_matrix(&self) -> Result<DMatrix<f64>> {
        self.v.to_matrix()
    }

    /// `L^T (c - mean)` for basis coefficients `c`.
    pub fn whiten(&self, coeffs: &[f64]) -> Result<DVector<f64>> {
        if coeffs.len() != self.dim() {
            return Err(MolexError::Argument(format!(
                "expected {} coefficients, got {}",
                self.dim(),
                coeffs.len()
            )));
        }
        let centered = DVector::from_iterator(
            coeffs.len(),
            coeffs.iter().zip(&self.mean_coeffs.0).map(|(c, m)| c - m),
        );
        Ok(self.whitener.to_matrix()? * centered)
    }

    fn check(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.dim() {
            return Err(MolexError::Argument(format!(
                "expected {}-dimensional features",
                self.dim()
            )));
        }
        Ok(())
    }

    /// Coordinates of `f_H` in the `U` basis (the explainable model's input).
    pub fn explainable_coords(&self, z: &DVector<f64>) -> Result<Vec<f64>> {
        self.check(z)?;
        Ok((self.u_matrix()?.transpose() * z).iter().copied().collect())
    }

    /// Coordinates of `f_R` in the `V` basis (the calibrator's input).
    pub fn residual_coords(&self, z: &DVector<f64>) -> Result<Vec<f64>> {
        self.check(z)?;
        Ok((self.v_matrix()?.transpose() * z).iter().copied().collect())
    }

    pub fn project_h(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(z)?;
        let u = self.u_matrix()?;
        Ok(&u * (u.transpose() * z))
    }

    pub fn project_r(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(z - self.project_h(z)?)
    }
}

/// Explainable subspace spanned by the first `d_c` components after
/// `G`-whitening.
pub fn make_split(model: &EfpcaModel, d_c: usize) -> Result<FeatureSplit> {
    let k = model.num_components();
    if d_c > k {
        return Err(MolexError::Argument(format!(
            "d_c = {d_c} exceeds the {k} fitted components"
        )));
    }
    let g = model.g_matrix()?;
    let l = g
        .cholesky()
        .ok_or_else(|| MolexError::Numeric("G is not positive definite".into()))?
        .l();
    let whitener = l.transpose();
    let directions: Vec<DVector<f64>> = (0..d_c).map(|i| &whitener * model.component(i)).collect();
    FeatureSplit::assemble(whitener, model.mean_coeffs.0.clone(), &directions)
}
