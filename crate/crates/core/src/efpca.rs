//! Sparse, roughness-penalised functional PCA over embeddings read as
//! curves on `[0, 1]`.
//!
//! Each component `a_k` maximises `a^T Q a - rho_k * S(a)` subject to
//! `a^T G a = 1` and `a^T G a_j = 0` for earlier components, where `S` is the
//! measure of the union of the supports of the active basis functions.
//!
//! Per component and per sparsity level `s`, a truncated power iteration in
//! `G`-whitened coordinates proposes an active set of `s` coefficients; the
//! variance is then maximised exactly on that active set under both
//! constraints. The level with the best penalised objective wins. At
//! `rho = 0` only the full level is evaluated and the result is the
//! generalized eigendecomposition of `(Q, G)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::codec::{Block, MatrixBlock};
use crate::error::{MolexError, Result};
use crate::exec::Exec;
use crate::spline::{assemble_g, build_basis, CurveProjector, SplineBasis};

pub const EFPCA_SCHEMA: &str = "efpca/1";
const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITER: usize = 500;
const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EfpcaConfig {
    #[serde(rename = "K")]
    pub components: usize,
    pub gamma: f64,
    pub rho: f64,
    /// Per-component override of `rho`; missing entries fall back to it.
    #[serde(default)]
    pub rho_per_component: Vec<f64>,
    pub degree: usize,
    /// Number of basis functions; `None` means `min(samples, 32)`.
    #[serde(default)]
    pub p: Option<usize>,
}

impl Default for EfpcaConfig {
    fn default() -> Self {
        EfpcaConfig {
            components: 20,
            gamma: 1e-4,
            rho: 0.0,
            rho_per_component: Vec::new(),
            degree: 3,
            p: None,
        }
    }
}

impl EfpcaConfig {
    pub fn rho_for(&self, k: usize) -> f64 {
        self.rho_per_component.get(k).copied().unwrap_or(self.rho)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(MolexError::Config("efpca K must be positive".into()));
        }
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.gamma) || !ok(self.rho) || !self.rho_per_component.iter().all(|&r| ok(r)) {
            return Err(MolexError::Config(
                "efpca gamma and rho must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfpcaModel {
    pub schema: String,
    pub degree: usize,
    pub knots: Vec<f64>,
    /// Number of curve samples (embedding length) the model was fitted on.
    pub num_samples: usize,
    pub gamma: f64,
    pub rho: Vec<f64>,
    pub mean_coeffs: Block,
    #[serde(rename = "G")]
    pub g: MatrixBlock,
    #[serde(rename = "Q")]
    pub q: MatrixBlock,
    /// One row per component.
    pub components: MatrixBlock,
    pub variances: Block,
    pub supports_len: Block,
}

impl EfpcaModel {
    pub fn basis(&self) -> SplineBasis {
        SplineBasis {
            degree: self.degree,
            knots: self.knots.clone(),
        }
    }

    pub fn num_components(&self) -> usize {
        self.components.rows
    }

    pub fn component(&self, k: usize) -> DVector<f64> {
        let p = self.components.cols;
        DVector::from_column_slice(&self.components.data.0[k * p..(k + 1) * p])
    }

    pub fn g_matrix(&self) -> Result<DMatrix<f64>> {
        self.g.to_matrix()
    }

    pub fn projector(&self) -> Result<CurveProjector> {
        CurveProjector::new(&self.basis(), self.num_samples)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != EFPCA_SCHEMA {
            return Err(MolexError::Format(format!(
                "unexpected schema {:?}",
                self.schema
            )));
        }
        let p = self.knots.len().saturating_sub(self.degree + 1);
        let k = self.components.rows;
        let consistent = p > 0
            && self.mean_coeffs.0.len() == p
            && (self.g.rows, self.g.cols) == (p, p)
            && (self.q.rows, self.q.cols) == (p, p)
            && self.components.cols == p
            && self.components.data.0.len() == k * p
            && self.variances.0.len() == k
            && self.supports_len.0.len() == k
            && self.rho.len() == k;
        if !consistent {
            return Err(MolexError::Format(
                "efpca model blocks have inconsistent shapes".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: EfpcaModel = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }
}

/// Column means of an `N x p` coefficient matrix and the centered copy.
pub fn center(coeffs: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = coeffs.nrows() as f64;
    let mean = DVector::from_iterator(coeffs.ncols(), coeffs.column_iter().map(|c| c.sum() / n));
    let mut centered = coeffs.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    (mean, centered)
}

/// `Q = M S M / N` for centered coefficients (one curve per row).
pub fn assemble_q(basis: &SplineBasis, centered: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if centered.nrows() < 2 {
        return Err(MolexError::Data("need ≥2 curves".into()));
    }
    if centered.ncols() != basis.len() {
        return Err(MolexError::Argument(
            "coefficient width does not match basis".into(),
        ));
    }
    let m = basis.mass_matrix();
    let scatter = centered.transpose() * centered / centered.nrows() as f64;
    let q = &m * scatter * &m;
    Ok((&q + q.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    /// `K x p`, one component per row.
    pub coeffs: DMatrix<f64>,
    pub variances: Vec<f64>,
    pub supports_len: Vec<f64>,
    pub rho: Vec<f64>,
}

struct Candidate {
    coeffs: DVector<f64>,
    variance: f64,
    support: f64,
    objective: f64,
}

fn lower_cholesky(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    g.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| MolexError::Numeric("G is not positive definite".into()))
}

/// Solves `L x = b` for lower-triangular `L`.
fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b)
        .expect("nonsingular triangular factor")
}

/// Solves `L^T x = b` for lower-triangular `L`.
fn solve_lower_transpose(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.tr_solve_lower_triangular(b)
        .expect("nonsingular triangular factor")
}

/// Eigenvector of the largest eigenvalue of a symmetric matrix; ties go to
/// the lowest index.
fn top_eigen(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut best = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    (
        eig.eigenvalues[best],
        eig.eigenvectors.column(best).into_owned(),
    )
}

fn truncate(v: &DVector<f64>, s: usize) -> DVector<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    let mut out = DVector::zeros(v.len());
    for &i in idx.iter().take(s) {
        out[i] = v[i];
    }
    out
}

fn flip_sign(a: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..a.len() {
        if a[i].abs() > a[best].abs() {
            best = i;
        }
    }
    if a[best] < 0.0 {
        a.neg_mut();
    }
}

/// Orthonormal basis of the complement of `span` (whose columns are
/// orthonormal) inside `R^n`, built by Gram-Schmidt over the unit vectors.
pub(crate) fn orthonormal_complement(span: &[DVector<f64>], n: usize) -> Vec<DVector<f64>> {
    let target = n.saturating_sub(span.len());
    let mut basis: Vec<DVector<f64>> = span.to_vec();
    let mut out = Vec::with_capacity(target);
    for i in 0..n {
        if out.len() == target {
            break;
        }
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v.axpy(-c, b, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-6 {
            v /= norm;
            basis.push(v.clone());
            out.push(v);
        }
    }
    out
}

/// Modified Gram-Schmidt with reorthogonalization; vectors whose residual
/// falls below `tol` relative to their norm are dropped.
pub(crate) fn gram_schmidt(vectors: &[DVector<f64>], tol: f64) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let scale = v.norm();
        if scale == 0.0 {
            continue;
        }
        let mut w = v.clone();
        for _ in 0..2 {
            for b in &out {
                let c = b.dot(&w);
                w.axpy(-c, b, 1.0);
            }
        }
        let norm = w.norm();
        if norm > tol * scale {
            out.push(w / norm);
        }
    }
    out
}

/// Maximises `a^T Q a` over `a` supported on `active`, with `a^T G a = 1`
/// and `a^T G a_j = 0` for every previous component.
fn restricted_solve(
    active: &[usize],
    q: &DMatrix<f64>,
    g: &DMatrix<f64>,
    previous: &[DVector<f64>],
) -> Option<(DVector<f64>, f64)> {
    let p = q.nrows();
    let s = active.len();
    let g_aa = DMatrix::from_fn(s, s, |i, j| g[(active[i], active[j])]);
    let q_aa = DMatrix::from_fn(s, s, |i, j| q[(active[i], active[j])]);
    let l = g_aa.cholesky()?.l();
    let constraints: Vec<DVector<f64>> = previous
        .iter()
        .map(|a| {
            let ga = g * a;
            let c = DVector::from_fn(s, |i, _| ga[active[i]]);
            solve_lower(&l, &c)
        })
        .collect();
    let span = gram_schmidt(&constraints, 1e-10);
    let free = orthonormal_complement(&span, s);
    if free.is_empty() {
        return None;
    }
    let n = DMatrix::from_columns(&free);
    // W = L^{-1} Q_AA L^{-T}
    let linv_q = l.solve_lower_triangular(&q_aa).expect("triangular");
    let w = l
        .solve_lower_triangular(&linv_q.transpose())
        .expect("triangular");
    let reduced = n.transpose() * w * &n;
    let (_, y) = top_eigen(&reduced);
    let u = &n * y;
    let x = solve_lower_transpose(&l, &u);
    let mut a = DVector::zeros(p);
    for (i, &j) in active.iter().enumerate() {
        a[j] = x[i];
    }
    flip_sign(&mut a);
    let variance = (a.transpose() * q * &a)[(0, 0)];
    Some((a, variance))
}

#[allow(clippy::too_many_arguments)]
fn candidate(
    s: usize,
    start: &DVector<f64>,
    l: &DMatrix<f64>,
    deflated: &DMatrix<f64>,
    q: &DMatrix<f64>,
    g: &DMatrix<f64>,
    previous: &[DVector<f64>],
    basis: &SplineBasis,
    rho: f64,
) -> Option<Candidate> {
    let p = q.nrows();
    let mut a = solve_lower_transpose(l, start);
    let mut current = truncate(&a, s);
    let mut prev_dir: Option<DVector<f64>> = None;
    for _ in 0..POWER_MAX_ITER {
        let truncated = truncate(&a, s);
        let mut z = l.transpose() * &truncated;
        let norm = z.norm();
        if norm == 0.0 {
            break;
        }
        z /= norm;
        current = truncated / norm;
        if let Some(prev) = &prev_dir {
            if 1.0 - z.dot(prev).abs() < POWER_TOL {
                break;
            }
        }
        let next = deflated * &z;
        if next.norm() <= VARIANCE_FLOOR {
            break;
        }
        prev_dir = Some(z);
        a = solve_lower_transpose(l, &next);
    }
    let active: Vec<usize> = (0..p).filter(|&j| current[j] != 0.0).collect();
    if active.is_empty() {
        return None;
    }
    let (coeffs, variance) = restricted_solve(&active, q, g, previous)?;
    let support = basis.union_measure((0..p).filter(|&j| coeffs[j] != 0.0));
    Some(Candidate {
        objective: variance - rho * support,
        coeffs,
        variance,
        support,
    })
}

/// Extracts `count` components; `rho_for(k)` gives the sparsity weight of
/// component `k`.
pub fn fit_components(
    g: &DMatrix<f64>,
    q: &DMatrix<f64>,
    basis: &SplineBasis,
    count: usize,
    rho_for: impl Fn(usize) -> f64,
    exec: Exec,
) -> Result<Components> {
    let p = g.nrows();
    if g.shape() != (p, p) || q.shape() != (p, p) || basis.len() != p {
        return Err(MolexError::Argument("G, Q and basis sizes disagree".into()));
    }
    if count == 0 || count > p {
        return Err(MolexError::Argument(format!(
            "K must lie in 1..={p}, got {count}"
        )));
    }
    let l = lower_cholesky(g)?;
    let linv_q = l.solve_lower_triangular(q).expect("triangular");
    let qw = l
        .solve_lower_triangular(&linv_q.transpose())
        .expect("triangular");
    let qw = (&qw + qw.transpose()) * 0.5;
    if qw.trace() <= VARIANCE_FLOOR {
        return Err(MolexError::DegenerateData(
            "all variance below 1e-12".into(),
        ));
    }

    let mut found: Vec<Candidate> = Vec::with_capacity(count);
    let mut rhos = Vec::with_capacity(count);
    for k in 0..count {
        let rho = rho_for(k);
        let previous: Vec<DVector<f64>> = found.iter().map(|c| c.coeffs.clone()).collect();
        let mut proj = DMatrix::identity(p, p);
        for a in &previous {
            let b = l.transpose() * a;
            proj -= &b * b.transpose();
        }
        let deflated = &proj * &qw * &proj;
        let (_, start) = top_eigen(&deflated);
        let levels = if rho == 0.0 { p..p + 1 } else { 1..p + 1 };
        let candidates = exec.map_range(levels, |s| {
            candidate(s, &start, &l, &deflated, q, g, &previous, basis, rho)
        });
        let best = candidates
            .into_iter()
            .flatten()
            .reduce(|best, c| {
                if c.objective > best.objective {
                    c
                } else {
                    best
                }
            })
            .ok_or_else(|| {
                MolexError::DegenerateData(format!("no feasible component {}", k + 1))
            })?;
        found.push(best);
        rhos.push(rho);
    }

    // Mutual G-orthogonality is symmetric, so reordering keeps every
    // constraint while making the variances non-increasing.
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| {
        found[b]
            .variance
            .total_cmp(&found[a].variance)
            .then(a.cmp(&b))
    });
    let mut coeffs = DMatrix::zeros(count, p);
    for (row, &i) in order.iter().enumerate() {
        coeffs.set_row(row, &found[i].coeffs.transpose());
    }
    Ok(Components {
        coeffs,
        variances: order.iter().map(|&i| found[i].variance).collect(),
        supports_len: order.iter().map(|&i| found[i].support).collect(),
        rho: order.iter().map(|&i| rhos[i]).collect(),
    })
}

/// Fits the full model on curves given as equal-length sample vectors.
pub fn fit_efpca(curves: &[Vec<f64>], config: &EfpcaConfig, exec: Exec) -> Result<EfpcaModel> {
    config.validate()?;
    if curves.len() < 2 {
        return Err(MolexError::Data("need ≥2 curves".into()));
    }
    let k = curves[0].len();
    if curves.iter().any(|c| c.len() != k) {
        return Err(MolexError::Argument("curves have different lengths".into()));
    }
    let p = config.p.unwrap_or(k.min(32));
    let basis = build_basis(config.degree, p)?;
    let projector = CurveProjector::new(&basis, k)?;
    let rows = exec.try_map(curves, |c| projector.project(c))?;
    let coeffs = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    let (mean, centered) = center(&coeffs);
    let g = assemble_g(&basis, config.gamma)?;
    let q = assemble_q(&basis, &centered)?;
    let comps = fit_components(
        &g,
        &q,
        &basis,
        config.components,
        |i| config.rho_for(i),
        exec,
    )?;
    Ok(EfpcaModel {
        schema: EFPCA_SCHEMA.to_string(),
        degree: basis.degree,
        knots: basis.knots,
        num_samples: k,
        gamma: config.gamma,
        rho: comps.rho,
        mean_coeffs: Block(mean.iter().copied().collect()),
        g: MatrixBlock::from_matrix(&g),
        q: MatrixBlock::from_matrix(&q),
        components: MatrixBlock::from_matrix(&comps.coeffs),
        variances: Block(comps.variances),
        supports_len: Block(comps.supports_len),
    })
}

/// FPC scores `a_k^T G (c - mean)` of one curve.
pub fn transform(model: &EfpcaModel, samples: &[f64]) -> Result<Vec<f64>> {
    let c = model.projector()?.project(samples)?;
    scores_from_coeffs(model, &c)
}

pub fn scores_from_coeffs(model: &EfpcaModel, coeffs: &[f64]) -> Result<Vec<f64>> {
    let p = model.components.cols;
    if coeffs.len() != p {
        return Err(MolexError::Argument(format!(
            "expected {p} coefficients, got {}",
            coeffs.len()
        )));
    }
    let centered = DVector::from_iterator(
        p,
        coeffs.iter().zip(&model.mean_coeffs.0).map(|(c, m)| c - m),
    );
    let gc = model.g_matrix()? * centered;
    let comps = model.components.to_matrix()?;
    Ok((comps * gc).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_basis(p: usize) -> SplineBasis {
        build_basis(0, p).unwrap()
    }

    #[test]
    fn diagonal_problem() {
        let g = DMatrix::identity(3, 3);
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 0.25]));
        let c = fit_components(&g, &q, &diag_basis(3), 2, |_| 0.0, Exec::Sequential).unwrap();
        assert!((c.variances[0] - 4.0).abs() < 1e-12);
        assert!((c.variances[1] - 1.0).abs() < 1e-12);
        assert!(
            (c.coeffs.row(0).transpose() - DVector::from_vec(vec![1.0, 0.0, 0.0])).norm() < 1e-12
        );
        assert!(
            (c.coeffs.row(1).transpose() - DVector::from_vec(vec![0.0, 1.0, 0.0])).norm() < 1e-12
        );
    }

    #[test]
    fn zero_covariance_is_degenerate() {
        let g = DMatrix::identity(3, 3);
        let q = DMatrix::zeros(3, 3);
        assert!(matches!(
            fit_components(&g, &q, &diag_basis(3), 1, |_| 0.0, Exec::Sequential),
            Err(MolexError::DegenerateData(_))
        ));
    }

    #[test]
    fn identical_curves_give_zero_q() {
        let b = diag_basis(4);
        let coeffs = DMatrix::from_row_slice(
            3,
            4,
            &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0],
        );
        let (_, centered) = center(&coeffs);
        assert_eq!(assemble_q(&b, &centered).unwrap().abs().max(), 0.0);
        assert!(matches!(
            assemble_q(&b, &centered.rows(0, 1).into_owned()),
            Err(MolexError::Data(_))
        ));
    }

    #[test]
    fn orthonormal_complement_spans_rest() {
        let u = vec![DVector::from_vec(vec![1.0, 1.0, 0.0]) / 2f64.sqrt()];
        let c = orthonormal_complement(&u, 3);
        assert_eq!(c.len(), 2);
        for v in &c {
            assert!(v.dot(&u[0]).abs() < 1e-14);
            assert!((v.norm() - 1.0).abs() < 1e-14);
        }
        assert!(c[0].dot(&c[1]).abs() < 1e-14);
    }

    #[test]
    fn truncation_keeps_largest() {
        let v = DVector::from_vec(vec![0.1, -3.0, 2.0, 0.5]);
        assert_eq!(
            truncate(&v, 2),
            DVector::from_vec(vec![0.0, -3.0, 2.0, 0.0])
        );
    }

    #[test]
    fn mean_curve_scores_zero() {
        let curves: Vec<Vec<f64>> = (0..10)
            .map(|i| {
                (0..8)
                    .map(|j| ((i * 7 + j * 3) % 11) as f64 / 5.0)
                    .collect()
            })
            .collect();
        let cfg = EfpcaConfig {
            components: 3,
            degree: 3,
            p: Some(6),
            ..Default::default()
        };
        let m = fit_efpca(&curves, &cfg, Exec::Sequential).unwrap();
        let mean_curve: Vec<f64> = (0..8)
            .map(|j| curves.iter().map(|c| c[j]).sum::<f64>() / 10.0)
            .collect();
        for s in transform(&m, &mean_curve).unwrap() {
            assert!(s.abs() < 1e-10);
        }
        let back = EfpcaModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
