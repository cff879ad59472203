//! Clamped uniform B-spline bases on `[0, 1]`, their Gram matrices, and
//! least-squares projection of sampled curves onto the basis.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, MolexError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineBasis {
    pub degree: usize,
    pub knots: Vec<f64>,
}

pub fn build_basis(degree: usize, num_basis: usize) -> Result<SplineBasis> {
    if num_basis < degree + 1 || num_basis == 0 {
        return Err(MolexError::Argument(format!(
            "degree {degree} needs at least {} basis functions, got {num_basis}",
            degree + 1
        )));
    }
    let spans = num_basis - degree;
    let mut knots = vec![0.0; degree + 1];
    knots.extend((1..spans).map(|i| i as f64 / spans as f64));
    knots.extend(std::iter::repeat_n(1.0, degree + 1));
    Ok(SplineBasis { degree, knots })
}

impl SplineBasis {
    pub fn len(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Closed interval outside which basis function `j` vanishes.
    pub fn support(&self, j: usize) -> (f64, f64) {
        (self.knots[j], self.knots[j + self.degree + 1])
    }

    pub fn supports(&self) -> Vec<(f64, f64)> {
        (0..self.len()).map(|j| self.support(j)).collect()
    }

    /// Measure of the union of supports of the selected functions.
    pub fn union_measure(&self, active: impl IntoIterator<Item = usize>) -> f64 {
        let mut intervals: Vec<(f64, f64)> = active.into_iter().map(|j| self.support(j)).collect();
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut total = 0.0;
        let mut current: Option<(f64, f64)> = None;
        for (lo, hi) in intervals {
            current = match current {
                Some((clo, chi)) if lo <= chi => Some((clo, chi.max(hi))),
                Some((clo, chi)) => {
                    total += chi - clo;
                    Some((lo, hi))
                }
                None => Some((lo, hi)),
            };
        }
        if let Some((lo, hi)) = current {
            total += hi - lo;
        }
        total
    }

    /// Index of the non-empty knot span containing `t`; `t = 1` falls in the
    /// last span.
    fn span_of(&self, t: f64) -> usize {
        let last = self.len() - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        let mut s = self.degree;
        while s < last && t >= self.knots[s + 1] {
            s += 1;
        }
        s
    }

    fn eval_in_span(&self, j: usize, q: usize, deriv: usize, t: f64, span: usize) -> f64 {
        let u = &self.knots;
        if q == 0 {
            return if deriv == 0 && j == span { 1.0 } else { 0.0 };
        }
        let left = u[j + q] - u[j];
        let right = u[j + q + 1] - u[j + 1];
        if deriv == 0 {
            let mut v = 0.0;
            if left > 0.0 {
                v += (t - u[j]) / left * self.eval_in_span(j, q - 1, 0, t, span);
            }
            if right > 0.0 {
                v += (u[j + q + 1] - t) / right * self.eval_in_span(j + 1, q - 1, 0, t, span);
            }
            v
        } else {
            let mut v = 0.0;
            if left > 0.0 {
                v += q as f64 / left * self.eval_in_span(j, q - 1, deriv - 1, t, span);
            }
            if right > 0.0 {
                v -= q as f64 / right * self.eval_in_span(j + 1, q - 1, deriv - 1, t, span);
            }
            v
        }
    }

    /// Values (or `deriv`-th derivatives) of all basis functions at `t`.
    pub fn eval(&self, t: f64, deriv: usize) -> Vec<f64> {
        let span = self.span_of(t.clamp(0.0, 1.0));
        self.eval_span(t, deriv, span)
    }

    fn eval_span(&self, t: f64, deriv: usize, span: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        let lo = span.saturating_sub(self.degree);
        for (j, o) in out.iter_mut().enumerate().take(span + 1).skip(lo) {
            *o = self.eval_in_span(j, self.degree, deriv, t, span);
        }
        out
    }

    /// `[<D^r phi_i, D^r phi_j>]` by Gauss-Legendre quadrature on each knot
    /// span, exact for the piecewise polynomials involved.
    pub fn gram(&self, deriv: usize) -> DMatrix<f64> {
        let p = self.len();
        let mut g = DMatrix::zeros(p, p);
        if deriv > self.degree {
            return g;
        }
        let (nodes, weights) = gauss_legendre(self.degree + 2);
        for span in self.degree..p {
            let (a, b) = (self.knots[span], self.knots[span + 1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (x, w) in nodes.iter().zip(&weights) {
                let t = mid + half * x;
                let vals = self.eval_span(t, deriv, span);
                let lo = span - self.degree;
                for i in lo..=span {
                    for j in lo..=span {
                        g[(i, j)] += w * half * vals[i] * vals[j];
                    }
                }
            }
        }
        g
    }

    pub fn mass_matrix(&self) -> DMatrix<f64> {
        self.gram(0)
    }
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            if n == 1 {
                p1 = x;
                p0 = 1.0;
            } else {
                for k in 2..=n {
                    let pk = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = pk;
                }
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

pub fn assemble_g(basis: &SplineBasis, gamma: f64) -> Result<DMatrix<f64>> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(MolexError::Argument(
            "gamma must be finite and nonnegative".into(),
        ));
    }
    let mut g = basis.mass_matrix();
    if gamma > 0.0 {
        g += basis.gram(2) * gamma;
    }
    Ok(g)
}

/// Least-squares map from `k` equispaced curve samples to basis
/// coefficients: `c = (B^T B)^{-1} B^T y`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveProjector {
    pub samples: usize,
    /// `p x k`.
    pub matrix: DMatrix<f64>,
}

/// Sample locations `t_j = j / (k - 1)`.
pub fn sample_points(k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![0.0];
    }
    (0..k).map(|j| j as f64 / (k - 1) as f64).collect()
}

impl CurveProjector {
    pub fn new(basis: &SplineBasis, samples: usize) -> Result<Self> {
        let p = basis.len();
        if samples < p {
            return Err(MolexError::Numeric(format!(
                "{samples} samples cannot determine {p} coefficients"
            )));
        }
        let ts = sample_points(samples);
        let mut design = DMatrix::zeros(samples, p);
        for (r, t) in ts.iter().enumerate() {
            for (c, v) in basis.eval(*t, 0).into_iter().enumerate() {
                design[(r, c)] = v;
            }
        }
        let svd = design.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > 1e-10 * smax) {
            return Err(MolexError::Numeric("rank-deficient sampling design".into()));
        }
        let matrix = svd
            .pseudo_inverse(0.0)
            .map_err(|e| MolexError::Numeric(format!("pseudo-inverse failed: {e}")))?;
        Ok(CurveProjector { samples, matrix })
    }

    pub fn project(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.samples {
            return Err(MolexError::Argument(format!(
                "expected {} curve samples, got {}",
                self.samples,
                values.len()
            )));
        }
        ensure_finite(values, "curve samples")?;
        Ok((&self.matrix * DVector::from_column_slice(values))
            .iter()
            .copied()
            .collect())
    }
}

pub fn curve_coeffs(basis: &SplineBasis, samples: &[f64]) -> Result<Vec<f64>> {
    CurveProjector::new(basis, samples.len())?.project(samples)
}
