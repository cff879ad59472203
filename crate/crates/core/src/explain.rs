//! Contribution scores, their OLS t-statistics, and evaluation metrics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingTable, OovPolicy};
use crate::error::{MolexError, Result};
use crate::gselfies::{extract_ngrams, Molecule};
use crate::linear::OlsModel;

/// Affine map from embedding space to the model logit: `w^T e + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveWeight {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl EffectiveWeight {
    pub fn logit(&self, e: &[f64]) -> f64 {
        self.weight.iter().zip(e).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }
}

/// Pulls `w_total` back through the affine map `e -> T e + offset`:
/// `w_eff = T^T w_total` and `bias_eff = w_total^T offset + bias`.
pub fn effective_weight(
    t: &DMatrix<f64>,
    offset: &DVector<f64>,
    w_total: &DVector<f64>,
    bias: f64,
) -> Result<EffectiveWeight> {
    if t.nrows() != w_total.len() || offset.len() != w_total.len() {
        return Err(MolexError::Argument(
            "composed map and weight vector disagree in size".into(),
        ));
    }
    Ok(EffectiveWeight {
        weight: (t.transpose() * w_total).iter().copied().collect(),
        bias: w_total.dot(offset) + bias,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub index: usize,
    pub token: String,
    pub score: f64,
    /// Absent when no OLS model is available or the statistic is undefined.
    pub t: Option<f64>,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub tokens: Vec<TokenScore>,
    /// Adjacent tokens both at or above the pairing threshold.
    pub pairs: Vec<[usize; 2]>,
}

/// Min-max rescaling to `[0, 100]`; all zeros when the scores are equal.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if scores.is_empty() || !(max > min) {
        return vec![0.0; scores.len()];
    }
    scores
        .iter()
        .map(|s| (s - min) / (max - min) * 100.0)
        .collect()
}

/// Per-(n-gram, token) contributions `c_ij = v_ij^T w_eff`, indexed by
/// n-gram and then by position inside the n-gram.
pub fn ngram_contributions(
    table: &EmbeddingTable,
    molecule: &Molecule,
    n: usize,
    policy: OovPolicy,
    eff: &EffectiveWeight,
) -> Result<Vec<(std::ops::Range<usize>, Vec<f64>)>> {
    let dot = |v: &[f64]| v.iter().zip(&eff.weight).map(|(a, b)| a * b).sum::<f64>();
    extract_ngrams(&molecule.tokens, n)?
        .iter()
        .map(|g| {
            let cs = g
                .tokens
                .iter()
                .map(|t| table.lookup(t, policy).map(|v| dot(&v)))
                .collect::<Result<Vec<_>>>()?;
            Ok((g.span.0..g.span.1, cs))
        })
        .collect()
}

/// Token score = mean of that token's contributions over the n-grams that
/// cover it.
pub fn token_contributions(
    table: &EmbeddingTable,
    molecule: &Molecule,
    n: usize,
    policy: OovPolicy,
    eff: &EffectiveWeight,
    ols: Option<(&OlsModel, &dyn Fn(&[f64]) -> Vec<f64>)>,
    pair_threshold: f64,
) -> Result<ContributionReport> {
    if table.dim() != eff.weight.len() {
        return Err(MolexError::Argument(
            "effective weight does not match embedding dimension".into(),
        ));
    }
    let len = molecule.tokens.len();
    let mut sums = vec![0.0; len];
    let mut counts = vec![0usize; len];
    for (span, cs) in ngram_contributions(table, molecule, n, policy, eff)? {
        for (pos, c) in span.zip(cs) {
            sums[pos] += c;
            counts[pos] += 1;
        }
    }
    let scores: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| s / *c as f64)
        .collect();
    let normalized = normalize_scores(&scores);
    let mut tokens = Vec::with_capacity(len);
    for (i, tok) in molecule.tokens.iter().enumerate() {
        let t = match ols {
            Some((model, to_ols_space)) => {
                let v = table.lookup(tok, policy)?;
                t_statistic(model, &to_ols_space(&v)).ok()
            }
            None => None,
        };
        tokens.push(TokenScore {
            index: i,
            token: tok.clone(),
            score: scores[i],
            t,
            normalized: normalized[i],
        });
    }
    let pairs = (1..len)
        .filter(|&i| {
            normalized[i - 1] >= pair_threshold
                && normalized[i] >= pair_threshold
                && normalized[i] > 0.0
        })
        .map(|i| [i - 1, i])
        .collect();
    Ok(ContributionReport { tokens, pairs })
}

/// `t = v^T w_hat / (sigma_hat * sqrt(v^T (E^T E)^{-1} v))`.
pub fn t_statistic(ols: &OlsModel, v: &[f64]) -> Result<f64> {
    if v.len() != ols.d {
        return Err(MolexError::Argument(format!(
            "expected {}-dimensional vector",
            ols.d
        )));
    }
    let sigma2 = ols
        .sigma2_hat
        .ok_or_else(|| MolexError::Numeric("residual variance needs n > d".into()))?;
    if !(sigma2 > 0.0) {
        return Err(MolexError::Numeric("zero residual variance".into()));
    }
    let v = DVector::from_column_slice(v);
    let quad = (v.transpose() * ols.xtx_inv.to_matrix()? * &v)[(0, 0)];
    if !(quad > 0.0) {
        return Err(MolexError::Numeric(
            "v^T (E^T E)^{-1} v is not positive".into(),
        ));
    }
    let c: f64 = v.iter().zip(&ols.w_hat.0).map(|(a, b)| a * b).sum();
    Ok(c / (sigma2.sqrt() * quad.sqrt()))
}

pub fn t_statistics(ols: &OlsModel, vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    vectors.iter().map(|v| t_statistic(ols, v)).collect()
}

/// ROC AUC as the Mann-Whitney statistic over midranks; ties count 1/2.
pub fn explanation_auc(scores: &[f64], mask: &[u8]) -> Result<f64> {
    if scores.len() != mask.len() {
        return Err(MolexError::Metric("scores and mask lengths differ".into()));
    }
    let pos = mask.iter().filter(|&&m| m == 1).count();
    let neg = mask.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MolexError::Metric("mask must contain both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MolexError::Metric("NaN score".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if mask[k] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classification_accuracy: f64,
    /// Macro average over molecules whose mask has both classes.
    pub explanation_auc: Option<f64>,
    pub auc_molecules: usize,
    pub auc_excluded: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub wall_time_us: u64,
}

pub fn confusion_matrix(labels: &[usize], predicted: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&y, &p) in labels.iter().zip(predicted) {
        m[y][p] += 1;
    }
    m
}

pub fn accuracy(confusion: &[Vec<usize>]) -> f64 {
    let total: usize = confusion.iter().flatten().sum();
    let trace: usize = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    if total == 0 {
        0.0
    } else {
        trace as f64 / total as f64
    }
}
