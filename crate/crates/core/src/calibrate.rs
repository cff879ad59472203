//! Residual calibration: a linear model on the residual features, fitted to
//! the frozen explainable model's errors and added to it in logit space.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::codec::Block;
use crate::error::{MolexError, Result};
use crate::linear::{log_loss, sigmoid, FeatureSplit, LogisticModel};

/// One example in whitened feature space with a 0/1 target.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitExample {
    pub z: DVector<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryEntry {
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibratedModel {
    pub h: LogisticModel,
    pub w_r: Block,
    pub b_r: f64,
    pub iterations_run: usize,
    pub step_size: f64,
    /// Entry `t` describes the model after `t` boosting steps.
    pub history: Vec<HistoryEntry>,
}

/// Logit of the combined model split into the two additive parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitParts {
    pub h: f64,
    pub r: f64,
}

impl LogitParts {
    pub fn total(&self) -> f64 {
        self.h + self.r
    }
}

impl CalibratedModel {
    /// Calibration that leaves `h` unchanged.
    pub fn identity(h: LogisticModel, d_r: usize) -> Self {
        CalibratedModel {
            h,
            w_r: Block(vec![0.0; d_r]),
            b_r: 0.0,
            iterations_run: 0,
            step_size: 0.0,
            history: Vec::new(),
        }
    }

    pub fn parts(&self, split: &FeatureSplit, z: &DVector<f64>) -> Result<LogitParts> {
        let fh = split.explainable_coords(z)?;
        let fr = split.residual_coords(z)?;
        self.parts_from_coords(&fh, &fr)
    }

    pub fn parts_from_coords(&self, fh: &[f64], fr: &[f64]) -> Result<LogitParts> {
        if fr.len() != self.w_r.0.len() {
            return Err(MolexError::Argument(format!(
                "expected {} residual features, got {}",
                self.w_r.0.len(),
                fr.len()
            )));
        }
        let h = self.h.decision(fh)?;
        let r = self.w_r.0.iter().zip(fr).map(|(w, f)| w * f).sum::<f64>() + self.b_r;
        Ok(LogitParts { h, r })
    }
}

pub fn calibrated_predict(
    model: &CalibratedModel,
    split: &FeatureSplit,
    z: &DVector<f64>,
) -> Result<f64> {
    Ok(sigmoid(model.parts(split, z)?.total()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub early_stop: bool,
    /// Fraction of the training set held out for early stopping.
    pub val_fraction: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            iterations: 5,
            step_size: 0.5,
            early_stop: false,
            val_fraction: 0.2,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(MolexError::Config(
                "calibration step_size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(MolexError::Config(
                "calibration val_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

struct Prepared {
    h_logits: Vec<f64>,
    residual: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

fn prepare(h: &LogisticModel, split: &FeatureSplit, data: &[SplitExample]) -> Result<Prepared> {
    let mut out = Prepared {
        h_logits: Vec::with_capacity(data.len()),
        residual: Vec::with_capacity(data.len()),
        targets: Vec::with_capacity(data.len()),
    };
    for ex in data {
        out.h_logits
            .push(h.decision(&split.explainable_coords(&ex.z)?)?);
        out.residual.push(split.residual_coords(&ex.z)?);
        out.targets.push(ex.y);
    }
    Ok(out)
}

fn combined_loss(p: &Prepared, w: &[f64], b: f64) -> f64 {
    let logits: Vec<f64> = p
        .h_logits
        .iter()
        .zip(&p.residual)
        .map(|(hl, fr)| hl + w.iter().zip(fr).map(|(a, c)| a * c).sum::<f64>() + b)
        .collect();
    log_loss(&logits, &p.targets)
}

/// Boosting on the residual features with `h` frozen.
///
/// Each step regresses the pseudo-residuals `y - sigmoid(logit)` on
/// `[f_R, 1]` by least squares and adds `step_size` times the fit to
/// `(w_r, b_r)`. With a validation set the returned parameters are those of
/// the step with the smallest validation loss (earliest on ties).
pub fn calibrate(
    h: &LogisticModel,
    split: &FeatureSplit,
    train: &[SplitExample],
    val: Option<&[SplitExample]>,
    iterations: usize,
    step_size: f64,
) -> Result<CalibratedModel> {
    if train.is_empty() {
        return Err(MolexError::Data("empty calibration training set".into()));
    }
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(MolexError::Argument("step size must be positive".into()));
    }
    let tr = prepare(h, split, train)?;
    let va = val.map(|v| prepare(h, split, v)).transpose()?;
    let d_r = split.d_r;
    let n = train.len();

    let design = DMatrix::from_fn(
        n,
        d_r + 1,
        |i, j| if j < d_r { tr.residual[i][j] } else { 1.0 },
    );
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let lstsq_eps = smax * 1e-12 * (n.max(d_r + 1) as f64);

    let mut w = vec![0.0; d_r];
    let mut b = 0.0;
    let record = |w: &[f64], b: f64| HistoryEntry {
        train_loss: combined_loss(&tr, w, b),
        val_loss: va.as_ref().map(|v| combined_loss(v, w, b)),
    };
    let mut history = vec![record(&w, b)];
    let mut snapshots = vec![(w.clone(), b)];
    for _ in 0..iterations {
        let pseudo = DVector::from_iterator(
            n,
            tr.h_logits
                .iter()
                .zip(&tr.residual)
                .zip(&tr.targets)
                .map(|((hl, fr), y)| {
                    let z = hl + w.iter().zip(fr).map(|(a, c)| a * c).sum::<f64>() + b;
                    y - sigmoid(z)
                }),
        );
        let delta = svd
            .solve(&pseudo, lstsq_eps)
            .map_err(|e| MolexError::Numeric(format!("least-squares step failed: {e}")))?;
        for (wj, dj) in w.iter_mut().zip(delta.iter()) {
            *wj += step_size * dj;
        }
        b += step_size * delta[d_r];
        if !b.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(MolexError::Numeric("calibrator diverged".into()));
        }
        history.push(record(&w, b));
        snapshots.push((w.clone(), b));
    }

    let chosen = if va.is_some() {
        let mut best = 0;
        for (t, e) in history.iter().enumerate() {
            if e.val_loss.unwrap_or(f64::INFINITY) < history[best].val_loss.unwrap_or(f64::INFINITY)
            {
                best = t;
            }
        }
        best
    } else {
        iterations
    };
    let (w, b) = snapshots.swap_remove(chosen);
    Ok(CalibratedModel {
        h: h.clone(),
        w_r: Block(w),
        b_r: b,
        iterations_run: chosen,
        step_size,
        history,
    })
}

/// `iter,train_loss,val_loss` rows; the validation column is empty when no
/// validation set was used.
pub fn history_csv(model: &CalibratedModel) -> String {
    let mut out = String::from("iter,train_loss,val_loss\n");
    for (t, e) in model.history.iter().enumerate() {
        let val = e.val_loss.map(|v| format!("{v:?}")).unwrap_or_default();
        out.push_str(&format!("{t},{:?},{val}\n", e.train_loss));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split2() -> FeatureSplit {
        FeatureSplit::from_directions(&[DVector::from_vec(vec![1.0, 0.0])], 2).unwrap()
    }

    #[test]
    fn zero_iterations_is_identity() {
        let h = LogisticModel::new(vec![0.7], -0.2);
        let s = split2();
        let data = vec![
            SplitExample {
                z: DVector::from_vec(vec![1.0, 2.0]),
                y: 1.0,
            },
            SplitExample {
                z: DVector::from_vec(vec![-1.0, 0.5]),
                y: 0.0,
            },
        ];
        let c = calibrate(&h, &s, &data, None, 0, 0.5).unwrap();
        assert!(c.w_r.0.iter().all(|w| *w == 0.0));
        assert_eq!(c.b_r, 0.0);
        for ex in &data {
            let p = calibrated_predict(&c, &s, &ex.z).unwrap();
            let ph =
                crate::linear::logistic_predict(&h, &s.explainable_coords(&ex.z).unwrap()).unwrap();
            assert_eq!(p, ph);
        }
    }

    #[test]
    fn empty_train_rejected() {
        let h = LogisticModel::new(vec![0.0], 0.0);
        assert!(matches!(
            calibrate(&h, &split2(), &[], None, 3, 0.5),
            Err(MolexError::Data(_))
        ));
    }

    #[test]
    fn residual_free_datum_matches_h() {
        let h = LogisticModel::new(vec![1.3], 0.1);
        let mut c = CalibratedModel::identity(h.clone(), 1);
        c.w_r.0 = vec![5.0];
        c.b_r = 0.0;
        let s = split2();
        let z = DVector::from_vec(vec![0.4, 0.0]);
        let p = calibrated_predict(&c, &s, &z).unwrap();
        assert_eq!(p, crate::linear::logistic_predict(&h, &[0.4]).unwrap());
    }

    #[test]
    fn history_csv_layout() {
        let h = LogisticModel::new(vec![0.0], 0.0);
        let data = vec![
            SplitExample {
                z: DVector::from_vec(vec![0.0, 1.0]),
                y: 1.0,
            },
            SplitExample {
                z: DVector::from_vec(vec![0.0, -1.0]),
                y: 0.0,
            },
        ];
        let c = calibrate(&h, &split2(), &data, None, 2, 0.5).unwrap();
        let csv = history_csv(&c);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iter,train_loss,val_loss");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].ends_with(','));
    }
}
