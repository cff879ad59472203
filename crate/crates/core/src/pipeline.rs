//! End-to-end orchestration: configuration, training through every stage,
//! the persisted bundle, and prediction, explanation, evaluation and sweeps
//! on top of it.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibrate::{calibrate, CalibratedModel, CalibrationConfig, SplitExample};
use crate::efpca::{fit_efpca, EfpcaConfig, EfpcaModel};
use crate::embedding::{embed_molecule, EmbeddingTable, OovPolicy};
use crate::error::{MolexError, Result};
use crate::exec::Exec;
use crate::explain::{
    accuracy, confusion_matrix, effective_weight, explanation_auc, token_contributions,
    ContributionReport, EffectiveWeight, EvalReport,
};
use crate::gselfies::{detokenize, extract_ngrams, tokenize, Molecule};
use crate::linear::{
    log_loss, logistic_fit, make_split, ols_fit, sigmoid, FeatureSplit, LogisticConfig, OlsModel,
};
use crate::spline::CurveProjector;
use crate::vib::{vib_train, Example, VibModel, VibTrainConfig};

pub const BUNDLE_SCHEMA: &str = "molex-bundle/1";

pub const STAGES: [&str; 7] = [
    "tokenize",
    "embed",
    "vib_train",
    "efpca_fit",
    "split",
    "logistic_fit",
    "calibrate",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VibSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mc_samples: usize,
}

impl Default for VibSection {
    fn default() -> Self {
        let d = VibTrainConfig::default();
        VibSection {
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_size: d.batch_size,
            mc_samples: d.mc_samples,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<String>,
    pub embeddings: Option<String>,
    pub model_out: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n: usize,
    pub latent_dim: usize,
    pub beta: f64,
    pub oov: OovPolicy,
    pub seed: u64,
    /// Normalized score both neighbours must reach to be reported as a pair.
    pub pair_threshold: f64,
    pub vib: VibSection,
    pub efpca: EfpcaConfig,
    pub logistic: LogisticConfig,
    pub calibration: CalibrationConfig,
    /// Input and output locations; never part of the bundle.
    #[serde(skip_serializing)]
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n: 3,
            latent_dim: 32,
            beta: 0.01,
            oov: OovPolicy::Strict,
            seed: 0,
            pair_threshold: 50.0,
            vib: VibSection::default(),
            efpca: EfpcaConfig::default(),
            logistic: LogisticConfig::default(),
            calibration: CalibrationConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: PipelineConfig =
            serde_json::from_str(text).map_err(|e| MolexError::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn vib_config(&self) -> VibTrainConfig {
        VibTrainConfig {
            learning_rate: self.vib.learning_rate,
            epochs: self.vib.epochs,
            batch_size: self.vib.batch_size,
            seed: self.seed,
            mc_samples: self.vib.mc_samples,
        }
    }

    /// Number of spline basis functions the efpca stage will use.
    pub fn basis_size(&self) -> usize {
        self.efpca.p.unwrap_or(self.latent_dim.min(32))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(MolexError::Config("n must be at least 1".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(MolexError::Config(
                "beta must be finite and nonnegative".into(),
            ));
        }
        if !(0.0..=100.0).contains(&self.pair_threshold) {
            return Err(MolexError::Config(
                "pair_threshold must lie in [0, 100]".into(),
            ));
        }
        self.vib_config().validate()?;
        self.efpca.validate()?;
        self.logistic.validate()?;
        self.calibration.validate()?;
        let p = self.basis_size();
        if p < self.efpca.degree + 1 {
            return Err(MolexError::Config(format!(
                "basis size {p} is too small for degree {}",
                self.efpca.degree
            )));
        }
        if p > self.latent_dim {
            return Err(MolexError::Config(format!(
                "basis size {p} exceeds latent_dim {}",
                self.latent_dim
            )));
        }
        if self.efpca.components > p {
            return Err(MolexError::Config(format!(
                "K = {} exceeds the basis size {p}",
                self.efpca.components
            )));
        }
        Ok(())
    }
}

/// Binary head for one class: `P(label == class)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassHead {
    pub class: usize,
    pub model: CalibratedModel,
    /// Absent when the attribution design is rank deficient.
    pub attribution: Option<OlsModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineBundle {
    pub schema: String,
    pub config: PipelineConfig,
    pub embedding_fingerprint: String,
    pub embedding_dim: usize,
    pub classes: usize,
    pub vib: VibModel,
    pub efpca: EfpcaModel,
    pub split: FeatureSplit,
    pub heads: Vec<ClassHead>,
}

impl PipelineBundle {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: PipelineBundle =
            serde_json::from_str(text).map_err(|e| MolexError::Format(format!("bundle: {e}")))?;
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != BUNDLE_SCHEMA {
            return Err(MolexError::Format(format!(
                "unexpected bundle schema {:?}",
                self.schema
            )));
        }
        self.vib.validate()?;
        self.efpca.validate()?;
        let p = self.efpca.components.cols;
        let consistent = self.vib.d == self.embedding_dim
            && self.efpca.num_samples == self.vib.k
            && self.split.dim() == p
            && self.split.d_c <= self.efpca.num_components()
            && !self.heads.is_empty()
            && self.heads.iter().all(|h| {
                h.model.h.dim() == self.split.d_c
                    && h.model.w_r.0.len() == self.split.d_r
                    && h.class < self.classes
                    && h.attribution
                        .as_ref()
                        .is_none_or(|o| o.d == self.embedding_dim)
            });
        if !consistent {
            return Err(MolexError::Format(
                "bundle stages have inconsistent dimensions".into(),
            ));
        }
        Ok(())
    }
}

/// One entry per training stage in the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetric {
    pub stage: String,
    pub wall_time_us: u64,
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stages: Vec<StageMetric>,
    pub train_accuracy: f64,
    pub train_accuracy_uncalibrated: f64,
    pub wall_time_us: u64,
}

fn elapsed_us(start: Instant) -> u64 {
    start.elapsed().as_micros() as u64
}

fn stage<T>(
    stages: &mut Vec<StageMetric>,
    name: &'static str,
    f: impl FnOnce() -> Result<(T, serde_json::Value)>,
) -> Result<T> {
    let start = Instant::now();
    let (value, details) = f().map_err(|e| e.in_stage(name))?;
    stages.push(StageMetric {
        stage: name.to_string(),
        wall_time_us: elapsed_us(start),
        details,
    });
    Ok(value)
}

/// Deterministic `(train, val)` index split.
pub fn holdout_split(len: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    if fraction <= 0.0 || len < 2 {
        return (idx, Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_da7a);
    idx.shuffle(&mut rng);
    let n_val = ((len as f64 * fraction).round() as usize).clamp(1, len - 1);
    let val = idx.split_off(len - n_val);
    (idx, val)
}

fn head_classes(classes: usize) -> Vec<usize> {
    if classes == 2 {
        vec![1]
    } else {
        (0..classes).collect()
    }
}

fn targets_for(labels: &[usize], class: usize) -> Vec<f64> {
    labels
        .iter()
        .map(|&y| if y == class { 1.0 } else { 0.0 })
        .collect()
}

/// Runs every stage and returns the bundle with its metrics.
pub fn train(
    config: &PipelineConfig,
    molecules: &[Molecule],
    table: &EmbeddingTable,
    exec: Exec,
) -> Result<(PipelineBundle, TrainReport)> {
    config.validate()?;
    if molecules.is_empty() {
        return Err(MolexError::Data("empty training set".into()));
    }
    let total = Instant::now();
    let mut stages = Vec::with_capacity(STAGES.len());

    stage(&mut stages, "tokenize", || {
        let mut ngrams = 0usize;
        let mut tokens = 0usize;
        for m in molecules {
            m.validate()?;
            if tokenize(&detokenize(&m.tokens)?)? != m.tokens {
                return Err(MolexError::Data(format!(
                    "molecule {} does not round-trip",
                    m.id
                )));
            }
            tokens += m.tokens.len();
            ngrams += extract_ngrams(&m.tokens, config.n)?.len();
        }
        Ok((
            (),
            serde_json::json!({ "molecules": molecules.len(), "tokens": tokens, "ngrams": ngrams }),
        ))
    })?;

    let embeddings = stage(&mut stages, "embed", || {
        let e = exec.try_map(molecules, |m| {
            embed_molecule(table, m, config.n, config.oov)
        })?;
        let details = serde_json::json!({ "dim": table.dim(), "fingerprint": table.fingerprint() });
        Ok((e, details))
    })?;

    let labels: Vec<usize> = molecules.iter().map(|m| m.label).collect();
    let vib = stage(&mut stages, "vib_train", || {
        let data: Vec<Example> = embeddings
            .iter()
            .zip(&labels)
            .map(|(e, &y)| Example {
                x: e.vector.clone(),
                y,
            })
            .collect();
        let fit = vib_train(&data, config.latent_dim, &config.vib_config(), config.beta)?;
        let details = serde_json::json!({
            "epochs": fit.loss_trace.len(),
            "final_loss": fit.loss_trace.last().copied(),
        });
        Ok((fit.model, details))
    })?;
    let classes = vib.classes;

    let latents: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| vib.enc_mu.apply(&e.vector))
        .collect();
    let efpca = stage(&mut stages, "efpca_fit", || {
        let model = fit_efpca(&latents, &config.efpca, exec)?;
        let details = serde_json::json!({
            "components": model.num_components(),
            "p": model.components.cols,
            "variances": model.variances.0,
            "support_lengths": model.supports_len.0,
        });
        Ok((model, details))
    })?;

    let (split, zs) = stage(&mut stages, "split", || {
        let split = make_split(&efpca, efpca.num_components())?;
        let projector = efpca.projector()?;
        let zs = latents
            .iter()
            .map(|t| split.whiten(&projector.project(t)?))
            .collect::<Result<Vec<_>>>()?;
        let details = serde_json::json!({ "d_c": split.d_c, "d_r": split.d_r });
        Ok(((split, zs), details))
    })?;

    let (fit_idx, val_idx) = if config.calibration.early_stop {
        holdout_split(
            molecules.len(),
            config.calibration.val_fraction,
            config.seed,
        )
    } else {
        ((0..molecules.len()).collect(), Vec::new())
    };
    let head_ids = head_classes(classes);

    let logistic = stage(&mut stages, "logistic_fit", || {
        let mut out = Vec::with_capacity(head_ids.len());
        let mut info = Vec::new();
        for &class in &head_ids {
            let ys = targets_for(&labels, class);
            let feats = fit_idx
                .iter()
                .map(|&i| split.explainable_coords(&zs[i]))
                .collect::<Result<Vec<_>>>()?;
            let targets: Vec<f64> = fit_idx.iter().map(|&i| ys[i]).collect();
            let h = logistic_fit(&feats, &targets, &config.logistic)?;
            info.push(serde_json::json!({
                "class": class,
                "converged": h.converged,
                "iterations": h.iterations,
                "grad_norm": h.grad_norm,
            }));
            out.push(h);
        }
        Ok((out, serde_json::Value::Array(info)))
    })?;

    let heads = stage(&mut stages, "calibrate", || {
        let mut out = Vec::with_capacity(head_ids.len());
        let mut info = Vec::new();
        for (&class, h) in head_ids.iter().zip(&logistic) {
            let ys = targets_for(&labels, class);
            let pick = |idx: &[usize]| -> Vec<SplitExample> {
                idx.iter()
                    .map(|&i| SplitExample {
                        z: zs[i].clone(),
                        y: ys[i],
                    })
                    .collect()
            };
            let train_set = pick(&fit_idx);
            let val_set = pick(&val_idx);
            let model = calibrate(
                h,
                &split,
                &train_set,
                (!val_set.is_empty()).then_some(val_set.as_slice()),
                config.calibration.iterations,
                config.calibration.step_size,
            )?;
            let attribution = attribution_ols(&embeddings, &labels, class)?;
            info.push(serde_json::json!({
                "class": class,
                "iterations_run": model.iterations_run,
                "history": model.history,
                "attribution": attribution.is_some(),
            }));
            out.push(ClassHead {
                class,
                model,
                attribution,
            });
        }
        Ok((out, serde_json::Value::Array(info)))
    })?;

    let bundle = PipelineBundle {
        schema: BUNDLE_SCHEMA.to_string(),
        config: config.clone(),
        embedding_fingerprint: table.fingerprint(),
        embedding_dim: table.dim(),
        classes,
        vib,
        efpca,
        split,
        heads,
    };
    let pipeline = Pipeline::new(bundle.clone())?;
    let with = pipeline.predict_features(&zs, true)?;
    let without = pipeline.predict_features(&zs, false)?;
    let acc = |preds: &[Prediction]| {
        let p: Vec<usize> = preds.iter().map(|p| p.class).collect();
        accuracy(&confusion_matrix(&labels, &p, classes))
    };
    let report = TrainReport {
        train_accuracy: acc(&with),
        train_accuracy_uncalibrated: acc(&without),
        stages,
        wall_time_us: elapsed_us(total),
    };
    Ok((bundle, report))
}

/// OLS of the head's centered 0/1 target on every training n-gram
/// embedding; `None` when the design is rank deficient.
fn attribution_ols(
    embeddings: &[crate::embedding::MoleculeEmbedding],
    labels: &[usize],
    class: usize,
) -> Result<Option<OlsModel>> {
    let rows: Vec<(&[f64], f64)> = embeddings
        .iter()
        .zip(labels)
        .flat_map(|(e, &y)| {
            let t = if y == class { 1.0 } else { 0.0 };
            e.per_ngram.iter().map(move |g| (g.vector.as_slice(), t))
        })
        .collect();
    let d = rows.first().map(|r| r.0.len()).unwrap_or(0);
    if rows.len() <= d {
        return Ok(None);
    }
    let mean = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    let e = DMatrix::from_fn(rows.len(), d, |i, j| rows[i].0[j]);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1 - mean));
    match ols_fit(&e, &y) {
        Ok(m) => Ok(Some(m)),
        Err(MolexError::Numeric(_)) => Ok(None),
        Err(other) => Err(other),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Probability of `class` under its head (of class 1 for binary data).
    pub prob: f64,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoleculeExplanation {
    pub id: String,
    pub prediction: Prediction,
    #[serde(flatten)]
    pub report: ContributionReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

/// A loaded bundle with its derived matrices.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub bundle: PipelineBundle,
    projector: CurveProjector,
    /// Rows of `[U V]^T W P` applied to the latent mean; see `feature_map`.
    latent_to_features: DMatrix<f64>,
    feature_offset: DVector<f64>,
}

impl Pipeline {
    pub fn new(bundle: PipelineBundle) -> Result<Self> {
        bundle.validate()?;
        let projector = bundle.efpca.projector()?;
        let split = &bundle.split;
        let w = split.whitener.to_matrix()?;
        let u = split.u_matrix()?;
        let v = split.v_matrix()?;
        let uv = DMatrix::from_fn(split.dim(), split.dim(), |i, j| {
            if i < split.d_c {
                u[(j, i)]
            } else {
                v[(j, i - split.d_c)]
            }
        });
        let whitened = &uv * &w;
        let latent_to_features = &whitened * &projector.matrix;
        let mean = DVector::from_column_slice(&split.mean_coeffs.0);
        let feature_offset = -(&whitened * mean);
        Ok(Pipeline {
            bundle,
            projector,
            latent_to_features,
            feature_offset,
        })
    }

    /// Loads against an embedding table, which must match the fingerprint.
    pub fn with_table(bundle: PipelineBundle, table: &EmbeddingTable) -> Result<Self> {
        if table.fingerprint() != bundle.embedding_fingerprint {
            return Err(MolexError::Mismatch(
                "embedding table fingerprint differs from the one the bundle was trained with"
                    .into(),
            ));
        }
        Self::new(bundle)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.bundle.config
    }

    /// Composed affine map `e -> T e + offset` from embedding space to the
    /// stacked `[f_H, f_R]` feature coordinates.
    pub fn feature_map(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let vib = &self.bundle.vib.enc_mu;
        let w_mu = DMatrix::from_row_slice(vib.out, vib.inp, &vib.weights.0);
        let b_mu = DVector::from_column_slice(&vib.bias.0);
        let t = &self.latent_to_features * w_mu;
        let offset = &self.latent_to_features * b_mu + &self.feature_offset;
        Ok((t, offset))
    }

    /// Whitened features `z` of a molecule embedding.
    pub fn features(&self, embedding: &[f64]) -> Result<DVector<f64>> {
        if embedding.len() != self.bundle.embedding_dim {
            return Err(MolexError::Argument(format!(
                "expected {}-dimensional embedding",
                self.bundle.embedding_dim
            )));
        }
        let latent = self.bundle.vib.enc_mu.apply(embedding);
        self.bundle.split.whiten(&self.projector.project(&latent)?)
    }

    fn head(&self, class: usize) -> Result<&ClassHead> {
        self.bundle
            .heads
            .iter()
            .find(|h| h.class == class)
            .ok_or_else(|| MolexError::State(format!("no head for class {class}")))
    }

    fn logit(
        head: &ClassHead,
        split: &FeatureSplit,
        z: &DVector<f64>,
        calibrated: bool,
    ) -> Result<f64> {
        let parts = head.model.parts(split, z)?;
        Ok(if calibrated { parts.total() } else { parts.h })
    }

    fn predict_z(&self, z: &DVector<f64>, calibrated: bool) -> Result<Prediction> {
        let split = &self.bundle.split;
        if self.bundle.classes == 2 {
            let prob = sigmoid(Self::logit(&self.bundle.heads[0], split, z, calibrated)?);
            return Ok(Prediction {
                prob,
                class: usize::from(prob >= 0.5),
            });
        }
        let mut best = Prediction {
            prob: f64::NEG_INFINITY,
            class: 0,
        };
        for head in &self.bundle.heads {
            let prob = sigmoid(Self::logit(head, split, z, calibrated)?);
            if prob > best.prob {
                best = Prediction {
                    prob,
                    class: head.class,
                };
            }
        }
        Ok(best)
    }

    fn predict_features(&self, zs: &[DVector<f64>], calibrated: bool) -> Result<Vec<Prediction>> {
        zs.iter().map(|z| self.predict_z(z, calibrated)).collect()
    }

    pub fn predict_one(
        &self,
        table: &EmbeddingTable,
        m: &Molecule,
        calibrated: bool,
    ) -> Result<Prediction> {
        let cfg = self.config();
        let e = embed_molecule(table, m, cfg.n, cfg.oov)?;
        self.predict_z(&self.features(&e.vector)?, calibrated)
    }

    pub fn predict(
        &self,
        table: &EmbeddingTable,
        molecules: &[Molecule],
        calibrated: bool,
        exec: Exec,
    ) -> Result<Vec<Prediction>> {
        exec.try_map(molecules, |m| self.predict_one(table, m, calibrated))
    }

    /// Effective weight of the head for `class` in embedding space.
    pub fn effective_weight(&self, class: usize, calibrated: bool) -> Result<EffectiveWeight> {
        let head = self.head(class)?;
        let (t, offset) = self.feature_map()?;
        let h = &head.model.h;
        let r = if calibrated {
            head.model.w_r.0.clone()
        } else {
            vec![0.0; head.model.w_r.0.len()]
        };
        let w_total = DVector::from_iterator(t.nrows(), h.w.0.iter().chain(&r).copied());
        let bias = h.b + if calibrated { head.model.b_r } else { 0.0 };
        effective_weight(&t, &offset, &w_total, bias)
    }

    /// Class whose head explains a prediction.
    fn explained_class(&self, predicted: usize) -> usize {
        if self.bundle.classes == 2 {
            1
        } else {
            predicted
        }
    }

    pub fn explain_one(
        &self,
        table: &EmbeddingTable,
        m: &Molecule,
        calibrated: bool,
    ) -> Result<MoleculeExplanation> {
        let prediction = self.predict_one(table, m, calibrated)?;
        let class = self.explained_class(prediction.class);
        let eff = self.effective_weight(class, calibrated)?;
        let cfg = self.config();
        let identity = |v: &[f64]| v.to_vec();
        let ols = self
            .head(class)?
            .attribution
            .as_ref()
            .map(|o| (o, &identity as &dyn Fn(&[f64]) -> Vec<f64>));
        let report = token_contributions(table, m, cfg.n, cfg.oov, &eff, ols, cfg.pair_threshold)?;
        let auc = match &m.gt_mask {
            Some(mask) if mask.contains(&0) && mask.contains(&1) => {
                let scores: Vec<f64> = report.tokens.iter().map(|t| t.score).collect();
                Some(explanation_auc(&scores, mask)?)
            }
            _ => None,
        };
        Ok(MoleculeExplanation {
            id: m.id.clone(),
            prediction,
            report,
            auc,
        })
    }

    pub fn explain(
        &self,
        table: &EmbeddingTable,
        molecules: &[Molecule],
        calibrated: bool,
        exec: Exec,
    ) -> Result<Vec<MoleculeExplanation>> {
        exec.try_map(molecules, |m| self.explain_one(table, m, calibrated))
    }

    pub fn evaluate(
        &self,
        table: &EmbeddingTable,
        molecules: &[Molecule],
        calibrated: bool,
        exec: Exec,
    ) -> Result<EvalReport> {
        let start = Instant::now();
        let explanations = self.explain(table, molecules, calibrated, exec)?;
        let labels: Vec<usize> = molecules.iter().map(|m| m.label).collect();
        let predicted: Vec<usize> = explanations.iter().map(|e| e.prediction.class).collect();
        let classes = self
            .bundle
            .classes
            .max(labels.iter().map(|&l| l + 1).max().unwrap_or(0));
        let confusion = confusion_matrix(&labels, &predicted, classes);
        let aucs: Vec<f64> = explanations.iter().filter_map(|e| e.auc).collect();
        Ok(EvalReport {
            classification_accuracy: accuracy(&confusion),
            explanation_auc: (!aucs.is_empty())
                .then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
            auc_molecules: aucs.len(),
            auc_excluded: molecules.len() - aucs.len(),
            confusion,
            wall_time_us: elapsed_us(start),
        })
    }

    /// Mean over heads of the one-vs-rest log loss.
    pub fn log_loss(
        &self,
        table: &EmbeddingTable,
        molecules: &[Molecule],
        calibrated: bool,
    ) -> Result<f64> {
        let cfg = self.config();
        let zs = molecules
            .iter()
            .map(|m| self.features(&embed_molecule(table, m, cfg.n, cfg.oov)?.vector))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = molecules.iter().map(|m| m.label).collect();
        let mut total = 0.0;
        for head in &self.bundle.heads {
            let logits = zs
                .iter()
                .map(|z| Self::logit(head, &self.bundle.split, z, calibrated))
                .collect::<Result<Vec<_>>>()?;
            total += log_loss(&logits, &targets_for(&labels, head.class));
        }
        Ok(total / self.bundle.heads.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    N,
    #[serde(rename = "K")]
    K,
    Rho,
    Beta,
    Iterations,
}

impl std::str::FromStr for SweepAxis {
    type Err = MolexError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(SweepAxis::N),
            "K" | "k" => Ok(SweepAxis::K),
            "rho" => Ok(SweepAxis::Rho),
            "beta" => Ok(SweepAxis::Beta),
            "iterations" => Ok(SweepAxis::Iterations),
            other => Err(MolexError::Argument(format!(
                "unknown sweep axis {other:?}; expected n, K, rho, beta or iterations"
            ))),
        }
    }
}

impl SweepAxis {
    fn apply(self, config: &mut PipelineConfig, value: f64) -> Result<()> {
        let count = || {
            if value >= 0.0 && value.fract() == 0.0 && value <= usize::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(MolexError::Argument(format!(
                    "{value} is not a valid count"
                )))
            }
        };
        match self {
            SweepAxis::N => config.n = count()?,
            SweepAxis::K => config.efpca.components = count()?,
            SweepAxis::Rho => config.efpca.rho = value,
            SweepAxis::Beta => config.beta = value,
            SweepAxis::Iterations => config.calibration.iterations = count()?,
        }
        config.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub accuracy: f64,
    pub auc: f64,
    pub time_us: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

impl SweepRow {
    fn failed(value: f64) -> Self {
        SweepRow {
            value,
            accuracy: f64::NAN,
            auc: f64::NAN,
            time_us: f64::NAN,
            train_loss: f64::NAN,
            val_loss: f64::NAN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<(f64, String)>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("value,accuracy,auc,time_us,train_loss,val_loss\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.value, r.accuracy, r.auc, r.time_us, r.train_loss, r.val_loss
            ));
        }
        out
    }
}

/// One pipeline per value with a shared seed. Metrics are measured on a
/// held-out part of the data when `calibration.val_fraction > 0`.
pub fn sweep(
    config: &PipelineConfig,
    axis: SweepAxis,
    values: &[f64],
    molecules: &[Molecule],
    table: &EmbeddingTable,
    exec: Exec,
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(MolexError::Argument(
            "sweep needs at least one value".into(),
        ));
    }
    let (train_idx, val_idx) = holdout_split(
        molecules.len(),
        config.calibration.val_fraction,
        config.seed,
    );
    let train_set: Vec<Molecule> = train_idx.iter().map(|&i| molecules[i].clone()).collect();
    let val_set: Vec<Molecule> = val_idx.iter().map(|&i| molecules[i].clone()).collect();
    let eval_set = if val_set.is_empty() {
        &train_set
    } else {
        &val_set
    };

    let mut rows = Vec::with_capacity(values.len());
    let mut failures = Vec::new();
    for &value in values {
        let run = || -> Result<SweepRow> {
            let mut cfg = config.clone();
            axis.apply(&mut cfg, value)?;
            let start = Instant::now();
            let (bundle, _) = train(&cfg, &train_set, table, exec)?;
            let pipeline = Pipeline::new(bundle)?;
            let report = pipeline.evaluate(table, eval_set, true, exec)?;
            let time_us = elapsed_us(start) as f64;
            Ok(SweepRow {
                value,
                accuracy: report.classification_accuracy,
                auc: report.explanation_auc.unwrap_or(f64::NAN),
                time_us,
                train_loss: pipeline.log_loss(table, &train_set, true)?,
                val_loss: if val_set.is_empty() {
                    f64::NAN
                } else {
                    pipeline.log_loss(table, &val_set, true)?
                },
            })
        };
        match run() {
            Ok(row) => rows.push(row),
            Err(e) => {
                failures.push((value, e.to_string()));
                rows.push(SweepRow::failed(value));
            }
        }
    }
    Ok(SweepResult { rows, failures })
}
