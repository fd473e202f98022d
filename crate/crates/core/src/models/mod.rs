//! Predictor families behind one train / predict / save contract.
//!
//! Every family trains on a [`Dataset`] whose rows are first put into a
//! canonical order, so the fitted model depends only on the multiset of
//! training rows and the configuration, never on the order rows arrive in.

pub mod binning;
pub mod forest;
pub mod gbdt;
pub mod kan;
pub mod mlp;
pub mod nn;

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matrix::{FeatureMatrix, Matrix};

pub use forest::{ForestModel, ForestParams, SplitSearch};
pub use gbdt::{GbdtModel, GbdtParams};
pub use kan::{KanNet, KanParams};
pub use mlp::{MlpNet, MlpParams};
pub use nn::NeuralModel;

pub const MODEL_FORMAT: &str = "dilution-lab-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    BinaryClassification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gbdt,
    RandomForest,
    Mlp,
    Kan,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Gbdt, Family::RandomForest, Family::Mlp, Family::Kan];

    pub fn name(self) -> &'static str {
        match self {
            Family::Gbdt => "gbdt",
            Family::RandomForest => "random_forest",
            Family::Mlp => "mlp",
            Family::Kan => "kan",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FamilyParams {
    Gbdt(GbdtParams),
    RandomForest(ForestParams),
    Mlp(MlpParams),
    Kan(KanParams),
}

impl FamilyParams {
    pub fn family(&self) -> Family {
        match self {
            FamilyParams::Gbdt(_) => Family::Gbdt,
            FamilyParams::RandomForest(_) => Family::RandomForest,
            FamilyParams::Mlp(_) => Family::Mlp,
            FamilyParams::Kan(_) => Family::Kan,
        }
    }

    pub fn default_for(family: Family) -> Self {
        match family {
            Family::Gbdt => FamilyParams::Gbdt(GbdtParams::default()),
            Family::RandomForest => FamilyParams::RandomForest(ForestParams::default()),
            Family::Mlp => FamilyParams::Mlp(MlpParams::default()),
            Family::Kan => FamilyParams::Kan(KanParams::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub params: FamilyParams,
    #[serde(default)]
    pub seed: u64,
    /// Boosting rounds for GBDT, epochs for MLP/KAN; unused by forests.
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    /// Stop after this many rounds without validation improvement.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Weight of positive examples in classification. `None` uses the
    /// negatives/positives ratio of the training split, floored at 1.
    #[serde(default)]
    pub positive_weight: Option<f64>,
}

fn default_max_rounds() -> usize {
    200
}

impl TrainConfig {
    pub fn new(task: Task, params: FamilyParams) -> Self {
        Self {
            task,
            params,
            seed: 0,
            max_rounds: default_max_rounds(),
            patience: Some(20),
            positive_weight: None,
        }
    }

    pub fn family(&self) -> Family {
        self.params.family()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.positive_weight {
            if !(w >= 1.0 && w.is_finite()) {
                return Err(LabError::Config("positive_weight must be finite and >= 1".into()));
            }
        }
        if self.patience == Some(0) {
            return Err(LabError::Config("patience must be at least 1".into()));
        }
        match &self.params {
            FamilyParams::Gbdt(p) => p.validate(),
            FamilyParams::RandomForest(p) => p.validate(),
            FamilyParams::Mlp(p) => p.validate(),
            FamilyParams::Kan(p) => p.validate(),
        }
    }
}

/// Training inputs: features, targets, and which columns are continuous.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: FeatureMatrix,
    pub y: Vec<f64>,
    pub continuous: Vec<bool>,
}

impl Dataset {
    pub fn new(x: FeatureMatrix, y: Vec<f64>, continuous: Vec<bool>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(LabError::Data(format!(
                "{} feature rows but {} targets",
                x.rows(),
                y.len()
            )));
        }
        if continuous.len() != x.x.cols() {
            return Err(LabError::Data("continuous mask does not match column count".into()));
        }
        Ok(Self { x, y, continuous })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.x.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            continuous: self.continuous.clone(),
        }
    }

    /// Copy with rows sorted by (features, target), compared bitwise.
    pub fn canonical(&self) -> Dataset {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let key = |i: usize| self.x.x.row(i);
        order.sort_by(|&a, &b| {
            for (u, v) in key(a).iter().zip(key(b)) {
                match u.total_cmp(v) {
                    Ordering::Equal => continue,
                    o => return o,
                }
            }
            self.y[a].total_cmp(&self.y[b])
        });
        self.subset(&order)
    }
}

/// Per-row weights: `positive_weight` on label-1 rows for classification,
/// 1 elsewhere.
pub fn sample_weights(task: Task, y: &[f64], positive_weight: Option<f64>) -> Vec<f64> {
    match task {
        Task::Regression => vec![1.0; y.len()],
        Task::BinaryClassification => {
            let w = positive_weight.unwrap_or_else(|| auto_positive_weight(y));
            y.iter().map(|&t| if t > 0.5 { w } else { 1.0 }).collect()
        }
    }
}

/// negatives / positives on the given labels, floored at 1.
pub fn auto_positive_weight(y: &[f64]) -> f64 {
    let pos = y.iter().filter(|&&t| t > 0.5).count();
    let neg = y.len() - pos;
    if pos == 0 {
        1.0
    } else {
        (neg as f64 / pos as f64).max(1.0)
    }
}

pub(crate) fn check_targets(task: Task, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(LabError::Data("empty training split".into()));
    }
    if let Some(v) = data.y.iter().find(|v| !v.is_finite()) {
        return Err(LabError::Data(format!("non-finite target {v}")));
    }
    if task == Task::BinaryClassification {
        if data.y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(LabError::Data("classification targets must be 0 or 1".into()));
        }
        let pos = data.y.iter().filter(|&&v| v == 1.0).count();
        if pos == 0 || pos == data.len() {
            return Err(LabError::Data(
                "classification training split contains a single class".into(),
            ));
        }
    }
    Ok(())
}

/// Weighted loss used for early stopping and reporting: log loss for
/// classification (on probabilities), mean squared error for regression.
pub fn weighted_loss(task: Task, predictions: &[f64], y: &[f64], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut wsum = 0.0;
    for ((p, t), w) in predictions.iter().zip(y).zip(weights) {
        let l = match task {
            Task::BinaryClassification => {
                let p = p.clamp(1e-15, 1.0 - 1e-15);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            }
            Task::Regression => (p - t) * (p - t),
        };
        total += w * l;
        wsum += w;
    }
    if wsum > 0.0 {
        total / wsum
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelParams {
    Gbdt(GbdtModel),
    RandomForest(ForestModel),
    Mlp(NeuralModel<MlpNet>),
    Kan(NeuralModel<KanNet>),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub rounds_used: usize,
    pub final_val_loss: Option<f64>,
    pub final_train_loss: f64,
    pub oob_mse: Option<f64>,
    pub n_train: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format: String,
    pub version: u32,
    pub family: Family,
    pub task: Task,
    pub fingerprint: String,
    pub n_features: usize,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub metadata: TrainingMetadata,
}

impl TrainedModel {
    fn raw_predict_row(&self, row: &[f64]) -> f64 {
        match &self.params {
            ModelParams::Gbdt(m) => m.predict_row(row),
            ModelParams::RandomForest(m) => m.predict_row(row),
            ModelParams::Mlp(m) => m.predict_row(row),
            ModelParams::Kan(m) => m.predict_row(row),
        }
    }

    pub fn check_input(&self, x: &FeatureMatrix) -> Result<()> {
        if x.fingerprint != self.fingerprint {
            return Err(LabError::FingerprintMismatch {
                expected: self.fingerprint.clone(),
                found: x.fingerprint.clone(),
            });
        }
        if x.rows() > 0 && x.x.cols() != self.n_features {
            return Err(LabError::Data(format!(
                "model expects {} features, input has {}",
                self.n_features,
                x.x.cols()
            )));
        }
        Ok(())
    }
}

/// Scores (probabilities) for classifiers, amounts for regressors.
pub fn predict(model: &TrainedModel, x: &FeatureMatrix) -> Result<Vec<f64>> {
    model.check_input(x)?;
    Ok(predict_matrix(model, &x.x))
}

fn predict_matrix(model: &TrainedModel, x: &Matrix) -> Vec<f64> {
    (0..x.rows())
        .into_par_iter()
        .map(|i| model.raw_predict_row(x.row(i)))
        .collect()
}

/// Trains the configured family; `val` drives early stopping when given.
pub fn train(config: &TrainConfig, train: &Dataset, val: Option<&Dataset>) -> Result<TrainedModel> {
    config.validate()?;
    check_targets(config.task, train)?;
    if let Some(v) = val {
        if v.x.fingerprint != train.x.fingerprint || v.n_features() != train.n_features() {
            return Err(LabError::Data("validation layout differs from training layout".into()));
        }
    }
    let train = train.canonical();
    let val = val.map(Dataset::canonical);
    let val = val.as_ref().filter(|v| !v.is_empty());
    let (params, metadata) = match &config.params {
        FamilyParams::Gbdt(p) => {
            let (m, meta) = gbdt::train(p, config, &train, val)?;
            (ModelParams::Gbdt(m), meta)
        }
        FamilyParams::RandomForest(p) => {
            let (m, meta) = forest::train(p, config, &train)?;
            (ModelParams::RandomForest(m), meta)
        }
        FamilyParams::Mlp(p) => {
            let (m, meta) = nn::train(MlpNet::builder(p), &p.optimizer(), config, &train, val)?;
            (ModelParams::Mlp(m), meta)
        }
        FamilyParams::Kan(p) => {
            let (m, meta) = nn::train(KanNet::builder(p), &p.optimizer(), config, &train, val)?;
            (ModelParams::Kan(m), meta)
        }
    };
    let mut model = TrainedModel {
        format: MODEL_FORMAT.into(),
        version: MODEL_FORMAT_VERSION,
        family: config.family(),
        task: config.task,
        fingerprint: train.x.fingerprint.clone(),
        n_features: train.n_features(),
        config: config.clone(),
        params,
        metadata,
    };
    model.metadata.n_train = train.len();
    if let Some(v) = val {
        let pred = predict_matrix(&model, &v.x.x);
        let w = sample_weights(config.task, &v.y, config.positive_weight.or(Some(auto_positive_weight(&train.y))));
        model.metadata.final_val_loss = Some(weighted_loss(config.task, &pred, &v.y, &w));
    }
    Ok(model)
}

/// Trains every configuration and keeps the one with the lowest validation
/// loss (first wins ties). Returns the winner and each candidate's loss.
pub fn train_grid(
    configs: &[TrainConfig],
    train_set: &Dataset,
    val: &Dataset,
) -> Result<(TrainedModel, Vec<f64>)> {
    if configs.is_empty() {
        return Err(LabError::Config("empty hyperparameter grid".into()));
    }
    let mut best: Option<TrainedModel> = None;
    let mut losses = Vec::with_capacity(configs.len());
    for cfg in configs {
        let model = train(cfg, train_set, Some(val))?;
        let loss = model.metadata.final_val_loss.unwrap_or(model.metadata.final_train_loss);
        losses.push(loss);
        let better = best.as_ref().is_none_or(|b| {
            loss < b.metadata.final_val_loss.unwrap_or(b.metadata.final_train_loss)
        });
        if better {
            best = Some(model);
        }
    }
    Ok((best.unwrap(), losses))
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    let bytes = serde_json::to_vec(model)?;
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    let model: TrainedModel = serde_json::from_slice(&bytes)?;
    if model.format != MODEL_FORMAT {
        return Err(LabError::Data(format!("{}: not a model file", path.display())));
    }
    if model.version != MODEL_FORMAT_VERSION {
        return Err(LabError::Data(format!(
            "{}: model format version {} (supported: {MODEL_FORMAT_VERSION})",
            path.display(),
            model.version
        )));
    }
    if model.family != model.config.family() {
        return Err(LabError::Data(format!("{}: family tag disagrees with parameters", path.display())));
    }
    Ok(model)
}

/// Loads a model and checks it was trained on the expected feature layout.
pub fn load_model_for(path: &Path, fingerprint: &str) -> Result<TrainedModel> {
    let model = load_model(path)?;
    if model.fingerprint != fingerprint {
        return Err(LabError::FingerprintMismatch {
            expected: fingerprint.to_string(),
            found: model.fingerprint,
        });
    }
    Ok(model)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
