//! Experiment runner: per-window retraining, evaluation, ablation and
//! randomization checks, with every artifact written under one run directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{parse_invoices, parse_macro, InvoiceRecord, MacroObservation};
use crate::error::{LabError, Result, ResultExt};
use crate::feature_engine::{
    build_features, feature_dictionary, FeatureLayout, FeatureOptions, FeatureRow, HistoryKnowledge,
};
use crate::metrics::{self, BinnedReport, ClassificationReport, RegressionReport};
use crate::models::{
    self, derive_seed, Family, FamilyParams, ForestParams, GbdtParams, KanParams, MlpParams, Task,
    TrainConfig,
};
use crate::synthgen::{self, GeneratorConfig, GroundTruth};
use crate::two_stage::{
    self, EnsembleMode, LabeledMatrix, Stage2Rows, ThresholdPolicy, TwoStageConfig, TwoStageModel,
};
use crate::windowing::{self, make_windows, year_range, Split, SplitMode, WindowSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Files {
        invoices: PathBuf,
        #[serde(default)]
        macro_file: Option<PathBuf>,
        /// Generator ground truth, when the files came from `generate`.
        #[serde(default)]
        ground_truth: Option<PathBuf>,
        /// Skip malformed invoice lines instead of failing.
        #[serde(default)]
        lenient: bool,
    },
    Synthetic {
        #[serde(default)]
        generator: GeneratorConfig,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub n_windows: usize,
    pub window_years: i32,
    /// Defaults to the first issue year in the data.
    pub first_year: Option<i32>,
    /// Exclusive; defaults to the year after the last issue year.
    pub end_year: Option<i32>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            n_windows: 7,
            window_years: 4,
            first_year: None,
            end_year: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSettings {
    pub include_macro: bool,
    pub history_knowledge: HistoryKnowledge,
    pub currency: Option<String>,
}

impl Default for FeatureSettings {
    fn default() -> Self {
        Self {
            include_macro: true,
            history_knowledge: HistoryKnowledge::Issue,
            currency: None,
        }
    }
}

/// Candidate hyperparameters for one model family, with shared training
/// controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub candidates: Vec<FamilyParams>,
    #[serde(default = "default_rounds")]
    pub max_rounds: usize,
    /// Rounds without validation improvement before stopping; 0 disables.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub positive_weight: Option<f64>,
}

fn default_rounds() -> usize {
    200
}

fn default_patience() -> usize {
    15
}

impl GridConfig {
    pub fn single(params: FamilyParams, max_rounds: usize) -> Self {
        Self {
            candidates: vec![params],
            max_rounds,
            patience: default_patience(),
            positive_weight: None,
        }
    }

    pub fn family(&self) -> Result<Family> {
        let first = self
            .candidates
            .first()
            .ok_or_else(|| LabError::Config("model grid has no candidates".into()))?
            .family();
        if self.candidates.iter().any(|c| c.family() != first) {
            return Err(LabError::Config("a model grid must hold a single family".into()));
        }
        Ok(first)
    }

    pub fn train_configs(&self, task: Task, seed: u64) -> Vec<TrainConfig> {
        self.candidates
            .iter()
            .map(|p| TrainConfig {
                task,
                params: p.clone(),
                seed,
                max_rounds: self.max_rounds,
                patience: (self.patience > 0).then_some(self.patience),
                positive_weight: self.positive_weight,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationPopulation {
    /// Regressor outputs on truly diluted test rows.
    DilutedOnly,
    /// Gated two-level outputs on every test row.
    TwoLevelAll,
    #[default]
    Both,
}

impl EvaluationPopulation {
    fn diluted_only(self) -> bool {
        matches!(self, Self::DilutedOnly | Self::Both)
    }

    fn two_level_all(self) -> bool {
        matches!(self, Self::TwoLevelAll | Self::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    Avg,
    Wgt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomizationConfig {
    pub permutation_seeds: Vec<u64>,
    pub band: (f64, f64),
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        Self {
            permutation_seeds: vec![1, 2, 3, 4, 5],
            band: (0.45, 0.55),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSource,
    pub windows: WindowConfig,
    pub split: SplitMode,
    pub features: FeatureSettings,
    pub classifier: GridConfig,
    pub regressors: Vec<GridConfig>,
    pub ensembles: Vec<EnsembleKind>,
    pub threshold_policy: ThresholdPolicy,
    pub stage2_rows: Stage2Rows,
    pub evaluation: EvaluationPopulation,
    /// Lower edges of the amount bins; the top edge is the largest actual.
    pub bin_edges: Vec<f64>,
    pub randomization: RandomizationConfig,
    pub output_dir: PathBuf,
    /// Worker threads for window jobs; `None` uses the global pool.
    pub jobs: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataSource::default(),
            windows: WindowConfig::default(),
            split: SplitMode::Chronological,
            features: FeatureSettings::default(),
            classifier: GridConfig {
                candidates: vec![
                    FamilyParams::Gbdt(GbdtParams {
                        max_depth: 4,
                        learning_rate: 0.1,
                        gamma: 20.0,
                        ..Default::default()
                    }),
                    FamilyParams::Gbdt(GbdtParams {
                        max_depth: 6,
                        learning_rate: 0.1,
                        gamma: 20.0,
                        ..Default::default()
                    }),
                ],
                max_rounds: 300,
                patience: 20,
                positive_weight: None,
            },
            regressors: default_regressor_grids(),
            ensembles: vec![EnsembleKind::Avg, EnsembleKind::Wgt],
            threshold_policy: ThresholdPolicy::F1,
            stage2_rows: Stage2Rows::Diluted,
            evaluation: EvaluationPopulation::Both,
            bin_edges: vec![0.0, 100.0, 250.0, 500.0, 1000.0, 2500.0],
            randomization: RandomizationConfig::default(),
            output_dir: PathBuf::from("runs/experiment"),
            jobs: None,
        }
    }
}

pub fn default_regressor_grids() -> Vec<GridConfig> {
    vec![
        GridConfig {
            candidates: vec![FamilyParams::Gbdt(GbdtParams {
                max_depth: 4,
                learning_rate: 0.05,
                min_child_weight: 20.0,
                ..Default::default()
            })],
            max_rounds: 400,
            patience: 20,
            positive_weight: None,
        },
        GridConfig {
            candidates: vec![FamilyParams::RandomForest(ForestParams {
                n_trees: 60,
                ..Default::default()
            })],
            max_rounds: 1,
            patience: 0,
            positive_weight: None,
        },
        GridConfig {
            candidates: vec![FamilyParams::Mlp(MlpParams {
                hidden: vec![32, 16],
                learning_rate: 2e-3,
                batch_size: 128,
            })],
            max_rounds: 80,
            patience: 10,
            positive_weight: None,
        },
        GridConfig {
            candidates: vec![FamilyParams::Kan(KanParams {
                hidden: vec![8],
                learning_rate: 2e-3,
                batch_size: 128,
                ..Default::default()
            })],
            max_rounds: 80,
            patience: 10,
            positive_weight: None,
        },
    ]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml(&text).context(|| format!("config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows.n_windows == 0 || self.windows.window_years < 1 {
            return Err(LabError::Config("need at least one window of at least one year".into()));
        }
        if self.classifier.family()? != Family::Gbdt {
            return Err(LabError::Config("the stage-1 classifier must be gbdt".into()));
        }
        if self.regressors.is_empty() {
            return Err(LabError::Config("at least one stage-2 regressor grid is required".into()));
        }
        let mut fams = Vec::new();
        for g in &self.regressors {
            let f = g.family()?;
            if fams.contains(&f) {
                return Err(LabError::Config(format!("regressor family {f} listed twice")));
            }
            fams.push(f);
        }
        if self.regressors.len() < 2 && self.ensembles.contains(&EnsembleKind::Wgt) {
            return Err(LabError::Config("weighted ensemble needs at least two regressor families".into()));
        }
        if self.bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(LabError::Config("bin_edges must be strictly increasing".into()));
        }
        if self.jobs == Some(0) {
            return Err(LabError::Config("jobs must be at least 1".into()));
        }
        let (lo, hi) = self.randomization.band;
        if !(lo < hi) {
            return Err(LabError::Config("randomization band must be increasing".into()));
        }
        if let DataSource::Synthetic { generator } = &self.data {
            generator.validate()?;
        }
        for cfg in self.classifier.train_configs(Task::BinaryClassification, 0) {
            cfg.validate()?;
        }
        for g in &self.regressors {
            for cfg in g.train_configs(Task::Regression, 0) {
                cfg.validate()?;
            }
        }
        Ok(())
    }

    pub fn ensemble_modes(&self) -> Vec<EnsembleMode> {
        let mut modes: Vec<EnsembleMode> = self
            .regressors
            .iter()
            .filter_map(|g| g.family().ok())
            .map(EnsembleMode::Single)
            .collect();
        for e in &self.ensembles {
            match e {
                EnsembleKind::Avg => modes.push(EnsembleMode::Avg),
                EnsembleKind::Wgt if self.regressors.len() > 1 => modes.push(EnsembleMode::Wgt),
                EnsembleKind::Wgt => {}
            }
        }
        modes
    }
}

/// Raw inputs for a run.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub invoices: Vec<InvoiceRecord>,
    pub macro_series: Option<Vec<MacroObservation>>,
    pub truth: Option<GroundTruth>,
}

pub fn load_data(source: &DataSource) -> Result<LoadedData> {
    match source {
        DataSource::Synthetic { generator } => {
            let data = synthgen::generate(generator)?;
            Ok(LoadedData {
                invoices: data.invoices,
                macro_series: Some(data.macro_series),
                truth: Some(data.truth),
            })
        }
        DataSource::Files {
            invoices,
            macro_file,
            ground_truth,
            lenient,
        } => {
            let parsed = parse_invoices(invoices, !lenient)?;
            for r in &parsed.rejections {
                log::warn!("{}:{}: {}", invoices.display(), r.line, r.reason);
            }
            let macro_series = macro_file.as_deref().map(parse_macro).transpose()?;
            let truth = ground_truth.as_deref().map(synthgen::read_ground_truth).transpose()?;
            Ok(LoadedData {
                invoices: parsed.records,
                macro_series,
                truth,
            })
        }
    }
}

/// Featurized, labelled rows and the windows over them.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub layout: FeatureLayout,
    pub rows: Vec<FeatureRow>,
    pub n_unlabelled: usize,
    pub windows: Vec<WindowSpec>,
    /// Planted dilution probability per invoice number, when known.
    pub truth: Option<HashMap<String, f64>>,
}

pub fn prepare(config: &ExperimentConfig, data: &LoadedData, include_macro: bool) -> Result<Prepared> {
    let opts = FeatureOptions {
        history_knowledge: config.features.history_knowledge,
        currency: config.features.currency.clone(),
    };
    let empty = Vec::new();
    let series = data.macro_series.as_ref().unwrap_or(&empty);
    let all = build_features(&data.invoices, series, &opts)?;
    let n_all = all.len();
    let rows: Vec<FeatureRow> = all.into_iter().filter(|r| r.labels.is_some()).collect();
    let (lo, hi) = year_range(rows.iter().map(|r| r.issue_date))
        .ok_or_else(|| LabError::Data("no labelled invoices".into()))?;
    let first = config.windows.first_year.unwrap_or(lo);
    let end = config.windows.end_year.unwrap_or(hi);
    let windows = make_windows(first, end, config.windows.window_years, config.windows.n_windows)?;
    let truth = data.truth.as_ref().map(|t| {
        t.invoices
            .iter()
            .map(|i| (i.invoice_number.clone(), i.true_probability))
            .collect()
    });
    Ok(Prepared {
        layout: FeatureLayout::new(include_macro),
        n_unlabelled: n_all - rows.len(),
        rows,
        windows,
        truth,
    })
}

/// Train/validation/test matrices for one window.
#[derive(Debug, Clone)]
pub struct WindowData {
    pub window: WindowSpec,
    pub index: usize,
    pub seed: u64,
    pub train: LabeledMatrix,
    pub val: LabeledMatrix,
    pub test: LabeledMatrix,
    pub test_invoices: Vec<String>,
}

pub fn window_seed(config: &ExperimentConfig, index: usize) -> u64 {
    derive_seed(config.seed, index as u64)
}

pub fn window_data(
    config: &ExperimentConfig,
    prepared: &Prepared,
    index: usize,
    mode: SplitMode,
    layout: &FeatureLayout,
) -> Result<WindowData> {
    let window = &prepared.windows[index];
    let seed = window_seed(config, index);
    let idx = windowing::window_rows(window, &prepared.rows);
    let rows: Vec<&FeatureRow> = idx.iter().map(|&i| &prepared.rows[i]).collect();
    let mode = match mode {
        SplitMode::Random { seed: s } => SplitMode::Random {
            seed: derive_seed(s, index as u64),
        },
        m => m,
    };
    let assignment = windowing::split(window, &rows, mode).context(|| format!("window {}", window.id))?;
    let part = |s: Split| -> Result<(LabeledMatrix, Vec<String>)> {
        let members: Vec<&FeatureRow> = assignment.indices(s).into_iter().map(|i| rows[i]).collect();
        let keys = members.iter().map(|r| r.invoice_number.clone()).collect();
        Ok((LabeledMatrix::from_rows(&members, layout)?, keys))
    };
    let (train, _) = part(Split::Train)?;
    let (val, _) = part(Split::Val)?;
    let (test, test_invoices) = part(Split::Test)?;
    Ok(WindowData {
        window: window.clone(),
        index,
        seed,
        train,
        val,
        test,
        test_invoices,
    })
}

fn family_stream(f: Family) -> u64 {
    100 + Family::ALL.iter().position(|&g| g == f).unwrap() as u64
}

pub fn two_stage_config(config: &ExperimentConfig, seed: u64) -> Result<TwoStageConfig> {
    let regressors = config
        .regressors
        .iter()
        .map(|g| Ok(g.train_configs(Task::Regression, derive_seed(seed, family_stream(g.family()?)))))
        .collect::<Result<_>>()?;
    Ok(TwoStageConfig {
        classifier: config.classifier.train_configs(Task::BinaryClassification, derive_seed(seed, 1)),
        regressors,
        threshold_policy: config.threshold_policy,
        stage2_rows: config.stage2_rows,
    })
}

/// Fits the two-stage model from the train and validation splits only.
pub fn train_window(config: &ExperimentConfig, data: &WindowData) -> Result<TwoStageModel> {
    let cfg = two_stage_config(config, data.seed)?;
    two_stage::fit_two_stage(&data.train, &data.val, &cfg).context(|| format!("window {}", data.window.id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub model: String,
    pub weights: Vec<f64>,
    pub val_rmse: f64,
    pub diluted_only: Option<RegressionReport>,
    pub two_level_all: Option<RegressionReport>,
    pub binned: Option<BinnedReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowResult {
    pub window: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub threshold: f64,
    pub val_roc_auc: f64,
    pub classification: ClassificationReport,
    pub bayes_auc: Option<f64>,
    pub members: Vec<Family>,
    pub models: Vec<ModelEvaluation>,
}

fn bin_edges(config: &ExperimentConfig, actuals: &[f64]) -> Vec<f64> {
    let top = actuals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut edges: Vec<f64> = config.bin_edges.iter().copied().filter(|&e| e < top).collect();
    let bottom = actuals.iter().copied().fold(f64::INFINITY, f64::min);
    if edges.first().is_none_or(|&e| e > bottom) {
        edges.insert(0, bottom.min(0.0));
    }
    edges.push(top);
    edges.dedup();
    edges
}

pub fn evaluate_window(
    config: &ExperimentConfig,
    data: &WindowData,
    model: &TwoStageModel,
    truth: Option<&HashMap<String, f64>>,
) -> Result<WindowResult> {
    let ctx = || format!("window {}", data.window.id);
    let test_scores = models::predict(&model.stage1, &data.test.x)?;
    let classification =
        metrics::classification_report(&test_scores, &data.test.diluted, model.threshold).context(ctx)?;
    let val_scores = models::predict(&model.stage1, &data.val.x)?;
    let val_roc_auc = metrics::roc_auc(&val_scores, &data.val.diluted).context(ctx)?;
    let bayes_auc = match truth {
        Some(t) => {
            let p = data
                .test_invoices
                .iter()
                .map(|k| {
                    t.get(k)
                        .copied()
                        .ok_or_else(|| LabError::Data(format!("no ground truth for invoice {k}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            Some(metrics::roc_auc(&p, &data.test.diluted)?)
        }
        None => None,
    };

    let val_d = data.val.subset(&data.val.diluted_indices());
    let test_d_idx = data.test.diluted_indices();
    let test_d = data.test.subset(&test_d_idx);
    let val_members = two_stage::stage2_predictions(model, &val_d.x)?;
    let test_members = two_stage::stage2_predictions(model, &data.test.x)?;
    let test_d_members: Vec<Vec<f64>> = test_members
        .iter()
        .map(|p| test_d_idx.iter().map(|&i| p[i]).collect())
        .collect();

    let mut evaluations = Vec::new();
    for mode in config.ensemble_modes() {
        let weights = model.weights(&mode)?;
        let val_pred: Vec<f64> = two_stage::combine(&val_members, &weights);
        let val_rmse = two_stage::rmse(&val_pred, &val_d.amount);
        let (diluted_only, binned) = if config.evaluation.diluted_only() && !test_d.is_empty() {
            let pred: Vec<f64> = two_stage::combine(&test_d_members, &weights)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let report = metrics::regression_metrics(&test_d.amount, &pred).context(ctx)?;
            let edges = bin_edges(config, &test_d.amount);
            let binned = if edges.len() >= 2 {
                Some(metrics::binned_analysis(&test_d.amount, &pred, &edges)?)
            } else {
                None
            };
            (Some(report), binned)
        } else {
            (None, None)
        };
        let two_level_all = if config.evaluation.two_level_all() {
            let gated = two_stage::gate(&test_scores, model.threshold, &test_members, &weights);
            let pred: Vec<f64> = gated.iter().map(|g| g.amount).collect();
            Some(metrics::regression_metrics(&data.test.amount, &pred).context(ctx)?)
        } else {
            None
        };
        evaluations.push(ModelEvaluation {
            model: mode.name(),
            weights,
            val_rmse,
            diluted_only,
            two_level_all,
            binned,
        });
    }
    Ok(WindowResult {
        window: data.window.id.clone(),
        n_train: data.train.len(),
        n_val: data.val.len(),
        n_test: data.test.len(),
        threshold: model.threshold,
        val_roc_auc,
        classification,
        bayes_auc,
        members: model.families(),
        models: evaluations,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn window_dir(run_dir: &Path, window: &str) -> PathBuf {
    run_dir.join("windows").join(window)
}

pub const WINDOW_RESULT_FILE: &str = "window.json";

pub fn write_window_reports(run_dir: &Path, data: &WindowData, model: &TwoStageModel, result: &WindowResult) -> Result<()> {
    let dir = window_dir(run_dir, &result.window).join("reports");
    fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    write_json(&dir.join(WINDOW_RESULT_FILE), result)?;
    write_json(&dir.join("classification.json"), &result.classification)?;
    metrics::write_roc_csv(&dir.join("roc.csv"), &result.classification.curves)?;
    metrics::write_pr_csv(&dir.join("pr.csv"), &result.classification.curves)?;
    let test_d_idx = data.test.diluted_indices();
    let test_d = data.test.subset(&test_d_idx);
    let members = two_stage::stage2_predictions(model, &test_d.x)?;
    for eval in &result.models {
        if let Some(r) = &eval.diluted_only {
            let pred: Vec<f64> = two_stage::combine(&members, &eval.weights).into_iter().map(|v| v.max(0.0)).collect();
            metrics::write_scatter_csv(&dir.join(format!("scatter_{}.csv", eval.model)), &test_d.amount, &pred)?;
            metrics::write_histogram_csv(&dir.join(format!("errors_{}.csv", eval.model)), &r.error_histogram)?;
        }
        if let Some(b) = &eval.binned {
            write_json(&dir.join(format!("binned_{}.json", eval.model)), b)?;
        }
    }
    Ok(())
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<MeanSd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        Some(MeanSd { mean, sd })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRow {
    pub window: String,
    pub n_test: usize,
    pub roc_auc: f64,
    pub average_precision: f64,
    pub recall_non_diluted: Option<f64>,
    pub recall_diluted: Option<f64>,
    pub threshold: f64,
    pub bayes_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub population: String,
    pub windows: usize,
    pub r2: Option<MeanSd>,
    pub mae: Option<MeanSd>,
    pub rmse: Option<MeanSd>,
    pub mape_pct: Option<MeanSd>,
    pub wmape_pct: Option<MeanSd>,
    pub val_rmse: Option<MeanSd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub classifier: Vec<ClassifierRow>,
    pub roc_auc: Option<MeanSd>,
    pub roc_auc_spread: f64,
    pub models: Vec<ModelRow>,
}

pub fn summarize(results: &[WindowResult]) -> Summary {
    let classifier: Vec<ClassifierRow> = results
        .iter()
        .map(|r| ClassifierRow {
            window: r.window.clone(),
            n_test: r.n_test,
            roc_auc: r.classification.roc_auc,
            average_precision: r.classification.average_precision,
            recall_non_diluted: r.classification.confusion.recall_non_diluted,
            recall_diluted: r.classification.confusion.recall_diluted,
            threshold: r.threshold,
            bayes_auc: r.bayes_auc,
        })
        .collect();
    let aucs: Vec<f64> = classifier.iter().map(|c| c.roc_auc).collect();
    let spread = aucs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - aucs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut names: Vec<String> = Vec::new();
    for r in results {
        for m in &r.models {
            if !names.contains(&m.model) {
                names.push(m.model.clone());
            }
        }
    }
    let mut models = Vec::new();
    for population in ["diluted_only", "two_level_all"] {
        for name in &names {
            let evals: Vec<&ModelEvaluation> = results.iter().flat_map(|r| r.models.iter().filter(|m| &m.model == name)).collect();
            let reports: Vec<&RegressionReport> = evals
                .iter()
                .filter_map(|e| if population == "diluted_only" { e.diluted_only.as_ref() } else { e.two_level_all.as_ref() })
                .collect();
            if reports.is_empty() {
                continue;
            }
            let col = |f: &dyn Fn(&RegressionReport) -> Option<f64>| {
                let v: Vec<f64> = reports.iter().filter_map(|r| f(r)).collect();
                MeanSd::of(&v)
            };
            models.push(ModelRow {
                model: name.clone(),
                population: population.into(),
                windows: reports.len(),
                r2: col(&|r| r.r2),
                mae: col(&|r| Some(r.mae)),
                rmse: col(&|r| Some(r.rmse)),
                mape_pct: col(&|r| r.mape_pct),
                wmape_pct: col(&|r| r.wmape_pct),
                val_rmse: MeanSd::of(&evals.iter().map(|e| e.val_rmse).collect::<Vec<_>>()),
            });
        }
    }
    Summary {
        roc_auc: MeanSd::of(&aucs),
        roc_auc_spread: if aucs.is_empty() { 0.0 } else { spread },
        classifier,
        models,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn opt_ms(v: Option<MeanSd>) -> [String; 2] {
    match v {
        Some(m) => [format!("{}", m.mean), format!("{}", m.sd)],
        None => [String::new(), String::new()],
    }
}

pub fn write_summary(run_dir: &Path, summary: &Summary) -> Result<()> {
    let dir = run_dir.join("summary");
    write_json(&dir.join("summary.json"), summary)?;
    write_json(&dir.join("classifier_by_window.json"), &summary.classifier)?;
    write_json(&dir.join("model_comparison.json"), &summary.models)?;
    let path = dir.join("classifier_by_window.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| LabError::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["window", "n_test", "roc_auc", "average_precision", "recall_non_diluted", "recall_diluted", "threshold", "bayes_auc"])?;
    for c in &summary.classifier {
        w.write_record([
            c.window.clone(),
            c.n_test.to_string(),
            format!("{}", c.roc_auc),
            format!("{}", c.average_precision),
            opt(c.recall_non_diluted),
            opt(c.recall_diluted),
            format!("{}", c.threshold),
            opt(c.bayes_auc),
        ])?;
    }
    w.flush().map_err(|e| LabError::io(&path, e))?;
    let path = dir.join("model_comparison.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| LabError::Data(format!("{}: {e}", path.display())))?;
    w.write_record([
        "model", "population", "windows", "r2_mean", "r2_sd", "mae_mean", "mae_sd", "rmse_mean", "rmse_sd",
        "mape_pct_mean", "mape_pct_sd", "wmape_pct_mean", "wmape_pct_sd", "val_rmse_mean", "val_rmse_sd",
    ])?;
    for m in &summary.models {
        let mut rec = vec![m.model.clone(), m.population.clone(), m.windows.to_string()];
        for v in [m.r2, m.mae, m.rmse, m.mape_pct, m.wmape_pct, m.val_rmse] {
            rec.extend(opt_ms(v));
        }
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| LabError::io(&path, e))
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| LabError::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Lock file, feature dictionary and layout for a run directory.
pub fn write_run_header(config: &ExperimentConfig, layout: &FeatureLayout) -> Result<()> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    write_json(&dir.join("config.lock.json"), config)?;
    write_json(&dir.join("feature_dictionary.json"), &feature_dictionary())?;
    write_json(&dir.join("feature_layout.json"), layout)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub summary: Summary,
    pub windows: Vec<WindowResult>,
}

fn all_window_data(config: &ExperimentConfig, prepared: &Prepared, mode: SplitMode, layout: &FeatureLayout) -> Result<Vec<WindowData>> {
    (0..prepared.windows.len())
        .map(|i| window_data(config, prepared, i, mode, layout))
        .collect()
}

/// Fits and saves every window's two-stage bundle.
pub fn run_training(config: &ExperimentConfig) -> Result<(Prepared, Vec<WindowData>, Vec<TwoStageModel>)> {
    config.validate()?;
    let data = load_data(&config.data)?;
    let prepared = prepare(config, &data, config.features.include_macro)?;
    write_run_header(config, &prepared.layout)?;
    let windows = all_window_data(config, &prepared, config.split, &prepared.layout)?;
    let fitted: Vec<TwoStageModel> = with_pool(config.jobs, || {
        windows
            .par_iter()
            .map(|w| {
                log::info!("training window {}", w.window.id);
                let model = train_window(config, w)?;
                two_stage::save_bundle(&model, &window_dir(&config.output_dir, &w.window.id).join("models"))?;
                Ok(model)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok((prepared, windows, fitted))
}

fn finish(config: &ExperimentConfig, prepared: &Prepared, windows: &[WindowData], fitted: &[TwoStageModel]) -> Result<ExperimentOutcome> {
    let results: Vec<WindowResult> = with_pool(config.jobs, || {
        windows
            .par_iter()
            .zip(fitted)
            .map(|(w, m)| {
                let r = evaluate_window(config, w, m, prepared.truth.as_ref())?;
                write_window_reports(&config.output_dir, w, m, &r)?;
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let summary = summarize(&results);
    write_summary(&config.output_dir, &summary)?;
    Ok(ExperimentOutcome {
        run_dir: config.output_dir.clone(),
        summary,
        windows: results,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let (prepared, windows, fitted) = run_training(config)?;
    finish(config, &prepared, &windows, &fitted)
}

/// Evaluates bundles previously saved by [`run_training`].
pub fn run_evaluation(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let data = load_data(&config.data)?;
    let prepared = prepare(config, &data, config.features.include_macro)?;
    let windows = all_window_data(config, &prepared, config.split, &prepared.layout)?;
    let fitted = windows
        .iter()
        .map(|w| {
            let m = two_stage::load_bundle(&window_dir(&config.output_dir, &w.window.id).join("models"))?;
            if m.fingerprint != prepared.layout.fingerprint {
                return Err(LabError::FingerprintMismatch {
                    expected: prepared.layout.fingerprint.clone(),
                    found: m.fingerprint,
                });
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    finish(config, &prepared, &windows, &fitted)
}

/// Rebuilds the summary tables from saved per-window results.
pub fn rebuild_summary(run_dir: &Path) -> Result<Summary> {
    let root = run_dir.join("windows");
    let mut ids: Vec<String> = fs::read_dir(&root)
        .map_err(|e| LabError::io(&root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    let results = ids
        .iter()
        .map(|id| read_json(&window_dir(run_dir, id).join("reports").join(WINDOW_RESULT_FILE)))
        .collect::<Result<Vec<WindowResult>>>()?;
    let summary = summarize(&results);
    write_summary(run_dir, &summary)?;
    Ok(summary)
}

fn baseline_classifier(config: &ExperimentConfig, seed: u64) -> Vec<TrainConfig> {
    config.classifier.train_configs(Task::BinaryClassification, derive_seed(seed, 1))
}

/// The configured stage-1 grid fitted on one window, with test ROC-AUC.
/// `labels` replaces the train and validation labels.
pub fn stage1_test_auc(config: &ExperimentConfig, data: &WindowData, labels: Option<(Vec<bool>, Vec<bool>)>) -> Result<f64> {
    let mut train = data.train.clone();
    let mut val = data.val.clone();
    if let Some((t, v)) = labels {
        train.diluted = t;
        val.diluted = v;
    }
    let (model, _) = models::train_grid(
        &baseline_classifier(config, data.seed),
        &train.classification_set()?,
        &val.classification_set()?,
    )?;
    metrics::roc_auc(&models::predict(&model, &data.test.x)?, &data.test.diluted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationWindow {
    pub window: String,
    pub with_macro_auc: f64,
    pub without_macro_auc: f64,
    pub with_macro_rmse: Option<f64>,
    pub without_macro_rmse: Option<f64>,
    pub bayes_auc: Option<f64>,
    pub bayes_auc_without_macro: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub roc_auc: MeanSd,
    pub rmse: Option<MeanSd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub windows: Vec<AblationWindow>,
    pub rows: Vec<AblationRow>,
    /// Mean over windows of (with - without) test ROC-AUC.
    pub mean_auc_difference: f64,
}

/// Baseline GBDT with and without macro columns on identical splits.
pub fn run_ablation(config: &ExperimentConfig) -> Result<AblationReport> {
    config.validate()?;
    if let DataSource::Files { macro_file: None, .. } = &config.data {
        return Err(LabError::Config("ablation requires macro data: set data.macro_file".into()));
    }
    let data = load_data(&config.data)?;
    let prepared = prepare(config, &data, true)?;
    let without = FeatureLayout::new(false);
    let no_macro_truth: Option<HashMap<String, f64>> = data.truth.as_ref().map(|t| {
        t.invoices
            .iter()
            .map(|i| (i.invoice_number.clone(), i.probability_without_macro()))
            .collect()
    });
    let regressor = config
        .regressors
        .iter()
        .find(|g| g.family().ok() == Some(Family::Gbdt))
        .cloned()
        .unwrap_or_else(|| GridConfig::single(FamilyParams::Gbdt(GbdtParams::default()), 200));
    let windows: Vec<AblationWindow> = with_pool(config.jobs, || {
        (0..prepared.windows.len())
            .into_par_iter()
            .map(|i| {
                let with = window_data(config, &prepared, i, config.split, &prepared.layout)?;
                let wo = window_data(config, &prepared, i, config.split, &without)?;
                let bayes = |t: &Option<HashMap<String, f64>>| -> Result<Option<f64>> {
                    match t {
                        Some(t) => {
                            let p: Vec<f64> = with.test_invoices.iter().map(|k| t[k]).collect();
                            Ok(Some(metrics::roc_auc(&p, &with.test.diluted)?))
                        }
                        None => Ok(None),
                    }
                };
                let rmse = |d: &WindowData| -> Result<Option<f64>> {
                    let tr = d.train.subset(&d.train.diluted_indices());
                    let va = d.val.subset(&d.val.diluted_indices());
                    let te = d.test.subset(&d.test.diluted_indices());
                    if tr.is_empty() || te.is_empty() {
                        return Ok(None);
                    }
                    let cfgs = regressor.train_configs(Task::Regression, derive_seed(d.seed, family_stream(Family::Gbdt)));
                    let (m, _) = models::train_grid(&cfgs, &tr.regression_set()?, &va.regression_set()?)?;
                    let p = models::predict(&m, &te.x)?;
                    Ok(Some(two_stage::rmse(&p, &te.amount)))
                };
                Ok(AblationWindow {
                    window: with.window.id.clone(),
                    with_macro_auc: stage1_test_auc(config, &with, None)?,
                    without_macro_auc: stage1_test_auc(config, &wo, None)?,
                    with_macro_rmse: rmse(&with)?,
                    without_macro_rmse: rmse(&wo)?,
                    bayes_auc: bayes(&prepared.truth)?,
                    bayes_auc_without_macro: bayes(&no_macro_truth)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let col = |f: &dyn Fn(&AblationWindow) -> Option<f64>| MeanSd::of(&windows.iter().filter_map(f).collect::<Vec<_>>());
    let rows = vec![
        AblationRow {
            model: "gbdt_with_macro".into(),
            roc_auc: col(&|w| Some(w.with_macro_auc)).unwrap(),
            rmse: col(&|w| w.with_macro_rmse),
        },
        AblationRow {
            model: "gbdt_without_macro".into(),
            roc_auc: col(&|w| Some(w.without_macro_auc)).unwrap(),
            rmse: col(&|w| w.without_macro_rmse),
        },
    ];
    let mean_auc_difference =
        windows.iter().map(|w| w.with_macro_auc - w.without_macro_auc).sum::<f64>() / windows.len() as f64;
    let report = AblationReport {
        windows,
        rows,
        mean_auc_difference,
    };
    fs::create_dir_all(&config.output_dir).map_err(|e| LabError::io(&config.output_dir, e))?;
    write_json(&config.output_dir.join("config.lock.json"), config)?;
    write_json(&config.output_dir.join("summary").join("ablation.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomizationWindow {
    pub window: String,
    pub control_auc: f64,
    /// One per permutation seed.
    pub permuted_auc: Vec<f64>,
    pub shuffled_split_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomizationReport {
    pub seeds: Vec<u64>,
    pub band: (f64, f64),
    pub windows: Vec<RandomizationWindow>,
    /// Per seed: whether every window's permuted AUC lies in the band.
    pub seed_in_band: Vec<bool>,
    /// Mean of (shuffled-split - chronological) control AUC.
    pub shuffled_split_delta: f64,
}

fn permuted(labels: &[bool], seed: u64) -> Vec<bool> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut v = labels.to_vec();
    v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    v
}

/// Retrains stage 1 with train and validation labels permuted; also reports the
/// unpermuted control and a shuffled-split variant.
pub fn run_randomization_check(config: &ExperimentConfig) -> Result<RandomizationReport> {
    config.validate()?;
    let data = load_data(&config.data)?;
    let prepared = prepare(config, &data, config.features.include_macro)?;
    let rc = &config.randomization;
    let shuffled_mode = SplitMode::Random {
        seed: derive_seed(config.seed, 0x5eed),
    };
    let windows: Vec<RandomizationWindow> = with_pool(config.jobs, || {
        (0..prepared.windows.len())
            .into_par_iter()
            .map(|i| {
                let w = window_data(config, &prepared, i, config.split, &prepared.layout)?;
                let control_auc = stage1_test_auc(config, &w, None)?;
                let permuted_auc = rc
                    .permutation_seeds
                    .iter()
                    .map(|&s| {
                        let seed = derive_seed(s, i as u64);
                        let labels = (
                            permuted(&w.train.diluted, derive_seed(seed, 0)),
                            permuted(&w.val.diluted, derive_seed(seed, 1)),
                        );
                        stage1_test_auc(config, &w, Some(labels))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let shuffled = window_data(config, &prepared, i, shuffled_mode, &prepared.layout)?;
                Ok(RandomizationWindow {
                    window: w.window.id.clone(),
                    control_auc,
                    permuted_auc,
                    shuffled_split_auc: stage1_test_auc(config, &shuffled, None)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let (lo, hi) = rc.band;
    let seed_in_band = (0..rc.permutation_seeds.len())
        .map(|k| windows.iter().all(|w| (lo..=hi).contains(&w.permuted_auc[k])))
        .collect();
    let shuffled_split_delta =
        windows.iter().map(|w| w.shuffled_split_auc - w.control_auc).sum::<f64>() / windows.len() as f64;
    let report = RandomizationReport {
        seeds: rc.permutation_seeds.clone(),
        band: rc.band,
        windows,
        seed_in_band,
        shuffled_split_delta,
    };
    fs::create_dir_all(&config.output_dir).map_err(|e| LabError::io(&config.output_dir, e))?;
    write_json(&config.output_dir.join("config.lock.json"), config)?;
    write_json(&config.output_dir.join("summary").join("randomization.json"), &report)?;
    Ok(report)
}
