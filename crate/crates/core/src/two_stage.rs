//! Event classifier gating an ensemble of magnitude regressors.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result, ResultExt};
use crate::feature_engine::{FeatureLayout, FeatureRow};
use crate::matrix::FeatureMatrix;
use crate::models::{self, Dataset, Family, Task, TrainConfig, TrainedModel};

/// Features and labels for a set of labelled rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub x: FeatureMatrix,
    pub continuous: Vec<bool>,
    pub diluted: Vec<bool>,
    /// Dilution amount in major currency units.
    pub amount: Vec<f64>,
}

impl LabeledMatrix {
    /// Rows without labels (unpaid invoices) are a data error.
    pub fn from_rows(rows: &[&FeatureRow], layout: &FeatureLayout) -> Result<Self> {
        let mut diluted = Vec::with_capacity(rows.len());
        let mut amount = Vec::with_capacity(rows.len());
        for r in rows {
            let l = r.labels.as_ref().ok_or_else(|| {
                LabError::Data(format!("invoice {} has no labels", r.invoice_number))
            })?;
            diluted.push(l.diluted);
            amount.push(l.dilution_amount.to_major());
        }
        Ok(Self {
            x: layout.matrix(rows.iter().copied()),
            continuous: layout.continuous.clone(),
            diluted,
            amount,
        })
    }

    pub fn len(&self) -> usize {
        self.diluted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diluted.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            continuous: self.continuous.clone(),
            diluted: idx.iter().map(|&i| self.diluted[i]).collect(),
            amount: idx.iter().map(|&i| self.amount[i]).collect(),
        }
    }

    pub fn diluted_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.diluted[i]).collect()
    }

    pub fn classification_set(&self) -> Result<Dataset> {
        let y = self.diluted.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect();
        Dataset::new(self.x.clone(), y, self.continuous.clone())
    }

    pub fn regression_set(&self) -> Result<Dataset> {
        Dataset::new(self.x.clone(), self.amount.clone(), self.continuous.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    #[default]
    F1,
    /// Minimize `false_positive_cost * FP + false_negative_cost * FN`.
    Cost {
        false_positive_cost: f64,
        false_negative_cost: f64,
    },
}

/// Threshold over the midpoints between adjacent distinct scores that
/// optimizes the policy, flagging `score >= threshold`. Ties go to the
/// lowest threshold.
pub fn choose_threshold(scores: &[f64], labels: &[bool], policy: ThresholdPolicy) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(LabError::Data("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(LabError::Numeric("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(LabError::Data("threshold selection needs both classes in validation".into()));
    }
    if let ThresholdPolicy::Cost {
        false_positive_cost,
        false_negative_cost,
    } = policy
    {
        if !(false_positive_cost >= 0.0 && false_negative_cost >= 0.0)
            || !(false_positive_cost + false_negative_cost > 0.0)
        {
            return Err(LabError::Config("threshold costs must be >= 0 and not both 0".into()));
        }
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ascending distinct scores with (positives, negatives) at each.
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for i in order {
        let (p, n) = (labels[i] as u64, (!labels[i]) as u64);
        match groups.last_mut() {
            Some(g) if g.0 == scores[i] => {
                g.1 += p;
                g.2 += n;
            }
            _ => groups.push((scores[i], p, n)),
        }
    }
    if groups.len() < 2 {
        return Err(LabError::Data("threshold selection needs at least two distinct scores".into()));
    }
    // Below the candidate between groups k and k+1: groups 0..=k unflagged.
    let (mut fn_, mut tn) = (0u64, 0u64);
    let mut best: Option<(f64, u64, u64, u64)> = None;
    for k in 0..groups.len() - 1 {
        fn_ += groups[k].1;
        tn += groups[k].2;
        let tp = positives - fn_;
        let fp = negatives - tn;
        let threshold = groups[k].0 + (groups[k + 1].0 - groups[k].0) / 2.0;
        let better = match best {
            None => true,
            Some((_, btp, bfp, bfn)) => match policy {
                ThresholdPolicy::F1 => f1_cmp((tp, fp, fn_), (btp, bfp, bfn)) == Ordering::Greater,
                ThresholdPolicy::Cost {
                    false_positive_cost: a,
                    false_negative_cost: b,
                } => a * fp as f64 + b * (fn_ as f64) < a * (bfp as f64) + b * (bfn as f64),
            },
        };
        if better {
            best = Some((threshold, tp, fp, fn_));
        }
    }
    Ok(best.unwrap().0)
}

/// Exact comparison of `2tp / (2tp + fp + fn)` between two count triples.
fn f1_cmp(a: (u64, u64, u64), b: (u64, u64, u64)) -> Ordering {
    let num = |c: (u64, u64, u64)| 2 * c.0 as u128;
    let den = |c: (u64, u64, u64)| (2 * c.0 + c.1 + c.2) as u128;
    (num(a) * den(b)).cmp(&(num(b) * den(a)))
}

/// F1 at `score >= threshold`.
pub fn f1_at(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&s, &l) in scores.iter().zip(labels) {
        match (l, s >= threshold) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

pub const WEIGHT_COARSE_UNITS: u32 = 20;
pub const WEIGHT_FINE_UNITS: u32 = 100;
/// Candidates whose squared error differs by at most this relative amount
/// are treated as tied.
pub const WEIGHT_TIE_TOLERANCE: f64 = 1e-12;

fn sse(preds: &[Vec<f64>], targets: &[f64], units: &[u32]) -> f64 {
    let total = WEIGHT_FINE_UNITS as f64;
    (0..targets.len())
        .map(|i| {
            let p: f64 = units
                .iter()
                .zip(preds)
                .filter(|(&u, _)| u > 0)
                .map(|(&u, m)| u as f64 / total * m[i])
                .sum();
            (p - targets[i]) * (p - targets[i])
        })
        .sum()
}

fn distance_to_uniform(units: &[u32]) -> f64 {
    let u = WEIGHT_FINE_UNITS as f64 / units.len() as f64;
    units.iter().map(|&x| (x as f64 - u) * (x as f64 - u)).sum()
}

/// All ways to split `total` units into `parts` nonnegative parts.
fn compositions(total: u32, parts: usize) -> Vec<Vec<u32>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in (0..=total).rev() {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

struct WeightSearch<'a> {
    preds: &'a [Vec<f64>],
    targets: &'a [f64],
    best_units: Vec<u32>,
    best_sse: f64,
}

impl WeightSearch<'_> {
    fn offer(&mut self, units: Vec<u32>) -> bool {
        let s = sse(self.preds, self.targets, &units);
        let tol = WEIGHT_TIE_TOLERANCE * self.best_sse.abs();
        let better = if s < self.best_sse - tol {
            true
        } else if (s - self.best_sse).abs() <= tol {
            distance_to_uniform(&units) < distance_to_uniform(&self.best_units)
        } else {
            false
        };
        if better {
            self.best_units = units;
            self.best_sse = s;
        }
        better
    }
}

/// Simplex weights minimizing validation RMSE: a grid at step 0.05 (which
/// contains every one-hot corner), then single-unit transfers at step 0.01
/// until no transfer improves. Near-ties go to the point closest to uniform.
pub fn fit_weights(preds: &[Vec<f64>], targets: &[f64]) -> Result<Vec<f64>> {
    if preds.len() < 2 {
        return Err(LabError::Config("weighted ensemble needs at least two regressors".into()));
    }
    if targets.is_empty() {
        return Err(LabError::Data("weighted ensemble needs validation rows".into()));
    }
    if let Some(p) = preds.iter().find(|p| p.len() != targets.len()) {
        return Err(LabError::Data(format!(
            "regressor predictions have {} rows, targets {}",
            p.len(),
            targets.len()
        )));
    }
    let m = preds.len();
    let step = WEIGHT_FINE_UNITS / WEIGHT_COARSE_UNITS;
    let mut search = WeightSearch {
        preds,
        targets,
        best_units: vec![0; m],
        best_sse: f64::INFINITY,
    };
    for units in compositions(WEIGHT_COARSE_UNITS, m) {
        let units: Vec<u32> = units.into_iter().map(|u| u * step).collect();
        if search.best_sse.is_infinite() {
            search.best_sse = sse(preds, targets, &units);
            search.best_units = units;
        } else {
            search.offer(units);
        }
    }
    loop {
        let current = search.best_units.clone();
        let mut moved = false;
        for from in 0..m {
            if current[from] == 0 {
                continue;
            }
            for to in 0..m {
                if to == from {
                    continue;
                }
                let mut u = current.clone();
                u[from] -= 1;
                u[to] += 1;
                moved |= search.offer(u);
            }
        }
        if !moved {
            break;
        }
    }
    Ok(search
        .best_units
        .iter()
        .map(|&u| u as f64 / WEIGHT_FINE_UNITS as f64)
        .collect())
}

pub fn rmse(pred: &[f64], targets: &[f64]) -> f64 {
    let n = targets.len() as f64;
    (pred.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sqrt()
}

/// Weighted combination of per-regressor predictions.
pub fn combine(preds: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let n = preds.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            weights
                .iter()
                .zip(preds)
                .filter(|(&w, _)| w > 0.0)
                .map(|(&w, p)| w * p[i])
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Rows {
    /// Train rows that were actually diluted.
    #[default]
    Diluted,
    /// Train rows the classifier flags at the chosen threshold.
    Flagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    /// Candidate classifier configurations; the best on validation wins.
    pub classifier: Vec<TrainConfig>,
    /// One candidate list per regressor family.
    pub regressors: Vec<Vec<TrainConfig>>,
    pub threshold_policy: ThresholdPolicy,
    pub stage2_rows: Stage2Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "family", rename_all = "snake_case")]
pub enum EnsembleMode {
    Single(Family),
    Avg,
    Wgt,
}

impl EnsembleMode {
    pub fn name(&self) -> String {
        match self {
            EnsembleMode::Single(f) => f.name().to_string(),
            EnsembleMode::Avg => "ensemble_avg".into(),
            EnsembleMode::Wgt => "ensemble_wgt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageModel {
    pub stage1: TrainedModel,
    pub threshold: f64,
    pub policy: ThresholdPolicy,
    pub stage2: Vec<TrainedModel>,
    /// Learned simplex weights for the weighted ensemble, one per regressor.
    pub wgt_weights: Vec<f64>,
    pub fingerprint: String,
}

impl TwoStageModel {
    pub fn weights(&self, mode: &EnsembleMode) -> Result<Vec<f64>> {
        let m = self.stage2.len();
        match mode {
            EnsembleMode::Avg => Ok(vec![1.0 / m as f64; m]),
            EnsembleMode::Wgt => Ok(self.wgt_weights.clone()),
            EnsembleMode::Single(f) => {
                let i = self
                    .stage2
                    .iter()
                    .position(|r| r.family == *f)
                    .ok_or_else(|| LabError::Config(format!("no {f} regressor in the model")))?;
                let mut w = vec![0.0; m];
                w[i] = 1.0;
                Ok(w)
            }
        }
    }

    pub fn families(&self) -> Vec<Family> {
        self.stage2.iter().map(|r| r.family).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoLevelPrediction {
    pub probability: f64,
    pub flagged: bool,
    pub amount: f64,
}

/// Regressor outputs per member, on every row.
pub fn stage2_predictions(model: &TwoStageModel, x: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
    model.stage2.iter().map(|r| models::predict(r, x)).collect()
}

/// Combines classifier scores and member predictions: unflagged rows get 0,
/// flagged rows the weighted member sum floored at 0.
pub fn gate(probability: &[f64], threshold: f64, member_preds: &[Vec<f64>], weights: &[f64]) -> Vec<TwoLevelPrediction> {
    let combined = combine(member_preds, weights);
    probability
        .iter()
        .zip(combined)
        .map(|(&p, a)| {
            let flagged = p >= threshold;
            TwoLevelPrediction {
                probability: p,
                flagged,
                amount: if flagged { a.max(0.0) } else { 0.0 },
            }
        })
        .collect()
}

pub fn predict_two_level(model: &TwoStageModel, x: &FeatureMatrix, mode: &EnsembleMode) -> Result<Vec<TwoLevelPrediction>> {
    if x.fingerprint != model.fingerprint {
        return Err(LabError::FingerprintMismatch {
            expected: model.fingerprint.clone(),
            found: x.fingerprint.clone(),
        });
    }
    let weights = model.weights(mode)?;
    let probability = models::predict(&model.stage1, x)?;
    let preds = stage2_predictions(model, x)?;
    Ok(gate(&probability, model.threshold, &preds, &weights))
}

pub fn fit_two_stage(train: &LabeledMatrix, val: &LabeledMatrix, config: &TwoStageConfig) -> Result<TwoStageModel> {
    if config.regressors.is_empty() {
        return Err(LabError::Config("at least one stage-2 regressor family is required".into()));
    }
    for cfg in config.classifier.iter() {
        if cfg.task != Task::BinaryClassification {
            return Err(LabError::Config("stage-1 configurations must be classifiers".into()));
        }
    }
    for cfg in config.regressors.iter().flatten() {
        if cfg.task != Task::Regression {
            return Err(LabError::Config("stage-2 configurations must be regressors".into()));
        }
    }
    let (stage1, _) = models::train_grid(&config.classifier, &train.classification_set()?, &val.classification_set()?)
        .context(|| "stage 1".to_string())?;
    let val_scores = models::predict(&stage1, &val.x)?;
    let threshold = choose_threshold(&val_scores, &val.diluted, config.threshold_policy)
        .context(|| "stage 1 threshold".to_string())?;

    let train_idx = match config.stage2_rows {
        Stage2Rows::Diluted => train.diluted_indices(),
        Stage2Rows::Flagged => {
            let s = models::predict(&stage1, &train.x)?;
            (0..train.len()).filter(|&i| s[i] >= threshold).collect()
        }
    };
    if train_idx.is_empty() {
        return Err(LabError::Data("empty diluted subset for stage 2".into()));
    }
    let val_idx = val.diluted_indices();
    let s2_train = train.subset(&train_idx).regression_set()?;
    let s2_val = val.subset(&val_idx).regression_set()?;
    let stage2: Vec<TrainedModel> = config
        .regressors
        .par_iter()
        .map(|grid| {
            let family = grid.first().map(|c| c.family().name()).unwrap_or("empty");
            models::train_grid(grid, &s2_train, &s2_val)
                .map(|(m, _)| m)
                .context(|| format!("stage 2 {family}"))
        })
        .collect::<Result<_>>()?;
    let mut families: Vec<Family> = stage2.iter().map(|m| m.family).collect();
    families.sort();
    if families.windows(2).any(|w| w[0] == w[1]) {
        return Err(LabError::Config("each stage-2 family may appear once".into()));
    }
    let wgt_weights = if stage2.len() == 1 {
        vec![1.0]
    } else {
        let preds: Vec<Vec<f64>> = stage2
            .iter()
            .map(|m| models::predict(m, &s2_val.x))
            .collect::<Result<_>>()?;
        fit_weights(&preds, &s2_val.y)?
    };
    Ok(TwoStageModel {
        fingerprint: stage1.fingerprint.clone(),
        stage1,
        threshold,
        policy: config.threshold_policy,
        stage2,
        wgt_weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub fingerprint: String,
    pub threshold: f64,
    pub policy: ThresholdPolicy,
    pub stage1: String,
    pub members: Vec<EnsembleMember>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub family: Family,
    pub file: String,
    pub avg_weight: f64,
    pub wgt_weight: f64,
}

pub const STAGE1_FILE: &str = "stage1.json";
pub const ENSEMBLE_FILE: &str = "ensemble.json";

pub fn save_bundle(model: &TwoStageModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    models::save_model(&model.stage1, &dir.join(STAGE1_FILE))?;
    let avg = 1.0 / model.stage2.len() as f64;
    let mut members = Vec::new();
    for (m, &w) in model.stage2.iter().zip(&model.wgt_weights) {
        let file = format!("regressor_{}.json", m.family.name());
        models::save_model(m, &dir.join(&file))?;
        members.push(EnsembleMember {
            family: m.family,
            file,
            avg_weight: avg,
            wgt_weight: w,
        });
    }
    let manifest = EnsembleManifest {
        fingerprint: model.fingerprint.clone(),
        threshold: model.threshold,
        policy: model.policy,
        stage1: STAGE1_FILE.into(),
        members,
    };
    let path = dir.join(ENSEMBLE_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| LabError::io(&path, e))
}

pub fn load_bundle(dir: &Path) -> Result<TwoStageModel> {
    let path = dir.join(ENSEMBLE_FILE);
    let bytes = fs::read(&path).map_err(|e| LabError::io(&path, e))?;
    let manifest: EnsembleManifest = serde_json::from_slice(&bytes)?;
    let stage1 = models::load_model_for(&dir.join(&manifest.stage1), &manifest.fingerprint)?;
    let mut stage2 = Vec::new();
    let mut wgt_weights = Vec::new();
    for m in &manifest.members {
        let model = models::load_model_for(&dir.join(&m.file), &manifest.fingerprint)?;
        if model.family != m.family {
            return Err(LabError::Data(format!("{}: family does not match manifest", m.file)));
        }
        stage2.push(model);
        wgt_weights.push(m.wgt_weight);
    }
    if stage2.is_empty() {
        return Err(LabError::Data("bundle has no regressors".into()));
    }
    Ok(TwoStageModel {
        stage1,
        threshold: manifest.threshold,
        policy: manifest.policy,
        stage2,
        wgt_weights,
        fingerprint: manifest.fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_threshold_example() {
        let t = choose_threshold(&[0.1, 0.4, 0.6, 0.9], &[false, false, true, true], ThresholdPolicy::F1).unwrap();
        assert_eq!(t, 0.5);
        assert_eq!(f1_at(&[0.1, 0.4, 0.6, 0.9], &[false, false, true, true], t), 1.0);
    }

    #[test]
    fn separated_scores_pick_lowest_optimal_midpoint() {
        let s = [0.1, 0.2, 0.7, 0.8, 0.9];
        let l = [false, false, true, true, true];
        assert!((choose_threshold(&s, &l, ThresholdPolicy::F1).unwrap() - 0.45).abs() < 1e-15);
    }

    #[test]
    fn expensive_misses_lower_the_threshold() {
        let s: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        let l: Vec<bool> = (0..20).map(|i| matches!(i, 3 | 7 | 9 | 12 | 14 | 15 | 17 | 18 | 19)).collect();
        let f1 = choose_threshold(&s, &l, ThresholdPolicy::F1).unwrap();
        let cost = choose_threshold(
            &s,
            &l,
            ThresholdPolicy::Cost {
                false_positive_cost: 1.0,
                false_negative_cost: 50.0,
            },
        )
        .unwrap();
        assert!(cost <= f1);
    }

    #[test]
    fn degenerate_threshold_inputs_rejected() {
        assert!(choose_threshold(&[0.1, 0.2], &[true, true], ThresholdPolicy::F1).is_err());
        assert!(choose_threshold(&[0.3, 0.3], &[true, false], ThresholdPolicy::F1).is_err());
    }

    #[test]
    fn identical_regressors_get_uniform_weights() {
        let p = vec![1.0, 2.0, 3.5, 7.0];
        let w = fit_weights(&[p.clone(), p], &[1.5, 2.0, 3.0, 8.0]).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn exact_regressor_dominates() {
        let truth: Vec<f64> = (0..50).map(|i| 10.0 + i as f64).collect();
        let noisy: Vec<f64> = truth.iter().enumerate().map(|(i, t)| t + if i % 2 == 0 { 5.0 } else { -4.0 }).collect();
        let w = fit_weights(&[truth.clone(), noisy], &truth).unwrap();
        assert!(w[0] >= 0.95);
    }

    #[test]
    fn weighted_rmse_never_exceeds_best_single() {
        let t: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).sin() * 10.0 + 20.0).collect();
        let a: Vec<f64> = t.iter().map(|v| v * 1.1).collect();
        let b: Vec<f64> = t.iter().enumerate().map(|(i, v)| v - (i % 3) as f64).collect();
        let c: Vec<f64> = vec![20.0; 30];
        let preds = vec![a, b, c];
        let w = fit_weights(&preds, &t).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let wgt = rmse(&combine(&preds, &w), &t);
        for p in &preds {
            assert!(wgt <= rmse(p, &t) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn gate_examples() {
        let members = vec![vec![80.0, 80.0], vec![100.0, -50.0], vec![120.0, -50.0], vec![100.0, -50.0]];
        let out = gate(&[0.9, 0.9], 0.5, &members, &[0.25; 4]);
        assert_eq!(out[0].amount, 100.0);
        assert!(out[0].flagged);
        assert_eq!(out[1].amount, 0.0);
        let below = gate(&[0.2], 0.5, &[vec![100.0]], &[1.0]);
        assert!(!below[0].flagged);
        assert_eq!(below[0].amount, 0.0);
    }
}
