//! Second-order gradient boosting over histogram-binned features.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::binning::{BinnedMatrix, MISSING_BIN};
use super::{
    auto_positive_weight, sample_weights, sigmoid, weighted_loss, Dataset, Task, TrainConfig,
    TrainingMetadata,
};
use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtParams {
    /// 0 gives a base-score-only model.
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    /// Minimum gain for a split to be kept.
    pub gamma: f64,
    /// Minimum hessian sum in each child.
    pub min_child_weight: f64,
    pub max_bins: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            max_depth: 4,
            learning_rate: 0.1,
            lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            max_bins: 256,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config(format!("gbdt: {m}")));
        if self.max_depth > 16 {
            return bad("max_depth must be in [0, 16]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must be in (0, 1]");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and >= 0");
        }
        if !(self.min_child_weight >= 0.0 && self.min_child_weight.is_finite()) {
            return bad("min_child_weight must be finite and >= 0");
        }
        if !(2..=256).contains(&self.max_bins) {
            return bad("max_bins must be in [2, 256]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        /// `x < threshold` goes left.
        threshold: f64,
        /// Direction taken by missing values.
        default_left: bool,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Nodes stored in preorder; index 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                } => {
                    let v = row[*feature];
                    let go_left = if v.is_nan() { *default_left } else { v < *threshold };
                    i = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn is_leaf_only(&self) -> bool {
        self.nodes.len() == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub task: Task,
    pub base_score: f64,
    pub trees: Vec<Tree>,
}

impl GbdtModel {
    pub fn raw_score(&self, row: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>()
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let raw = self.raw_score(row);
        match self.task {
            Task::BinaryClassification => sigmoid(raw),
            Task::Regression => raw,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct BinStat {
    g: f64,
    h: f64,
    n: u32,
}

impl BinStat {
    fn add(&mut self, g: f64, h: f64) {
        self.g += g;
        self.h += h;
        self.n += 1;
    }

    fn plus(self, o: BinStat) -> BinStat {
        BinStat {
            g: self.g + o.g,
            h: self.h + o.h,
            n: self.n + o.n,
        }
    }

    fn minus(self, o: BinStat) -> BinStat {
        BinStat {
            g: self.g - o.g,
            h: self.h - o.h,
            n: self.n - o.n,
        }
    }
}

/// Per-feature histograms; the last slot of each holds missing values.
type Histogram = Vec<Vec<BinStat>>;

struct SplitCandidate {
    gain: f64,
    feature: usize,
    bin: usize,
    default_left: bool,
}

struct TreeBuilder<'a> {
    binned: &'a BinnedMatrix,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GbdtParams,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn histogram(&self, rows: &[u32]) -> Histogram {
        (0..self.binned.n_features())
            .into_par_iter()
            .map(|f| {
                let nb = self.binned.features[f].n_bins();
                let col = &self.binned.columns[f];
                let mut hist = vec![BinStat::default(); nb + 1];
                for &r in rows {
                    let r = r as usize;
                    let b = col[r];
                    let slot = if b == MISSING_BIN { nb } else { b as usize };
                    hist[slot].add(self.grad[r], self.hess[r]);
                }
                hist
            })
            .collect()
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.lambda)
    }

    fn best_split(&self, hist: &Histogram, total: BinStat) -> Option<SplitCandidate> {
        let parent = self.score(total.g, total.h);
        let p = self.params;
        let per_feature: Vec<Option<SplitCandidate>> = hist
            .par_iter()
            .enumerate()
            .map(|(f, bins)| {
                let nb = bins.len() - 1;
                let missing = bins[nb];
                let present = total.minus(missing);
                let mut best: Option<SplitCandidate> = None;
                let mut left = BinStat::default();
                for (b, stat) in bins.iter().enumerate().take(nb.saturating_sub(1)) {
                    left = left.plus(*stat);
                    let right = present.minus(left);
                    let options: [(BinStat, BinStat, bool); 2] = if missing.n > 0 {
                        [
                            (left.plus(missing), right, true),
                            (left, right.plus(missing), false),
                        ]
                    } else {
                        let dl = left.h >= right.h;
                        [(left, right, dl), (left, right, dl)]
                    };
                    for (l, r, default_left) in options {
                        if l.n == 0 || r.n == 0 {
                            continue;
                        }
                        if l.h < p.min_child_weight || r.h < p.min_child_weight {
                            continue;
                        }
                        let gain =
                            0.5 * (self.score(l.g, l.h) + self.score(r.g, r.h) - parent) - p.gamma;
                        if gain > 0.0 && best.as_ref().is_none_or(|c| gain > c.gain) {
                            best = Some(SplitCandidate {
                                gain,
                                feature: f,
                                bin: b,
                                default_left,
                            });
                        }
                    }
                }
                best
            })
            .collect();
        // Sequential reduction: highest gain, lowest feature on ties.
        per_feature.into_iter().flatten().fold(None, |acc, c| match acc {
            Some(a) if a.gain >= c.gain => Some(a),
            _ => Some(c),
        })
    }

    fn leaf(&self, rows: &[u32]) -> Node {
        let (g, h) = rows.iter().fold((0.0, 0.0), |(g, h), &r| {
            (g + self.grad[r as usize], h + self.hess[r as usize])
        });
        Node::Leaf {
            value: -self.params.learning_rate * g / (h + self.params.lambda),
        }
    }

    fn build(&mut self, rows: Vec<u32>, hist: Option<Histogram>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        if depth >= self.params.max_depth || rows.len() < 2 {
            self.nodes[id] = self.leaf(&rows);
            return id;
        }
        let hist = hist.unwrap_or_else(|| self.histogram(&rows));
        let total = hist[0].iter().fold(BinStat::default(), |a, s| a.plus(*s));
        let Some(split) = self.best_split(&hist, total) else {
            self.nodes[id] = self.leaf(&rows);
            return id;
        };
        let col = &self.binned.columns[split.feature];
        let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = rows.iter().partition(|&&r| {
            let b = col[r as usize];
            if b == MISSING_BIN {
                split.default_left
            } else {
                b as usize <= split.bin
            }
        });
        drop(rows);
        let (left_hist, right_hist) = if depth + 1 >= self.params.max_depth {
            (None, None)
        } else if left_rows.len() <= right_rows.len() {
            let small = self.histogram(&left_rows);
            let large = subtract(&hist, &small);
            (Some(small), Some(large))
        } else {
            let small = self.histogram(&right_rows);
            let large = subtract(&hist, &small);
            (Some(large), Some(small))
        };
        drop(hist);
        let left = self.build(left_rows, left_hist, depth + 1);
        let right = self.build(right_rows, right_hist, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: self.binned.features[split.feature].thresholds[split.bin],
            default_left: split.default_left,
            left,
            right,
        };
        id
    }
}

fn subtract(parent: &Histogram, child: &Histogram) -> Histogram {
    parent
        .iter()
        .zip(child)
        .map(|(p, c)| p.iter().zip(c).map(|(a, b)| a.minus(*b)).collect())
        .collect()
}

fn base_score(task: Task, y: &[f64], w: &[f64]) -> f64 {
    match task {
        Task::Regression => {
            let (s, ws) = y.iter().zip(w).fold((0.0, 0.0), |(s, ws), (t, wi)| (s + wi * t, ws + wi));
            s / ws
        }
        Task::BinaryClassification => {
            let (pos, neg) = y.iter().zip(w).fold((0.0, 0.0), |(p, n), (t, wi)| {
                (p + wi * t, n + wi * (1.0 - t))
            });
            (pos / neg).ln()
        }
    }
}

fn gradients(task: Task, raw: &[f64], y: &[f64], w: &[f64], grad: &mut [f64], hess: &mut [f64]) {
    for i in 0..raw.len() {
        match task {
            Task::Regression => {
                grad[i] = w[i] * (raw[i] - y[i]);
                hess[i] = w[i];
            }
            Task::BinaryClassification => {
                let p = sigmoid(raw[i]);
                grad[i] = w[i] * (p - y[i]);
                hess[i] = w[i] * (p * (1.0 - p)).max(1e-16);
            }
        }
    }
}

fn link(task: Task, raw: &[f64]) -> Vec<f64> {
    match task {
        Task::Regression => raw.to_vec(),
        Task::BinaryClassification => raw.iter().map(|&r| sigmoid(r)).collect(),
    }
}

pub(crate) fn train(
    params: &GbdtParams,
    config: &TrainConfig,
    data: &Dataset,
    val: Option<&Dataset>,
) -> Result<(GbdtModel, TrainingMetadata)> {
    let task = config.task;
    let pw = config.positive_weight.unwrap_or_else(|| auto_positive_weight(&data.y));
    let w = sample_weights(task, &data.y, Some(pw));
    let x = &data.x.x;
    let binned = BinnedMatrix::new(x, params.max_bins);
    let base = base_score(task, &data.y, &w);
    let n = data.len();
    let mut raw = vec![base; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];

    let val_w = val.map(|v| sample_weights(task, &v.y, Some(pw)));
    let mut val_raw = val.map(|v| vec![base; v.len()]);
    // Round 0 is the base score alone.
    let mut best_loss = match (val, val_raw.as_ref(), val_w.as_ref()) {
        (Some(v), Some(vr), Some(vw)) => weighted_loss(task, &link(task, vr), &v.y, vw),
        _ => f64::INFINITY,
    };
    let mut best_rounds = 0;
    let mut since_best = 0;

    let mut trees = Vec::new();
    for _ in 0..config.max_rounds {
        gradients(task, &raw, &data.y, &w, &mut grad, &mut hess);
        let mut builder = TreeBuilder {
            binned: &binned,
            grad: &grad,
            hess: &hess,
            params,
            nodes: Vec::new(),
        };
        builder.build((0..n as u32).collect(), None, 0);
        let tree = Tree { nodes: builder.nodes };
        for (i, r) in raw.iter_mut().enumerate() {
            *r += tree.predict_row(x.row(i));
        }
        if !raw.iter().all(|r| r.is_finite()) {
            return Err(LabError::Numeric("gbdt: non-finite training score".into()));
        }
        trees.push(tree);
        if let (Some(v), Some(vr), Some(vw)) = (val, val_raw.as_mut(), val_w.as_ref()) {
            let t = trees.last().unwrap();
            for (i, r) in vr.iter_mut().enumerate() {
                *r += t.predict_row(v.x.x.row(i));
            }
            let loss = weighted_loss(task, &link(task, vr), &v.y, vw);
            if loss < best_loss {
                best_loss = loss;
                best_rounds = trees.len();
                since_best = 0;
            } else {
                since_best += 1;
                if config.patience.is_some_and(|p| since_best >= p) {
                    break;
                }
            }
        }
    }
    if val.is_some() {
        trees.truncate(best_rounds);
    }
    let model = GbdtModel {
        task,
        base_score: base,
        trees,
    };
    let train_pred: Vec<f64> = (0..n).map(|i| model.predict_row(x.row(i))).collect();
    let meta = TrainingMetadata {
        rounds_used: model.trees.len(),
        final_train_loss: weighted_loss(task, &train_pred, &data.y, &w),
        ..Default::default()
    };
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{FeatureMatrix, Matrix};
    use crate::models::{self, FamilyParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(rows: Vec<Vec<f64>>, y: Vec<f64>) -> Dataset {
        let cols = rows[0].len();
        Dataset::new(FeatureMatrix::new("t", Matrix::from_rows(&rows)), y, vec![true; cols]).unwrap()
    }

    fn config(task: Task, params: GbdtParams, rounds: usize) -> TrainConfig {
        let mut c = TrainConfig::new(task, FamilyParams::Gbdt(params));
        c.max_rounds = rounds;
        c.patience = None;
        c.positive_weight = Some(1.0);
        c
    }

    fn random_set(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y = rows.iter().map(|r| r[0] * 2.0 + r[1].powi(2) + 0.1 * rng.random::<f64>()).collect();
        (rows, y)
    }

    #[test]
    fn depth_zero_regression_predicts_mean() {
        let (rows, y) = random_set(100, 1);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let params = GbdtParams { max_depth: 0, ..Default::default() };
        let m = models::train(&config(Task::Regression, params, 20), &dataset(rows.clone(), y), None).unwrap();
        for r in &rows {
            let p = models::predict(&m, &FeatureMatrix::new("t", Matrix::from_rows(std::slice::from_ref(r)))).unwrap()[0];
            assert!((p - mean).abs() < 1e-10);
        }
    }

    #[test]
    fn depth_zero_logistic_is_log_odds() {
        let (rows, _) = random_set(90, 2);
        let y: Vec<f64> = (0..90).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let params = GbdtParams { max_depth: 0, ..Default::default() };
        let m = models::train(&config(Task::BinaryClassification, params, 10), &dataset(rows.clone(), y), None).unwrap();
        let models::ModelParams::Gbdt(g) = &m.params else { panic!() };
        let expected = (1.0f64 / 2.0).ln();
        assert!((g.raw_score(&rows[0]) - expected).abs() < 1e-10);
    }

    #[test]
    fn squared_loss_decreases_each_round() {
        let (rows, y) = random_set(300, 3);
        let data = dataset(rows, y);
        let mut last = f64::INFINITY;
        for rounds in 1..15 {
            let m = models::train(&config(Task::Regression, GbdtParams::default(), rounds), &data, None).unwrap();
            let loss = m.metadata.final_train_loss;
            assert!(loss < last, "round {rounds}: {loss} !< {last}");
            last = loss;
        }
    }

    #[test]
    fn missing_values_follow_learned_direction() {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..200 {
            let v = if i % 4 == 0 { f64::NAN } else { (i % 50) as f64 };
            rows.push(vec![v]);
            y.push(if v.is_nan() || v > 25.0 { 10.0 } else { 0.0 });
        }
        let params = GbdtParams { max_depth: 2, learning_rate: 1.0, lambda: 0.0, ..Default::default() };
        let m = models::train(&config(Task::Regression, params, 1), &dataset(rows, y), None).unwrap();
        let models::ModelParams::Gbdt(g) = &m.params else { panic!() };
        assert!((g.predict_row(&[f64::NAN]) - 10.0).abs() < 1e-9);
        assert!((g.predict_row(&[3.0]) - 0.0).abs() < 1e-9);
    }

    #[test]
    fn single_class_is_rejected() {
        let (rows, _) = random_set(20, 4);
        let err = models::train(
            &config(Task::BinaryClassification, GbdtParams::default(), 5),
            &dataset(rows, vec![1.0; 20]),
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("single class"));
    }

    #[test]
    fn early_stopping_truncates_to_best_round() {
        let (rows, y) = random_set(400, 5);
        let data = dataset(rows, y);
        let (vr, vy) = random_set(200, 6);
        let val = dataset(vr, vy);
        let params = GbdtParams { max_depth: 6, learning_rate: 0.5, ..Default::default() };
        let mut cfg = config(Task::Regression, params, 300);
        cfg.patience = Some(5);
        let m = models::train(&cfg, &data, Some(&val)).unwrap();
        assert!(m.metadata.rounds_used < 300);
        assert!(m.metadata.final_val_loss.is_some());
    }
}
