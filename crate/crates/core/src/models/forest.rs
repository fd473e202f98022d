//! Bagged CART regression trees with per-split feature subsampling.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::binning::{BinnedMatrix, MISSING_BIN};
use super::gbdt::{Node, Tree};
use super::{
    auto_positive_weight, derive_seed, sample_weights, weighted_loss, Dataset, TrainConfig,
    TrainingMetadata,
};
use crate::error::{LabError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSearch {
    /// Every midpoint between distinct sorted values.
    Exact,
    /// Quantile bins, as in the boosted trees.
    Histogram { max_bins: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or too small.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Fraction of features considered at each split, in (0, 1].
    pub feature_fraction: f64,
    pub bootstrap: bool,
    pub split_search: SplitSearch,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 5,
            feature_fraction: 1.0 / 3.0,
            bootstrap: true,
            split_search: SplitSearch::Histogram { max_bins: 64 },
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config(format!("random_forest: {m}")));
        if self.n_trees < 1 {
            return bad("n_trees must be at least 1");
        }
        if self.min_samples_leaf < 1 {
            return bad("min_samples_leaf must be at least 1");
        }
        if !(self.feature_fraction > 0.0 && self.feature_fraction <= 1.0) {
            return bad("feature_fraction must be in (0, 1]");
        }
        if let SplitSearch::Histogram { max_bins } = self.split_search {
            if !(2..=256).contains(&max_bins) {
                return bad("max_bins must be in [2, 256]");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
}

impl ForestModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / self.trees.len() as f64
    }
}

/// Weighted sums over a set of rows.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    w: f64,
    wy: f64,
    count: usize,
}

impl Moments {
    fn add(&mut self, w: f64, y: f64, count: usize) {
        self.w += w;
        self.wy += w * y;
        self.count += count;
    }

    fn plus(self, o: Moments) -> Moments {
        Moments {
            w: self.w + o.w,
            wy: self.wy + o.wy,
            count: self.count + o.count,
        }
    }

    fn minus(self, o: Moments) -> Moments {
        Moments {
            w: self.w - o.w,
            wy: self.wy - o.wy,
            count: self.count - o.count,
        }
    }

    /// Weighted-SSE reduction is `sum of wy^2 / w` over children minus parent.
    fn score(self) -> f64 {
        if self.w > 0.0 {
            self.wy * self.wy / self.w
        } else {
            0.0
        }
    }
}

struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    missing_left: bool,
}

impl Candidate {
    /// Strictly better: higher gain, then lower feature, then lower threshold.
    fn beats(&self, o: &Candidate) -> bool {
        if self.gain != o.gain {
            return self.gain > o.gain;
        }
        (self.feature, self.threshold) < (o.feature, o.threshold)
    }
}

struct Grower<'a> {
    x: &'a Matrix,
    binned: Option<&'a BinnedMatrix>,
    y: &'a [f64],
    /// Effective weight: bootstrap multiplicity times class weight.
    w: Vec<f64>,
    mult: Vec<u32>,
    params: &'a ForestParams,
    n_candidates: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn moments(&self, rows: &[usize]) -> Moments {
        let mut m = Moments::default();
        for &r in rows {
            m.add(self.w[r], self.y[r], self.mult[r] as usize);
        }
        m
    }

    fn features(&mut self) -> Vec<usize> {
        let n = self.x.cols();
        if self.n_candidates >= n {
            return (0..n).collect();
        }
        let mut f = sample(&mut self.rng, n, self.n_candidates).into_vec();
        f.sort_unstable();
        f
    }

    /// Gain of a split given present-value prefix sums, routing missing rows
    /// to the heavier side.
    fn evaluate(&self, left: Moments, right: Moments, missing: Moments, parent: f64) -> Option<(f64, bool)> {
        let missing_left = left.w >= right.w;
        let (l, r) = if missing.count == 0 {
            (left, right)
        } else if missing_left {
            (left.plus(missing), right)
        } else {
            (left, right.plus(missing))
        };
        let min = self.params.min_samples_leaf;
        if l.count < min || r.count < min {
            return None;
        }
        Some((l.score() + r.score() - parent, missing_left))
    }

    fn exact_split(&self, rows: &[usize], f: usize, total: Moments, parent: f64) -> Option<Candidate> {
        let mut present: Vec<(f64, usize)> = Vec::with_capacity(rows.len());
        let mut missing = Moments::default();
        for &r in rows {
            let v = self.x.get(r, f);
            if v.is_nan() {
                missing.add(self.w[r], self.y[r], self.mult[r] as usize);
            } else {
                present.push((v, r));
            }
        }
        present.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let present_total = total.minus(missing);
        let mut left = Moments::default();
        let mut best: Option<Candidate> = None;
        for i in 0..present.len().saturating_sub(1) {
            let (v, r) = present[i];
            left.add(self.w[r], self.y[r], self.mult[r] as usize);
            let next = present[i + 1].0;
            if next == v {
                continue;
            }
            let right = present_total.minus(left);
            if let Some((gain, missing_left)) = self.evaluate(left, right, missing, parent) {
                let c = Candidate {
                    gain,
                    feature: f,
                    threshold: v + (next - v) / 2.0,
                    missing_left,
                };
                if best.as_ref().is_none_or(|b| c.beats(b)) {
                    best = Some(c);
                }
            }
        }
        best
    }

    fn histogram_split(&self, rows: &[usize], f: usize, total: Moments, parent: f64) -> Option<Candidate> {
        let binned = self.binned.expect("binned matrix");
        let fb = &binned.features[f];
        let nb = fb.n_bins();
        let col = &binned.columns[f];
        let mut bins = vec![Moments::default(); nb];
        let mut missing = Moments::default();
        for &r in rows {
            let b = col[r];
            let target = if b == MISSING_BIN { &mut missing } else { &mut bins[b as usize] };
            target.add(self.w[r], self.y[r], self.mult[r] as usize);
        }
        let present_total = total.minus(missing);
        let mut left = Moments::default();
        let mut best: Option<Candidate> = None;
        for (b, m) in bins.iter().enumerate().take(nb - 1) {
            left = left.plus(*m);
            if left.count == 0 || m.count == 0 {
                continue;
            }
            let right = present_total.minus(left);
            if right.count == 0 {
                break;
            }
            if let Some((gain, missing_left)) = self.evaluate(left, right, missing, parent) {
                let c = Candidate {
                    gain,
                    feature: f,
                    threshold: fb.thresholds[b],
                    missing_left,
                };
                if best.as_ref().is_none_or(|o| c.beats(o)) {
                    best = Some(c);
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        let total = self.moments(&rows);
        let value = total.wy / total.w;
        self.nodes.push(Node::Leaf { value });
        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        if !depth_ok || total.count < 2 * self.params.min_samples_leaf {
            return id;
        }
        let first = self.y[rows[0]];
        if rows.iter().all(|&r| self.y[r] == first) {
            return id;
        }
        let parent = total.score();
        let mut best: Option<Candidate> = None;
        for f in self.features() {
            let c = match self.params.split_search {
                SplitSearch::Exact => self.exact_split(&rows, f, total, parent),
                SplitSearch::Histogram { .. } => self.histogram_split(&rows, f, total, parent),
            };
            if let Some(c) = c {
                if best.as_ref().is_none_or(|b| c.beats(b)) {
                    best = Some(c);
                }
            }
        }
        // Relative guard: a zero-gain split only reshuffles rounding noise.
        let Some(best) = best.filter(|b| b.gain > 1e-12 * parent.abs().max(1e-300)) else {
            return id;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| {
            let v = self.x.get(r, best.feature);
            if v.is_nan() {
                best.missing_left
            } else {
                v < best.threshold
            }
        });
        drop(rows);
        let left = self.grow(left_rows, depth + 1);
        let right = self.grow(right_rows, depth + 1);
        self.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            default_left: best.missing_left,
            left,
            right,
        };
        id
    }
}

pub(crate) fn train(
    params: &ForestParams,
    config: &TrainConfig,
    data: &Dataset,
) -> Result<(ForestModel, TrainingMetadata)> {
    let n = data.len();
    let x = &data.x.x;
    let pw = config.positive_weight.unwrap_or_else(|| auto_positive_weight(&data.y));
    let class_w = sample_weights(config.task, &data.y, Some(pw));
    let binned = match params.split_search {
        SplitSearch::Histogram { max_bins } => Some(BinnedMatrix::new(x, max_bins)),
        SplitSearch::Exact => None,
    };
    let n_candidates = ((params.feature_fraction * x.cols() as f64).ceil() as usize).clamp(1, x.cols().max(1));

    let grown: Vec<(Tree, Vec<u32>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, t as u64));
            let mut mult = vec![0u32; n];
            if params.bootstrap {
                for _ in 0..n {
                    mult[rng.random_range(0..n)] += 1;
                }
            } else {
                mult.fill(1);
            }
            let rows: Vec<usize> = (0..n).filter(|&i| mult[i] > 0).collect();
            let w = (0..n).map(|i| mult[i] as f64 * class_w[i]).collect();
            let mut g = Grower {
                x,
                binned: binned.as_ref(),
                y: &data.y,
                w,
                mult,
                params,
                n_candidates,
                rng,
                nodes: Vec::new(),
            };
            g.grow(rows, 0);
            (Tree { nodes: g.nodes }, g.mult)
        })
        .collect();

    let oob_mse = params.bootstrap.then(|| {
        let mut sum = vec![0.0; n];
        let mut cnt = vec![0u32; n];
        for (tree, mult) in &grown {
            for i in 0..n {
                if mult[i] == 0 {
                    sum[i] += tree.predict_row(x.row(i));
                    cnt[i] += 1;
                }
            }
        }
        let (se, k) = (0..n).filter(|&i| cnt[i] > 0).fold((0.0, 0usize), |(se, k), i| {
            let e = sum[i] / cnt[i] as f64 - data.y[i];
            (se + e * e, k + 1)
        });
        if k > 0 {
            se / k as f64
        } else {
            f64::NAN
        }
    });
    let model = ForestModel {
        trees: grown.into_iter().map(|(t, _)| t).collect(),
    };
    let pred: Vec<f64> = (0..n).map(|i| model.predict_row(x.row(i))).collect();
    let meta = TrainingMetadata {
        rounds_used: model.trees.len(),
        final_train_loss: weighted_loss(config.task, &pred, &data.y, &class_w),
        oob_mse: oob_mse.filter(|v| v.is_finite()),
        ..Default::default()
    };
    Ok((model, meta))
}
