//! Classification and regression metrics, plus plot-data series.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Actuals at or below this (one minor currency unit, in major units) are
/// excluded from MAPE.
pub const MAPE_EPSILON: f64 = 0.01;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(LabError::Data(format!("{a} scores but {b} labels")));
    }
    Ok(())
}

fn class_counts(labels: &[bool]) -> (u64, u64) {
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    (pos, labels.len() as u64 - pos)
}

/// Indices sorted by descending score, grouped into runs of equal score.
/// Each group is `(score, positives, negatives)`.
fn tie_groups_desc(scores: &[f64], labels: &[bool]) -> Vec<(f64, u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for i in order {
        let s = scores[i];
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if labels[i] {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s, labels[i] as u64, (!labels[i]) as u64)),
        }
    }
    groups
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(LabError::Numeric("NaN score".into()));
    }
    Ok(())
}

/// Twice the Mann-Whitney U statistic: 2 per correctly ordered
/// positive/negative pair, 1 per tie.
pub fn mann_whitney_2u(scores: &[f64], labels: &[bool]) -> u128 {
    let mut negatives_below: u128 = 0;
    let mut total: u128 = 0;
    // Ascending pass over tie groups.
    for (_, p, n) in tie_groups_desc(scores, labels).into_iter().rev() {
        total += 2 * p as u128 * negatives_below + p as u128 * n as u128;
        negatives_below += n as u128;
    }
    total
}

/// Rank-based ROC-AUC with half credit for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    check_scores(scores)?;
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(LabError::Data("ROC-AUC needs both classes".into()));
    }
    Ok(mann_whitney_2u(scores, labels) as f64 / (2 * p as u128 * n as u128) as f64)
}

/// One step of the step-wise AP sum: recall gain times precision, from
/// cumulative true/false positive counts.
pub fn ap_term(tp: u64, tp_prev: u64, fp: u64, positives: u64) -> f64 {
    (tp - tp_prev) as f64 / positives as f64 * (tp as f64 / (tp + fp) as f64)
}

/// Step-wise average precision over descending score with tied scores
/// forming one step.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    check_scores(scores)?;
    let (p, _) = class_counts(labels);
    if p == 0 {
        return Err(LabError::Data("average precision needs at least one positive".into()));
    }
    let (mut tp, mut fp, mut ap) = (0u64, 0u64, 0.0);
    for (_, gp, gn) in tie_groups_desc(scores, labels) {
        let prev = tp;
        tp += gp;
        fp += gn;
        if gp > 0 {
            ap += ap_term(tp, prev, fp, p);
        }
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub threshold: f64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tp: u64,
    /// Rows `[true negative class, true positive class]`, each normalized by
    /// its class size; `None` for an empty class.
    pub normalized: [Option<[f64; 2]>; 2],
    pub recall_non_diluted: Option<f64>,
    pub recall_diluted: Option<f64>,
}

/// Counts with `flagged = score >= threshold`.
pub fn confusion_at(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Confusion> {
    check_lengths(scores.len(), labels.len())?;
    let (mut tn, mut fp, mut fn_, mut tp) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (l, s >= threshold) {
            (false, false) => tn += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (true, true) => tp += 1,
        }
    }
    let row = |a: u64, b: u64| {
        let t = a + b;
        (t > 0).then(|| [a as f64 / t as f64, b as f64 / t as f64])
    };
    let normalized = [row(tn, fp), row(fn_, tp)];
    Ok(Confusion {
        threshold,
        tn,
        fp,
        fn_,
        tp,
        normalized,
        recall_non_diluted: normalized[0].map(|r| r[0]),
        recall_diluted: normalized[1].map(|r| r[1]),
    })
}

/// Serializes infinite thresholds as the strings `"inf"` / `"-inf"`.
mod extended_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            Repr::Text(if *v > 0.0 { "inf" } else { "-inf" }.into()).serialize(s)
        } else {
            Repr::Num(*v).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad threshold {t}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    #[serde(with = "extended_float")]
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    #[serde(with = "extended_float")]
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub roc: Vec<RocPoint>,
    pub pr: Vec<PrPoint>,
}

/// ROC and PR points at `+inf`, every midpoint between adjacent distinct
/// scores, and `-inf`, in decreasing threshold order.
pub fn curve_data(scores: &[f64], labels: &[bool]) -> Result<Curves> {
    check_lengths(scores.len(), labels.len())?;
    check_scores(scores)?;
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(LabError::Data("curves need both classes".into()));
    }
    let groups = tie_groups_desc(scores, labels);
    let mut roc = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let mut pr = vec![PrPoint {
        recall: 0.0,
        precision: 1.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (k, &(s, gp, gn)) in groups.iter().enumerate() {
        tp += gp;
        fp += gn;
        let threshold = match groups.get(k + 1) {
            Some(next) => next.0 + (s - next.0) / 2.0,
            None => f64::NEG_INFINITY,
        };
        roc.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
            threshold,
        });
        pr.push(PrPoint {
            recall: tp as f64 / p as f64,
            precision: tp as f64 / (tp + fp) as f64,
            threshold,
        });
    }
    Ok(Curves { roc, pr })
}

/// Trapezoidal area under ROC points ordered by threshold.
pub fn trapezoid_auc(roc: &[RocPoint]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub n: usize,
    pub positives: usize,
    pub roc_auc: f64,
    pub average_precision: f64,
    pub confusion: Confusion,
    pub curves: Curves,
}

pub fn classification_report(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ClassificationReport> {
    Ok(ClassificationReport {
        n: scores.len(),
        positives: labels.iter().filter(|&&l| l).count(),
        roc_auc: roc_auc(scores, labels)?,
        average_precision: average_precision(scores, labels)?,
        confusion: confusion_at(scores, labels, threshold)?,
        curves: curve_data(scores, labels)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Equal-width histogram over `[min, max]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    if values.is_empty() || bins == 0 {
        return Histogram {
            edges: Vec::new(),
            counts: Vec::new(),
        };
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Histogram {
            edges: vec![lo, hi],
            counts: vec![values.len() as u64],
        };
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + i as f64 * width }).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Histogram { edges, counts }
}

pub const ERROR_HISTOGRAM_BINS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub n: usize,
    /// `None` when the actuals have zero variance.
    pub r2: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
    /// `None` when no actual exceeds [`MAPE_EPSILON`].
    pub mape_pct: Option<f64>,
    pub mape_eligible: usize,
    /// `None` when every actual is zero.
    pub wmape_pct: Option<f64>,
    /// Histogram of `predicted - actual`.
    pub error_histogram: Histogram,
}

pub fn regression_metrics(actuals: &[f64], predictions: &[f64]) -> Result<RegressionReport> {
    check_lengths(predictions.len(), actuals.len())?;
    if actuals.is_empty() {
        return Err(LabError::Data("regression metrics need at least one row".into()));
    }
    if actuals.iter().chain(predictions).any(|v| !v.is_finite()) {
        return Err(LabError::Numeric("non-finite actual or prediction".into()));
    }
    let n = actuals.len() as f64;
    let mean = actuals.iter().sum::<f64>() / n;
    let ss_tot: f64 = actuals.iter().map(|a| (a - mean) * (a - mean)).sum();
    let ss_res: f64 = actuals.iter().zip(predictions).map(|(a, p)| (a - p) * (a - p)).sum();
    let abs_err: f64 = actuals.iter().zip(predictions).map(|(a, p)| (a - p).abs()).sum();
    let abs_act: f64 = actuals.iter().map(|a| a.abs()).sum();
    let (mut ape, mut eligible) = (0.0, 0usize);
    for (a, p) in actuals.iter().zip(predictions) {
        if *a > MAPE_EPSILON {
            ape += (a - p).abs() / a.abs();
            eligible += 1;
        }
    }
    let errors: Vec<f64> = actuals.iter().zip(predictions).map(|(a, p)| p - a).collect();
    Ok(RegressionReport {
        n: actuals.len(),
        r2: (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot),
        mae: abs_err / n,
        rmse: (ss_res / n).sqrt(),
        mape_pct: (eligible > 0).then(|| ape / eligible as f64 * 100.0),
        mape_eligible: eligible,
        wmape_pct: (abs_act > 0.0).then(|| abs_err / abs_act * 100.0),
        error_histogram: histogram(&errors, ERROR_HISTOGRAM_BINS),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_actual: Option<f64>,
    pub mean_predicted: Option<f64>,
    pub mape_pct: Option<f64>,
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedReport {
    pub edges: Vec<f64>,
    pub bins: Vec<BinStats>,
}

/// Per-bin statistics over `[e_i, e_{i+1})`, with the last bin closed.
pub fn binned_analysis(actuals: &[f64], predictions: &[f64], edges: &[f64]) -> Result<BinnedReport> {
    check_lengths(predictions.len(), actuals.len())?;
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(LabError::Config("bin edges must be strictly increasing (at least two)".into()));
    }
    let nb = edges.len() - 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); nb];
    for (i, &a) in actuals.iter().enumerate() {
        if !(a >= edges[0] && a <= edges[nb]) {
            return Err(LabError::Data(format!(
                "actual {a} outside bin coverage [{}, {}]",
                edges[0], edges[nb]
            )));
        }
        let b = (edges.partition_point(|&e| e <= a) - 1).min(nb - 1);
        members[b].push(i);
    }
    let bins = members
        .iter()
        .enumerate()
        .map(|(b, idx)| {
            let k = idx.len() as f64;
            let (mut sa, mut sp, mut se, mut ape, mut elig) = (0.0, 0.0, 0.0, 0.0, 0usize);
            for &i in idx {
                let (a, p) = (actuals[i], predictions[i]);
                sa += a;
                sp += p;
                se += (a - p).abs();
                if a > MAPE_EPSILON {
                    ape += (a - p).abs() / a.abs();
                    elig += 1;
                }
            }
            let nonempty = !idx.is_empty();
            BinStats {
                lower: edges[b],
                upper: edges[b + 1],
                count: idx.len(),
                mean_actual: nonempty.then(|| sa / k),
                mean_predicted: nonempty.then(|| sp / k),
                mape_pct: (elig > 0).then(|| ape / elig as f64 * 100.0),
                mae: nonempty.then(|| se / k),
            }
        })
        .collect();
    Ok(BinnedReport {
        edges: edges.to_vec(),
        bins,
    })
}

fn fmt_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

fn write_series(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{}", header.join(",")).unwrap();
    for r in rows {
        let cells: Vec<String> = r.into_iter().map(fmt_float).collect();
        writeln!(out, "{}", cells.join(",")).unwrap();
    }
    std::fs::write(path, out).map_err(|e| LabError::io(path, e))
}

pub fn write_roc_csv(path: &Path, curves: &Curves) -> Result<()> {
    write_series(
        path,
        &["threshold", "fpr", "tpr"],
        curves.roc.iter().map(|p| vec![p.threshold, p.fpr, p.tpr]),
    )
}

pub fn write_pr_csv(path: &Path, curves: &Curves) -> Result<()> {
    write_series(
        path,
        &["threshold", "recall", "precision"],
        curves.pr.iter().map(|p| vec![p.threshold, p.recall, p.precision]),
    )
}

pub fn write_scatter_csv(path: &Path, actuals: &[f64], predictions: &[f64]) -> Result<()> {
    write_series(
        path,
        &["actual", "predicted"],
        actuals.iter().zip(predictions).map(|(a, p)| vec![*a, *p]),
    )
}

pub fn write_histogram_csv(path: &Path, h: &Histogram) -> Result<()> {
    write_series(
        path,
        &["lower", "upper", "count"],
        h.counts
            .iter()
            .enumerate()
            .map(|(i, &c)| vec![h.edges[i], h.edges[i + 1], c as f64]),
    )
}
