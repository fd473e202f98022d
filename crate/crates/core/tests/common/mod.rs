//! Brute-force reference implementations shared by the integration tests.

#![allow(dead_code)]

use chrono::{Datelike, Duration, NaiveDate};
use dilution_core::data_model::{Indicator, InvoiceRecord, MacroObservation, Money};
use dilution_core::feature_engine::{FeatureRow, HistoryKnowledge, Horizon, Recency, ScopeFeatures, WindowStats};

/// Stats for one scope and horizon by scanning every invoice.
pub fn scan_scope(
    invoices: &[InvoiceRecord],
    row: &FeatureRow,
    same_scope: impl Fn(&InvoiceRecord) -> bool,
    knowledge: HistoryKnowledge,
) -> ScopeFeatures {
    let t = row.issue_date;
    let known_from = |r: &InvoiceRecord| match knowledge {
        HistoryKnowledge::Issue => r.issue_date + Duration::days(1),
        HistoryKnowledge::Payment => r.payment_date.unwrap().max(r.issue_date) + Duration::days(1),
    };
    let is_dilution = |r: &InvoiceRecord| r.payment_date.is_some() && r.dilution_amount > Money::ZERO;
    let mut out = ScopeFeatures::default();
    for (h, horizon) in Horizon::ALL.iter().enumerate() {
        let in_horizon = |r: &InvoiceRecord| horizon.days().is_none_or(|d| (t - r.issue_date).num_days() <= d);
        let (mut n, mut k, mut amount, mut pct) = (0u32, 0u32, 0i64, 0.0f64);
        for r in invoices.iter().filter(|r| same_scope(r) && r.issue_date < t && in_horizon(r)) {
            n += 1;
            if is_dilution(r) && known_from(r) <= t {
                k += 1;
                amount += r.dilution_amount.0;
                pct += r.dilution_amount.0 as f64 / r.approved_amount.0 as f64;
            }
        }
        out.horizons[h] = WindowStats {
            invoice_count: n,
            dilution_count: k,
            dilution_frequency: (n > 0).then(|| k as f64 / n as f64),
            mean_dilution_amount: (k > 0).then(|| amount as f64 / k as f64 / 100.0),
            mean_dilution_pct: (k > 0).then(|| pct / k as f64),
        };
    }
    let last_invoice = invoices
        .iter()
        .filter(|r| same_scope(r) && r.issue_date < t)
        .map(|r| r.issue_date)
        .max();
    let last_dilution = invoices
        .iter()
        .filter(|r| same_scope(r) && r.issue_date < t && is_dilution(r) && known_from(r) <= t)
        .map(|r| r.issue_date)
        .max();
    out.recency = Recency {
        days_since_last_invoice: last_invoice.map(|d| (t - d).num_days()),
        days_since_last_dilution: last_dilution.map(|d| (t - d).num_days()),
    };
    out
}

/// Latest value published strictly before `date`, and its 12-month change.
pub fn scan_macro(series: &[MacroObservation], indicator: Indicator, date: NaiveDate) -> (Option<f64>, Option<f64>) {
    let latest = series
        .iter()
        .filter(|o| o.indicator == indicator && o.publication_date < date)
        .max_by_key(|o| (o.publication_date, o.period_end));
    let Some(latest) = latest else {
        return (None, None);
    };
    let prior = series.iter().find(|o| {
        o.indicator == indicator
            && o.period_end.year() == latest.period_end.year() - 1
            && o.period_end.month() == latest.period_end.month()
    });
    let change = prior
        .filter(|p| p.publication_date < date && p.value != 0.0)
        .map(|p| latest.value / p.value - 1.0);
    (Some(latest.value), change)
}

fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())),
        _ => false,
    }
}

fn scope_matches(a: &ScopeFeatures, b: &ScopeFeatures) -> Result<(), String> {
    for (h, (x, y)) in a.horizons.iter().zip(&b.horizons).enumerate() {
        let ok = x.invoice_count == y.invoice_count
            && x.dilution_count == y.dilution_count
            && x.dilution_frequency == y.dilution_frequency
            && x.mean_dilution_amount == y.mean_dilution_amount
            && close(x.mean_dilution_pct, y.mean_dilution_pct, 1e-12);
        if !ok {
            return Err(format!("horizon {h}: streaming {x:?} vs oracle {y:?}"));
        }
    }
    if a.recency != b.recency {
        return Err(format!("recency: streaming {:?} vs oracle {:?}", a.recency, b.recency));
    }
    Ok(())
}

/// Checks one streamed row against the full rescan.
pub fn check_row(
    invoices: &[InvoiceRecord],
    series: &[MacroObservation],
    row: &FeatureRow,
    knowledge: HistoryKnowledge,
) -> Result<(), String> {
    let ctx = |e: String| format!("{}: {e}", row.invoice_number);
    let buyer = scan_scope(invoices, row, |r| r.buyer_id == row.buyer_id, knowledge);
    scope_matches(&row.buyer, &buyer).map_err(|e| ctx(format!("buyer {e}")))?;
    let pair = scan_scope(
        invoices,
        row,
        |r| r.buyer_id == row.buyer_id && r.supplier_id == row.supplier_id,
        knowledge,
    );
    scope_matches(&row.pair, &pair).map_err(|e| ctx(format!("pair {e}")))?;
    for ind in Indicator::ALL {
        let (level, change) = scan_macro(series, ind, row.issue_date);
        let i = ind.index();
        if row.macro_features.level[i] != level || row.macro_features.change_12m[i] != change {
            return Err(ctx(format!(
                "macro {ind:?}: streaming ({:?}, {:?}) vs oracle ({level:?}, {change:?})",
                row.macro_features.level[i], row.macro_features.change_12m[i]
            )));
        }
    }
    let src = invoices.iter().find(|r| r.invoice_number == row.invoice_number).unwrap();
    if row.log_approved_amount != src.approved_amount.to_major().ln()
        || row.month != row.issue_date.month()
        || row.day_of_week != row.issue_date.weekday().num_days_from_monday()
    {
        return Err(ctx("invoice attributes differ".into()));
    }
    Ok(())
}

/// Rank-free AUC: ordered pairs counted directly, ties worth one half.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u128, 0u128);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            twice += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

/// Average precision by recounting TP and FP at every distinct threshold.
pub fn enumerated_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut tp_prev = 0u64;
    for thr in thresholds {
        let tp = scores.iter().zip(labels).filter(|(s, &l)| **s >= thr && l).count() as u64;
        let fp = scores.iter().zip(labels).filter(|(s, &l)| **s >= thr && !l).count() as u64;
        if tp > tp_prev {
            ap += (tp - tp_prev) as f64 / positives as f64 * (tp as f64 / (tp + fp) as f64);
        }
        tp_prev = tp;
    }
    ap
}

/// Least squares via normal equations with Gaussian elimination.
pub fn least_squares(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = rows[0].len();
    let mut a = vec![vec![0.0; p + 1]; p];
    for (r, &t) in rows.iter().zip(y) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += r[i] * r[j];
            }
            a[i][p] += r[i] * t;
        }
    }
    for c in 0..p {
        let pivot = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, pivot);
        for r in 0..p {
            if r != c {
                let f = a[r][c] / a[c][c];
                let pivot_row = a[c].clone();
                for (dst, src) in a[r].iter_mut().zip(&pivot_row).skip(c) {
                    *dst -= f * src;
                }
            }
        }
    }
    (0..p).map(|i| a[i][p] / a[i][i]).collect()
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}
