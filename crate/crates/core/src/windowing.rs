//! Rolling calendar windows, the 70/15/15 train/validation/test partition,
//! and training-split feature scaling.

use chrono::{Datelike, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::feature_engine::FeatureRow;
use crate::matrix::Matrix;

/// Split shares in percent: train, validation, test.
pub const SPLIT_PERCENT: [u64; 3] = [70, 15, 15];
pub const SD_FLOOR: f64 = 1e-8;

/// A calendar window covering `[start_year-01-01, end_year-01-01)`,
/// labelled `start-end` (e.g. `2015-2019` spans 2015 through 2018).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub id: String,
    pub start_year: i32,
    pub end_year: i32,
}

impl WindowSpec {
    pub fn new(start_year: i32, end_year: i32) -> Self {
        Self {
            id: format!("{start_year}-{end_year}"),
            start_year,
            end_year,
        }
    }

    pub fn start(&self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.start_year, 1, 1).unwrap()
    }

    pub fn end_exclusive(&self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.end_year, 1, 1).unwrap()
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        date >= self.start() && date < self.end_exclusive()
    }
}

/// Year range `[min year, max year + 1)` covered by a set of dates.
pub fn year_range(dates: impl IntoIterator<Item = NaiveDate>) -> Option<(i32, i32)> {
    let mut it = dates.into_iter();
    let first = it.next()?;
    let (lo, hi) = it.fold((first, first), |(lo, hi), d| (lo.min(d), hi.max(d)));
    Some((lo.year(), hi.year() + 1))
}

/// `n_windows` windows of `window_years`, each shifted one year from the
/// previous, anchored at `range_start`.
pub fn make_windows(range_start: i32, range_end: i32, window_years: i32, n_windows: usize) -> Result<Vec<WindowSpec>> {
    if window_years < 1 || n_windows == 0 {
        return Err(LabError::Config(
            "window length and window count must be positive".into(),
        ));
    }
    let needed = window_years + n_windows as i32 - 1;
    if range_end - range_start < needed {
        return Err(LabError::Config(format!(
            "range {range_start}-{range_end} spans {} years; {n_windows} windows of {window_years} years need {needed}",
            range_end - range_start
        )));
    }
    Ok((0..n_windows as i32)
        .map(|k| WindowSpec::new(range_start + k, range_start + k + window_years))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitMode {
    #[default]
    Chronological,
    Random {
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub mode: SplitMode,
    pub fractions: [f64; 3],
    /// One entry per input row, in input order.
    pub assignment: Vec<Split>,
}

impl SplitAssignment {
    pub fn indices(&self, which: Split) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == which)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in &self.assignment {
            c[*s as usize] += 1;
        }
        c
    }
}

/// Largest-remainder apportionment of `n` rows to the three splits. Equal
/// remainders go to the earlier split.
pub fn split_counts(n: usize) -> [usize; 3] {
    let n = n as u64;
    let mut counts = SPLIT_PERCENT.map(|p| (n * p / 100) as usize);
    let remainders = SPLIT_PERCENT.map(|p| n * p % 100);
    let mut left = n as usize - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| remainders[b].cmp(&remainders[a]).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Indices of rows whose issue date falls inside `window`.
pub fn window_rows(window: &WindowSpec, rows: &[FeatureRow]) -> Vec<usize> {
    rows.iter()
        .enumerate()
        .filter(|(_, r)| window.contains(r.issue_date))
        .map(|(i, _)| i)
        .collect()
}

/// Partitions the rows of one window. Chronological mode cuts the rows
/// ordered by (issue_date, invoice key); random mode cuts a seeded shuffle.
pub fn split(window: &WindowSpec, rows: &[&FeatureRow], mode: SplitMode) -> Result<SplitAssignment> {
    if rows.is_empty() {
        return Err(LabError::Data(format!("window {} is empty", window.id)));
    }
    if let Some(r) = rows.iter().find(|r| !window.contains(r.issue_date)) {
        return Err(LabError::Data(format!(
            "invoice {} ({}) lies outside window {}",
            r.invoice_number, r.issue_date, window.id
        )));
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (rows[a], rows[b]);
        (ra.issue_date, &ra.buyer_id, &ra.supplier_id, &ra.invoice_number)
            .cmp(&(rb.issue_date, &rb.buyer_id, &rb.supplier_id, &rb.invoice_number))
            .then(a.cmp(&b))
    });
    if let SplitMode::Random { seed } = mode {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let [n_train, n_val, _] = split_counts(rows.len());
    let mut assignment = vec![Split::Test; rows.len()];
    for (rank, &i) in order.iter().enumerate() {
        assignment[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(SplitAssignment {
        mode,
        fractions: SPLIT_PERCENT.map(|p| p as f64 / 100.0),
        assignment,
    })
}

/// Per-feature standardization fitted on a training split. Columns not
/// marked continuous pass through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub scaled: Vec<bool>,
}

/// Population (denominator n) mean and standard deviation per column, with
/// the standard deviation floored at [`SD_FLOOR`].
pub fn fit_scaler(train: &Matrix, continuous: &[bool]) -> Result<Scaler> {
    if train.rows() == 0 {
        return Err(LabError::Data("cannot fit a scaler on an empty split".into()));
    }
    if continuous.len() != train.cols() {
        return Err(LabError::Data(format!(
            "scaler mask has {} entries for {} columns",
            continuous.len(),
            train.cols()
        )));
    }
    let n = train.rows() as f64;
    let mut mean = vec![0.0; train.cols()];
    for row in train.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; train.cols()];
    for row in train.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let sd = var.iter().map(|s| (s / n).sqrt().max(SD_FLOOR)).collect();
    Ok(Scaler {
        mean,
        sd,
        scaled: continuous.to_vec(),
    })
}

impl Scaler {
    pub fn transform_row(&self, row: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(row.iter().enumerate().map(|(j, &v)| {
            if self.scaled[j] {
                (v - self.mean[j]) / self.sd[j]
            } else {
                v
            }
        }));
    }

    pub fn transform(&self, x: &Matrix) -> Matrix {
        let mut data = Vec::with_capacity(x.rows() * x.cols());
        let mut buf = Vec::with_capacity(x.cols());
        for row in x.iter_rows() {
            self.transform_row(row, &mut buf);
            data.extend_from_slice(&buf);
        }
        Matrix::from_vec(x.rows(), x.cols(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_engine::{build_features, FeatureOptions};
    use crate::data_model::{InvoiceRecord, Money};
    use chrono::Duration;

    #[test]
    fn seven_windows_over_a_decade() {
        let w = make_windows(2015, 2025, 4, 7).unwrap();
        let ids: Vec<_> = w.iter().map(|w| w.id.as_str()).collect();
        assert_eq!(
            ids,
            ["2015-2019", "2016-2020", "2017-2021", "2018-2022", "2019-2023", "2020-2024", "2021-2025"]
        );
        for pair in w.windows(2) {
            assert_eq!(pair[1].start_year - pair[0].start_year, 1);
            assert_eq!(pair[1].end_year - pair[1].start_year, pair[0].end_year - pair[0].start_year);
        }
    }

    #[test]
    fn single_window_and_short_range() {
        assert_eq!(make_windows(2015, 2025, 4, 1).unwrap(), vec![WindowSpec::new(2015, 2019)]);
        assert!(make_windows(2018, 2020, 4, 7).is_err());
    }

    #[test]
    fn window_membership_is_half_open() {
        let w = WindowSpec::new(2015, 2019);
        assert!(w.contains(NaiveDate::from_ymd_opt(2015, 1, 1).unwrap()));
        assert!(w.contains(NaiveDate::from_ymd_opt(2018, 12, 31).unwrap()));
        assert!(!w.contains(NaiveDate::from_ymd_opt(2019, 1, 1).unwrap()));
    }

    #[test]
    fn largest_remainder_counts() {
        assert_eq!(split_counts(100), [70, 15, 15]);
        assert_eq!(split_counts(7), [5, 1, 1]);
        assert_eq!(split_counts(1), [1, 0, 0]);
        assert_eq!(split_counts(3), [2, 1, 0]);
        for n in 1..500 {
            let c = split_counts(n);
            assert_eq!(c.iter().sum::<usize>(), n);
            for (k, p) in SPLIT_PERCENT.iter().enumerate() {
                let exact = n as f64 * *p as f64 / 100.0;
                assert!((c[k] as f64 - exact).abs() < 1.0 + 1e-9, "n={n} {c:?}");
            }
        }
    }

    fn rows(n: usize) -> Vec<FeatureRow> {
        let start = NaiveDate::from_ymd_opt(2016, 1, 1).unwrap();
        let invoices: Vec<InvoiceRecord> = (0..n)
            .map(|i| InvoiceRecord {
                buyer_id: format!("B{}", i % 3),
                supplier_id: format!("S{}", i % 5),
                invoice_number: format!("I{i:04}"),
                currency: "USD".into(),
                approved_amount: Money(10_000),
                total_payment_amount: Money(10_000),
                issue_date: start + Duration::days((i / 2) as i64),
                payment_date: Some(start + Duration::days((i / 2) as i64 + 10)),
                dilution_amount: Money::ZERO,
            })
            .collect();
        build_features(&invoices, &[], &FeatureOptions::default()).unwrap()
    }

    #[test]
    fn chronological_split_orders_by_date() {
        let window = WindowSpec::new(2015, 2019);
        let rows = rows(100);
        let refs: Vec<&FeatureRow> = rows.iter().collect();
        let s = split(&window, &refs, SplitMode::Chronological).unwrap();
        assert_eq!(s.counts(), [70, 15, 15]);
        let max_date = |which| s.indices(which).iter().map(|&i| rows[i].issue_date).max().unwrap();
        let min_date = |which| s.indices(which).iter().map(|&i| rows[i].issue_date).min().unwrap();
        assert!(max_date(Split::Train) <= min_date(Split::Val));
        assert!(max_date(Split::Val) <= min_date(Split::Test));
    }

    #[test]
    fn random_split_is_seeded() {
        let window = WindowSpec::new(2015, 2019);
        let rows = rows(60);
        let refs: Vec<&FeatureRow> = rows.iter().collect();
        let a = split(&window, &refs, SplitMode::Random { seed: 3 }).unwrap();
        let b = split(&window, &refs, SplitMode::Random { seed: 3 }).unwrap();
        let c = split(&window, &refs, SplitMode::Random { seed: 4 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.assignment, c.assignment);
        assert_eq!(a.counts(), [42, 9, 9]);
    }

    #[test]
    fn split_errors() {
        let window = WindowSpec::new(2020, 2024);
        assert!(split(&window, &[], SplitMode::Chronological).is_err());
        let rows = rows(4);
        let refs: Vec<&FeatureRow> = rows.iter().collect();
        assert!(split(&window, &refs, SplitMode::Chronological).is_err());
    }

    #[test]
    fn scaler_population_sd_and_floor() {
        let train = Matrix::from_rows(&[vec![1.0, 5.0, 1.0], vec![2.0, 5.0, 0.0], vec![3.0, 5.0, 1.0]]);
        let s = fit_scaler(&train, &[true, true, false]).unwrap();
        assert_eq!(s.mean[0], 2.0);
        assert!((s.sd[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(s.sd[1], SD_FLOOR);
        let t = s.transform(&train);
        assert!(t.column(1).iter().all(|v| *v == 0.0));
        assert_eq!(t.column(2), vec![1.0, 0.0, 1.0]);

        let test = Matrix::from_rows(&[vec![10.0, 5.0, 0.0], vec![12.0, 5.0, 0.0]]);
        let tt = s.transform(&test);
        let m = (tt.get(0, 0) + tt.get(1, 0)) / 2.0;
        assert!(m.abs() > 1.0);
        assert!(fit_scaler(&Matrix::zeros(0, 3), &[true; 3]).is_err());
    }
}
