//! Per-feature quantile binning shared by the histogram tree learners.

use crate::matrix::Matrix;

/// Bin index reserved for missing (NaN) values.
pub const MISSING_BIN: u16 = u16::MAX;

/// Cut points for one feature. A value `v` lands in bin
/// `#{t in thresholds : t <= v}`, so a split after bin `b` sends
/// `v < thresholds[b]` left.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBins {
    pub thresholds: Vec<f64>,
}

impl FeatureBins {
    /// At most `max_bins` bins over the finite values of `column`. With few
    /// distinct values every gap gets a midpoint cut; otherwise cuts sit at
    /// evenly spaced ranks.
    pub fn fit(column: &[f64], max_bins: usize) -> Self {
        let mut values: Vec<f64> = column.iter().copied().filter(|v| !v.is_nan()).collect();
        values.sort_by(f64::total_cmp);
        let mut distinct = values.clone();
        distinct.dedup();
        let mut thresholds = Vec::new();
        if distinct.len() <= max_bins {
            thresholds.extend(distinct.windows(2).map(|w| midpoint(w[0], w[1])));
        } else {
            let n = values.len();
            for k in 1..max_bins {
                let i = k * n / max_bins;
                if i == 0 || i >= n || values[i - 1] == values[i] {
                    continue;
                }
                let t = midpoint(values[i - 1], values[i]);
                if thresholds.last().is_none_or(|&last| t > last) {
                    thresholds.push(t);
                }
            }
        }
        Self { thresholds }
    }

    pub fn n_bins(&self) -> usize {
        self.thresholds.len() + 1
    }

    pub fn bin(&self, v: f64) -> u16 {
        if v.is_nan() {
            MISSING_BIN
        } else {
            self.thresholds.partition_point(|&t| t <= v) as u16
        }
    }
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    // Guard against rounding onto the upper value, which would misroute it.
    if m < b {
        m
    } else {
        a
    }
}

/// Column-major binned copy of a matrix.
#[derive(Debug, Clone)]
pub struct BinnedMatrix {
    pub rows: usize,
    pub features: Vec<FeatureBins>,
    pub columns: Vec<Vec<u16>>,
}

impl BinnedMatrix {
    pub fn new(x: &Matrix, max_bins: usize) -> Self {
        let features: Vec<FeatureBins> = (0..x.cols())
            .map(|j| FeatureBins::fit(&x.column(j), max_bins))
            .collect();
        let columns = features
            .iter()
            .enumerate()
            .map(|(j, fb)| (0..x.rows()).map(|i| fb.bin(x.get(i, j))).collect())
            .collect();
        Self {
            rows: x.rows(),
            features,
            columns,
        }
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }
}
