// SPDX-License-Identifier: Apache-2.0

//! Summary statistics with Tukey-fence outlier removal.
//!
//! Quartiles use the median-unbiased estimator (Hyndman and Fan type 8).
//! Fences are computed from the raw sample; every reported statistic is
//! computed over the values inside the fences.

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    /// Values kept after filtering.
    pub count: usize,
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub mean: f64,
    /// Sample standard deviation (n − 1).
    pub stddev: f64,
    pub outlier_count: usize,
}

/// Type-8 quantile of an ascending, non-empty slice.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let n = sorted.len() as f64;
    let h = (n + 1.0 / 3.0) * p + 1.0 / 3.0;
    if h <= 1.0 {
        return sorted[0];
    }
    if h >= n {
        return sorted[sorted.len() - 1];
    }
    let lo = h.floor();
    let below = sorted[lo as usize - 1];
    let above = sorted[lo as usize];
    below + (h - lo) * (above - below)
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// `[p25 − 1.5·IQR, p75 + 1.5·IQR]` of the raw sample.
pub fn tukey_fences(values: &[f64]) -> (f64, f64) {
    let s = sorted(values);
    let (q1, q3) = (quantile(&s, 0.25), quantile(&s, 0.75));
    let iqr = q3 - q1;
    (q1 - 1.5 * iqr, q3 + 1.5 * iqr)
}

/// Values inside the fences (ascending) and how many were dropped.
pub fn tukey_filter(values: &[f64]) -> (Vec<f64>, usize) {
    if values.is_empty() {
        return (Vec::new(), 0);
    }
    let (lo, hi) = tukey_fences(values);
    let kept: Vec<f64> = sorted(values).into_iter().filter(|v| (lo..=hi).contains(v)).collect();
    let dropped = values.len() - kept.len();
    (kept, dropped)
}

/// Summary of one variant's raw values. `None` for an empty sample.
pub fn summarize(variant: &str, values: &[f64]) -> Option<SummaryRow> {
    let (kept, outliers) = tukey_filter(values);
    if kept.is_empty() {
        return None;
    }
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let var = if kept.len() > 1 {
        kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some(SummaryRow {
        variant: variant.to_owned(),
        count: kept.len(),
        min: kept[0],
        p25: quantile(&kept, 0.25),
        median: quantile(&kept, 0.5),
        p75: quantile(&kept, 0.75),
        mean,
        stddev: var.sqrt(),
        outlier_count: outliers,
    })
}

/// Least-squares line through `(x, y)`: (slope, intercept, r²).
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|(_, y)| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_of_small_samples() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&[7.0], 0.25), 7.0);
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert_eq!(quantile(&s, 1.0), 5.0);
    }

    #[test]
    fn one_far_outlier_is_dropped() {
        let mut v: Vec<f64> = (0..100).map(|i| 100.0 + (i % 10) as f64).collect();
        v.push(10_000.0);
        let row = summarize("x", &v).unwrap();
        assert_eq!(row.outlier_count, 1);
        assert_eq!(row.count, 100);
        assert!(row.mean < 110.0);
        assert_eq!(row.min, 100.0);
    }

    #[test]
    fn constant_sample() {
        let row = summarize("c", &[5.0; 10]).unwrap();
        assert_eq!((row.min, row.median, row.stddev, row.outlier_count), (5.0, 5.0, 0.0, 0));
        assert!(summarize("e", &[]).is_none());
    }

    #[test]
    fn fit_of_a_line() {
        let pts: Vec<_> = (0..10).map(|i| (i as f64, 3.0 * i as f64 + 1.0)).collect();
        let (m, b, r2) = linear_fit(&pts);
        assert!((m - 3.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-9 && (r2 - 1.0).abs() < 1e-12);
    }
}
