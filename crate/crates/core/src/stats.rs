//! Summary statistics, bootstrap intervals and simple fits.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::stream;

/// Bootstrap resamples used for every interval.
pub const BOOTSTRAP_RESAMPLES: usize = 1000;
/// Seed of the bootstrap stream unless one is given.
pub const BOOTSTRAP_SEED: u64 = 0x5EED_B007;

/// Summary of a sample of one observable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatSummary {
    pub n: usize,
    /// Non-finite values that were left out.
    pub dropped: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
}

/// Quantile with linear interpolation on sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < n {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[n - 1]
    }
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

pub fn median(xs: &[f64]) -> f64 {
    quantile_sorted(&sorted(xs), 0.5)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean and its standard error (`s / sqrt(n)`).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Summary with a percentile bootstrap CI on the mean using the default seed.
pub fn summarize(xs: &[f64]) -> Result<StatSummary> {
    summarize_seeded(xs, BOOTSTRAP_SEED)
}

pub fn summarize_seeded(xs: &[f64], seed: u64) -> Result<StatSummary> {
    let finite: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    let dropped = xs.len() - finite.len();
    if finite.is_empty() {
        return invalid("cannot summarise an empty sample");
    }
    let n = finite.len();
    let (m, se) = mean_se(&finite);
    let std = se * (n as f64).sqrt();
    let mut rng = stream(seed);
    let mut means = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let mut s = 0.0;
        for _ in 0..n {
            s += finite[rng.random_range(0..n)];
        }
        means.push(s / n as f64);
    }
    let means = sorted(&means);
    Ok(StatSummary {
        n,
        dropped,
        mean: m,
        median: median(&finite),
        std,
        ci95_low: quantile_sorted(&means, 0.025),
        ci95_high: quantile_sorted(&means, 0.975),
    })
}

/// Summary of `ln|x|`.
pub fn summarize_log_abs(xs: &[f64]) -> Result<StatSummary> {
    let l: Vec<f64> = xs.iter().map(|x| x.abs().ln()).collect();
    summarize(&l)
}

/// Least-squares line `y = slope * x + intercept`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return invalid("line fit needs at least two paired points");
    }
    let mx = mean(xs);
    let my = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return invalid("line fit needs distinct abscissae");
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Kolmogorov-Smirnov distance between a sample and a continuous CDF.
pub fn ks_distance(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let s = sorted(xs);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in s.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample() {
        let s = summarize(&[2.5]).unwrap();
        assert_eq!((s.mean, s.median, s.std, s.ci95_low, s.ci95_high), (2.5, 2.5, 0.0, 2.5, 2.5));
    }

    #[test]
    fn empty_is_error() {
        assert!(summarize(&[]).is_err());
        assert!(summarize(&[f64::NAN]).is_err());
    }

    #[test]
    fn line_fit_exact() {
        let (s, c) = fit_line(&[1.0, 2.0, 3.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!((s - 2.0).abs() < 1e-15 && (c + 1.0).abs() < 1e-15);
    }

    #[test]
    fn quantiles() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
