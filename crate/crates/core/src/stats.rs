//! Percentile bootstrap confidence intervals.
//!
//! Every ensemble observable in this crate is a smooth function of sample
//! means of per-trajectory features, so the bootstrap works on a feature
//! table: resample rows, average columns, apply the statistic.

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::rng::RngStream;

pub const DEFAULT_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub point_estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level_sigmas: f64,
    pub n_resamples: usize,
}

impl BootstrapCI {
    /// Interval of zero width at `value`.
    pub fn exact(value: f64, level_sigmas: f64) -> Self {
        Self {
            point_estimate: value,
            lower: value,
            upper: value,
            level_sigmas,
            n_resamples: 0,
        }
    }

    /// One standard error implied by the interval width.
    pub fn sigma(&self) -> f64 {
        (self.upper - self.lower) / (2.0 * self.level_sigmas)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn shifted(&self, delta: f64) -> Self {
        Self {
            point_estimate: self.point_estimate + delta,
            lower: self.lower + delta,
            upper: self.upper + delta,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Mean,
    Variance,
}

/// Two-sided coverage of a Gaussian interval of `level_sigmas` standard deviations.
pub fn gaussian_coverage(level_sigmas: f64) -> f64 {
    libm::erf(level_sigmas / std::f64::consts::SQRT_2)
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn percentile_interval(point: f64, mut reps: Vec<f64>, level_sigmas: f64) -> BootstrapCI {
    let n_resamples = reps.len();
    reps.sort_by(|a, b| a.total_cmp(b));
    let tail = 0.5 * (1.0 - gaussian_coverage(level_sigmas));
    let lower = quantile_sorted(&reps, tail).min(point);
    let upper = quantile_sorted(&reps, 1.0 - tail).max(point);
    BootstrapCI {
        point_estimate: point,
        lower,
        upper,
        level_sigmas,
        n_resamples,
    }
}

fn sample_stat(samples: &[f64], statistic: Statistic) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    match statistic {
        Statistic::Mean => mean,
        Statistic::Variance => {
            if samples.len() < 2 {
                0.0
            } else {
                samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            }
        }
    }
}

/// Percentile bootstrap of the mean or (unbiased) variance of `samples`.
pub fn bootstrap_ci(
    samples: &[f64],
    statistic: Statistic,
    level_sigmas: f64,
    n_resamples: usize,
    stream: &mut RngStream,
) -> Result<BootstrapCI> {
    if samples.is_empty() {
        return arg("bootstrap needs at least one sample");
    }
    if n_resamples < 100 {
        return arg(format!("n_resamples must be >= 100, got {n_resamples}"));
    }
    if !(level_sigmas > 0.0) {
        return arg("level_sigmas must be positive");
    }
    let point = sample_stat(samples, statistic);
    let n = samples.len();
    let mut buf = vec![0.0; n];
    let reps = (0..n_resamples)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = samples[stream.index(n)];
            }
            sample_stat(&buf, statistic)
        })
        .collect();
    Ok(percentile_interval(point, reps, level_sigmas))
}

/// Row-major table of per-sample features (one row per trajectory or record).
#[derive(Debug, Clone, Default)]
pub struct FeatureTable {
    n_features: usize,
    data: Vec<f64>,
}

impl FeatureTable {
    pub fn new(n_features: usize) -> Self {
        Self {
            n_features,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(n_features: usize, rows: usize) -> Self {
        Self {
            n_features,
            data: Vec::with_capacity(n_features * rows),
        }
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.n_features, "feature row width mismatch");
        self.data.extend_from_slice(row);
    }

    pub fn n_rows(&self) -> usize {
        if self.n_features == 0 {
            0
        } else {
            self.data.len() / self.n_features
        }
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Column means in ascending row order.
    pub fn means(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_features];
        for i in 0..self.n_rows() {
            for (a, x) in acc.iter_mut().zip(self.row(i)) {
                *a += x;
            }
        }
        let n = self.n_rows() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Resampling plan drawn once and reused across record times.
#[derive(Debug, Clone)]
pub struct ResamplePlan {
    n: usize,
    n_resamples: usize,
    indices: Vec<u32>,
}

impl ResamplePlan {
    pub fn new(n: usize, n_resamples: usize, stream: &mut RngStream) -> Result<Self> {
        if n == 0 {
            return arg("resample plan needs at least one sample");
        }
        if n_resamples < 100 {
            return arg(format!("n_resamples must be >= 100, got {n_resamples}"));
        }
        let indices = (0..n * n_resamples)
            .map(|_| stream.index(n) as u32)
            .collect();
        Ok(Self {
            n,
            n_resamples,
            indices,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn n_resamples(&self) -> usize {
        self.n_resamples
    }

    /// Bootstrap a statistic that is not a function of column means; `stat`
    /// receives the resampled row indices.
    pub fn interval_by_indices<F>(&self, point: f64, level_sigmas: f64, stat: F) -> BootstrapCI
    where
        F: Fn(&[u32]) -> f64,
    {
        let reps = (0..self.n_resamples)
            .map(|r| stat(&self.indices[r * self.n..(r + 1) * self.n]))
            .collect();
        percentile_interval(point, reps, level_sigmas)
    }

    /// Bootstrap every output of `stat`, which maps column means to statistics.
    pub fn intervals<F>(&self, table: &FeatureTable, level_sigmas: f64, stat: F) -> Vec<BootstrapCI>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        assert_eq!(table.n_rows(), self.n, "resample plan built for a different size");
        let k = table.n_features();
        let point = stat(&table.means());
        let mut reps: Vec<Vec<f64>> = vec![Vec::with_capacity(self.n_resamples); point.len()];
        let mut acc = vec![0.0; k];
        let inv_n = 1.0 / self.n as f64;
        for r in 0..self.n_resamples {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &idx in &self.indices[r * self.n..(r + 1) * self.n] {
                let row = table.row(idx as usize);
                for (a, x) in acc.iter_mut().zip(row) {
                    *a += x;
                }
            }
            acc.iter_mut().for_each(|a| *a *= inv_n);
            for (slot, v) in reps.iter_mut().zip(stat(&acc)) {
                slot.push(v);
            }
        }
        point
            .into_iter()
            .zip(reps)
            .map(|(p, r)| percentile_interval(p, r, level_sigmas))
            .collect()
    }
}
