//! Stroboscopic measurement/feedback timing shared by the two-mode solvers.

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::spin::TwoModeObservables;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSchedule {
    /// Spacing between measurements.
    pub tau: f64,
    /// Entangling pulse width; the pulse maps are applied instantaneously.
    pub t_p: f64,
    pub n_measurements: usize,
    /// Upper bound on the integrator step.
    pub dt: f64,
    pub t_total: f64,
    /// Observable samples per feedback interval (>= 1).
    #[serde(default = "default_substeps")]
    pub record_substeps: usize,
}

fn default_substeps() -> usize {
    1
}

impl ProtocolSchedule {
    /// Schedule with `t_total = n * tau`, `t_p = tau / 1000`, `dt = tau / 40`.
    pub fn uniform(tau: f64, n_measurements: usize) -> Self {
        Self {
            tau,
            t_p: tau * 1e-3,
            n_measurements,
            dt: tau / 40.0,
            t_total: tau * n_measurements as f64,
            record_substeps: 1,
        }
    }

    /// Default spacing: `n` measurements spread over four tunnelling periods `pi / kappa`.
    pub fn default_tau(kappa: f64, n_measurements: usize) -> f64 {
        4.0 * std::f64::consts::PI / kappa / n_measurements as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return arg("tau must be positive");
        }
        if self.n_measurements < 1 {
            return arg("n_measurements must be >= 1");
        }
        if !(self.t_p >= 0.0) || self.t_p > self.tau / 10.0 {
            return arg(format!(
                "pulse width t_p = {} violates t_p <= tau/10 = {}",
                self.t_p,
                self.tau / 10.0
            ));
        }
        if !(self.dt > 0.0) || self.dt > self.tau / 20.0 {
            return arg(format!(
                "integrator step dt = {} violates 0 < dt <= tau/20 = {}",
                self.dt,
                self.tau / 20.0
            ));
        }
        if self.n_measurements as f64 * self.tau > self.t_total * (1.0 + 1e-12) {
            return arg(format!(
                "n_measurements * tau = {} exceeds t_total = {}",
                self.n_measurements as f64 * self.tau,
                self.t_total
            ));
        }
        if self.record_substeps < 1 {
            return arg("record_substeps must be >= 1");
        }
        Ok(())
    }

    pub fn measurement_time(&self, j: usize) -> f64 {
        j as f64 * self.tau
    }

    /// Integrator steps per feedback interval, a multiple of `record_substeps`.
    pub fn steps_per_interval(&self) -> usize {
        let r = self.record_substeps.max(1);
        let per_record = (self.tau / (self.dt * r as f64) - 1e-9).ceil().max(1.0) as usize;
        per_record * r
    }

    /// Evolution time after the last feedback interval.
    pub fn tail_time(&self) -> f64 {
        (self.t_total - self.n_measurements as f64 * self.tau).max(0.0)
    }

    /// Every time at which observables are recorded, in protocol order.
    pub fn record_points(&self) -> Vec<RecordPoint> {
        let mut pts = Vec::new();
        let r = self.record_substeps.max(1);
        for j in 0..self.n_measurements {
            let t = self.measurement_time(j);
            pts.push(RecordPoint {
                time: t,
                kind: RecordKind::PreMeasurement,
                measurement: Some(j),
            });
            pts.push(RecordPoint {
                time: t,
                kind: RecordKind::PostMeasurement,
                measurement: Some(j),
            });
            for k in 1..=r {
                pts.push(RecordPoint {
                    time: t + self.tau * k as f64 / r as f64,
                    kind: RecordKind::Interval,
                    measurement: None,
                });
            }
        }
        if self.tail_time() > 0.0 {
            pts.push(RecordPoint {
                time: self.t_total,
                kind: RecordKind::Interval,
                measurement: None,
            });
        }
        pts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    PreMeasurement,
    PostMeasurement,
    Interval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordPoint {
    pub time: f64,
    pub kind: RecordKind,
    pub measurement: Option<usize>,
}

/// Observable time series produced by any of the two-mode solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoModeSeries {
    pub points: Vec<RecordPoint>,
    pub observables: Vec<TwoModeObservables>,
}

impl TwoModeSeries {
    /// Indices of the (pre, post) record pair around each measurement.
    pub fn measurement_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, p) in self.points.iter().enumerate() {
            if p.kind == RecordKind::PreMeasurement {
                if let Some(q) = self.points.get(i + 1) {
                    if q.kind == RecordKind::PostMeasurement {
                        out.push((i, i + 1));
                    }
                }
            }
        }
        out
    }

    pub fn last(&self) -> &TwoModeObservables {
        self.observables.last().expect("series is never empty")
    }
}
