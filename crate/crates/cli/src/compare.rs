//! Pointwise comparison of two runs' series outputs.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::output::{parse_series_csv, SeriesRow};
use crate::runner::{read_manifest, OutputKind};

#[derive(Debug, thiserror::Error)]
pub enum CompareError {
    #[error("{0}")]
    Input(String),
    #[error("observable `{name}` has mismatched time grids ({detail})")]
    MismatchedGrid { name: String, detail: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct ObservableReport {
    pub name: String,
    pub n_points: usize,
    pub n_flagged: usize,
    /// Largest `|a - b| / sqrt(sa^2 + sb^2)` over the series.
    pub max_z: f64,
    pub first_flagged_time: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub tolerance_sigmas: f64,
    pub observables: Vec<ObservableReport>,
}

impl CompareReport {
    pub fn passed(&self) -> bool {
        self.observables.iter().all(|o| o.n_flagged == 0)
    }
}

fn row_sigma(r: &SeriesRow, level: f64) -> f64 {
    (r.upper - r.lower).abs() / (2.0 * level)
}

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Compare two series with widths converted to one-sigma errors.
pub fn compare_series(
    name: &str,
    a: &[SeriesRow],
    level_a: f64,
    b: &[SeriesRow],
    level_b: f64,
    sigmas: f64,
) -> Result<ObservableReport, CompareError> {
    if a.len() != b.len() {
        return Err(CompareError::MismatchedGrid {
            name: name.into(),
            detail: format!("{} vs {} points", a.len(), b.len()),
        });
    }
    let mut rep = ObservableReport {
        name: name.into(),
        n_points: a.len(),
        n_flagged: 0,
        max_z: 0.0,
        first_flagged_time: None,
    };
    for (ra, rb) in a.iter().zip(b) {
        if !same_time(ra.time, rb.time) {
            return Err(CompareError::MismatchedGrid {
                name: name.into(),
                detail: format!("t = {} vs {}", ra.time, rb.time),
            });
        }
        let diff = (ra.value - rb.value).abs();
        let s = row_sigma(ra, level_a).hypot(row_sigma(rb, level_b));
        let z = if s > 0.0 {
            diff / s
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        let flagged = !(diff <= sigmas * s);
        if flagged {
            rep.n_flagged += 1;
            rep.first_flagged_time.get_or_insert(ra.time);
        }
        if !(z <= rep.max_z) {
            rep.max_z = z;
        }
    }
    Ok(rep)
}

/// Compare every series output present in both runs (or only `filter`).
pub fn compare_runs(
    a: &Path,
    b: &Path,
    sigmas: f64,
    filter: Option<&[String]>,
) -> Result<CompareReport, CompareError> {
    if !(sigmas > 0.0) {
        return Err(CompareError::Input("--sigmas must be positive".into()));
    }
    let (ma, da) = read_manifest(a).map_err(CompareError::Input)?;
    let (mb, db) = read_manifest(b).map_err(CompareError::Input)?;
    let names: Vec<String> = match filter {
        Some(list) => {
            for n in list {
                if !ma.outputs.contains_key(n) || !mb.outputs.contains_key(n) {
                    return Err(CompareError::Input(format!(
                        "observable `{n}` is not present in both runs"
                    )));
                }
            }
            list.to_vec()
        }
        None => ma
            .outputs
            .iter()
            .filter(|(n, e)| e.kind == OutputKind::Series && mb.outputs.contains_key(*n))
            .map(|(n, _)| n.clone())
            .collect(),
    };
    if names.is_empty() {
        return Err(CompareError::Input("the runs share no series outputs".into()));
    }
    let read = |dir: &Path, file: &str| -> Result<Vec<SeriesRow>, CompareError> {
        let p = dir.join(file);
        let text = fs::read_to_string(&p)
            .map_err(|e| CompareError::Input(format!("{}: {e}", p.display())))?;
        parse_series_csv(&text).map_err(|e| CompareError::Input(format!("{}: {e}", p.display())))
    };
    let mut observables = Vec::with_capacity(names.len());
    for n in names {
        let (ea, eb) = (&ma.outputs[&n], &mb.outputs[&n]);
        if ea.kind != OutputKind::Series || eb.kind != OutputKind::Series {
            return Err(CompareError::Input(format!("`{n}` is not a time series")));
        }
        let ra = read(&da, &ea.path)?;
        let rb = read(&db, &eb.path)?;
        observables.push(compare_series(&n, &ra, ma.level_sigmas, &rb, mb.level_sigmas, sigmas)?);
    }
    Ok(CompareReport {
        tolerance_sigmas: sigmas,
        observables,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64, v: f64, half: f64) -> SeriesRow {
        SeriesRow {
            time: t,
            value: v,
            lower: v - half,
            upper: v + half,
        }
    }

    #[test]
    fn combined_sigma_sets_the_threshold() {
        // Half-widths of 2 at level 2 give sigma 1 per run, combined sqrt(2).
        let a = [row(0.0, 0.0, 2.0), row(1.0, 0.0, 2.0)];
        let b = [row(0.0, 2.0, 2.0), row(1.0, 3.0, 2.0)];
        let r = compare_series("x", &a, 2.0, &b, 2.0, 2.0).unwrap();
        assert_eq!(r.n_flagged, 1);
        assert_eq!(r.first_flagged_time, Some(1.0));
        assert!((r.max_z - 3.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mismatched_times_are_an_error() {
        let a = [row(0.0, 0.0, 1.0)];
        let b = [row(0.5, 0.0, 1.0)];
        assert!(matches!(
            compare_series("x", &a, 2.0, &b, 2.0, 2.0),
            Err(CompareError::MismatchedGrid { .. })
        ));
    }

    #[test]
    fn zero_width_requires_equality() {
        let a = [row(0.0, 1.0, 0.0)];
        let b = [row(0.0, 1.0 + 1e-12, 0.0)];
        assert_eq!(compare_series("x", &a, 2.0, &b, 2.0, 5.0).unwrap().n_flagged, 1);
        assert_eq!(compare_series("x", &a, 2.0, &a, 2.0, 5.0).unwrap().n_flagged, 0);
    }
}
