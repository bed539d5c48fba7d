//! CSV series, quick-look SVG plots and atomic file writes.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use fbtwa_core::stats::BootstrapCI;
use sha2::{Digest, Sha256};

use crate::config::hex;

pub const SERIES_HEADER: &str = "time,value,ci_lower,ci_upper";
pub const PROFILE_HEADER: &str = "time,x,value,ci_lower,ci_upper";

/// Write to a sibling temporary file, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRow {
    pub time: f64,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

impl SeriesRow {
    pub fn from_ci(time: f64, ci: &BootstrapCI) -> Self {
        Self {
            time,
            value: ci.point_estimate,
            lower: ci.lower,
            upper: ci.upper,
        }
    }
}

pub fn series_csv(rows: &[SeriesRow]) -> String {
    let mut s = String::with_capacity(64 * rows.len());
    s.push_str(SERIES_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.time, r.value, r.lower, r.upper);
    }
    s
}

/// Profiles have no bootstrap interval; the bounds repeat the value.
pub fn profile_csv(profiles: &[(f64, &[f64])], x: &[f64]) -> String {
    let mut s = String::new();
    s.push_str(PROFILE_HEADER);
    s.push('\n');
    for (t, values) in profiles {
        for (xi, v) in x.iter().zip(values.iter()) {
            let _ = writeln!(s, "{t},{xi},{v},{v},{v}");
        }
    }
    s
}

pub fn parse_series_csv(text: &str) -> Result<Vec<SeriesRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == SERIES_HEADER => {}
        other => return Err(format!("unexpected CSV header {other:?}")),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<f64> = l
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| format!("row {}: {e}", i + 1))?;
            if f.len() != 4 {
                return Err(format!("row {}: expected 4 columns, found {}", i + 1, f.len()));
            }
            Ok(SeriesRow {
                time: f[0],
                value: f[1],
                lower: f[2],
                upper: f[3],
            })
        })
        .collect()
}

/// Minimal line plot of a series with its interval band.
pub fn series_svg(title: &str, rows: &[SeriesRow]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let finite = |v: f64| v.is_finite();
    let t0 = rows.iter().map(|r| r.time).fold(f64::INFINITY, f64::min);
    let t1 = rows.iter().map(|r| r.time).fold(f64::NEG_INFINITY, f64::max);
    let lo = rows
        .iter()
        .map(|r| r.lower.min(r.value))
        .filter(|v| finite(*v))
        .fold(f64::INFINITY, f64::min);
    let hi = rows
        .iter()
        .map(|r| r.upper.max(r.value))
        .filter(|v| finite(*v))
        .fold(f64::NEG_INFINITY, f64::max);
    let (t0, t1) = if t1 > t0 { (t0, t1) } else { (t0 - 0.5, t0 + 0.5) };
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let px = |t: f64| m + (t - t0) / (t1 - t0) * (w - 2.0 * m);
    let py = |v: f64| h - m - (v - lo) / (hi - lo) * (h - 2.0 * m);
    let line = |sel: &dyn Fn(&SeriesRow) -> f64| {
        rows.iter()
            .filter(|r| finite(sel(r)))
            .map(|r| format!("{:.2},{:.2}", px(r.time), py(sel(r))))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * m,
        h - 2.0 * m
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="30" text-anchor="middle" font-family="sans-serif" font-size="16">{title}</text>"#,
        w / 2.0
    );
    for (v, y) in [(lo, h - m), (hi, m)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.4}</text>"#,
            m - 4.0
        );
    }
    for (t, x) in [(t0, m), (t1, w - m)] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{t:.2}</text>"#,
            h - m + 16.0
        );
    }
    for sel in [&(|r: &SeriesRow| r.lower) as &dyn Fn(&SeriesRow) -> f64, &|r: &SeriesRow| r.upper] {
        let _ = writeln!(
            s,
            r##"<polyline fill="none" stroke="#9ab" stroke-width="1" points="{}"/>"##,
            line(sel)
        );
    }
    let _ = writeln!(
        s,
        r##"<polyline fill="none" stroke="#c22" stroke-width="1.5" points="{}"/>"##,
        line(&|r: &SeriesRow| r.value)
    );
    s.push_str("</svg>\n");
    s
}
