//! Dispatch a resolved configuration to the solvers and write the results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use fbtwa_core::cf_twa::{run_cf_protocol, CfOptions};
use fbtwa_core::field::{
    run_field_protocol, thermal_ensemble, thomas_fermi_profile, FieldEnsemble, Grid1D,
};
use fbtwa_core::kraus::{
    build_operators, run_mf_protocol, run_mf_quadrature, DickeDensityMatrix, Unravelling,
    MAX_DENSE_ATOMS,
};
use fbtwa_core::npw::{calibrate, run_npw_protocol, NpwOptions};
use fbtwa_core::schedule::TwoModeSeries;
use fbtwa_core::spin::{feature, EstimatorSettings, TwoModeParams};
use fbtwa_core::stats::FeatureTable;
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, FieldSetup, ResolvedConfig, Solver, TwoModeSetup};
use crate::output::{
    profile_csv, series_csv, series_svg, sha256_hex, write_atomic, SeriesRow,
};
use crate::snapshot::{self, SnapshotMeta};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("solver error: {0}")]
    Solver(#[from] fbtwa_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot error: {0}")]
    Snapshot(String),
    #[error("thread pool: {0}")]
    Pool(String),
}

impl RunError {
    /// Process exit code: 2 for configuration problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        use fbtwa_core::Error as E;
        match self {
            RunError::Config(_) => 2,
            RunError::Solver(E::Argument(_) | E::Capability { .. }) => 2,
            RunError::Solver(_) => 3,
            RunError::Io(_) | RunError::Snapshot(_) | RunError::Pool(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Series,
    Profile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub kind: OutputKind,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub level_sigmas: f64,
    pub config: ResolvedConfig,
    pub outputs: BTreeMap<String, OutputEntry>,
    /// Scalar reference values (e.g. the exact ground-state energy).
    pub references: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

struct Output {
    name: String,
    kind: OutputKind,
    body: String,
    plot: bool,
}

#[derive(Default)]
struct Collected {
    outputs: Vec<Output>,
    references: BTreeMap<String, f64>,
    warnings: Vec<String>,
}

impl Collected {
    fn series(&mut self, name: String, rows: Vec<SeriesRow>) {
        let plot = series_svg(&name, &rows);
        self.outputs.push(Output {
            name: name.clone(),
            kind: OutputKind::Series,
            body: series_csv(&rows),
            plot: false,
        });
        self.outputs.push(Output {
            name,
            kind: OutputKind::Series,
            body: plot,
            plot: true,
        });
    }

    fn profile(&mut self, name: String, body: String) {
        self.outputs.push(Output {
            name,
            kind: OutputKind::Profile,
            body,
            plot: false,
        });
    }
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn estimator(cfg: &ResolvedConfig) -> EstimatorSettings {
    EstimatorSettings {
        level_sigmas: cfg.level_sigmas,
        n_resamples: cfg.n_resamples,
        seed: cfg.master_seed,
    }
}

/// Run on a dedicated pool of `threads` workers (or the global pool).
pub fn run(cfg: &ResolvedConfig, threads: Option<usize>) -> Result<RunManifest, RunError> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| RunError::Pool(e.to_string()))?;
            pool.install(|| execute(cfg))
        }
        None => execute(cfg),
    }
}

fn execute(cfg: &ResolvedConfig) -> Result<RunManifest, RunError> {
    let started = now();
    fs::create_dir_all(&cfg.output_dir)?;
    let mut c = Collected::default();
    if let Some(tm) = &cfg.two_mode {
        run_two_mode(cfg, tm, &mut c)?;
    }
    if let Some(f) = &cfg.field {
        run_field(cfg, f, &mut c)?;
    }
    let mut outputs = BTreeMap::new();
    for o in &c.outputs {
        if o.plot && !cfg.plots {
            continue;
        }
        let file = if o.plot {
            format!("{}.svg", o.name)
        } else {
            format!("{}.csv", o.name)
        };
        write_atomic(&cfg.output_dir.join(&file), o.body.as_bytes())?;
        if !o.plot {
            outputs.insert(
                o.name.clone(),
                OutputEntry {
                    path: file,
                    kind: o.kind,
                    sha256: sha256_hex(o.body.as_bytes()),
                },
            );
        }
    }
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: now(),
        level_sigmas: cfg.level_sigmas,
        config: cfg.clone(),
        outputs,
        references: c.references,
        warnings: c.warnings,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    write_atomic(&cfg.output_dir.join(MANIFEST_NAME), &json)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<(RunManifest, PathBuf), String> {
    let path = if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let m = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((m, dir))
}

fn two_mode_series(
    cfg: &ResolvedConfig,
    tm: &TwoModeSetup,
    params: &TwoModeParams,
) -> Result<(TwoModeSeries, Option<Vec<FeatureTable>>), RunError> {
    let est = estimator(cfg);
    let seed = cfg.master_seed;
    Ok(match tm.solver {
        Solver::Cf => {
            let ens = tm.initial.sample(params, tm.n_traj, seed)?;
            let opts = CfOptions {
                noise_seed: seed,
                pulses: true,
                norm_target: tm.norm_target,
                keep_tables: tm.histogram_bins.is_some(),
            };
            let run = run_cf_protocol(params, &tm.schedule, &ens, &opts, &est)?;
            (run.series, run.tables)
        }
        Solver::Kraus => {
            let rho = DickeDensityMatrix::from_initial(&tm.initial, params.n_atoms)?;
            let unr = Unravelling::from_density(&rho);
            let run = run_mf_protocol(params, &tm.schedule, &unr, tm.n_records, seed, &est, false)?;
            (run.series, None)
        }
        Solver::KrausQuadrature => {
            let rho = DickeDensityMatrix::from_initial(&tm.initial, params.n_atoms)?;
            (
                run_mf_quadrature(params, &tm.schedule, &rho, tm.quadrature_points)?,
                None,
            )
        }
        Solver::Npw => {
            let cal = calibrate(params, tm.schedule.t_p, tm.schedule.dt)?;
            let opts = NpwOptions {
                n_conditional: tm.n_conditional,
                n_particles: tm.n_particles,
                pulse_substeps: tm.pulse_substeps,
                seed,
            };
            let run = run_npw_protocol(params, &tm.schedule, &cal, &opts, &tm.initial, &est)?;
            (run.series, None)
        }
    })
}

/// Observable names of the two-mode CSV outputs.
pub const TWO_MODE_OBSERVABLES: [&str; 8] = [
    "mean_jx", "mean_jy", "mean_jz", "var_jx", "var_jy", "var_jz", "tmcf", "energy",
];

fn push_two_mode(c: &mut Collected, series: &TwoModeSeries, suffix: &str) {
    let times: Vec<f64> = series.points.iter().map(|p| p.time).collect();
    for (k, name) in TWO_MODE_OBSERVABLES.iter().enumerate() {
        let rows = series
            .observables
            .iter()
            .zip(&times)
            .map(|(o, &t)| {
                let ci = match k {
                    0..=2 => &o.moments.mean[k],
                    3..=5 => &o.moments.var[k - 3],
                    6 => &o.tmcf,
                    _ => &o.energy,
                };
                SeriesRow::from_ci(t, ci)
            })
            .collect();
        c.series(format!("{name}{suffix}"), rows);
    }
}

fn histograms(c: &mut Collected, series: &TwoModeSeries, tables: &[FeatureTable], n_atoms: usize, bins: usize) {
    let half = 0.5 * n_atoms as f64 + 2.0;
    let width = 2.0 * half / bins as f64;
    let centres: Vec<f64> = (0..bins).map(|b| -half + (b as f64 + 0.5) * width).collect();
    for (col, name) in [(feature::JY, "dist_jy"), (feature::JZ, "dist_jz")] {
        let hists: Vec<Vec<f64>> = tables
            .iter()
            .map(|t| {
                let mut h = vec![0.0; bins];
                for i in 0..t.n_rows() {
                    let b = ((t.row(i)[col] + half) / width).floor();
                    if b >= 0.0 && (b as usize) < bins {
                        h[b as usize] += 1.0;
                    }
                }
                let norm = t.n_rows() as f64 * width;
                h.iter_mut().for_each(|v| *v /= norm);
                h
            })
            .collect();
        let profiles: Vec<(f64, &[f64])> = series
            .points
            .iter()
            .zip(&hists)
            .map(|(p, h)| (p.time, h.as_slice()))
            .collect();
        c.profile(name.to_string(), profile_csv(&profiles, &centres));
    }
}

fn run_two_mode(cfg: &ResolvedConfig, tm: &TwoModeSetup, c: &mut Collected) -> Result<(), RunError> {
    let variants: Vec<(String, TwoModeParams)> = match &tm.sweep_delta_jz {
        Some(list) => list
            .iter()
            .map(|d| {
                let p = TwoModeParams {
                    lambda: 1.0 / (2.0 * d * tm.params.beta0),
                    ..tm.params
                };
                (format!("_dj{d}"), p)
            })
            .collect(),
        None => vec![(String::new(), tm.params)],
    };
    if tm.params.n_atoms <= MAX_DENSE_ATOMS {
        let ops = build_operators(&tm.params)?;
        c.references
            .insert("ground_state_energy".into(), ops.ground_state_energy());
    }
    if tm.solver == Solver::Npw && tm.schedule.t_p >= tm.schedule.dt {
        c.warnings
            .push("NPW pulse length is not small against the integrator step".into());
    }
    for (suffix, params) in variants {
        info!("two-mode run {:?}{suffix}", tm.solver);
        let (series, tables) = two_mode_series(cfg, tm, &params)?;
        push_two_mode(c, &series, &suffix);
        if let (Some(bins), Some(tables)) = (tm.histogram_bins, tables) {
            histograms(c, &series, &tables, params.n_atoms, bins.max(1));
        }
    }
    Ok(())
}

/// Thermal samples for a field run, reused from the cache when the sampler
/// settings match.
pub fn thermal_samples(
    cfg: &ResolvedConfig,
    f: &FieldSetup,
    cache: &Path,
    warnings: &mut Vec<String>,
) -> Result<FieldEnsemble, RunError> {
    if cache.exists() {
        match snapshot::load(cache) {
            Ok((ens, meta)) if meta.matches(&f.grid, &f.params, &f.thermal, cfg.master_seed, f.n_traj) => {
                info!("reusing thermal samples from {}", cache.display());
                return Ok(ens);
            }
            Ok(_) => warnings.push(format!(
                "thermal cache {} was made with different settings; regenerated",
                cache.display()
            )),
            Err(e) => warnings.push(format!("thermal cache unreadable ({e}); regenerated")),
        }
    }
    let grid = Grid1D::from_spec(f.grid)?;
    info!("sampling {} thermal fields", f.n_traj);
    let ens = thermal_ensemble(&f.params, &grid, &f.thermal, f.n_traj, cfg.master_seed)?;
    if let Some(dir) = cache.parent() {
        fs::create_dir_all(dir)?;
    }
    let meta = SnapshotMeta {
        format: snapshot::FORMAT.into(),
        version: 1,
        grid: f.grid,
        params: f.params,
        thermal: f.thermal,
        seed: cfg.master_seed,
        n_traj: f.n_traj,
        n_points: f.grid.n_points,
        time: 0.0,
        sha256: String::new(),
    };
    snapshot::save(cache, &ens, meta)?;
    Ok(ens)
}

pub fn default_cache(cfg: &ResolvedConfig, f: &FieldSetup) -> PathBuf {
    f.thermal_cache
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("thermal_samples.bin"))
}

fn run_field(cfg: &ResolvedConfig, f: &FieldSetup, c: &mut Collected) -> Result<(), RunError> {
    let grid = Grid1D::from_spec(f.grid)?;
    let ens = thermal_samples(cfg, f, &default_cache(cfg, f), &mut c.warnings)?;
    info!("field protocol: {} measurements", f.schedule.n_measurements);
    let run = run_field_protocol(&f.params, &grid, &f.schedule, &ens, cfg.master_seed, &estimator(cfg))?;
    let recs = &run.records;
    for (name, pick) in [
        ("n_atoms", 0usize),
        ("f_frac", 1),
        ("var_p", 2),
    ] {
        let rows = recs
            .iter()
            .map(|r| {
                let ci = match pick {
                    0 => &r.n_atoms,
                    1 => &r.f_frac,
                    _ => &r.var_p,
                };
                SeriesRow::from_ci(r.time, ci)
            })
            .collect();
        c.series(name.to_string(), rows);
    }
    let dens: Vec<(f64, &[f64])> = recs.iter().map(|r| (r.time, r.density.as_slice())).collect();
    c.profile("density".into(), profile_csv(&dens, &grid.x));
    let g1: Vec<(f64, &[f64])> = recs.iter().map(|r| (r.time, r.g1.as_slice())).collect();
    c.profile("g1".into(), profile_csv(&g1, &grid.x));
    if let Some(last) = recs.last() {
        if f.params.g > 0.0 && last.n_atoms.point_estimate > 0.0 {
            let n = last.n_atoms.point_estimate;
            let (mut tf, mu) = thomas_fermi_profile(&grid, n, f.params.g)?;
            tf.iter_mut().for_each(|v| *v *= n);
            c.references.insert("mu_tf".into(), mu);
            c.profile("tf_profile".into(), profile_csv(&[(last.time, &tf)], &grid.x));
        }
    }
    if let Some(e) = &run.last_estimate {
        for (name, v) in [
            ("estimate_n_est", &e.n_est),
            ("estimate_n_smoothed", &e.n_smoothed),
            ("estimate_v_fb", &e.v_fb),
        ] {
            c.profile(name.into(), profile_csv(&[(e.time, v)], &grid.x));
        }
    }
    Ok(())
}

/// Sample and store a thermal ensemble without running the protocol.
pub fn thermal_sample(cfg: &ResolvedConfig, out: &Path, threads: Option<usize>) -> Result<FieldEnsemble, RunError> {
    let f = cfg.field.as_ref().ok_or_else(|| {
        RunError::Config(ConfigError::Schema(
            "thermal-sample needs a field experiment".into(),
        ))
    })?;
    let go = || {
        let mut warnings = Vec::new();
        if out.exists() {
            fs::remove_file(out)?;
        }
        thermal_samples(cfg, f, out, &mut warnings)
    };
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| RunError::Pool(e.to_string()))?
            .install(go),
        None => go(),
    }
}
