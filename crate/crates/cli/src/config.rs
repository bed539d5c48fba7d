//! Experiment configuration: JSON schema, presets and default resolution.

use std::path::{Path, PathBuf};

use fbtwa_core::field::{FieldParams, FieldSchedule, GridSpec, ThermalSettings};
use fbtwa_core::schedule::ProtocolSchedule;
use fbtwa_core::spin::{SpinInitialState, TwoModeParams};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::presets;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    Physics(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    #[default]
    TwoMode,
    Field,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    Cf,
    Kraus,
    KrausQuadrature,
    Npw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldScheduleConfig {
    pub cycles: usize,
    #[serde(default = "default_per_cycle")]
    pub per_cycle: usize,
    #[serde(default)]
    pub steps_per_interval: Option<usize>,
    #[serde(default)]
    pub record_every: Option<usize>,
}

fn default_per_cycle() -> usize {
    150
}

/// Raw configuration as written by the user; every physics key is optional
/// so that presets and defaults can fill the gaps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub experiment: Option<Experiment>,
    pub solver: Option<Solver>,

    pub chi: Option<f64>,
    pub kappa: Option<f64>,
    pub lambda: Option<f64>,
    /// Single-shot uncertainty `1 / (2 lambda beta0)`; alternative to `lambda`.
    pub delta_jz: Option<f64>,
    pub k_fb: Option<f64>,
    #[serde(rename = "N")]
    pub n_atoms: Option<usize>,
    pub beta0: Option<f64>,
    pub n_measurements: Option<usize>,
    pub tau: Option<f64>,
    pub t_p: Option<f64>,
    pub dt: Option<f64>,
    pub t_total: Option<f64>,
    pub record_substeps: Option<usize>,
    pub initial: Option<SpinInitialState>,
    pub norm_target: Option<f64>,
    pub quadrature_points: Option<usize>,
    pub n_particles: Option<usize>,
    pub n_conditional: Option<usize>,
    pub pulse_substeps: Option<usize>,
    pub sweep_delta_jz: Option<Vec<f64>>,
    pub histogram_bins: Option<usize>,

    pub field: Option<FieldParams>,
    pub grid: Option<GridSpec>,
    pub thermal: Option<ThermalSettings>,
    pub field_schedule: Option<FieldScheduleConfig>,
    pub thermal_cache: Option<PathBuf>,

    pub master_seed: Option<u64>,
    pub n_traj: Option<usize>,
    pub n_records: Option<usize>,

    pub level_sigmas: Option<f64>,
    pub n_resamples: Option<usize>,

    pub output_dir: Option<PathBuf>,
    pub plots: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoModeSetup {
    pub solver: Solver,
    pub params: TwoModeParams,
    pub schedule: ProtocolSchedule,
    pub initial: SpinInitialState,
    pub n_traj: usize,
    pub n_records: usize,
    pub n_particles: usize,
    pub n_conditional: usize,
    pub pulse_substeps: usize,
    pub quadrature_points: usize,
    pub norm_target: Option<f64>,
    pub sweep_delta_jz: Option<Vec<f64>>,
    pub histogram_bins: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSetup {
    pub params: FieldParams,
    pub grid: GridSpec,
    pub thermal: ThermalSettings,
    pub schedule: FieldSchedule,
    pub n_traj: usize,
    pub thermal_cache: Option<PathBuf>,
}

/// Fully resolved configuration; echoed into the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub experiment: Experiment,
    pub preset: Option<String>,
    pub master_seed: u64,
    pub level_sigmas: f64,
    pub n_resamples: usize,
    pub output_dir: PathBuf,
    pub plots: bool,
    pub two_mode: Option<TwoModeSetup>,
    pub field: Option<FieldSetup>,
}

impl ResolvedConfig {
    /// SHA-256 over the physics and sampling content (output location,
    /// plotting, preset label and cache path excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.plots = false;
        c.preset = None;
        if let Some(f) = c.field.as_mut() {
            f.thermal_cache = None;
        }
        let bytes = serde_json::to_vec(&c).expect("config serialises");
        hex(&Sha256::digest(&bytes))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn suggest(msg: &str) -> Option<String> {
    let start = msg.find("unknown field `")? + "unknown field `".len();
    let unknown = &msg[start..start + msg[start..].find('`')?];
    let expected = &msg[msg.find("expected")?..];
    let best = expected
        .split('`')
        .skip(1)
        .step_by(2)
        .map(|cand| (strsim::normalized_damerau_levenshtein(unknown, cand), cand))
        .max_by(|a, b| a.0.total_cmp(&b.0))?;
    (best.0 >= 0.5).then(|| best.1.to_string())
}

/// Parse a JSON value (possibly naming a preset) into a raw config.
pub fn parse_value(value: Value, preset_override: Option<&str>) -> Result<ExperimentConfig, ConfigError> {
    if !value.is_object() {
        return Err(ConfigError::Schema("configuration must be a JSON object".into()));
    }
    let preset = preset_override
        .map(str::to_string)
        .or_else(|| value.get("preset").and_then(Value::as_str).map(str::to_string));
    let merged = match &preset {
        Some(name) => {
            let mut base = presets::preset(name).ok_or_else(|| {
                ConfigError::Schema(format!(
                    "unknown preset \"{name}\"; available: {}",
                    presets::NAMES.join(", ")
                ))
            })?;
            merge(&mut base, value);
            if let Value::Object(m) = &mut base {
                m.insert("preset".into(), Value::String(name.clone()));
            }
            base
        }
        None => value,
    };
    serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.inner().to_string();
        let mut msg = if path.is_empty() || path == "." {
            format!("config error: {inner}")
        } else {
            format!("config error at `{path}`: {inner}")
        };
        if let Some(s) = suggest(&inner) {
            msg.push_str(&format!("; did you mean `{s}`?"));
        }
        ConfigError::Schema(msg)
    })
}

pub fn load_config(path: &Path, preset_override: Option<&str>) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| ConfigError::Schema(format!("{}: invalid JSON: {e}", path.display())))?;
    parse_value(value, preset_override)
}

fn need<T>(v: Option<T>, key: &str) -> Result<T, ConfigError> {
    v.ok_or_else(|| ConfigError::Schema(format!("missing required key `{key}`")))
}

fn physics<E: std::fmt::Display>(e: E) -> ConfigError {
    ConfigError::Physics(e.to_string())
}

impl ExperimentConfig {
    pub fn resolve(&self) -> Result<ResolvedConfig, ConfigError> {
        let experiment = self.experiment.unwrap_or_default();
        let master_seed = self.master_seed.unwrap_or(0);
        let level_sigmas = self.level_sigmas.unwrap_or(2.0);
        if !(level_sigmas > 0.0) {
            return Err(ConfigError::Physics("level_sigmas must be positive".into()));
        }
        let n_resamples = self.n_resamples.unwrap_or(fbtwa_core::stats::DEFAULT_RESAMPLES);
        if n_resamples < 100 {
            return Err(ConfigError::Physics("n_resamples must be >= 100".into()));
        }
        let mut out = ResolvedConfig {
            experiment,
            preset: self.preset.clone(),
            master_seed,
            level_sigmas,
            n_resamples,
            output_dir: self.output_dir.clone().unwrap_or_else(|| PathBuf::from("out")),
            plots: self.plots.unwrap_or(true),
            two_mode: None,
            field: None,
        };
        match experiment {
            Experiment::TwoMode => out.two_mode = Some(self.resolve_two_mode()?),
            Experiment::Field => out.field = Some(self.resolve_field()?),
        }
        Ok(out)
    }

    fn resolve_two_mode(&self) -> Result<TwoModeSetup, ConfigError> {
        let beta0 = need(self.beta0, "beta0")?;
        let lambda = match (self.lambda, self.delta_jz) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Schema(
                    "give either `lambda` or `delta_jz`, not both".into(),
                ))
            }
            (Some(l), None) => l,
            (None, Some(d)) => {
                if !(d > 0.0) {
                    return Err(ConfigError::Physics("delta_jz must be positive".into()));
                }
                1.0 / (2.0 * d * beta0)
            }
            (None, None) => return Err(ConfigError::Schema("missing required key `lambda`".into())),
        };
        let params = TwoModeParams {
            chi: need(self.chi, "chi")?,
            kappa: need(self.kappa, "kappa")?,
            lambda,
            k_fb: need(self.k_fb, "k_fb")?,
            n_atoms: need(self.n_atoms, "N")?,
            beta0,
        };
        params.validate().map_err(physics)?;
        let n_measurements = need(self.n_measurements, "n_measurements")?;
        if n_measurements < 1 {
            return Err(ConfigError::Physics("n_measurements must be >= 1".into()));
        }
        let tau = match self.tau {
            Some(t) => t,
            None if params.kappa > 0.0 => ProtocolSchedule::default_tau(params.kappa, n_measurements),
            None => {
                return Err(ConfigError::Physics(
                    "tau has no default when kappa = 0; set `tau`".into(),
                ))
            }
        };
        let mut schedule = ProtocolSchedule::uniform(tau, n_measurements);
        if let Some(v) = self.t_p {
            schedule.t_p = v;
        }
        if let Some(v) = self.dt {
            schedule.dt = v;
        }
        if let Some(v) = self.t_total {
            schedule.t_total = v;
        }
        if let Some(v) = self.record_substeps {
            schedule.record_substeps = v;
        }
        schedule.validate().map_err(physics)?;
        let initial = self.initial.unwrap_or(SpinInitialState::Css {
            bloch: [0.0, 0.4, -0.3],
        });
        initial.validate(&params).map_err(physics)?;
        let solver = self.solver.unwrap_or_default();
        let n_traj = self.n_traj.unwrap_or(5000);
        if solver == Solver::Cf && n_traj < 2 {
            return Err(ConfigError::Physics("n_traj must be >= 2".into()));
        }
        if let Some(s) = &self.sweep_delta_jz {
            if s.is_empty() || s.iter().any(|d| !(*d > 0.0)) {
                return Err(ConfigError::Physics(
                    "sweep_delta_jz must list positive strengths".into(),
                ));
            }
        }
        Ok(TwoModeSetup {
            solver,
            params,
            schedule,
            initial,
            n_traj,
            n_records: self.n_records.unwrap_or(2000),
            n_particles: self.n_particles.unwrap_or(200),
            n_conditional: self.n_conditional.unwrap_or(100),
            pulse_substeps: self
                .pulse_substeps
                .unwrap_or(fbtwa_core::npw::DEFAULT_PULSE_SUBSTEPS),
            quadrature_points: self.quadrature_points.unwrap_or(401),
            norm_target: self.norm_target,
            sweep_delta_jz: self.sweep_delta_jz.clone(),
            histogram_bins: self.histogram_bins,
        })
    }

    fn resolve_field(&self) -> Result<FieldSetup, ConfigError> {
        let params = need(self.field, "field")?;
        let grid = self.grid.unwrap_or_default();
        let g = fbtwa_core::field::Grid1D::from_spec(grid).map_err(physics)?;
        params.validate(&g).map_err(physics)?;
        let thermal = need(self.thermal, "thermal")?;
        let sc = need(self.field_schedule, "field_schedule")?;
        if sc.cycles < 1 || sc.per_cycle < 1 {
            return Err(ConfigError::Physics(
                "field_schedule needs cycles >= 1 and per_cycle >= 1".into(),
            ));
        }
        let tau = 2.0 * std::f64::consts::PI / sc.per_cycle as f64;
        let limit = 0.5 * 2.0 * std::f64::consts::PI / (0.5 * g.k_max().powi(2));
        let steps = sc
            .steps_per_interval
            .unwrap_or_else(|| (tau / limit).ceil() as usize + 1);
        let mut schedule = FieldSchedule::trap_cycles(sc.cycles, sc.per_cycle, steps);
        if let Some(r) = sc.record_every {
            schedule.record_every = r;
        }
        schedule.validate().map_err(physics)?;
        if schedule.dt() > limit {
            return Err(ConfigError::Physics(format!(
                "split-step dt = {} exceeds the spectral limit {limit}; raise steps_per_interval",
                schedule.dt()
            )));
        }
        let n_traj = self.n_traj.unwrap_or(64);
        if n_traj < 2 {
            return Err(ConfigError::Physics("n_traj must be >= 2".into()));
        }
        Ok(FieldSetup {
            params,
            grid,
            thermal,
            schedule,
            n_traj,
            thermal_cache: self.thermal_cache.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> Value {
        json!({"chi": 0.01, "kappa": 0.09, "lambda": 0.8e-4, "k_fb": 0.1, "N": 100,
               "beta0": 3162.2776601683795, "n_measurements": 62})
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_value(minimal(), None).unwrap().resolve().unwrap();
        let tm = c.two_mode.unwrap();
        assert_eq!(tm.solver, Solver::Cf);
        assert_eq!(tm.n_traj, 5000);
        assert!((tm.schedule.tau - 4.0 * std::f64::consts::PI / 0.09 / 62.0).abs() < 1e-12);
        assert!((tm.schedule.t_p - tm.schedule.tau / 1000.0).abs() < 1e-15);
    }

    #[test]
    fn misspelt_key_gets_a_suggestion() {
        let mut v = minimal();
        v.as_object_mut().unwrap().remove("k_fb");
        v.as_object_mut().unwrap().insert("kfb".into(), json!(0.1));
        let err = parse_value(v, None).unwrap_err().to_string();
        assert!(err.contains("kfb"), "{err}");
        assert!(err.contains("did you mean `k_fb`"), "{err}");
    }

    #[test]
    fn type_errors_name_the_key() {
        let mut v = minimal();
        v["chi"] = json!("large");
        let err = parse_value(v, None).unwrap_err().to_string();
        assert!(err.contains("chi") && err.contains("f64"), "{err}");
    }

    #[test]
    fn pulse_width_constraint_is_reported() {
        let mut v = minimal();
        v["t_p"] = json!(1.0);
        let err = parse_value(v, None).unwrap().resolve().unwrap_err();
        assert!(matches!(err, ConfigError::Physics(_)));
        assert!(err.to_string().contains("tau/10"), "{err}");
    }

    #[test]
    fn fig1_preset_expands() {
        let c = parse_value(json!({}), Some("fig1")).unwrap().resolve().unwrap();
        let tm = c.two_mode.unwrap();
        assert_eq!(tm.params.n_atoms, 100);
        assert_eq!(tm.params.chi, 0.01);
        assert_eq!(tm.params.kappa, 0.09);
        assert_eq!(tm.params.lambda, 0.8e-4);
        assert_eq!(tm.params.k_fb, 0.1);
        assert_eq!(tm.params.beta0, 1e7f64.sqrt());
        assert_eq!(tm.schedule.n_measurements, 62);
    }

    #[test]
    fn user_keys_override_preset() {
        let c = parse_value(json!({"preset": "fig1", "n_traj": 10}), None)
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(c.two_mode.unwrap().n_traj, 10);
    }

    #[test]
    fn hash_ignores_output_location_only() {
        let a = parse_value(minimal(), None).unwrap().resolve().unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        b.plots = false;
        assert_eq!(a.hash(), b.hash());
        b.master_seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
