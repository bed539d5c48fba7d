//! Field ensembles on disk: little-endian `f64` pairs plus a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use fbtwa_core::field::{FieldEnsemble, FieldParams, GridSpec, ThermalSettings};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::output::{sha256_hex, write_atomic};

pub const FORMAT: &str = "fbtwa-field-snapshot";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotMeta {
    pub format: String,
    pub version: u32,
    pub grid: GridSpec,
    pub params: FieldParams,
    pub thermal: ThermalSettings,
    pub seed: u64,
    pub n_traj: usize,
    pub n_points: usize,
    /// Simulation time of the samples.
    pub time: f64,
    pub sha256: String,
}

impl SnapshotMeta {
    /// Whether a cached thermal ensemble was produced by the same sampler settings.
    pub fn matches(&self, grid: &GridSpec, params: &FieldParams, thermal: &ThermalSettings, seed: u64, n_traj: usize) -> bool {
        let sampler = |p: &FieldParams| (p.g, p.omega0, p.mu, p.t_tilde, p.gamma_growth, p.n_hg_modes);
        self.format == FORMAT
            && self.grid == *grid
            && sampler(&self.params) == sampler(params)
            && self.thermal == *thermal
            && self.seed == seed
            && self.n_traj == n_traj
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(ensemble: &FieldEnsemble) -> Vec<u8> {
    let n: usize = ensemble.trajectories.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(16 * n);
    for psi in &ensemble.trajectories {
        for z in psi {
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], n_traj: usize, n_points: usize) -> Result<FieldEnsemble, String> {
    if bytes.len() != 16 * n_traj * n_points {
        return Err(format!(
            "snapshot holds {} bytes, expected {} for {n_traj} x {n_points} complex values",
            bytes.len(),
            16 * n_traj * n_points
        ));
    }
    let mut vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let trajectories = (0..n_traj)
        .map(|_| {
            (0..n_points)
                .map(|_| Complex64::new(vals.next().unwrap(), vals.next().unwrap()))
                .collect()
        })
        .collect();
    Ok(FieldEnsemble { trajectories })
}

pub fn save(path: &Path, ensemble: &FieldEnsemble, mut meta: SnapshotMeta) -> std::io::Result<()> {
    let bytes = encode(ensemble);
    meta.sha256 = sha256_hex(&bytes);
    meta.n_traj = ensemble.n_traj();
    meta.n_points = ensemble.trajectories.first().map_or(0, Vec::len);
    write_atomic(path, &bytes)?;
    let json = serde_json::to_vec_pretty(&meta).expect("metadata serialises");
    write_atomic(&sidecar_path(path), &json)
}

pub fn load(path: &Path) -> Result<(FieldEnsemble, SnapshotMeta), String> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| format!("{}: {e}", side.display()))?;
    let meta: SnapshotMeta =
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", side.display()))?;
    if meta.format != FORMAT {
        return Err(format!("{}: not a field snapshot", side.display()));
    }
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if sha256_hex(&bytes) != meta.sha256 {
        return Err(format!("{}: checksum mismatch", path.display()));
    }
    Ok((decode(&bytes, meta.n_traj, meta.n_points)?, meta))
}
