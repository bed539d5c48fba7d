//! Two-mode (pseudo-spin) Wigner ensembles and their estimators.
//!
//! Pseudo-spin conventions: `J_z = (n_1 - n_2)/2`, `J_x + i J_y = a_1^dag a_2`.
//! Wigner estimators use symmetric ordering; the half-quantum corrections are
//! applied when converting ensemble moments to physical moments.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::rng::{Purpose, RngStream};
use crate::stats::{BootstrapCI, FeatureTable, ResamplePlan};

/// Uniform subtraction applied to every Wigner spin variance.
pub const SPIN_VARIANCE_CORRECTION: f64 = 0.125;

pub type Amplitudes = [Complex64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoModeParams {
    pub chi: f64,
    pub kappa: f64,
    pub lambda: f64,
    pub k_fb: f64,
    #[serde(rename = "N")]
    pub n_atoms: usize,
    pub beta0: f64,
}

impl TwoModeParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_atoms < 1 {
            return arg("atom number N must be >= 1");
        }
        if !(self.beta0 > 0.0) || !self.beta0.is_finite() {
            return arg(format!("beta0 must be positive, got {}", self.beta0));
        }
        for (name, v) in [
            ("chi", self.chi),
            ("kappa", self.kappa),
            ("lambda", self.lambda),
            ("k_fb", self.k_fb),
        ] {
            if !v.is_finite() {
                return arg(format!("{name} must be finite"));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> f64 {
        self.n_atoms as f64
    }

    /// Total Wigner intensity `|a_1|^2 + |a_2|^2` of an N-atom state
    /// (N atoms plus one half-quantum per mode).
    pub fn wigner_norm(&self) -> f64 {
        self.n() + 1.0
    }

    /// Single-shot uncertainty `1 / (2 lambda beta0)`.
    pub fn single_shot_uncertainty(&self) -> f64 {
        1.0 / (2.0 * self.lambda * self.beta0)
    }

    /// Constant offset `chi N^2 / 4` between `H_s` and `chi J_z^2 + 2 kappa J_x`.
    pub fn energy_offset(&self) -> f64 {
        0.25 * self.chi * self.n() * self.n()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TwoModeEnsemble {
    pub trajectories: Vec<Amplitudes>,
}

impl TwoModeEnsemble {
    pub fn from_trajectories(trajectories: Vec<Amplitudes>) -> Self {
        Self { trajectories }
    }

    pub fn n_traj(&self) -> usize {
        self.trajectories.len()
    }
}

/// Wigner pseudo-spin vector `(J_x, J_y, J_z)` of one trajectory.
pub fn wigner_spin(a: &Amplitudes) -> [f64; 3] {
    let c = a[0].conj() * a[1];
    [c.re, c.im, 0.5 * (a[0].norm_sqr() - a[1].norm_sqr())]
}

/// Coherent amplitudes of the spin-coherent state pointing along `bloch`.
pub fn css_amplitudes(n_atoms: usize, bloch: [f64; 3]) -> Result<Amplitudes> {
    let r = (bloch[0].powi(2) + bloch[1].powi(2) + bloch[2].powi(2)).sqrt();
    if !(r > 0.0) {
        return arg("Bloch vector has zero length; CSS direction undefined");
    }
    if r > 0.5 + 1e-12 {
        return arg(format!("normalised Bloch vector length {r} exceeds 1/2"));
    }
    let theta = (bloch[2] / r).clamp(-1.0, 1.0).acos();
    let phi = bloch[1].atan2(bloch[0]);
    let sqrt_n = (n_atoms as f64).sqrt();
    Ok([
        Complex64::new(sqrt_n * (0.5 * theta).cos(), 0.0),
        Complex64::from_polar(sqrt_n * (0.5 * theta).sin(), phi),
    ])
}

/// Initial two-mode states with a Wigner sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SpinInitialState {
    /// Spin-coherent state; `bloch` is `<J>/N`.
    Css { bloch: [f64; 3] },
    /// Maximally mixed state `I/(N+1)`.
    Thermal,
}

impl SpinInitialState {
    pub fn validate(&self, params: &TwoModeParams) -> Result<()> {
        match self {
            Self::Css { bloch } => css_amplitudes(params.n_atoms, *bloch).map(|_| ()),
            Self::Thermal => Ok(()),
        }
    }

    /// Draw one Wigner sample from `stream`.
    ///
    /// CSS: all atoms occupy `c = cos(theta/2) a_1 + sin(theta/2) e^{-i phi} a_2`,
    /// sampled as a number state (`|c|^2` with mean `N + 1/2` and variance 1/4,
    /// uniform phase); the orthogonal mode carries vacuum noise.
    ///
    /// Thermal: `J` uniform on the sphere of radius `sqrt(J(J+1))`, with
    /// `|a_1|^2 + |a_2|^2 = N + 1` and a uniform global phase.
    pub fn sample_one(&self, params: &TwoModeParams, s: &mut RngStream) -> Result<Amplitudes> {
        let n = params.n();
        match self {
            Self::Css { bloch } => {
                let mean = css_amplitudes(params.n_atoms, *bloch)?;
                let (ca, cb) = (mean[0] / n.sqrt(), mean[1] / n.sqrt());
                let occupation = (n + 0.5 + 0.5 * s.standard_normal()).max(0.0);
                let c = Complex64::from_polar(occupation.sqrt(), std::f64::consts::TAU * s.uniform());
                let d = s.complex_gaussian_unchecked(0.5);
                Ok([ca * c - cb.conj() * d, cb * c + ca.conj() * d])
            }
            Self::Thermal => {
                let j = 0.5 * n;
                let radius = (j * (j + 1.0)).sqrt();
                let half_norm = 0.5 * (n + 1.0);
                let uz = 2.0 * s.uniform() - 1.0;
                let azimuth = std::f64::consts::TAU * s.uniform();
                let global = std::f64::consts::TAU * s.uniform();
                let jz = radius * uz;
                Ok([
                    Complex64::from_polar((half_norm + jz).sqrt(), global),
                    Complex64::from_polar((half_norm - jz).sqrt(), global + azimuth),
                ])
            }
        }
    }

    /// `n_traj` samples, trajectory `i` drawn from its own initial-state stream.
    pub fn sample(
        &self,
        params: &TwoModeParams,
        n_traj: usize,
        master_seed: u64,
    ) -> Result<TwoModeEnsemble> {
        params.validate()?;
        self.validate(params)?;
        let trajectories = (0..n_traj)
            .into_par_iter()
            .map(|i| {
                let mut s = RngStream::for_purpose(master_seed, Purpose::InitialState, i as u64);
                self.sample_one(params, &mut s)
            })
            .collect::<Result<_>>()?;
        Ok(TwoModeEnsemble { trajectories })
    }
}

/// Wigner samples of the N-atom spin-coherent state. `bloch` is `<J>/N`.
pub fn sample_css(
    params: &TwoModeParams,
    bloch: [f64; 3],
    n_traj: usize,
    master_seed: u64,
) -> Result<TwoModeEnsemble> {
    SpinInitialState::Css { bloch }.sample(params, n_traj, master_seed)
}

/// Wigner samples approximating the maximally mixed state `I/(N+1)`.
pub fn sample_thermal_spin(
    params: &TwoModeParams,
    n_traj: usize,
    master_seed: u64,
) -> Result<TwoModeEnsemble> {
    SpinInitialState::Thermal.sample(params, n_traj, master_seed)
}

/// Scale every trajectory so that `|a_1|^2 + |a_2|^2 = norm`.
pub fn renormalize_to_n(ensemble: &mut TwoModeEnsemble, norm: f64) -> Result<()> {
    for (i, a) in ensemble.trajectories.iter_mut().enumerate() {
        renormalize_trajectory(a, norm).map_err(|_| Error::ZeroNorm { trajectory: i })?;
    }
    Ok(())
}

pub(crate) fn renormalize_trajectory(a: &mut Amplitudes, norm: f64) -> Result<()> {
    let s = a[0].norm_sqr() + a[1].norm_sqr();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::ZeroNorm { trajectory: 0 });
    }
    let f = (norm / s).sqrt();
    a[0] *= f;
    a[1] *= f;
    Ok(())
}

/// Column layout shared by every two-mode solver's per-sample features.
///
/// CF rows are Wigner quantities of one trajectory; exact-solver rows are
/// conditional expectation values of one record.
pub mod feature {
    pub const JX: usize = 0;
    pub const JY: usize = 1;
    pub const JZ: usize = 2;
    pub const JX2: usize = 3;
    pub const JY2: usize = 4;
    pub const JZ2: usize = 5;
    pub const G11: usize = 6;
    pub const G22: usize = 7;
    pub const G12_RE: usize = 8;
    pub const G12_IM: usize = 9;
    pub const ENERGY: usize = 10;
    pub const COUNT: usize = 11;
}

/// Per-trajectory Wigner features; `G` and energy already carry their ordering corrections.
pub fn wigner_features(a: &Amplitudes, params: &TwoModeParams) -> [f64; feature::COUNT] {
    let [jx, jy, jz] = wigner_spin(a);
    let w1 = a[0].norm_sqr();
    let w2 = a[1].norm_sqr();
    let n1_sq = w1 * w1 - w1;
    let n2_sq = w2 * w2 - w2;
    let energy = 0.5 * params.chi * (n1_sq + n2_sq) + 2.0 * params.kappa * jx;
    [
        jx,
        jy,
        jz,
        jx * jx,
        jy * jy,
        jz * jz,
        w1 - 0.5,
        w2 - 0.5,
        jx,
        jy,
        energy,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinMoments {
    /// `<J_x>, <J_y>, <J_z>`.
    pub mean: [BootstrapCI; 3],
    /// Physical variances of `J_x, J_y, J_z`.
    pub var: [BootstrapCI; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoModeObservables {
    pub moments: SpinMoments,
    pub tmcf: BootstrapCI,
    pub energy: BootstrapCI,
}

/// Largest-eigenvalue fraction of the 2x2 one-body matrix.
pub fn tmcf_from_matrix(g11: f64, g22: f64, g12: Complex64) -> f64 {
    let tr = g11 + g22;
    if !(tr > 0.0) {
        return f64::NAN;
    }
    let disc = ((g11 - g22).powi(2) + 4.0 * g12.norm_sqr()).sqrt();
    0.5 * (tr + disc) / tr
}

fn statistics(m: &[f64], var_correction: f64) -> Vec<f64> {
    use feature::*;
    let mut out = Vec::with_capacity(8);
    out.extend_from_slice(&[m[JX], m[JY], m[JZ]]);
    for (mean, sq) in [(JX, JX2), (JY, JY2), (JZ, JZ2)] {
        out.push(m[sq] - m[mean] * m[mean] - var_correction);
    }
    out.push(tmcf_from_matrix(
        m[G11],
        m[G22],
        Complex64::new(m[G12_RE], m[G12_IM]),
    ));
    out.push(m[ENERGY]);
    out
}

/// Bootstrap all two-mode observables from a feature table.
///
/// `var_correction` is subtracted from every spin variance (1/8 for Wigner
/// ensembles, 0 for exact conditional moments); `energy_offset` is added to
/// the energy.
pub fn observables_from_table(
    table: &FeatureTable,
    plan: &ResamplePlan,
    level_sigmas: f64,
    var_correction: f64,
    energy_offset: f64,
) -> Result<TwoModeObservables> {
    if table.n_rows() < 2 {
        return arg("two-mode estimators need at least 2 samples");
    }
    let cis = plan.intervals(table, level_sigmas, |m| statistics(m, var_correction));
    if !cis[6].point_estimate.is_finite() {
        return Err(Error::Degenerate(
            "one-body matrix trace is not positive".into(),
        ));
    }
    Ok(TwoModeObservables {
        moments: SpinMoments {
            mean: [cis[0], cis[1], cis[2]],
            var: [cis[3], cis[4], cis[5]],
        },
        tmcf: cis[6],
        energy: cis[7].shifted(energy_offset),
    })
}

/// Estimator settings for bootstrap intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSettings {
    pub level_sigmas: f64,
    pub n_resamples: usize,
    pub seed: u64,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            level_sigmas: 2.0,
            n_resamples: crate::stats::DEFAULT_RESAMPLES,
            seed: 0,
        }
    }
}

impl EstimatorSettings {
    pub fn plan(&self, n: usize) -> Result<ResamplePlan> {
        let mut s = RngStream::for_purpose(self.seed, Purpose::Bootstrap, 0);
        ResamplePlan::new(n, self.n_resamples, &mut s)
    }
}

fn ensemble_table(ensemble: &TwoModeEnsemble, params: &TwoModeParams) -> FeatureTable {
    let mut t = FeatureTable::with_capacity(feature::COUNT, ensemble.n_traj());
    for a in &ensemble.trajectories {
        t.push(&wigner_features(a, params));
    }
    t
}

/// All Wigner-ensemble observables with bootstrap intervals.
pub fn ensemble_observables(
    ensemble: &TwoModeEnsemble,
    params: &TwoModeParams,
    est: &EstimatorSettings,
) -> Result<TwoModeObservables> {
    if ensemble.n_traj() < 2 {
        return arg("two-mode estimators need at least 2 trajectories");
    }
    let plan = est.plan(ensemble.n_traj())?;
    observables_from_table(
        &ensemble_table(ensemble, params),
        &plan,
        est.level_sigmas,
        SPIN_VARIANCE_CORRECTION,
        0.0,
    )
}

pub fn spin_moments(
    ensemble: &TwoModeEnsemble,
    params: &TwoModeParams,
    est: &EstimatorSettings,
) -> Result<SpinMoments> {
    Ok(ensemble_observables(ensemble, params, est)?.moments)
}

pub fn two_mode_condensate_fraction(
    ensemble: &TwoModeEnsemble,
    params: &TwoModeParams,
    est: &EstimatorSettings,
) -> Result<BootstrapCI> {
    Ok(ensemble_observables(ensemble, params, est)?.tmcf)
}

/// `<H_s>` from exact symmetric-ordering conversions.
pub fn two_mode_energy(
    ensemble: &TwoModeEnsemble,
    params: &TwoModeParams,
    est: &EstimatorSettings,
) -> Result<BootstrapCI> {
    Ok(ensemble_observables(ensemble, params, est)?.energy)
}
