//! Unconditional coherent-feedback truncated-Wigner solver for the two-mode system.
//!
//! Model (hbar = 1): `H = H_s + u(t) J_z`, with stroboscopic entangling pulses
//! `exp(-i lambda J_z b^dag b)` that couple `J_z` to the phase of a coherent
//! probe `beta0`. The measured quadrature is `Y = i(b - b^dag)`. In the
//! coherent-feedback picture the measured value is replaced by the Wigner
//! variable of the probe, so every trajectory carries its own record.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::rng::{Purpose, RngStream};
use crate::schedule::{ProtocolSchedule, RecordKind, TwoModeSeries};
use crate::spin::{
    self, feature, renormalize_trajectory, wigner_features, wigner_spin, Amplitudes,
    EstimatorSettings, TwoModeEnsemble, TwoModeParams,
};
use crate::stats::FeatureTable;

/// Estimate scale `1 / (2 lambda beta0)` converting a quadrature sample to `J_z`.
pub fn epsilon_scale(params: &TwoModeParams) -> Result<f64> {
    if !(params.lambda > 0.0) || !(params.beta0 > 0.0) {
        return arg(format!(
            "epsilon needs lambda > 0 and beta0 > 0 (got {}, {})",
            params.lambda, params.beta0
        ));
    }
    Ok(1.0 / (2.0 * params.lambda * params.beta0))
}

fn drift(a: &Amplitudes, params: &TwoModeParams, u: f64) -> Amplitudes {
    let minus_i = Complex64::new(0.0, -1.0);
    let w1 = a[0].norm_sqr();
    let w2 = a[1].norm_sqr();
    let h1 = 0.5 * params.chi * (2.0 * w1 - 1.0) + 0.5 * u;
    let h2 = 0.5 * params.chi * (2.0 * w2 - 1.0) - 0.5 * u;
    [
        minus_i * (a[0] * h1 + a[1] * params.kappa),
        minus_i * (a[1] * h2 + a[0] * params.kappa),
    ]
}

fn axpy(a: &Amplitudes, k: &Amplitudes, h: f64) -> Amplitudes {
    [a[0] + k[0] * h, a[1] + k[1] * h]
}

/// One RK4 step of the deterministic Wigner drift under held feedback `u`.
pub fn hamiltonian_step(a: &Amplitudes, params: &TwoModeParams, u: f64, dt: f64) -> Amplitudes {
    let k1 = drift(a, params, u);
    let k2 = drift(&axpy(a, &k1, 0.5 * dt), params, u);
    let k3 = drift(&axpy(a, &k2, 0.5 * dt), params, u);
    let k4 = drift(&axpy(a, &k3, dt), params, u);
    let s = dt / 6.0;
    [
        a[0] + (k1[0] + k2[0] * 2.0 + k3[0] * 2.0 + k4[0]) * s,
        a[1] + (k1[1] + k2[1] * 2.0 + k3[1] * 2.0 + k4[1]) * s,
    ]
}

/// Evolve `duration` with `steps` RK4 steps.
pub fn evolve(a: &mut Amplitudes, params: &TwoModeParams, u: f64, duration: f64, steps: usize) {
    if steps == 0 || duration == 0.0 {
        return;
    }
    let h = duration / steps as f64;
    for _ in 0..steps {
        *a = hamiltonian_step(a, params, u, h);
    }
}

/// Outcome of one entangling pulse on one trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseOutcome {
    /// Probe amplitude after the pulse.
    pub beta: Complex64,
    /// Quadrature `y = i(beta - beta^*)` after the pulse.
    pub y: f64,
}

/// Apply the analytic entangling-pulse maps for a given probe noise sample `theta`.
///
/// The deterministic rotation `lambda beta0^2` of the atomic relative phase is
/// undone in the same call.
pub fn entangling_pulse_with_noise(
    a: &mut Amplitudes,
    params: &TwoModeParams,
    theta: Complex64,
) -> PulseOutcome {
    let jz = wigner_spin(a)[2];
    let beta_in = Complex64::new(params.beta0, 0.0) + theta;
    let beta = beta_in * Complex64::from_polar(1.0, -params.lambda * jz);
    // |beta_in|^2 - beta0^2 without cancellation
    let excess = 2.0 * params.beta0 * theta.re + theta.norm_sqr();
    let half_phase = 0.5 * params.lambda * (excess - 0.5);
    a[0] *= Complex64::from_polar(1.0, -half_phase);
    a[1] *= Complex64::from_polar(1.0, half_phase);
    PulseOutcome {
        beta,
        y: -2.0 * beta.im,
    }
}

/// Sample the probe vacuum noise and apply one entangling pulse.
pub fn entangling_pulse(
    a: &mut Amplitudes,
    params: &TwoModeParams,
    stream: &mut RngStream,
) -> PulseOutcome {
    let theta = stream.complex_gaussian_unchecked(0.5);
    entangling_pulse_with_noise(a, params, theta)
}

/// Held feedback value `epsilon k_fb (y_j - y_{j-1}) / tau`.
pub fn feedback_update(y_j: f64, y_jm1: f64, epsilon: f64, k_fb: f64, tau: f64) -> f64 {
    epsilon * k_fb * (y_j - y_jm1) / tau
}

/// Per-measurement record of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseRecord {
    pub beta_re: f64,
    pub beta_im: f64,
    pub y: f64,
    pub u: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfOptions {
    /// Seed of the probe-noise streams (one per trajectory).
    pub noise_seed: u64,
    /// Disable pulses entirely (pure Hamiltonian evolution plus feedback of zero).
    pub pulses: bool,
    /// Wigner norm enforced after each pulse; `None` uses `N + 1`.
    pub norm_target: Option<f64>,
    /// Keep per-trajectory feature tables for every record point.
    pub keep_tables: bool,
}

impl Default for CfOptions {
    fn default() -> Self {
        Self {
            noise_seed: 0,
            pulses: true,
            norm_target: None,
            keep_tables: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CfRun {
    pub series: TwoModeSeries,
    pub final_ensemble: TwoModeEnsemble,
    pub tables: Option<Vec<FeatureTable>>,
}

struct TrajectoryOutput {
    features: Vec<[f64; feature::COUNT]>,
    final_state: Amplitudes,
}

fn check_finite(a: &Amplitudes, trajectory: usize, time: f64) -> Result<()> {
    if a.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { trajectory, time })
    }
}

fn run_trajectory(
    index: usize,
    mut a: Amplitudes,
    params: &TwoModeParams,
    schedule: &ProtocolSchedule,
    epsilon: f64,
    opts: &CfOptions,
) -> Result<TrajectoryOutput> {
    let mut stream = RngStream::for_purpose(opts.noise_seed, Purpose::Dynamics, index as u64);
    let norm = opts.norm_target.unwrap_or_else(|| params.wigner_norm());
    let r = schedule.record_substeps.max(1);
    let steps = schedule.steps_per_interval();
    let sub_steps = steps / r;
    let sub_dt = schedule.tau / r as f64;
    let mut features = Vec::with_capacity(schedule.n_measurements * (2 + r) + 1);
    let mut y_prev: Option<f64> = None;

    for j in 0..schedule.n_measurements {
        let t_j = schedule.measurement_time(j);
        features.push(wigner_features(&a, params));
        let u = if opts.pulses {
            let out = entangling_pulse(&mut a, params, &mut stream);
            renormalize_trajectory(&mut a, norm)
                .map_err(|_| Error::ZeroNorm { trajectory: index })?;
            let u = match y_prev {
                Some(yp) => feedback_update(out.y, yp, epsilon, params.k_fb, schedule.tau),
                None => 0.0,
            };
            y_prev = Some(out.y);
            u
        } else {
            0.0
        };
        features.push(wigner_features(&a, params));
        for k in 1..=r {
            evolve(&mut a, params, u, sub_dt, sub_steps);
            check_finite(&a, index, t_j + k as f64 * sub_dt)?;
            features.push(wigner_features(&a, params));
        }
    }
    let tail = schedule.tail_time();
    if tail > 0.0 {
        let n = (tail / schedule.dt).ceil().max(1.0) as usize;
        evolve(&mut a, params, 0.0, tail, n);
        check_finite(&a, index, schedule.t_total)?;
        features.push(wigner_features(&a, params));
    }
    Ok(TrajectoryOutput {
        features,
        final_state: a,
    })
}

/// Run the coherent-feedback protocol on every trajectory of `initial`.
pub fn run_cf_protocol(
    params: &TwoModeParams,
    schedule: &ProtocolSchedule,
    initial: &TwoModeEnsemble,
    opts: &CfOptions,
    est: &EstimatorSettings,
) -> Result<CfRun> {
    params.validate()?;
    schedule.validate()?;
    if initial.n_traj() < 2 {
        return arg("CF protocol needs at least 2 trajectories");
    }
    let epsilon = if opts.pulses && params.lambda > 0.0 {
        epsilon_scale(params)?
    } else {
        0.0
    };
    let outputs: Vec<TrajectoryOutput> = initial
        .trajectories
        .par_iter()
        .enumerate()
        .map(|(i, a)| run_trajectory(i, *a, params, schedule, epsilon, opts))
        .collect::<Result<_>>()?;

    let points = schedule.record_points();
    let n_traj = outputs.len();
    let plan = est.plan(n_traj)?;
    let tables: Vec<FeatureTable> = (0..points.len())
        .map(|r| {
            let mut t = FeatureTable::with_capacity(feature::COUNT, n_traj);
            for o in &outputs {
                t.push(&o.features[r]);
            }
            t
        })
        .collect();
    let observables = tables
        .par_iter()
        .map(|t| {
            spin::observables_from_table(
                t,
                &plan,
                est.level_sigmas,
                spin::SPIN_VARIANCE_CORRECTION,
                0.0,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let final_ensemble =
        TwoModeEnsemble::from_trajectories(outputs.iter().map(|o| o.final_state).collect());
    debug_assert!(points
        .iter()
        .zip(&tables)
        .all(|(p, t)| p.kind != RecordKind::Interval || t.n_rows() == n_traj));
    Ok(CfRun {
        series: TwoModeSeries {
            points,
            observables,
        },
        final_ensemble,
        tables: opts.keep_tables.then_some(tables),
    })
}

/// Per-trajectory pulse records for a single trajectory (diagnostics).
pub fn trajectory_pulse_records(
    index: usize,
    mut a: Amplitudes,
    params: &TwoModeParams,
    schedule: &ProtocolSchedule,
    opts: &CfOptions,
) -> Result<Vec<PulseRecord>> {
    let epsilon = epsilon_scale(params)?;
    let mut stream = RngStream::for_purpose(opts.noise_seed, Purpose::Dynamics, index as u64);
    let norm = opts.norm_target.unwrap_or_else(|| params.wigner_norm());
    let steps = schedule.steps_per_interval();
    let mut out = Vec::with_capacity(schedule.n_measurements);
    let mut y_prev: Option<f64> = None;
    for _ in 0..schedule.n_measurements {
        let p = entangling_pulse(&mut a, params, &mut stream);
        renormalize_trajectory(&mut a, norm).map_err(|_| Error::ZeroNorm { trajectory: index })?;
        let u = y_prev
            .map(|yp| feedback_update(p.y, yp, epsilon, params.k_fb, schedule.tau))
            .unwrap_or(0.0);
        y_prev = Some(p.y);
        out.push(PulseRecord {
            beta_re: p.beta.re,
            beta_im: p.beta.im,
            y: p.y,
            u,
        });
        evolve(&mut a, params, u, schedule.tau, steps);
    }
    Ok(out)
}
