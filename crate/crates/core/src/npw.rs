//! Particle-filter simulation of conditional trajectories.
//!
//! Each conditional trajectory is a swarm of weighted phase-space particles
//! sharing one measurement-noise record. During a pulse of length `t_p` the
//! swarm sees a continuous `J_z` measurement at rate `gamma` with current
//! `dy = <J_z> dt + dW / (2 sqrt(gamma))`. Each particle picks up its own
//! backaction phase noise `dV` on the relative phase, and its log-weight
//! accumulates the Gaussian likelihood of the current.

use log::warn;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cf_twa::{feedback_update, hamiltonian_step};
use crate::error::{arg, Error, Result};
use crate::rng::{Purpose, RngStream};
use crate::schedule::{ProtocolSchedule, TwoModeSeries};
use crate::spin::{
    self, feature, wigner_features, wigner_spin, Amplitudes, EstimatorSettings, SpinInitialState,
    TwoModeParams,
};
use crate::stats::FeatureTable;

/// Default number of integration substeps per pulse.
pub const DEFAULT_PULSE_SUBSTEPS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NpwCalibration {
    pub gamma: f64,
    pub t_p: f64,
}

/// `gamma = lambda^2 beta0^2 / t_p`, matching the single-shot uncertainty of the probe.
pub fn calibrate(params: &TwoModeParams, t_p: f64, dt_cf: f64) -> Result<NpwCalibration> {
    if !(t_p > 0.0) || !t_p.is_finite() {
        return arg(format!("pulse length t_p must be positive, got {t_p}"));
    }
    if t_p >= dt_cf {
        warn!("pulse length {t_p} is not small against the integrator step {dt_cf}");
    }
    let strength = (params.lambda * params.beta0).powi(2);
    Ok(NpwCalibration {
        gamma: strength / t_p,
        t_p,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub a: Amplitudes,
    pub log_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NpwSwarm {
    pub particles: Vec<Particle>,
}

impl NpwSwarm {
    pub fn from_amplitudes(a: Vec<Amplitudes>) -> Self {
        Self {
            particles: a
                .into_iter()
                .map(|a| Particle { a, log_weight: 0.0 })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Shift log-weights so the largest is 0.
    pub fn normalize_log_weights(&mut self) -> Result<()> {
        let max = self
            .particles
            .iter()
            .map(|p| p.log_weight)
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::FilterCollapse { trajectory: 0 });
        }
        self.particles.iter_mut().for_each(|p| p.log_weight -= max);
        Ok(())
    }

    /// Normalised weights (sum 1).
    pub fn weights(&self) -> Vec<f64> {
        let max = self
            .particles
            .iter()
            .map(|p| p.log_weight)
            .fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = self
            .particles
            .iter()
            .map(|p| (p.log_weight - max).exp())
            .collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }

    /// Weighted mean of the Wigner `J_z`.
    pub fn mean_jz(&self) -> f64 {
        self.weights()
            .iter()
            .zip(&self.particles)
            .map(|(w, p)| w * wigner_spin(&p.a)[2])
            .sum()
    }

    /// Conditional expectation of every Wigner feature.
    pub fn conditional_features(&self, params: &TwoModeParams) -> [f64; feature::COUNT] {
        let mut out = [0.0; feature::COUNT];
        for (w, p) in self.weights().iter().zip(&self.particles) {
            for (o, f) in out.iter_mut().zip(wigner_features(&p.a, params)) {
                *o += w * f;
            }
        }
        out
    }
}

/// Effective sample size `(sum w)^2 / sum w^2`.
pub fn ess(swarm: &NpwSwarm) -> f64 {
    let w = swarm.weights();
    1.0 / w.iter().map(|x| x * x).sum::<f64>()
}

/// Offspring counts of systematic resampling with offset `u0` in `[0, 1)`.
pub fn systematic_offspring(weights: &[f64], u0: f64) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let mut counts = vec![0; n];
    let mut cumulative = 0.0;
    let mut k = 0usize;
    for (i, w) in weights.iter().enumerate() {
        cumulative += w / total * n as f64;
        // positions k + u0 that fall below the scaled cumulative weight
        while k < n && (k as f64 + u0) < cumulative {
            counts[i] += 1;
            k += 1;
        }
    }
    // rounding can leave the last positions unassigned
    if k < n {
        let last = weights.iter().rposition(|w| *w > 0.0).unwrap_or(n - 1);
        counts[last] += n - k;
    }
    counts
}

/// Systematic (Kitagawa) resampling; weights are reset to uniform.
pub fn kitagawa_resample(swarm: &mut NpwSwarm, stream: &mut RngStream) {
    let counts = systematic_offspring(&swarm.weights(), stream.uniform());
    let mut out = Vec::with_capacity(swarm.len());
    for (p, c) in swarm.particles.iter().zip(counts) {
        for _ in 0..c {
            out.push(Particle {
                a: p.a,
                log_weight: 0.0,
            });
        }
    }
    swarm.particles = out;
}

/// Noise sources of one conditional trajectory.
pub struct PulseStreams<'a> {
    /// Shared measurement noise `dW` (and resampling offsets).
    pub measurement: &'a mut RngStream,
    /// Per-particle backaction noise `dV`.
    pub backaction: &'a mut RngStream,
}

/// Integrate one measurement pulse and return `J_z^est = (int dy) / t_p`.
///
/// The Hamiltonian drift under held feedback `u` acts during the pulse. A
/// resample is forced whenever the effective sample size falls below half
/// the swarm. With `gamma = 0` the swarm is only evolved and `None` is returned.
pub fn npw_measurement_pulse(
    swarm: &mut NpwSwarm,
    params: &TwoModeParams,
    cal: &NpwCalibration,
    u: f64,
    substeps: usize,
    streams: PulseStreams<'_>,
) -> Result<Option<f64>> {
    if swarm.is_empty() {
        return arg("swarm is empty");
    }
    if substeps == 0 {
        return arg("pulse needs at least one substep");
    }
    let h = cal.t_p / substeps as f64;
    let measuring = cal.gamma > 0.0;
    let sqrt_gamma = cal.gamma.sqrt();
    let mut record = 0.0;
    let n = swarm.len() as f64;
    for _ in 0..substeps {
        let jz_mean = swarm.mean_jz();
        let dw = streams.measurement.standard_normal() * h.sqrt();
        let dy = if measuring {
            jz_mean * h + dw / (2.0 * sqrt_gamma)
        } else {
            0.0
        };
        record += dy;
        for p in swarm.particles.iter_mut() {
            let dv = streams.backaction.standard_normal() * h.sqrt();
            // Stratonovich phase kick split around the drift step
            let kick = Complex64::from_polar(1.0, -0.25 * sqrt_gamma * dv);
            p.a[0] *= kick;
            p.a[1] *= kick.conj();
            p.a = hamiltonian_step(&p.a, params, u, h);
            p.a[0] *= kick;
            p.a[1] *= kick.conj();
            if measuring {
                let jz = wigner_spin(&p.a)[2];
                p.log_weight += 4.0 * cal.gamma * jz * dy - 2.0 * cal.gamma * jz * jz * h;
            }
        }
        swarm.normalize_log_weights()?;
        if measuring && ess(swarm) < 0.5 * n {
            kitagawa_resample(swarm, streams.measurement);
        }
    }
    Ok(measuring.then_some(record / cal.t_p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NpwOptions {
    pub n_conditional: usize,
    pub n_particles: usize,
    pub pulse_substeps: usize,
    pub seed: u64,
}

impl Default for NpwOptions {
    fn default() -> Self {
        Self {
            n_conditional: 100,
            n_particles: 200,
            pulse_substeps: DEFAULT_PULSE_SUBSTEPS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NpwRun {
    pub series: TwoModeSeries,
    /// Per-measurement `J_z` estimates of every conditional trajectory.
    pub estimates: Vec<Vec<f64>>,
}

fn run_conditional(
    index: usize,
    params: &TwoModeParams,
    schedule: &ProtocolSchedule,
    cal: &NpwCalibration,
    opts: &NpwOptions,
    initial: &SpinInitialState,
) -> Result<(Vec<[f64; feature::COUNT]>, Vec<f64>)> {
    let collapse = |e: Error| match e {
        Error::FilterCollapse { .. } => Error::FilterCollapse { trajectory: index },
        other => other,
    };
    let base = (index * opts.n_particles) as u64;
    let particles = (0..opts.n_particles)
        .map(|p| {
            let mut s = RngStream::for_purpose(opts.seed, Purpose::InitialState, base + p as u64);
            initial.sample_one(params, &mut s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut swarm = NpwSwarm::from_amplitudes(particles);
    let mut meas = RngStream::for_purpose(opts.seed, Purpose::Measurement, index as u64);
    let mut back = RngStream::for_purpose(opts.seed, Purpose::Dynamics, index as u64);

    let r = schedule.record_substeps.max(1);
    let steps = schedule.steps_per_interval() / r;
    let sub_dt = schedule.tau / r as f64;
    let mut rows = Vec::with_capacity(schedule.n_measurements * (2 + r) + 1);
    let mut estimates = Vec::with_capacity(schedule.n_measurements);
    let mut u = 0.0;
    let mut prev: Option<f64> = None;
    for _ in 0..schedule.n_measurements {
        rows.push(swarm.conditional_features(params));
        let est = npw_measurement_pulse(
            &mut swarm,
            params,
            cal,
            u,
            opts.pulse_substeps,
            PulseStreams {
                measurement: &mut meas,
                backaction: &mut back,
            },
        )
        .map_err(collapse)?;
        u = match (est, prev) {
            (Some(e), Some(p)) => feedback_update(e, p, 1.0, params.k_fb, schedule.tau),
            _ => 0.0,
        };
        if let Some(e) = est {
            estimates.push(e);
            kitagawa_resample(&mut swarm, &mut meas);
        }
        prev = est;
        rows.push(swarm.conditional_features(params));
        for k in 0..r {
            let span = if k == 0 { sub_dt - cal.t_p } else { sub_dt };
            for p in swarm.particles.iter_mut() {
                crate::cf_twa::evolve(&mut p.a, params, u, span, steps);
            }
            rows.push(swarm.conditional_features(params));
        }
    }
    let tail = schedule.tail_time();
    if tail > 0.0 {
        let n = (tail / schedule.dt).ceil().max(1.0) as usize;
        for p in swarm.particles.iter_mut() {
            crate::cf_twa::evolve(&mut p.a, params, 0.0, tail, n);
        }
        rows.push(swarm.conditional_features(params));
    }
    Ok((rows, estimates))
}

/// Unconditional moments from `n_conditional` filtered conditional trajectories.
///
/// Feedback uses the swarm's own estimate, `u = k_fb (J_j - J_{j-1}) / tau`.
pub fn run_npw_protocol(
    params: &TwoModeParams,
    schedule: &ProtocolSchedule,
    cal: &NpwCalibration,
    opts: &NpwOptions,
    initial: &SpinInitialState,
    est: &EstimatorSettings,
) -> Result<NpwRun> {
    params.validate()?;
    schedule.validate()?;
    initial.validate(params)?;
    if opts.n_particles < 2 {
        return arg("NPW needs at least 2 particles per swarm");
    }
    if opts.n_conditional < 2 {
        return arg("NPW needs at least 2 conditional trajectories");
    }
    if cal.t_p >= schedule.tau / schedule.record_substeps.max(1) as f64 {
        return arg("pulse length must be shorter than a record interval");
    }
    let results: Vec<(Vec<[f64; feature::COUNT]>, Vec<f64>)> = (0..opts.n_conditional)
        .into_par_iter()
        .map(|i| run_conditional(i, params, schedule, cal, opts, initial))
        .collect::<Result<_>>()?;
    let points = schedule.record_points();
    let plan = est.plan(opts.n_conditional)?;
    let observables = (0..points.len())
        .into_par_iter()
        .map(|p| {
            let mut t = FeatureTable::with_capacity(feature::COUNT, opts.n_conditional);
            results.iter().for_each(|(rows, _)| t.push(&rows[p]));
            spin::observables_from_table(
                &t,
                &plan,
                est.level_sigmas,
                spin::SPIN_VARIANCE_CORRECTION,
                0.0,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NpwRun {
        series: TwoModeSeries {
            points,
            observables,
        },
        estimates: results.into_iter().map(|(_, e)| e).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params() -> TwoModeParams {
        TwoModeParams {
            chi: 0.0,
            kappa: 0.0,
            lambda: 0.8e-4,
            k_fb: 0.1,
            n_atoms: 100,
            beta0: 1e7f64.sqrt(),
        }
    }

    fn frozen(jz: f64) -> Amplitudes {
        [
            Complex64::new((50.5 + jz).sqrt(), 0.0),
            Complex64::new((50.5 - jz).sqrt(), 0.0),
        ]
    }

    #[test]
    fn calibration_identity() {
        let c = calibrate(&params(), 1e-3, 0.05).unwrap();
        assert_relative_eq!(c.gamma * c.t_p, 0.064, epsilon = 1e-12);
        let c2 = calibrate(&params(), 2e-3, 0.05).unwrap();
        assert_relative_eq!(c2.gamma, 0.5 * c.gamma, epsilon = 1e-12);
        let off = TwoModeParams {
            lambda: 0.0,
            ..params()
        };
        assert_eq!(calibrate(&off, 1e-3, 0.05).unwrap().gamma, 0.0);
        assert!(calibrate(&params(), 0.0, 0.05).is_err());
    }

    #[test]
    fn ess_examples() {
        let mut s = NpwSwarm::from_amplitudes(vec![frozen(0.0); 500]);
        assert_relative_eq!(ess(&s), 500.0, epsilon = 1e-9);
        s.particles.iter_mut().skip(1).for_each(|p| p.log_weight = f64::NEG_INFINITY);
        assert_relative_eq!(ess(&s), 1.0);
        let mut two = NpwSwarm::from_amplitudes(vec![frozen(0.0); 2]);
        two.particles[0].log_weight = 0.75f64.ln();
        two.particles[1].log_weight = 0.25f64.ln();
        assert_relative_eq!(ess(&two), 1.6, epsilon = 1e-12);
    }

    #[test]
    fn resampling_examples() {
        assert_eq!(systematic_offspring(&[1.0; 7], 0.3), vec![1; 7]);
        assert_eq!(systematic_offspring(&[0.0, 0.0, 1.0, 0.0], 0.9), vec![0, 0, 4, 0]);
    }

    #[test]
    fn single_particle_mean_is_its_own() {
        let s = NpwSwarm::from_amplitudes(vec![frozen(7.0)]);
        assert_relative_eq!(s.mean_jz(), 7.0, epsilon = 1e-12);
    }

    #[test]
    fn two_particle_posterior_matches_likelihood() {
        let p = TwoModeParams {
            lambda: 3e-4,
            ..params()
        };
        let cal = calibrate(&p, 1e-3, 0.05).unwrap();
        let mut swarm = NpwSwarm::from_amplitudes(vec![frozen(10.0), frozen(-10.0)]);
        let mut m = RngStream::new(4, 0);
        let mut b = RngStream::new(4, 1);
        let est = npw_measurement_pulse(
            &mut swarm,
            &p,
            &cal,
            0.0,
            1,
            PulseStreams {
                measurement: &mut m,
                backaction: &mut b,
            },
        )
        .unwrap()
        .unwrap();
        let w = swarm.weights();
        let g = cal.gamma * cal.t_p;
        let (j1, j2) = (wigner_spin(&swarm.particles[0].a)[2], wigner_spin(&swarm.particles[1].a)[2]);
        let expected = (-2.0 * g * ((est - j1).powi(2) - (est - j2).powi(2))).exp();
        assert_eq!(swarm.particles.len(), 2);
        assert_relative_eq!(w[0] / w[1], expected, max_relative = 1e-9);
    }

    #[test]
    fn zero_rate_leaves_weights() {
        let p = TwoModeParams {
            lambda: 0.0,
            ..params()
        };
        let cal = NpwCalibration {
            gamma: 0.0,
            t_p: 1e-3,
        };
        let mut swarm = NpwSwarm::from_amplitudes(vec![frozen(3.0), frozen(-2.0)]);
        let before = swarm.clone();
        let mut m = RngStream::new(1, 0);
        let mut b = RngStream::new(1, 1);
        let out = npw_measurement_pulse(
            &mut swarm,
            &p,
            &cal,
            0.0,
            20,
            PulseStreams {
                measurement: &mut m,
                backaction: &mut b,
            },
        )
        .unwrap();
        assert!(out.is_none());
        assert_eq!(swarm, before);
    }
}
