//! Quasi-1D Bose field in a harmonic trap.
//!
//! Lengths are in oscillator units `x0`, energies in `hbar omega0`, times in
//! `1/omega0`. Thermal states come from the simple-growth SPGPE in a projected
//! Hermite-Gauss basis; real-time dynamics are truncated Wigner on a uniform
//! grid with Strang split-step propagation. The discrete delta is
//! `delta_{xx'} / dx` throughout.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::rng::{Purpose, RngStream};
use crate::spin::EstimatorSettings;
use crate::stats::{BootstrapCI, FeatureTable};

type C64 = Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_points: usize,
    pub length: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            n_points: 1024,
            length: 40.0,
        }
    }
}

/// Uniform periodic grid on `[-L/2, L/2)` with cached FFT plans.
#[derive(Clone)]
pub struct Grid1D {
    pub n_points: usize,
    pub length: f64,
    pub dx: f64,
    pub dk: f64,
    pub x: Vec<f64>,
    /// Wavenumbers in FFT order.
    pub k: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Grid1D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid1D")
            .field("n_points", &self.n_points)
            .field("length", &self.length)
            .field("dx", &self.dx)
            .finish()
    }
}

impl Grid1D {
    pub fn new(n_points: usize, length: f64) -> Result<Self> {
        if n_points < 4 || !n_points.is_power_of_two() {
            return arg(format!("grid size must be a power of two >= 4, got {n_points}"));
        }
        if !(length > 0.0) || !length.is_finite() {
            return arg(format!("grid length must be positive, got {length}"));
        }
        let dx = length / n_points as f64;
        let dk = 2.0 * PI / length;
        let x = (0..n_points)
            .map(|j| -0.5 * length + j as f64 * dx)
            .collect();
        let k = (0..n_points)
            .map(|j| {
                let m = if j < n_points / 2 {
                    j as f64
                } else {
                    j as f64 - n_points as f64
                };
                m * dk
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            n_points,
            length,
            dx,
            dk,
            x,
            k,
            fft: planner.plan_fft_forward(n_points),
            ifft: planner.plan_fft_inverse(n_points),
        })
    }

    pub fn from_spec(spec: GridSpec) -> Result<Self> {
        Self::new(spec.n_points, spec.length)
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            n_points: self.n_points,
            length: self.length,
        }
    }

    pub fn k_max(&self) -> f64 {
        PI / self.dx
    }

    /// Index of the grid point `x = 0`.
    pub fn centre(&self) -> usize {
        self.n_points / 2
    }

    pub fn scratch(&self) -> Vec<C64> {
        let len = self
            .fft
            .get_inplace_scratch_len()
            .max(self.ifft.get_inplace_scratch_len());
        vec![C64::new(0.0, 0.0); len]
    }

    /// Unnormalised forward transform.
    pub fn forward(&self, buf: &mut [C64], scratch: &mut [C64]) {
        self.fft.process_with_scratch(buf, scratch);
    }

    /// Inverse transform including the `1/n` factor.
    pub fn inverse(&self, buf: &mut [C64], scratch: &mut [C64]) {
        self.ifft.process_with_scratch(buf, scratch);
        let s = 1.0 / self.n_points as f64;
        buf.iter_mut().for_each(|z| *z *= s);
    }

    /// Circular convolution with a kernel given by its spectral filter.
    pub fn convolve(&self, buf: &mut [C64], filter: &[f64], scratch: &mut [C64]) {
        self.forward(buf, scratch);
        for (z, f) in buf.iter_mut().zip(filter) {
            *z *= *f;
        }
        self.inverse(buf, scratch);
    }

    pub fn norm(&self, psi: &[C64]) -> f64 {
        psi.iter().map(|z| z.norm_sqr()).sum::<f64>() * self.dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldParams {
    pub g: f64,
    /// Trap frequency; zero switches the trap off.
    #[serde(default = "one")]
    pub omega0: f64,
    pub r_d: f64,
    pub lambda_pc: f64,
    pub beta0: f64,
    pub k_fb: f64,
    /// Width of the Gaussian applied to density estimates; defaults to `r_d`.
    #[serde(default)]
    pub sigma_smooth: Option<f64>,
    pub mu: f64,
    #[serde(rename = "T_tilde")]
    pub t_tilde: f64,
    pub gamma_growth: f64,
    pub n_hg_modes: usize,
}

fn one() -> f64 {
    1.0
}

impl FieldParams {
    pub fn smoothing_width(&self) -> f64 {
        self.sigma_smooth.unwrap_or(self.r_d)
    }

    pub fn measurement_strength(&self) -> f64 {
        self.lambda_pc * self.beta0
    }

    pub fn validate(&self, grid: &Grid1D) -> Result<()> {
        if !(self.g >= 0.0) || !self.g.is_finite() {
            return arg(format!("g must be >= 0, got {}", self.g));
        }
        if !(self.omega0 >= 0.0) || !self.omega0.is_finite() {
            return arg(format!("omega0 must be >= 0, got {}", self.omega0));
        }
        if !(self.r_d > grid.dx) {
            return arg(format!(
                "r_d = {} must exceed the grid spacing dx = {}",
                self.r_d, grid.dx
            ));
        }
        if !(self.smoothing_width() >= 0.0) {
            return arg("sigma_smooth must be >= 0");
        }
        if !(self.lambda_pc >= 0.0) || !(self.beta0 >= 0.0) {
            return arg("lambda_pc and beta0 must be >= 0");
        }
        if !self.k_fb.is_finite() || !self.mu.is_finite() {
            return arg("k_fb and mu must be finite");
        }
        if !(self.t_tilde >= 0.0) || !(self.gamma_growth >= 0.0) {
            return arg("T_tilde and gamma_growth must be >= 0");
        }
        if self.n_hg_modes < 1 || self.n_hg_modes > grid.n_points / 2 {
            return arg(format!(
                "n_hg_modes = {} must lie in 1..={}",
                self.n_hg_modes,
                grid.n_points / 2
            ));
        }
        Ok(())
    }
}

/// Normalised Hermite-Gauss functions `phi_0 .. phi_{m-1}` at `x`.
pub fn hermite_functions(x: f64, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    if m == 0 {
        return out;
    }
    out[0] = PI.powf(-0.25) * (-0.5 * x * x).exp();
    if m > 1 {
        out[1] = SQRT_2 * x * out[0];
    }
    for n in 1..m.saturating_sub(1) {
        let nf = n as f64;
        out[n + 1] =
            (2.0 / (nf + 1.0)).sqrt() * x * out[n] - (nf / (nf + 1.0)).sqrt() * out[n - 1];
    }
    out
}

/// `K`-point Gauss-Hermite rule for weight `exp(-y^2)`: nodes and weights
/// multiplied by `exp(y^2)`.
pub fn gauss_hermite(k: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(k, k, |i, j| {
        if i + 1 == j || j + 1 == i {
            (((i.max(j)) as f64) / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.total_cmp(b));
    let kf = k as f64;
    let mut scaled = Vec::with_capacity(k);
    for y in nodes.iter_mut() {
        for _ in 0..3 {
            let h = hermite_functions(*y, k + 1);
            let step = h[k] / ((2.0 * kf).sqrt() * h[k - 1]);
            *y -= step;
            if step.abs() < 1e-15 * y.abs().max(1.0) {
                break;
            }
        }
        let h = hermite_functions(*y, k);
        scaled.push(1.0 / (kf * h[k - 1] * h[k - 1]));
    }
    (nodes, scaled)
}

/// Hermite-Gauss projector basis with a quadrature rule exact for the
/// projected cubic nonlinearity.
#[derive(Debug, Clone)]
pub struct HermiteBasis {
    pub n_modes: usize,
    /// Quadrature points in `x`.
    pub nodes: Vec<f64>,
    /// Weights for integrals `dx` over products of four basis functions.
    pub weights: Vec<f64>,
    /// Row-major `phi_m(nodes[i])`.
    values: Vec<f64>,
}

impl HermiteBasis {
    pub fn new(n_modes: usize) -> Self {
        let k = 2 * n_modes;
        let (y, w) = gauss_hermite(k);
        let nodes: Vec<f64> = y.iter().map(|v| v / SQRT_2).collect();
        let weights = w.iter().map(|v| v / SQRT_2).collect();
        let mut values = Vec::with_capacity(k * n_modes);
        for &x in &nodes {
            values.extend(hermite_functions(x, n_modes));
        }
        Self {
            n_modes,
            nodes,
            weights,
            values,
        }
    }

    pub fn energy(&self, n: usize, omega0: f64) -> f64 {
        omega0 * (n as f64 + 0.5)
    }

    /// Projection of `g |psi|^2 psi` onto the basis.
    pub fn projected_nonlinearity(&self, c: &[C64], g: f64, out: &mut [C64]) {
        let m = self.n_modes;
        out.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        for (i, w) in self.weights.iter().enumerate() {
            let row = &self.values[i * m..(i + 1) * m];
            let mut psi = C64::new(0.0, 0.0);
            for (phi, cm) in row.iter().zip(c) {
                psi += cm * *phi;
            }
            let nl = psi * (w * g * psi.norm_sqr());
            for (o, phi) in out.iter_mut().zip(row) {
                *o += nl * *phi;
            }
        }
    }

    /// Field on the grid from basis coefficients.
    pub fn to_grid(&self, c: &[C64], grid: &Grid1D) -> Vec<C64> {
        grid.x
            .iter()
            .map(|&x| {
                hermite_functions(x, self.n_modes)
                    .iter()
                    .zip(c)
                    .map(|(phi, cm)| cm * *phi)
                    .sum()
            })
            .collect()
    }
}

/// Simple-growth SPGPE in the projected basis.
#[derive(Debug, Clone)]
pub struct Spgpe {
    pub basis: HermiteBasis,
    pub g: f64,
    pub mu: f64,
    pub t_tilde: f64,
    pub gamma: f64,
}

impl Spgpe {
    pub fn new(params: &FieldParams) -> Result<Self> {
        if (params.omega0 - 1.0).abs() > 1e-12 {
            return arg("thermal sampling is defined for the unit trap (omega0 = 1)");
        }
        Ok(Self {
            basis: HermiteBasis::new(params.n_hg_modes),
            g: params.g,
            mu: params.mu,
            t_tilde: params.t_tilde,
            gamma: params.gamma_growth,
        })
    }

    pub fn max_stable_dt(&self) -> f64 {
        let eps_max = self.basis.energy(self.basis.n_modes - 1, 1.0);
        if self.gamma > 0.0 {
            0.1 / (self.gamma * eps_max)
        } else {
            f64::INFINITY
        }
    }

    fn nonlinear(&self, c: &[C64], out: &mut [C64]) {
        self.basis.projected_nonlinearity(c, self.g, out);
        let f = C64::new(-self.gamma, -1.0);
        out.iter_mut().for_each(|z| *z *= f);
    }

    /// One step: fourth-order interaction-picture Runge-Kutta for the
    /// deterministic part, then Ornstein-Uhlenbeck noise of the exact linear
    /// variance.
    pub fn step(&self, c: &mut [C64], dt: f64, stream: &mut RngStream) {
        let m = c.len();
        let half: Vec<C64> = (0..m)
            .map(|n| {
                let eps = self.basis.energy(n, 1.0);
                (C64::new(self.gamma * (self.mu - eps), -eps) * (0.5 * dt)).exp()
            })
            .collect();
        if self.g != 0.0 {
            let mut k1 = vec![C64::new(0.0, 0.0); m];
            let mut k2 = k1.clone();
            let mut k3 = k1.clone();
            let mut k4 = k1.clone();
            let mut tmp = k1.clone();
            let ci: Vec<C64> = c.iter().zip(&half).map(|(a, h)| a * h).collect();
            self.nonlinear(c, &mut k1);
            k1.iter_mut().zip(&half).for_each(|(k, h)| *k *= h);
            for n in 0..m {
                tmp[n] = ci[n] + k1[n] * (0.5 * dt);
            }
            self.nonlinear(&tmp, &mut k2);
            for n in 0..m {
                tmp[n] = ci[n] + k2[n] * (0.5 * dt);
            }
            self.nonlinear(&tmp, &mut k3);
            for n in 0..m {
                tmp[n] = (ci[n] + k3[n] * dt) * half[n];
            }
            self.nonlinear(&tmp, &mut k4);
            for n in 0..m {
                c[n] = (ci[n] + (k1[n] + k2[n] * 2.0 + k3[n] * 2.0) * (dt / 6.0)) * half[n]
                    + k4[n] * (dt / 6.0);
            }
        } else {
            c.iter_mut().zip(&half).for_each(|(a, h)| *a *= h * h);
        }
        if self.gamma > 0.0 && self.t_tilde > 0.0 {
            for (n, a) in c.iter_mut().enumerate() {
                let rate = 2.0 * self.gamma * (self.mu - self.basis.energy(n, 1.0)) * dt;
                let growth = if rate.abs() < 1e-12 { 1.0 } else { rate.exp_m1() / rate };
                let var = 2.0 * self.gamma * self.t_tilde * dt * growth;
                *a += stream.complex_gaussian_unchecked(var);
            }
        }
    }

    /// Relax from vacuum for `t_equil` and return the basis coefficients.
    pub fn thermalize(&self, t_equil: f64, dt: f64, stream: &mut RngStream) -> Result<Vec<C64>> {
        if !(dt > 0.0) || dt > self.max_stable_dt() {
            return arg(format!(
                "SPGPE step dt = {dt} violates gamma dt eps_max < 0.1 (dt <= {})",
                self.max_stable_dt()
            ));
        }
        if !(t_equil >= 0.0) {
            return arg("t_equil must be >= 0");
        }
        let steps = (t_equil / dt).ceil() as usize;
        let mut c = vec![C64::new(0.0, 0.0); self.basis.n_modes];
        let tail_start = steps - steps / 10;
        let mut tail_norm = 0.0;
        for s in 0..steps {
            self.step(&mut c, dt, stream);
            if s + 1 == tail_start {
                tail_norm = norm_sqr(&c);
            }
        }
        let end_norm = norm_sqr(&c);
        if !end_norm.is_finite() {
            return Err(Error::Divergence {
                trajectory: 0,
                time: t_equil,
            });
        }
        let span = (steps - tail_start) as f64 * dt;
        if span > 0.0 && tail_norm > 0.0 {
            let drift = (end_norm - tail_norm).abs() / tail_norm / span;
            if drift > 0.01 {
                warn!("SPGPE norm still drifting by {:.2}% per unit time at t = {t_equil}", 100.0 * drift);
            }
        }
        Ok(c)
    }
}

fn norm_sqr(c: &[C64]) -> f64 {
    c.iter().map(|z| z.norm_sqr()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalSettings {
    pub t_equil: f64,
    pub dt: f64,
    /// Add a half quantum of vacuum noise per grid mode.
    #[serde(default = "yes")]
    pub vacuum_noise: bool,
}

fn yes() -> bool {
    true
}

/// Wigner samples of the field on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEnsemble {
    pub trajectories: Vec<Vec<C64>>,
}

impl FieldEnsemble {
    pub fn n_traj(&self) -> usize {
        self.trajectories.len()
    }

    /// Ensemble atom number with the vacuum contribution removed.
    pub fn atom_number(&self, grid: &Grid1D) -> f64 {
        let raw = self.trajectories.iter().map(|p| grid.norm(p)).sum::<f64>() / self.n_traj() as f64;
        raw - 0.5 * grid.n_points as f64
    }
}

/// Independent SPGPE samples, one RNG stream per trajectory.
pub fn thermal_ensemble(
    params: &FieldParams,
    grid: &Grid1D,
    settings: &ThermalSettings,
    n_traj: usize,
    seed: u64,
) -> Result<FieldEnsemble> {
    params.validate(grid)?;
    if n_traj < 1 {
        return arg("n_traj must be >= 1");
    }
    let spgpe = Spgpe::new(params)?;
    let trajectories = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut s = RngStream::for_purpose(seed, Purpose::Thermal, i as u64);
            let c = spgpe.thermalize(settings.t_equil, settings.dt, &mut s)?;
            let mut psi = spgpe.basis.to_grid(&c, grid);
            if settings.vacuum_noise {
                let mut v = RngStream::for_purpose(seed, Purpose::InitialState, i as u64);
                let var = 0.5 / grid.dx;
                psi.iter_mut()
                    .for_each(|z| *z += v.complex_gaussian_unchecked(var));
            }
            Ok(psi)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FieldEnsemble { trajectories })
}

/// Spectral diffraction filter `exp(-r_d^4 k^4 / 16)`.
pub fn diffraction_kernel(grid: &Grid1D, r_d: f64) -> Vec<f64> {
    let r4 = r_d.powi(4);
    grid.k.iter().map(|k| (-r4 * k.powi(4) / 16.0).exp()).collect()
}

/// Spectral filter of a unit-area Gaussian of width `sigma`.
pub fn smoothing_kernel(grid: &Grid1D, sigma: f64) -> Vec<f64> {
    grid.k
        .iter()
        .map(|k| (-0.5 * sigma * sigma * k * k).exp())
        .collect()
}

/// Strang splitting with the trap, feedback potential and contact interaction.
#[derive(Debug, Clone)]
pub struct SplitStepper {
    dt: f64,
    half_kinetic: Vec<C64>,
    full_kinetic: Vec<C64>,
    trap: Vec<f64>,
    g: f64,
}

impl SplitStepper {
    pub fn new(grid: &Grid1D, params: &FieldParams, dt: f64) -> Result<Self> {
        let limit = 0.5 * 2.0 * PI / (0.5 * grid.k_max().powi(2));
        if !(dt > 0.0) || dt > limit {
            return arg(format!(
                "split-step dt = {dt} exceeds the spectral limit {limit}"
            ));
        }
        let phase = |k: f64, t: f64| C64::from_polar(1.0, -0.5 * k * k * t);
        Ok(Self {
            dt,
            half_kinetic: grid.k.iter().map(|&k| phase(k, 0.5 * dt)).collect(),
            full_kinetic: grid.k.iter().map(|&k| phase(k, dt)).collect(),
            trap: grid
                .x
                .iter()
                .map(|x| 0.5 * params.omega0 * params.omega0 * x * x)
                .collect(),
            g: params.g,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn potential_step(&self, psi: &mut [C64], v_fb: Option<&[f64]>) {
        for (j, z) in psi.iter_mut().enumerate() {
            let v = self.trap[j] + v_fb.map_or(0.0, |v| v[j]) + self.g * z.norm_sqr();
            *z *= C64::from_polar(1.0, -v * self.dt);
        }
    }

    /// Advance by `n_steps` steps; consecutive half kinetic steps are merged.
    pub fn run(
        &self,
        psi: &mut [C64],
        grid: &Grid1D,
        v_fb: Option<&[f64]>,
        n_steps: usize,
        scratch: &mut [C64],
    ) -> Result<()> {
        if n_steps == 0 {
            return Ok(());
        }
        let kinetic = |psi: &mut [C64], phases: &[C64], scratch: &mut [C64]| {
            grid.forward(psi, scratch);
            psi.iter_mut().zip(phases).for_each(|(z, p)| *z *= p);
            grid.inverse(psi, scratch);
        };
        kinetic(psi, &self.half_kinetic, scratch);
        for s in 0..n_steps {
            self.potential_step(psi, v_fb);
            let phases = if s + 1 == n_steps {
                &self.half_kinetic
            } else {
                &self.full_kinetic
            };
            kinetic(psi, phases, scratch);
        }
        if psi.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Divergence {
                trajectory: 0,
                time: n_steps as f64 * self.dt,
            });
        }
        Ok(())
    }
}

/// Gross-Pitaevskii energy functional of one field sample.
pub fn field_energy(psi: &[C64], grid: &Grid1D, params: &FieldParams, v_fb: Option<&[f64]>) -> f64 {
    let mut buf = psi.to_vec();
    let mut scratch = grid.scratch();
    grid.forward(&mut buf, &mut scratch);
    let kinetic = buf
        .iter()
        .zip(&grid.k)
        .map(|(z, k)| 0.5 * k * k * z.norm_sqr())
        .sum::<f64>()
        * grid.dx
        / grid.n_points as f64;
    let potential = psi
        .iter()
        .enumerate()
        .map(|(j, z)| {
            let n = z.norm_sqr();
            let x = grid.x[j];
            let v = 0.5 * params.omega0 * params.omega0 * x * x + v_fb.map_or(0.0, |v| v[j]);
            v * n + 0.5 * params.g * n * n
        })
        .sum::<f64>()
        * grid.dx;
    kinetic + potential
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementKernels {
    pub diffraction: Vec<f64>,
    pub smoothing: Vec<f64>,
}

impl MeasurementKernels {
    pub fn new(grid: &Grid1D, params: &FieldParams) -> Self {
        Self {
            diffraction: diffraction_kernel(grid, params.r_d),
            smoothing: smoothing_kernel(grid, params.smoothing_width()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub n_est: Vec<f64>,
    pub n_smoothed: Vec<f64>,
}

/// Phase-contrast imaging pulse on one trajectory. With `noise = None` the
/// light noise is switched off and the estimate is the blurred density.
pub fn phase_contrast_measure(
    psi: &mut [C64],
    grid: &Grid1D,
    params: &FieldParams,
    kernels: &MeasurementKernels,
    noise: Option<&mut RngStream>,
    scratch: &mut [C64],
) -> Result<DensityEstimate> {
    let s = params.measurement_strength();
    if !(s > 0.0) {
        return arg("phase-contrast estimate needs lambda_pc * beta0 > 0");
    }
    let n = grid.n_points;
    let vac = 0.5 / grid.dx;
    let theta: Vec<C64> = match noise {
        Some(stream) => (0..n).map(|_| stream.complex_gaussian_unchecked(vac)).collect(),
        None => vec![C64::new(0.0, 0.0); n],
    };

    let mut n_inf: Vec<C64> = psi.iter().map(|z| C64::new(z.norm_sqr() - vac, 0.0)).collect();
    grid.convolve(&mut n_inf, &kernels.diffraction, scratch);

    let mut blurred = theta.clone();
    grid.convolve(&mut blurred, &kernels.diffraction, scratch);
    for (z, b) in psi.iter_mut().zip(&blurred) {
        *z *= C64::from_polar(1.0, -s * 2.0 * b.re);
    }

    let n_est: Vec<f64> = n_inf
        .iter()
        .zip(&theta)
        .map(|(ni, t)| ni.re - t.im / s)
        .collect();
    let mut sm: Vec<C64> = n_est.iter().map(|&v| C64::new(v, 0.0)).collect();
    grid.convolve(&mut sm, &kernels.smoothing, scratch);
    Ok(DensityEstimate {
        n_est,
        n_smoothed: sm.iter().map(|z| z.re).collect(),
    })
}

/// `k_fb` times the finite-difference rate of the smoothed estimate; zero
/// before a previous estimate exists.
pub fn feedback_potential(current: &[f64], previous: Option<&[f64]>, k_fb: f64, tau: f64) -> Vec<f64> {
    match previous {
        Some(prev) => current
            .iter()
            .zip(prev)
            .map(|(c, p)| k_fb * (c - p) / tau)
            .collect(),
        None => vec![0.0; current.len()],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldObservables {
    pub time: f64,
    pub n_atoms: BootstrapCI,
    pub f_frac: BootstrapCI,
    pub var_p: BootstrapCI,
    /// Vacuum-corrected mean density on the grid.
    pub density: Vec<f64>,
    /// `|g1(x, 0)|`; zero where the density is not positive.
    pub g1: Vec<f64>,
}

/// Per-trajectory norm and first two momentum moments.
fn momentum_features(psi: &[C64], grid: &Grid1D, scratch: &mut [C64]) -> [f64; 3] {
    let mut buf = psi.to_vec();
    grid.forward(&mut buf, scratch);
    let w = grid.dx / grid.n_points as f64;
    let (mut n0, mut p1, mut p2) = (0.0, 0.0, 0.0);
    for (z, k) in buf.iter().zip(&grid.k) {
        let occ = z.norm_sqr() * w;
        n0 += occ;
        p1 += occ * k;
        p2 += occ * k * k;
    }
    [n0, p1, p2]
}

fn largest_eigenvalue(gram: &DMatrix<C64>) -> f64 {
    gram.symmetric_eigenvalues()
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
}

pub fn field_observables(
    trajectories: &[Vec<C64>],
    grid: &Grid1D,
    est: &EstimatorSettings,
    time: f64,
) -> Result<FieldObservables> {
    let t = trajectories.len();
    if t < 2 {
        return arg("field estimators need at least 2 trajectories");
    }
    let n = grid.n_points;
    let vac = 0.5 / grid.dx;
    let mut scratch = grid.scratch();
    let mut table = FeatureTable::with_capacity(3, t);
    for psi in trajectories {
        table.push(&momentum_features(psi, grid, &mut scratch));
    }
    let vac_n = 0.5 * n as f64;
    let vac_p1 = 0.5 * grid.k.iter().sum::<f64>();
    let vac_p2 = 0.5 * grid.k.iter().map(|k| k * k).sum::<f64>();
    let stat = |m: &[f64]| {
        let atoms = m[0] - vac_n;
        let mean_p = (m[1] - vac_p1) / atoms;
        vec![atoms, (m[2] - vac_p2) / atoms - mean_p * mean_p]
    };
    let plan = est.plan(t)?;
    let cis = plan.intervals(&table, est.level_sigmas, stat);
    let atoms = cis[0].point_estimate;
    if !(atoms > 0.0) {
        return Err(Error::Degenerate(format!(
            "ensemble atom number {atoms} is not positive"
        )));
    }

    let gram = DMatrix::from_fn(t, t, |s, u| {
        trajectories[s]
            .iter()
            .zip(&trajectories[u])
            .map(|(a, b)| a.conj() * b)
            .sum::<C64>()
            * grid.dx
    });
    let norms: Vec<f64> = (0..t).map(|s| gram[(s, s)].re).collect();
    let frac = |lmax: f64, mean_norm: f64| (lmax - 0.5) / (mean_norm - vac_n);
    let point = frac(largest_eigenvalue(&gram) / t as f64, norms.iter().sum::<f64>() / t as f64);
    let f_frac = plan.interval_by_indices(point, est.level_sigmas, |idx| {
        let mut mult = vec![0.0f64; t];
        for &i in idx {
            mult[i as usize] += 1.0;
        }
        let keep: Vec<usize> = (0..t).filter(|&i| mult[i] > 0.0).collect();
        let r = DMatrix::from_fn(keep.len(), keep.len(), |a, b| {
            gram[(keep[a], keep[b])] * (mult[keep[a]] * mult[keep[b]]).sqrt()
        });
        let mean_norm = keep.iter().map(|&i| mult[i] * norms[i]).sum::<f64>() / t as f64;
        frac(largest_eigenvalue(&r) / t as f64, mean_norm)
    });

    let inv_t = 1.0 / t as f64;
    let c = grid.centre();
    let density: Vec<f64> = (0..n)
        .map(|j| trajectories.iter().map(|p| p[j].norm_sqr()).sum::<f64>() * inv_t - vac)
        .collect();
    let g1 = (0..n)
        .map(|j| {
            let denom = density[c] * density[j];
            if !(denom > 0.0) {
                return 0.0;
            }
            if j == c {
                return 1.0;
            }
            let rho = trajectories
                .iter()
                .map(|p| p[c].conj() * p[j])
                .sum::<C64>()
                * inv_t;
            rho.norm() / denom.sqrt()
        })
        .collect();

    Ok(FieldObservables {
        time,
        n_atoms: cis[0],
        f_frac,
        var_p: cis[1],
        density,
        g1,
    })
}

/// Gross-Pitaevskii ground state with `n_atoms` atoms by imaginary-time
/// split-step propagation from a Thomas-Fermi guess.
pub fn ground_state(
    grid: &Grid1D,
    params: &FieldParams,
    n_atoms: f64,
    dt: f64,
    steps: usize,
) -> Result<Vec<C64>> {
    if !(n_atoms > 0.0) || !(dt > 0.0) {
        return arg("ground state needs N > 0 and dt > 0");
    }
    let mu = if params.g > 0.0 {
        thomas_fermi_mu(n_atoms, params.g).max(0.5)
    } else {
        0.5
    };
    let mut psi: Vec<C64> = grid
        .x
        .iter()
        .map(|x| C64::new((mu - 0.5 * x * x).max(0.05 * mu).sqrt(), 0.0))
        .collect();
    let half: Vec<f64> = grid.k.iter().map(|k| (-0.25 * k * k * dt).exp()).collect();
    let trap: Vec<f64> = grid
        .x
        .iter()
        .map(|x| 0.5 * params.omega0 * params.omega0 * x * x)
        .collect();
    let mut scratch = grid.scratch();
    for _ in 0..steps {
        psi.iter_mut().zip(&trap).for_each(|(z, v)| {
            *z *= (-(v + params.g * z.norm_sqr()) * dt).exp();
        });
        grid.forward(&mut psi, &mut scratch);
        psi.iter_mut().zip(&half).for_each(|(z, h)| *z *= h * h);
        grid.inverse(&mut psi, &mut scratch);
        let scale = (n_atoms / grid.norm(&psi)).sqrt();
        psi.iter_mut().for_each(|z| *z *= scale);
    }
    Ok(psi)
}

/// Thomas-Fermi chemical potential for `n_atoms` atoms in the unit trap.
pub fn thomas_fermi_mu(n_atoms: f64, g: f64) -> f64 {
    (3.0 * n_atoms * g / (4.0 * SQRT_2)).powf(2.0 / 3.0)
}

/// Thomas-Fermi profile on the grid, normalised to unit area.
pub fn thomas_fermi_profile(grid: &Grid1D, n_atoms: f64, g: f64) -> Result<(Vec<f64>, f64)> {
    if !(g > 0.0) || !(n_atoms > 0.0) {
        return arg("Thomas-Fermi profile needs g > 0 and N > 0");
    }
    let mu = thomas_fermi_mu(n_atoms, g);
    let mut n: Vec<f64> = grid
        .x
        .iter()
        .map(|x| (mu - 0.5 * x * x).max(0.0) / g)
        .collect();
    let area = n.iter().sum::<f64>() * grid.dx;
    n.iter_mut().for_each(|v| *v /= area);
    Ok((n, mu))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSchedule {
    pub tau: f64,
    pub n_measurements: usize,
    pub steps_per_interval: usize,
    /// Observables are recorded at `t = 0` and after every `record_every` intervals.
    pub record_every: usize,
}

impl FieldSchedule {
    /// `per_cycle` measurements per trap period over `cycles` periods.
    pub fn trap_cycles(cycles: usize, per_cycle: usize, steps_per_interval: usize) -> Self {
        Self {
            tau: 2.0 * PI / per_cycle as f64,
            n_measurements: cycles * per_cycle,
            steps_per_interval,
            record_every: per_cycle,
        }
    }

    pub fn dt(&self) -> f64 {
        self.tau / self.steps_per_interval as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || self.n_measurements < 1 {
            return arg("field schedule needs tau > 0 and at least one measurement");
        }
        if self.steps_per_interval < 1 || self.record_every < 1 {
            return arg("steps_per_interval and record_every must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimateRecord {
    pub time: f64,
    pub n_est: Vec<f64>,
    pub n_smoothed: Vec<f64>,
    pub v_fb: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FieldRun {
    pub records: Vec<FieldObservables>,
    pub final_ensemble: FieldEnsemble,
    /// Last estimate of the first trajectory.
    pub last_estimate: Option<DensityEstimateRecord>,
}

struct FieldTrajectory {
    psi: Vec<C64>,
    previous: Option<Vec<f64>>,
    v_fb: Vec<f64>,
    stream: RngStream,
    scratch: Vec<C64>,
    last: Option<DensityEstimateRecord>,
}

/// Measurement-feedback cooling with independent light noise per trajectory.
pub fn run_field_protocol(
    params: &FieldParams,
    grid: &Grid1D,
    schedule: &FieldSchedule,
    ensemble: &FieldEnsemble,
    seed: u64,
    est: &EstimatorSettings,
) -> Result<FieldRun> {
    params.validate(grid)?;
    schedule.validate()?;
    if ensemble.trajectories.iter().any(|p| p.len() != grid.n_points) {
        return arg("ensemble fields do not match the grid");
    }
    let stepper = SplitStepper::new(grid, params, schedule.dt())?;
    let kernels = MeasurementKernels::new(grid, params);
    let measuring = params.measurement_strength() > 0.0;
    let mut states: Vec<FieldTrajectory> = ensemble
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, psi)| FieldTrajectory {
            psi: psi.clone(),
            previous: None,
            v_fb: vec![0.0; grid.n_points],
            stream: RngStream::for_purpose(seed, Purpose::Measurement, i as u64),
            scratch: grid.scratch(),
            last: None,
        })
        .collect();

    let snapshot = |states: &[FieldTrajectory], time: f64| {
        let fields: Vec<Vec<C64>> = states.iter().map(|s| s.psi.clone()).collect();
        field_observables(&fields, grid, est, time)
    };
    let mut records = vec![snapshot(&states, 0.0)?];
    let mut j = 0;
    while j < schedule.n_measurements {
        let block = schedule.record_every.min(schedule.n_measurements - j);
        let start = j;
        states
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(i, st)| -> Result<()> {
                for m in start..start + block {
                    let time = m as f64 * schedule.tau;
                    if measuring {
                        let e = phase_contrast_measure(
                            &mut st.psi,
                            grid,
                            params,
                            &kernels,
                            Some(&mut st.stream),
                            &mut st.scratch,
                        )?;
                        st.v_fb = feedback_potential(
                            &e.n_smoothed,
                            st.previous.as_deref(),
                            params.k_fb,
                            schedule.tau,
                        );
                        if i == 0 {
                            st.last = Some(DensityEstimateRecord {
                                time,
                                n_est: e.n_est,
                                n_smoothed: e.n_smoothed.clone(),
                                v_fb: st.v_fb.clone(),
                            });
                        }
                        st.previous = Some(e.n_smoothed);
                    }
                    let v = if params.k_fb != 0.0 && measuring {
                        Some(st.v_fb.as_slice())
                    } else {
                        None
                    };
                    stepper
                        .run(&mut st.psi, grid, v, schedule.steps_per_interval, &mut st.scratch)
                        .map_err(|_| Error::Divergence {
                            trajectory: i,
                            time: (m + 1) as f64 * schedule.tau,
                        })?;
                }
                Ok(())
            })?;
        j += block;
        records.push(snapshot(&states, j as f64 * schedule.tau)?);
    }
    let last_estimate = states.first().and_then(|s| s.last.clone());
    Ok(FieldRun {
        records,
        final_ensemble: FieldEnsemble {
            trajectories: states.into_iter().map(|s| s.psi).collect(),
        },
        last_estimate,
    })
}
