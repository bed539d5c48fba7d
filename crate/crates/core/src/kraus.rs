//! Exact conditional solver in the Dicke basis.
//!
//! Basis index `k = 0..=N` labels `J_z = m = k - N/2`. The probe is traced out
//! analytically: a quadrature outcome `y` conditions the atoms with the
//! diagonal Kraus operator `K(y) = (2 pi)^{-1/4} exp(-(y - 2 beta0 sin(lambda m))^2 / 4)`,
//! which is complete (`int K^dag K dy = 1`). Unconditional moments are formed
//! by averaging over sampled records, or deterministically on a `y` grid.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::cf_twa::{epsilon_scale, feedback_update};
use crate::error::{arg, Error, Result};
use crate::rng::{Purpose, RngStream};
use crate::schedule::{ProtocolSchedule, RecordKind, TwoModeSeries};
use crate::spin::{self, feature, EstimatorSettings, TwoModeObservables, TwoModeParams};
use crate::stats::{BootstrapCI, FeatureTable};

/// Largest atom number handled with dense matrices.
pub const MAX_DENSE_ATOMS: usize = 2000;

static RESYMMETRIZATIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of times a propagated density matrix had to be re-symmetrised.
pub fn resymmetrization_count() -> usize {
    RESYMMETRIZATIONS.load(Ordering::Relaxed)
}

const ONE: Complex64 = Complex64::new(1.0, 0.0);
const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone)]
pub struct SpinOperatorSet {
    pub n_atoms: usize,
    /// Diagonal of `J_z`.
    pub jz: DVector<f64>,
    pub jx: DMatrix<f64>,
    pub jy: DMatrix<Complex64>,
    /// `chi J_z^2 + 2 kappa J_x`; `H_s` minus `energy_offset`.
    pub h_s: DMatrix<f64>,
    pub energy_offset: f64,
    chi: f64,
    kappa: f64,
    /// `<k+1| J_+ |k>`.
    raising: Vec<f64>,
}

pub fn build_operators(params: &TwoModeParams) -> Result<SpinOperatorSet> {
    params.validate()?;
    let n = params.n_atoms;
    if n > MAX_DENSE_ATOMS {
        return Err(Error::Capability {
            requested: n,
            limit: MAX_DENSE_ATOMS,
        });
    }
    let dim = n + 1;
    let j = 0.5 * n as f64;
    let m = |k: usize| k as f64 - j;
    let jz = DVector::from_iterator(dim, (0..dim).map(m));
    let raising: Vec<f64> = (0..n)
        .map(|k| (j * (j + 1.0) - m(k) * (m(k) + 1.0)).sqrt())
        .collect();
    let mut jx = DMatrix::zeros(dim, dim);
    let mut jy = DMatrix::from_element(dim, dim, ZERO);
    for (k, c) in raising.iter().enumerate() {
        jx[(k + 1, k)] = 0.5 * c;
        jx[(k, k + 1)] = 0.5 * c;
        // J_y = (J_+ - J_-) / 2i
        jy[(k + 1, k)] = Complex64::new(0.0, -0.5 * c);
        jy[(k, k + 1)] = Complex64::new(0.0, 0.5 * c);
    }
    let mut h_s = jx.clone() * (2.0 * params.kappa);
    for k in 0..dim {
        h_s[(k, k)] += params.chi * m(k) * m(k);
    }
    Ok(SpinOperatorSet {
        n_atoms: n,
        jz,
        jx,
        jy,
        h_s,
        energy_offset: params.energy_offset(),
        chi: params.chi,
        kappa: params.kappa,
        raising,
    })
}

impl SpinOperatorSet {
    pub fn dim(&self) -> usize {
        self.n_atoms + 1
    }

    pub fn jz_matrix(&self) -> DMatrix<Complex64> {
        DMatrix::from_diagonal(&self.jz.map(|x| Complex64::new(x, 0.0)))
    }

    pub fn jx_complex(&self) -> DMatrix<Complex64> {
        self.jx.map(|x| Complex64::new(x, 0.0))
    }

    /// Propagator data for `H_s + u J_z`.
    pub fn propagator(&self, u: f64) -> Propagator {
        let mut h = self.h_s.clone();
        for k in 0..self.dim() {
            h[(k, k)] += u * self.jz[k];
        }
        let eig = SymmetricEigen::new(h);
        Propagator {
            vectors: eig.eigenvectors,
            values: eig.eigenvalues,
        }
    }

    /// Ground-state energy of `H_s` including the constant offset.
    pub fn ground_state_energy(&self) -> f64 {
        let eig = SymmetricEigen::new(self.h_s.clone());
        eig.eigenvalues.min() + self.energy_offset
    }

    /// `J_+ psi`.
    fn raise(&self, psi: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![ZERO; psi.len()];
        for (k, c) in self.raising.iter().enumerate() {
            out[k + 1] = psi[k] * *c;
        }
        out
    }

    /// `J_- psi`.
    fn lower(&self, psi: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![ZERO; psi.len()];
        for (k, c) in self.raising.iter().enumerate() {
            out[k] = psi[k + 1] * *c;
        }
        out
    }

    /// `psi <- exp(-i (H_s + u J_z) t) psi` by Chebyshev expansion on the tridiagonal generator.
    pub fn evolve_pure(&self, psi: &mut [Complex64], u: f64, t: f64) {
        if t == 0.0 {
            return;
        }
        let dim = psi.len();
        let diag: Vec<f64> = (0..dim)
            .map(|k| self.chi * self.jz[k] * self.jz[k] + u * self.jz[k])
            .collect();
        let off: Vec<f64> = self.raising.iter().map(|c| self.kappa * c).collect();
        // Gershgorin bounds
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for k in 0..dim {
            let r = off.get(k).map_or(0.0, |x| x.abs())
                + if k > 0 { off[k - 1].abs() } else { 0.0 };
            lo = lo.min(diag[k] - r);
            hi = hi.max(diag[k] + r);
        }
        let centre = 0.5 * (hi + lo);
        let radius = (0.5 * (hi - lo)).max(1e-300);
        let apply = |v: &[Complex64], out: &mut [Complex64]| {
            for k in 0..dim {
                let mut acc = v[k] * ((diag[k] - centre) / radius);
                if k + 1 < dim {
                    acc += v[k + 1] * (off[k] / radius);
                }
                if k > 0 {
                    acc += v[k - 1] * (off[k - 1] / radius);
                }
                out[k] = acc;
            }
        };
        let x = radius * t.abs();
        let bessel = bessel_j_sequence(x);
        let sign = if t >= 0.0 { -1.0 } else { 1.0 };
        // (-i)^k for t > 0, (+i)^k for t < 0
        let mut phase_k = ONE;
        let step = Complex64::new(0.0, sign);
        let mut t_prev: Vec<Complex64> = psi.to_vec();
        let mut t_cur = vec![ZERO; dim];
        apply(&t_prev, &mut t_cur);
        let mut acc: Vec<Complex64> = t_prev.iter().map(|v| v * bessel[0]).collect();
        let mut t_next = vec![ZERO; dim];
        for (k, jk) in bessel.iter().enumerate().skip(1) {
            phase_k *= step;
            let coef = phase_k * (2.0 * jk);
            for i in 0..dim {
                acc[i] += t_cur[i] * coef;
            }
            if k + 1 < bessel.len() {
                apply(&t_cur, &mut t_next);
                for i in 0..dim {
                    t_next[i] = t_next[i] * 2.0 - t_prev[i];
                }
                std::mem::swap(&mut t_prev, &mut t_cur);
                std::mem::swap(&mut t_cur, &mut t_next);
            }
        }
        let global = Complex64::from_polar(1.0, -centre * t);
        for (p, a) in psi.iter_mut().zip(acc) {
            *p = a * global;
        }
    }

    /// Conditional feature row of a normalised pure state.
    pub fn pure_features(&self, psi: &[Complex64]) -> [f64; feature::COUNT] {
        let up = self.raise(psi);
        let down = self.lower(psi);
        let mut jp = ZERO;
        let mut jz = 0.0;
        let mut jz2 = 0.0;
        let mut jx2 = 0.0;
        let mut jy2 = 0.0;
        for k in 0..psi.len() {
            jp += psi[k].conj() * up[k];
            let p = psi[k].norm_sqr();
            jz += p * self.jz[k];
            jz2 += p * self.jz[k] * self.jz[k];
            jx2 += (0.5 * (up[k] + down[k])).norm_sqr();
            jy2 += (0.5 * (up[k] - down[k])).norm_sqr();
        }
        let half_n = 0.5 * self.n_atoms as f64;
        let energy = self.chi * jz2 + 2.0 * self.kappa * jp.re;
        [
            jp.re,
            jp.im,
            jz,
            jx2,
            jy2,
            jz2,
            half_n + jz,
            half_n - jz,
            jp.re,
            jp.im,
            energy,
        ]
    }
}

/// `J_0(x) .. J_K(x)` by Miller's backward recurrence, truncated where the terms fall below 1e-17.
fn bessel_j_sequence(x: f64) -> Vec<f64> {
    if x == 0.0 {
        return vec![1.0];
    }
    let k_max = (x + 12.0 * x.cbrt() + 25.0).ceil() as usize;
    let start = k_max + 20;
    let mut j = vec![0.0; start + 2];
    j[start] = 1e-300;
    for k in (1..=start).rev() {
        j[k - 1] = 2.0 * k as f64 / x * j[k] - j[k + 1];
        if j[k - 1].abs() > 1e250 {
            for v in j.iter_mut().skip(k - 1) {
                *v *= 1e-250;
            }
        }
    }
    let norm = j[0] + 2.0 * j.iter().skip(2).step_by(2).sum::<f64>();
    let mut out: Vec<f64> = j[..=k_max].iter().map(|v| v / norm).collect();
    while out.len() > 1 && out.last().unwrap().abs() < 1e-17 && out.len() as f64 > x + 1.0 {
        out.pop();
    }
    out
}

/// Eigen-decomposition of a real symmetric generator.
#[derive(Debug, Clone)]
pub struct Propagator {
    vectors: DMatrix<f64>,
    values: DVector<f64>,
}

impl Propagator {
    /// Dense unitary `exp(-i H t)`.
    pub fn unitary(&self, t: f64) -> DMatrix<Complex64> {
        let dim = self.values.len();
        let v = self.vectors.map(|x| Complex64::new(x, 0.0));
        let mut vd = v.clone();
        for c in 0..dim {
            let ph = Complex64::from_polar(1.0, -self.values[c] * t);
            for r in 0..dim {
                vd[(r, c)] = v[(r, c)] * ph;
            }
        }
        vd * v.transpose()
    }

    /// `psi <- exp(-i H t) psi` in O(dim^2).
    pub fn apply(&self, psi: &mut [Complex64], t: f64) {
        let dim = psi.len();
        let mut coeff = vec![ZERO; dim];
        for c in 0..dim {
            let col = self.vectors.column(c);
            let mut acc = ZERO;
            for r in 0..dim {
                acc += psi[r] * col[r];
            }
            coeff[c] = acc * Complex64::from_polar(1.0, -self.values[c] * t);
        }
        for p in psi.iter_mut() {
            *p = ZERO;
        }
        for c in 0..dim {
            let col = self.vectors.column(c);
            let a = coeff[c];
            for r in 0..dim {
                psi[r] += a * col[r];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DickeDensityMatrix {
    pub rho: DMatrix<Complex64>,
    pub n_atoms: usize,
}

impl DickeDensityMatrix {
    pub fn from_pure(psi: &[Complex64]) -> Self {
        let v = DVector::from_column_slice(psi);
        Self {
            rho: &v * v.adjoint(),
            n_atoms: psi.len() - 1,
        }
    }

    pub fn maximally_mixed(n_atoms: usize) -> Self {
        let dim = n_atoms + 1;
        Self {
            rho: DMatrix::from_diagonal_element(dim, dim, Complex64::new(1.0 / dim as f64, 0.0)),
            n_atoms,
        }
    }

    pub fn dicke(n_atoms: usize, k: usize) -> Self {
        let mut psi = vec![ZERO; n_atoms + 1];
        psi[k] = ONE;
        Self::from_pure(&psi)
    }

    pub fn from_initial(state: &spin::SpinInitialState, n_atoms: usize) -> Result<Self> {
        match state {
            spin::SpinInitialState::Css { bloch } => Ok(Self::from_pure(&css_state(n_atoms, *bloch)?)),
            spin::SpinInitialState::Thermal => Ok(Self::maximally_mixed(n_atoms)),
        }
    }

    pub fn trace(&self) -> Complex64 {
        self.rho.trace()
    }

    pub fn purity(&self) -> f64 {
        (&self.rho * &self.rho).trace().re
    }

    pub fn hermiticity_error(&self) -> f64 {
        (&self.rho - self.rho.adjoint()).camax()
    }

    /// Check Hermiticity, unit trace and positivity at the documented tolerances.
    pub fn validate(&self) -> Result<()> {
        if self.rho.nrows() != self.n_atoms + 1 || !self.rho.is_square() {
            return arg("density matrix has the wrong dimension");
        }
        let herm = self.hermiticity_error();
        if herm > 1e-12 {
            return Err(Error::Degenerate(format!("rho not Hermitian ({herm:e})")));
        }
        let tr = self.trace();
        if (tr.re - 1.0).abs() > 1e-10 || tr.im.abs() > 1e-10 {
            return Err(Error::Degenerate(format!("trace {tr} != 1")));
        }
        let min = SymmetricEigen::new(self.rho.clone()).eigenvalues.min();
        if min < -1e-10 {
            return Err(Error::Degenerate(format!("negative eigenvalue {min:e}")));
        }
        Ok(())
    }

    pub fn expectation(&self, op: &DMatrix<Complex64>) -> Complex64 {
        (&self.rho * op).trace()
    }

    pub fn features(&self, ops: &SpinOperatorSet) -> [f64; feature::COUNT] {
        let jx = ops.jx_complex();
        let jz = ops.jz_matrix();
        let h = ops.h_s.map(|x| Complex64::new(x, 0.0));
        let ex = self.expectation(&jx).re;
        let ey = self.expectation(&ops.jy).re;
        let ez = self.expectation(&jz).re;
        let half_n = 0.5 * self.n_atoms as f64;
        [
            ex,
            ey,
            ez,
            self.expectation(&(&jx * &jx)).re,
            self.expectation(&(&ops.jy * &ops.jy)).re,
            self.expectation(&(&jz * &jz)).re,
            half_n + ez,
            half_n - ez,
            ex,
            ey,
            self.expectation(&h).re,
        ]
    }

    fn symmetrize(&mut self) {
        if self.hermiticity_error() > 1e-13 {
            RESYMMETRIZATIONS.fetch_add(1, Ordering::Relaxed);
        }
        self.rho = (&self.rho + self.rho.adjoint()) * Complex64::new(0.5, 0.0);
    }
}

/// Dicke-basis amplitudes of the spin-coherent state along `bloch` (`<J>/N`).
pub fn css_state(n_atoms: usize, bloch: [f64; 3]) -> Result<Vec<Complex64>> {
    let amps = spin::css_amplitudes(n_atoms, bloch)?;
    let sqrt_n = (n_atoms as f64).sqrt();
    let c1 = amps[0] / sqrt_n;
    let c2 = amps[1] / sqrt_n;
    // amplitude of n1 = k atoms in mode 1: sqrt(binom(N, k)) c1^k c2^(N-k)
    let ln_fact = |n: usize| -> f64 { (1..=n).map(|i| (i as f64).ln()).sum() };
    let lnf_n = ln_fact(n_atoms);
    let psi = (0..=n_atoms)
        .map(|k| {
            let ln_binom = lnf_n - ln_fact(k) - ln_fact(n_atoms - k);
            let mag = 0.5 * ln_binom;
            let t1 = if k == 0 { ONE } else { c1.powu(k as u32) };
            let t2 = if k == n_atoms {
                ONE
            } else {
                c2.powu((n_atoms - k) as u32)
            };
            t1 * t2 * mag.exp()
        })
        .collect();
    Ok(psi)
}

/// Centres `2 beta0 sin(lambda m)` of the measurement Gaussians.
pub fn measurement_centres(params: &TwoModeParams, ops: &SpinOperatorSet) -> Vec<f64> {
    ops.jz
        .iter()
        .map(|m| 2.0 * params.beta0 * (params.lambda * m).sin())
        .collect()
}

/// Outcome density `P(y) = sum_m rho_mm N(y; c_m, 1)`.
#[derive(Debug, Clone)]
pub struct MeasurementPdf {
    pub weights: Vec<f64>,
    pub centres: Vec<f64>,
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl MeasurementPdf {
    pub fn eval(&self, y: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.centres)
            .map(|(w, c)| w * INV_SQRT_2PI * (-0.5 * (y - c).powi(2)).exp())
            .sum()
    }

    fn eval_scaled(&self, y: f64, width: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.centres)
            .map(|(w, c)| w * INV_SQRT_2PI / width * (-0.5 * ((y - c) / width).powi(2)).exp())
            .sum()
    }

    pub fn support(&self, sigmas: f64) -> (f64, f64) {
        let lo = self.centres.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.centres.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo - sigmas, hi + sigmas)
    }
}

pub fn measurement_pdf(
    rho: &DickeDensityMatrix,
    params: &TwoModeParams,
    ops: &SpinOperatorSet,
) -> MeasurementPdf {
    MeasurementPdf {
        weights: (0..rho.rho.nrows()).map(|k| rho.rho[(k, k)].re.max(0.0)).collect(),
        centres: measurement_centres(params, ops),
    }
}

/// Envelope width inflation of the rejection sampler.
pub const ENVELOPE_WIDTH: f64 = 1.5;

/// Rejection sampling with a Gaussian-mixture envelope of inflated width.
pub fn sample_measurement(pdf: &MeasurementPdf, stream: &mut RngStream) -> Result<f64> {
    let total: f64 = pdf.weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("measurement pdf has zero weight".into()));
    }
    const MAX_TRIES: usize = 10_000;
    for _ in 0..MAX_TRIES {
        let mut pick = stream.uniform() * total;
        let mut k = 0;
        while k + 1 < pdf.weights.len() && pick >= pdf.weights[k] {
            pick -= pdf.weights[k];
            k += 1;
        }
        let y = pdf.centres[k] + ENVELOPE_WIDTH * stream.standard_normal();
        let accept = pdf.eval(y) / (ENVELOPE_WIDTH * pdf.eval_scaled(y, ENVELOPE_WIDTH));
        if stream.uniform() < accept {
            return Ok(y);
        }
    }
    Err(Error::SamplerDegeneracy {
        rate: 1.0 / MAX_TRIES as f64,
    })
}

/// Diagonal of `K(y)` scaled by `exp(d_min/4)`, with `ln` of that scale.
fn kraus_diagonal(y: f64, centres: &[f64]) -> (Vec<f64>, f64) {
    let d: Vec<f64> = centres.iter().map(|c| (y - c).powi(2)).collect();
    let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
    (
        d.iter().map(|x| (-(x - dmin) / 4.0).exp()).collect(),
        -dmin / 4.0,
    )
}

const LN_UNDERFLOW: f64 = -690.775_527_898_213_7; // ln(1e-300)

/// Condition `rho` on outcome `y`.
pub fn apply_kraus(
    rho: &DickeDensityMatrix,
    y: f64,
    params: &TwoModeParams,
    ops: &SpinOperatorSet,
) -> Result<DickeDensityMatrix> {
    let centres = measurement_centres(params, ops);
    let (k, ln_scale) = kraus_diagonal(y, &centres);
    let dim = k.len();
    let mut out = rho.rho.clone();
    for r in 0..dim {
        for c in 0..dim {
            out[(r, c)] *= k[r] * k[c];
        }
    }
    let tr = out.trace().re;
    let ln_tr = tr.ln() + 2.0 * ln_scale - 0.5 * (2.0 * std::f64::consts::PI).ln();
    if !(tr > 0.0) || ln_tr < LN_UNDERFLOW {
        return Err(Error::ConditioningUnderflow(ln_tr.exp()));
    }
    out.unscale_mut(tr);
    Ok(DickeDensityMatrix {
        rho: out,
        n_atoms: rho.n_atoms,
    })
}

/// `rho <- U rho U^dag` with `U = exp(-i (H_s + u J_z) dt)`.
pub fn unitary_step(
    rho: &DickeDensityMatrix,
    u: f64,
    dt: f64,
    ops: &SpinOperatorSet,
) -> Result<DickeDensityMatrix> {
    if !(dt >= 0.0) {
        return arg("unitary step needs dt >= 0");
    }
    if dt == 0.0 {
        return Ok(rho.clone());
    }
    let u_mat = ops.propagator(u).unitary(dt);
    Ok(propagate_with(rho, &u_mat))
}

fn propagate_with(rho: &DickeDensityMatrix, u_mat: &DMatrix<Complex64>) -> DickeDensityMatrix {
    let mut out = DickeDensityMatrix {
        rho: u_mat * &rho.rho * u_mat.adjoint(),
        n_atoms: rho.n_atoms,
    };
    out.symmetrize();
    out
}

/// Pure-state unravelling of an initial density matrix.
#[derive(Debug, Clone)]
pub struct Unravelling {
    weights: Vec<f64>,
    states: Vec<Vec<Complex64>>,
}

impl Unravelling {
    pub fn from_density(rho: &DickeDensityMatrix) -> Self {
        let dim = rho.rho.nrows();
        let off_diag = (0..dim)
            .flat_map(|r| (0..dim).filter(move |c| *c != r).map(move |c| (r, c)))
            .map(|(r, c)| rho.rho[(r, c)].norm())
            .fold(0.0, f64::max);
        let mut weights = Vec::new();
        let mut states = Vec::new();
        if off_diag < 1e-14 {
            for k in 0..dim {
                let w = rho.rho[(k, k)].re;
                if w > 1e-15 {
                    let mut psi = vec![ZERO; dim];
                    psi[k] = ONE;
                    weights.push(w);
                    states.push(psi);
                }
            }
        } else {
            let eig = SymmetricEigen::new(rho.rho.clone());
            for c in 0..dim {
                let w = eig.eigenvalues[c];
                if w > 1e-15 {
                    weights.push(w);
                    states.push(eig.eigenvectors.column(c).iter().cloned().collect());
                }
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self { weights, states }
    }

    pub fn pure(psi: Vec<Complex64>) -> Self {
        Self {
            weights: vec![1.0],
            states: vec![psi],
        }
    }

    fn pick(&self, stream: &mut RngStream) -> Vec<Complex64> {
        let mut x = stream.uniform();
        for (w, s) in self.weights.iter().zip(&self.states) {
            if x < *w {
                return s.clone();
            }
            x -= w;
        }
        self.states.last().unwrap().clone()
    }
}

fn normalize(psi: &mut [Complex64]) -> f64 {
    let n: f64 = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    psi.iter_mut().for_each(|z| *z /= n);
    n
}

fn run_record(
    record: usize,
    initial: &Unravelling,
    params: &TwoModeParams,
    schedule: &ProtocolSchedule,
    ops: &SpinOperatorSet,
    centres: &[f64],
    epsilon: f64,
    seed: u64,
) -> Result<Vec<[f64; feature::COUNT]>> {
    let mut stream = RngStream::for_purpose(seed, Purpose::Record, record as u64);
    let mut psi = initial.pick(&mut stream);
    let r = schedule.record_substeps.max(1);
    let sub_dt = schedule.tau / r as f64;
    let mut rows = Vec::with_capacity(schedule.n_measurements * (2 + r) + 1);
    let mut y_prev: Option<f64> = None;
    let measuring = params.lambda != 0.0;
    for _ in 0..schedule.n_measurements {
        rows.push(ops.pure_features(&psi));
        let u = if measuring {
            let pdf = MeasurementPdf {
                weights: psi.iter().map(|z| z.norm_sqr()).collect(),
                centres: centres.to_vec(),
            };
            let y = sample_measurement(&pdf, &mut stream)?;
            let (k, _) = kraus_diagonal(y, centres);
            psi.iter_mut().zip(&k).for_each(|(p, kk)| *p *= *kk);
            if !(normalize(&mut psi) > 0.0) {
                return Err(Error::ConditioningUnderflow(0.0));
            }
            let u = y_prev
                .map(|yp| feedback_update(y, yp, epsilon, params.k_fb, schedule.tau))
                .unwrap_or(0.0);
            y_prev = Some(y);
            u
        } else {
            0.0
        };
        rows.push(ops.pure_features(&psi));
        for _ in 0..r {
            ops.evolve_pure(&mut psi, u, sub_dt);
            rows.push(ops.pure_features(&psi));
        }
    }
    let tail = schedule.tail_time();
    if tail > 0.0 {
        ops.evolve_pure(&mut psi, 0.0, tail);
        rows.push(ops.pure_features(&psi));
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct KrausRun {
    pub series: TwoModeSeries,
    pub tables: Option<Vec<FeatureTable>>,
}

/// Average `n_records` independent measurement records.
pub fn run_mf_protocol(
    params: &TwoModeParams,
    schedule: &ProtocolSchedule,
    initial: &Unravelling,
    n_records: usize,
    seed: u64,
    est: &EstimatorSettings,
    keep_tables: bool,
) -> Result<KrausRun> {
    params.validate()?;
    schedule.validate()?;
    if n_records < 2 {
        return arg("need at least 2 measurement records");
    }
    let ops = build_operators(params)?;
    let centres = measurement_centres(params, &ops);
    let epsilon = if params.lambda > 0.0 {
        epsilon_scale(params)?
    } else {
        0.0
    };
    let rows: Vec<Vec<[f64; feature::COUNT]>> = (0..n_records)
        .into_par_iter()
        .map(|i| run_record(i, initial, params, schedule, &ops, &centres, epsilon, seed))
        .collect::<Result<_>>()?;
    let points = schedule.record_points();
    let plan = est.plan(n_records)?;
    let tables: Vec<FeatureTable> = (0..points.len())
        .map(|p| {
            let mut t = FeatureTable::with_capacity(feature::COUNT, n_records);
            rows.iter().for_each(|r| t.push(&r[p]));
            t
        })
        .collect();
    let observables = tables
        .par_iter()
        .map(|t| spin::observables_from_table(t, &plan, est.level_sigmas, 0.0, ops.energy_offset))
        .collect::<Result<Vec<_>>>()?;
    Ok(KrausRun {
        series: TwoModeSeries {
            points,
            observables,
        },
        tables: keep_tables.then_some(tables),
    })
}

fn exact_observables(f: &[f64; feature::COUNT], energy_offset: f64) -> TwoModeObservables {
    use feature::*;
    let ci = |v: f64| BootstrapCI::exact(v, 2.0);
    TwoModeObservables {
        moments: spin::SpinMoments {
            mean: [ci(f[JX]), ci(f[JY]), ci(f[JZ])],
            var: [
                ci(f[JX2] - f[JX] * f[JX]),
                ci(f[JY2] - f[JY] * f[JY]),
                ci(f[JZ2] - f[JZ] * f[JZ]),
            ],
        },
        tmcf: ci(spin::tmcf_from_matrix(
            f[G11],
            f[G22],
            Complex64::new(f[G12_RE], f[G12_IM]),
        )),
        energy: ci(f[ENERGY] + energy_offset),
    }
}

/// Deterministic unconditional evolution by integrating outcomes on a `y` grid.
///
/// The state is tracked as a family of unnormalised operators indexed by the
/// most recent outcome, since the held feedback depends on two consecutive
/// outcomes. Cost grows as `grid_points^2` per measurement; intended for small N.
pub fn run_mf_quadrature(
    params: &TwoModeParams,
    schedule: &ProtocolSchedule,
    rho0: &DickeDensityMatrix,
    grid_points: usize,
) -> Result<TwoModeSeries> {
    params.validate()?;
    schedule.validate()?;
    rho0.validate()?;
    if grid_points < 3 {
        return arg("quadrature grid needs at least 3 points");
    }
    let ops = build_operators(params)?;
    let centres = measurement_centres(params, &ops);
    let epsilon = if params.lambda > 0.0 {
        epsilon_scale(params)?
    } else {
        0.0
    };
    let lo = centres.iter().cloned().fold(f64::INFINITY, f64::min) - 8.0;
    let hi = centres.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 8.0;
    let dy = (hi - lo) / (grid_points - 1) as f64;
    let ys: Vec<f64> = (0..grid_points).map(|i| lo + dy * i as f64).collect();
    let wq: Vec<f64> = (0..grid_points)
        .map(|i| if i == 0 || i + 1 == grid_points { 0.5 * dy } else { dy })
        .collect();
    // normalised Kraus diagonals including (2 pi)^{-1/4}
    let kd: Vec<Vec<f64>> = ys
        .iter()
        .map(|y| {
            centres
                .iter()
                .map(|c| (-(y - c).powi(2) / 4.0).exp() * (2.0 * std::f64::consts::PI).powf(-0.25))
                .collect()
        })
        .collect();
    let condition = |sigma: &DMatrix<Complex64>, k: usize| -> DMatrix<Complex64> {
        let mut out = sigma.clone();
        let d = &kd[k];
        for r in 0..out.nrows() {
            for c in 0..out.ncols() {
                out[(r, c)] *= d[r] * d[c] * wq[k];
            }
        }
        out
    };
    let r = schedule.record_substeps.max(1);
    let sub_dt = schedule.tau / r as f64;
    let free = ops.propagator(0.0).unitary(sub_dt);
    // cache of sub-interval unitaries keyed by grid-index difference
    let diff_unitaries: Vec<DMatrix<Complex64>> = if params.lambda != 0.0 {
        (0..2 * grid_points - 1)
            .into_par_iter()
            .map(|d| {
                let delta = (d as f64 - (grid_points - 1) as f64) * dy;
                let u = feedback_update(delta, 0.0, epsilon, params.k_fb, schedule.tau);
                ops.propagator(u).unitary(sub_dt)
            })
            .collect()
    } else {
        Vec::new()
    };
    let features_of = |m: &DMatrix<Complex64>| {
        DickeDensityMatrix {
            rho: m.clone(),
            n_atoms: params.n_atoms,
        }
        .features(&ops)
    };
    let sum = |v: &[DMatrix<Complex64>]| -> DMatrix<Complex64> {
        v.iter()
            .fold(DMatrix::from_element(rho0.rho.nrows(), rho0.rho.ncols(), ZERO), |a, b| a + b)
    };

    let mut observables = Vec::new();
    let points = schedule.record_points();
    let mut family: Option<Vec<DMatrix<Complex64>>> = None;
    let mut plain = rho0.rho.clone();
    for j in 0..schedule.n_measurements {
        let pre = family.as_ref().map(|f| sum(f)).unwrap_or_else(|| plain.clone());
        observables.push(exact_observables(&features_of(&pre), ops.energy_offset));
        if params.lambda == 0.0 {
            observables.push(exact_observables(&features_of(&plain), ops.energy_offset));
            for _ in 0..r {
                plain = &free * &plain * free.adjoint();
                observables.push(exact_observables(&features_of(&plain), ops.energy_offset));
            }
            continue;
        }
        let next: Vec<DMatrix<Complex64>> = match &family {
            None => {
                let mut fam: Vec<DMatrix<Complex64>> =
                    (0..grid_points).map(|k| condition(&plain, k)).collect();
                observables.push(exact_observables(&features_of(&sum(&fam)), ops.energy_offset));
                for _ in 0..r {
                    fam = fam.par_iter().map(|s| &free * s * free.adjoint()).collect();
                    observables
                        .push(exact_observables(&features_of(&sum(&fam)), ops.energy_offset));
                }
                fam
            }
            Some(prev) => {
                // conditioned pairs (i, k), each evolved with u(y_k - y_i)
                let mut pairs: Vec<Vec<DMatrix<Complex64>>> = (0..grid_points)
                    .into_par_iter()
                    .map(|k| prev.iter().map(|s| condition(s, k)).collect())
                    .collect();
                let post: Vec<DMatrix<Complex64>> = pairs.iter().map(|p| sum(p)).collect();
                observables.push(exact_observables(&features_of(&sum(&post)), ops.energy_offset));
                for _ in 0..r {
                    pairs = pairs
                        .into_par_iter()
                        .enumerate()
                        .map(|(k, row)| {
                            row.into_iter()
                                .enumerate()
                                .map(|(i, s)| {
                                    let uu = &diff_unitaries[k + grid_points - 1 - i];
                                    uu * s * uu.adjoint()
                                })
                                .collect()
                        })
                        .collect();
                    let marg: Vec<DMatrix<Complex64>> = pairs.iter().map(|p| sum(p)).collect();
                    observables
                        .push(exact_observables(&features_of(&sum(&marg)), ops.energy_offset));
                }
                pairs.iter().map(|p| sum(p)).collect()
            }
        };
        if j == 0 {
            plain = sum(&next);
        }
        family = Some(next);
    }
    if schedule.tail_time() > 0.0 {
        let last = family.as_ref().map(|f| sum(f)).unwrap_or(plain);
        let u_tail = ops.propagator(0.0).unitary(schedule.tail_time());
        let fin = &u_tail * last * u_tail.adjoint();
        observables.push(exact_observables(&features_of(&fin), ops.energy_offset));
    }
    debug_assert_eq!(points.len(), observables.len());
    let _ = RecordKind::Interval;
    Ok(TwoModeSeries {
        points,
        observables,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(n: usize) -> TwoModeParams {
        TwoModeParams {
            chi: 0.01,
            kappa: 0.09,
            lambda: 0.8e-4,
            k_fb: 0.1,
            n_atoms: n,
            beta0: 1e7f64.sqrt(),
        }
    }

    #[test]
    fn small_spin_algebra() {
        let ops = build_operators(&params(1)).unwrap();
        assert_eq!(ops.jz.as_slice(), &[-0.5, 0.5]);
        let ops2 = build_operators(&params(2)).unwrap();
        let mut ev: Vec<f64> = SymmetricEigen::new(ops2.jx.clone())
            .eigenvalues
            .iter()
            .cloned()
            .collect();
        ev.sort_by(f64::total_cmp);
        for (a, b) in ev.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn commutator_at_n100() {
        let ops = build_operators(&params(100)).unwrap();
        let jx = ops.jx_complex();
        let comm = &jx * &ops.jy - &ops.jy * &jx;
        let target = ops.jz_matrix() * Complex64::new(0.0, 1.0);
        assert!((comm - target).camax() < 1e-10);
    }

    #[test]
    fn dense_limit_enforced() {
        assert!(matches!(
            build_operators(&params(MAX_DENSE_ATOMS + 1)),
            Err(Error::Capability { .. })
        ));
    }

    #[test]
    fn pdf_normalisation_and_dicke_centre() {
        let p = params(10);
        let ops = build_operators(&p).unwrap();
        let rho = DickeDensityMatrix::maximally_mixed(10);
        let pdf = measurement_pdf(&rho, &p, &ops);
        let (lo, hi) = pdf.support(12.0);
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let integral: f64 = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * pdf.eval(lo + h * i as f64)
            })
            .sum::<f64>()
            * h;
        assert!((integral - 1.0).abs() < 1e-6);

        let centre = measurement_pdf(&DickeDensityMatrix::dicke(10, 5), &p, &ops);
        assert_relative_eq!(centre.eval(0.0), INV_SQRT_2PI, epsilon = 1e-15);
    }

    #[test]
    fn zero_coupling_kraus_is_identity() {
        let p = TwoModeParams {
            lambda: 0.0,
            ..params(4)
        };
        let ops = build_operators(&p).unwrap();
        let psi = css_state(4, [0.3, 0.0, 0.4]).unwrap();
        let rho = DickeDensityMatrix::from_pure(&psi);
        let out = apply_kraus(&rho, 0.7, &p, &ops).unwrap();
        assert!((out.rho - rho.rho).camax() < 1e-14);
    }

    #[test]
    fn strong_measurement_projects() {
        let p = TwoModeParams {
            lambda: 0.1,
            beta0: 1000.0,
            ..params(4)
        };
        let ops = build_operators(&p).unwrap();
        let rho = DickeDensityMatrix::maximally_mixed(4);
        let y = 2.0 * p.beta0 * (p.lambda * 1.0).sin();
        let out = apply_kraus(&rho, y, &p, &ops).unwrap();
        assert!((out.purity() - 1.0).abs() < 1e-6);
        assert!((out.rho[(3, 3)].re - 1.0).abs() < 1e-6);
        assert!((out.trace().re - 1.0).abs() < 1e-14);
    }

    #[test]
    fn underflow_detected() {
        let p = TwoModeParams {
            lambda: 0.1,
            beta0: 1000.0,
            ..params(4)
        };
        let ops = build_operators(&p).unwrap();
        let rho = DickeDensityMatrix::dicke(4, 0);
        assert!(matches!(
            apply_kraus(&rho, 1e4, &p, &ops),
            Err(Error::ConditioningUnderflow(_))
        ));
    }

    #[test]
    fn unitary_identity_and_energy() {
        let p = params(20);
        let ops = build_operators(&p).unwrap();
        let rho = DickeDensityMatrix::from_pure(&css_state(20, [0.0, 0.4, -0.3]).unwrap());
        assert_eq!(unitary_step(&rho, 0.3, 0.0, &ops).unwrap(), rho);
        let e0 = rho.features(&ops)[feature::ENERGY];
        let mut r = rho.clone();
        for _ in 0..20 {
            r = unitary_step(&r, 0.0, 1.7, &ops).unwrap();
        }
        assert!((r.features(&ops)[feature::ENERGY] - e0).abs() < 1e-10);
        r.validate().unwrap();
    }

    #[test]
    fn rabi_rotation_period() {
        let p = TwoModeParams {
            chi: 0.0,
            ..params(10)
        };
        let ops = build_operators(&p).unwrap();
        let rho = DickeDensityMatrix::dicke(10, 10);
        let half = unitary_step(&rho, 0.0, 0.5 * std::f64::consts::PI / p.kappa, &ops).unwrap();
        let full = unitary_step(&rho, 0.0, std::f64::consts::PI / p.kappa, &ops).unwrap();
        assert_relative_eq!(half.features(&ops)[feature::JZ], -5.0, epsilon = 1e-9);
        assert_relative_eq!(full.features(&ops)[feature::JZ], 5.0, epsilon = 1e-9);
    }

    #[test]
    fn css_state_matches_bloch_vector() {
        let p = params(30);
        let ops = build_operators(&p).unwrap();
        let psi = css_state(30, [0.0, 0.4, -0.3]).unwrap();
        let f = ops.pure_features(&psi);
        assert_relative_eq!(psi.iter().map(|z| z.norm_sqr()).sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(f[feature::JX], 0.0, epsilon = 1e-10);
        assert_relative_eq!(f[feature::JY], 12.0, epsilon = 1e-10);
        assert_relative_eq!(f[feature::JZ], -9.0, epsilon = 1e-10);
        let rho_f = DickeDensityMatrix::from_pure(&psi).features(&ops);
        for (a, b) in f.iter().zip(rho_f.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn bessel_values() {
        let j = bessel_j_sequence(1.0);
        assert_relative_eq!(j[0], 0.765_197_686_557_966_6, epsilon = 1e-15);
        assert_relative_eq!(j[1], 0.440_050_585_744_933_5, epsilon = 1e-15);
        let j = bessel_j_sequence(50.0);
        assert_relative_eq!(j[0], 0.055_812_327_669_251_85, epsilon = 1e-14);
    }

    #[test]
    fn chebyshev_matches_eigen_propagator() {
        let p = params(100);
        let ops = build_operators(&p).unwrap();
        let psi0 = css_state(100, [0.0, 0.4, -0.3]).unwrap();
        for (u, t) in [(0.0, 2.25), (0.4, 2.25), (-1.3, 17.0), (0.2, -3.0)] {
            let mut a = psi0.clone();
            let mut b = psi0.clone();
            ops.evolve_pure(&mut a, u, t);
            ops.propagator(u).apply(&mut b, t);
            let err = a.iter().zip(&b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
            assert!(err < 1e-11, "u={u} t={t} err={err}");
        }
    }

    #[test]
    fn pure_propagator_matches_dense() {
        let p = params(12);
        let ops = build_operators(&p).unwrap();
        let mut psi = css_state(12, [0.2, 0.1, 0.4]).unwrap();
        let rho = DickeDensityMatrix::from_pure(&psi);
        ops.propagator(0.37).apply(&mut psi, 2.3);
        let dense = unitary_step(&rho, 0.37, 2.3, &ops).unwrap();
        assert!((DickeDensityMatrix::from_pure(&psi).rho - dense.rho).camax() < 1e-12);
    }
}
