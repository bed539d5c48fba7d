//! Deterministic random streams.
//!
//! A stream is fully determined by `(master_seed, stream_id)`. The generator is
//! ChaCha8 keyed by the master seed with the stream id selecting one of its
//! 2^64 independent streams, so no stream depends on how many values another
//! stream has consumed. Trajectory-parallel runs are therefore reproducible
//! for any thread count.

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{arg, Result};

/// Purpose tags occupy the top 16 bits of a stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum Purpose {
    InitialState = 1,
    Dynamics = 2,
    Bootstrap = 3,
    Record = 4,
    Thermal = 5,
    Measurement = 6,
}

/// Compose a stream id from a purpose tag and an index (trajectory, record, ...).
pub fn stream_id(purpose: Purpose, index: u64) -> u64 {
    debug_assert!(index < (1 << 48));
    ((purpose as u64) << 48) | (index & ((1 << 48) - 1))
}

#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            rng,
        }
    }

    pub fn for_purpose(master_seed: u64, purpose: Purpose, index: u64) -> Self {
        Self::new(master_seed, stream_id(purpose, index))
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Complex Gaussian with independent parts of variance `variance / 2` each,
    /// so that `E|z|^2 = variance`.
    pub fn complex_gaussian(&mut self, variance: f64) -> Result<Complex64> {
        sample_complex_gaussian(self, variance)
    }

    pub fn wiener(&mut self, dt: f64) -> Result<f64> {
        wiener_increment(self, dt)
    }

    pub(crate) fn complex_gaussian_unchecked(&mut self, variance: f64) -> Complex64 {
        if variance == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let s = (0.5 * variance).sqrt();
        let re = self.standard_normal();
        let im = self.standard_normal();
        Complex64::new(s * re, s * im)
    }
}

pub fn sample_complex_gaussian(stream: &mut RngStream, variance: f64) -> Result<Complex64> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return arg(format!("complex Gaussian variance must be >= 0, got {variance}"));
    }
    Ok(stream.complex_gaussian_unchecked(variance))
}

/// Real Wiener increment with variance `dt`.
pub fn wiener_increment(stream: &mut RngStream, dt: f64) -> Result<f64> {
    if !(dt > 0.0) || !dt.is_finite() {
        return arg(format!("Wiener increment needs dt > 0, got {dt}"));
    }
    Ok(dt.sqrt() * stream.standard_normal())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn zero_variance_is_exact_zero() {
        let mut s = RngStream::new(1, 2);
        assert_eq!(s.complex_gaussian(0.0).unwrap(), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn negative_variance_rejected() {
        let mut s = RngStream::new(1, 2);
        assert!(s.complex_gaussian(-1.0).is_err());
        assert!(s.wiener(0.0).is_err());
        assert!(s.wiener(-0.1).is_err());
    }

    #[test]
    fn identical_keys_identical_sequences() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        for _ in 0..100 {
            assert_eq!(
                a.complex_gaussian(0.5).unwrap(),
                b.complex_gaussian(0.5).unwrap()
            );
        }
    }

    #[test]
    fn stream_collision_smoke_test() {
        let mut seen = HashSet::new();
        for id in 0..10_000u64 {
            let mut s = RngStream::new(12345, id);
            let head: Vec<u64> = (0..16).map(|_| s.next_u64()).collect();
            assert!(seen.insert(head), "stream {id} collided");
        }
    }

    #[test]
    fn complex_gaussian_second_moment() {
        let mut s = RngStream::new(3, 0);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let z = s.complex_gaussian(0.5).unwrap();
            let m = z.norm_sqr();
            sum += m;
            sum2 += m * m;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn wiener_variance_and_additivity() {
        let mut s = RngStream::new(9, 1);
        let n = 1_000_000;
        let dt = 0.01;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let w = s.wiener(dt).unwrap();
            sum2 += w * w;
        }
        let var = sum2 / n as f64;
        assert!((var / dt - 1.0).abs() < 0.01, "var {var}");

        // sum of 10 increments over 1e5 replicas has variance 10 dt
        let reps = 100_000;
        let k = 10;
        let mut acc = 0.0;
        let mut acc4 = 0.0;
        for _ in 0..reps {
            let w: f64 = (0..k).map(|_| s.wiener(dt).unwrap()).sum();
            acc += w * w;
            acc4 += w.powi(4);
        }
        let v = acc / reps as f64;
        let se = ((acc4 / reps as f64 - v * v) / reps as f64).sqrt();
        assert!((v - k as f64 * dt).abs() < 3.0 * se, "v {v} se {se}");
    }

    #[test]
    fn purpose_tags_separate_streams() {
        assert_ne!(
            stream_id(Purpose::InitialState, 5),
            stream_id(Purpose::Dynamics, 5)
        );
    }
}
