use fbtwa_core::cf_twa::hamiltonian_step;
use fbtwa_core::npw::systematic_offspring;
use fbtwa_core::rng::RngStream;
use fbtwa_core::spin::{renormalize_to_n, wigner_features, wigner_spin, TwoModeEnsemble, TwoModeParams};
use fbtwa_core::stats::{bootstrap_ci, Statistic};
use num_complex::Complex64;
use proptest::prelude::*;

fn params() -> TwoModeParams {
    TwoModeParams {
        chi: 0.01,
        kappa: 0.09,
        lambda: 0.8e-4,
        k_fb: 0.1,
        n_atoms: 100,
        beta0: 1e7f64.sqrt(),
    }
}

fn amp() -> impl Strategy<Value = Complex64> {
    (-12.0..12.0f64, -12.0..12.0f64).prop_map(|(r, i)| Complex64::new(r, i))
}

proptest! {
    #[test]
    fn offspring_counts_are_floor_or_ceil(
        w in prop::collection::vec(0.0..1.0f64, 1..60),
        u0 in 0.0..1.0f64,
    ) {
        let total: f64 = w.iter().sum();
        prop_assume!(total > 1e-9);
        let n = w.len();
        let counts = systematic_offspring(&w, u0);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        for (c, wi) in counts.iter().zip(&w) {
            let expected = wi / total * n as f64;
            prop_assert!((*c as f64 - expected).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn renormalization_is_idempotent_and_keeps_direction(a in amp(), b in amp(), target in 1.0..500.0f64) {
        prop_assume!(a.norm_sqr() + b.norm_sqr() > 1e-6);
        let before = wigner_spin(&[a, b]);
        let n0 = a.norm_sqr() + b.norm_sqr();
        let mut ens = TwoModeEnsemble::from_trajectories(vec![[a, b]]);
        renormalize_to_n(&mut ens, target).unwrap();
        let once = ens.trajectories[0];
        renormalize_to_n(&mut ens, target).unwrap();
        let twice = ens.trajectories[0];
        prop_assert!((once[0] - twice[0]).norm() <= 1e-12 * target.sqrt());
        prop_assert!((once[0].norm_sqr() + once[1].norm_sqr() - target).abs() <= 1e-12 * target);
        let after = wigner_spin(&once);
        for k in 0..3 {
            prop_assert!((after[k] / target - before[k] / n0).abs() <= 1e-12);
        }
    }

    #[test]
    fn features_ignore_global_phase(a in amp(), b in amp(), phi in 0.0..std::f64::consts::TAU) {
        let p = params();
        let r = Complex64::from_polar(1.0, phi);
        let f0 = wigner_features(&[a, b], &p);
        let f1 = wigner_features(&[a * r, b * r], &p);
        for (x, y) in f0.iter().zip(&f1) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn hamiltonian_step_norm_drift_is_rk4_small(a in amp(), b in amp(), u in -1.0..1.0f64) {
        let p = params();
        let n0 = a.norm_sqr() + b.norm_sqr();
        let mut s = [a, b];
        for _ in 0..50 {
            s = hamiltonian_step(&s, &p, u, 0.05);
        }
        // RK4 loses norm at O((chi |a|^2 dt)^6) per step
        prop_assert!((s[0].norm_sqr() + s[1].norm_sqr() - n0).abs() <= 1e-5 * (1.0 + n0));
    }
}

#[test]
fn bootstrap_two_sigma_interval_covers_the_mean() {
    let trials = 400;
    let mut covered = 0;
    for t in 0..trials {
        let mut s = RngStream::new(77, t);
        let x: Vec<f64> = (0..200).map(|_| s.standard_normal()).collect();
        let ci = bootstrap_ci(&x, Statistic::Mean, 2.0, 400, &mut s).unwrap();
        covered += ci.contains(0.0) as usize;
    }
    // nominal 95.45%; binomial sd over 400 trials is about 1%
    let rate = covered as f64 / trials as f64;
    assert!((0.92..=0.985).contains(&rate), "coverage {rate}");
}
