use kbzakai::model::{derived_at, drift_at};
use kbzakai::riccati::{run_filter, run_filter_with, NoiseScheme};
use kbzakai::scenarios::random_bounded;
use kbzakai::sde::{
    coarsen_increments, martingale_factorization_check, path_seed, simulate_path, PathBundle, SimulationOptions,
};
use kbzakai::zakai::ReducedCoefficients;
use kbzakai::{ModelSpec, QuadraticForm};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn random_path(seed: u64, d: usize, m: usize, dt: f64, horizon: f64) -> (ModelSpec, PathBundle) {
    let spec = random_bounded(seed, d, m, horizon).unwrap();
    let mut z0 = DVector::zeros(spec.d1());
    z0[0] = 0.3;
    let path = simulate_path(&spec, &z0, &SimulationOptions::new(dt, horizon), path_seed(seed, 0), 0).unwrap();
    (spec, path)
}

fn vector(values: &[f64], n: usize) -> DVector<f64> {
    DVector::from_iterator(n, values.iter().copied().cycle().take(n))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn drifts_are_affine_in_the_signal(
        seed in 0u64..1000, d in 1usize..4, m in 1usize..3,
        xs in prop::collection::vec(-3.0f64..3.0, 8), ys in prop::collection::vec(-2.0f64..2.0, 4),
        lam in -1.0f64..2.0, t in 0.0f64..1.0,
    ) {
        let spec = random_bounded(seed, d, m, 1.0).unwrap();
        let y = vector(&ys, m);
        let x1 = vector(&xs[..4], d);
        let x2 = vector(&xs[4..], d);
        let mix = &x1 * lam + &x2 * (1.0 - lam);
        let at = |x: &DVector<f64>| {
            let mut z = DVector::zeros(d + m);
            z.rows_mut(0, d).copy_from(x);
            z.rows_mut(d, m).copy_from(&y);
            drift_at(&spec, t, &z).unwrap()
        };
        let (a1, b1, c1) = at(&x1);
        let (a2, b2, c2) = at(&x2);
        let (am, bm, cm) = at(&mix);
        prop_assert!((&am - (&a1 * lam + &a2 * (1.0 - lam))).amax() < 1e-10);
        prop_assert!((&bm - (&b1 * lam + &b2 * (1.0 - lam))).amax() < 1e-10);
        prop_assert!((&cm - (&c1 * lam + &c2 * (1.0 - lam))).amax() < 1e-10);
    }

    /// `β = Mx + c` against `σ𝖡(x) − 2â DQ(x) − b(x)` evaluated pointwise.
    #[test]
    fn reduced_drift_matches_its_definition(
        seed in 0u64..1000, d in 1usize..4, m in 1usize..3,
        xs in prop::collection::vec(-3.0f64..3.0, 4), ys in prop::collection::vec(-2.0f64..2.0, 2),
        eps in 0.2f64..3.0, vs in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let spec = random_bounded(seed, d, m, 1.0).unwrap();
        let f = derived_at(&spec, 0.3, &vector(&ys, m)).unwrap();
        let q = QuadraticForm::new(DMatrix::identity(d, d) * eps, vector(&vs, d), 0.0).unwrap();
        let x = vector(&xs, d);
        let rc = ReducedCoefficients::from_fields(&f, &q);
        let beta = &rc.drift_mat * &x + &rc.drift_vec;
        let expected = &f.sigma * f.sf_drift(&x) - &f.ahat * q.gradient(&x) * 2.0 - f.drift(&x);
        prop_assert!((&beta - &expected).amax() < 1e-10 * (1.0 + expected.amax()));
    }

    #[test]
    fn riccati_matrix_stays_symmetric_positive(seed in 0u64..1000, d in 1usize..4, m in 1usize..3, eps in 0.05f64..5.0) {
        let (spec, path) = random_path(seed, d, m, 0.01, 1.0);
        for scheme in [NoiseScheme::EulerMaruyama, NoiseScheme::Milstein] {
            let run = run_filter_with(&spec, &path, &QuadraticForm::isotropic(d, eps), scheme).unwrap();
            prop_assert!(run.max_asymmetry() < 1e-12);
            let (lo, _, _) = run.psd_band();
            prop_assert!(lo > 0.0);
        }
    }

    /// States up to step k depend only on the observations up to step k.
    #[test]
    fn filter_is_adapted(seed in 0u64..1000, k in 1usize..50) {
        let (spec, path) = random_path(seed, 2, 1, 0.02, 1.0);
        let q0 = QuadraticForm::isotropic(2, 1.0);
        let full = run_filter(&spec, &path, &q0).unwrap();
        let mut altered = path.clone();
        for dy in altered.dytilde.iter_mut().skip(k) {
            *dy *= -3.0;
        }
        let prefix = run_filter(&spec, &altered, &q0).unwrap();
        prop_assert_eq!(&full.states[..=k], &prefix.states[..=k]);
        prop_assert_ne!(&full.states[k + 1], &prefix.states[k + 1]);
    }

    #[test]
    fn simulation_is_deterministic_and_coarsens_exactly(seed in 0u64..10_000, factor in prop::sample::select(vec![1usize, 2, 4, 5, 8, 20])) {
        let (spec, a) = random_path(seed, 1, 1, 0.01, 0.4);
        let (_, b) = random_path(seed, 1, 1, 0.01, 0.4);
        prop_assert_eq!(&a, &b);
        let coarse = coarsen_increments(&a.dw, factor).unwrap();
        prop_assert_eq!(coarse.len(), a.dw.len() / factor);
        let total: DVector<f64> = a.dw.iter().fold(DVector::zeros(spec.dw), |s, v| s + v);
        let total_coarse: DVector<f64> = coarse.iter().fold(DVector::zeros(spec.dw), |s, v| s + v);
        prop_assert!((total - total_coarse).amax() < 1e-12);
        prop_assert!(a.innovation_identity_gap() < 1e-10);
    }

    /// The product of the two exponentials equals the exponential of the
    /// summed integrand along every path.
    #[test]
    fn martingale_product_identity(seed in 0u64..1000, m in 1usize..3) {
        let (spec, path) = random_path(seed, 2, m, 0.01, 0.5);
        let run = run_filter(&spec, &path, &QuadraticForm::isotropic(2, 1.0)).unwrap();
        let check = martingale_factorization_check(&spec, &path, &run.states).unwrap();
        prop_assert!(check.max_rel_gap < 1e-9, "gap {}", check.max_rel_gap);
    }

    #[test]
    fn path_seeds_do_not_collide(master in any::<u64>()) {
        let seeds: std::collections::HashSet<u64> = (0..256).map(|i| path_seed(master, i)).collect();
        prop_assert_eq!(seeds.len(), 256);
    }
}
