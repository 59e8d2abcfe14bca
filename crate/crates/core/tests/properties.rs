//! Cross-module invariants checked on random inputs.

use gle_core::matops::{self, lyapunov_kronecker, lyapunov_residual, lyapunov_schur, matrix_exp};
use gle_core::model::build_markovian_system;
use gle_core::realization::{biexp_realization, effective_constant, kernel_eval, preset, spectral_density, Preset};
use gle_core::simulate::{simulate_path, simulate_sde};
use gle_core::{quad, GLEModel, Matrix, SimConfig};
use proptest::prelude::*;

fn stable(n: usize) -> impl Strategy<Value = Matrix> {
    (prop::collection::vec(-1.0f64..1.0, n * n), 0.2f64..2.0).prop_map(move |(v, shift)| {
        let m = Matrix::from_vec(n, n, v);
        let top = matops::spectrum(&m).unwrap().eigenvalues.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        m - Matrix::identity(n, n) * (top + shift)
    })
}

fn sized_stable() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..6).prop_flat_map(|n| (stable(n), prop::collection::vec(-1.0f64..1.0, n * n))).prop_map(|(a, b)| {
        let n = a.nrows();
        let b = Matrix::from_vec(n, n, b);
        (a, &b * b.transpose())
    })
}

fn preset_strategy() -> impl Strategy<Value = Preset> {
    prop_oneof![
        (0.2f64..2.0, 0.1f64..2.0, 0.2f64..2.0).prop_map(|(g1, d, beta)| Preset::M1 { gamma_1: g1, gamma_2: g1 + d, beta }),
        (0.2f64..2.0, 0.2f64..2.0).prop_map(|(g1, beta)| Preset::M2 { gamma_1: g1, beta }),
        (0.2f64..2.0, 0.2f64..2.0).prop_map(|(g1, beta)| Preset::Exponential { gamma_1: g1, beta }),
        (0.2f64..1.0, 0.1f64..1.0, 0.1f64..1.0, 0.2f64..2.0)
            .prop_map(|(g1, d2, d3, beta)| Preset::Hyper { gamma_1: g1, gamma_2: g1 + d2, gamma_3: g1 + d2 + d3, beta }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lyapunov_solvers_agree((a, q) in sized_stable()) {
        let s = lyapunov_schur(&a, &q).unwrap();
        let k = lyapunov_kronecker(&a, &q).unwrap();
        let scale = 1.0 + s.amax();
        prop_assert!((&s - &k).amax() <= 1e-9 * scale);
        prop_assert!(lyapunov_residual(&a, &s, &q) <= 1e-10 * (1.0 + a.norm() * s.norm()));
        prop_assert!((&s - s.transpose()).amax() <= 1e-12 * scale);
        prop_assert!(matops::min_sym_eigenvalue(&s) >= -1e-10 * scale);
    }

    #[test]
    fn matrix_exponential_is_a_semigroup((a, _) in sized_stable(), s in 0.0f64..3.0, t in 0.0f64..3.0) {
        let lhs = matrix_exp(&a, s + t).unwrap();
        let rhs = matrix_exp(&a, s).unwrap() * matrix_exp(&a, t).unwrap();
        prop_assert!((lhs - rhs).amax() <= 1e-10);
    }

    #[test]
    fn noise_spectra_are_nonnegative_and_even(p in preset_strategy(), w in 0.0f64..20.0) {
        let (_, noise) = preset(&p).unwrap();
        for b in noise.blocks.iter().flatten() {
            let plus = spectral_density(b, w).unwrap()[(0, 0)];
            let minus = spectral_density(b, -w).unwrap()[(0, 0)];
            prop_assert!(plus >= -1e-12);
            prop_assert!((plus - minus).abs() <= 1e-12 * (1.0 + plus.abs()));
        }
    }

    #[test]
    fn effective_constant_integrates_the_covariance(g1 in 0.3f64..2.0, d in 0.2f64..2.0, b in 0.2f64..2.0) {
        let block = biexp_realization(&[g1], &[g1 + d], &matops::scalar(b)).unwrap();
        let k1 = effective_constant(&block, 1).unwrap()[(0, 0)];
        // ∫₀^∞ R(t) dt with t = u/(1−u)
        let f = |u: f64| if u >= 1.0 { 0.0 } else { block.covariance(u / (1.0 - u))[(0, 0)] / ((1.0 - u) * (1.0 - u)) };
        let integral = quad::integrate(f, 0.0, 1.0, 1e-13, 1e-11);
        prop_assert!((k1 - integral).abs() <= 1e-8 * (1.0 + k1.abs()), "{} vs {}", k1, integral);
    }

    #[test]
    fn kernels_decay(p in preset_strategy()) {
        let (kernel, _) = preset(&p).unwrap();
        prop_assert!(kernel_eval(&kernel, 60.0).amax() <= 1e-6 * (1.0 + kernel_eval(&kernel, 0.0).amax()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn each_path_depends_only_on_its_index(seed in any::<u64>(), paths in 1usize..130) {
        let (k, n) = preset(&Preset::M1 { gamma_1: 1.0, gamma_2: 2.0, beta: 1.0 }).unwrap();
        let sys = build_markovian_system(&GLEModel::free_particle(1, 1.0, k, n)).unwrap();
        let cfg = SimConfig::new(0.5, 0.05, seed, paths);
        let all = simulate_sde(&sys, &cfg).unwrap();
        prop_assert_eq!(all.len(), paths);
        let last = paths - 1;
        prop_assert_eq!(&all[last], &simulate_path(&sys, &cfg, last).unwrap());
        // adding paths leaves earlier ones untouched
        let more = simulate_sde(&sys, &SimConfig::new(0.5, 0.05, seed, paths + 7)).unwrap();
        prop_assert_eq!(&more[..paths], &all[..]);
    }
}
