use lvggm::consistency::{algebraic_consistency, kl_gaussian};
use lvggm::fisher::FisherOperator;
use lvggm::geometry::{
    project_support, project_tangent, rho, xi_bracket_seeded, RankTangentSpace, SupportSpace,
};
use lvggm::harness::{ingest_reader, matrix_csv, IngestMode};
use lvggm::lvmodel::{build_cycle_model, marginalize, LatentVariableModel};
use lvggm::matrix::{inverse, mvn_sample, psd_inverse, sym_eig, default_inverse_eps};
use lvggm::solver::{fit_matrix, kkt_residual, logdet_prox, psd_trace_prox, soft_threshold, SolverConfig};
use lvggm::SymMatrix;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn random_sym(p: usize, seed: u64) -> SymMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gaussian(p, p, &mut rng);
    SymMatrix::from_fn(p, |i, j| 0.5 * (g[(i, j)] + g[(j, i)]))
}

fn random_spd(p: usize, seed: u64, floor: f64) -> SymMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = gaussian(p, p, &mut rng);
    let m = &b * b.transpose() / p as f64;
    SymMatrix::from_fn(p, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]) + if i == j { floor } else { 0.0 })
}

fn random_space(p: usize, r: usize, seed: u64) -> RankTangentSpace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RankTangentSpace::from_span(&gaussian(p, r, &mut rng)).unwrap()
}

fn random_support(p: usize, density: f64, seed: u64) -> SupportSpace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; p * p];
    for i in 0..p {
        mask[i * p + i] = true;
        for j in (i + 1)..p {
            let on = rng.random::<f64>() < density;
            mask[i * p + j] = on;
            mask[j * p + i] = on;
        }
    }
    SupportSpace::new(p, mask).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn spectral_reconstruction(p in 1usize..=40, seed in any::<u64>()) {
        let a = random_sym(p, seed);
        let e = sym_eig(&a).unwrap();
        let err = e.reconstruct().sub(&a).spectral_norm();
        prop_assert!(err <= 1e-9 * a.spectral_norm().max(f64::MIN_POSITIVE), "err {err}");
        prop_assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn inverse_roundtrip(p in 1usize..=20, seed in any::<u64>()) {
        let a = random_spd(p, seed, 0.1);
        let inv = psd_inverse(&a, default_inverse_eps(&a)).unwrap();
        let back = psd_inverse(&inv, default_inverse_eps(&inv)).unwrap();
        prop_assert!(back.sub(&a).frobenius() <= 1e-8 * a.frobenius());
    }

    #[test]
    fn sampling_is_bit_identical_per_seed(p in 1usize..=6, n in 0usize..200, seed in any::<u64>()) {
        let c = random_spd(p, seed ^ 0x5a5a, 0.2);
        prop_assert_eq!(mvn_sample(&c, n, seed).unwrap(), mvn_sample(&c, n, seed).unwrap());
    }

    #[test]
    fn schur_complement_matches_joint_inverse(p in 3usize..=16, h in 0usize..=3, seed in 0u64..10_000) {
        let model = build_cycle_model(p, h, 0.25, 0.8, None, seed).unwrap();
        let d = marginalize(&model).unwrap();
        prop_assert!(d.k_marg.sub(&d.s_true.sub(&d.l_true)).max_abs() <= 1e-10);
        let joint = inverse(model.k_full()).unwrap();
        let block = SymMatrix::from_fn(p, |i, j| joint.get(model.observed()[i], model.observed()[j]));
        prop_assert!(block.sub(&d.sigma_marg).frobenius() <= 1e-8 * block.frobenius());
        prop_assert_eq!(d.latent_rank(), h);
        prop_assert!(d.l_true.min_eigenvalue() >= -1e-10);
    }

    #[test]
    fn model_json_roundtrip(p in 3usize..=10, h in 0usize..=2, seed in 0u64..1000) {
        let model = build_cycle_model(p, h, 0.25, 0.8, None, seed).unwrap();
        let back = LatentVariableModel::from_json(&model.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.k_full(), model.k_full());
    }

    #[test]
    fn projection_identities(p in 2usize..=12, r in 1usize..=3, seed in any::<u64>()) {
        let r = r.min(p);
        let t = random_space(p, r, seed);
        let omega = random_support(p, 0.3, seed);
        let m = random_sym(p, seed.wrapping_add(1));
        let pt = project_tangent(&t, &m, false).unwrap();
        let ptt = project_tangent(&t, &pt, false).unwrap();
        prop_assert!(ptt.sub(&pt).max_abs() <= 1e-10 * m.max_abs().max(1.0));
        let norm = m.spectral_norm();
        prop_assert!(pt.spectral_norm() <= 2.0 * norm * (1.0 + 1e-10));
        prop_assert!(project_tangent(&t, &m, true).unwrap().spectral_norm() <= norm * (1.0 + 1e-10));
        let ps = project_support(&omega, &m).unwrap();
        prop_assert!(ps.max_abs() <= m.max_abs());
        prop_assert_eq!(project_support(&omega, &ps).unwrap(), ps);
    }

    #[test]
    fn xi_changes_slowly_with_twisting(p in 4usize..=12, r in 1usize..=2, angle in 0.01f64..0.3, seed in any::<u64>()) {
        let t1 = random_space(p, r, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let u = t1.basis().clone();
        let w = gaussian(p, r, &mut rng);
        let w = &w - &u * (u.transpose() * &w);
        let t2 = RankTangentSpace::from_span(&(&u + w * angle)).unwrap();
        let rho = rho(&t1, &t2, 0).unwrap().certified_upper;
        prop_assume!(rho < 1.0);
        let xi1 = xi_bracket_seeded(&t1, 8, seed);
        let xi2 = xi_bracket_seeded(&t2, 8, seed);
        prop_assert!(xi2.lower <= (xi1.upper + rho) / (1.0 - rho) + 1e-9,
            "xi2 {} vs bound {}", xi2.lower, (xi1.upper + rho) / (1.0 - rho));
    }

    #[test]
    fn fisher_operator_is_self_adjoint(p in 1usize..=10, seed in any::<u64>()) {
        let op = FisherOperator::new(random_spd(p, seed, 0.3)).unwrap();
        let m = random_sym(p, seed.wrapping_add(1));
        let n = random_sym(p, seed.wrapping_add(2));
        let lhs = op.apply(&m).inner(&n);
        let rhs = m.inner(&op.apply(&n));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn soft_threshold_variational_inequality(p in 1usize..=8, t in 0.01f64..2.0, seed in any::<u64>()) {
        let m = random_sym(p, seed);
        let x = soft_threshold(&m, t).unwrap();
        for i in 0..p {
            for j in 0..p {
                let (r, v) = (m.get(i, j) - x.get(i, j), x.get(i, j));
                if v != 0.0 {
                    prop_assert!((r - t * v.signum()).abs() <= 1e-8);
                } else {
                    prop_assert!(r.abs() <= t + 1e-8);
                }
            }
        }
    }

    #[test]
    fn psd_trace_prox_variational_inequality(p in 1usize..=8, t in 0.01f64..2.0, seed in any::<u64>()) {
        let m = random_sym(p, seed);
        let x = psd_trace_prox(&m, t).unwrap();
        prop_assert!(x.min_eigenvalue() >= -1e-10);
        // (M - X) - t I lies in the normal cone of the PSD cone at X.
        let g = m.sub(&x).sub(&SymMatrix::identity(p).scale(t));
        prop_assert!(g.max_eigenvalue() <= 1e-8);
        prop_assert!(g.inner(&x).abs() <= 1e-8 * x.frobenius().max(1.0));
        let y = random_spd(p, seed ^ 7, 0.0);
        // Variational inequality against an arbitrary feasible point.
        prop_assert!(g.inner(&y.sub(&x)) <= 1e-8 * (1.0 + y.frobenius()));
    }

    #[test]
    fn logdet_prox_stationarity(p in 1usize..=8, t in 0.05f64..2.0, seed in any::<u64>()) {
        let z = random_sym(p, seed);
        let sigma = random_spd(p, seed ^ 3, 0.1);
        let r = logdet_prox(&z, &sigma, t).unwrap();
        prop_assert!(r.min_eigenvalue() > 0.0);
        // t (Sigma - R^{-1}) + R - Z = 0
        let resid = sigma.sub(&inverse(&r).unwrap()).scale(t).add(&r).sub(&z);
        prop_assert!(resid.max_abs() <= 1e-8 * (1.0 + z.max_abs()));
    }

    #[test]
    fn kl_is_nonnegative(p in 1usize..=6, seed in any::<u64>()) {
        let a = random_spd(p, seed, 0.05);
        let b = random_spd(p, seed ^ 11, 0.05);
        prop_assert!(kl_gaussian(&a, &b).unwrap() >= -1e-10);
        prop_assert!(kl_gaussian(&a, &a).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn ingestion_roundtrip(p in 1usize..=12, seed in any::<u64>()) {
        let c = random_spd(p, seed, 0.01);
        let ing = ingest_reader(matrix_csv(&c, None).as_bytes(), IngestMode::Covariance, Some(3)).unwrap();
        prop_assert!(ing.covariance.sigma_n.sub(&c).max_abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn converged_fits_are_feasible_and_certified(p in 2usize..=8, seed in any::<u64>(), lambda in 0.02f64..0.3, gamma in 0.1f64..1.0) {
        let sigma = random_spd(p, seed, 0.2);
        let cfg = SolverConfig::new(lambda, gamma);
        let est = fit_matrix(&sigma, &cfg).unwrap();
        prop_assume!(est.converged);
        prop_assert!(est.primal_residual <= cfg.tol_primal && est.dual_residual <= cfg.tol_dual);
        let kkt = kkt_residual(&est.s, &est.l, &sigma, lambda, gamma).unwrap();
        prop_assert!(kkt.max() <= 10.0 * cfg.tol_primal.max(cfg.tol_dual), "kkt {:?}", kkt);
        prop_assert!(est.concentration().min_eigenvalue() >= -1e-10);
        prop_assert!(est.l.min_eigenvalue() >= -1e-10);
    }

    #[test]
    fn verdict_composition_law(p in 4usize..=10, h in 0usize..=2, seed in 0u64..1000, n in 200usize..5000) {
        let truth = marginalize(&build_cycle_model(p, h, 0.25, 0.8, None, seed).unwrap()).unwrap();
        let sc = truth.sample_covariance(n, seed).unwrap();
        let est = lvggm::solver::fit(&sc, &SolverConfig::new(2.0 * (p as f64 / n as f64).sqrt(), 0.4)).unwrap();
        for tol in [est.support_threshold, 1e-3, 1e-1] {
            let v = algebraic_consistency(&est, &truth, tol, est.rank_threshold).unwrap();
            prop_assert_eq!(v.algebraically_consistent, v.sign_pattern_match && v.rank_match && v.realizable);
        }
    }
}
