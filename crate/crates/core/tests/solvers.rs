use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use trust_core::sensing::{generate_ksparse, OperatorKind, SensingOperator, ValueDist};
use trust_core::solvers::{
    estimate_operator, fista, ista, objective, omp, shrink, RecoveryResult, SolverConfig, StepRule,
};
use trust_core::Error;

fn gaussian_matrix(m: usize, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m * n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) / (m as f64).sqrt())
        .collect()
}

/// Least squares on a fixed support via normal equations and Gauss-Jordan
/// elimination with partial pivoting.
fn support_least_squares(a: &[f64], m: usize, n: usize, support: &[usize], y: &[f64]) -> Vec<f64> {
    let s = support.len();
    let mut aug = vec![0.0; s * (s + 1)];
    for (i, &ci) in support.iter().enumerate() {
        for (j, &cj) in support.iter().enumerate() {
            aug[i * (s + 1) + j] = (0..m).map(|r| a[r * n + ci] * a[r * n + cj]).sum();
        }
        aug[i * (s + 1) + s] = (0..m).map(|r| a[r * n + ci] * y[r]).sum();
    }
    for col in 0..s {
        let piv = (col..s)
            .max_by(|&p, &q| aug[p * (s + 1) + col].abs().total_cmp(&aug[q * (s + 1) + col].abs()))
            .unwrap();
        for c in 0..=s {
            aug.swap(col * (s + 1) + c, piv * (s + 1) + c);
        }
        let d = aug[col * (s + 1) + col];
        for c in 0..=s {
            aug[col * (s + 1) + c] /= d;
        }
        for r in 0..s {
            if r != col {
                let f = aug[r * (s + 1) + col];
                for c in 0..=s {
                    aug[r * (s + 1) + c] -= f * aug[col * (s + 1) + c];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for (i, &ci) in support.iter().enumerate() {
        x[ci] = aug[i * (s + 1) + s];
    }
    x
}

#[test]
fn omp_identity_dictionary_is_exact() {
    let a = SensingOperator::identity(10);
    let mut y = vec![0.0; 10];
    y[1] = 3.0;
    y[4] = -2.0;
    y[8] = 0.5;
    let cfg = SolverConfig {
        sparsity_budget: 3,
        ..SolverConfig::default()
    };
    let r = omp(&a, &y, &cfg).unwrap();
    assert_eq!(r.iterations_used, 3);
    assert!(r.estimate.iter().zip(&y).all(|(p, q)| (p - q).abs() < 1e-14));
    assert_eq!(r.support, vec![1, 4, 8]);
    assert!(r.final_residual().unwrap() < 1e-14);
    assert!(r.converged);
}

#[test]
fn omp_zero_observation_stops_immediately() {
    let a = SensingOperator::sample(OperatorKind::GaussianFat, 8, 16, 1).unwrap();
    let r = omp(&a, &[0.0; 8], &SolverConfig::default()).unwrap();
    assert_eq!(r.iterations_used, 0);
    assert!(r.residual_norm_history.is_empty());
    assert!(r.estimate.iter().all(|v| *v == 0.0));
    assert!(r.converged);
}

#[test]
fn omp_breaks_ties_by_lowest_index() {
    let a = SensingOperator::identity(4);
    let cfg = SolverConfig {
        sparsity_budget: 1,
        ..SolverConfig::default()
    };
    let r = omp(&a, &[0.0, 1.0, 1.0, -1.0], &cfg).unwrap();
    assert_eq!(r.support, vec![1]);
}

#[test]
fn omp_flags_rank_deficient_refits() {
    // columns 0 and 1 are parallel up to 1e-13
    let a = SensingOperator::from_dense(2, 2, vec![1.0, 1.0, 0.0, 1e-13], 0).unwrap();
    let cfg = SolverConfig {
        sparsity_budget: 2,
        residual_tolerance: 0.0,
        ..SolverConfig::default()
    };
    let r = omp(&a, &[1.0, 1.0], &cfg).unwrap();
    assert_eq!(r.support.len(), 2);
    assert!(r.rank_deficient);
    assert!(r.estimate.iter().all(|v| v.is_finite()));
}

#[test]
fn omp_recovers_gaussian_sparse_signals() {
    let (m, n, k) = (64, 128, 5);
    let mut successes = 0;
    for trial in 0..200u64 {
        let data = gaussian_matrix(m, n, 10_000 + trial);
        let a = SensingOperator::from_dense(m, n, data.clone(), trial).unwrap();
        let x = generate_ksparse(n, k, trial, ValueDist::Gaussian, false).unwrap();
        let y = a.apply(&x.to_dense()).unwrap();
        let cfg = SolverConfig {
            sparsity_budget: k,
            residual_tolerance: 1e-10,
            ..SolverConfig::default()
        };
        let r = omp(&a, &y, &cfg).unwrap();
        let mut found = r.support.clone();
        found.sort_unstable();
        if found != x.support {
            continue;
        }
        let oracle = support_least_squares(&data, m, n, &x.support, &y);
        if r.estimate.iter().zip(&oracle).all(|(p, q)| (p - q).abs() < 1e-8) {
            successes += 1;
        }
    }
    assert!(successes >= 190, "{successes}/200 recoveries");
}

#[test]
fn ista_scalar_soft_threshold() {
    let a = SensingOperator::from_dense(1, 1, vec![1.0], 0).unwrap();
    let cfg = SolverConfig {
        lambda: Some(1.0),
        residual_tolerance: 1e-14,
        ..SolverConfig::default()
    };
    for r in [ista(&a, &[3.0], &cfg).unwrap(), fista(&a, &[3.0], &cfg).unwrap()] {
        assert!((r.estimate[0] - 2.0).abs() < 1e-12);
        assert!(r.converged);
    }
}

#[test]
fn unregularized_orthonormal_problem_returns_adjoint() {
    let a = SensingOperator::sample(OperatorKind::OrthonormalSquare, 16, 16, 8).unwrap();
    let y: Vec<f64> = gaussian_matrix(1, 16, 3);
    let target = a.adjoint(&y).unwrap();
    let cfg = SolverConfig {
        lambda: Some(0.0),
        residual_tolerance: 1e-14,
        max_iterations: 1000,
        ..SolverConfig::default()
    };
    for r in [ista(&a, &y, &cfg).unwrap(), fista(&a, &y, &cfg).unwrap()] {
        assert!(r.estimate.iter().zip(&target).all(|(p, q)| (p - q).abs() < 1e-10));
    }
}

fn random_problem(seed: u64) -> (SensingOperator, Vec<f64>) {
    let a = SensingOperator::from_dense(32, 64, gaussian_matrix(32, 64, seed), seed).unwrap();
    let x = generate_ksparse(64, 6, seed, ValueDist::Gaussian, false).unwrap();
    let y = a.apply(&x.to_dense()).unwrap();
    (a, y)
}

fn first_within(history: &[f64], target: f64) -> Option<usize> {
    history.iter().position(|f| *f <= target).map(|i| i + 1)
}

#[test]
fn fista_reaches_optimum_before_ista() {
    let (a, y) = random_problem(21);
    let long = SolverConfig {
        max_iterations: 100_000,
        residual_tolerance: 0.0,
        ..SolverConfig::default()
    };
    let f_star = *ista(&a, &y, &long).unwrap().objective_history.last().unwrap();
    let ista_hist = ista(&a, &y, &long).unwrap().objective_history;
    let fista_hist = fista(&a, &y, &long).unwrap().objective_history;
    let ista_iters = first_within(&ista_hist, f_star + 1e-6).unwrap();
    let fista_iters = first_within(&fista_hist, f_star + 1e-6).expect("fista reaches F* + 1e-6");
    assert!(fista_iters < ista_iters, "fista {fista_iters} vs ista {ista_iters}");
}

#[test]
fn ista_objective_never_increases() {
    for seed in 0..5 {
        let (a, y) = random_problem(seed);
        let cfg = SolverConfig {
            max_iterations: 2000,
            residual_tolerance: 0.0,
            ..SolverConfig::default()
        };
        let r = ista(&a, &y, &cfg).unwrap();
        assert_eq!(r.objective_history.len(), r.iterations_used);
        assert_eq!(r.residual_norm_history.len(), r.iterations_used);
        for w in r.objective_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
        let lambda = trust_core::solvers::default_lambda(&a, &y).unwrap();
        let direct = objective(&a, &y, &r.estimate, lambda).unwrap();
        assert!((direct - r.objective_history.last().unwrap()).abs() < 1e-12 * direct.max(1.0));
    }
}

#[test]
fn fista_beats_ista_at_equal_budget_for_most_seeds() {
    let wins = (0..50u64)
        .filter(|&seed| {
            let (a, y) = random_problem(500 + seed);
            let cfg = SolverConfig {
                max_iterations: 200,
                residual_tolerance: 0.0,
                ..SolverConfig::default()
            };
            let fi = fista(&a, &y, &cfg).unwrap().objective_history;
            let is = ista(&a, &y, &cfg).unwrap().objective_history;
            fi.last().unwrap() <= is.last().unwrap()
        })
        .count();
    assert!(wins > 25, "fista won {wins}/50");
}

#[test]
fn fixed_step_is_honored() {
    let a = SensingOperator::from_dense(1, 1, vec![1.0], 0).unwrap();
    let cfg = SolverConfig {
        lambda: Some(0.0),
        step_rule: StepRule::Fixed(0.5),
        max_iterations: 1,
        ..SolverConfig::default()
    };
    let r = ista(&a, &[4.0], &cfg).unwrap();
    assert!((r.estimate[0] - 2.0).abs() < 1e-15);
}

#[test]
fn operator_estimation_recovers_exact_operator() {
    let (m, n) = (6, 10);
    let truth = gaussian_matrix(m, n, 4);
    let a = SensingOperator::from_dense(m, n, truth.clone(), 0).unwrap();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..20)
        .map(|i| {
            let x = gaussian_matrix(1, n, 100 + i);
            let y = a.apply(&x).unwrap();
            (x, y)
        })
        .collect();
    let est = estimate_operator(&pairs, Some(0.0)).unwrap();
    let diff: f64 = est.to_dense().iter().zip(&truth).map(|(p, q)| (p - q).powi(2)).sum();
    let scale: f64 = truth.iter().map(|v| v * v).sum();
    assert!((diff / scale).sqrt() < 1e-8);
}

#[test]
fn single_pair_estimate_matches_rank_one_formula() {
    let x = vec![1.0, -2.0, 0.5];
    let y = vec![3.0, 1.0];
    let ridge = 1e-3;
    let est = estimate_operator(&[(x.clone(), y.clone())], Some(ridge))
        .unwrap()
        .to_dense();
    let nx: f64 = x.iter().map(|v| v * v).sum();
    for i in 0..2 {
        for j in 0..3 {
            let oracle = y[i] * x[j] / (nx + ridge);
            assert!((est[i * 3 + j] - oracle).abs() < 1e-12);
        }
    }
    // as ridge → 0 the estimate reproduces the pair
    let tiny = estimate_operator(&[(x.clone(), y.clone())], Some(1e-9)).unwrap();
    let yy = tiny.apply(&x).unwrap();
    assert!(yy.iter().zip(&y).all(|(p, q)| (p - q).abs() < 1e-8));
}

#[test]
fn noisy_estimate_fits_no_worse_than_truth() {
    let (m, n) = (5, 8);
    let a = SensingOperator::from_dense(m, n, gaussian_matrix(m, n, 9), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..30)
        .map(|i| {
            let x = gaussian_matrix(1, n, 300 + i);
            let y = a
                .apply(&x)
                .unwrap()
                .into_iter()
                .map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            (x, y)
        })
        .collect();
    let est = estimate_operator(&pairs, Some(0.0)).unwrap();
    let loss = |op: &SensingOperator| -> f64 {
        pairs
            .iter()
            .map(|(x, y)| {
                op.apply(x)
                    .unwrap()
                    .iter()
                    .zip(y)
                    .map(|(p, q)| (p - q).powi(2))
                    .sum::<f64>()
            })
            .sum()
    };
    assert!(loss(&est) <= loss(&a));
}

#[test]
fn underdetermined_unregularized_estimate_is_singular() {
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..3).map(|i| (gaussian_matrix(1, 10, i), vec![1.0, 2.0])).collect();
    assert!(matches!(estimate_operator(&pairs, Some(0.0)), Err(Error::Singular(_))));
    assert!(estimate_operator(&pairs, None).is_ok());
    assert!(matches!(estimate_operator(&[], None), Err(Error::Parameter(_))));
}

#[test]
fn result_export_writes_summary_and_blob() {
    let dir = tempfile::tempdir().unwrap();
    let r = RecoveryResult {
        estimate: vec![1.5, -2.0],
        support: vec![0, 1],
        residual_norm_history: vec![0.5, 0.25],
        objective_history: vec![],
        iterations_used: 2,
        converged: true,
        rank_deficient: false,
    };
    let path = dir.path().join("omp.json");
    r.save(&path).unwrap();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(json["iterations"], 2);
    assert_eq!(json["final_residual"], 0.25);
    assert_eq!(json["support"], serde_json::json!([0, 1]));
    let blob = std::fs::read(dir.path().join("omp.bin")).unwrap();
    let back: Vec<f64> = blob
        .chunks(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(back, r.estimate);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn omp_residuals_strictly_decrease_without_repeats(seed in 0u64..5_000) {
        let a = SensingOperator::from_dense(20, 40, gaussian_matrix(20, 40, seed), 0).unwrap();
        let x = generate_ksparse(40, 4, seed, ValueDist::Gaussian, false).unwrap();
        let y = a.apply(&x.to_dense()).unwrap();
        let cfg = SolverConfig { sparsity_budget: 8, residual_tolerance: 1e-12, ..SolverConfig::default() };
        let r = omp(&a, &y, &cfg).unwrap();
        prop_assert_eq!(r.residual_norm_history.len(), r.iterations_used);
        let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(r.residual_norm_history[0] < y_norm);
        for w in r.residual_norm_history.windows(2) {
            prop_assert!(w[1] < w[0]);
        }
        let mut s = r.support.clone();
        s.sort_unstable();
        s.dedup();
        prop_assert_eq!(s.len(), r.support.len());
    }

    #[test]
    fn shrink_is_odd_and_identity_at_zero(v in -100.0f64..100.0, t in 0.0f64..10.0) {
        prop_assert_eq!(shrink(v, 0.0), v);
        prop_assert_eq!(shrink(-v, t), -shrink(v, t));
        prop_assert!(shrink(v, t).abs() <= v.abs());
    }
}
