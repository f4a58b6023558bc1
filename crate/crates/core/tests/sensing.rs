use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trust_core::sensing::{
    estimate_rip, for_each_combination, generate_ksparse, OperatorKind, RipMethod, SampleOptions, SensingOperator,
    ValueDist, DEFAULT_ENUMERATION_CAP,
};
use trust_core::Error;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Cyclic Jacobi eigenvalue iteration, independent of the library's solver.
fn jacobi_eigenvalues(n: usize, mut a: Vec<f64>) -> Vec<f64> {
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

#[test]
fn orthonormal_square_is_orthogonal() {
    let op = SensingOperator::sample(OperatorKind::OrthonormalSquare, 8, 8, 11).unwrap();
    let a = op.dense().unwrap();
    for i in 0..8 {
        for j in 0..8 {
            let g: f64 = (0..8).map(|r| a[r * 8 + i] * a[r * 8 + j]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((g - want).abs() < 1e-10);
        }
    }
    let tall = SensingOperator::sample(OperatorKind::TallOrthonormal, 12, 5, 2).unwrap();
    let a = tall.dense().unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let g: f64 = (0..12).map(|r| a[r * 5 + i] * a[r * 5 + j]).sum();
            assert!((g - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
        }
    }
}

#[test]
fn sampling_is_deterministic() {
    for kind in [
        OperatorKind::OrthonormalSquare,
        OperatorKind::GaussianFat,
        OperatorKind::FourierMasked,
    ] {
        let (m, n) = match kind {
            OperatorKind::OrthonormalSquare => (16, 16),
            _ => (8, 16),
        };
        let a = SensingOperator::sample(kind, m, n, 99).unwrap();
        let b = SensingOperator::sample(kind, m, n, 99).unwrap();
        let (da, db) = (a.to_dense(), b.to_dense());
        assert!(da.iter().zip(&db).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = SensingOperator::sample(kind, m, n, 100).unwrap();
        assert_ne!(a.to_dense(), c.to_dense());
    }
}

#[test]
fn column_normalized_gaussian_has_unit_columns() {
    let opts = SampleOptions {
        column_normalized: true,
    };
    let op = SensingOperator::sample_with(OperatorKind::GaussianFat, 32, 64, 5, opts).unwrap();
    assert!(op.column_normalized());
    for norm in op.column_norms() {
        assert!((norm - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gaussian_scaling_preserves_expected_energy() {
    // E‖Ax‖² = ‖x‖² with N(0, 1/m) entries
    let op = SensingOperator::sample(OperatorKind::GaussianFat, 200, 400, 8).unwrap();
    let mean_sq_norm: f64 = op.column_norms().iter().map(|c| c * c).sum::<f64>() / 400.0;
    assert!((mean_sq_norm - 1.0).abs() < 0.02, "{mean_sq_norm}");
}

#[test]
fn apply_examples() {
    let eye = SensingOperator::identity(5);
    let x = random_vec(5, 1);
    assert_eq!(eye.apply_noisy(&x, 0.0, 0).unwrap(), x);
    let op = SensingOperator::sample(OperatorKind::GaussianFat, 6, 10, 3).unwrap();
    assert_eq!(op.apply_noisy(&[0.0; 10], 0.0, 0).unwrap(), vec![0.0; 6]);

    // naive row-by-row oracle
    let x = random_vec(10, 2);
    let a = op.dense().unwrap();
    let y = op.apply(&x).unwrap();
    for (i, yi) in y.iter().enumerate() {
        let want: f64 = (0..10).map(|j| a[i * 10 + j] * x[j]).sum();
        assert!((yi - want).abs() < 1e-14);
    }
    assert!(matches!(op.apply(&x[..9]), Err(Error::Dimension { .. })));
    assert!(matches!(op.adjoint(&x), Err(Error::Dimension { .. })));
}

#[test]
fn noise_is_seeded_per_stream() {
    let op = SensingOperator::sample(OperatorKind::GaussianFat, 50, 80, 3).unwrap();
    let x = random_vec(80, 4);
    let clean = op.apply(&x).unwrap();
    let a = op.apply_noisy(&x, 0.1, 7).unwrap();
    let b = op.apply_noisy(&x, 0.1, 7).unwrap();
    let c = op.apply_noisy(&x, 0.1, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let resid: Vec<f64> = a.iter().zip(&clean).map(|(p, q)| p - q).collect();
    let sd = (dot(&resid, &resid) / 50.0).sqrt();
    assert!(sd > 0.05 && sd < 0.15, "{sd}");
    assert!(op.apply_noisy(&x, -1.0, 0).is_err());
}

#[test]
fn fourier_matches_dense_materialization() {
    // Oracle: entries of the unitary 2-D DFT written out directly.
    let op = SensingOperator::fourier(36, 0.3, 17).unwrap();
    let mask = op.mask().unwrap().clone();
    let (h, w) = (mask.height, mask.width);
    let n = h * w;
    let mut oracle = vec![0.0; op.rows() * n];
    for (j, &f) in mask.freqs.iter().enumerate() {
        let (u, v) = ((f / w) as f64, (f % w) as f64);
        for p in 0..n {
            let (a, b) = ((p / w) as f64, (p % w) as f64);
            let ang = 2.0 * PI * (u * a / h as f64 + v * b / w as f64);
            oracle[(2 * j) * n + p] = ang.cos() / (n as f64).sqrt();
            oracle[(2 * j + 1) * n + p] = -ang.sin() / (n as f64).sqrt();
        }
    }
    let x = random_vec(n, 5);
    let r = random_vec(op.rows(), 6);
    let y = op.apply(&x).unwrap();
    let z = op.adjoint(&r).unwrap();
    for i in 0..op.rows() {
        let want: f64 = (0..n).map(|p| oracle[i * n + p] * x[p]).sum();
        assert!((y[i] - want).abs() < 1e-12);
    }
    for p in 0..n {
        let want: f64 = (0..op.rows()).map(|i| oracle[i * n + p] * r[i]).sum();
        assert!((z[p] - want).abs() < 1e-12);
    }
    assert!((dot(&y, &r) - dot(&x, &z)).abs() < 1e-10);
}

#[test]
fn full_fourier_is_an_isometry() {
    let op = SensingOperator::fourier(16, 1.0, 1).unwrap();
    let x = random_vec(16, 9);
    let y = op.apply(&x).unwrap();
    assert!((dot(&y, &y) - dot(&x, &x)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn adjoint_identity_for_every_kind(seed in 0u64..500, kind_ix in 0usize..5) {
        let op = match kind_ix {
            0 => SensingOperator::sample(OperatorKind::OrthonormalSquare, 9, 9, seed).unwrap(),
            1 => SensingOperator::sample(OperatorKind::TallOrthonormal, 12, 7, seed).unwrap(),
            2 => SensingOperator::sample(OperatorKind::GaussianFat, 5, 11, seed).unwrap(),
            3 => SensingOperator::fourier(25, 0.4, seed).unwrap(),
            _ => SensingOperator::identity(6),
        };
        let x = random_vec(op.cols(), seed + 1);
        let r = random_vec(op.rows(), seed + 2);
        let lhs = dot(&op.apply(&x).unwrap(), &r);
        let rhs = dot(&x, &op.adjoint(&r).unwrap());
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }
}

#[test]
fn rip_of_orthonormal_columns_is_zero() {
    let op = SensingOperator::sample(OperatorKind::OrthonormalSquare, 8, 8, 4).unwrap();
    for k in 1..=3 {
        let est = estimate_rip(&op, k, RipMethod::ExactEnumeration, 0, DEFAULT_ENUMERATION_CAP).unwrap();
        assert!(est.delta < 1e-10, "k={k}: {}", est.delta);
        assert!(!est.lower_bound);
    }
    let tall = SensingOperator::sample(OperatorKind::TallOrthonormal, 10, 6, 4).unwrap();
    let est = estimate_rip(&tall, 2, RipMethod::ExactEnumeration, 0, DEFAULT_ENUMERATION_CAP).unwrap();
    assert!(est.delta < 1e-10);
}

#[test]
fn exact_rip_matches_per_support_eigen_oracle() {
    let op = SensingOperator::sample(OperatorKind::GaussianFat, 8, 12, 2024).unwrap();
    let a = op.dense().unwrap();
    let mut oracle = 0.0f64;
    let mut supports = 0;
    for_each_combination(12, 4, |s| {
        supports += 1;
        let mut g = vec![0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                g[i * 4 + j] = (0..8).map(|r| a[r * 12 + s[i]] * a[r * 12 + s[j]]).sum();
            }
        }
        for l in jacobi_eigenvalues(4, g) {
            oracle = oracle.max((l - 1.0).abs());
        }
    });
    assert_eq!(supports, 495);
    let est = estimate_rip(&op, 2, RipMethod::ExactEnumeration, 0, DEFAULT_ENUMERATION_CAP).unwrap();
    assert_eq!(est.count, 495);
    assert_eq!(est.order, 4);
    assert!((est.delta - oracle).abs() < 1e-10, "{} vs {oracle}", est.delta);

    let mc = estimate_rip(&op, 2, RipMethod::MonteCarlo, 5000, DEFAULT_ENUMERATION_CAP).unwrap();
    assert!(mc.lower_bound);
    assert!(mc.delta <= est.delta + 1e-12);
}

#[test]
fn rip_sandwich_is_tight_on_the_worst_support() {
    let op = SensingOperator::sample(OperatorKind::GaussianFat, 8, 12, 77).unwrap();
    let est = estimate_rip(&op, 2, RipMethod::ExactEnumeration, 0, DEFAULT_ENUMERATION_CAP).unwrap();
    let delta = est.delta;
    // random unit vectors on every support stay inside the sandwich
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for_each_combination(12, 4, |s| {
        let mut z = vec![0.0; 12];
        for &i in s {
            z[i] = rng.random_range(-1.0..1.0);
        }
        let nz = dot(&z, &z).sqrt();
        z.iter_mut().for_each(|v| *v /= nz);
        let e = dot(&op.apply(&z).unwrap(), &op.apply(&z).unwrap());
        assert!(e >= 1.0 - delta - 1e-12 && e <= 1.0 + delta + 1e-12);
    });
    // equality is attained by an extreme eigenvector of the worst support
    let s = &est.worst_support;
    let cols = op.columns(s);
    let gram: Vec<f64> = (0..16)
        .map(|ij| (0..8).map(|r| cols[r * 4 + ij / 4] * cols[r * 4 + ij % 4]).sum())
        .collect();
    let eig = nalgebra::DMatrix::from_row_slice(4, 4, &gram).symmetric_eigen();
    let (ix, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| (a.1 - 1.0).abs().total_cmp(&(b.1 - 1.0).abs()))
        .unwrap();
    let mut z = vec![0.0; 12];
    for (j, &c) in s.iter().enumerate() {
        z[c] = eig.eigenvectors[(j, ix)];
    }
    let az = op.apply(&z).unwrap();
    assert!(((dot(&az, &az) - 1.0).abs() - delta).abs() < 1e-10);
}

#[test]
fn enumeration_beyond_cap_is_refused() {
    let op = SensingOperator::sample(OperatorKind::GaussianFat, 32, 64, 1).unwrap();
    let err = estimate_rip(&op, 5, RipMethod::ExactEnumeration, 0, DEFAULT_ENUMERATION_CAP).unwrap_err();
    assert!(matches!(err, Error::EnumerationCap { .. }), "{err}");
    let mc = estimate_rip(&op, 5, RipMethod::MonteCarlo, 200, DEFAULT_ENUMERATION_CAP).unwrap();
    assert!(mc.lower_bound && mc.delta > 0.0);
}

#[test]
fn ksparse_examples() {
    let x = generate_ksparse(10, 0, 1, ValueDist::Gaussian, true).unwrap();
    assert!(x.to_dense().iter().all(|v| *v == 0.0));
    let x = generate_ksparse(50, 7, 2, ValueDist::Gaussian, true).unwrap();
    assert!((x.norm() - 1.0).abs() < 1e-12);
    assert_eq!(x.k(), 7);
    assert!(x.support.windows(2).all(|w| w[0] < w[1]));
    assert!(x.support.iter().all(|&i| i < 50));
    let dense = x.to_dense();
    assert_eq!(dense.iter().filter(|v| **v != 0.0).count(), 7);
    assert!(matches!(
        generate_ksparse(3, 4, 0, ValueDist::Sign, false),
        Err(Error::Parameter(_))
    ));
    let u = generate_ksparse(20, 5, 3, ValueDist::Uniform { low: 0.5, high: 1.0 }, false).unwrap();
    assert!(u.values.iter().all(|v| (0.5..1.0).contains(v)));
}

#[test]
fn support_is_uniform() {
    // 1e5 draws of 3-of-10 supports; each index appears with p = 0.3
    let (n, k, draws) = (10usize, 3usize, 100_000u64);
    let mut counts = vec![0u64; n];
    for seed in 0..draws {
        for i in generate_ksparse(n, k, seed, ValueDist::Sign, false).unwrap().support {
            counts[i] += 1;
        }
    }
    let p = k as f64 / n as f64;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - mean).abs() < 3.0 * sd, "{c} vs {mean} ± {sd}");
    }
}

#[test]
fn operator_serialization_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for op in [
        SensingOperator::sample(OperatorKind::GaussianFat, 6, 9, 3).unwrap(),
        SensingOperator::fourier(16, 0.5, 4).unwrap(),
        SensingOperator::identity(4),
    ] {
        let path = dir.path().join(format!("{}.json", op.kind().name()));
        op.save(&path).unwrap();
        let back = SensingOperator::load(&path).unwrap();
        assert_eq!(back, op);
        let header: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(header["m"], op.rows());
        assert_eq!(header["kind"], op.kind().name());
    }
    // truncated blob
    let op = SensingOperator::sample(OperatorKind::GaussianFat, 6, 9, 3).unwrap();
    let path = dir.path().join("trunc.json");
    op.save(&path).unwrap();
    let blob = dir.path().join("trunc.json.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(SensingOperator::load(&path), Err(Error::Load(_))));
}
