use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trust_core::metrics::{
    fpr, mae, mse, psnr, rmse, ssim, ssim_tape, FprThresholds, ImageMetrics, MeanStd, MetricReport, SsimParams,
};
use trust_core::tensor::{gradcheck, Tensor};
use trust_core::Error;

fn field(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

#[test]
fn identical_images_have_zero_error() {
    let x = field(64, 1);
    assert_eq!(mse(&x, &x).unwrap(), 0.0);
    assert_eq!(mae(&x, &x).unwrap(), 0.0);
    assert_eq!(rmse(&x, &x).unwrap(), 0.0);
    assert_eq!(fpr(&x, &x, FprThresholds::default()).unwrap(), 0.0);
}

#[test]
fn constant_offset() {
    let x = field(100, 2);
    let y: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
    assert!((mae(&y, &x).unwrap() - 0.1).abs() < 1e-12);
    assert!((rmse(&y, &x).unwrap() - 0.1).abs() < 1e-12);
    assert!((mse(&y, &x).unwrap() - 0.01).abs() < 1e-12);
}

#[test]
fn errors_match_naive_loops() {
    let (h, w) = (9, 11);
    let (a, b) = (field(h * w, 3), field(h * w, 4));
    let (mut s2, mut s1) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let d = a[i * w + j] - b[i * w + j];
            s2 += d * d;
            s1 += d.abs();
        }
    }
    let n = (h * w) as f64;
    assert!((mse(&a, &b).unwrap() - s2 / n).abs() < 1e-14);
    assert!((mae(&a, &b).unwrap() - s1 / n).abs() < 1e-14);
    assert!((rmse(&a, &b).unwrap() - (s2 / n).sqrt()).abs() < 1e-14);
}

#[test]
fn shape_mismatch_is_a_dimension_error() {
    assert!(matches!(mse(&[1.0, 2.0], &[1.0]), Err(Error::Dimension { .. })));
    assert!(matches!(
        ssim(&[0.0; 64], &[0.0; 64], 8, 4, SsimParams::default()),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn psnr_examples() {
    let x = vec![0.0; 100];
    let off = |d: f64| x.iter().map(|v| v + d).collect::<Vec<_>>();
    assert!((psnr(&off(0.1), &x, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert!((psnr(&off(0.01), &x, 1.0).unwrap() - 40.0).abs() < 1e-9);
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), 240.0);
}

#[test]
fn ssim_examples() {
    let x = field(16 * 16, 5);
    assert!((ssim(&x, &x, 16, 16, SsimParams::default()).unwrap() - 1.0).abs() < 1e-9);
    let c = vec![0.4; 100];
    let c2: Vec<f64> = c.iter().map(|v| v + 1e-6).collect();
    assert!(ssim(&c, &c2, 10, 10, SsimParams::default()).unwrap() > 0.999);
    let too_big = SsimParams {
        window: 11,
        ..SsimParams::default()
    };
    assert!(matches!(ssim(&c, &c2, 10, 10, too_big), Err(Error::Parameter(_))));
}

#[test]
fn tape_ssim_matches_plain_ssim() {
    let (a, b) = (field(12 * 12, 6), field(12 * 12, 7));
    let mut tape = trust_core::tensor::Tape::new();
    let va = tape.leaf(&Tensor::new([1, 12, 12], a.clone()).unwrap());
    let vb = tape.leaf(&Tensor::new([1, 12, 12], b.clone()).unwrap());
    let s = ssim_tape(&mut tape, va, vb, SsimParams::default()).unwrap();
    let plain = ssim(&a, &b, 12, 12, SsimParams::default()).unwrap();
    assert!((tape.scalar(s) - plain).abs() < 1e-12);
}

#[test]
fn ssim_loss_gradient_matches_finite_differences() {
    let pred = Tensor::new([1, 9, 9], field(81, 8)).unwrap().with_grad();
    let truth = Tensor::new([1, 9, 9], field(81, 9)).unwrap();
    let report = gradcheck::check(&[pred, truth], gradcheck::STEP, |tape, v| {
        let s = ssim_tape(tape, v[0], v[1], SsimParams::default())?;
        let neg = tape.scalar_mul(s, -1.0);
        Ok(tape.add_scalar(neg, 1.0))
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn fpr_counts_hallucinated_pixels() {
    let truth = vec![0.0; 100];
    let mut pred = vec![0.0; 100];
    for i in [3, 17, 29, 44, 58, 71, 99] {
        pred[i] = 0.9;
    }
    assert!((fpr(&pred, &truth, FprThresholds::default()).unwrap() - 0.07).abs() < 1e-15);
}

#[test]
fn fpr_matches_naive_count() {
    let (h, w) = (13, 7);
    let thresholds = FprThresholds::new(0.6, 0.3).unwrap();
    for seed in 0..20 {
        let (p, t) = (field(h * w, seed), field(h * w, 100 + seed));
        let mut count = 0usize;
        for i in 0..h {
            for j in 0..w {
                if p[i * w + j] > 0.6 && t[i * w + j] <= 0.3 {
                    count += 1;
                }
            }
        }
        assert_eq!(fpr(&p, &t, thresholds).unwrap(), count as f64 / (h * w) as f64);
    }
}

#[test]
fn inverted_thresholds_are_rejected() {
    assert!(matches!(FprThresholds::new(0.2, 0.5), Err(Error::Parameter(_))));
    assert!(matches!(FprThresholds::new(1.5, 0.5), Err(Error::Parameter(_))));
    assert!(FprThresholds::new(0.5, 0.5).is_ok());
}

#[test]
fn report_aggregates_match_naive_recomputation() {
    let (h, w) = (8, 8);
    let preds: Vec<Vec<f64>> = (0..13).map(|s| field(h * w, s)).collect();
    let truths: Vec<Vec<f64>> = (0..13).map(|s| field(h * w, 50 + s)).collect();
    let report = MetricReport::evaluate(
        preds.iter().zip(&truths).map(|(p, t)| (p.as_slice(), t.as_slice())),
        h,
        w,
        SsimParams::default(),
        FprThresholds::default(),
    )
    .unwrap();
    let psnrs: Vec<f64> = report.images.iter().map(|m| m.psnr).collect();
    let mean = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
    let std = (psnrs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / psnrs.len() as f64).sqrt();
    assert!((report.aggregate.psnr.mean - mean).abs() < 1e-12);
    assert!((report.aggregate.psnr.std - std).abs() < 1e-12);
    assert_eq!(report.aggregate.fpr, report.aggregate.fdr);
    for m in &report.images {
        assert!((m.rmse - m.mse.sqrt()).abs() < 1e-12);
        assert!([m.mse, m.mae, m.rmse, m.psnr, m.ssim, m.fpr]
            .iter()
            .all(|v| v.is_finite()));
    }

    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 14);
    assert!(csv.starts_with("index,mse,mae,rmse,psnr,ssim,fpr\n"));
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(json["ssim_params"]["window"], 7);
    assert_eq!(json["thresholds"]["t_high"], 0.5);
    assert!(json["aggregate"]["fdr"]["mean"].is_number());
}

#[test]
fn perfect_reconstruction_report_is_finite() {
    let x = field(64, 0);
    let m = ImageMetrics::compute(&x, &x, 8, 8, SsimParams::default(), FprThresholds::default(), 1.0).unwrap();
    assert_eq!(m.psnr, 240.0);
    assert!((m.ssim - 1.0).abs() < 1e-9);
    assert_eq!(MeanStd::of(&[2.0, 2.0, 2.0]).std, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn psnr_decreases_with_rmse(a in 1e-6f64..1.0, b in 1e-6f64..1.0) {
        prop_assume!((a - b).abs() > 1e-9);
        let p = |r: f64| trust_core::metrics::psnr_from_rmse(r, 1.0);
        prop_assert_eq!(a < b, p(a) > p(b));
    }

    #[test]
    fn ssim_is_symmetric(seed in 0u64..10_000) {
        let (a, b) = (field(100, seed), field(100, seed + 1));
        let p = SsimParams::default();
        prop_assert!((ssim(&a, &b, 10, 10, p).unwrap() - ssim(&b, &a, 10, 10, p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn fpr_monotone_in_thresholds(seed in 0u64..10_000, lo in 0.0f64..0.5, hi in 0.5f64..1.0, d in 0.0f64..0.2) {
        let (p, t) = (field(64, seed), field(64, seed + 3));
        let base = fpr(&p, &t, FprThresholds::new(hi, lo).unwrap()).unwrap();
        let higher = fpr(&p, &t, FprThresholds::new((hi + d).min(1.0), lo).unwrap()).unwrap();
        let lower_low = fpr(&p, &t, FprThresholds::new(hi, (lo - d).max(0.0)).unwrap()).unwrap();
        prop_assert!(higher <= base);
        prop_assert!(lower_low <= base);
    }
}
