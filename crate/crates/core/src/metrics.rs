//! Reconstruction quality metrics and the hallucination (false-positive
//! region) score.
//!
//! The hallucination score counts pixels that are bright in the prediction but
//! dark in the ground truth, divided by the total pixel count. Reports carry it
//! under both `fpr` and `fdr`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// RMSE floor; caps PSNR of a perfect match at 240 dB for `MAX = 1`.
pub const RMSE_FLOOR: f64 = 1e-12;

fn same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(op, format!("lengths {} and {} differ", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::dim(op, "empty image"));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len("mse", pred, truth)?;
    Ok(neumaier(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t))) / pred.len() as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len("mae", pred, truth)?;
    Ok(neumaier(pred.iter().zip(truth).map(|(p, t)| (p - t).abs())) / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    mse(pred, truth).map(f64::sqrt)
}

pub fn psnr_from_rmse(rmse: f64, max_value: f64) -> f64 {
    20.0 * (max_value / rmse.max(RMSE_FLOOR)).log10()
}

pub fn psnr(pred: &[f64], truth: &[f64], max_value: f64) -> Result<f64> {
    if !(max_value > 0.0) {
        return Err(Error::Parameter(format!("PSNR peak must be positive, got {max_value}")));
    }
    Ok(psnr_from_rmse(rmse(pred, truth)?, max_value))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 7,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl SsimParams {
    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.window == 0 || self.window > h || self.window > w {
            return Err(Error::Parameter(format!(
                "SSIM window {} does not fit a {h}x{w} image",
                self.window
            )));
        }
        Ok(())
    }
}

/// Mean SSIM over all `window×window` placements of a uniform window.
/// Local moments use the population (1/N) normalisation.
pub fn ssim(pred: &[f64], truth: &[f64], h: usize, w: usize, params: SsimParams) -> Result<f64> {
    same_len("ssim", pred, truth)?;
    if pred.len() != h * w {
        return Err(Error::dim("ssim", format!("{} pixels for a {h}x{w} image", pred.len())));
    }
    params.check(h, w)?;
    let win = params.window;
    let count = (win * win) as f64;
    let mut total = 0.0;
    let (oh, ow) = (h - win + 1, w - win + 1);
    for i in 0..oh {
        for j in 0..ow {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..win {
                for dj in 0..win {
                    let idx = (i + di) * w + j + dj;
                    let (a, b) = (pred[idx], truth[idx]);
                    sa += a;
                    sb += b;
                    saa += a * a;
                    sbb += b * b;
                    sab += a * b;
                }
            }
            let (ma, mb) = (sa / count, sb / count);
            let va = saa / count - ma * ma;
            let vb = sbb / count - mb * mb;
            let cov = sab / count - ma * mb;
            total += ((2.0 * ma * mb + params.c1) * (2.0 * cov + params.c2))
                / ((ma * ma + mb * mb + params.c1) * (va + vb + params.c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// Differentiable SSIM of two `1×H×W` (or `H×W`) tape values; returns a scalar.
pub fn ssim_tape(tape: &mut Tape, pred: Var, truth: Var, params: SsimParams) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if tape.shape(truth) != shape.as_slice() {
        return Err(Error::shapes("ssim", &shape, tape.shape(truth)));
    }
    let (h, w) = match shape.as_slice() {
        [h, w] | [1, h, w] => (*h, *w),
        _ => {
            return Err(Error::dim(
                "ssim",
                format!("expected a single-channel image, got {shape:?}"),
            ))
        }
    };
    params.check(h, w)?;
    let pred = tape.reshape(pred, [1, h, w])?;
    let truth = tape.reshape(truth, [1, h, w])?;
    let win = params.window;
    let kernel = tape.constant([1, 1, win, win], vec![1.0 / (win * win) as f64; win * win])?;

    let aa = tape.mul(pred, pred)?;
    let bb = tape.mul(truth, truth)?;
    let ab = tape.mul(pred, truth)?;
    let ma = tape.conv2d(pred, kernel, None, 1, 0)?;
    let mb = tape.conv2d(truth, kernel, None, 1, 0)?;
    let eaa = tape.conv2d(aa, kernel, None, 1, 0)?;
    let ebb = tape.conv2d(bb, kernel, None, 1, 0)?;
    let eab = tape.conv2d(ab, kernel, None, 1, 0)?;

    let ma2 = tape.square(ma);
    let mb2 = tape.square(mb);
    let mab = tape.mul(ma, mb)?;
    let va = tape.sub(eaa, ma2)?;
    let vb = tape.sub(ebb, mb2)?;
    let cov = tape.sub(eab, mab)?;

    let lum_num = tape.scalar_mul(mab, 2.0);
    let lum_num = tape.add_scalar(lum_num, params.c1);
    let cs_num = tape.scalar_mul(cov, 2.0);
    let cs_num = tape.add_scalar(cs_num, params.c2);
    let lum_den = tape.add(ma2, mb2)?;
    let lum_den = tape.add_scalar(lum_den, params.c1);
    let cs_den = tape.add(va, vb)?;
    let cs_den = tape.add_scalar(cs_den, params.c2);

    let num = tape.mul(lum_num, cs_num)?;
    let den = tape.mul(lum_den, cs_den)?;
    let map = tape.div(num, den)?;
    Ok(tape.reduce_mean(map))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FprThresholds {
    t_high: f64,
    t_low: f64,
}

impl FprThresholds {
    pub fn new(t_high: f64, t_low: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t_high) || !(0.0..=1.0).contains(&t_low) {
            return Err(Error::Parameter(format!(
                "thresholds must lie in [0, 1], got t_high={t_high}, t_low={t_low}"
            )));
        }
        if t_low > t_high {
            return Err(Error::Parameter(format!(
                "inverted thresholds: t_low={t_low} exceeds t_high={t_high}"
            )));
        }
        Ok(Self { t_high, t_low })
    }

    pub fn t_high(&self) -> f64 {
        self.t_high
    }

    pub fn t_low(&self) -> f64 {
        self.t_low
    }
}

impl Default for FprThresholds {
    fn default() -> Self {
        Self {
            t_high: 0.5,
            t_low: 0.1,
        }
    }
}

/// Fraction of pixels with `pred > t_high` where `truth ≤ t_low`.
pub fn fpr(pred: &[f64], truth: &[f64], thresholds: FprThresholds) -> Result<f64> {
    same_len("fpr", pred, truth)?;
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(p, t)| **p > thresholds.t_high && **t <= thresholds.t_low)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Compensated (Neumaier) sum.
pub fn neumaier(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub fpr: f64,
}

impl ImageMetrics {
    pub fn compute(
        pred: &[f64],
        truth: &[f64],
        h: usize,
        w: usize,
        ssim_params: SsimParams,
        thresholds: FprThresholds,
        max_value: f64,
    ) -> Result<Self> {
        let mse = mse(pred, truth)?;
        let rmse = mse.sqrt();
        Ok(Self {
            mse,
            mae: mae(pred, truth)?,
            rmse,
            psnr: psnr_from_rmse(rmse, max_value),
            ssim: ssim(pred, truth, h, w, ssim_params)?,
            fpr: fpr(pred, truth, thresholds)?,
        })
    }

    fn fields(&self) -> [f64; 6] {
        [self.mse, self.mae, self.rmse, self.psnr, self.ssim, self.fpr]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = neumaier(values.iter().copied()) / n;
        let var = neumaier(values.iter().map(|v| (v - mean) * (v - mean))) / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mse: MeanStd,
    pub mae: MeanStd,
    pub rmse: MeanStd,
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub fpr: MeanStd,
    /// Same statistic as `fpr`.
    pub fdr: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
    pub thresholds: FprThresholds,
    pub ssim_params: SsimParams,
    pub max_value: f64,
}

pub const REPORT_CSV_HEADER: &str = "index,mse,mae,rmse,psnr,ssim,fpr";

impl MetricReport {
    pub fn new(images: Vec<ImageMetrics>, thresholds: FprThresholds, ssim_params: SsimParams, max_value: f64) -> Self {
        let column = |i: usize| MeanStd::of(&images.iter().map(|m| m.fields()[i]).collect::<Vec<_>>());
        let fpr = column(5);
        let aggregate = Aggregate {
            mse: column(0),
            mae: column(1),
            rmse: column(2),
            psnr: column(3),
            ssim: column(4),
            fpr,
            fdr: fpr,
        };
        Self {
            images,
            aggregate,
            thresholds,
            ssim_params,
            max_value,
        }
    }

    /// Scores paired predictions and targets, each `h·w` pixels long.
    pub fn evaluate<'a>(
        pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>,
        h: usize,
        w: usize,
        ssim_params: SsimParams,
        thresholds: FprThresholds,
    ) -> Result<Self> {
        let images = pairs
            .into_iter()
            .map(|(p, t)| ImageMetrics::compute(p, t, h, w, ssim_params, thresholds, 1.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(images, thresholds, ssim_params, 1.0))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for (i, m) in self.images.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in m.fields() {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
