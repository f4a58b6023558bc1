use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::checkpoint_save;
use super::loss::{loss, LossKind, LossWeights};
use super::params::{bind, Bound};
use super::{trust, unet, ModelConfig, ModelParams};
use crate::dataset::SamplePair;
use crate::error::{Error, Result};
use crate::metrics::{self, neumaier, FprThresholds};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Worker threads for per-sample gradients; 0 runs serially. Gradients
    /// are summed in sample order, so the result does not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::L2Ssim,
            weights: LossWeights::default(),
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Parameter("batch size and epoch count must be positive".into()));
        }
        if !(self.weights.lambda_l1 >= 0.0 && self.weights.lambda_ssim >= 0.0) {
            return Err(Error::Parameter("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

fn graph(tape: &mut Tape, p: &Bound, config: &ModelConfig, input: Var) -> Result<Var> {
    match config {
        ModelConfig::Trust(c) => Ok(trust::trust_graph(tape, p, c, input)?.output),
        ModelConfig::Unet(c) => unet::unet_graph(tape, p, c, input),
    }
}

fn image(size: usize, data: &[f64]) -> Result<Tensor> {
    Tensor::new([1, size, size], data.to_vec())
}

/// Reconstruction of one observation image.
pub fn forward(config: &ModelConfig, params: &ModelParams, y: &Tensor) -> Result<Tensor> {
    match config {
        ModelConfig::Trust(c) => trust::forward_trust(params, c, y),
        ModelConfig::Unet(c) => unet::forward_unet(params, c, y),
    }
}

fn non_finite(tape: &Tape, what: &str) -> Error {
    let culprit = tape.first_non_finite().unwrap_or_else(|| "unknown".into());
    Error::NonFinite(format!("{what}; first non-finite tensor: {culprit}"))
}

/// Loss and per-parameter gradients for one pair.
fn sample_gradient(
    config: &ModelConfig,
    params: &ModelParams,
    cfg: &TrainConfig,
    pair: &SamplePair,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let size = config.image_size();
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, true);
    let input = tape.leaf(&image(size, &pair.y)?);
    let target = tape.leaf(&image(size, &pair.x)?);
    let out = graph(&mut tape, &p, config, input)?;
    let l = loss(&mut tape, cfg.loss, out, target, &cfg.weights)?;
    let value = tape.scalar(l);
    if !value.is_finite() {
        return Err(non_finite(&tape, "training loss is not finite"));
    }
    tape.backward(l)?;
    let grads: Vec<Vec<f64>> = p
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    if let Some(i) = grads.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
        let what = format!("gradient of '{}' is not finite", params.names()[i]);
        return Err(non_finite(&tape, &what));
    }
    Ok((value, grads))
}

fn run_indexed<T: Send>(threads: usize, count: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    if threads == 0 {
        (0..count).map(f).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?
            .install(|| (0..count).into_par_iter().map(&f).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub loss: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub fpr: f64,
}

/// Mean loss and metrics of `params` over `data`.
pub fn evaluate(
    config: &ModelConfig,
    params: &ModelParams,
    data: &[SamplePair],
    kind: LossKind,
    weights: &LossWeights,
    threads: usize,
) -> Result<EvalSummary> {
    if data.is_empty() {
        return Err(Error::Parameter("evaluation needs at least one sample".into()));
    }
    let size = config.image_size();
    let thresholds = FprThresholds::default();
    let rows = run_indexed(threads, data.len(), |i| {
        let pair = &data[i];
        let mut tape = Tape::new();
        let p = bind(&mut tape, params, false);
        let input = tape.leaf(&image(size, &pair.y)?);
        let target = tape.leaf(&image(size, &pair.x)?);
        let out = graph(&mut tape, &p, config, input)?;
        let l = loss(&mut tape, kind, out, target, weights)?;
        let value = tape.scalar(l);
        if !value.is_finite() {
            return Err(non_finite(&tape, "validation loss is not finite"));
        }
        let pred = tape.value(out);
        let m = metrics::ImageMetrics::compute(pred, &pair.x, size, size, weights.ssim, thresholds, 1.0)?;
        Ok([value, m.ssim, m.psnr, m.fpr])
    })?;
    let n = rows.len() as f64;
    let mean = |k: usize| neumaier(rows.iter().map(|r| r[k])) / n;
    Ok(EvalSummary {
        loss: mean(0),
        ssim: mean(1),
        psnr: mean(2),
        fpr: mean(3),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ssim: f64,
    pub val_psnr: f64,
    pub val_fpr: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,val_loss,val_ssim,val_psnr,val_fpr";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub params: ModelParams,
    /// Parameters after the epoch with the lowest validation loss.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut out = String::from(EPOCH_LOG_HEADER);
        out.push('\n');
        for r in &self.log {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e}",
                r.epoch, r.train_loss, r.val_loss, r.val_ssim, r.val_psnr, r.val_fpr
            );
        }
        out
    }
}

/// Mini-batch Adam training from the config's initial parameters.
///
/// With `out_dir`, writes `epochs.csv`, `best.json`/`best.bin` and
/// `last.json`/`last.bin` there, refreshing them after every epoch.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_data: &[SamplePair],
    val_data: &[SamplePair],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::Parameter(
            "training needs non-empty train and validation splits".into(),
        ));
    }
    let mut params = model.init()?;
    let mut adam = Adam::new(cfg.learning_rate, &params);
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_loss = f64::INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut order: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut shuffle = rng::stream(cfg.seed, "shuffle", epoch as u64);
        order.shuffle(&mut shuffle);
        let mut losses = Vec::with_capacity(order.len());
        for batch in order.chunks(cfg.batch_size) {
            let results = run_indexed(cfg.threads, batch.len(), |i| {
                sample_gradient(model, &params, cfg, &train_data[batch[i]])
            })?;
            let scale = 1.0 / batch.len() as f64;
            let mut total: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            for (value, grads) in &results {
                losses.push(*value);
                for (acc, g) in total.iter_mut().zip(grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b * scale);
                }
            }
            adam.step(&mut params, &total);
            if let Err(name) = params.all_finite() {
                return Err(Error::NonFinite(format!(
                    "parameter '{name}' became non-finite in epoch {epoch}"
                )));
            }
        }
        let val = evaluate(model, &params, val_data, cfg.loss, &cfg.weights, cfg.threads)?;
        log.push(EpochRecord {
            epoch,
            train_loss: neumaier(losses.iter().copied()) / losses.len() as f64,
            val_loss: val.loss,
            val_ssim: val.ssim,
            val_psnr: val.psnr,
            val_fpr: val.fpr,
        });
        if val.loss < best_loss {
            best_loss = val.loss;
            best_epoch = epoch;
            best.clone_from(&params);
            if let Some(dir) = out_dir {
                checkpoint_save(&dir.join("best.json"), model, &best)?;
            }
        }
        if let Some(dir) = out_dir {
            checkpoint_save(&dir.join("last.json"), model, &params)?;
        }
        let outcome = TrainOutcome {
            params: params.clone(),
            best: best.clone(),
            best_epoch,
            log: log.clone(),
        };
        if let Some(dir) = out_dir {
            std::fs::write(dir.join("epochs.csv"), outcome.log_csv())?;
        }
        if epoch == cfg.epochs {
            return Ok(outcome);
        }
    }
    unreachable!("epochs validated positive")
}
