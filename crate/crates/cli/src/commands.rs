use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use trust_core::bound_lab::{attention_similarity_sweep, GridCell, SweepConfig};
use trust_core::dataset::{
    gen_dataset, load_split, write_pgm, DatasetManifest, DatasetSpec, ForwardModel, SamplePair, Split, MANIFEST_FILE,
};
use trust_core::metrics::{FprThresholds, MetricReport, SsimParams};
use trust_core::model::{self, checkpoint_load, LossKind, ModelConfig, TrainConfig, TrustConfig, UnetConfig};
use trust_core::sensing::{OperatorKind, SensingOperator};
use trust_core::solvers::{estimate_operator, fista, ista, omp, RecoveryResult, SolverConfig};
use trust_core::tensor::Tensor;

use crate::config::{merge, read_json, resolve, Overrides};
use crate::error::CliError;
use crate::record::Recorder;
use crate::report::{self, Summary, SUMMARY_FILE};
use crate::{Command, EvalArgs, GenDataArgs, SolveArgs, TrainArgs, VerifyBoundArgs};

pub const RUN_RECORD: &str = "run.json";

pub fn dispatch(command: Command, rec: &mut Recorder, threads: usize) -> Result<(), CliError> {
    match command {
        Command::GenData(a) => gen_data(a, rec, threads),
        Command::VerifyBound(a) => verify_bound(a, rec, threads),
        Command::Solve(a) => solve(a, rec),
        Command::Train(a) => train(a, rec, threads),
        Command::Eval(a) => eval(a, rec),
        Command::Report(a) => report::run(a, rec),
    }
}

fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("configs serialize")
}

/// Files directly under `dir`, sorted, excluding the run record.
fn list_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != RUN_RECORD))
        .collect();
    files.sort();
    Ok(files)
}

fn write(rec: &mut Recorder, path: PathBuf, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(&path, contents)?;
    rec.output(path);
    Ok(())
}

fn load_dataset(dir: &Path, rec: &mut Recorder) -> Result<DatasetManifest, CliError> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(CliError::Usage(format!(
            "no dataset at {} ({MANIFEST_FILE} missing)",
            dir.display()
        )));
    }
    rec.inputs.add_file("dataset/manifest", &dir.join(MANIFEST_FILE))?;
    Ok(DatasetManifest::load(dir)?)
}

fn load_pairs(
    manifest: &DatasetManifest,
    dir: &Path,
    split: Split,
    limit: Option<usize>,
) -> Result<Vec<SamplePair>, CliError> {
    let mut pairs = load_split(manifest, dir, split)?;
    if let Some(n) = limit {
        pairs.truncate(n);
    }
    if pairs.is_empty() {
        return Err(CliError::Usage(format!(
            "split '{}' has no samples to process",
            split.name()
        )));
    }
    Ok(pairs)
}

fn parse_range(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("expected a range lo:hi, got '{s}'"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    Ok((
        lo.trim().parse().map_err(|_| bad())?,
        hi.trim().parse().map_err(|_| bad())?,
    ))
}

fn gen_data(a: GenDataArgs, rec: &mut Recorder, threads: usize) -> Result<(), CliError> {
    rec.record_path = Some(a.out.join(RUN_RECORD));
    let kind = a.operator.as_deref().map(ForwardModel::parse).transpose()?;
    let blobs = a.blobs.as_deref().map(parse_range).transpose()?;
    let mut o = Overrides::new();
    o.opt("seed", a.seed)
        .opt("image_size", a.image_size)
        .opt("counts.train", a.train)
        .opt("counts.val", a.val)
        .opt("counts.test", a.test)
        .opt("operator.kind", kind)
        .opt("operator.m", a.m)
        .opt("operator.keep", a.keep)
        .opt("operator.seed", a.operator_seed)
        .opt("noise_sigma", a.noise)
        .opt("target.num_blobs", blobs);
    let spec: DatasetSpec = resolve(&DatasetSpec::default(), a.config.as_deref(), o)?;
    rec.config = to_value(&spec);

    let manifest = gen_dataset(&spec, &a.out, threads)?;
    let size = spec.image_size;
    rec.outputs = list_files(&a.out)?;
    println!(
        "wrote {}/{}/{} train/val/test pairs at {size}x{size} px, operator {}x{} -> {}",
        manifest.train.count,
        manifest.val.count,
        manifest.test.count,
        manifest.operator_shape.0,
        manifest.operator_shape.1,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct BoundRun {
    kinds: Vec<String>,
    grid: String,
    trials: usize,
    seed: u64,
    column_normalized: bool,
    monte_carlo_budget: u64,
    softmax_tokens: usize,
}

impl Default for BoundRun {
    fn default() -> Self {
        let d = SweepConfig::default();
        Self {
            kinds: d.kinds.iter().map(|k| k.name().to_string()).collect(),
            grid: d
                .grid
                .iter()
                .map(|c| format!("{}:{}:{}", c.m, c.n, c.k))
                .collect::<Vec<_>>()
                .join(","),
            trials: d.trials,
            seed: d.seed,
            column_normalized: d.column_normalized,
            monte_carlo_budget: d.monte_carlo_budget,
            softmax_tokens: d.softmax_tokens,
        }
    }
}

fn verify_bound(a: VerifyBoundArgs, rec: &mut Recorder, threads: usize) -> Result<(), CliError> {
    rec.record_path = Some(a.out.with_extension("run.json"));
    let kinds = a
        .kinds
        .map(|s| s.split(',').map(|k| k.trim().to_string()).collect::<Vec<_>>());
    let mut o = Overrides::new();
    o.opt("grid", a.grid)
        .opt("kinds", kinds)
        .opt("trials", a.trials)
        .opt("seed", a.seed)
        .opt("column_normalized", a.column_normalized.then_some(true))
        .opt("monte_carlo_budget", a.monte_carlo_budget);
    let run: BoundRun = resolve(&BoundRun::default(), a.config.as_deref(), o)?;
    rec.config = to_value(&run);

    let sweep = SweepConfig {
        kinds: run
            .kinds
            .iter()
            .map(|k| OperatorKind::parse(k))
            .collect::<Result<_, _>>()?,
        grid: GridCell::parse_grid(&run.grid)?,
        trials: run.trials,
        seed: run.seed,
        column_normalized: run.column_normalized,
        monte_carlo_budget: run.monte_carlo_budget,
        softmax_tokens: run.softmax_tokens,
        ..SweepConfig::default()
    };
    let result = attention_similarity_sweep(&sweep, threads)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write(rec, a.out.clone(), result.to_csv())?;
    if let Some(path) = a.gnuplot {
        write(rec, path, result.to_gnuplot())?;
    }
    for r in &result.rows {
        println!(
            "{:<18} m={:<4} n={:<4} k={:<3} max_dev={:.3e} delta={:.3e} ({})",
            r.kind.name(),
            r.m,
            r.n,
            r.k,
            r.max_dev,
            r.delta,
            if r.delta_exact { "exact" } else { "lower bound" }
        );
    }
    let violations: Vec<String> = result
        .violations()
        .map(|r| {
            format!(
                "{} {}:{}:{} max_dev {:e} > delta {:e}",
                r.kind.name(),
                r.m,
                r.n,
                r.k,
                r.max_dev,
                r.delta
            )
        })
        .collect();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "bound violated in {} cell(s): {}",
            violations.len(),
            violations.join("; ")
        )))
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Method {
    Omp,
    Ista,
    Fista,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum OperatorSource {
    Known,
    Estimated,
}

#[derive(Serialize, Deserialize)]
struct SolveRun {
    method: Method,
    operator: OperatorSource,
    split: Split,
    limit: Option<usize>,
    /// OMP atom budget; `None` allows one atom per measurement.
    sparsity: Option<usize>,
    solver: SolverConfig,
    /// Ridge for operator estimation. `None` fits exactly (ridge 0) when
    /// there are at least `n` train pairs and falls back to the estimator's
    /// default ridge otherwise or when the exact fit is singular.
    ridge: Option<f64>,
}

impl Default for SolveRun {
    fn default() -> Self {
        Self {
            method: Method::Omp,
            operator: OperatorSource::Known,
            split: Split::Test,
            limit: None,
            sparsity: None,
            // Tight enough that OMP keeps selecting until the fit is exact.
            solver: SolverConfig {
                residual_tolerance: 1e-12,
                ..SolverConfig::default()
            },
            ridge: None,
        }
    }
}

fn solve(a: SolveArgs, rec: &mut Recorder) -> Result<(), CliError> {
    rec.record_path = Some(a.out.join(RUN_RECORD));
    let mut o = Overrides::new();
    o.opt("method", a.method)
        .opt("operator", a.operator)
        .opt("split", a.split)
        .opt("limit", a.limit)
        .opt("sparsity", a.sparsity)
        .opt("solver.residual_tolerance", a.tolerance)
        .opt("solver.max_iterations", a.max_iterations)
        .opt("solver.lambda", a.lambda)
        .opt("ridge", a.ridge);
    let mut run: SolveRun = resolve(&SolveRun::default(), a.config.as_deref(), o)?;
    rec.config = to_value(&run);

    let manifest = load_dataset(&a.dataset, rec)?;
    std::fs::create_dir_all(&a.out)?;
    let op = match run.operator {
        OperatorSource::Known => manifest.operator(&a.dataset)?,
        OperatorSource::Estimated => {
            let train = load_split(&manifest, &a.dataset, Split::Train)?;
            let pairs: Vec<(Vec<f64>, Vec<f64>)> = train.iter().map(|p| (p.x.clone(), p.raw_observation())).collect();
            let n = manifest.spec.image_size * manifest.spec.image_size;
            let op = match run.ridge {
                Some(r) => estimate_operator(&pairs, Some(r))?,
                None if pairs.len() >= n => match estimate_operator(&pairs, Some(0.0)) {
                    Err(trust_core::Error::Singular(_)) => {
                        eprintln!("note: exact operator fit is singular, using the default ridge");
                        estimate_operator(&pairs, None)?
                    }
                    other => other?,
                },
                None => estimate_operator(&pairs, None)?,
            };
            op.save(&a.out.join("estimated_operator.json"))?;
            rec.outputs = list_files(&a.out)?;
            op
        }
    };
    run.sparsity = Some(run.sparsity.unwrap_or(op.rows()));
    run.solver.sparsity_budget = run.sparsity.unwrap_or_default();
    rec.config = to_value(&run);
    let data = load_pairs(&manifest, &a.dataset, run.split, run.limit)?;
    let size = manifest.spec.image_size;
    let config = run.solver;

    let mut estimates = Vec::with_capacity(data.len());
    let mut log = String::from("index,iterations,converged,final_residual,support_size,rank_deficient\n");
    for (i, pair) in data.iter().enumerate() {
        let result = recover(run.method, &op, &pair.raw_observation(), &config)?;
        let _ = writeln!(
            log,
            "{i},{},{},{:e},{},{}",
            result.iterations_used,
            result.converged,
            result.final_residual().unwrap_or(f64::NAN),
            result.support.len(),
            result.rank_deficient
        );
        estimates.push(result.estimate);
    }
    let metric_report = MetricReport::evaluate(
        estimates.iter().zip(&data).map(|(e, p)| (e.as_slice(), p.x.as_slice())),
        size,
        size,
        SsimParams::default(),
        FprThresholds::default(),
    )?;
    let blob: Vec<u8> = estimates.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    write(rec, a.out.join("reconstructions.f64"), blob)?;
    write(rec, a.out.join("solver_log.csv"), log)?;
    let method = match run.method {
        Method::Omp => "omp",
        Method::Ista => "ista",
        Method::Fista => "fista",
    };
    let label = match run.operator {
        OperatorSource::Known => method.to_string(),
        OperatorSource::Estimated => format!("{method} (estimated operator)"),
    };
    finish_metrics(
        rec,
        &a.out,
        &metric_report,
        Summary::new("solver", &label, None, run.split, &metric_report),
    )
}

fn recover(method: Method, op: &SensingOperator, y: &[f64], config: &SolverConfig) -> Result<RecoveryResult, CliError> {
    Ok(match method {
        Method::Omp => omp(op, y, config)?,
        Method::Ista => ista(op, y, config)?,
        Method::Fista => fista(op, y, config)?,
    })
}

/// Writes `metrics.csv`, `report.json` and `summary.json` and prints the means.
fn finish_metrics(
    rec: &mut Recorder,
    out: &Path,
    metric_report: &MetricReport,
    summary: Summary,
) -> Result<(), CliError> {
    write(rec, out.join("metrics.csv"), metric_report.to_csv())?;
    write(rec, out.join("report.json"), metric_report.to_json()?)?;
    write(
        rec,
        out.join(SUMMARY_FILE),
        serde_json::to_vec_pretty(&summary).map_err(trust_core::Error::from)?,
    )?;
    let g = &metric_report.aggregate;
    println!(
        "{} images: mse {:.3e}  mae {:.3e}  psnr {:.2} dB  ssim {:.4}  fpr {:.4}",
        metric_report.images.len(),
        g.mse.mean,
        g.mae.mean,
        g.psnr.mean,
        g.ssim.mean,
        g.fpr.mean
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TrainRun {
    model: ModelConfig,
    train: TrainConfig,
}

fn default_model(name: &str) -> Result<ModelConfig, CliError> {
    match name {
        "trust" => Ok(ModelConfig::Trust(TrustConfig::default())),
        "unet" => Ok(ModelConfig::Unet(UnetConfig::default())),
        other => Err(CliError::Usage(format!(
            "unknown model '{other}' (expected trust or unet)"
        ))),
    }
}

/// `all`, `none`, or one `0`/`1` per skip connection.
fn parse_skip_mask(s: &str, count: usize) -> Result<Vec<bool>, CliError> {
    match s {
        "all" => Ok(vec![true; count]),
        "none" => Ok(vec![false; count]),
        bits if bits.len() == count && bits.chars().all(|c| c == '0' || c == '1') => {
            Ok(bits.chars().map(|c| c == '1').collect())
        }
        _ => Err(CliError::Usage(format!(
            "skip mask '{s}' must be all, none, or {count} digits of 0/1"
        ))),
    }
}

fn train(a: TrainArgs, rec: &mut Recorder, threads: usize) -> Result<(), CliError> {
    rec.record_path = Some(a.out.join(RUN_RECORD));
    let mut value = to_value(&TrainRun {
        model: ModelConfig::Trust(TrustConfig::default()),
        train: TrainConfig::default(),
    });
    if let Some(path) = a.config.as_deref() {
        merge(&mut value, read_json(path)?);
    }
    // Switching model family starts from that family's defaults.
    if let Some(name) = a.model.as_deref() {
        if value["model"]["model"].as_str() != Some(name) {
            value["model"] = to_value(&default_model(name)?);
        }
    }
    let manifest = load_dataset(&a.dataset, rec)?;
    let loss = a.loss.as_deref().map(LossKind::parse).transpose()?;
    let mut o = Overrides::new();
    o.opt("model.image_size", Some(manifest.spec.image_size))
        .opt("model.seed", a.seed)
        .opt("train.seed", a.seed)
        .opt("train.loss", loss)
        .opt("train.learning_rate", a.lr)
        .opt("train.batch_size", a.batch_size)
        .opt("train.epochs", a.epochs)
        .opt("train.threads", Some(threads));
    let mut run: TrainRun = resolve(&value, None, o)?;
    if let Some(mask) = a.skips.as_deref() {
        match &mut run.model {
            ModelConfig::Trust(c) => c.skip_enabled = parse_skip_mask(mask, c.skip_sources.len())?,
            ModelConfig::Unet(_) => return Err(CliError::Usage("--skips applies to the trust model only".into())),
        }
    }
    rec.config = to_value(&run);
    run.model.validate()?;
    run.train.validate()?;

    let train_data = load_split(&manifest, &a.dataset, Split::Train)?;
    let val_data = load_split(&manifest, &a.dataset, Split::Val)?;
    let params = model::param_count(&run.model)?;
    println!(
        "training {} ({params} parameters) on {} pairs for {} epochs",
        run.model.name(),
        train_data.len(),
        run.train.epochs
    );
    let result = model::train(&run.model, &run.train, &train_data, &val_data, Some(&a.out));
    if a.out.is_dir() {
        rec.outputs = list_files(&a.out)?;
    }
    let outcome = result?;
    for r in &outcome.log {
        println!(
            "epoch {:>3}: train {:.5}  val {:.5}  ssim {:.4}  psnr {:.2}",
            r.epoch, r.train_loss, r.val_loss, r.val_ssim, r.val_psnr
        );
    }
    println!("best epoch {}", outcome.best_epoch);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EvalRun {
    split: Split,
    limit: Option<usize>,
    emit_images: Option<PathBuf>,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            split: Split::Test,
            limit: None,
            emit_images: None,
        }
    }
}

fn eval(a: EvalArgs, rec: &mut Recorder) -> Result<(), CliError> {
    rec.record_path = Some(a.out.join(RUN_RECORD));
    let mut o = Overrides::new();
    o.opt("split", a.split)
        .opt("limit", a.limit)
        .opt("emit_images", a.emit_images);
    let run: EvalRun = resolve(&EvalRun::default(), a.config.as_deref(), o)?;
    rec.config = to_value(&run);

    let ckpt = checkpoint_load(&a.checkpoint)?;
    rec.inputs.add_file("checkpoint/manifest", &a.checkpoint)?;
    rec.inputs
        .add_file("checkpoint/blob", &a.checkpoint.with_extension("bin"))?;
    let manifest = load_dataset(&a.dataset, rec)?;
    let size = manifest.spec.image_size;
    if ckpt.config.image_size() != size {
        return Err(CliError::Usage(format!(
            "checkpoint expects {0}x{0} images, dataset has {size}x{size}",
            ckpt.config.image_size()
        )));
    }
    let data = load_pairs(&manifest, &a.dataset, run.split, run.limit)?;
    std::fs::create_dir_all(&a.out)?;

    let preds = data
        .iter()
        .map(|pair| {
            let y = Tensor::new([1, size, size], pair.y.clone())?;
            Ok(model::forward(&ckpt.config, &ckpt.params, &y)?.data().to_vec())
        })
        .collect::<Result<Vec<_>, trust_core::Error>>()?;
    let metric_report = MetricReport::evaluate(
        preds.iter().zip(&data).map(|(p, d)| (p.as_slice(), d.x.as_slice())),
        size,
        size,
        SsimParams::default(),
        FprThresholds::default(),
    )?;

    if let Some(dir) = &run.emit_images {
        std::fs::create_dir_all(dir)?;
        for (i, (pair, pred)) in data.iter().zip(&preds).enumerate() {
            for (tag, pixels) in [("y", &pair.y), ("x", &pair.x), ("xhat", pred)] {
                let path = dir.join(format!("{i:04}_{tag}.pgm"));
                write_pgm(&path, size, size, pixels)?;
                rec.output(path);
            }
        }
    }
    let params = model::param_count(&ckpt.config)?;
    let summary = Summary::new("model", ckpt.config.name(), Some(params), run.split, &metric_report);
    finish_metrics(rec, &a.out, &metric_report, summary)
}
