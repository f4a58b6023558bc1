//! Numerical checks that a sensing operator with RIP constant `δ₂ₖ` moves the
//! inner product of two unit-norm k-sparse vectors by at most `δ₂ₖ`, and the
//! similarity sweep over operator ensembles.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::sensing::{
    binomial, estimate_rip, ksparse_from, OperatorKind, RipEstimate, RipMethod, SampleOptions, SensingOperator,
    ValueDist,
};

/// Allowed slack on the bound `deviation ≤ δ₂ₖ`.
pub const BOUND_SLACK: f64 = 1e-9;
const NORM_TOL: f64 = 1e-9;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Both evaluation routes of `|xᵀAᵀAx′ − xᵀx′|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deviation {
    /// `|(Ax)ᵀ(Ax′) − xᵀx′|`.
    pub direct: f64,
    /// `¼·|(‖A(x+x′)‖² − ‖A(x−x′)‖²) − (‖x+x′‖² − ‖x−x′‖²)|`.
    pub polarized: f64,
}

fn check_unit(name: &str, v: &[f64]) -> Result<()> {
    let n = sq_norm(v).sqrt();
    if (n - 1.0).abs() > NORM_TOL {
        return Err(Error::Contract(format!("{name} must have unit norm, got {n}")));
    }
    Ok(())
}

pub fn inner_product_deviation(a: &SensingOperator, x: &[f64], x2: &[f64]) -> Result<Deviation> {
    check_unit("x", x)?;
    check_unit("x'", x2)?;
    let (ax, ax2) = (a.apply(x)?, a.apply(x2)?);
    let direct = (dot(&ax, &ax2) - dot(x, x2)).abs();

    let sum: Vec<f64> = x.iter().zip(x2).map(|(p, q)| p + q).collect();
    let diff: Vec<f64> = x.iter().zip(x2).map(|(p, q)| p - q).collect();
    let (a_sum, a_diff) = (a.apply(&sum)?, a.apply(&diff)?);
    let transformed = sq_norm(&a_sum) - sq_norm(&a_diff);
    let original = sq_norm(&sum) - sq_norm(&diff);
    let polarized = 0.25 * (transformed - original).abs();
    Ok(Deviation { direct, polarized })
}

/// Residuals of `‖A(x+x′)‖² − ‖A(x−x′)‖² = 4(Ax)ᵀ(Ax′)` and of the same
/// identity with `A = I`.
pub fn polarization_residuals(a: &SensingOperator, x: &[f64], x2: &[f64]) -> Result<(f64, f64)> {
    let sum: Vec<f64> = x.iter().zip(x2).map(|(p, q)| p + q).collect();
    let diff: Vec<f64> = x.iter().zip(x2).map(|(p, q)| p - q).collect();
    let (ax, ax2) = (a.apply(x)?, a.apply(x2)?);
    let with_a = sq_norm(&a.apply(&sum)?) - sq_norm(&a.apply(&diff)?) - 4.0 * dot(&ax, &ax2);
    let with_identity = sq_norm(&sum) - sq_norm(&diff) - 4.0 * dot(x, x2);
    Ok((with_a.abs(), with_identity.abs()))
}

pub fn verify_polarization(a: &SensingOperator, x: &[f64], x2: &[f64]) -> bool {
    matches!(polarization_residuals(a, x, x2), Ok((ra, ri)) if ra <= 1e-10 && ri <= 1e-10)
}

/// One random pair evaluated against an operator's `δ₂ₖ`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundTrial {
    pub x: Vec<f64>,
    pub x_prime: Vec<f64>,
    pub deviation: Deviation,
    pub delta_bound: f64,
}

impl BoundTrial {
    pub fn holds(&self) -> bool {
        self.deviation.direct <= self.delta_bound + BOUND_SLACK
    }
}

/// Draws `count` pairs of unit-norm k-sparse vectors with independent
/// supports from stream `seed` and evaluates each against `delta`.
pub fn run_trials(a: &SensingOperator, k: usize, delta: f64, count: usize, seed: u64) -> Result<Vec<BoundTrial>> {
    let mut rng = rng::stream(seed, "bound_pairs", 0);
    (0..count)
        .map(|_| {
            let x = ksparse_from(&mut rng, a.cols(), k, ValueDist::Gaussian, true)?.to_dense();
            let x_prime = ksparse_from(&mut rng, a.cols(), k, ValueDist::Gaussian, true)?.to_dense();
            let deviation = inner_product_deviation(a, &x, &x_prime)?;
            Ok(BoundTrial {
                x,
                x_prime,
                deviation,
                delta_bound: delta,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

impl GridCell {
    /// Parses `m:n:k[,m:n:k...]`.
    pub fn parse_grid(s: &str) -> Result<Vec<GridCell>> {
        let cells: Result<Vec<_>> = s
            .split(',')
            .map(|cell| {
                let parts: Vec<&str> = cell.trim().split(':').collect();
                let nums: std::result::Result<Vec<usize>, _> = parts.iter().map(|p| p.trim().parse()).collect();
                match nums.as_deref() {
                    Ok([m, n, k]) if *m > 0 && *n > 0 => Ok(GridCell { m: *m, n: *n, k: *k }),
                    _ => Err(Error::Parameter(format!(
                        "malformed grid cell '{cell}', expected m:n:k"
                    ))),
                }
            })
            .collect();
        let cells = cells?;
        if cells.is_empty() {
            return Err(Error::Parameter("empty grid".into()));
        }
        Ok(cells)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub kinds: Vec<OperatorKind>,
    pub grid: Vec<GridCell>,
    pub trials: usize,
    pub seed: u64,
    pub column_normalized: bool,
    /// Random vectors for cells too large to enumerate.
    pub monte_carlo_budget: u64,
    pub enumeration_cap: u128,
    /// Tokens per trial for the descriptive post-softmax column.
    pub softmax_tokens: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kinds: vec![OperatorKind::GaussianFat],
            grid: vec![GridCell { m: 8, n: 12, k: 2 }],
            trials: 100,
            seed: 0,
            column_normalized: false,
            monte_carlo_budget: 2000,
            enumeration_cap: crate::sensing::DEFAULT_ENUMERATION_CAP,
            softmax_tokens: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: OperatorKind,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub mean_dev: f64,
    pub max_dev: f64,
    pub delta: f64,
    pub delta_exact: bool,
    pub trials: usize,
    /// Mean largest entrywise gap between post-softmax similarity rows of
    /// `x` tokens and `Ax` tokens. Descriptive only; no bound is claimed.
    pub softmax_row_dev: f64,
}

impl SweepRow {
    pub fn violates_bound(&self) -> bool {
        self.delta_exact && self.max_dev > self.delta + BOUND_SLACK
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: &str = "kind,m,n,k,mean_dev,max_dev,delta,trials,delta_method,softmax_row_dev_nontheorem";

impl SweepResult {
    pub fn violations(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.violates_bound())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let method = if r.delta_exact {
                "exact"
            } else {
                "monte_carlo_lower_bound"
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{:e},{:e},{:e},{},{},{:e}",
                r.kind.name(),
                r.m,
                r.n,
                r.k,
                r.mean_dev,
                r.max_dev,
                r.delta,
                r.trials,
                method,
                r.softmax_row_dev
            );
        }
        out
    }

    /// One gnuplot data block per operator kind: `m n k mean_dev max_dev delta`.
    pub fn to_gnuplot(&self) -> String {
        let mut out = String::new();
        let mut kinds: Vec<OperatorKind> = Vec::new();
        for r in &self.rows {
            if !kinds.contains(&r.kind) {
                kinds.push(r.kind);
            }
        }
        for (i, kind) in kinds.iter().enumerate() {
            if i > 0 {
                out.push_str("\n\n");
            }
            let _ = writeln!(out, "# {}", kind.name());
            for r in self.rows.iter().filter(|r| r.kind == *kind) {
                let _ = writeln!(
                    out,
                    "{} {} {} {:e} {:e} {:e}",
                    r.m, r.n, r.k, r.mean_dev, r.max_dev, r.delta
                );
            }
        }
        out
    }
}

/// Samples one operator per (kind, cell), draws `trials` pairs against it and
/// records deviations together with `δ₂ₖ` (exact when enumerable).
///
/// `threads == 0` runs serially; otherwise cells are spread over a pool of
/// that size. Rows come back in (kind, grid) order either way.
pub fn attention_similarity_sweep(config: &SweepConfig, threads: usize) -> Result<SweepResult> {
    if config.trials == 0 {
        return Err(Error::Parameter("sweep needs at least one trial per cell".into()));
    }
    let jobs: Vec<(usize, OperatorKind, GridCell)> = config
        .kinds
        .iter()
        .flat_map(|&kind| config.grid.iter().map(move |&cell| (kind, cell)))
        .enumerate()
        .map(|(i, (kind, cell))| (i, kind, cell))
        .collect();
    let run = |&(i, kind, cell): &(usize, OperatorKind, GridCell)| sweep_cell(config, i as u64, kind, cell);
    let rows: Result<Vec<SweepRow>> = if threads == 0 {
        jobs.iter().map(run).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?
            .install(|| jobs.par_iter().map(run).collect())
    };
    Ok(SweepResult { rows: rows? })
}

fn sweep_cell(config: &SweepConfig, index: u64, kind: OperatorKind, cell: GridCell) -> Result<SweepRow> {
    let GridCell { m, n, k } = cell;
    if 2 * k > n {
        return Err(Error::Parameter(format!("cell {m}:{n}:{k} needs 2k <= n")));
    }
    let op_seed = rng::derive_seed(config.seed, "sweep_operator", index);
    let op = SensingOperator::sample_with(
        kind,
        m,
        n,
        op_seed,
        SampleOptions {
            column_normalized: config.column_normalized,
        },
    )?;
    let rip: RipEstimate = if binomial(n, 2 * k) <= config.enumeration_cap {
        estimate_rip(&op, k, RipMethod::ExactEnumeration, 0, config.enumeration_cap)?
    } else {
        estimate_rip(
            &op,
            k,
            RipMethod::MonteCarlo,
            config.monte_carlo_budget,
            config.enumeration_cap,
        )?
    };
    let trials = run_trials(
        &op,
        k,
        rip.delta,
        config.trials,
        rng::derive_seed(config.seed, "sweep_pairs", index),
    )?;
    let devs: Vec<f64> = trials.iter().map(|t| t.deviation.direct).collect();
    let mean_dev = devs.iter().sum::<f64>() / devs.len() as f64;
    let max_dev = devs.iter().copied().fold(0.0, f64::max);

    let softmax_row_dev = if config.softmax_tokens > 0 {
        let mut srng = rng::stream(config.seed, "sweep_softmax", index);
        let mut total = 0.0;
        for _ in 0..config.trials {
            let tokens: Vec<Vec<f64>> = (0..config.softmax_tokens)
                .map(|_| ksparse_from(&mut srng, n, k, ValueDist::Gaussian, true).map(|s| s.to_dense()))
                .collect::<Result<_>>()?;
            let mapped: Vec<Vec<f64>> = tokens.iter().map(|t| op.apply(t)).collect::<Result<_>>()?;
            let (sx, sy) = (softmax_similarity(&tokens), softmax_similarity(&mapped));
            total += sx.iter().zip(&sy).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        }
        total / config.trials as f64
    } else {
        0.0
    };

    Ok(SweepRow {
        kind,
        m,
        n,
        k,
        mean_dev,
        max_dev,
        delta: rip.delta,
        delta_exact: !rip.lower_bound,
        trials: config.trials,
        softmax_row_dev,
    })
}

/// Row-wise softmax of the token inner-product matrix.
fn softmax_similarity(tokens: &[Vec<f64>]) -> Vec<f64> {
    let t = tokens.len();
    let mut out = Vec::with_capacity(t * t);
    for a in tokens {
        let row: Vec<f64> = tokens.iter().map(|b| dot(a, b)).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / s));
    }
    out
}
