//! Classical sparse recovery (OMP, ISTA, FISTA) and least-squares estimation
//! of an unknown linear operator from observation/target pairs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::sensing::SensingOperator;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `1/L` with `L = σ_max(A)²` from power iteration.
    PowerIterationLipschitz,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// OMP stops once `‖Ax̂ − y‖ ≤ ε`; ISTA/FISTA stop once an update moves
    /// the iterate by at most `ε`.
    pub residual_tolerance: f64,
    pub sparsity_budget: usize,
    /// ℓ1 weight. `None` picks `0.05·‖Aᵀy‖∞`.
    pub lambda: Option<f64>,
    pub step_rule: StepRule,
    /// Seed for the power-iteration start vector.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            residual_tolerance: 1e-6,
            sparsity_budget: 10,
            lambda: None,
            step_rule: StepRule::PowerIterationLipschitz,
            seed: 0,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if !(self.residual_tolerance >= 0.0) {
            return Err(Error::Parameter(format!(
                "residual tolerance must be >= 0, got {}",
                self.residual_tolerance
            )));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0) {
                return Err(Error::Parameter(format!("lambda must be >= 0, got {l}")));
            }
        }
        if let StepRule::Fixed(s) = self.step_rule {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Parameter(format!("fixed step must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub estimate: Vec<f64>,
    /// Selected atoms in selection order (OMP); nonzero indices otherwise.
    pub support: Vec<usize>,
    /// `‖Ax̂ − y‖` after each iteration.
    pub residual_norm_history: Vec<f64>,
    /// `F(x̂)` after each iteration (ISTA/FISTA only).
    pub objective_history: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    /// A least-squares refit hit a rank-deficient submatrix and fell back to
    /// the minimum-norm solution.
    pub rank_deficient: bool,
}

#[derive(Serialize)]
struct ResultHeader<'a> {
    support: &'a [usize],
    iterations: usize,
    converged: bool,
    final_residual: Option<f64>,
    rank_deficient: bool,
    estimate_len: usize,
    blob: String,
}

impl RecoveryResult {
    pub fn final_residual(&self) -> Option<f64> {
        self.residual_norm_history.last().copied()
    }

    /// JSON summary at `path` plus the little-endian f64 estimate at `<path>.bin`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = path.with_extension("bin");
        let header = ResultHeader {
            support: &self.support,
            iterations: self.iterations_used,
            converged: self.converged,
            final_residual: self.final_residual(),
            rank_deficient: self.rank_deficient,
            estimate_len: self.estimate.len(),
            blob: blob
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&header)?)?;
        let bytes: Vec<u8> = self.estimate.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(blob, bytes)?;
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn residual(a: &SensingOperator, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let ax = a.apply(x)?;
    Ok(ax.iter().zip(y).map(|(p, q)| p - q).collect())
}

fn check_y(a: &SensingOperator, y: &[f64], op: &'static str) -> Result<()> {
    if y.len() != a.rows() {
        return Err(Error::dim(
            op,
            format!("observation has length {}, operator has {} rows", y.len(), a.rows()),
        ));
    }
    Ok(())
}

pub fn omp(a: &SensingOperator, y: &[f64], config: &SolverConfig) -> Result<RecoveryResult> {
    config.validate()?;
    check_y(a, y, "omp")?;
    if config.sparsity_budget == 0 {
        return Err(Error::Parameter("OMP sparsity budget must be >= 1".into()));
    }
    let (m, n) = (a.rows(), a.cols());
    let col_norms = a.column_norms();
    let mut estimate = vec![0.0; n];
    let mut support: Vec<usize> = Vec::new();
    let mut r = y.to_vec();
    let mut history = Vec::new();
    let mut rank_deficient = false;
    let budget = config.sparsity_budget.min(n).min(config.max_iterations.max(1));

    while support.len() < budget && norm(&r) > config.residual_tolerance {
        let corr = a.adjoint(&r)?;
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if col_norms[j] == 0.0 || support.contains(&j) {
                continue;
            }
            let score = corr[j].abs() / col_norms[j];
            // strict comparison keeps the lowest index on ties
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((j, score));
            }
        }
        let Some((j, score)) = best else { break };
        if score == 0.0 {
            break;
        }
        support.push(j);
        let sub = a.columns(&support);
        let (coef, deficient) = linalg::least_squares(m, support.len(), &sub, y);
        rank_deficient |= deficient;
        estimate.iter_mut().for_each(|v| *v = 0.0);
        for (&idx, &c) in support.iter().zip(&coef) {
            estimate[idx] = c;
        }
        r = residual(a, &estimate, y)?.iter().map(|v| -v).collect();
        history.push(norm(&r));
    }

    Ok(RecoveryResult {
        estimate,
        converged: norm(&r) <= config.residual_tolerance,
        iterations_used: history.len(),
        residual_norm_history: history,
        objective_history: Vec::new(),
        support,
        rank_deficient,
    })
}

/// `sign(v)·max(|v| − t, 0)`.
pub fn shrink(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// `½‖Ax − y‖² + λ‖x‖₁`.
pub fn objective(a: &SensingOperator, y: &[f64], x: &[f64], lambda: f64) -> Result<f64> {
    let r = residual(a, x, y)?;
    Ok(0.5 * r.iter().map(|v| v * v).sum::<f64>() + lambda * x.iter().map(|v| v.abs()).sum::<f64>())
}

/// `σ_max(A)²` by power iteration (tolerance 1e-10, at most 1000 iterations).
pub fn lipschitz_constant(a: &SensingOperator, seed: u64) -> f64 {
    let mut rng = rng::stream(seed, "lipschitz", 0);
    linalg::spectral_norm_sq(
        |x| a.apply(x).expect("length matches cols"),
        |r| a.adjoint(r).expect("length matches rows"),
        a.cols(),
        1e-10,
        1000,
        &mut rng,
    )
}

pub fn default_lambda(a: &SensingOperator, y: &[f64]) -> Result<f64> {
    Ok(0.05 * a.adjoint(y)?.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

pub fn ista(a: &SensingOperator, y: &[f64], config: &SolverConfig) -> Result<RecoveryResult> {
    proximal_gradient(a, y, config, false)
}

pub fn fista(a: &SensingOperator, y: &[f64], config: &SolverConfig) -> Result<RecoveryResult> {
    proximal_gradient(a, y, config, true)
}

fn proximal_gradient(a: &SensingOperator, y: &[f64], config: &SolverConfig, momentum: bool) -> Result<RecoveryResult> {
    config.validate()?;
    check_y(a, y, if momentum { "fista" } else { "ista" })?;
    let n = a.cols();
    let lambda = match config.lambda {
        Some(l) => l,
        None => default_lambda(a, y)?,
    };
    let step = match config.step_rule {
        StepRule::Fixed(s) => s,
        StepRule::PowerIterationLipschitz => {
            let l = lipschitz_constant(a, config.seed);
            if l == 0.0 {
                // A = 0: every x with minimal ℓ1 norm is optimal
                return Ok(RecoveryResult {
                    estimate: vec![0.0; n],
                    support: Vec::new(),
                    residual_norm_history: Vec::new(),
                    objective_history: Vec::new(),
                    iterations_used: 0,
                    converged: true,
                    rank_deficient: false,
                });
            }
            1.0 / l
        }
    };

    let mut x = vec![0.0; n];
    let mut z = x.clone();
    let mut t = 1.0f64;
    let mut residuals = Vec::new();
    let mut objectives = Vec::new();
    let mut converged = false;

    for _ in 0..config.max_iterations {
        let grad = a.adjoint(&residual(a, &z, y)?)?;
        let next: Vec<f64> = z
            .iter()
            .zip(&grad)
            .map(|(zi, gi)| shrink(zi - step * gi, step * lambda))
            .collect();
        let moved = norm(&next.iter().zip(&x).map(|(p, q)| p - q).collect::<Vec<_>>());
        if momentum {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let w = (t - 1.0) / t_next;
            z = next.iter().zip(&x).map(|(p, q)| p + w * (p - q)).collect();
            t = t_next;
        } else {
            z.clone_from(&next);
        }
        x = next;
        let r = residual(a, &x, y)?;
        let rn = norm(&r);
        residuals.push(rn);
        objectives.push(0.5 * rn * rn + lambda * x.iter().map(|v| v.abs()).sum::<f64>());
        if moved <= config.residual_tolerance {
            converged = true;
            break;
        }
    }

    Ok(RecoveryResult {
        support: x
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect(),
        estimate: x,
        iterations_used: residuals.len(),
        residual_norm_history: residuals,
        objective_history: objectives,
        converged,
        rank_deficient: false,
    })
}

/// Ridge least-squares estimate `Â = YXᵀ(XXᵀ + ridge·I)⁻¹` from `(x, y)`
/// pairs. `ridge = None` uses `1e-6·trace(XXᵀ)/n`.
pub fn estimate_operator(pairs: &[(Vec<f64>, Vec<f64>)], ridge: Option<f64>) -> Result<SensingOperator> {
    let Some((x0, y0)) = pairs.first() else {
        return Err(Error::Parameter("operator estimation needs at least one pair".into()));
    };
    let (n, m) = (x0.len(), y0.len());
    if n == 0 || m == 0 {
        return Err(Error::Parameter("empty signal or observation".into()));
    }
    for (i, (x, y)) in pairs.iter().enumerate() {
        if x.len() != n || y.len() != m {
            return Err(Error::dim(
                "estimate_operator",
                format!("pair {i} has shapes ({}, {}), expected ({n}, {m})", x.len(), y.len()),
            ));
        }
    }
    if let Some(r) = ridge {
        if !(r >= 0.0) {
            return Err(Error::Parameter(format!("ridge must be >= 0, got {r}")));
        }
    }

    // G = XXᵀ (n×n), B = XYᵀ (n×m)
    let mut g = vec![0.0; n * n];
    let mut b = vec![0.0; n * m];
    for (x, y) in pairs {
        for i in 0..n {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for j in 0..n {
                g[i * n + j] += xi * x[j];
            }
            for j in 0..m {
                b[i * m + j] += xi * y[j];
            }
        }
    }
    let trace: f64 = (0..n).map(|i| g[i * n + i]).sum();
    let ridge = ridge.unwrap_or(1e-6 * trace / n as f64);
    for i in 0..n {
        g[i * n + i] += ridge;
    }
    // Âᵀ = G⁻¹B
    let at = linalg::spd_solve(n, &g, m, &b)?;
    let mut a = vec![0.0; m * n];
    for i in 0..n {
        for j in 0..m {
            a[j * n + i] = at[i * m + j];
        }
    }
    SensingOperator::from_dense(m, n, a, 0)
}
