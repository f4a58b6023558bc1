//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is checking.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Elements with a raw relative error of at least 1e-6 whose gap lies
    /// below the difference quotient's roundoff [`resolution`]; they count
    /// as matches.
    pub below_resolution: usize,
    pub max_rel_err: f64,
    /// Element with the largest relative error.
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Roundoff multiplier in [`resolution`].
pub const ROUNDOFF_FACTOR: f64 = 8.0;

/// Smallest gradient gap a central difference of `f ≈ value` can resolve:
/// `ROUNDOFF_FACTOR · ε · max(|value|, 1) / step`.
pub fn resolution(value: f64, step: f64) -> f64 {
    ROUNDOFF_FACTOR * f64::EPSILON * value.abs().max(1.0) / step
}

/// `|a − n| / (|a| + 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + 1e-8)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.shape(out).iter().product::<usize>() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    Ok(tape.scalar(out))
}

/// Checks every element of every input. See [`check_sampled`].
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_sampled(inputs, step, usize::MAX, f)
}

/// Compares tape gradients of the scalar `f` against central differences,
/// visiting at most `per_input` evenly strided elements of each input.
pub fn check_sampled<F>(inputs: &[Tensor], step: f64, per_input: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = GradCheckReport {
        checked: 0,
        below_resolution: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let n = inputs[idx].numel();
        let analytic = tape.grad(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(per_input.min(n)).max(1);
        for e in (0..n).step_by(stride) {
            let orig = inputs[idx].data()[e];
            probe[idx].data_mut()[e] = orig + step;
            let plus = eval(&f, &probe)?;
            probe[idx].data_mut()[e] = orig - step;
            let minus = eval(&f, &probe)?;
            probe[idx].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let gap = (analytic[e] - numeric).abs();
            let raw = rel_err(analytic[e], numeric);
            let err = if gap <= resolution(plus.abs().max(minus.abs()), step) {
                report.below_resolution += usize::from(raw >= 1e-6);
                0.0
            } else {
                raw
            };
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(Mismatch {
                    input: idx,
                    element: e,
                    analytic: analytic[e],
                    numeric,
                    rel_err: err,
                });
            }
        }
    }
    Ok(report)
}
