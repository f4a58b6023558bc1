use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ssim_tape, SsimParams};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L2,
    L2L1,
    L2Ssim,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '+', '-'], "").as_str() {
            "l2" => Ok(Self::L2),
            "l2l1" => Ok(Self::L2L1),
            "l2ssim" => Ok(Self::L2Ssim),
            _ => Err(Error::Parameter(format!(
                "unknown loss kind '{s}' (expected l2, l2l1 or l2ssim)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::L2 => "l2",
            Self::L2L1 => "l2l1",
            Self::L2Ssim => "l2ssim",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_ssim: f64,
    pub ssim: SsimParams,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l1: 0.1,
            lambda_ssim: 0.5,
            ssim: SsimParams::default(),
        }
    }
}

/// `mean((x̂−x)²)`, plus `λ₁·mean|x̂−x|` or `λ_ssim·(1 − ssim)` by kind.
pub fn loss(tape: &mut Tape, kind: LossKind, pred: Var, target: Var, w: &LossWeights) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shapes("loss", tape.shape(pred), tape.shape(target)));
    }
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    let l2 = tape.reduce_mean(sq);
    match kind {
        LossKind::L2 => Ok(l2),
        LossKind::L2L1 => {
            let a = tape.abs(diff);
            let l1 = tape.reduce_mean(a);
            let l1 = tape.scalar_mul(l1, w.lambda_l1);
            tape.add(l2, l1)
        }
        LossKind::L2Ssim => {
            let s = ssim_tape(tape, pred, target, w.ssim)?;
            let gap = tape.scalar_mul(s, -w.lambda_ssim);
            let gap = tape.add_scalar(gap, w.lambda_ssim);
            tape.add(l2, gap)
        }
    }
}
