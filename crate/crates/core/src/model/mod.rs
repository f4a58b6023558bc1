//! The TRUST reconstructor, a U-Net baseline, losses, training and
//! checkpointing.

mod checkpoint;
mod loss;
mod params;
mod train;
mod trust;
mod unet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint, CHECKPOINT_VERSION};
pub use loss::{loss, LossKind, LossWeights};
pub use params::{bind, Bound, ModelParams, ParamSpec, HEAD_PRIOR};
pub use train::{
    evaluate, forward, train, Adam, EpochRecord, EvalSummary, TrainConfig, TrainOutcome, EPOCH_LOG_HEADER,
};
pub use trust::{forward_trust, raw_token_gram, token_gram, trust_graph, GramMode, TrustGraph};
pub use unet::{forward_unet, unet_graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrustConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub encoder_depth: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub pool_grid: usize,
    /// `[bottleneck, stage₁ … stage_S, refinement…]`, where `S` is the
    /// number of ×2 stages from `pool_grid` to `image_size`.
    pub decoder_channels: Vec<usize>,
    /// 1-based encoder block feeding stage `i + 1`.
    pub skip_sources: Vec<usize>,
    pub skip_enabled: Vec<bool>,
    pub seed: u64,
}

impl Default for TrustConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            num_heads: 4,
            encoder_depth: 4,
            mlp_ratio: 2,
            pool_grid: 8,
            decoder_channels: vec![64, 32, 16, 8],
            skip_sources: vec![4, 2],
            skip_enabled: vec![true, true],
            seed: 0,
        }
    }
}

impl TrustConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn token_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.token_side() * self.token_side()
    }

    /// Number of ×2 upsampling stages.
    pub fn stages(&self) -> usize {
        (self.image_size / self.pool_grid).trailing_zeros() as usize
    }

    pub fn with_skips(mut self, enabled: bool) -> Self {
        self.skip_enabled.iter_mut().for_each(|e| *e = enabled);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if self.image_size == 0 || self.patch_size == 0 || self.embed_dim == 0 || self.num_heads == 0 {
            return bad("image, patch, embedding and head sizes must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.encoder_depth == 0 || self.mlp_ratio == 0 {
            return bad("encoder depth and MLP ratio must be positive".into());
        }
        if self.pool_grid == 0 || self.pool_grid > self.token_side() {
            return bad(format!(
                "pool grid {} must lie in 1..={} (token grid side)",
                self.pool_grid,
                self.token_side()
            ));
        }
        let ratio = self.image_size / self.pool_grid;
        if !self.image_size.is_multiple_of(self.pool_grid) || !ratio.is_power_of_two() {
            return bad(format!(
                "pool grid {} must reach image size {} by doubling",
                self.pool_grid, self.image_size
            ));
        }
        if self.decoder_channels.len() < self.stages() + 1 || self.decoder_channels.contains(&0) {
            return bad(format!(
                "decoder needs a bottleneck plus {} stage channel counts, got {:?}",
                self.stages(),
                self.decoder_channels
            ));
        }
        if self.skip_sources.len() != self.skip_enabled.len() {
            return bad("skip_sources and skip_enabled differ in length".into());
        }
        if self.skip_sources.len() > self.stages() {
            return bad(format!(
                "{} skips for {} decoder stages",
                self.skip_sources.len(),
                self.stages()
            ));
        }
        if let Some(b) = self.skip_sources.iter().find(|b| **b == 0 || **b > self.encoder_depth) {
            return bad(format!("skip source block {b} outside 1..={}", self.encoder_depth));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnetConfig {
    pub image_size: usize,
    /// Channels per level, finest first; levels − 1 halvings.
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: vec![8, 16, 32],
            seed: 0,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channels.len();
        if levels == 0 || self.channels.contains(&0) || self.image_size == 0 {
            return Err(Error::Parameter(
                "U-Net needs positive sizes and at least one level".into(),
            ));
        }
        if !self.image_size.is_multiple_of(1 << (levels - 1)) {
            return Err(Error::Parameter(format!(
                "image size {} cannot be halved {} times",
                self.image_size,
                levels - 1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelConfig {
    Trust(TrustConfig),
    Unet(UnetConfig),
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Trust(_) => "trust",
            ModelConfig::Unet(_) => "unet",
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            ModelConfig::Trust(c) => c.image_size,
            ModelConfig::Unet(c) => c.image_size,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ModelConfig::Trust(c) => c.seed,
            ModelConfig::Unet(c) => c.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Trust(c) => c.validate(),
            ModelConfig::Unet(c) => c.validate(),
        }
    }

    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        self.validate()?;
        Ok(match self {
            ModelConfig::Trust(c) => trust::param_specs(c),
            ModelConfig::Unet(c) => unet::param_specs(c),
        })
    }

    pub fn init(&self) -> Result<ModelParams> {
        ModelParams::init(&self.param_specs()?, self.seed())
    }
}

pub fn param_count(config: &ModelConfig) -> Result<usize> {
    Ok(config
        .param_specs()?
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum())
}

/// Multiply-adds of one forward pass (matrix products and convolutions).
pub fn flop_estimate(config: &ModelConfig) -> Result<u64> {
    config.validate()?;
    Ok(match config {
        ModelConfig::Trust(c) => trust::macs(c),
        ModelConfig::Unet(c) => unet::macs(c),
    })
}
