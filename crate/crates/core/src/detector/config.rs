//! Model and training configuration.
//!
//! Defaults mirror the reference hyperparameters (loss weights 2/5/2,
//! attention regularizers 1e-4, 500 proposals, T = 1000, signal scale 2);
//! the desk-scale knobs (backbone width, image size, iteration count) are
//! what experiments override.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::adamw::AdamWConfig;

/// Pyramid strides for levels P2..P5.
pub const FPN_STRIDES: [usize; 4] = [4, 8, 16, 32];
/// Number of pyramid levels (and fusion blocks).
pub const NUM_LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Dual backbone with per-level fusion.
    Fused,
    /// Single RGB backbone, no fusion; the ablation baseline.
    RgbOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneDepth {
    /// One residual block per stage.
    Tiny,
    /// Two residual blocks per stage.
    Small,
}

impl BackboneDepth {
    pub fn blocks_per_stage(self) -> usize {
        match self {
            BackboneDepth::Tiny => 1,
            BackboneDepth::Small => 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub mode: EncoderMode,
    pub backbone: BackboneDepth,
    /// Stage widths (C2..C5 sources); stem uses the first entry.
    pub stage_widths: [usize; 4],
    /// Per-branch pyramid width in fused mode; the concatenated width is
    /// twice this. Ignored in RGB-only mode.
    pub branch_width: usize,
    /// Decoder-facing width C'. In RGB-only mode the single FPN emits this
    /// directly, so both configurations feed the decoder identically.
    pub c_prime: usize,
    /// Channel-MLP reduction ratio of the fusion blocks.
    pub reduction: usize,
    /// Spatial-attention kernel size.
    pub spatial_kernel: usize,
    pub num_proposals: usize,
    pub num_classes: usize,
    /// Decoder hidden width.
    pub d_model: usize,
    /// Sinusoidal time-embedding width.
    pub time_dim: usize,
    /// Diffusion training steps T.
    pub t_max: usize,
    /// Square input size in pixels; must be divisible by 32.
    pub image_size: usize,
    pub sampler: SamplerConfig,
    pub loss: LossWeights,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Optional penalty on spatial attention outside ground-truth regions.
    pub exterior_penalty: bool,
    /// Post-sampling score threshold and NMS IoU.
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: EncoderMode::Fused,
            backbone: BackboneDepth::Tiny,
            stage_widths: [16, 32, 64, 128],
            branch_width: 128,
            c_prime: 256,
            reduction: 16,
            spatial_kernel: 7,
            num_proposals: 500,
            num_classes: 3,
            d_model: 128,
            time_dim: 64,
            t_max: 1000,
            image_size: 64,
            sampler: SamplerConfig::default(),
            loss: LossWeights::with_levels(NUM_LEVELS),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            exterior_penalty: false,
            score_threshold: 0.05,
            nms_iou: 0.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Concatenated fusion width C (fused mode only).
    pub fn concat_width(&self) -> usize {
        2 * self.branch_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 32 != 0 {
            return Err(Error::Config("image_size must be divisible by 32".into()));
        }
        if self.mode == EncoderMode::Fused {
            if self.c_prime > self.concat_width() {
                return Err(Error::Config(format!(
                    "C' ({}) exceeds concatenated width ({})",
                    self.c_prime,
                    self.concat_width()
                )));
            }
            if self.concat_width() % self.reduction != 0 {
                return Err(Error::Config("reduction ratio must divide the concat width".into()));
            }
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(Error::Config("spatial kernel must be odd".into()));
        }
        if self.num_proposals == 0 || self.num_classes == 0 {
            return Err(Error::Config("proposals and classes must be positive".into()));
        }
        if self.loss.lambda_c.len() != NUM_LEVELS || self.loss.lambda_s.len() != NUM_LEVELS {
            return Err(Error::Config("per-level loss weights must cover all levels".into()));
        }
        for w in self.stage_widths {
            if w % 8 != 0 {
                return Err(Error::Config("stage widths must be divisible by 8 (GroupNorm)".into()));
            }
        }
        if self.sampler.num_steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        Ok(())
    }

    /// Stable hash of the serialized config, embedded in checkpoints.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize().into()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Dataset directory: `annotations.json` plus `images/`.
    pub dataset_dir: String,
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub warmup_iters: usize,
    /// Output directory for checkpoints and logs.
    pub out_dir: String,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            dataset_dir: "data/synth".into(),
            iterations: 1000,
            batch_size: 4,
            optimizer: AdamWConfig::default(),
            warmup_iters: 100,
            out_dir: "runs/default".into(),
            checkpoint_every: 500,
            log_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::Config("batch size and iterations must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
