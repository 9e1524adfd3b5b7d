//! End-to-end detector: dual-backbone encoder with per-level fusion,
//! diffusion decoder head, training loop, evaluation, synthetic data, and
//! checkpointing.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod infer;
pub mod pca;
pub mod synth;
pub mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{make_cosine_schedule, NoiseSchedule};
use crate::error::Result;
use crate::nn::params::ParamStore;
use crate::scalar::Scalar;

use checkpoint::LoadedCheckpoint;
use config::ModelConfig;
use decoder::Decoder;
use encoder::Encoder;

/// A built detector: parameters plus the encoder/decoder structure and the
/// diffusion schedule.
pub struct Model<F> {
    pub cfg: ModelConfig,
    pub ps: ParamStore<F>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub schedule: NoiseSchedule,
}

impl<F: Scalar> Model<F> {
    /// Fresh model with parameters seeded from the config.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ps = ParamStore::new();
        let encoder = encoder::build_encoder(&mut ps, &mut rng, cfg)?;
        let decoder = Decoder::new(&mut ps, &mut rng, cfg);
        let schedule = make_cosine_schedule(cfg.t_max);
        schedule.validate()?;
        Ok(Self { cfg: cfg.clone(), ps, encoder, decoder, schedule })
    }

    /// Rebuild from a checkpoint's embedded config and restore parameters.
    pub fn load(path: &Path) -> Result<(Self, LoadedCheckpoint<F>)> {
        let ckpt = checkpoint::load_checkpoint::<F>(path)?;
        let mut model = Self::build(&ckpt.config)?;
        checkpoint::restore_params(&mut model.ps, &ckpt)?;
        Ok((model, ckpt))
    }
}
