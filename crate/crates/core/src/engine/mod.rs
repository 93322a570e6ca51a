//! Losses, the staged trilevel updates, the architecture hypergradient
//! and the training loop for the genseg, separate and baseline modes.

mod adamw;
mod config;
mod losses;
mod train;
mod trilevel;

pub use adamw::AdamW;
pub use config::{Backend, Mode, TrainConfig, KEYS};
pub use losses::{
    bce_with_logits, discriminator_loss, gan_losses, generator_loss, pixel_cross_entropy, segmentation_loss, GanLosses,
};
pub use train::{evaluate, genseg_iteration, train, Evaluation, IterationReport, Snapshot, TrainOutcome, TrainState};
pub use trilevel::{
    descend, generate, hypergradient, stage1_update, stage2_objective, stage2_update, stage3_hypergrad, synth_batch,
    unrolled_val_loss, validation_gradient, Batch, HyperInputs, Hypergrad, Params, Stage1,
};

use rand::Rng;

use crate::error::Result;
use crate::models::{DiscriminatorNet, GeneratorNet, ModelConfig, SegNet};
use crate::scalar::Real;

/// The generator, discriminator and segmenter built from one model config.
#[derive(Debug, Clone)]
pub struct Networks {
    pub gen: GeneratorNet,
    pub disc: DiscriminatorNet,
    pub seg: SegNet,
}

impl Networks {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        Ok(Self { gen: GeneratorNet::new(cfg)?, disc: DiscriminatorNet::new(cfg), seg: SegNet::new(cfg) })
    }

    /// Seeded initialization in the order G and A, H, S.
    pub fn init<T: Real>(&self, rng: &mut impl Rng) -> Params<T> {
        let (g, a) = self.gen.init(rng);
        let h = self.disc.init(rng);
        let s = self.seg.init(rng);
        Params { g, h, s, a }
    }
}
