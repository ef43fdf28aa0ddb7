//! Two-branch training, inference, datasets, and checkpoints.

mod checkpoint;
mod data;
mod eval;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Scalar, Tensor};
use crate::sacm::GateParams;
use crate::vit::{EncoderParams, ModelConfig, Vit};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{
    generate_synthetic_dataset, glyph_pattern, load_image_folder, read_ppm, to_channels, write_ppm, ImageFolder,
    Sample, SyntheticSpec, NOISE_AMPLITUDE,
};
pub use eval::{evaluate, infer, infer_batch, DecisionMode, EvalMetrics, Inference, HIT_IOU};
pub use train::{
    compute_gradients, compute_loss, local_crop, train_step, EpochMetrics, LossParts, StepReport, TrainOptions,
    Trainer,
};

/// Encoder weights, gate MLP, and the config they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: EncoderParams<Tensor<T>>,
    pub gates: GateParams<T>,
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization. The gate MLP starts at zero, so every gate
    /// begins at exactly 0.5.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EncoderParams::init(&cfg, &mut rng);
        let gates = GateParams::zeros(&cfg);
        Ok(Self { cfg, params, gates })
    }

    pub fn vit(&self) -> Vit<'_, T> {
        Vit::new(&self.cfg, &self.params)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            gates: self.gates.cast(),
        }
    }
}
