//! Fixtures shared by the criterion benches.

use linvit::attention::{LinformerParams, MhaParams};
use linvit::data::synthetic_image_set;
use linvit::{Result, Tensor, ViTConfig, ViTModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sequence lengths for the scaling benches.
pub const SEQ_LENS: [usize; 5] = [256, 512, 1024, 2048, 4096];
pub const D_MODEL: usize = 64;
pub const HEADS: usize = 8;
pub const RANK: usize = 64;

pub struct AttentionInputs {
    pub x: Tensor<f32>,
    pub standard: MhaParams<f32>,
    pub linear: LinformerParams<f32>,
}

pub fn attention_inputs(n: usize) -> Result<AttentionInputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    Ok(AttentionInputs {
        x: Tensor::randn([n, D_MODEL], 1.0, &mut rng),
        standard: MhaParams::random(D_MODEL, HEADS, 0.1, &mut rng)?,
        linear: LinformerParams::random(D_MODEL, HEADS, n, RANK.min(n), true, 0.1, &mut rng)?,
    })
}

/// A freshly initialized model and one preprocessed batch for it.
pub fn model_and_batch(config: &ViTConfig, batch: usize) -> Result<(ViTModel<f32>, Tensor<f32>)> {
    let model = ViTModel::init(config, 0)?;
    let classes: Vec<usize> = (0..config.num_classes.min(3)).collect();
    let per_class = batch.div_ceil(classes.len());
    let set = synthetic_image_set(&classes, per_class, config.image_size, 0)?;
    let idx: Vec<usize> = (0..batch).collect();
    Ok((model, set.batch(&idx)?))
}
