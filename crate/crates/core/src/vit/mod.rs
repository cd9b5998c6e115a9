//! The ViT classifier: patch embedding, class token, positional embedding,
//! a pre-norm encoder stack and a linear head.

mod checkpoint;
mod config;
mod model;
mod patch;

pub use checkpoint::{write_atomic, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Task, ViTConfig};
pub use model::{closed_form_params, count_params, per_block_params, Encoded, ViTModel};
pub use patch::{patchify, patchify_batch, unpatchify};
