//! Lightweight vision transformer with Linformer attention for classifying
//! ultrasound frames.
//!
//! The crate is self-contained: a small reverse-mode autodiff tape
//! ([`tape`]), standard and low-rank attention ([`attention`]), the ViT
//! classifier and its checkpoint format ([`vit`]), frame preprocessing and
//! dataset handling ([`data`]), weighted cross-entropy training and
//! evaluation metrics ([`train`]), and timing harnesses ([`bench`]).

pub mod attention;
pub mod bench;
pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
pub use vit::{Checkpoint, Task, ViTConfig, ViTModel};
