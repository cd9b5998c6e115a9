use serde::{Deserialize, Serialize};

use crate::attention::{check_rank, AttentionMode};
use crate::error::{Error, Result};

/// The two classification tasks, each with its own architecture preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Binary,
    Multiclass,
}

impl Task {
    pub fn preset(self) -> ViTConfig {
        match self {
            Task::Binary => ViTConfig::binary(),
            Task::Multiclass => ViTConfig::multiclass(),
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Task::Binary => 2,
            Task::Multiclass => 3,
        }
    }

    /// Published parameter count for the preset. Kept for side-by-side
    /// reporting; the architecture as specified does not reach it.
    pub fn reference_param_count(self) -> u64 {
        match self {
            Task::Binary => 2_800_000,
            Task::Multiclass => 6_900_000,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Binary => "binary",
            Task::Multiclass => "multiclass",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Task::Binary),
            "multiclass" => Ok(Task::Multiclass),
            other => Err(Error::contract(format!(
                "unknown task {other:?} (expected binary or multiclass)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub layers: usize,
    pub hidden_size: usize,
    pub mlp_size: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Rank `k` of the sequence projection in linear attention mode.
    pub proj_rank: usize,
    pub attention_mode: AttentionMode,
    /// One projection for both keys and values.
    pub share_kv: bool,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl ViTConfig {
    /// 12 layers, hidden 64, MLP 128, 8 heads, patch 32 at 224×224, 2 classes.
    pub fn binary() -> Self {
        ViTConfig {
            layers: 12,
            hidden_size: 64,
            mlp_size: 128,
            heads: 8,
            patch_size: 32,
            image_size: 224,
            channels: 3,
            num_classes: 2,
            proj_rank: 32,
            attention_mode: AttentionMode::Linear,
            share_kv: true,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
            seed: 0,
        }
    }

    /// The binary preset with 32 layers and 3 classes.
    pub fn multiclass() -> Self {
        ViTConfig {
            layers: 32,
            num_classes: 3,
            ..Self::binary()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Contract(format!("invalid model config: {m}")));
        if self.layers == 0 || self.hidden_size == 0 || self.mlp_size == 0 || self.channels == 0 {
            return fail("layers, hidden_size, mlp_size and channels must be positive".into());
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.hidden_size % self.heads != 0 {
            return fail(format!(
                "hidden_size {} is not a multiple of heads {}",
                self.hidden_size, self.heads
            ));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes {} < 2", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        if self.attention_mode == AttentionMode::Linear {
            check_rank(self.proj_rank, self.seq_len())?;
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Encoder sequence length: patches plus the class token.
    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    /// Values per flattened patch.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}
