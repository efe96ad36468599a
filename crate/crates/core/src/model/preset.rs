use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Encoder/decoder size descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackbonePreset {
    pub name: String,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub drop_path_rate: f64,
}

pub const PRESET_NAMES: [&str; 6] = ["toy-b", "toy-l", "toy-h", "vit-b", "vit-l", "vit-h"];

/// Desk-scale presets in sweep order.
pub const TOY_PRESETS: [&str; 3] = ["toy-b", "toy-l", "toy-h"];

impl BackbonePreset {
    fn make(
        name: &str,
        (embed_dim, depth, heads): (usize, usize, usize),
        (decoder_dim, decoder_depth, decoder_heads): (usize, usize, usize),
    ) -> Self {
        Self {
            name: name.to_string(),
            embed_dim,
            depth,
            heads,
            mlp_ratio: 4,
            decoder_dim,
            decoder_depth,
            decoder_heads,
            drop_path_rate: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidPreset(format!("{}: depth must be >= 1", self.name)));
        }
        self.validate_dims()
    }

    /// Divisibility checks only; depth 0 is allowed here for degenerate
    /// test models.
    pub(crate) fn validate_dims(&self) -> Result<()> {
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidPreset(format!(
                "{}: embed dim {} not divisible by {} heads",
                self.name, self.embed_dim, self.heads
            )));
        }
        if self.decoder_heads == 0 || !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return Err(Error::InvalidPreset(format!(
                "{}: decoder dim {} not divisible by {} heads",
                self.name, self.decoder_dim, self.decoder_heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::InvalidPreset(format!("{}: zero mlp ratio", self.name)));
        }
        Ok(())
    }
}

/// Looks up a named preset.
///
/// The `toy-*` presets scale width and depth along the same axis as the
/// ViT-B/L/H family and use a two-block decoder at half the encoder width.
/// The `vit-*` presets carry the conventional encoder sizes with a four-block
/// masked-autoencoder decoder; they build and train, just slowly.
pub fn backbone_preset(name: &str) -> Result<BackbonePreset> {
    let p = match name {
        "toy-b" => BackbonePreset::make(name, (64, 4, 4), (32, 2, 4)),
        "toy-l" => BackbonePreset::make(name, (96, 8, 6), (48, 2, 6)),
        "toy-h" => BackbonePreset::make(name, (128, 12, 8), (64, 2, 8)),
        "vit-b" => BackbonePreset::make(name, (768, 12, 12), (384, 4, 6)),
        "vit-l" => BackbonePreset::make(name, (1024, 24, 16), (512, 4, 8)),
        "vit-h" => BackbonePreset::make(name, (1280, 32, 16), (640, 4, 8)),
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    Ok(p)
}
