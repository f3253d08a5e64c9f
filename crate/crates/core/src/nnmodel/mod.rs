//! Denoising network with two reference encoders, width-concatenated spatial
//! attention, embedding cross-attention, temporal attention and a keypoint
//! pose encoder.

mod checkpoint;
mod codec;
pub mod layers;
mod model;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use codec::{
    decode_latent, encode_latent, frames_to_latents, from_model_space, latents_to_frames, make_masked_latent,
    masked_latent_tensor, pool_mask, to_model_space,
};
pub use layers::{cross_attention, spatial_attention, spatial_attention_with_probs, temporal_attention, AttrFusion};
pub use model::{AttrGroup, DNet, EmbeddingEncoder, Model, PoseEncoder, ReferenceNet, References};
pub use params::{Init, ParamStore, Trainable};

use crate::error::{Error, Result};

/// Sizes of every network in the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    /// Feature channels per level; resolution halves at each level.
    pub channels: Vec<usize>,
    pub head_dim: usize,
    pub d_emb: usize,
    pub time_dim: usize,
    pub temb_dim: usize,
    pub groups: usize,
    pub pose_channels: usize,
    pub clip_len: usize,
    pub timesteps: usize,
    pub param_budget: usize,
    pub attr_fusion: AttrFusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 4,
            channels: vec![32, 64, 128],
            head_dim: 32,
            d_emb: 32,
            time_dim: 64,
            temb_dim: 128,
            groups: 8,
            pose_channels: 64,
            clip_len: 8,
            timesteps: 1000,
            param_budget: 5_000_000,
            attr_fusion: AttrFusion::Normalized,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for float64 gradient checks.
    pub fn micro() -> Self {
        Self {
            image_size: 16,
            patch: 4,
            channels: vec![8, 16],
            head_dim: 4,
            d_emb: 4,
            time_dim: 8,
            temb_dim: 8,
            groups: 4,
            pose_channels: 8,
            clip_len: 2,
            timesteps: 1000,
            param_budget: 5_000_000,
            attr_fusion: AttrFusion::Normalized,
        }
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// `(c_l, h_l, w_l)` of each pyramid level.
    pub fn level_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut s = self.latent_size();
        self.channels
            .iter()
            .map(|&c| {
                let shape = (c, s, s);
                s /= 2;
                shape
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch == 0 || self.image_size % self.patch != 0 {
            return bad(format!("image size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be non-empty and positive".into());
        }
        if self.latent_size() % (1 << (self.levels() - 1)) != 0 {
            return bad(format!("latent side {} cannot be halved {} times", self.latent_size(), self.levels() - 1));
        }
        for &c in &self.channels {
            if self.head_dim == 0 || c % self.head_dim != 0 {
                return bad(format!("channels {c} not divisible by head dim {}", self.head_dim));
            }
        }
        let mut norm_widths = self.channels.clone();
        for w in self.channels.windows(2) {
            norm_widths.push(w[0] + w[1]);
        }
        for c in norm_widths {
            if self.groups == 0 || c % self.groups != 0 {
                return bad(format!("width {c} not divisible by {} groups", self.groups));
            }
        }
        if self.d_emb == 0 || self.time_dim == 0 || self.time_dim % 2 != 0 || self.temb_dim == 0 {
            return bad("embedding sizes must be positive (time dim even)".into());
        }
        if self.pose_channels == 0 || self.clip_len == 0 || self.timesteps < 2 {
            return bad("pose channels, clip length and timesteps must be positive".into());
        }
        Ok(())
    }
}
