//! Segmentation network: image/event encoders, adaptive cross-modal fusion,
//! event-guided memory matching, identity assignment and the mask decoder.

mod acmf;
mod checkpoint;
mod decoder;
mod egmm;
mod encoder;
mod guide;
mod id_assign;
pub(crate) mod network;
mod params;

pub use acmf::{acmf_forward, acmf_specs, concat_fusion_forward, concat_fusion_specs};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use decoder::{decode_mask, decoder_specs};
pub use egmm::{egmm_match, MatchEntry, MatchOutput};
pub use encoder::{encode_event, encode_image, encoder_specs, Features};
pub use guide::{guide, guide_specs};
pub use id_assign::{id_assign, id_assign_specs, one_hot};
pub use network::{MaskLogits, MemoryBank, MemoryEntry, SequenceState, VosModel};
pub use params::{Ctx, Init, ParamSpec, ParamStore};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_channels: usize,
    /// Temporal bins of the event voxel grid.
    pub bins: usize,
    /// Channel widths at scales 1/4, 1/8, 1/16.
    pub widths: [usize; 3],
    /// Attention key/value width; equals `widths[2]` so readouts add onto the
    /// 1/16 feature.
    pub key_dim: usize,
    pub mask_dim: usize,
    /// Width of the Guide module's multi-kernel stage.
    pub guide_dim: usize,
    /// Identity slots (max objects); logits have `slots + 1` channels.
    pub slots: usize,
    pub egmm_blocks: usize,
    pub gn_groups: usize,
    pub use_image: bool,
    pub use_event: bool,
    pub use_acmf: bool,
    pub use_egmm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            bins: crate::event::DEFAULT_BINS,
            widths: [32, 64, 128],
            key_dim: 128,
            mask_dim: 32,
            guide_dim: 64,
            slots: 10,
            egmm_blocks: 3,
            gn_groups: 4,
            use_image: true,
            use_event: true,
            use_acmf: true,
            use_egmm: true,
        }
    }
}

impl ModelConfig {
    /// Narrow variant for fast experiments and tests.
    pub fn small() -> Self {
        Self {
            widths: [16, 32, 64],
            key_dim: 64,
            mask_dim: 16,
            guide_dim: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_channels == 0 || self.bins == 0 {
            return bad("image_channels and bins must be positive".into());
        }
        if self.widths.iter().any(|&w| w == 0 || w % self.gn_groups.max(1) != 0) || self.gn_groups == 0 {
            return bad(format!(
                "widths {:?} must be positive multiples of gn_groups {}",
                self.widths, self.gn_groups
            ));
        }
        if self.key_dim != self.widths[2] {
            return bad(format!(
                "key_dim {} must equal the 1/16 width {}",
                self.key_dim, self.widths[2]
            ));
        }
        if self.slots == 0 || self.slots > 254 {
            return bad(format!("slots {} outside 1..=254", self.slots));
        }
        if self.egmm_blocks == 0 {
            return bad("at least one matching block is required".into());
        }
        if self.mask_dim == 0 || self.guide_dim == 0 {
            return bad("mask_dim and guide_dim must be positive".into());
        }
        Ok(())
    }

    /// Every parameter the configured network uses.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let [c4, c8, c16] = self.widths;
        let mut specs = Vec::new();
        specs.extend(encoder_specs("enc_img", self.image_channels, self.widths));
        specs.extend(encoder_specs("enc_evt", self.bins, self.widths));
        for (s, c) in [c4, c8, c16].into_iter().enumerate() {
            let prefix = format!("fuse{s}");
            if self.use_acmf {
                specs.extend(acmf_specs(&prefix, c));
            } else {
                specs.extend(concat_fusion_specs(&prefix, c));
            }
        }
        specs.extend(id_assign_specs("id", self.slots, self.mask_dim));
        for l in 0..self.egmm_blocks {
            specs.extend(egmm::block_specs(&format!("egmm{l}"), self));
        }
        specs.extend(decoder_specs("dec", self.key_dim, self.widths, self.slots));
        specs
    }
}
