//! The multi-scale spherical decoder: spherical positional embedding, cross
//! attention fusion blocks with window-partitioned sub-sampled attention,
//! nested upsampling, Base/Fusion variants, a small planar reference encoder,
//! and the composed network.

mod caf;
mod encoder;
mod net;
mod spe;

pub use caf::{
    base_fuse_bwd, base_fuse_fwd, caf_backward, caf_forward, downsample_mean, mha_bwd, mha_fwd,
    rescon_bwd, rescon_fwd, upsample_nested, upsample_nested_bwd, window_mean_bwd, window_mean_fwd,
    BaseFuseCache, BaseFuseParams, CafCache, CafParams, LevelCtx, MhaCache, ResConvCache,
    ResConvUnit,
};
pub use encoder::{encoder_backward, encoder_forward, EncoderCache, EncoderParams, PlanarConv, PlanarFeat};
pub use net::{
    model_backward, model_forward, model_predict, training_loss_and_grads, FuseBlock, ModelCache,
    ModelContext, ModelGrads, ModelParams, TrainingStep,
};
pub use spe::{spe_bwd, spe_embed, CoordSet, PositionalKind, SpeParams};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Decoder fusion variant: plain additive fusion or cross attention fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Base,
    Fusion,
}

/// Full decoder configuration.
///
/// Levels run coarse→fine; each step either doubles nside or repeats it (a
/// repeated finest level is how the pixel-count ablation expresses its
/// "upsample" preset — the nested upsampling step becomes a pass-through).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub level_nsides: Vec<u32>,
    /// Decoder channels per level, coarse→fine.
    pub channels: Vec<usize>,
    /// Reference-encoder channels per level, coarse→fine (the coarse level
    /// consumes the deepest raster).
    pub encoder_channels: Vec<usize>,
    pub variant: Variant,
    /// Window size for sub-sampled attention, in ancestry levels (clamped per
    /// level so the ancestor exists).
    pub gsa_offset: u32,
    pub ffn_expansion: usize,
    pub heads: usize,
    pub positional: PositionalKind,
    pub spe_coords: CoordSet,
    #[serde(default)]
    pub allow_nonstandard_aspect: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            level_nsides: vec![4, 8, 16, 32],
            channels: vec![512, 320, 256, 256],
            encoder_channels: vec![256, 128, 64, 32],
            variant: Variant::Fusion,
            gsa_offset: 2,
            ffn_expansion: 4,
            heads: 4,
            positional: PositionalKind::Spe,
            spe_coords: CoordSet::Xyz,
            allow_nonstandard_aspect: false,
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.level_nsides.len()
    }

    /// Encoder raster stride feeding decoder level `lvl` (coarse→fine).
    pub fn stride_for_level(&self, lvl: usize) -> usize {
        4 << (self.levels() - 1 - lvl)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l < 2 {
            return Err(Error::invalid("need at least two decoder levels"));
        }
        if self.channels.len() != l || self.encoder_channels.len() != l {
            return Err(Error::invalid(
                "channels and encoder_channels must match level count",
            ));
        }
        for w in self.level_nsides.windows(2) {
            if w[1] != w[0] && w[1] != 2 * w[0] {
                return Err(Error::invalid(format!(
                    "level nsides must repeat or double, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if self.level_nsides.iter().any(|&n| n == 0 || !n.is_power_of_two()) {
            return Err(Error::invalid("level nsides must be powers of two"));
        }
        if self.heads == 0 || self.ffn_expansion == 0 {
            return Err(Error::invalid("heads and ffn_expansion must be ≥ 1"));
        }
        if self.variant == Variant::Fusion {
            for (lvl, &d) in self.channels.iter().enumerate().skip(1) {
                if d % self.heads != 0 {
                    return Err(Error::invalid(format!(
                        "level {lvl} channels {d} not divisible by {} heads",
                        self.heads
                    )));
                }
            }
        }
        if self.channels.iter().chain(self.encoder_channels.iter()).any(|&c| c < 2) {
            return Err(Error::invalid("channel counts must be ≥ 2"));
        }
        Ok(())
    }
}
