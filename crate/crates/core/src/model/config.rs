use serde::{Deserialize, Serialize};

use crate::data::{FeatureDims, AUDIO_DIM, MAX_AUDIO_FRAMES, MAX_VISION_FRAMES, N_TARGETS, TEXT_DIM, VISION_DIM};
use crate::error::{Error, Result};
use crate::nn::NormPlacement;

/// Modality whose representation queries the other two.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    #[default]
    Text,
    Audio,
    Vision,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Anchor-queried cross-attention readouts of the other modalities.
    #[default]
    TaCrossAttention,
    /// Per-modality self-attention, mean-pooled and concatenated.
    SelfAttentionOnly,
    /// Mean-pooled projections concatenated without attention.
    SimpleConcat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaemiConfig {
    pub d_audio_in: usize,
    pub d_vision_in: usize,
    pub d_text_in: usize,
    pub d_latent: usize,
    pub n_targets: usize,
    pub head_count: usize,
    pub mlp_hidden: usize,
    pub mlp_dropout: f64,
    pub modality_dropout_p: f64,
    pub anchor: Anchor,
    pub fusion: Fusion,
    /// Learnable placeholders for missing modalities; zeros when false.
    pub use_missing_tokens: bool,
    pub norm: NormPlacement,
    pub positional_encoding: bool,
    /// Feed raw text straight to the cross-attention query projection, so
    /// that one layer serves as both text projection and query projection.
    pub shared_text_query: bool,
    pub max_audio_frames: usize,
    pub max_vision_frames: usize,
}

impl Default for TaemiConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl TaemiConfig {
    pub fn reference() -> Self {
        TaemiConfig {
            d_audio_in: AUDIO_DIM,
            d_vision_in: VISION_DIM,
            d_text_in: TEXT_DIM,
            d_latent: 512,
            n_targets: N_TARGETS,
            head_count: 4,
            mlp_hidden: 512,
            mlp_dropout: 0.1,
            modality_dropout_p: 0.1,
            anchor: Anchor::Text,
            fusion: Fusion::TaCrossAttention,
            use_missing_tokens: true,
            norm: NormPlacement::Post,
            positional_encoding: false,
            shared_text_query: false,
            max_audio_frames: MAX_AUDIO_FRAMES,
            max_vision_frames: MAX_VISION_FRAMES,
        }
    }

    /// Small widths with the reference structure, for fast checks.
    pub fn tiny() -> Self {
        TaemiConfig {
            d_audio_in: 7,
            d_vision_in: 5,
            d_text_in: 6,
            d_latent: 8,
            head_count: 2,
            mlp_hidden: 8,
            n_targets: 3,
            max_audio_frames: 12,
            max_vision_frames: 10,
            ..Self::reference()
        }
    }

    pub fn feature_dims(&self) -> FeatureDims {
        FeatureDims {
            audio: self.d_audio_in,
            vision: self.d_vision_in,
            text: self.d_text_in,
            targets: self.n_targets,
        }
    }

    pub fn d_in(&self, anchor: Anchor) -> usize {
        match anchor {
            Anchor::Text => self.d_text_in,
            Anchor::Audio => self.d_audio_in,
            Anchor::Vision => self.d_vision_in,
        }
    }

    /// Width of the vector fed to the MLP head.
    pub fn fused_dim(&self) -> usize {
        match self.fusion {
            Fusion::TaCrossAttention => self.d_in(self.anchor) + 2 * self.d_latent,
            Fusion::SelfAttentionOnly => self.d_text_in + 2 * self.d_latent,
            Fusion::SimpleConcat => 3 * self.d_latent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("d_audio_in", self.d_audio_in),
            ("d_vision_in", self.d_vision_in),
            ("d_text_in", self.d_text_in),
            ("d_latent", self.d_latent),
            ("n_targets", self.n_targets),
            ("head_count", self.head_count),
            ("mlp_hidden", self.mlp_hidden),
            ("max_audio_frames", self.max_audio_frames),
            ("max_vision_frames", self.max_vision_frames),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("{name} must be positive")));
        }
        if !self.d_latent.is_multiple_of(self.head_count) {
            return Err(Error::Parameter(format!(
                "d_latent {} not divisible by head_count {}",
                self.d_latent, self.head_count
            )));
        }
        for (name, p) in [("modality_dropout_p", self.modality_dropout_p), ("mlp_dropout", self.mlp_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Parameter(format!("{name} = {p} not in [0, 1)")));
            }
        }
        if self.fusion != Fusion::TaCrossAttention && self.anchor != Anchor::Text {
            return Err(Error::Parameter(format!(
                "anchor {:?} only applies to cross-attention fusion",
                self.anchor
            )));
        }
        if self.shared_text_query && (self.fusion != Fusion::TaCrossAttention || self.anchor != Anchor::Text) {
            return Err(Error::Parameter(
                "shared_text_query needs text-anchored cross-attention fusion".into(),
            ));
        }
        Ok(())
    }
}
