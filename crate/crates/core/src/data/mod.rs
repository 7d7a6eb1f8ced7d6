//! Feature records, planted synthetic data, collation and the record file
//! format.

mod collate;
mod generator;
mod io;

pub use collate::{collate, Batch, CollateLimits};
pub use generator::{generate, GeneratorConfig, PlantedGenerator, Split};
pub use io::{read_records, write_records, Manifest, RecordSet, SplitEntry, RECORD_FORMAT, RECORD_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const AUDIO_DIM: usize = 1027;
pub const VISION_DIM: usize = 768;
pub const TEXT_DIM: usize = 768;
pub const N_TARGETS: usize = 6;
pub const MAX_AUDIO_FRAMES: usize = 600;
pub const MAX_VISION_FRAMES: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Vision,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Vision, Modality::Text];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Vision => "vision",
            Modality::Text => "text",
        }
    }
}

/// Per-frame feature widths and target count of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDims {
    pub audio: usize,
    pub vision: usize,
    pub text: usize,
    pub targets: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        FeatureDims {
            audio: AUDIO_DIM,
            vision: VISION_DIM,
            text: TEXT_DIM,
            targets: N_TARGETS,
        }
    }
}

impl FeatureDims {
    pub fn validate(&self) -> Result<()> {
        if self.audio == 0 || self.vision == 0 || self.text == 0 || self.targets == 0 {
            return Err(Error::Parameter(format!("feature dims must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn of(&self, m: Modality) -> usize {
        match m {
            Modality::Audio => self.audio,
            Modality::Vision => self.vision,
            Modality::Text => self.text,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingFlags {
    pub audio: bool,
    pub vision: bool,
    pub text: bool,
}

impl MissingFlags {
    pub const NONE: MissingFlags = MissingFlags {
        audio: false,
        vision: false,
        text: false,
    };
    pub const ALL: MissingFlags = MissingFlags {
        audio: true,
        vision: true,
        text: true,
    };

    pub fn get(&self, m: Modality) -> bool {
        match m {
            Modality::Audio => self.audio,
            Modality::Vision => self.vision,
            Modality::Text => self.text,
        }
    }

    pub fn set(&mut self, m: Modality, missing: bool) {
        match m {
            Modality::Audio => self.audio = missing,
            Modality::Vision => self.vision = missing,
            Modality::Text => self.text = missing,
        }
    }

    pub fn as_array(&self) -> [bool; 3] {
        [self.audio, self.vision, self.text]
    }
}

/// One sample's pre-extracted features and its target vector. An absent
/// modality is `None`, which is what "flagged missing" means for a record.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub target: Vec<f64>,
    /// `[T_a×audio]` frames.
    pub audio: Option<Tensor>,
    /// `[T_v×vision]` frames.
    pub vision: Option<Tensor>,
    /// `[text]` vector.
    pub text: Option<Vec<f64>>,
}

impl FeatureRecord {
    pub fn missing(&self) -> MissingFlags {
        MissingFlags {
            audio: self.audio.is_none(),
            vision: self.vision.is_none(),
            text: self.text.is_none(),
        }
    }

    pub fn audio_frames(&self) -> usize {
        self.audio.as_ref().map_or(0, |t| t.rows())
    }

    pub fn vision_frames(&self) -> usize {
        self.vision.as_ref().map_or(0, |t| t.rows())
    }

    /// Checks widths, target range and finiteness. `line` is only used to
    /// locate the problem in error messages (0 when not read from a file).
    pub fn validate(&self, dims: &FeatureDims, line: usize) -> Result<()> {
        let schema = |field: &str, message: String| Error::Schema {
            line,
            field: field.to_string(),
            message,
        };
        if self.target.len() != dims.targets {
            return Err(schema(
                "target",
                format!("expected {} components, got {}", dims.targets, self.target.len()),
            ));
        }
        if let Some(bad) = self.target.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(schema("target", format!("component {bad} outside [0, 1]")));
        }
        for (field, seq, width) in [
            ("audio", &self.audio, dims.audio),
            ("vision", &self.vision, dims.vision),
        ] {
            if let Some(t) = seq {
                if t.shape().len() != 2 || t.cols() != width {
                    return Err(schema(field, format!("frame shape {:?}, expected [T, {width}]", t.shape())));
                }
                if !t.is_finite() {
                    return Err(schema(field, "non-finite feature value".into()));
                }
            }
        }
        if let Some(t) = &self.text {
            if t.len() != dims.text {
                return Err(schema("text", format!("expected {} values, got {}", dims.text, t.len())));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(schema("text", "non-finite feature value".into()));
            }
        }
        Ok(())
    }
}
