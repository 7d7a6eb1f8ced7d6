use serde::{Deserialize, Serialize};

use super::{FeatureDims, FeatureRecord, MissingFlags, MAX_AUDIO_FRAMES, MAX_VISION_FRAMES};
use crate::error::{Error, Result};
use crate::model::{ModalityBundle, Sequence, TaemiConfig};
use crate::tensor::Tensor;

/// Padded lengths and feature widths used by [`collate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollateLimits {
    pub max_audio: usize,
    pub max_vision: usize,
    pub dims: FeatureDims,
}

impl Default for CollateLimits {
    fn default() -> Self {
        CollateLimits {
            max_audio: MAX_AUDIO_FRAMES,
            max_vision: MAX_VISION_FRAMES,
            dims: FeatureDims::default(),
        }
    }
}

impl From<&TaemiConfig> for CollateLimits {
    fn from(c: &TaemiConfig) -> Self {
        CollateLimits {
            max_audio: c.max_audio_frames,
            max_vision: c.max_vision_frames,
            dims: c.feature_dims(),
        }
    }
}

/// Padded, masked group of records. Blocks are row-major:
/// audio `[B×max_audio×audio]`, vision `[B×max_vision×vision]`,
/// text `[B×text]`, targets `[B×targets]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub limits: CollateLimits,
    pub ids: Vec<String>,
    pub audio: Vec<f64>,
    pub audio_mask: Vec<bool>,
    pub vision: Vec<f64>,
    pub vision_mask: Vec<bool>,
    pub text: Vec<f64>,
    pub missing: Vec<MissingFlags>,
    pub targets: Vec<f64>,
}

/// Pads each sequence to the limits, keeping the prefix of longer ones.
pub fn collate(records: &[FeatureRecord], limits: &CollateLimits) -> Result<Batch> {
    if records.is_empty() {
        return Err(Error::Validation("cannot collate an empty record list".into()));
    }
    if limits.max_audio == 0 || limits.max_vision == 0 {
        return Err(Error::Parameter("padded lengths must be positive".into()));
    }
    let dims = limits.dims;
    for (i, r) in records.iter().enumerate() {
        r.validate(&dims, 0)
            .map_err(|e| Error::Validation(format!("record {i} ({}): {e}", r.id)))?;
    }
    let b = records.len();
    // vec![0.0; n] is a zeroed allocation, so untouched padding costs nothing.
    let mut audio = vec![0.0; b * limits.max_audio * dims.audio];
    let mut vision = vec![0.0; b * limits.max_vision * dims.vision];
    let mut audio_mask = vec![false; b * limits.max_audio];
    let mut vision_mask = vec![false; b * limits.max_vision];
    let mut text = vec![0.0; b * dims.text];
    let mut targets = Vec::with_capacity(b * dims.targets);

    for (i, r) in records.iter().enumerate() {
        copy_prefix(r.audio.as_ref(), limits.max_audio, dims.audio, i, &mut audio, &mut audio_mask);
        copy_prefix(r.vision.as_ref(), limits.max_vision, dims.vision, i, &mut vision, &mut vision_mask);
        if let Some(t) = &r.text {
            text[i * dims.text..(i + 1) * dims.text].copy_from_slice(t);
        }
        targets.extend_from_slice(&r.target);
    }
    Ok(Batch {
        size: b,
        limits: *limits,
        ids: records.iter().map(|r| r.id.clone()).collect(),
        audio,
        audio_mask,
        vision,
        vision_mask,
        text,
        missing: records.iter().map(FeatureRecord::missing).collect(),
        targets,
    })
}

fn copy_prefix(
    seq: Option<&Tensor>,
    max_len: usize,
    width: usize,
    sample: usize,
    block: &mut [f64],
    mask: &mut [bool],
) {
    let Some(t) = seq else { return };
    let keep = t.rows().min(max_len);
    let base = sample * max_len;
    block[base * width..(base + keep) * width].copy_from_slice(&t.data()[..keep * width]);
    mask[base..base + keep].iter_mut().for_each(|m| *m = true);
}

impl Batch {
    pub fn audio_lengths(&self) -> Vec<usize> {
        count_rows(&self.audio_mask, self.limits.max_audio)
    }

    pub fn vision_lengths(&self) -> Vec<usize> {
        count_rows(&self.vision_mask, self.limits.max_vision)
    }

    pub fn target_row(&self, i: usize) -> &[f64] {
        let k = self.limits.dims.targets;
        &self.targets[i * k..(i + 1) * k]
    }

    /// Model input for sample `i`, holding only its valid frames.
    pub fn bundle(&self, i: usize) -> ModalityBundle {
        let dims = self.limits.dims;
        let flags = self.missing[i];
        let seq = |block: &[f64], mask: &[bool], max_len: usize, width: usize, missing: bool| {
            if missing {
                return None;
            }
            let valid = mask[i * max_len..(i + 1) * max_len].iter().filter(|&&m| m).count();
            let start = i * max_len * width;
            let frames = block[start..start + valid * width].to_vec();
            Some(Sequence::full(
                Tensor::matrix(valid, width, frames).expect("present modality has frames"),
            ))
        };
        ModalityBundle {
            audio: seq(&self.audio, &self.audio_mask, self.limits.max_audio, dims.audio, flags.audio),
            vision: seq(&self.vision, &self.vision_mask, self.limits.max_vision, dims.vision, flags.vision),
            text: (!flags.text).then(|| Tensor::vector(self.text[i * dims.text..(i + 1) * dims.text].to_vec())),
            missing: flags,
        }
    }

    pub fn bundles(&self) -> Vec<ModalityBundle> {
        (0..self.size).map(|i| self.bundle(i)).collect()
    }
}

fn count_rows(mask: &[bool], max_len: usize) -> Vec<usize> {
    mask.chunks(max_len).map(|row| row.iter().filter(|&&m| m).count()).collect()
}
