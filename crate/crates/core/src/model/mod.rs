//! The fusion network: per-modality projections, self-attention over the
//! audio and vision sequences, anchor-queried cross-attention readouts, and
//! the MLP head. Missing modalities are replaced by learnable tokens and, in
//! training, whole modalities are dropped at random.
//!
//! Forward passes work on a batch of bundles at once. The valid frames of
//! every sample are stacked row-wise so projections run as one matrix
//! product, and attention runs per sample on its own row range. Every
//! kernel sums in a fixed order, so a sample's output does not depend on
//! which other samples share its batch.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Anchor, Fusion, TaemiConfig};
pub use crate::data::MissingFlags;

use std::ops::Range;

use rand::Rng;

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_positions, uniform_init, Bound, CrossAttentionBlock, LinearLayer, MlpHead, ParamId, ParamStore,
    SelfAttentionBlock,
};
use crate::tensor::{Graph, Tensor, Var};

/// Frames of one sequence modality with a per-frame validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Tensor,
    pub mask: Vec<bool>,
}

impl Sequence {
    pub fn new(frames: Tensor, mask: Vec<bool>) -> Self {
        Sequence { frames, mask }
    }

    /// Every frame valid.
    pub fn full(frames: Tensor) -> Self {
        let mask = vec![true; frames.rows()];
        Sequence { frames, mask }
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// One sample's model input. A modality flagged missing is never read,
/// whether or not data accompanies the flag.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModalityBundle {
    pub audio: Option<Sequence>,
    pub vision: Option<Sequence>,
    pub text: Option<Tensor>,
    pub missing: MissingFlags,
}

impl ModalityBundle {
    pub fn all_missing() -> Self {
        ModalityBundle {
            missing: MissingFlags::ALL,
            ..Default::default()
        }
    }

    fn validate(&self, c: &TaemiConfig) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        for (name, seq, flag, width, max_len) in [
            ("audio", &self.audio, self.missing.audio, c.d_audio_in, c.max_audio_frames),
            ("vision", &self.vision, self.missing.vision, c.d_vision_in, c.max_vision_frames),
        ] {
            if flag {
                continue;
            }
            let Some(s) = seq else {
                return bad(&format!("{name} is not flagged missing but has no data"));
            };
            if s.frames.shape().len() != 2 || s.frames.cols() != width {
                return bad(&format!("{name} frames {:?}, expected [T, {width}]", s.frames.shape()));
            }
            if s.mask.len() != s.frames.rows() {
                return bad(&format!("{name} mask has {} entries for {} frames", s.mask.len(), s.frames.rows()));
            }
            let valid = s.valid_len();
            if valid == 0 {
                return bad(&format!("{name} is present but has no valid frame"));
            }
            if valid > max_len {
                return bad(&format!("{name} has {valid} valid frames, limit is {max_len}"));
            }
            let finite = (0..s.frames.rows())
                .filter(|&i| s.mask[i])
                .all(|i| s.frames.row(i).iter().all(|v| v.is_finite()));
            if !finite {
                return bad(&format!("{name} has a non-finite value in a valid frame"));
            }
        }
        if !self.missing.text {
            let Some(t) = &self.text else {
                return bad("text is not flagged missing but has no data");
            };
            if t.numel() != c.d_text_in {
                return bad(&format!("text has {} values, expected {}", t.numel(), c.d_text_in));
            }
            if !t.is_finite() {
                return bad("text has a non-finite value");
            }
        }
        Ok(())
    }
}

/// Whether a call happens during training or evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Draws the three per-modality drop decisions (audio, vision, text) and
/// merges them into `flags`. Already-missing modalities stay missing.
fn drop_modalities<R: Rng + ?Sized>(mut flags: MissingFlags, p: f64, rng: &mut R) -> MissingFlags {
    if p > 0.0 {
        for m in Modality::ALL {
            if rng.gen::<f64>() < p {
                flags.set(m, true);
            }
        }
    }
    flags
}

/// Returns a copy of `bundle` in which each modality has independently been
/// flagged missing with probability `p`.
pub fn modality_dropout<R: Rng + ?Sized>(
    bundle: &ModalityBundle,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<ModalityBundle> {
    if mode != Mode::Train {
        return Err(Error::Contract("modality dropout is only defined in training".into()));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!("modality dropout p = {p} not in [0, 1)")));
    }
    let flags = drop_modalities(bundle.missing, p, rng);
    let mut out = bundle.clone();
    if flags.audio {
        out.audio = None;
    }
    if flags.vision {
        out.vision = None;
    }
    if flags.text {
        out.text = None;
    }
    out.missing = flags;
    Ok(out)
}

/// Handles of every layer, in parameter-registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Layers {
    pub audio_token: ParamId,
    pub vision_token: ParamId,
    pub text_token: ParamId,
    pub audio_proj: LinearLayer,
    pub vision_proj: LinearLayer,
    pub text_proj: LinearLayer,
    pub audio_self: SelfAttentionBlock,
    pub vision_self: SelfAttentionBlock,
    /// Readouts of the two non-anchor streams, in audio, vision, text order.
    pub cross: [CrossAttentionBlock; 2],
    pub head: MlpHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaemiModel {
    pub config: TaemiConfig,
    pub params: ParamStore,
    pub layers: Layers,
}

/// Graph handles of a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `[B×n_targets]`
    pub prediction: Var,
    /// `[B×fused_dim]`
    pub fused: Var,
    /// Stacked projected audio frames, `[N_a×d_latent]`.
    pub audio_latent: Var,
    /// Stacked projected vision frames, `[N_v×d_latent]`.
    pub vision_latent: Var,
    /// `[B×d_latent]`
    pub text_latent: Var,
    /// Missing flags after token substitution and modality dropout.
    pub flags: Vec<MissingFlags>,
    pub audio_segments: Vec<Range<usize>>,
    pub vision_segments: Vec<Range<usize>>,
}

impl TaemiModel {
    /// Builds and initializes every parameter. Registration order is fixed
    /// (tokens, projections, self-attention, cross-attention, head) so that
    /// the shared layers of all variants start from identical values.
    pub fn new<R: Rng + ?Sized>(config: TaemiConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let mut token = |store: &mut ParamStore, name: &str, d: usize| {
            let t = uniform_init(1, d, d, rng).reshaped(vec![d]).expect("same size");
            store.add(format!("{name}.missing_token"), t, true)
        };
        let audio_token = token(&mut store, "audio", c.d_audio_in);
        let vision_token = token(&mut store, "vision", c.d_vision_in);
        let text_token = token(&mut store, "text", c.d_text_in);
        let audio_proj = LinearLayer::new(&mut store, "audio.proj", c.d_audio_in, c.d_latent, rng)?;
        let vision_proj = LinearLayer::new(&mut store, "vision.proj", c.d_vision_in, c.d_latent, rng)?;
        let text_proj = LinearLayer::new(&mut store, "text.proj", c.d_text_in, c.d_latent, rng)?;
        let audio_self = SelfAttentionBlock::new(&mut store, "audio.self_attn", c.d_latent, c.head_count, c.norm, rng)?;
        let vision_self =
            SelfAttentionBlock::new(&mut store, "vision.self_attn", c.d_latent, c.head_count, c.norm, rng)?;
        let d_query = if c.shared_text_query { c.d_text_in } else { c.d_latent };
        let [s0, s1] = streams(c.anchor);
        let mut cross = |store: &mut ParamStore, m: Modality| {
            CrossAttentionBlock::new(
                store,
                &format!("cross_{}", m.name()),
                d_query,
                c.d_latent,
                c.d_latent,
                c.d_latent,
                c.head_count,
                rng,
            )
        };
        let cross = [cross(&mut store, s0)?, cross(&mut store, s1)?];
        let head = MlpHead::new(&mut store, "head", c.fused_dim(), c.mlp_hidden, c.n_targets, c.mlp_dropout, rng)?;
        Ok(TaemiModel {
            config,
            params: store,
            layers: Layers {
                audio_token,
                vision_token,
                text_token,
                audio_proj,
                vision_proj,
                text_proj,
                audio_self,
                vision_self,
                cross,
                head,
            },
        })
    }

    pub fn seeded(config: TaemiConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut crate::seeded_rng(seed, 0))
    }

    /// Batched forward pass on `g`. In training, modality dropout and head
    /// dropout draw from `rng`; evaluation never touches it.
    pub fn forward_graph<'a, R: Rng + ?Sized>(
        &'a self,
        g: &mut Graph<'a>,
        p: &Bound,
        bundles: &'a [ModalityBundle],
        train: bool,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        if bundles.is_empty() {
            return Err(Error::Validation("forward needs at least one sample".into()));
        }
        if p.vars().len() != self.params.len() {
            return Err(Error::Contract("parameters bound from a different model".into()));
        }
        for (i, b) in bundles.iter().enumerate() {
            b.validate(&self.config).map_err(|e| Error::Validation(format!("sample {i}: {e}")))?;
        }
        let c = &self.config;
        let l = &self.layers;
        let flags: Vec<MissingFlags> = bundles
            .iter()
            .map(|b| {
                if train {
                    drop_modalities(b.missing, c.modality_dropout_p, rng)
                } else {
                    b.missing
                }
            })
            .collect();

        let (raw_audio, audio_segments) = self.stack(g, p, bundles, &flags, Modality::Audio)?;
        let (raw_vision, vision_segments) = self.stack(g, p, bundles, &flags, Modality::Vision)?;
        let (raw_text, _) = self.stack(g, p, bundles, &flags, Modality::Text)?;

        let audio_latent = l.audio_proj.forward(g, p, raw_audio)?;
        let audio_latent = self.add_positions(g, audio_latent, &audio_segments)?;
        let vision_latent = l.vision_proj.forward(g, p, raw_vision)?;
        let vision_latent = self.add_positions(g, vision_latent, &vision_segments)?;
        let text_latent = l.text_proj.forward(g, p, raw_text)?;
        let unit: Vec<Range<usize>> = (0..bundles.len()).map(|i| i..i + 1).collect();

        let fused = match c.fusion {
            Fusion::SimpleConcat => {
                let a = pool(g, audio_latent, &audio_segments)?;
                let v = pool(g, vision_latent, &vision_segments)?;
                g.concat_cols(&[text_latent, a, v])?
            }
            Fusion::SelfAttentionOnly => {
                let a = l.audio_self.forward_segments(g, p, audio_latent, &audio_segments)?;
                let v = l.vision_self.forward_segments(g, p, vision_latent, &vision_segments)?;
                let a = pool(g, a, &audio_segments)?;
                let v = pool(g, v, &vision_segments)?;
                g.concat_cols(&[raw_text, a, v])?
            }
            Fusion::TaCrossAttention => match c.anchor {
                Anchor::Text => {
                    let a = l.audio_self.forward_segments(g, p, audio_latent, &audio_segments)?;
                    let v = l.vision_self.forward_segments(g, p, vision_latent, &vision_segments)?;
                    let query = if c.shared_text_query { raw_text } else { text_latent };
                    let ha = l.cross[0].forward_segments(g, p, query, a, &audio_segments)?;
                    let hv = l.cross[1].forward_segments(g, p, query, v, &vision_segments)?;
                    g.concat_cols(&[raw_text, ha, hv])?
                }
                Anchor::Audio => {
                    let query = pool(g, audio_latent, &audio_segments)?;
                    let v = l.vision_self.forward_segments(g, p, vision_latent, &vision_segments)?;
                    let hv = l.cross[0].forward_segments(g, p, query, v, &vision_segments)?;
                    let ht = l.cross[1].forward_segments(g, p, query, text_latent, &unit)?;
                    let anchor = pool(g, raw_audio, &audio_segments)?;
                    g.concat_cols(&[anchor, hv, ht])?
                }
                Anchor::Vision => {
                    let query = pool(g, vision_latent, &vision_segments)?;
                    let a = l.audio_self.forward_segments(g, p, audio_latent, &audio_segments)?;
                    let ha = l.cross[0].forward_segments(g, p, query, a, &audio_segments)?;
                    let ht = l.cross[1].forward_segments(g, p, query, text_latent, &unit)?;
                    let anchor = pool(g, raw_vision, &vision_segments)?;
                    g.concat_cols(&[anchor, ha, ht])?
                }
            },
        };
        let prediction = l.head.forward(g, p, fused, train, rng)?;
        Ok(ForwardTrace {
            prediction,
            fused,
            audio_latent,
            vision_latent,
            text_latent,
            flags,
            audio_segments,
            vision_segments,
        })
    }

    /// Stacks the valid frames (or the substitute row) of every sample.
    fn stack<'a>(
        &'a self,
        g: &mut Graph<'a>,
        p: &Bound,
        bundles: &'a [ModalityBundle],
        flags: &[MissingFlags],
        m: Modality,
    ) -> Result<(Var, Vec<Range<usize>>)> {
        let c = &self.config;
        let width = c.feature_dims().of(m);
        let token = match m {
            Modality::Audio => self.layers.audio_token,
            Modality::Vision => self.layers.vision_token,
            Modality::Text => self.layers.text_token,
        };
        let mut parts = Vec::with_capacity(bundles.len());
        let mut segments = Vec::with_capacity(bundles.len());
        let mut rows = 0;
        for (b, f) in bundles.iter().zip(flags) {
            let part = if f.get(m) {
                if c.use_missing_tokens {
                    g.reshape(p[token], vec![1, width])?
                } else {
                    g.constant(Tensor::zeros(vec![1, width])?)
                }
            } else {
                match m {
                    Modality::Text => {
                        let t = b.text.as_ref().expect("validated");
                        g.constant_slice(vec![1, width], t.data())?
                    }
                    _ => {
                        let s = if m == Modality::Audio { &b.audio } else { &b.vision };
                        valid_frames(g, s.as_ref().expect("validated"))?
                    }
                }
            };
            let n = g.shape(part)[0];
            segments.push(rows..rows + n);
            rows += n;
            parts.push(part);
        }
        let stacked = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        Ok((stacked, segments))
    }

    fn add_positions(&self, g: &mut Graph<'_>, x: Var, segments: &[Range<usize>]) -> Result<Var> {
        if !self.config.positional_encoding {
            return Ok(x);
        }
        let d = self.config.d_latent;
        let rows = segments.last().map_or(0, |s| s.end);
        let mut codes = Vec::with_capacity(rows * d);
        for s in segments {
            codes.extend(sinusoidal_positions(s.len(), d));
        }
        let codes = g.constant(Tensor::matrix(rows, d, codes)?);
        g.add(x, codes)
    }

    /// Eval-mode predictions, row-major `[B×n_targets]`.
    pub fn predict(&self, bundles: &[ModalityBundle]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let trace = self.forward_graph(&mut g, &p, bundles, false, &mut NoRng)?;
        Ok(g.value(trace.prediction).to_vec())
    }

    /// Single-sample forward, returning the `[n_targets]` prediction.
    pub fn forward<R: Rng + ?Sized>(&self, bundle: &ModalityBundle, train: bool, rng: &mut R) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let trace = self.forward_graph(&mut g, &p, std::slice::from_ref(bundle), train, rng)?;
        let values = g.value(trace.prediction).to_vec();
        Ok(Tensor::vector(values))
    }

    /// Eval-mode fused vectors, row-major `[B×fused_dim]`.
    pub fn fused_features(&self, bundles: &[ModalityBundle]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let trace = self.forward_graph(&mut g, &p, bundles, false, &mut NoRng)?;
        Ok(g.value(trace.fused).to_vec())
    }

    /// Copies parameter values from `other`, matching by name and shape.
    pub fn load_params_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} parameters offered for {}",
                other.len(),
                self.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(other.iter()) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Contract(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    dst.name,
                    dst.tensor.shape(),
                    src.name,
                    src.tensor.shape()
                )));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

/// The two non-anchor streams, in audio, vision, text order.
fn streams(anchor: Anchor) -> [Modality; 2] {
    match anchor {
        Anchor::Text => [Modality::Audio, Modality::Vision],
        Anchor::Audio => [Modality::Vision, Modality::Text],
        Anchor::Vision => [Modality::Audio, Modality::Text],
    }
}

fn valid_frames<'a>(g: &mut Graph<'a>, s: &'a Sequence) -> Result<Var> {
    let width = s.frames.cols();
    if s.mask.iter().all(|&m| m) {
        return g.constant_slice(s.frames.shape().to_vec(), s.frames.data());
    }
    let rows: Vec<usize> = (0..s.mask.len()).filter(|&i| s.mask[i]).collect();
    let mut data = Vec::with_capacity(rows.len() * width);
    for &i in &rows {
        data.extend_from_slice(s.frames.row(i));
    }
    Ok(g.constant(Tensor::matrix(rows.len(), width, data)?))
}

/// Mean over each row range, giving one row per range.
fn pool(g: &mut Graph<'_>, x: Var, segments: &[Range<usize>]) -> Result<Var> {
    let mut rows = Vec::with_capacity(segments.len());
    for s in segments {
        let part = g.slice_rows(x, s.start, s.len())?;
        rows.push(g.mean_rows(part, None)?);
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        g.concat_rows(&rows)
    }
}

/// RNG handed to eval-mode passes; drawing from it is a bug.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("evaluation must not draw random numbers")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("evaluation must not draw random numbers")
    }

    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("evaluation must not draw random numbers")
    }

    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("evaluation must not draw random numbers")
    }
}
