use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FeatureDims, FeatureRecord, Modality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{seeded_rng, Rng};

// Kept apart from the model-init, dropout and shuffle streams so that one
// seed can drive both data generation and training.
const STREAM_BASE: u64 = 1 << 40;
const MIXING_STREAM: u64 = STREAM_BASE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => STREAM_BASE + 1,
            Split::Val => STREAM_BASE + 2,
            Split::Test => STREAM_BASE + 3,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown split `{s}` (train, val, test)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Standard deviation of the additive Gaussian noise.
    pub sigma: f64,
    /// Probability that a sequence frame carries the planted signal.
    pub signal_fraction: f64,
    /// Column norm of every mixing matrix.
    pub signal_gain: f64,
    pub missing_audio: f64,
    pub missing_vision: f64,
    pub missing_text: f64,
    /// Inclusive frame-count range of present audio sequences.
    pub audio_frames: [usize; 2],
    /// Inclusive frame-count range of present vision sequences.
    pub vision_frames: [usize; 2],
    pub dims: FeatureDims,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 0,
            sigma: 0.1,
            signal_fraction: 1.0,
            signal_gain: 6.0,
            missing_audio: 0.0,
            missing_vision: 0.0,
            missing_text: 0.0,
            audio_frames: [2, 8],
            vision_frames: [2, 6],
            dims: FeatureDims::default(),
        }
    }
}

impl GeneratorConfig {
    /// Occlusion-noised preset: most frames are pure noise and each
    /// modality is missing one time in five.
    pub fn occluded(seed: u64) -> Self {
        GeneratorConfig {
            seed,
            signal_fraction: 0.3,
            missing_audio: 0.2,
            missing_vision: 0.2,
            missing_text: 0.2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Parameter(format!("{name} = {p} not in [0, 1]")))
            }
        };
        prob("signal_fraction", self.signal_fraction)?;
        prob("missing_audio", self.missing_audio)?;
        prob("missing_vision", self.missing_vision)?;
        prob("missing_text", self.missing_text)?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Parameter(format!("sigma = {} must be finite and >= 0", self.sigma)));
        }
        if !(self.signal_gain > 0.0 && self.signal_gain.is_finite()) {
            return Err(Error::Parameter(format!("signal_gain = {} must be positive", self.signal_gain)));
        }
        for (name, [lo, hi]) in [("audio_frames", self.audio_frames), ("vision_frames", self.vision_frames)] {
            if lo == 0 || lo > hi {
                return Err(Error::Parameter(format!("{name} = [{lo}, {hi}] is not a valid range")));
            }
        }
        let k = self.dims.targets;
        if k > self.dims.audio.min(self.dims.vision).min(self.dims.text) {
            return Err(Error::Parameter(format!(
                "{k} targets cannot be planted orthogonally into {:?}",
                self.dims
            )));
        }
        Ok(())
    }
}

/// Synthetic data in which every present feature vector is a fixed linear
/// image of the centred target plus Gaussian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedGenerator {
    config: GeneratorConfig,
    mix_audio: Vec<f64>,
    mix_vision: Vec<f64>,
    mix_text: Vec<f64>,
}

impl PlantedGenerator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed, MIXING_STREAM);
        let k = config.dims.targets;
        let gain = config.signal_gain;
        let mix_audio = mixing_matrix(config.dims.audio, k, gain, &mut rng);
        let mix_vision = mixing_matrix(config.dims.vision, k, gain, &mut rng);
        let mix_text = mixing_matrix(config.dims.text, k, gain, &mut rng);
        Ok(PlantedGenerator {
            config,
            mix_audio,
            mix_vision,
            mix_text,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Row-major `[D×targets]` mixing matrix of a modality.
    pub fn mixing(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Audio => &self.mix_audio,
            Modality::Vision => &self.mix_vision,
            Modality::Text => &self.mix_text,
        }
    }

    /// `M·u` for a centred target `u`.
    pub fn plant(&self, m: Modality, u: &[f64]) -> Vec<f64> {
        let k = self.config.dims.targets;
        self.mixing(m)
            .chunks(k)
            .map(|row| row.iter().zip(u).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn generate(&self, n: usize, split: Split) -> Result<Vec<FeatureRecord>> {
        if n == 0 {
            return Err(Error::Parameter("record count must be at least 1".into()));
        }
        let mut rng = seeded_rng(self.config.seed, split.stream());
        Ok((0..n)
            .map(|i| self.record(format!("{}-{i:06}", split.name()), &mut rng))
            .collect())
    }

    fn record(&self, id: String, rng: &mut Rng) -> FeatureRecord {
        let c = &self.config;
        let target: Vec<f64> = (0..c.dims.targets).map(|_| rng.gen::<f64>()).collect();
        let u: Vec<f64> = target.iter().map(|y| y - 0.5).collect();
        let missing = [c.missing_audio, c.missing_vision, c.missing_text].map(|p| rng.gen::<f64>() < p);

        let audio = (!missing[0]).then(|| self.sequence(Modality::Audio, &u, c.audio_frames, rng));
        let vision = (!missing[1]).then(|| self.sequence(Modality::Vision, &u, c.vision_frames, rng));
        let text = (!missing[2]).then(|| {
            let clean = self.plant(Modality::Text, &u);
            clean.into_iter().map(|v| v + c.sigma * normal(rng)).collect()
        });
        FeatureRecord {
            id,
            target,
            audio,
            vision,
            text,
        }
    }

    fn sequence(&self, m: Modality, u: &[f64], [lo, hi]: [usize; 2], rng: &mut Rng) -> Tensor {
        let width = self.config.dims.of(m);
        let frames = rng.gen_range(lo..=hi);
        let clean = self.plant(m, u);
        let mut data = Vec::with_capacity(frames * width);
        for _ in 0..frames {
            let signal = rng.gen::<f64>() < self.config.signal_fraction;
            for &s in &clean {
                let base = if signal { s } else { 0.0 };
                data.push(base + self.config.sigma * normal(rng));
            }
        }
        Tensor::matrix(frames, width, data).expect("positive frame count")
    }
}

/// Shorthand for [`PlantedGenerator::new`] followed by `generate`.
pub fn generate(config: &GeneratorConfig, n: usize, split: Split) -> Result<Vec<FeatureRecord>> {
    PlantedGenerator::new(config.clone())?.generate(n, split)
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Gaussian `[d×k]` matrix with Gram-Schmidt orthonormalized columns,
/// scaled to column norm `gain`.
fn mixing_matrix(d: usize, k: usize, gain: f64, rng: &mut Rng) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut c: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        for prev in &cols {
            let proj: f64 = c.iter().zip(prev).map(|(a, b)| a * b).sum();
            c.iter_mut().zip(prev).for_each(|(a, b)| *a -= proj * b);
        }
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            c.iter_mut().for_each(|v| *v /= norm);
            cols.push(c);
        }
    }
    let mut out = vec![0.0; d * k];
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            out[i * k + j] = gain * v;
        }
    }
    out
}
