//! Run configuration: defaults, TOML file, `--set` overrides and flags,
//! applied in that order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taemi_core::data::GeneratorConfig;
use taemi_core::model::TaemiConfig;
use taemi_core::optim::TrainConfig;

use crate::ablation::Variant;
use crate::error::{CliError, Context, Result};

/// Name of the resolved configuration written into every output directory.
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives data generation, initialization, dropout and shuffling. The
    /// nested `train.seed` and `data.generator.seed` are overwritten with it.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Defaults to `manifest.json` inside `out_dir`.
    pub manifest: Option<PathBuf>,
    pub model: TaemiConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub ablation: AblationConfig,
    pub gradcheck: GradCheckConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Feature widths are taken from the model section.
    pub generator: GeneratorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Empty means the run seed alone.
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub layer_tolerance: f64,
    pub model_tolerance: f64,
    /// Coordinates checked per model parameter; 0 checks all of them.
    pub coords_per_param: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            manifest: None,
            model: TaemiConfig::reference(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            ablation: AblationConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            generator: GeneratorConfig::default(),
        }
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: Vec::new(),
            variants: Variant::ALL.to_vec(),
        }
    }
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-3,
            layer_tolerance: 1e-5,
            model_tolerance: 1e-3,
            coords_per_param: 3,
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid with `file` and then with `key.path=value` pairs.
    /// Values are TOML literals; anything that does not parse as one is
    /// taken as a string.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut merged = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let table: toml::Table = text
                .parse()
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            merge(&mut merged, toml::Value::Table(table));
        }
        for set in sets {
            let (key, value) = parse_set(set)?;
            let mut patch = value;
            for part in key.split('.').rev() {
                let mut t = toml::Table::new();
                t.insert(part.to_string(), patch);
                patch = toml::Value::Table(t);
            }
            merge(&mut merged, patch);
        }
        merged
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))
    }

    /// Reads a resolved configuration back from an output directory.
    pub fn read_resolved(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {}", path.display(), e.message())))
    }

    /// Propagates the seed and feature widths, makes paths absolute and
    /// validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.data.generator.seed = self.seed;
        self.data.generator.dims = self.model.feature_dims();
        self.out_dir = absolute(&self.out_dir)?;
        self.manifest = Some(absolute(
            &self.manifest.take().unwrap_or_else(|| self.out_dir.join("manifest.json")),
        )?);
        if self.ablation.seeds.is_empty() {
            self.ablation.seeds.push(self.seed);
        }
        self.model.validate().context(|| "model config".into())?;
        self.train.validate().context(|| "train config".into())?;
        self.data.generator.validate().context(|| "generator config".into())?;
        let g = &self.gradcheck;
        if !(g.eps > 0.0 && g.layer_tolerance > 0.0 && g.model_tolerance > 0.0) {
            return Err(CliError::Usage("gradcheck eps and tolerances must be positive".into()));
        }
        Ok(self)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.out_dir.join("manifest.json"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))
    }
}

fn parse_set(set: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{set}`")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("--set has an invalid key `{key}`")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| CliError::io(path, e))
}
