use std::path::{Path, PathBuf};

use taemi_core::data::{
    collate, generate, read_records, write_records, CollateLimits, FeatureRecord, GeneratorConfig, Manifest, RecordSet,
    Split, SplitEntry,
};
use taemi_core::metrics::{evaluate, EvalResult};
use taemi_core::model::{load_checkpoint, save_checkpoint, TaemiConfig, TaemiModel};
use taemi_core::optim::{train_loop, TrainReport, Trainer};
use taemi_core::oracle::{gradcheck_layers, gradcheck_model, GradCheckReport};

use crate::ablation::AblationTable;
use crate::config::{RunConfig, CONFIG_FILE};
use crate::error::{CliError, Context, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
/// Resolved configuration of a data directory, kept apart from the
/// training one so that both can share a directory.
pub const DATA_CONFIG_FILE: &str = "data_config.toml";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const ABLATION_DIR: &str = "ablation";

/// Writes train/val/test record files and a manifest into `out_dir`.
pub fn gen_data(cfg: &RunConfig, overwrite: bool) -> Result<PathBuf> {
    let d = &cfg.data;
    for (name, n) in [("n_train", d.n_train), ("n_val", d.n_val), ("n_test", d.n_test)] {
        if n == 0 {
            return Err(CliError::Usage(format!("{name} must be positive")));
        }
    }
    let dir = &cfg.out_dir;
    let files: Vec<(Split, usize, String)> = Split::ALL
        .iter()
        .zip([d.n_train, d.n_val, d.n_test])
        .map(|(&s, n)| (s, n, format!("{}.jsonl", s.name())))
        .collect();
    let mut targets: Vec<PathBuf> = files.iter().map(|(_, _, f)| dir.join(f)).collect();
    targets.push(dir.join(MANIFEST_FILE));
    targets.push(dir.join(DATA_CONFIG_FILE));
    prepare_outputs(dir, &targets, overwrite)?;

    let mut manifest = Manifest::new(dir, Some(d.generator.clone()));
    for (split, n, file) in files {
        let records = generate(&d.generator, n, split).context(|| format!("generating {}", split.name()))?;
        write_records(&dir.join(&file), &d.generator.dims, &records).context(|| format!("writing {file}"))?;
        manifest.splits.insert(split.name().into(), SplitEntry { path: file, count: n });
        log::info!("wrote {n} {} records", split.name());
    }
    let path = dir.join(MANIFEST_FILE);
    manifest.write(&path).context(|| "writing manifest".into())?;
    write_text(&dir.join(DATA_CONFIG_FILE), &cfg.to_toml())?;
    Ok(path)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub overwrite: bool,
    /// Continue from `last.ckpt` in the output directory.
    pub resume: bool,
    /// End the process after this many epochs, leaving a resumable run.
    pub stop_after_epochs: Option<usize>,
}

/// Trains with per-epoch checkpoints and writes the report.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainReport> {
    let (train_set, val_set) = load_train_val(cfg)?;
    let dir = &cfg.out_dir;
    let artifacts = [CONFIG_FILE, REPORT_JSON, REPORT_CSV, BEST_CHECKPOINT, LAST_CHECKPOINT].map(|f| dir.join(f));
    let best_path = dir.join(BEST_CHECKPOINT);
    let last_path = dir.join(LAST_CHECKPOINT);

    let (mut model, mut trainer) = if opts.resume {
        let (model, state) = load_checkpoint(&last_path).context(|| format!("loading {}", last_path.display()))?;
        let state = state.ok_or_else(|| CliError::Core {
            context: format!("resuming from {}", last_path.display()),
            source: taemi_core::Error::Validation("checkpoint carries no training state".into()),
        })?;
        let best = if best_path.exists() {
            Some(load_checkpoint(&best_path).context(|| "loading best checkpoint".into())?.0.params)
        } else {
            None
        };
        if state.n_train != train_set.len() {
            return Err(CliError::Core {
                context: "resuming".into(),
                source: taemi_core::Error::Validation(format!(
                    "checkpoint was trained on {} records, manifest has {}",
                    state.n_train,
                    train_set.len()
                )),
            });
        }
        log::info!("resuming after epoch {}", state.epoch);
        (model, Trainer::resume(state, best))
    } else {
        prepare_outputs(dir, &artifacts, opts.overwrite)?;
        cfg.write(dir)?;
        let model = TaemiModel::seeded(cfg.model.clone(), cfg.seed).context(|| "building model".into())?;
        let trainer = Trainer::new(&model, cfg.train.clone(), train_set.len()).context(|| "train config".into())?;
        (model, trainer)
    };

    let mut epochs_here = 0;
    while !trainer.state.finished {
        while !trainer.epoch_complete() {
            trainer
                .train_batch(&mut model, &train_set)
                .context(|| format!("training epoch {}", trainer.state.epoch + 1))?;
        }
        let record = trainer.finish_epoch(&model, &val_set).context(|| "validation".into())?;
        atomic_checkpoint(&model, Some(&trainer), &last_path)?;
        if trainer.state.stopper.best_epoch == Some(record.epoch) {
            atomic_checkpoint(&model, None, &best_path)?;
        }
        epochs_here += 1;
        if opts.stop_after_epochs == Some(epochs_here) && !trainer.state.finished {
            log::info!("stopping after {epochs_here} epochs as requested");
            break;
        }
    }
    let report = trainer.report(&model);
    write_text(&dir.join(REPORT_JSON), &report.to_json())?;
    write_text(&dir.join(REPORT_CSV), &report.to_csv())?;
    Ok(report)
}

/// Evaluates a checkpoint on `records`.
pub fn eval(checkpoint: &Path, records: &[FeatureRecord], batch_size: usize) -> Result<EvalResult> {
    let (model, _) = load_checkpoint(checkpoint).context(|| format!("loading {}", checkpoint.display()))?;
    evaluate(&model, records, batch_size).context(|| "evaluation".into())
}

/// Records of one manifest split, or of a record file.
pub fn load_eval_records(manifest: Option<&Path>, split: Split, records: Option<&Path>) -> Result<RecordSet> {
    match (manifest, records) {
        (_, Some(path)) => read_records(path).context(|| format!("reading {}", path.display())),
        (Some(m), None) => Manifest::read(m)
            .and_then(|m| m.load(split))
            .context(|| format!("loading {} split of {}", split.name(), m.display())),
        (None, None) => Err(CliError::Usage("eval needs --manifest or --records".into())),
    }
}

/// Trains every configured variant under every seed from scratch, on the
/// same data, and tabulates the best validation mean ρ.
pub fn ablate(cfg: &RunConfig, overwrite: bool) -> Result<AblationTable> {
    let (train_set, val_set) = load_train_val(cfg)?;
    let dir = cfg.out_dir.join(ABLATION_DIR);
    let table_txt = dir.join("ablation.txt");
    let table_csv = dir.join("ablation.csv");
    prepare_outputs(&dir, &[table_txt.clone(), table_csv.clone(), dir.join(CONFIG_FILE)], overwrite)?;
    cfg.write(&dir)?;

    let mut results = Vec::new();
    for &variant in &cfg.ablation.variants {
        let model_cfg = variant.apply(&cfg.model);
        let mut scores = Vec::new();
        for &seed in &cfg.ablation.seeds {
            let run = RunConfig {
                seed,
                model: model_cfg.clone(),
                out_dir: dir.join(variant.name()).join(format!("seed_{seed}")),
                ..cfg.clone()
            }
            .resolve()?;
            log::info!("ablation: {variant} seed {seed}");
            let mut model = TaemiModel::seeded(run.model.clone(), seed).context(|| format!("building {variant}"))?;
            let outcome = train_loop(&mut model, &train_set, &val_set, &run.train)
                .context(|| format!("training {variant} seed {seed}"))?;
            std::fs::create_dir_all(&run.out_dir).map_err(|e| CliError::io(&run.out_dir, e))?;
            run.write(&run.out_dir)?;
            write_text(&run.out_dir.join(REPORT_JSON), &outcome.report.to_json())?;
            write_text(&run.out_dir.join(REPORT_CSV), &outcome.report.to_csv())?;
            scores.push(outcome.report.best_mean_rho);
        }
        results.push((variant, scores));
    }
    let table = AblationTable::new(cfg.ablation.seeds.clone(), results);
    write_text(&table_txt, &format!("{table}\n"))?;
    write_text(&table_csv, &table.to_csv())?;
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum GradCheckScope {
    Layers,
    Model,
    All,
}

/// Layer checks on small random inputs and a model check on a two-record
/// occluded batch at the configured model size.
pub fn gradcheck(cfg: &RunConfig, scope: GradCheckScope) -> Result<Vec<(String, GradCheckReport)>> {
    let g = &cfg.gradcheck;
    let mut out = Vec::new();
    if scope != GradCheckScope::Model {
        let r = gradcheck_layers(g.eps, g.layer_tolerance, cfg.seed).context(|| "layer gradient check".into())?;
        out.push(("layers".to_string(), r));
    }
    if scope != GradCheckScope::Layers {
        out.push(("model".to_string(), model_gradcheck(&cfg.model, cfg)?));
    }
    Ok(out)
}

fn model_gradcheck(model_cfg: &TaemiConfig, cfg: &RunConfig) -> Result<GradCheckReport> {
    let g = &cfg.gradcheck;
    let model = TaemiModel::seeded(model_cfg.clone(), cfg.seed).context(|| "building model".into())?;
    let gen = GeneratorConfig {
        dims: model_cfg.feature_dims(),
        ..GeneratorConfig::occluded(cfg.seed)
    };
    let records = generate(&gen, 2, Split::Train).context(|| "gradient check batch".into())?;
    let batch = collate(&records, &CollateLimits::from(model_cfg)).context(|| "gradient check batch".into())?;
    let targets: Vec<Vec<f64>> = records.iter().map(|r| r.target.clone()).collect();
    let per_param = (g.coords_per_param > 0).then_some(g.coords_per_param);
    gradcheck_model(&model, &batch.bundles(), &targets, per_param, g.eps, g.model_tolerance, cfg.seed)
        .context(|| "model gradient check".into())
}

fn load_train_val(cfg: &RunConfig) -> Result<(Vec<FeatureRecord>, Vec<FeatureRecord>)> {
    let path = cfg.manifest_path();
    let manifest = Manifest::read(&path).context(|| format!("reading manifest {}", path.display()))?;
    let want = cfg.model.feature_dims();
    let load = |split: Split| -> Result<Vec<FeatureRecord>> {
        let set = manifest.load(split).context(|| format!("loading {} split", split.name()))?;
        if set.dims != want {
            return Err(CliError::Core {
                context: format!("{} split", split.name()),
                source: taemi_core::Error::Validation(format!(
                    "record widths {:?} do not match the model {want:?}",
                    set.dims
                )),
            });
        }
        Ok(set.records)
    };
    Ok((load(Split::Train)?, load(Split::Val)?))
}

/// Creates `dir` and refuses to clobber any of `files` unless `overwrite`,
/// in which case they are removed first.
fn prepare_outputs(dir: &Path, files: &[PathBuf], overwrite: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let existing: Vec<&PathBuf> = files.iter().filter(|p| p.exists()).collect();
    if existing.is_empty() {
        return Ok(());
    }
    if !overwrite {
        return Err(CliError::Usage(format!(
            "{} already exists; pass --overwrite to replace it",
            existing[0].display()
        )));
    }
    for p in existing {
        std::fs::remove_file(p).map_err(|e| CliError::io(p, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn atomic_checkpoint(model: &TaemiModel, trainer: Option<&Trainer>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    save_checkpoint(model, trainer.map(|t| &t.state), &tmp).context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}
