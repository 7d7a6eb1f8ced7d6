use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{clip_param_grads, AdamWConfig, AdamWState, EarlyStopper, Schedule};
use crate::data::{collate, CollateLimits, FeatureRecord};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, mse_loss, EvalResult};
use crate::model::{ModalityBundle, TaemiConfig, TaemiModel};
use crate::nn::ParamStore;
use crate::tensor::{Graph, Tensor};
use crate::{seeded_rng, Rng};

const DROPOUT_STREAM: u64 = 1;
const SHUFFLE_STREAM_BASE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_epochs: usize,
    /// Epochs spanned by the learning-rate schedule, fixed up front.
    pub schedule_epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub patience: usize,
    /// Stop as soon as validation mean correlation reaches this value.
    pub target_mean_rho: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            max_epochs: 50,
            schedule_epochs: 50,
            warmup_epochs: 1,
            batch_size: 32,
            eval_batch_size: 32,
            base_lr: 1e-4,
            min_lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 100.0,
            patience: 5,
            target_mean_rho: None,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.batch_size) as u64
    }

    pub fn schedule(&self, n_train: usize) -> Result<Schedule> {
        let per_epoch = self.steps_per_epoch(n_train);
        Schedule::new(
            self.base_lr,
            self.min_lr,
            self.warmup_epochs as u64 * per_epoch,
            self.schedule_epochs as u64 * per_epoch,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Parameter("epochs and batch sizes must be positive".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Parameter(format!("clip_norm {} must be positive", self.clip_norm)));
        }
        self.adamw().validate()?;
        EarlyStopper::new(self.patience)?;
        self.schedule(1).map(|_| ())
    }
}

/// Position of the dropout RNG, enough to rebuild it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        use rand::SeedableRng;
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean training loss.
    pub train_loss: f64,
    pub val: EvalResult,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub optimizer: AdamWState,
    pub schedule: Schedule,
    pub stopper: EarlyStopper,
    pub rng: Rng,
    pub n_train: usize,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed batches of the current epoch.
    pub batch_in_epoch: usize,
    pub epoch_loss_sum: f64,
    pub epoch_samples: usize,
    pub history: Vec<EpochRecord>,
    pub finished: bool,
    pub reached_target: bool,
}

/// Serializable scalar part of [`TrainState`]; moments and RNG are stored
/// separately in binary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct TrainStateMeta {
    pub config: TrainConfig,
    pub adamw: AdamWConfig,
    pub optimizer_step: u64,
    pub schedule: Schedule,
    pub stopper: EarlyStopper,
    pub n_train: usize,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub epoch_loss_sum: f64,
    pub epoch_samples: usize,
    pub history: Vec<EpochRecord>,
    pub finished: bool,
    pub reached_target: bool,
}

impl TrainState {
    pub fn new(model: &TaemiModel, config: TrainConfig, n_train: usize) -> Result<Self> {
        config.validate()?;
        if n_train == 0 {
            return Err(Error::Validation("training data is empty".into()));
        }
        Ok(TrainState {
            optimizer: AdamWState::new(&model.params, config.adamw())?,
            schedule: config.schedule(n_train)?,
            stopper: EarlyStopper::new(config.patience)?,
            rng: seeded_rng(config.seed, DROPOUT_STREAM),
            n_train,
            epoch: 0,
            batch_in_epoch: 0,
            epoch_loss_sum: 0.0,
            epoch_samples: 0,
            history: Vec::new(),
            finished: false,
            reached_target: false,
            config,
        })
    }

    pub(crate) fn meta(&self) -> TrainStateMeta {
        TrainStateMeta {
            config: self.config.clone(),
            adamw: self.optimizer.config,
            optimizer_step: self.optimizer.step,
            schedule: self.schedule,
            stopper: self.stopper.clone(),
            n_train: self.n_train,
            epoch: self.epoch,
            batch_in_epoch: self.batch_in_epoch,
            epoch_loss_sum: self.epoch_loss_sum,
            epoch_samples: self.epoch_samples,
            history: self.history.clone(),
            finished: self.finished,
            reached_target: self.reached_target,
        }
    }

    pub(crate) fn from_meta(meta: TrainStateMeta, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, rng: Rng) -> Self {
        TrainState {
            optimizer: AdamWState {
                config: meta.adamw,
                step: meta.optimizer_step,
                m,
                v,
            },
            config: meta.config,
            schedule: meta.schedule,
            stopper: meta.stopper,
            rng,
            n_train: meta.n_train,
            epoch: meta.epoch,
            batch_in_epoch: meta.batch_in_epoch,
            epoch_loss_sum: meta.epoch_loss_sum,
            epoch_samples: meta.epoch_samples,
            history: meta.history,
            finished: meta.finished,
            reached_target: meta.reached_target,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.config.steps_per_epoch(self.n_train) as usize
    }
}

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub lr: f64,
    pub clip_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: TaemiConfig,
    pub train: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_mean_rho: Option<f64>,
    pub steps: u64,
    pub stopped_early: bool,
    pub reached_target: bool,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    /// One row per epoch: epoch, train loss, per-dimension ρ, mean ρ, lr.
    pub fn to_csv(&self) -> String {
        let k = self.model.n_targets;
        let mut out = String::from("epoch,train_loss");
        for i in 0..k {
            out.push_str(&format!(",rho_{i}"));
        }
        out.push_str(",mean_rho,lr\n");
        let cell = |r: Option<f64>| r.map_or_else(|| "undefined".to_string(), |v| format!("{v:.17e}"));
        for e in &self.epochs {
            out.push_str(&format!("{},{:.17e}", e.epoch, e.train_loss));
            for r in &e.val.rho_per_dim {
                out.push(',');
                out.push_str(&cell(*r));
            }
            out.push_str(&format!(",{},{:.17e}\n", cell(e.val.mean_rho), e.lr));
        }
        out
    }
}

/// What a finished run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    /// Parameters at the best validation epoch.
    pub best_params: Option<ParamStore>,
}

/// Drives [`TrainState`] through batches and epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub state: TrainState,
    pub best_params: Option<ParamStore>,
}

impl Trainer {
    pub fn new(model: &TaemiModel, config: TrainConfig, n_train: usize) -> Result<Self> {
        Ok(Trainer {
            state: TrainState::new(model, config, n_train)?,
            best_params: None,
        })
    }

    pub fn resume(state: TrainState, best_params: Option<ParamStore>) -> Self {
        Trainer { state, best_params }
    }

    pub fn epoch_complete(&self) -> bool {
        self.state.batch_in_epoch >= self.state.steps_per_epoch()
    }

    /// Sample order of an epoch, a pure function of seed and epoch.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.state.n_train).collect();
        let mut rng = seeded_rng(self.state.config.seed, SHUFFLE_STREAM_BASE + epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    /// Trains on the next batch of the current epoch.
    pub fn train_batch(&mut self, model: &mut TaemiModel, train: &[FeatureRecord]) -> Result<StepOutcome> {
        self.check_data(train)?;
        if self.epoch_complete() {
            return Err(Error::Contract("epoch already complete; call finish_epoch".into()));
        }
        let bs = self.state.config.batch_size;
        let order = self.epoch_order(self.state.epoch);
        let start = self.state.batch_in_epoch * bs;
        let chunk: Vec<FeatureRecord> = order[start..(start + bs).min(order.len())]
            .iter()
            .map(|&i| train[i].clone())
            .collect();
        let batch = collate(&chunk, &CollateLimits::from(&model.config))?;
        let bundles = batch.bundles();
        let lr = self.state.schedule.lr_at(self.state.optimizer.step + 1);
        let outcome = step_on(model, &mut self.state, &bundles, &batch.targets, lr).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!(
                "epoch {} batch {}: {m}",
                self.state.epoch + 1,
                self.state.batch_in_epoch + 1
            )),
            other => other,
        })?;
        self.state.batch_in_epoch += 1;
        self.state.epoch_loss_sum += outcome.loss * chunk.len() as f64;
        self.state.epoch_samples += chunk.len();
        Ok(outcome)
    }

    /// Evaluates on `val`, records the epoch and updates early stopping.
    pub fn finish_epoch(&mut self, model: &TaemiModel, val: &[FeatureRecord]) -> Result<EpochRecord> {
        if !self.epoch_complete() {
            return Err(Error::Contract("epoch has unfinished batches".into()));
        }
        let s = &mut self.state;
        let eval = evaluate(model, val, s.config.eval_batch_size)?;
        s.epoch += 1;
        let record = EpochRecord {
            epoch: s.epoch,
            train_loss: s.epoch_loss_sum / s.epoch_samples as f64,
            lr: s.schedule.lr_at(s.optimizer.step),
            val: eval,
        };
        s.batch_in_epoch = 0;
        s.epoch_loss_sum = 0.0;
        s.epoch_samples = 0;
        let decision = s.stopper.update(s.epoch, record.val.mean_rho);
        if decision.improved {
            self.best_params = Some(model.params.clone());
        }
        s.reached_target = matches!(
            (s.config.target_mean_rho, record.val.mean_rho),
            (Some(t), Some(r)) if r >= t
        );
        s.finished = decision.stop || s.reached_target || s.epoch >= s.config.max_epochs;
        log::info!(
            "epoch {:>3}  loss {:.6}  val mean rho {}  lr {:.3e}",
            record.epoch,
            record.train_loss,
            record.val.mean_rho.map_or_else(|| "undefined".into(), |r| format!("{r:.4}")),
            record.lr
        );
        s.history.push(record.clone());
        Ok(record)
    }

    /// Runs until early stopping, the target metric, or the epoch limit.
    pub fn run(&mut self, model: &mut TaemiModel, train: &[FeatureRecord], val: &[FeatureRecord]) -> Result<TrainOutcome> {
        self.check_data(train)?;
        while !self.state.finished {
            while !self.epoch_complete() {
                self.train_batch(model, train)?;
            }
            self.finish_epoch(model, val)?;
        }
        Ok(self.outcome(model))
    }

    pub fn report(&self, model: &TaemiModel) -> TrainReport {
        let s = &self.state;
        TrainReport {
            model: model.config.clone(),
            train: s.config.clone(),
            epochs: s.history.clone(),
            best_epoch: s.stopper.best_epoch,
            best_mean_rho: s.stopper.best_metric,
            steps: s.optimizer.step,
            stopped_early: s.finished && s.epoch < s.config.max_epochs && !s.reached_target,
            reached_target: s.reached_target,
        }
    }

    pub fn outcome(&self, model: &TaemiModel) -> TrainOutcome {
        TrainOutcome {
            report: self.report(model),
            best_params: self.best_params.clone(),
        }
    }

    fn check_data(&self, train: &[FeatureRecord]) -> Result<()> {
        if train.len() != self.state.n_train {
            return Err(Error::Contract(format!(
                "state was built for {} training records, got {}",
                self.state.n_train,
                train.len()
            )));
        }
        Ok(())
    }
}

/// Forward, MSE, backward, clip and one scheduled AdamW update.
fn step_on(
    model: &mut TaemiModel,
    state: &mut TrainState,
    bundles: &[ModalityBundle],
    targets: &[f64],
    lr: f64,
) -> Result<StepOutcome> {
    let k = model.config.n_targets;
    let (loss, grads) = {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let trace = model.forward_graph(&mut g, &p, bundles, true, &mut state.rng)?;
        let target = g.constant(Tensor::matrix(bundles.len(), k, targets.to_vec())?);
        let loss = mse_loss(&mut g, trace.prediction, target)?;
        let value = g.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value}")));
        }
        g.backward(loss)?;
        (value, p.take_grads(&mut g))
    };
    model.params.zero_grads();
    model.params.accumulate(grads)?;
    let clip_scale = clip_param_grads(&mut model.params, state.config.clip_norm)?;
    state.optimizer.step(&mut model.params, lr)?;
    model.params.check_finite()?;
    Ok(StepOutcome { loss, lr, clip_scale })
}

/// Trains `model` in place and returns the history and best parameters.
pub fn train_loop(
    model: &mut TaemiModel,
    train: &[FeatureRecord],
    val: &[FeatureRecord],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    Trainer::new(model, config.clone(), train.len())?.run(model, train, val)
}
