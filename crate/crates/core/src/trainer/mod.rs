//! Deterministic training loop with periodic dev evaluation, checkpointing
//! and early stopping.

pub mod adam;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::batch::{encode_pairs, make_batches, QaPair};
use crate::data::corpus::CorpusRecord;
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::model::{Checkpoint, Model, ModelConfig, TrainingState};
use crate::objective::{batch_objective, beta_schedule, BatchNoise, LossBreakdown, ObjectiveConfig};
use crate::rng;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default = "one")]
    pub eval_every: usize,
    /// Evaluations without dev improvement before stopping; `None` never stops early.
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Steps between loss rows in the training log.
    #[serde(default = "one")]
    pub log_every: usize,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> f64 {
    5.0
}
fn one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 32,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            eval_every: 1,
            patience: None,
            clip_norm: default_clip(),
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if self.eval_every == 0 || self.log_every == 0 {
            return Err(Error::Config("train.eval_every and train.log_every must be at least 1".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config("train.clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Serialize)]
struct StepRow {
    epoch: usize,
    step: u64,
    l_cross: f64,
    l_kl: f64,
    l_match: f64,
    beta: f64,
    total: f64,
}

#[derive(Serialize)]
struct EvalRow {
    event: &'static str,
    epoch: usize,
    dev_mrr: f64,
    #[serde(rename = "dev_r@1")]
    dev_r1: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean: LossBreakdown,
    pub batches: usize,
    pub skipped_batches: usize,
    /// Parameters that received no gradient during the epoch.
    pub untouched: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub best_model: Model<f32>,
    pub state: TrainingState,
    pub epochs: Vec<EpochStats>,
    pub last_dev: Option<MetricsReport>,
}

/// Where and whether the run writes checkpoints and its log.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

pub struct Trainer<'a> {
    pairs: Vec<QaPair>,
    dev: Option<&'a [CorpusRecord]>,
    vocab: &'a Vocabulary,
    cfg: TrainConfig,
    objective: ObjectiveConfig,
    seed: u64,
    model: Model<f32>,
    best: Model<f32>,
    optimizer: AdamState<f32>,
    state: TrainingState,
    log: Option<BufWriter<File>>,
    dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    /// Starts a fresh run, or continues from `resume` when given.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        train: &[CorpusRecord],
        dev: Option<&'a [CorpusRecord]>,
        vocab: &'a Vocabulary,
        model: Model<f32>,
        cfg: TrainConfig,
        objective: ObjectiveConfig,
        seed: u64,
        output: RunOutput,
        resume: Option<Checkpoint>,
    ) -> Result<Self> {
        cfg.validate()?;
        objective.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if model.config().vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model.vocab_size {} differs from the vocabulary size {}",
                model.config().vocab_size,
                vocab.len()
            )));
        }
        let objective = match objective.total_epochs {
            Some(_) => objective,
            None => objective.with_epochs(cfg.epochs),
        };
        let pairs = encode_pairs(train, vocab, model.config().max_len)?;
        let (model, optimizer, state) = match resume {
            Some(ck) => {
                ck.check_vocab(vocab)?;
                if &ck.config != model.config() {
                    return Err(Error::Config("resume checkpoint has a different model config".into()));
                }
                let m = ck.model()?;
                let opt = ck.optimizer.unwrap_or_else(|| AdamState::new(m.params()));
                let st = ck.training.unwrap_or_else(fresh_state);
                (m, opt, st)
            }
            None => {
                let opt = AdamState::new(model.params());
                (model, opt, fresh_state())
            }
        };
        let (log, dir) = match output.dir {
            Some(dir) => {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let path = dir.join(TRAIN_LOG);
                let file = if state.epochs_completed > 0 {
                    OpenOptions::new().append(true).create(true).open(&path)
                } else {
                    File::create(&path)
                }
                .map_err(|e| Error::io(&path, e))?;
                (Some(BufWriter::new(file)), Some(dir))
            }
            None => (None, None),
        };
        let best = match (&dir, state.best_epoch) {
            (Some(d), Some(_)) if d.join(BEST_CHECKPOINT).exists() => Checkpoint::load(&d.join(BEST_CHECKPOINT))?.model()?,
            _ => model.clone(),
        };
        Ok(Self {
            pairs,
            dev,
            vocab,
            cfg,
            objective,
            seed,
            model,
            best,
            optimizer,
            state,
            log,
            dir,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    fn write_row<S: Serialize>(&mut self, row: &S) -> Result<()> {
        if let Some(w) = &mut self.log {
            let line = serde_json::to_string(row).expect("log row serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(TRAIN_LOG, e))?;
        }
        Ok(())
    }

    fn checkpoint(&self, model: &Model<f32>, with_optimizer: bool) -> Checkpoint {
        let mut ck = Checkpoint::new(model, self.vocab);
        ck.training = Some(self.state.clone());
        if with_optimizer {
            ck.optimizer = Some(self.optimizer.clone());
        }
        ck
    }

    fn save(&mut self, best: bool) -> Result<()> {
        let Some(dir) = self.dir.clone() else { return Ok(()) };
        if let Some(w) = &mut self.log {
            w.flush().map_err(|e| Error::io(dir.join(TRAIN_LOG), e))?;
        }
        if best {
            self.checkpoint(&self.best, false).save(&dir.join(BEST_CHECKPOINT))?;
        }
        self.checkpoint(&self.model, true).save(&dir.join(LAST_CHECKPOINT))
    }

    /// One pass over the training pairs.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochStats> {
        let beta = beta_schedule(epoch, &self.objective);
        let batches = make_batches(&self.pairs, self.cfg.batch_size, self.seed, epoch as u64)?;
        let mut noise_rng = rng::stream(self.seed, "noise", epoch as u64);
        let sampled = self.model.config().variant.has_decoders();
        let d_z = self.model.config().latent_dim;
        let adam = self.cfg.adam();
        let mut touched = vec![false; self.model.params().len()];
        let mut stats = EpochStats {
            epoch,
            ..Default::default()
        };
        let mut sum = LossBreakdown::default();
        for batch in &batches {
            let noise = sampled.then(|| BatchNoise::<f32>::sample(&mut noise_rng, batch.len(), d_z));
            let mut s = self.model.session();
            let (loss, parts) = batch_objective(&mut s, batch, noise.as_ref(), beta, &self.objective)?;
            s.graph.backward(loss)?;
            let grads = s.into_param_grads();
            let params = self.model.params_mut();
            params.zero_grad();
            for (id, g) in &grads {
                params.get_mut(*id).accumulate_grad(g);
            }
            clip_grad_norm(params, self.cfg.clip_norm);
            if let Err(e) = adam_step(params, &mut self.optimizer, &adam) {
                match e {
                    Error::NonFiniteGradient(name) => {
                        log::warn!("epoch {epoch}: skipping batch, non-finite gradient for {name}");
                        stats.skipped_batches += 1;
                        params.zero_grad();
                        continue;
                    }
                    other => return Err(other),
                }
            }
            params.zero_grad();
            if !params.all_finite() {
                return Err(Error::NonFiniteValue("parameters after update".into()));
            }
            for (id, _) in &grads {
                touched[*id] = true;
            }
            stats.batches += 1;
            sum.l_cross += parts.l_cross;
            sum.l_kl += parts.l_kl;
            sum.l_match += parts.l_match;
            sum.beta_effective += parts.beta_effective;
            sum.total += parts.total;
            let step = self.optimizer.step;
            if step.is_multiple_of(self.cfg.log_every as u64) {
                self.write_row(&StepRow {
                    epoch,
                    step,
                    l_cross: parts.l_cross,
                    l_kl: parts.l_kl,
                    l_match: parts.l_match,
                    beta: parts.beta_effective,
                    total: parts.total,
                })?;
            }
        }
        let n = stats.batches.max(1) as f64;
        stats.mean = LossBreakdown {
            l_cross: sum.l_cross / n,
            l_kl: sum.l_kl / n,
            l_match: sum.l_match / n,
            beta_effective: sum.beta_effective / n,
            total: sum.total / n,
        };
        stats.untouched = touched
            .iter()
            .enumerate()
            .filter(|(_, &t)| !t)
            .map(|(i, _)| self.model.params().name(i).to_string())
            .collect();
        if !stats.untouched.is_empty() {
            log::warn!("epoch {epoch}: parameters without gradient: {:?}", stats.untouched);
        }
        Ok(stats)
    }

    /// Runs the remaining epochs. Returns the final and best models.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let mut epochs = Vec::new();
        let mut last_dev = None;
        if self.state.epochs_completed == 0 {
            self.save(true)?;
        }
        while self.state.epochs_completed < self.cfg.epochs && !self.state.stopped_early {
            let epoch = self.state.epochs_completed;
            let stats = self.run_epoch(epoch)?;
            log::info!(
                "epoch {epoch}: total {:.4} cross {:.4} kl {:.4} match {:.4} beta {:.3}",
                stats.mean.total,
                stats.mean.l_cross,
                stats.mean.l_kl,
                stats.mean.l_match,
                stats.mean.beta_effective
            );
            epochs.push(stats);
            self.state.epochs_completed += 1;
            let mut improved = false;
            match self.dev {
                Some(dev) if (epoch + 1).is_multiple_of(self.cfg.eval_every) || epoch + 1 == self.cfg.epochs => {
                    let (report, _) = evaluate(&self.model, self.vocab, dev, None)?;
                    self.write_row(&EvalRow {
                        event: "eval",
                        epoch,
                        dev_mrr: report.mrr,
                        dev_r1: report.recall(1),
                    })?;
                    log::info!("epoch {epoch}: dev mrr {:.4} r@1 {:.4}", report.mrr, report.recall(1));
                    if self.state.best_dev_mrr.is_none_or(|b| report.mrr > b) {
                        self.state.best_dev_mrr = Some(report.mrr);
                        self.state.best_epoch = Some(epoch);
                        self.state.evals_without_improvement = 0;
                        improved = true;
                    } else {
                        self.state.evals_without_improvement += 1;
                        if self.cfg.patience.is_some_and(|p| self.state.evals_without_improvement >= p) {
                            log::info!("stopping early after epoch {epoch}");
                            self.state.stopped_early = true;
                        }
                    }
                    last_dev = Some(report);
                }
                Some(_) => {}
                None => {
                    self.state.best_epoch = Some(epoch);
                    improved = true;
                }
            }
            if improved {
                self.best = self.model.clone();
            }
            self.save(improved)?;
        }
        if let Some(w) = &mut self.log {
            w.flush().map_err(|e| Error::io(TRAIN_LOG, e))?;
        }
        Ok(TrainOutcome {
            model: self.model,
            best_model: self.best,
            state: self.state,
            epochs,
            last_dev,
        })
    }
}

fn fresh_state() -> TrainingState {
    TrainingState {
        epochs_completed: 0,
        best_dev_mrr: None,
        best_epoch: None,
        evals_without_improvement: 0,
        stopped_early: false,
    }
}

/// Convenience wrapper: builds a fresh model from `model_cfg` and trains it.
#[allow(clippy::too_many_arguments)]
pub fn train(
    train: &[CorpusRecord],
    dev: Option<&[CorpusRecord]>,
    vocab: &Vocabulary,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    objective: ObjectiveConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let model = Model::new(model_cfg, seed)?;
    let output = RunOutput {
        dir: out_dir.map(Path::to_path_buf),
    };
    Trainer::new(train, dev, vocab, model, cfg, objective, seed, output, None)?.run()
}
