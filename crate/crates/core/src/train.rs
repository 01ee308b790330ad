//! Mini-batch training with Adam, staircase learning-rate decay, early
//! stopping on validation R10@1, and resumable checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{derive_seed, EncodedExample};
use crate::eval::{evaluate, EvalError, MetricsReport};
use crate::model::{example_outcome, ModelConfig, ModelError, Phmn};
use crate::nn::io::Container;
use crate::nn::{Grad, Gradients, NnError, ParamStore, Tensor};
use crate::persona::{AttentionWeights, TfidfModel};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config `{key}`: {msg}")]
    Config { key: &'static str, msg: String },
    #[error("training diverged at step {step}: non-finite {what}")]
    Diverged { step: u64, what: &'static str },
    #[error("empty training set")]
    NoData,
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub decay: f64,
    pub decay_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub eval_every: u64,
    pub patience: u32,
    pub max_epochs: u64,
    pub max_steps: Option<u64>,
    pub log_every: u64,
    /// Keep only this many of the most recent history utterances.
    pub history_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 60,
            lr0: 3e-4,
            decay: 0.95,
            decay_steps: 2000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: Some(5.0),
            eval_every: 2000,
            patience: 3,
            max_epochs: 10,
            max_steps: None,
            log_every: 50,
            history_size: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |key: &'static str, msg: &str| {
            Err(TrainError::Config {
                key,
                msg: msg.to_string(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", "must be positive");
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("decay", "must lie in (0, 1)");
        }
        if self.decay_steps == 0 {
            return bad("decay_steps", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps", "must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm", "must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be positive");
        }
        if self.patience == 0 {
            return bad("patience", "must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every", "must be positive");
        }
        Ok(())
    }

    /// Hash of every setting that shapes the optimization trajectory.
    /// Budget and logging knobs are left out so a run can be extended.
    pub fn fingerprint(&self) -> String {
        let core = Self {
            max_epochs: 0,
            max_steps: None,
            log_every: 0,
            ..self.clone()
        };
        crate::fingerprint(&serde_json::to_vec(&core).expect("config serializes"))
    }

    /// `lr0 · decay^⌊step / decay_steps⌋`, applied as repeated products so
    /// each plateau is the previous one times `decay`.
    pub fn lr(&self, step: u64) -> f64 {
        (0..step / self.decay_steps).fold(self.lr0, |lr, _| lr * self.decay)
    }
}

pub fn lr_schedule(cfg: &TrainConfig, step: u64) -> f64 {
    cfg.lr(step)
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let mut zeros = ParamStore::new();
        for (_, p) in params.iter() {
            zeros.add(&p.name, Tensor::zeros(p.value.shape()));
        }
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected update; parameters without a gradient see a zero
    /// gradient. Embedding row 0 stays at zero because its gradient is
    /// always zero.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for id in ids {
            if !params.get(id).trainable {
                continue;
            }
            let g = grads.get(id);
            let m = self.m.get_mut(id).value.data_mut();
            let v = self.v.get_mut(id).value.data_mut();
            let p = params.get_mut(id).value.data_mut();
            let dense;
            let gd: Option<&[f64]> = match g {
                Some(Grad::Dense(t)) => Some(t.data()),
                Some(other) => {
                    dense = other.to_dense(&[p.len()]);
                    Some(dense.data())
                }
                None => None,
            };
            for i in 0..p.len() {
                let gi = gd.map_or(0.0, |d| d[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Examples with their precomputed mask weights.
pub struct Dataset {
    pub examples: Vec<EncodedExample>,
    pub weights: Vec<Option<AttentionWeights>>,
}

impl Dataset {
    pub fn new(
        model: &Phmn,
        mut examples: Vec<EncodedExample>,
        tfidf: Option<&TfidfModel>,
        history_size: Option<usize>,
    ) -> Self {
        if let Some(n) = history_size {
            examples.iter_mut().for_each(|e| e.truncate_history(n));
        }
        let weights = examples.iter().map(|e| model.mask_weights(e, tfidf)).collect();
        Self { examples, weights }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Position of the optimizer in the data stream plus early-stopping state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub step: u64,
    pub epoch: u64,
    /// Batches already consumed in the current epoch.
    pub batch_in_epoch: u64,
    pub best_metric: Option<f64>,
    pub best_step: Option<u64>,
    pub bad_evals: u32,
    pub stopped: bool,
}

impl Progress {
    fn start() -> Self {
        Self {
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            best_metric: None,
            best_step: None,
            bad_evals: 0,
            stopped: false,
        }
    }
}

pub struct Trainer {
    pub model: Phmn,
    pub params: ParamStore,
    pub adam: Adam,
    pub best: Option<ParamStore>,
    pub best_metrics: Option<MetricsReport>,
    pub progress: Progress,
    pub cfg: TrainConfig,
    pub corpus_fingerprint: String,
}

/// Per-step record written to the training log.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Loss and gradient averaged over a batch; per-example work runs in
/// parallel, reduction happens in batch order.
pub fn batch_gradients(
    model: &Phmn,
    params: &ParamStore,
    data: &Dataset,
    batch: &[usize],
) -> Result<(f64, Gradients), ModelError> {
    let outcomes: Vec<_> = batch
        .par_iter()
        .map(|&i| example_outcome(model, params, &data.examples[i], data.weights[i].as_ref()))
        .collect::<Result<_, _>>()?;
    let mut grads = Gradients::new(params.len());
    let mut loss = 0.0;
    for o in &outcomes {
        loss += o.loss;
        grads.merge(&o.grads);
    }
    let s = 1.0 / batch.len() as f64;
    grads.scale(s);
    Ok((loss * s, grads))
}

pub fn accuracy(model: &Phmn, params: &ParamStore, data: &Dataset) -> Result<f64, ModelError> {
    let hits: Vec<bool> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let ex = &data.examples[i];
            crate::model::score_example(model, params, ex, data.weights[i].as_ref())
                .map(|m| (m > 0.0) == (ex.label == 1))
        })
        .collect::<Result<_, _>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64)
}

pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch{epoch}"))));
    order
}

pub enum Outcome {
    Finished,
    EarlyStopped,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, corpus_fingerprint: &str) -> Result<Self, TrainError> {
        cfg.validate()?;
        let (model, params) = Phmn::new(model_cfg)?;
        Ok(Self {
            adam: Adam::new(&params),
            model,
            params,
            best: None,
            best_metrics: None,
            progress: Progress::start(),
            cfg,
            corpus_fingerprint: corpus_fingerprint.to_string(),
        })
    }

    /// Run until `max_steps`, `max_epochs` or early stopping. On divergence
    /// the parameters are rolled back to the state before the failing step
    /// and the error is returned.
    pub fn run(
        &mut self,
        train: &Dataset,
        valid: Option<&Dataset>,
        log: &mut dyn Write,
    ) -> Result<Outcome, TrainError> {
        if train.is_empty() {
            return Err(TrainError::NoData);
        }
        let cfg = self.cfg.clone();
        let n = train.len();
        let per_epoch = n.div_ceil(cfg.batch_size) as u64;
        let mut evaluated_at = None;
        while self.progress.epoch < cfg.max_epochs && !self.progress.stopped {
            let order = epoch_order(cfg.seed, self.progress.epoch, n);
            while self.progress.batch_in_epoch < per_epoch {
                if cfg.max_steps.is_some_and(|m| self.progress.step >= m) {
                    break;
                }
                let b = self.progress.batch_in_epoch as usize;
                let batch = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
                let step = self.progress.step;
                let (loss, mut grads) = batch_gradients(&self.model, &self.params, train, batch)?;
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { step, what: "loss" });
                }
                if !grads.all_finite() {
                    return Err(TrainError::Diverged { step, what: "gradient" });
                }
                let grad_norm = grads.global_norm();
                if let Some(c) = cfg.clip_norm {
                    if grad_norm > c {
                        grads.scale(c / grad_norm);
                    }
                }
                let lr = cfg.lr(step);
                self.adam.update(&mut self.params, &grads, lr, &cfg);
                self.progress.step += 1;
                self.progress.batch_in_epoch += 1;
                if self.progress.step % cfg.log_every == 0 || self.progress.step == 1 {
                    let rec = StepRecord {
                        step: self.progress.step,
                        epoch: self.progress.epoch,
                        lr,
                        loss,
                        grad_norm,
                    };
                    writeln!(log, "{}", serde_json::to_string(&rec).expect("record"))?;
                }
                if self.progress.step % cfg.eval_every == 0 {
                    if let Some(v) = valid {
                        self.evaluate_and_track(v, log)?;
                        evaluated_at = Some(self.progress.step);
                        if self.progress.stopped {
                            break;
                        }
                    }
                }
            }
            if cfg.max_steps.is_some_and(|m| self.progress.step >= m) {
                break;
            }
            if !self.progress.stopped {
                self.progress.epoch += 1;
                self.progress.batch_in_epoch = 0;
            }
        }
        if let Some(v) = valid {
            if evaluated_at != Some(self.progress.step) && !self.progress.stopped {
                self.evaluate_and_track(v, log)?;
            }
        }
        Ok(if self.progress.stopped {
            Outcome::EarlyStopped
        } else {
            Outcome::Finished
        })
    }

    fn evaluate_and_track(&mut self, valid: &Dataset, log: &mut dyn Write) -> Result<(), TrainError> {
        let (report, _) = evaluate(&self.model, &self.params, &valid.examples, &valid.weights)?;
        let improved = self.progress.best_metric.is_none_or(|b| report.r10_1 > b);
        if improved {
            self.progress.best_metric = Some(report.r10_1);
            self.progress.best_step = Some(self.progress.step);
            self.progress.bad_evals = 0;
            self.best = Some(self.params.clone());
            self.best_metrics = Some(report.clone());
        } else {
            self.progress.bad_evals += 1;
            if self.progress.bad_evals >= self.cfg.patience {
                self.progress.stopped = true;
            }
        }
        let rec = json!({
            "step": self.progress.step,
            "valid": report,
            "best": improved,
        });
        writeln!(log, "{rec}")?;
        Ok(())
    }

    /// Parameters to test with: the best validated ones if any evaluation
    /// ran, otherwise the current ones.
    pub fn best_params(&self) -> &ParamStore {
        self.best.as_ref().unwrap_or(&self.params)
    }

    fn meta(&self, metrics: Option<&MetricsReport>) -> serde_json::Value {
        json!({
            "model_config": self.model.cfg,
            "train_config": self.cfg,
            "train_fingerprint": self.cfg.fingerprint(),
            "corpus_fingerprint": self.corpus_fingerprint,
            "step": self.progress.step,
            "metrics": metrics,
            "progress": self.progress,
            "adam_t": self.adam.t,
        })
    }

    /// Full resumable state: current parameters, optimizer moments and the
    /// best parameters so far.
    pub fn save_state(&self, path: &Path) -> Result<(), TrainError> {
        let mut c = Container::new(self.model.cfg.fingerprint(), self.meta(self.best_metrics.as_ref()));
        c.push_store("param", &self.params);
        c.push_store("adam.m", &self.adam.m);
        c.push_store("adam.v", &self.adam.v);
        if let Some(b) = &self.best {
            c.push_store("best", b);
        }
        write_container(path, &c)
    }

    /// Parameters for evaluation only.
    pub fn save_best(&self, path: &Path) -> Result<(), TrainError> {
        let mut c = Container::new(self.model.cfg.fingerprint(), self.meta(self.best_metrics.as_ref()));
        c.push_store("param", self.best_params());
        write_container(path, &c)
    }

    /// Restore a state written by [`Trainer::save_state`]. Refuses if the
    /// model, training or corpus fingerprints differ from the ones given.
    pub fn resume(
        path: &Path,
        model_cfg: ModelConfig,
        cfg: TrainConfig,
        corpus_fingerprint: &str,
    ) -> Result<Self, TrainError> {
        let c = read_container(path)?;
        let mut t = Self::new(model_cfg, cfg, corpus_fingerprint)?;
        if c.fingerprint != t.model.cfg.fingerprint() {
            return Err(TrainError::Resume("model configuration differs from checkpoint".into()));
        }
        let meta = &c.meta;
        if meta["train_fingerprint"] != t.cfg.fingerprint() {
            return Err(TrainError::Resume("training configuration differs from checkpoint".into()));
        }
        if meta["corpus_fingerprint"] != corpus_fingerprint {
            return Err(TrainError::Resume("corpus differs from checkpoint".into()));
        }
        if !c.has_section("adam.m") {
            return Err(TrainError::Resume("checkpoint holds no optimizer state".into()));
        }
        c.load_store("param", &mut t.params)?;
        c.load_store("adam.m", &mut t.adam.m)?;
        c.load_store("adam.v", &mut t.adam.v)?;
        t.adam.t = meta["adam_t"]
            .as_u64()
            .ok_or_else(|| TrainError::Checkpoint("missing adam_t".into()))?;
        t.progress = serde_json::from_value(meta["progress"].clone())
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if c.has_section("best") {
            let mut best = t.params.clone();
            c.load_store("best", &mut best)?;
            t.best = Some(best);
            t.best_metrics = serde_json::from_value(meta["metrics"].clone())
                .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        }
        Ok(t)
    }
}

fn write_container(path: &Path, c: &Container) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    c.write(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_container(path: &Path) -> Result<Container, TrainError> {
    Ok(Container::read(BufReader::new(File::open(path)?))?)
}

/// A trained model loaded for scoring.
pub struct LoadedModel {
    pub model: Phmn,
    pub params: ParamStore,
    pub corpus_fingerprint: String,
    pub meta: serde_json::Value,
}

/// Load the `param/` section of a checkpoint. The model configuration is
/// read from the checkpoint and must hash to the stored fingerprint.
pub fn load_model(path: &Path) -> Result<LoadedModel, TrainError> {
    let c = read_container(path)?;
    let cfg: ModelConfig = serde_json::from_value(c.meta["model_config"].clone())
        .map_err(|e| TrainError::Checkpoint(format!("model config: {e}")))?;
    if cfg.fingerprint() != c.fingerprint {
        return Err(ModelError::Fingerprint {
            expected: cfg.fingerprint(),
            found: c.fingerprint.clone(),
        }
        .into());
    }
    let (model, mut params) = Phmn::new(cfg)?;
    c.load_store("param", &mut params)?;
    Ok(LoadedModel {
        model,
        params,
        corpus_fingerprint: c.meta["corpus_fingerprint"].as_str().unwrap_or_default().to_string(),
        meta: c.meta,
    })
}
