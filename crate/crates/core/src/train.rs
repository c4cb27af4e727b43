//! Loss, Adam, AUC and the epoch loop with early stopping on validation AUC.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Batch;
use crate::network::Model;
use crate::numerics::{Param, RngStream};

pub const PROBABILITY_CLAMP: f64 = 1e-12;

/// Mean binary cross-entropy and its gradient w.r.t. the logits,
/// `(p - y) / n`. Probabilities are clamped to `[1e-12, 1 - 1e-12]` inside
/// the logarithm.
pub fn bce_loss(probabilities: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if probabilities.len() != labels.len() {
        return Err(Error::dim("bce_loss", format!("{} probabilities for {} labels", probabilities.len(), labels.len())));
    }
    if probabilities.is_empty() {
        return Err(Error::Train("loss over an empty batch".into()));
    }
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(labels.len());
    for (&p, &y) in probabilities.iter().zip(labels) {
        if y != 0.0 && y != 1.0 {
            return Err(Error::Data(format!("label {y} is not 0 or 1")));
        }
        let pc = p.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP);
        loss -= if y == 1.0 { pc.ln() } else { (1.0 - pc).ln() };
        grad.push((p - y) / n);
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment buffers, one per parameter, plus the step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every parameter from its gradient.
pub fn adam_step(params: &mut [&mut Param], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || params.iter().zip(&state.m).any(|(p, m)| p.value.len() != m.len()) {
        return Err(Error::dim("adam_step", "parameter shapes changed since the optimizer was created"));
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let Param { value, grad } = &mut **p;
        for (((w, g), m), v) in value.as_mut_slice().iter_mut().zip(grad.as_slice()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Area under the ROC curve via average ranks; tied pairs count one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auc", format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric(format!("score {s} cannot be ranked")));
    }
    let positives = labels.iter().filter(|l| **l == 1.0).count();
    let negatives = labels.iter().filter(|l| **l == 0.0).count();
    if positives + negatives != labels.len() {
        return Err(Error::Data("AUC labels must be 0 or 1".into()));
    }
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!("AUC needs both classes ({positives} positive, {negatives} negative)")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; a tie block shares the average rank.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        positive_rank_sum += rank * order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    /// Epochs without a validation AUC improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Write wall-clock seconds into the history; off by default so that
    /// histories of identical runs hash identically.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1000,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 10,
            patience: 3,
            seed: 0,
            record_time: false,
        }
    }
}

impl TrainConfig {
    /// Parses the body of a `[train]` table; missing keys take defaults.
    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::config("train", e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1", "Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_auc: f64,
    pub seconds: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,valid_auc,seconds";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.valid_auc, r.seconds));
    }
    out
}

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(history_csv(history).as_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Optimizer plus model for one training stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    adam: AdamConfig,
    state: AdamState,
}

impl Trainer {
    pub fn new(model: Model, adam: AdamConfig) -> Self {
        Trainer { model, adam, state: AdamState::new() }
    }

    /// Forward, loss, backward and one Adam update on `batch`; returns the
    /// loss before the update.
    pub fn step(&mut self, batch: &Batch) -> Result<f64> {
        self.model.zero_grad();
        let out = self.model.forward(batch, true)?;
        let (loss, grad) = bce_loss(&out.probabilities, batch.labels())?;
        if !loss.is_finite() {
            return Err(Error::Train(format!("non-finite loss at step {}", self.state.step + 1)));
        }
        self.model.backward(&grad)?;
        let mut params = self.model.params_mut();
        adam_step(&mut params, &mut self.state, &self.adam)?;
        Ok(loss)
    }

    pub fn steps(&self) -> u64 {
        self.state.step
    }
}

/// Eval-mode probabilities, computed in parallel over chunks of rows.
pub fn predict(model: &Model, data: &Batch, chunk: usize) -> Result<Vec<f64>> {
    let chunk = chunk.max(1);
    let idx: Vec<usize> = (0..data.rows()).collect();
    let parts: Vec<Vec<f64>> = idx
        .par_chunks(chunk)
        .map(|c| model.predict(&data.select(c)).map(|o| o.probabilities))
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

pub fn evaluate_auc(model: &Model, data: &Batch, chunk: usize) -> Result<f64> {
    auc(&predict(model, data, chunk)?, data.labels())
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// The model from the epoch with the best validation AUC.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_auc: f64,
    /// Final short batches skipped because BatchNorm needs two rows.
    pub dropped_batches: usize,
}

/// Mini-batch training with per-epoch shuffling and early stopping on
/// validation AUC.
pub fn fit(model: Model, train: &Batch, valid: &Batch, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    if train.rows() == 0 || valid.rows() == 0 {
        return Err(Error::Train("training and validation splits must be non-empty".into()));
    }
    let needs_pairs = model.config().uses_batch_norm();
    if needs_pairs && cfg.batch_size < 2 {
        return Err(Error::config("train.batch_size", "must be at least 2 when BatchNorm is used"));
    }
    let mut trainer = Trainer::new(model, cfg.adam());
    let mut shuffler = RngStream::new(cfg.seed).fork(0x5eed);
    let mut order: Vec<usize> = (0..train.rows()).collect();
    let mut history = Vec::new();
    let mut best: Option<(Model, usize, f64)> = None;
    let mut since_best = 0;
    let mut dropped_batches = 0;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        shuffler.shuffle(&mut order);
        let (mut loss_sum, mut rows) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if needs_pairs && chunk.len() < 2 {
                dropped_batches += 1;
                continue;
            }
            let batch = train.select(chunk);
            loss_sum += trainer.step(&batch)? * chunk.len() as f64;
            rows += chunk.len();
        }
        if rows == 0 {
            return Err(Error::Train("no trainable batch in the training split".into()));
        }
        let valid_auc = evaluate_auc(&trainer.model, valid, cfg.batch_size.max(1000))?;
        let seconds = if cfg.record_time { start.elapsed().as_secs_f64() } else { 0.0 };
        history.push(EpochRecord { epoch, train_loss: loss_sum / rows as f64, valid_auc, seconds });
        if best.as_ref().is_none_or(|b| valid_auc > b.2) {
            best = Some((trainer.model.clone(), epoch, valid_auc));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    let (model, best_epoch, best_valid_auc) = best.expect("at least one epoch ran");
    Ok(FitResult { model, history, best_epoch, best_valid_auc, dropped_batches })
}
