//! Cross-entropy training with Adam, the epoch learning-rate rule, and
//! evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::data::{relation_slots, SceneExample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::parallel::{self, Execution};
use crate::param::{GradBuffer, ParamStore, RngState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Warm-up slope: epoch `t` starts at `t * lr_step`.
    pub lr_step: f64,
    pub lr_max: f64,
    /// Last epoch before decay starts.
    pub decay_after: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub clip_norm: Option<f64>,
    /// Shuffled passes over the data per schedule epoch.
    pub passes_per_epoch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 16,
            seed: 0,
            lr_step: 1e-4,
            lr_max: 3e-4,
            decay_after: 6,
            decay_every: 3,
            decay_factor: 0.5,
            clip_norm: None,
            passes_per_epoch: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("decay_every", self.decay_every),
            ("passes_per_epoch", self.passes_per_epoch),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr_step > 0.0 && self.lr_max > 0.0 && self.decay_factor > 0.0 && self.adam_eps > 0.0) {
            return Err(Error::Config("learning-rate and Adam constants must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    /// Optimizer steps one schedule epoch takes over `n` examples.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size) * self.passes_per_epoch
    }
}

/// `min(t·step, max)`, halved (by `decay_factor`) once per started block of
/// `decay_every` epochs after `decay_after`.
pub fn lr_at(t: usize, cfg: &TrainConfig) -> Result<f64> {
    if t < 1 {
        return Err(Error::Domain("epochs are counted from 1".into()));
    }
    let base = (t as f64 * cfg.lr_step).min(cfg.lr_max);
    if t <= cfg.decay_after {
        return Ok(base);
    }
    let halvings = (t - cfg.decay_after).div_ceil(cfg.decay_every);
    Ok(base * cfg.decay_factor.powi(halvings as i32))
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Per-token training loss (dropout active if configured).
    pub mean_loss: f64,
}

/// Deterministic shuffle for one pass.
pub fn epoch_order(n: usize, seed: u64, epoch: usize, pass: usize) -> Vec<usize> {
    let mut rng = RngState::derive(seed, ((epoch as u64) << 16) | pass as u64);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        order.swap(i, j);
    }
    order
}

pub fn train_epoch(
    model: &mut Model,
    data: &[SceneExample],
    cfg: &TrainConfig,
    opt: &mut Adam,
    epoch: usize,
    exec: Execution,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let lr = lr_at(epoch, cfg)?;
    let (mut total, mut tokens, mut steps) = (0.0, 0usize, 0usize);
    for pass in 0..cfg.passes_per_epoch {
        for chunk in epoch_order(data.len(), cfg.seed, epoch, pass).chunks(cfg.batch_size) {
            let batch: Vec<&SceneExample> = chunk.iter().map(|&i| &data[i]).collect();
            let step = opt.steps();
            let (loss, mut grads) = model.net.loss_and_grads(&model.params, &batch, Some((cfg.seed, step)), exec)?;
            if !loss.total.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {} at epoch {epoch}, step {step} (lr {lr:e}, examples {chunk:?})",
                    loss.total
                )));
            }
            let norm = grads.squared_norm().sqrt();
            if !norm.is_finite() {
                return Err(Error::Training(format!("non-finite gradient norm at epoch {epoch}, step {step}")));
            }
            if let Some(c) = cfg.clip_norm {
                if norm > c {
                    grads.scale(c / norm);
                }
            }
            opt.step(&mut model.params, &grads, lr);
            total += loss.total;
            tokens += loss.tokens;
            steps += 1;
        }
    }
    Ok(EpochStats {
        epoch,
        lr,
        steps,
        mean_loss: total / tokens as f64,
    })
}

/// Runs every epoch of `cfg`, calling `log` after each.
pub fn train(
    model: &mut Model,
    data: &[SceneExample],
    cfg: &TrainConfig,
    exec: Execution,
    mut log: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let mut opt = Adam::new(&model.params, cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let stats = train_epoch(model, data, cfg, &mut opt, epoch, exec)?;
        log(&stats);
        history.push(stats);
    }
    Ok(history)
}

/// Dropout-free per-token loss over a dataset.
pub fn dataset_loss(model: &Model, data: &[SceneExample], exec: Execution) -> Result<f64> {
    let batch: Vec<&SceneExample> = data.iter().collect();
    // Batches of one keep batch-normalized encoders on per-scene statistics,
    // matching decoding.
    let parts = parallel::try_map(exec, &batch, |_, ex| model.net.batch_loss(&model.params, &[*ex], Execution::Sequential))?;
    let total: f64 = parts.iter().map(|l| l.total).sum();
    let tokens: usize = parts.iter().map(|l| l.tokens).sum();
    Ok(total / tokens as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub exact_match_rate: f64,
    pub relation_token_accuracy: f64,
    pub mean_log_prob: f64,
}

struct SceneScore {
    exact: bool,
    relation_hits: usize,
    relation_slots: usize,
    log_prob: f64,
}

/// Decodes every scene (`beam <= 1` means greedy) and scores it.
///
/// Relation accuracy is measured under teacher forcing: at each reference
/// relation slot the prediction is the highest-scoring relation word given
/// the reference prefix.
pub fn evaluate(model: &Model, data: &[SceneExample], vocab: &Vocabulary, beam: usize, exec: Execution) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Evaluation("evaluation set is empty".into()));
    }
    let rel = vocab.relation_ids();
    let max_len = model.config().max_len;
    let scores = parallel::try_map(exec, data, |_, ex| -> Result<SceneScore> {
        let memory = model.encode(&ex.features, &ex.boxes)?;
        let decoded = model.decode_memory(&memory, beam, max_len)?;
        let n = ex.caption.len();
        let exact = decoded.finished && decoded.tokens == ex.caption[1..n - 1];
        let slots = relation_slots(&ex.caption, vocab);
        let mut hits = 0;
        if !slots.is_empty() {
            let logits = model.decoder_logits(&memory, &ex.caption[..n - 1])?;
            for &s in &slots {
                let row = logits.row(s - 1);
                let mut best = rel[0];
                for &r in &rel {
                    if row[r] > row[best] {
                        best = r;
                    }
                }
                hits += usize::from(best == ex.caption[s]);
            }
        }
        Ok(SceneScore {
            exact,
            relation_hits: hits,
            relation_slots: slots.len(),
            log_prob: decoded.log_prob,
        })
    })?;
    let slots: usize = scores.iter().map(|s| s.relation_slots).sum();
    if slots == 0 {
        return Err(Error::Evaluation("no relation words in the evaluation set".into()));
    }
    let n = scores.len() as f64;
    Ok(Metrics {
        exact_match_rate: scores.iter().filter(|s| s.exact).count() as f64 / n,
        relation_token_accuracy: scores.iter().map(|s| s.relation_hits).sum::<usize>() as f64 / slots as f64,
        mean_log_prob: scores.iter().map(|s| s.log_prob).sum::<f64>() / n,
    })
}
