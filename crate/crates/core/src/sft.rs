//! Supervised fine-tuning: masked next-token cross-entropy over packed
//! chunks, AdamW, linear-warmup / cosine schedule.
//!
//! Position `t` of a chunk predicts token `t + 1` and contributes to the loss
//! iff token `t + 1` carries a loss bit. Loss is the mean over every masked
//! position in the batch (token-weighted, not a mean of per-chunk means).

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ops::log_softmax;
use crate::model::{ModelError, ModelState};
use crate::optim::{AdamW, Optimizer, WarmupCosine};
use crate::packer::{PackedChunk, DEFAULT_CHUNK_LEN};
use crate::seed;
use crate::tokenizer::TokenId;

#[derive(Debug, Error)]
pub enum SftError {
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("invalid SFT config: {0}")]
    Config(String),
    #[error("no chunk carries any loss-bearing target")]
    NoTrainableChunks,
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64, state: Box<ModelState> },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Masked cross-entropy summed over masked positions, its gradient with
/// respect to the logits, and the number of masked positions. Rows with a
/// zero mask bit get an all-zero gradient.
pub fn masked_ce_sum(logits: &[f64], vocab: usize, targets: &[TokenId], mask: &[bool]) -> (f64, Vec<f64>, usize) {
    assert_eq!(logits.len(), targets.len() * vocab, "logits/targets shape");
    assert_eq!(targets.len(), mask.len(), "targets/mask shape");
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let mut count = 0;
    for (t, (&target, _)) in targets.iter().zip(mask).enumerate().filter(|(_, (_, &m))| m) {
        let row = &logits[t * vocab..(t + 1) * vocab];
        let lp = log_softmax(row);
        loss -= lp[target as usize];
        count += 1;
        let g = &mut grad[t * vocab..(t + 1) * vocab];
        for (gi, l) in g.iter_mut().zip(&lp) {
            *gi = l.exp();
        }
        g[target as usize] -= 1.0;
    }
    (loss, grad, count)
}

/// Masked cross-entropy with the requested reduction, and its logit gradient.
pub fn masked_ce_loss(
    logits: &[f64],
    vocab: usize,
    targets: &[TokenId],
    mask: &[bool],
    reduction: Reduction,
) -> Result<(f64, Vec<f64>), SftError> {
    let (sum, mut grad, count) = masked_ce_sum(logits, vocab, targets, mask);
    if count == 0 {
        return Err(SftError::EmptyMask);
    }
    match reduction {
        Reduction::Sum => Ok((sum, grad)),
        Reduction::Mean => {
            let inv = 1.0 / count as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            Ok((sum * inv, grad))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub peak_lr: f64,
    /// Defaults to 3% of the total step count.
    pub warmup_steps: Option<usize>,
    /// Defaults to `epochs × ceil(chunks / batch_chunks)`. When set, exactly
    /// this many steps run, cycling through reshuffled epochs as needed.
    pub total_steps: Option<usize>,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub chunk_len: usize,
    pub batch_chunks: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            peak_lr: 5e-6,
            warmup_steps: None,
            total_steps: None,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.01,
            epochs: 2,
            chunk_len: DEFAULT_CHUNK_LEN,
            batch_chunks: 32,
        }
    }
}

impl SftConfig {
    pub const WARMUP_FRACTION: f64 = 0.03;

    pub fn validate(&self) -> Result<(), SftError> {
        let bad = |m: &str| Err(SftError::Config(m.to_string()));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        if self.total_steps == Some(0) {
            return bad("total_steps must be positive");
        }
        if self.epochs == 0 || self.batch_chunks == 0 {
            return bad("epochs and batch_chunks must be positive");
        }
        if self.chunk_len < 2 {
            return bad("chunk_len must be at least 2");
        }
        if let (Some(w), Some(s)) = (self.warmup_steps, self.total_steps) {
            if w == 0 || w >= s {
                return bad("warmup_steps must satisfy 0 < warmup_steps < total_steps");
            }
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }

    /// Resolves the schedule for a run over `n_chunks` trainable chunks.
    pub fn schedule(&self, n_chunks: usize) -> Result<WarmupCosine, SftError> {
        self.validate()?;
        let total = self.total_steps.unwrap_or(self.epochs * n_chunks.div_ceil(self.batch_chunks));
        if total < 2 {
            return Err(SftError::Config(format!("schedule needs at least 2 steps, got {total}")));
        }
        let warmup = self
            .warmup_steps
            .unwrap_or_else(|| ((total as f64 * Self::WARMUP_FRACTION).round() as usize).clamp(1, total - 1));
        if warmup == 0 || warmup >= total {
            return Err(SftError::Config(format!("warmup {warmup} must lie in (0, {total})")));
        }
        Ok(WarmupCosine { peak: self.peak_lr, warmup, total })
    }
}

/// Learning rate at `step` of the warmup-cosine schedule.
pub fn lr_at(step: usize, schedule: &WarmupCosine) -> f64 {
    schedule.lr_at(step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub state: ModelState,
    pub metrics: Vec<StepMetrics>,
    pub schedule: WarmupCosine,
    /// Chunks with no loss-bearing target position, excluded from training.
    pub skipped_chunks: Vec<usize>,
}

/// Summed loss and summed parameter gradient of one chunk.
pub fn chunk_loss_and_grad(state: &ModelState, chunk: &PackedChunk) -> Result<(f64, Vec<f64>, usize), ModelError> {
    let n = chunk.ids.len();
    let (logits, tape) = state.forward(&chunk.ids[..n - 1])?;
    let (loss, dlogits, count) = masked_ce_sum(&logits, state.config().vocab, &chunk.ids[1..], &chunk.loss_mask[1..]);
    let mut grads = vec![0.0; state.num_params()];
    state.backward(&tape, &dlogits, &mut grads);
    Ok((loss, grads, count))
}

pub fn train_sft(
    model: ModelState,
    chunks: &[PackedChunk],
    cfg: &SftConfig,
    run_seed: u64,
) -> Result<SftOutcome, SftError> {
    cfg.validate()?;
    let (usable, skipped_chunks): (Vec<usize>, Vec<usize>) =
        (0..chunks.len()).partition(|&i| chunks[i].loss_mask.iter().skip(1).any(|&m| m));
    for &i in &skipped_chunks {
        log::warn!("skipping chunk {i}: no loss-bearing targets");
    }
    if usable.is_empty() {
        return Err(SftError::NoTrainableChunks);
    }
    let schedule = cfg.schedule(usable.len())?;

    let mut state = model;
    let mut opt = AdamW::new(state.num_params(), cfg.betas, cfg.eps, cfg.weight_decay);
    let mut metrics = Vec::with_capacity(schedule.total);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for step in 0..schedule.total {
        if cursor >= order.len() {
            order = usable.clone();
            order.shuffle(&mut seed::rng(seed::derive(run_seed, &[0x5f7, epoch])));
            epoch += 1;
            cursor = 0;
        }
        let batch = &order[cursor..(cursor + cfg.batch_chunks).min(order.len())];
        cursor += batch.len();

        let parts: Vec<(f64, Vec<f64>, usize)> =
            batch.par_iter().map(|&i| chunk_loss_and_grad(&state, &chunks[i])).collect::<Result<_, _>>()?;
        let tokens: usize = parts.iter().map(|p| p.2).sum();
        let mut grads = vec![0.0; state.num_params()];
        let mut loss = 0.0;
        for (l, g, _) in &parts {
            loss += l;
            for (acc, x) in grads.iter_mut().zip(g) {
                *acc += x;
            }
        }
        let inv = 1.0 / tokens as f64;
        loss *= inv;
        grads.iter_mut().for_each(|g| *g *= inv);
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(SftError::NonFiniteLoss { step, loss, state: Box::new(state) });
        }
        let lr = schedule.lr_at(step);
        opt.step(state.params_mut(), &grads, lr);
        log::debug!("sft step {step} lr {lr:.3e} loss {loss:.5} tokens {tokens}");
        metrics.push(StepMetrics { step, lr, loss, tokens });
    }
    Ok(SftOutcome { state, metrics, schedule, skipped_chunks })
}
