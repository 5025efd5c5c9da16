//! Direct preference optimization and the multi-stage alignment driver.
//!
//! Per pair the loss is `softplus(-m)` with the margin
//! `m = beta * ((pw - rw) - (pl - rl))`, where `p*`/`r*` are the policy and
//! frozen-reference log-likelihoods of the chosen (`w`) and rejected (`l`)
//! replies. Only the policy terms carry gradient:
//! `dL/dpw = -beta * sigmoid(-m)`, `dL/dpl = +beta * sigmoid(-m)`.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{render_prompt, reply_target, Message};
use crate::model::ops::log_softmax;
use crate::model::{sequence_logprob, ModelError, ModelState, Tape};
use crate::optim::{Optimizer, RmsProp, WarmupCosine};
use crate::prefs::{
    build_pairs, stage_prompts, PairBuildReport, PreferencePair, PrefsConfig, PrefsError, Ranker, SkippedPrompt,
};
use crate::seed;
use crate::tokenizer::TokenId;

#[derive(Debug, Error)]
pub enum DpoError {
    #[error("invalid DPO config: {0}")]
    Config(String),
    #[error("no preference pairs to train on")]
    NoPairs,
    #[error("pair {index}: prompt of {len} tokens leaves no room for a reply within max_len {max_len}")]
    PromptTooLong { index: usize, len: usize, max_len: usize },
    #[error("pair {index}: chosen and rejected replies are identical")]
    IdenticalReplies { index: usize },
    #[error("non-finite DPO loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64, state: Box<ModelState> },
    #[error("stage {stage} produced no preference pairs")]
    EmptyStage { stage: u32 },
    #[error(transparent)]
    Prefs(#[from] PrefsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How a reply's per-token log-probabilities are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogpReduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpoSchedule {
    #[default]
    WarmupCosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    pub lr: f64,
    pub schedule: DpoSchedule,
    /// Fraction of a stage's steps spent in linear warmup.
    pub warmup_ratio: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub weight_decay: f64,
    pub batch_pairs: usize,
    pub max_len: usize,
    pub epochs_per_stage: usize,
    pub stages: u32,
    pub logp: LogpReduction,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lr: 1e-6,
            schedule: DpoSchedule::WarmupCosine,
            warmup_ratio: 0.1,
            rms_alpha: 0.99,
            rms_eps: 1e-8,
            weight_decay: 0.0,
            batch_pairs: 256,
            max_len: 4096,
            epochs_per_stage: 1,
            stages: 3,
            logp: LogpReduction::Sum,
        }
    }
}

impl DpoConfig {
    /// Settings used for the larger model size.
    pub fn large_profile() -> Self {
        Self { beta: 0.01, batch_pairs: 128, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DpoError> {
        let bad = |m: &str| Err(DpoError::Config(m.to_string()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.rms_alpha) || self.rms_eps < 0.0 || self.weight_decay < 0.0 {
            return bad("rms_alpha must lie in [0, 1); rms_eps and weight_decay must be non-negative");
        }
        if self.batch_pairs == 0 || self.epochs_per_stage == 0 || self.stages == 0 || self.max_len < 2 {
            return bad("batch_pairs, epochs_per_stage and stages must be positive; max_len at least 2");
        }
        Ok(())
    }

    pub fn validate_for(&self, model: &ModelState) -> Result<(), DpoError> {
        self.validate()?;
        if self.max_len > model.config().max_ctx {
            return Err(DpoError::Config(format!(
                "max_len {} exceeds the model context {}",
                self.max_len,
                model.config().max_ctx
            )));
        }
        Ok(())
    }

    /// Learning rate for each of `total` steps.
    pub fn lr_schedule(&self, total: usize) -> Vec<f64> {
        match self.schedule {
            DpoSchedule::Constant => vec![self.lr; total],
            DpoSchedule::WarmupCosine if total < 2 => vec![self.lr; total],
            DpoSchedule::WarmupCosine => {
                let warmup = ((total as f64 * self.warmup_ratio).round() as usize).clamp(1, total - 1);
                let s = WarmupCosine { peak: self.lr, warmup, total };
                (0..total).map(|i| s.lr_at(i)).collect()
            }
        }
    }
}

/// Log-likelihoods of one pair under policy and reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLogps {
    pub policy_w: f64,
    pub policy_l: f64,
    pub ref_w: f64,
    pub ref_l: f64,
}

impl PairLogps {
    /// The beta-scaled implicit reward margin.
    pub fn margin(&self, beta: f64) -> f64 {
        beta * ((self.policy_w - self.ref_w) - (self.policy_l - self.ref_l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoLoss {
    pub loss: f64,
    pub margin: f64,
    pub d_policy_w: f64,
    pub d_policy_l: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dpo_loss(lp: &PairLogps, beta: f64) -> DpoLoss {
    let margin = lp.margin(beta);
    let s = sigmoid(-margin);
    DpoLoss { loss: softplus(-margin), margin, d_policy_w: -beta * s, d_policy_l: beta * s }
}

/// Reply targets clipped so `prompt + target` fits in `max_len`.
fn fit_target(prompt_len: usize, target: Vec<TokenId>, max_len: usize, index: usize) -> Result<Vec<TokenId>, DpoError> {
    if prompt_len >= max_len {
        return Err(DpoError::PromptTooLong { index, len: prompt_len, max_len });
    }
    let room = max_len - prompt_len;
    if target.len() > room {
        log::info!("pair {index}: truncating reply from {} to {room} tokens", target.len());
        return Ok(target[..room].to_vec());
    }
    Ok(target)
}

/// A pair rendered to token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
}

pub fn encode_pair(pair: &PreferencePair, max_len: usize, index: usize) -> Result<EncodedPair, DpoError> {
    if pair.chosen == pair.rejected {
        return Err(DpoError::IdenticalReplies { index });
    }
    let prompt = render_prompt(&pair.prompt);
    let n = prompt.len();
    Ok(EncodedPair {
        chosen: fit_target(n, reply_target(pair.chosen.as_bytes()), max_len, index)?,
        rejected: fit_target(n, reply_target(pair.rejected.as_bytes()), max_len, index)?,
        prompt,
    })
}

fn reduce(total: f64, n: usize, how: LogpReduction) -> f64 {
    match how {
        LogpReduction::Sum => total,
        LogpReduction::Mean => total / n as f64,
    }
}

fn reply_logp(
    model: &ModelState,
    prompt: &[TokenId],
    target: &[TokenId],
    how: LogpReduction,
) -> Result<f64, ModelError> {
    Ok(reduce(sequence_logprob(model, prompt, target)?.total, target.len(), how))
}

pub fn pair_logps(
    policy: &ModelState,
    reference: &ModelState,
    pair: &PreferencePair,
    cfg: &DpoConfig,
) -> Result<PairLogps, DpoError> {
    let e = encode_pair(pair, cfg.max_len, 0)?;
    logps_of(policy, reference, &e, cfg.logp)
}

fn logps_of(
    policy: &ModelState,
    reference: &ModelState,
    e: &EncodedPair,
    how: LogpReduction,
) -> Result<PairLogps, DpoError> {
    Ok(PairLogps {
        policy_w: reply_logp(policy, &e.prompt, &e.chosen, how)?,
        policy_l: reply_logp(policy, &e.prompt, &e.rejected, how)?,
        ref_w: reply_logp(reference, &e.prompt, &e.chosen, how)?,
        ref_l: reply_logp(reference, &e.prompt, &e.rejected, how)?,
    })
}

/// Forward pass over `prompt ++ target`, returning the reduced reply
/// log-likelihood, the tape and d(logp)/d(logits).
fn reply_pass(
    model: &ModelState,
    prompt: &[TokenId],
    target: &[TokenId],
    how: LogpReduction,
) -> Result<(f64, Tape, Vec<f64>), ModelError> {
    let mut ids = Vec::with_capacity(prompt.len() + target.len());
    ids.extend_from_slice(prompt);
    ids.extend_from_slice(target);
    let (logits, tape) = model.forward(&ids[..ids.len() - 1])?;
    let v = model.config().vocab;
    let scale = reduce(1.0, target.len(), how);
    let mut dlogits = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (k, &tok) in target.iter().enumerate() {
        let row = prompt.len() - 1 + k;
        let lp = log_softmax(&logits[row * v..(row + 1) * v]);
        total += lp[tok as usize];
        let g = &mut dlogits[row * v..(row + 1) * v];
        for (gi, l) in g.iter_mut().zip(&lp) {
            *gi = -scale * l.exp();
        }
        g[tok as usize] += scale;
    }
    Ok((reduce(total, target.len(), how), tape, dlogits))
}

/// Loss of one pair and its parameter gradient, given precomputed reference
/// log-likelihoods `(ref_w, ref_l)`.
pub fn pair_loss_and_grad(
    policy: &ModelState,
    pair: &EncodedPair,
    reference: (f64, f64),
    cfg: &DpoConfig,
) -> Result<(DpoLoss, Vec<f64>), ModelError> {
    let (pw, tape_w, dw) = reply_pass(policy, &pair.prompt, &pair.chosen, cfg.logp)?;
    let (pl, tape_l, dl) = reply_pass(policy, &pair.prompt, &pair.rejected, cfg.logp)?;
    let loss = dpo_loss(&PairLogps { policy_w: pw, policy_l: pl, ref_w: reference.0, ref_l: reference.1 }, cfg.beta);
    let mut grads = vec![0.0; policy.num_params()];
    let scaled = |d: &[f64], c: f64| d.iter().map(|x| x * c).collect::<Vec<f64>>();
    policy.backward(&tape_w, &scaled(&dw, loss.d_policy_w), &mut grads);
    policy.backward(&tape_l, &scaled(&dl, loss.d_policy_l), &mut grads);
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoStepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub margin: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone)]
pub struct DpoStageOutcome {
    pub state: ModelState,
    pub metrics: Vec<DpoStepMetrics>,
    pub steps: usize,
}

/// Mean beta-scaled margin over `pairs`.
pub fn mean_margin(
    policy: &ModelState,
    reference: &ModelState,
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
) -> Result<f64, DpoError> {
    if pairs.is_empty() {
        return Err(DpoError::NoPairs);
    }
    let margins = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let e = encode_pair(p, cfg.max_len, i)?;
            Ok(logps_of(policy, reference, &e, cfg.logp)?.margin(cfg.beta))
        })
        .collect::<Result<Vec<f64>, DpoError>>()?;
    Ok(margins.iter().sum::<f64>() / margins.len() as f64)
}

/// One stage of DPO: `epochs_per_stage` passes over shuffled `pairs`, RMSprop
/// on the batch-mean loss. The reference is only read.
pub fn train_dpo_stage(
    policy: ModelState,
    reference: &ModelState,
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
    run_seed: u64,
) -> Result<DpoStageOutcome, DpoError> {
    cfg.validate_for(&policy)?;
    if pairs.is_empty() {
        return Err(DpoError::NoPairs);
    }
    let encoded: Vec<EncodedPair> =
        pairs.iter().enumerate().map(|(i, p)| encode_pair(p, cfg.max_len, i)).collect::<Result<_, _>>()?;
    let refs: Vec<(f64, f64)> = encoded
        .par_iter()
        .map(|e| {
            Ok((
                reply_logp(reference, &e.prompt, &e.chosen, cfg.logp)?,
                reply_logp(reference, &e.prompt, &e.rejected, cfg.logp)?,
            ))
        })
        .collect::<Result<_, ModelError>>()?;

    let per_epoch = pairs.len().div_ceil(cfg.batch_pairs);
    let lrs = cfg.lr_schedule(per_epoch * cfg.epochs_per_stage);
    let mut state = policy;
    let mut opt = RmsProp::new(state.num_params(), cfg.rms_alpha, cfg.rms_eps, cfg.weight_decay);
    let mut metrics = Vec::with_capacity(lrs.len());
    let group = 2 * rayon::current_num_threads();
    let mut step = 0;
    for epoch in 0..cfg.epochs_per_stage {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(run_seed, &[0xd90, epoch as u64])));
        for batch in order.chunks(cfg.batch_pairs) {
            let mut grads = vec![0.0; state.num_params()];
            let (mut loss, mut margin) = (0.0, 0.0);
            // Bounded fan-out keeps at most `group` gradient buffers alive;
            // accumulation stays in batch order either way.
            for part in batch.chunks(group) {
                let results: Vec<(DpoLoss, Vec<f64>)> = part
                    .par_iter()
                    .map(|&i| pair_loss_and_grad(&state, &encoded[i], refs[i], cfg))
                    .collect::<Result<_, _>>()?;
                for (l, g) in results {
                    loss += l.loss;
                    margin += l.margin;
                    for (acc, x) in grads.iter_mut().zip(&g) {
                        *acc += x;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            loss *= inv;
            margin *= inv;
            grads.iter_mut().for_each(|g| *g *= inv);
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(DpoError::NonFiniteLoss { step, loss, state: Box::new(state) });
            }
            let lr = lrs[step];
            opt.step(state.params_mut(), &grads, lr);
            log::debug!("dpo step {step} lr {lr:.3e} loss {loss:.5} margin {margin:.5}");
            metrics.push(DpoStepMetrics { step, lr, loss, margin, pairs: batch.len() });
            step += 1;
        }
    }
    Ok(DpoStageOutcome { state, metrics, steps: step })
}

/// Metadata stored beside each stage checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMeta {
    pub stage: u32,
    pub ref_checkpoint_hash: String,
    pub pairs_file: String,
    pub beta: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub state: ModelState,
    pub meta: StageMeta,
    pub pairs: Vec<PreferencePair>,
    pub skipped: Vec<SkippedPrompt>,
    pub metrics: Vec<DpoStepMetrics>,
}

pub fn pairs_file_name(stage: u32) -> String {
    format!("stage{stage}_pairs.jsonl")
}

/// Seed for sampling the pairs of `stage`.
pub fn stage_pair_seed(run_seed: u64, stage: u32) -> u64 {
    seed::derive(run_seed, &[0xa11, u64::from(stage)])
}

/// Seed for the batch order of `stage`.
pub fn stage_train_seed(run_seed: u64, stage: u32) -> u64 {
    seed::derive(run_seed, &[0xd70, u64::from(stage)])
}

/// Samples and ranks the pairs of `stage` from `reference` on its prompt
/// slice. `external` pairs are appended for stage 1 only.
pub fn build_stage_pairs(
    reference: &ModelState,
    prompt_pool: &[Vec<Message>],
    prefs: &PrefsConfig,
    external: &[PreferencePair],
    stage: u32,
    run_seed: u64,
) -> Result<PairBuildReport, DpoError> {
    let (prompts, _) = stage_prompts(prompt_pool, stage as usize, prefs.per_stage);
    let ranker = Ranker::from_spec(&prefs.ranker, reference)?;
    let mut report = build_pairs(reference, &prompts, prefs, &ranker, stage, stage_pair_seed(run_seed, stage))?;
    if stage == 1 {
        report.pairs.extend(external.iter().cloned().map(|p| PreferencePair { stage: 1, ..p }));
    }
    Ok(report)
}

/// Trains a copy of `reference` on `pairs` against `reference`.
pub fn train_stage(
    reference: &ModelState,
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
    stage: u32,
    run_seed: u64,
) -> Result<(DpoStageOutcome, StageMeta), DpoError> {
    if pairs.is_empty() {
        return Err(DpoError::EmptyStage { stage });
    }
    let ref_checkpoint_hash = reference.hash_hex();
    let outcome = train_dpo_stage(reference.clone(), reference, pairs, cfg, stage_train_seed(run_seed, stage))?;
    let meta = StageMeta {
        stage,
        ref_checkpoint_hash,
        pairs_file: pairs_file_name(stage),
        beta: cfg.beta,
        steps: outcome.steps,
    };
    Ok((outcome, meta))
}

/// Runs `cfg.stages` rounds. Round `k` samples pairs from, and trains against,
/// the output of round `k - 1` (round 1: `sft_model`) on its own prompt slice.
pub fn run_iterative_alignment(
    sft_model: &ModelState,
    prompt_pool: &[Vec<Message>],
    cfg: &DpoConfig,
    prefs: &PrefsConfig,
    external: &[PreferencePair],
    run_seed: u64,
) -> Result<Vec<StageResult>, DpoError> {
    cfg.validate_for(sft_model)?;
    prefs.validate()?;
    let mut reference = sft_model.clone();
    let mut results = Vec::with_capacity(cfg.stages as usize);
    for stage in 1..=cfg.stages {
        let report = build_stage_pairs(&reference, prompt_pool, prefs, external, stage, run_seed)?;
        let (outcome, meta) = train_stage(&reference, &report.pairs, cfg, stage, run_seed)?;
        log::info!(
            "stage {stage}: {} pairs, {} skipped prompts, {} steps",
            report.pairs.len(),
            report.skipped.len(),
            outcome.steps
        );
        reference = outcome.state.clone();
        results.push(StageResult {
            state: outcome.state,
            meta,
            pairs: report.pairs,
            skipped: report.skipped,
            metrics: outcome.metrics,
        });
    }
    Ok(results)
}
