use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::log_softmax;
use super::{ModelError, ModelState};
use crate::seed;
use crate::tokenizer::{TokenId, Vocab};

/// Log-likelihood of a scored span, in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogProbResult {
    pub total: f64,
    pub per_token: Vec<f64>,
}

impl LogProbResult {
    pub fn mean(&self) -> f64 {
        self.total / self.per_token.len() as f64
    }
}

/// `log P(target[i] | prefix ++ target[..i])` for every target position.
pub fn sequence_logprob(
    state: &ModelState,
    prefix: &[TokenId],
    target: &[TokenId],
) -> Result<LogProbResult, ModelError> {
    if target.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    if prefix.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    let max = state.config().max_ctx;
    if prefix.len() + target.len() > max {
        return Err(ModelError::ContextOverflow { len: prefix.len() + target.len(), max });
    }
    let mut input = prefix.to_vec();
    input.extend_from_slice(&target[..target.len() - 1]);
    let logits = state.logits(&input)?;
    let v = state.config().vocab;
    let per_token: Vec<f64> = target
        .iter()
        .enumerate()
        .map(|(i, &tok)| {
            let row = prefix.len() - 1 + i;
            log_softmax(&logits[row * v..(row + 1) * v])[tok as usize]
        })
        .collect();
    Ok(LogProbResult { total: per_token.iter().sum(), per_token })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub max_new: usize,
    /// 0 selects greedy argmax decoding.
    pub temperature: f64,
    pub seed: u64,
}

/// Samples a continuation. Stops after emitting `END` or `EOS`, after
/// `max_new` tokens, or when the context is full. The stop token is part of
/// the returned sequence.
pub fn generate(state: &ModelState, prompt: &[TokenId], opts: GenerateOptions) -> Result<Vec<TokenId>, ModelError> {
    state.check_ids(prompt)?;
    if prompt.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    let v = state.config().vocab;
    let mut rng = seed::rng(opts.seed);
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < opts.max_new && seq.len() < state.config().max_ctx {
        let logits = state.logits(&seq)?;
        let last = &logits[(seq.len() - 1) * v..seq.len() * v];
        let next = if opts.temperature <= 0.0 {
            argmax(last)
        } else {
            let scaled: Vec<f64> = last.iter().map(|l| l / opts.temperature).collect();
            let probs = super::ops::softmax(&scaled);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } as TokenId;
        out.push(next);
        seq.push(next);
        if next == Vocab::END || next == Vocab::EOS {
            break;
        }
    }
    Ok(out)
}

/// Index of the largest value; ties resolve to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
