//! Preference-pair construction: sample K replies per prompt from the current
//! policy, score them with a pluggable ranker, keep the best as `chosen` and
//! the worst as `rejected`.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{render_prompt, reply_target, Message};
use crate::model::{generate, sequence_logprob, GenerateOptions, ModelError, ModelState};
use crate::seed;
use crate::tokenizer::{decode_until_special, TokenId};

#[derive(Debug, Error)]
pub enum PrefsError {
    #[error("ranking needs at least 2 responses, got {0}")]
    TooFewResponses(usize),
    #[error("all responses scored equally; no preference can be formed")]
    DegeneratePair,
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("no external score for response {0:?}")]
    MissingScore(String),
    #[error("external scores {path}: {reason}")]
    ScoresFile { path: PathBuf, reason: String },
    #[error("invalid prefs config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One line of a pair file. Also the accepted shape for external preference
/// sets (prompt messages, chosen, rejected).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<Message>,
    pub chosen: String,
    pub rejected: String,
    #[serde(default)]
    pub stage: u32,
    #[serde(default)]
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthPreference {
    #[default]
    Short,
    Long,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RankerSpec {
    /// Score = the reference model's full-reply log-likelihood.
    #[default]
    ReferenceLogprob,
    /// Score = ∓ reply length in bytes.
    LengthPenalty {
        #[serde(default)]
        prefer: LengthPreference,
    },
    /// Score looked up by exact reply text in a JSON object file.
    ExternalScores { path: PathBuf },
}

/// A ranker bound to its runtime inputs.
#[derive(Debug, Clone)]
pub enum Ranker<'a> {
    ReferenceLogprob(&'a ModelState),
    LengthPenalty(LengthPreference),
    ExternalScores(HashMap<String, f64>),
}

impl<'a> Ranker<'a> {
    pub fn from_spec(spec: &RankerSpec, reference: &'a ModelState) -> Result<Self, PrefsError> {
        Ok(match spec {
            RankerSpec::ReferenceLogprob => Ranker::ReferenceLogprob(reference),
            RankerSpec::LengthPenalty { prefer } => Ranker::LengthPenalty(*prefer),
            RankerSpec::ExternalScores { path } => {
                let err = |reason: String| PrefsError::ScoresFile { path: path.clone(), reason };
                let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
                Ranker::ExternalScores(serde_json::from_str(&text).map_err(|e| err(e.to_string()))?)
            }
        })
    }

    pub fn score(&self, prompt: &[TokenId], response: &str) -> Result<f64, PrefsError> {
        match self {
            Ranker::ReferenceLogprob(model) => {
                Ok(sequence_logprob(model, prompt, &reply_target(response.as_bytes()))?.total)
            }
            Ranker::LengthPenalty(LengthPreference::Short) => Ok(-(response.len() as f64)),
            Ranker::LengthPenalty(LengthPreference::Long) => Ok(response.len() as f64),
            Ranker::ExternalScores(table) => {
                table.get(response).copied().ok_or_else(|| PrefsError::MissingScore(response.to_string()))
            }
        }
    }
}

/// `(chosen, rejected)` = `(argmax, argmin)` of the scores, ties to the
/// lowest index.
pub fn rank_responses(scores: &[f64]) -> Result<(usize, usize), PrefsError> {
    if scores.len() < 2 {
        return Err(PrefsError::TooFewResponses(scores.len()));
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(PrefsError::NonFiniteScore(bad));
    }
    let (mut hi, mut lo) = (0, 0);
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[hi] {
            hi = i;
        }
        if s < scores[lo] {
            lo = i;
        }
    }
    if hi == lo {
        return Err(PrefsError::DegeneratePair);
    }
    Ok((hi, lo))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrefsConfig {
    /// Replies sampled per prompt.
    pub k: usize,
    pub temperature: f64,
    pub max_new: usize,
    /// Prompts per alignment stage.
    pub per_stage: usize,
    pub ranker: RankerSpec,
}

impl Default for PrefsConfig {
    fn default() -> Self {
        Self { k: 5, temperature: 1.0, max_new: 256, per_stage: 20_000, ranker: RankerSpec::ReferenceLogprob }
    }
}

impl PrefsConfig {
    pub fn validate(&self) -> Result<(), PrefsError> {
        if self.k < 2 {
            return Err(PrefsError::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PrefsError::Config("sampling temperature must be positive".into()));
        }
        if self.max_new == 0 || self.per_stage == 0 {
            return Err(PrefsError::Config("max_new and per_stage must be positive".into()));
        }
        Ok(())
    }
}

/// A prompt that produced no pair, and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPrompt {
    pub prompt_index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBuildReport {
    pub pairs: Vec<PreferencePair>,
    pub skipped: Vec<SkippedPrompt>,
}

/// Decodes generated ids into reply text, stopping at the first special token.
pub fn reply_text(generated: &[TokenId]) -> String {
    String::from_utf8_lossy(&decode_until_special(generated)).into_owned()
}

fn pair_for_prompt(
    model: &ModelState,
    prompt: &[Message],
    index: usize,
    cfg: &PrefsConfig,
    ranker: &Ranker,
    stage: u32,
    run_seed: u64,
) -> Result<PreferencePair, String> {
    let ids = render_prompt(prompt);
    let mut replies = Vec::with_capacity(cfg.k);
    for j in 0..cfg.k {
        let opts = GenerateOptions {
            max_new: cfg.max_new,
            temperature: cfg.temperature,
            seed: seed::derive(run_seed, &[u64::from(stage), index as u64, j as u64]),
        };
        let out = generate(model, &ids, opts).map_err(|e| e.to_string())?;
        replies.push(reply_text(&out));
    }
    let distinct: HashSet<&str> = replies.iter().map(String::as_str).collect();
    if distinct.len() < 2 {
        return Err(format!("{} samples collapsed to {} distinct replies", cfg.k, distinct.len()));
    }
    let scores =
        replies.iter().map(|r| ranker.score(&ids, r)).collect::<Result<Vec<f64>, _>>().map_err(|e| e.to_string())?;
    let (hi, lo) = rank_responses(&scores).map_err(|e| e.to_string())?;
    Ok(PreferencePair {
        prompt: prompt.to_vec(),
        chosen: replies[hi].clone(),
        rejected: replies[lo].clone(),
        stage,
        scores,
    })
}

/// Builds at most one pair per prompt. Prompts are processed in parallel;
/// output follows prompt order.
pub fn build_pairs(
    model: &ModelState,
    prompts: &[Vec<Message>],
    cfg: &PrefsConfig,
    ranker: &Ranker,
    stage: u32,
    run_seed: u64,
) -> Result<PairBuildReport, PrefsError> {
    cfg.validate()?;
    let results: Vec<Result<PreferencePair, String>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| pair_for_prompt(model, p, i, cfg, ranker, stage, run_seed))
        .collect();
    let mut report = PairBuildReport { pairs: Vec::new(), skipped: Vec::new() };
    for (prompt_index, r) in results.into_iter().enumerate() {
        match r {
            Ok(pair) => report.pairs.push(pair),
            Err(reason) => {
                log::info!("stage {stage}: skipping prompt {prompt_index}: {reason}");
                report.skipped.push(SkippedPrompt { prompt_index, reason });
            }
        }
    }
    Ok(report)
}

/// The `stage`-th (1-based) disjoint slice of `per_stage` prompts. When the
/// pool is too small the slice wraps around; the flag reports that.
pub fn stage_prompts<T: Clone>(all: &[T], stage: usize, per_stage: usize) -> (Vec<T>, bool) {
    assert!(stage >= 1, "stages are numbered from 1");
    if all.is_empty() {
        return (Vec::new(), false);
    }
    let start = (stage - 1) * per_stage;
    let wrapped = start + per_stage > all.len();
    if wrapped {
        log::warn!("stage {stage}: {} prompts cannot fill disjoint slices of {per_stage}; wrapping", all.len());
    }
    ((start..start + per_stage).map(|i| all[i % all.len()].clone()).collect(), wrapped)
}

/// Fraction of prompts on which `policy`'s greedy reply outscores
/// `baseline`'s under `ranker` (strictly; ties are not wins).
pub fn win_rate(
    policy: &ModelState,
    baseline: &ModelState,
    prompts: &[Vec<Message>],
    ranker: &Ranker,
    max_new: usize,
) -> Result<f64, PrefsError> {
    if prompts.is_empty() {
        return Ok(0.0);
    }
    let greedy = GenerateOptions { max_new, temperature: 0.0, seed: 0 };
    let wins = prompts
        .par_iter()
        .map(|p| {
            let ids = render_prompt(p);
            let a = reply_text(&generate(policy, &ids, greedy)?);
            let b = reply_text(&generate(baseline, &ids, greedy)?);
            Ok(ranker.score(&ids, &a)? > ranker.score(&ids, &b)?)
        })
        .collect::<Result<Vec<bool>, PrefsError>>()?;
    Ok(wins.iter().filter(|&&w| w).count() as f64 / prompts.len() as f64)
}
