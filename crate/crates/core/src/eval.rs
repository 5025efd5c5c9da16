//! Zero-shot multiple-choice evaluation.
//!
//! Each option is scored as a full assistant reply: the question is rendered
//! through the chat template as `[system?, user=question]`, an assistant turn
//! is opened, and the log-likelihood of `option ++ [END, EOS]` is summed over
//! every token of the reply (not just the first one). The highest score wins;
//! ties go to the lowest option index.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{render_prompt, reply_target, Message};
use crate::model::{sequence_logprob, ModelError, ModelState};
use crate::tokenizer::TokenId;

/// Versioned default evaluation system prompt.
pub const DEFAULT_SYSTEM_PROMPT: &str = include_str!("../assets/eval_system_prompt_v1.txt");
pub const DEFAULT_TEMPLATE_ID: &str = "clinforge-chat-v1";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("item {index}: {reason}")]
    InvalidItem { index: usize, reason: String },
    #[error("no items to evaluate")]
    NoItems,
    #[error("item {index}: {source}")]
    Model { index: usize, source: ModelError },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub question: String,
    pub options: Vec<String>,
    pub gold: usize,
    pub benchmark: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

impl McqItem {
    pub fn validate(&self) -> Result<(), String> {
        if self.options.len() < 2 {
            return Err(format!("needs at least 2 options, has {}", self.options.len()));
        }
        if self.gold >= self.options.len() {
            return Err(format!("gold index {} out of range", self.gold));
        }
        let distinct: HashSet<&str> = self.options.iter().map(String::as_str).collect();
        if distinct.len() != self.options.len() {
            return Err("options are not distinct".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Raw full-reply log-likelihood.
    #[default]
    Sum,
    /// Log-likelihood divided by the number of scored tokens.
    PerTokenMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// `None` renders no system message at all.
    pub system_prompt: Option<String>,
    pub norm: Normalization,
    pub template_id: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            system_prompt: Some(DEFAULT_SYSTEM_PROMPT.to_string()),
            norm: Normalization::Sum,
            template_id: DEFAULT_TEMPLATE_ID.to_string(),
        }
    }
}

/// The prompt every option is appended to.
pub fn item_prompt(item: &McqItem, system_prompt: Option<&str>) -> Vec<TokenId> {
    let mut messages = Vec::with_capacity(2);
    if let Some(s) = system_prompt {
        messages.push(Message::system(s));
    }
    messages.push(Message::user(item.question.clone()));
    render_prompt(&messages)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub choice: usize,
    pub scores: Vec<f64>,
}

/// Index of the highest score; ties resolve to the lowest index.
pub fn choose(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn score_item(
    model: &ModelState,
    item: &McqItem,
    system_prompt: Option<&str>,
    norm: Normalization,
) -> Result<ItemScore, ModelError> {
    let prompt = item_prompt(item, system_prompt);
    let scores = item
        .options
        .iter()
        .map(|option| {
            let lp = sequence_logprob(model, &prompt, &reply_target(option.as_bytes()))?;
            Ok(match norm {
                Normalization::Sum => lp.total,
                Normalization::PerTokenMean => lp.mean(),
            })
        })
        .collect::<Result<Vec<f64>, ModelError>>()?;
    Ok(ItemScore { choice: choose(&scores), scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkScore {
    pub correct: usize,
    pub total: usize,
    /// Percentage, `100 · correct / total`.
    pub accuracy: f64,
}

impl BenchmarkScore {
    fn new(correct: usize, total: usize) -> Self {
        Self { correct, total, accuracy: 100.0 * correct as f64 / total as f64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub index: usize,
    pub benchmark: String,
    pub gold: usize,
    pub choice: usize,
    pub correct: bool,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalOptions,
    pub overall: BenchmarkScore,
    pub benchmarks: BTreeMap<String, BenchmarkScore>,
    pub records: Vec<ItemRecord>,
}

pub fn evaluate(model: &ModelState, items: &[McqItem], opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::NoItems);
    }
    for (index, item) in items.iter().enumerate() {
        item.validate().map_err(|reason| EvalError::InvalidItem { index, reason })?;
    }
    let records: Vec<ItemRecord> = items
        .par_iter()
        .enumerate()
        .map(|(index, item)| {
            let s = score_item(model, item, opts.system_prompt.as_deref(), opts.norm)
                .map_err(|source| EvalError::Model { index, source })?;
            Ok(ItemRecord {
                index,
                benchmark: item.benchmark.clone(),
                gold: item.gold,
                choice: s.choice,
                correct: s.choice == item.gold,
                scores: s.scores,
            })
        })
        .collect::<Result<_, EvalError>>()?;

    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in &records {
        let e = tally.entry(r.benchmark.clone()).or_default();
        e.0 += usize::from(r.correct);
        e.1 += 1;
    }
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(EvalReport {
        config: opts.clone(),
        overall: BenchmarkScore::new(correct, records.len()),
        benchmarks: tally.into_iter().map(|(k, (c, t))| (k, BenchmarkScore::new(c, t))).collect(),
        records,
    })
}

/// Benchmark columns of the published zero-shot results table.
pub const REFERENCE_BENCHMARKS: [&str; 7] = ["MMLU-Pro", "MMLU", "MedMCQA", "MedQA", "USMLE", "PubmedQA", "ToxiGen"];

/// Published zero-shot accuracies of the full-size models, shown for
/// reference only. They are not reproducible with the tiny model.
pub const REFERENCE_RESULTS: [(&str, [f64; 7]); 2] = [
    ("Med42-Llama3.1-8B", [54.2, 73.6, 59.7, 63.2, 69.9, 72.2, 83.8]),
    ("Med42-Llama3.1-70B", [66.1, 86.8, 72.4, 80.4, 94.5, 77.6, 90.4]),
];

pub fn reference_score(model: &str, benchmark: &str) -> Option<f64> {
    let col = REFERENCE_BENCHMARKS.iter().position(|b| b.eq_ignore_ascii_case(benchmark))?;
    REFERENCE_RESULTS.iter().find(|(m, _)| *m == model).map(|(_, row)| row[col])
}

/// Plain-text results table with the published reference columns.
pub fn render_table(report: &EvalReport) -> String {
    let refs: Vec<&str> = REFERENCE_RESULTS.iter().map(|(m, _)| *m).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<16} {:>6} {:>9}", "Benchmark", "Items", "Accuracy");
    for m in &refs {
        let _ = write!(out, "  {:>30}", format!("published {}", m));
    }
    out.push('\n');
    let fmt_ref = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"));
    for (name, score) in &report.benchmarks {
        let _ = write!(out, "{:<16} {:>6} {:>9.1}", name, score.total, score.accuracy);
        for m in &refs {
            let _ = write!(out, "  {:>30}", fmt_ref(reference_score(m, name)));
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<16} {:>6} {:>9.1}", "Overall", report.overall.total, report.overall.accuracy);
    for (_, row) in REFERENCE_RESULTS.iter() {
        let avg = row.iter().sum::<f64>() / row.len() as f64;
        let _ = write!(out, "  {:>30}", format!("{avg:.1}"));
    }
    out.push('\n');
    let _ = writeln!(out, "norm={:?} template={}", report.config.norm, report.config.template_id);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn item(options: &[&str], gold: usize) -> McqItem {
        McqItem {
            question: "Which?".into(),
            options: options.iter().map(|s| s.to_string()).collect(),
            gold,
            benchmark: "toy".into(),
            subject: None,
        }
    }

    fn fresh() -> ModelState {
        ModelState::init(ModelConfig::new(8, 1, 2, 128), 1).unwrap()
    }

    #[test]
    fn uniform_model_prefers_short_options_under_sum() {
        let it = item(&["Hi", "Goodbye"], 1);
        let s = score_item(&fresh(), &it, Some("S"), Normalization::Sum).unwrap();
        let ln_v = (263f64).ln();
        assert_eq!(s.choice, 0);
        assert!((s.scores[0] + 4.0 * ln_v).abs() < 1e-9);
        assert!((s.scores[1] + 9.0 * ln_v).abs() < 1e-9);
    }

    #[test]
    fn per_token_mean_ties_break_low() {
        let it = item(&["Goodbye", "Hi"], 1);
        let s = score_item(&fresh(), &it, Some("S"), Normalization::PerTokenMean).unwrap();
        assert_eq!(s.choice, 0);
        for x in &s.scores {
            assert!((x + (263f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_is_exact_ratio() {
        // The uniform model always picks the shortest option under `sum`.
        let items = vec![item(&["a", "bb"], 0), item(&["c", "dd"], 0), item(&["e", "ff"], 0), item(&["g", "hh"], 1)];
        let report = evaluate(&fresh(), &items, &EvalOptions::default()).unwrap();
        assert_eq!(report.overall.accuracy, 75.0);
        assert_eq!(report.records.len(), 4);
        assert_eq!(report.benchmarks["toy"].correct, 3);
    }

    #[test]
    fn rejects_bad_items() {
        assert!(item(&["a"], 0).validate().is_err());
        assert!(item(&["a", "b"], 2).validate().is_err());
        assert!(item(&["a", "a"], 0).validate().is_err());
        assert!(matches!(evaluate(&fresh(), &[], &EvalOptions::default()), Err(EvalError::NoItems)));
    }

    #[test]
    fn choose_is_shift_invariant() {
        let s = [-3.0, -1.5, -1.5, -7.0];
        let shifted: Vec<f64> = s.iter().map(|x| x + 42.0).collect();
        assert_eq!(choose(&s), 1);
        assert_eq!(choose(&shifted), 1);
    }

    #[test]
    fn reference_rows_are_lookups_only() {
        assert_eq!(reference_score("Med42-Llama3.1-70B", "MedQA"), Some(80.4));
        assert_eq!(reference_score("Med42-Llama3.1-70B", "usmle"), Some(94.5));
        assert_eq!(reference_score("Med42-Llama3.1-8B", "toy"), None);
    }
}
