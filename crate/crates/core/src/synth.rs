//! Deterministic synthetic tasks used by the fixtures and the learning tests.
//!
//! * capitalize: the user sends a lowercase word, the assistant answers with
//!   it in uppercase. Multiple-choice items offer the right answer among
//!   random uppercase distractors.
//! * filler: the user sends a word, the assistant answers with `A` repeated
//!   a random number of times. Used for preference alignment where shorter
//!   replies are preferred.

use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::chat::{Conversation, Message};
use crate::corpus::SftRecord;
use crate::eval::McqItem;
use crate::seed;

pub const CAPITALIZE_SYSTEM: &str = "Capitalize.";

fn random_word(rng: &mut impl Rng, len: usize) -> String {
    (0..len).map(|_| char::from(b'a' + rng.random_range(0..26u8))).collect()
}

/// `n` distinct lowercase words of length `len`, none of them in `exclude`.
pub fn random_words(n: usize, len: usize, run_seed: u64, exclude: &BTreeSet<String>) -> Vec<String> {
    let capacity = 26f64.powi(len as i32);
    assert!((n + exclude.len()) as f64 <= capacity, "not enough distinct words of length {len}");
    let mut rng = seed::rng(run_seed);
    let mut seen = exclude.clone();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = random_word(&mut rng, len);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Disjoint train and held-out word lists.
pub fn split_words(train: usize, held_out: usize, len: usize, run_seed: u64) -> (Vec<String>, Vec<String>) {
    let all = random_words(train + held_out, len, run_seed, &BTreeSet::new());
    let held = all[train..].to_vec();
    (all[..train].to_vec(), held)
}

pub fn capitalize_prompt(word: &str, system: Option<&str>) -> Vec<Message> {
    let mut messages: Vec<Message> = system.map(Message::system).into_iter().collect();
    messages.push(Message::user(word));
    messages
}

pub fn capitalize_record(word: &str, system: Option<&str>, source: &str) -> SftRecord {
    let mut messages = capitalize_prompt(word, system);
    messages.push(Message::assistant(word.to_ascii_uppercase()));
    SftRecord { conversation: Conversation::new(messages), source: source.to_string() }
}

/// One item per word with `n_options` choices; the gold slot is random.
pub fn capitalize_mcq(words: &[String], n_options: usize, benchmark: &str, run_seed: u64) -> Vec<McqItem> {
    assert!(n_options >= 2);
    let mut rng = seed::rng(run_seed);
    words
        .iter()
        .map(|w| {
            let answer = w.to_ascii_uppercase();
            let mut options = vec![answer.clone()];
            while options.len() < n_options {
                let d = random_word(&mut rng, w.len()).to_ascii_uppercase();
                if !options.contains(&d) {
                    options.push(d);
                }
            }
            options.shuffle(&mut rng);
            let gold = options.iter().position(|o| *o == answer).expect("answer is among options");
            McqItem { question: w.clone(), options, gold, benchmark: benchmark.to_string(), subject: None }
        })
        .collect()
}

pub fn filler_prompt(word: &str) -> Vec<Message> {
    vec![Message::user(word)]
}

pub fn filler_reply(n: usize) -> String {
    "A".repeat(n)
}

/// One record per word, with reply lengths uniform in `lengths`.
pub fn filler_records(words: &[String], lengths: RangeInclusive<usize>, source: &str, run_seed: u64) -> Vec<SftRecord> {
    let mut rng = seed::rng(run_seed);
    words
        .iter()
        .map(|w| {
            let mut messages = filler_prompt(w);
            messages.push(Message::assistant(filler_reply(rng.random_range(lengths.clone()))));
            SftRecord { conversation: Conversation::new(messages), source: source.to_string() }
        })
        .collect()
}
