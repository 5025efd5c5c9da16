//! Desk-scale clinical LLM training pipeline: mixture construction, chat
//! rendering and packing with output-only loss, supervised fine-tuning,
//! iterative direct preference optimization and zero-shot multiple-choice
//! evaluation, all running on a built-in tiny causal language model.

pub mod chat;
pub mod corpus;
pub mod dpo;
pub mod eval;
pub mod jsonl;
pub mod model;
pub mod optim;
pub mod packer;
pub mod prefs;
pub mod seed;
pub mod sft;
pub mod synth;
pub mod tokenizer;
