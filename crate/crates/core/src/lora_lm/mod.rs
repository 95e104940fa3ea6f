//! Tiny decoder-only language model with low-rank adapters.
//!
//! The base model is pre-trained on unlabelled narrative text, frozen, and
//! then adapted on instruction pairs by training only the `A`, `B` update
//! matrices. Categories are predicted by scoring the four candidate answer
//! sentences rather than by free generation.

mod infer;
mod model;
pub mod tokenizer;
mod train;

pub use infer::{label_scores_graph, predict, predict_batch, LabelScores, Scorer};
pub use model::{LanguageModel, LmConfig, LoraAdapter, LoraConfig, LORA_PREFIX};
pub use tokenizer::Tokenizer;
pub use train::{
    finetune, gradient_checks, mean_pair_loss, pair_loss, pretrain, pretrain_tokens, pretraining_texts,
    sequence_loss, FinetuneConfig, FinetuneReport, PretrainConfig, PretrainReport, MIN_PRETRAIN_TOKENS,
};

use crate::domain::Category;
use crate::error::{Error, Result};

/// Cue appended to every instruction input; the answer follows it.
pub const OUTPUT_CUE: &str = "Task Output:";

/// The text the model conditions on for one instruction input.
pub fn prompt(instruction_input: &str) -> String {
    format!("{instruction_input}\n{OUTPUT_CUE}")
}

/// Answer tokens for a category: its label sentence followed by EOS.
pub fn answer_tokens(tok: &Tokenizer, category: Category) -> Vec<usize> {
    let mut y = tok.encode(category.label_sentence());
    y.push(tokenizer::EOS_ID);
    y
}

/// `BOS x y` with a mask marking exactly the `y` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TrainingPair {
    /// Builds a pair, dropping the oldest prompt tokens when `BOS x y`
    /// would exceed `max_len`. The answer is always kept whole.
    pub fn new(x: &[usize], y: &[usize], max_len: usize) -> Result<TrainingPair> {
        if y.is_empty() {
            return Err(Error::Empty("training pair has no output tokens".into()));
        }
        if y.len() + 2 > max_len {
            return Err(Error::config("lm.max_len", format!("{max_len} cannot hold a {}-token answer", y.len())));
        }
        let keep = x.len().min(max_len - 1 - y.len());
        let x = &x[x.len() - keep..];
        let mut tokens = Vec::with_capacity(1 + x.len() + y.len());
        tokens.push(tokenizer::BOS_ID);
        tokens.extend_from_slice(x);
        tokens.extend_from_slice(y);
        let mut mask = vec![false; 1 + x.len()];
        mask.resize(tokens.len(), true);
        Ok(TrainingPair { tokens, mask })
    }

    pub fn from_text(tok: &Tokenizer, instruction_input: &str, category: Category, max_len: usize) -> Result<TrainingPair> {
        TrainingPair::new(&tok.encode(&prompt(instruction_input)), &answer_tokens(tok, category), max_len)
    }

    /// Index of the first answer token.
    pub fn answer_start(&self) -> usize {
        self.mask.iter().position(|&m| m).expect("answer is non-empty")
    }

    pub fn answer_len(&self) -> usize {
        self.tokens.len() - self.answer_start()
    }
}
