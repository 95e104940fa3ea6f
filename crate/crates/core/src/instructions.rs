//! Instruction-pair serialization: one customer's demographics and recent
//! transactions rendered as a fixed natural-language template, paired with
//! the next category as the expected answer.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Category, CustomerProfile, Dataset, Money, Transaction};
use crate::error::{Error, Result};

pub const TASK_INSTRUCTION: &str = "Based on my demographic details and historical transaction data provided below, predict my next purchase category.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub customer_id: u64,
    pub instruction_input: String,
    pub instruction_output: String,
    pub label: Category,
    pub seq_len: usize,
}

/// Last `seq_len + 1` transactions of a customer: the first `seq_len` are
/// the history, the final one supplies the label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub seq_len: usize,
}

impl WindowSpec {
    pub fn new(seq_len: usize) -> WindowSpec {
        WindowSpec { seq_len }
    }

    /// Splits a customer's history into (inputs, label transaction), or
    /// `None` if the history is too short.
    pub fn select<'a>(&self, history: &'a [Transaction]) -> Option<(&'a [Transaction], &'a Transaction)> {
        let need = self.seq_len + 1;
        if self.seq_len == 0 || history.len() < need {
            return None;
        }
        let window = &history[history.len() - need..];
        Some((&window[..self.seq_len], &window[self.seq_len]))
    }
}

fn class_of(t: &Transaction) -> Result<Category> {
    t.category.class().ok_or_else(|| {
        Error::Invalid(format!(
            "customer {}: unmapped category `{}`",
            t.customer_id,
            t.category.as_code()
        ))
    })
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(", ")
}

/// Renders one instruction pair.
pub fn serialize(
    profile: &CustomerProfile,
    window: &[Transaction],
    label: Category,
) -> Result<InstructionSample> {
    let missing = |field| Error::Serialization {
        customer_id: profile.customer_id,
        field,
    };
    if window.is_empty() {
        return Err(Error::Empty(format!(
            "transaction window for customer {}",
            profile.customer_id
        )));
    }
    let age = profile.age.ok_or_else(|| missing("age"))?;
    let gender = profile.gender.ok_or_else(|| missing("gender"))?;
    let marital = profile.marital_status.ok_or_else(|| missing("marital_status"))?;
    let education = profile.education.ok_or_else(|| missing("education"))?;
    let job = profile
        .job
        .as_deref()
        .filter(|j| !j.is_empty())
        .ok_or_else(|| missing("job"))?;
    let income_group = profile.income_group.ok_or_else(|| missing("income_group"))?;

    let categories = window.iter().map(class_of).collect::<Result<Vec<_>>>()?;
    let total: Money = window.iter().map(|t| t.amount).sum();

    let task_input = format!(
        "I am {id}. I am {age} years old, {marital} {gender}, {education} graduate, and I am working as a {job}. \
In terms of my income state, I belong to the {income_group}-income group. \
Recently, I made {n} transactions. In these transactions, I have spent a total of ${total} dollars. \
I bought items from the following categories, chronologically: {cats}. \
I bought from these categories on the following dates, chronologically: {dates}. \
I spent the following money for these items, chronologically: {amounts}.",
        id = profile.customer_id,
        n = window.len(),
        cats = join(&categories, |c| c.narrative().to_string()),
        dates = join(window, |t| t.date.format("%Y-%m-%d").to_string()),
        amounts = join(window, |t| format!("${}", t.amount)),
    );

    Ok(InstructionSample {
        customer_id: profile.customer_id,
        instruction_input: format!("Task Instruction: {TASK_INSTRUCTION}\nTask Input: {task_input}"),
        instruction_output: label.label_sentence().to_string(),
        label,
        seq_len: window.len(),
    })
}

/// One sample per customer with enough history, ordered by customer id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub source: String,
    pub samples: Vec<InstructionSample>,
    pub skipped: usize,
}

pub fn build_corpus(dataset: &Dataset, spec: WindowSpec) -> Result<Corpus> {
    let mut samples = Vec::new();
    let mut skipped = 0;
    for (profile, history) in dataset.histories() {
        match spec.select(history) {
            Some((window, target)) => samples.push(serialize(profile, window, class_of(target)?)?),
            None => skipped += 1,
        }
    }
    samples.sort_by_key(|s| s.customer_id);
    Ok(Corpus {
        source: dataset.name.clone(),
        samples,
        skipped,
    })
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord<'a> {
    instruction_input: std::borrow::Cow<'a, str>,
    instruction_output: std::borrow::Cow<'a, str>,
    customer_id: u64,
    seq_len: usize,
}

pub fn export_jsonl(samples: &[InstructionSample], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let record = JsonlRecord {
            instruction_input: s.instruction_input.as_str().into(),
            instruction_output: s.instruction_output.as_str().into(),
            customer_id: s.customer_id,
            seq_len: s.seq_len,
        };
        serde_json::to_writer(&mut w, &record).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn import_jsonl(path: &Path) -> Result<Vec<InstructionSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let record: JsonlRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let label = Category::from_label_sentence(&record.instruction_output)
            .ok_or_else(|| bad(format!("unknown output `{}`", record.instruction_output)))?;
        out.push(InstructionSample {
            customer_id: record.customer_id,
            instruction_input: record.instruction_input.into_owned(),
            instruction_output: record.instruction_output.into_owned(),
            label,
            seq_len: record.seq_len,
        });
    }
    Ok(out)
}
