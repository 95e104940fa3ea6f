//! Metrics, the train-on-A / test-on-B protocol, and report rendering.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::{self, PeriodMode, TieOrder};
use crate::domain::{Category, CustomerProfile, Dataset, Transaction, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::instructions::{self, WindowSpec};
use crate::lora_lm::Scorer;
use crate::par;
use crate::seqmodels::{self, SeqModel};

/// Rows are true classes, columns predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_pairs(truths: &[Category], predictions: &[Category]) -> Result<ConfusionMatrix> {
        if truths.len() != predictions.len() {
            return Err(Error::shape("confusion matrix", &[truths.len()], &[predictions.len()]));
        }
        let mut m = ConfusionMatrix::default();
        for (t, p) in truths.iter().zip(predictions) {
            m.counts[t.index()][p.index()] += 1;
        }
        Ok(m)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn support(&self, c: Category) -> u64 {
        self.counts[c.index()].iter().sum()
    }

    pub fn predicted(&self, c: Category) -> u64 {
        self.counts.iter().map(|row| row[c.index()]).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub dataset: String,
    pub seq_len: usize,
    pub accuracy: f64,
    /// Support-weighted averages.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Indexed like `Category::ALL`.
    pub classes: [ClassMetrics; NUM_CLASSES],
    pub confusion: ConfusionMatrix,
    pub evaluated: usize,
    pub skipped: usize,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Standard multiclass metrics. A class nobody predicted gets precision 0;
/// a class with precision and recall both 0 gets F1 0.
pub fn compute_metrics(truths: &[Category], predictions: &[Category]) -> Result<MetricsReport> {
    if truths.is_empty() {
        return Err(Error::Empty("no predictions to score".into()));
    }
    let confusion = ConfusionMatrix::from_pairs(truths, predictions)?;
    let n = confusion.total();
    let mut classes = [ClassMetrics::default(); NUM_CLASSES];
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for c in Category::ALL {
        let tp = confusion.counts[c.index()][c.index()];
        let support = confusion.support(c);
        let precision = ratio(tp, confusion.predicted(c));
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        // Summed with integer weights and divided once, so all-ones stays exactly 1.
        let w = support as f64;
        wp += w * precision;
        wr += w * recall;
        wf += w * f1;
        classes[c.index()] = ClassMetrics {
            precision,
            recall,
            f1,
            support,
        };
    }
    Ok(MetricsReport {
        model: String::new(),
        dataset: String::new(),
        seq_len: 0,
        accuracy: ratio(confusion.trace(), n),
        precision: wp / n as f64,
        recall: wr / n as f64,
        f1: wf / n as f64,
        classes,
        confusion,
        evaluated: truths.len(),
        skipped: 0,
    })
}

/// One test case: a customer's last `k` transactions and the next category.
#[derive(Clone, Copy, Debug)]
pub struct Window<'a> {
    pub profile: &'a CustomerProfile,
    pub inputs: &'a [Transaction],
    pub label: Category,
}

/// Windows of length `k` for every customer with enough history, plus the
/// number skipped.
pub fn windows(dataset: &Dataset, k: usize) -> Result<(Vec<Window<'_>>, usize)> {
    let spec = WindowSpec::new(k);
    let mut out = Vec::new();
    let mut skipped = 0;
    for (profile, history) in dataset.histories() {
        match spec.select(history) {
            Some((inputs, target)) => {
                let label = target
                    .category
                    .class()
                    .ok_or_else(|| Error::Invalid(format!("unmapped category `{}`", target.category.as_code())))?;
                out.push(Window { profile, inputs, label });
            }
            None => skipped += 1,
        }
    }
    Ok((out, skipped))
}

/// Anything the protocol can evaluate.
pub trait Evaluable: Sync {
    fn name(&self) -> &str;
    /// Name of the dataset the model was trained on, if any.
    fn trained_on(&self) -> Option<&str>;
    fn predict(&self, windows: &[Window<'_>]) -> Result<Vec<Category>>;
}

/// The frequency baseline, re-fit on each test window.
pub struct BaselineEval {
    pub name: String,
    pub mode: PeriodMode,
    pub tie_order: TieOrder,
}

impl Evaluable for BaselineEval {
    fn name(&self) -> &str {
        &self.name
    }

    fn trained_on(&self) -> Option<&str> {
        None
    }

    fn predict(&self, windows: &[Window<'_>]) -> Result<Vec<Category>> {
        par::map(windows, |w| baseline::predict_window(w.inputs, self.mode, &self.tie_order))
            .into_iter()
            .collect()
    }
}

pub struct SeqModelEval<'m> {
    pub name: String,
    pub trained_on: String,
    pub model: &'m (dyn SeqModel + 'm),
}

impl Evaluable for SeqModelEval<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn trained_on(&self) -> Option<&str> {
        Some(&self.trained_on)
    }

    fn predict(&self, windows: &[Window<'_>]) -> Result<Vec<Category>> {
        let seqs = windows
            .iter()
            .map(|w| {
                let cats = w
                    .inputs
                    .iter()
                    .map(|t| t.category.class().ok_or_else(|| Error::Invalid("unmapped category".into())))
                    .collect::<Result<Vec<_>>>()?;
                seqmodels::encode(&cats)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(seqmodels::predict(self.model, &seqs)?
            .into_iter()
            .map(|p| p.category)
            .collect())
    }
}

/// A language model scored on the four candidate answers.
pub struct LmEval<'s> {
    pub name: String,
    /// `None` for a base model that never saw labelled pairs.
    pub trained_on: Option<String>,
    pub scorer: &'s Scorer,
}

impl Evaluable for LmEval<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn trained_on(&self) -> Option<&str> {
        self.trained_on.as_deref()
    }

    fn predict(&self, windows: &[Window<'_>]) -> Result<Vec<Category>> {
        let inputs = windows
            .iter()
            .map(|w| instructions::serialize(w.profile, w.inputs, w.label).map(|s| s.instruction_input))
            .collect::<Result<Vec<_>>>()?;
        Ok(par::map(&inputs, |s| self.scorer.score(s).category))
    }
}

/// A model and the test lengths it is evaluated at.
pub struct ProtocolEntry<'a> {
    pub model: &'a dyn Evaluable,
    pub lengths: Vec<usize>,
}

/// Evaluates every entry at each of its lengths on `test`, one report per
/// (model, length) in entry order. Fails if any model was trained on the
/// test dataset.
pub fn run_protocol(entries: &[ProtocolEntry<'_>], test: &Dataset) -> Result<Vec<MetricsReport>> {
    for e in entries {
        if e.model.trained_on() == Some(test.name.as_str()) {
            return Err(Error::Invalid(format!(
                "model `{}` was trained on `{}`, which is also the test set",
                e.model.name(),
                test.name
            )));
        }
    }
    let cells: Vec<(&dyn Evaluable, usize)> = entries
        .iter()
        .flat_map(|e| e.lengths.iter().map(move |&k| (e.model, k)))
        .collect();
    par::map(&cells, |&(model, k)| -> Result<MetricsReport> {
        let (ws, skipped) = windows(test, k)?;
        let preds = model.predict(&ws)?;
        let truths: Vec<Category> = ws.iter().map(|w| w.label).collect();
        let mut r = compute_metrics(&truths, &preds)?;
        r.model = model.name().to_string();
        r.dataset = test.name.clone();
        r.seq_len = k;
        r.skipped = skipped;
        log::info!("{} k={k}: accuracy {:.3}, weighted F1 {:.3}", r.model, r.accuracy, r.f1);
        Ok(r)
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Markdown => "md",
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

/// Class-wise column order of the report tables.
pub const CLASS_COLUMNS: [Category; NUM_CLASSES] =
    [Category::Clothing, Category::GasStations, Category::Grocery, Category::Other];

pub const OVERALL_HEADER: [&str; 7] = [
    "Model",
    "Dataset",
    "Sequence Length",
    "Accuracy",
    "Precision",
    "Recall",
    "F1 (weighted)",
];

fn class_cell(r: &MetricsReport, c: Category) -> String {
    let m = &r.classes[c.index()];
    if m.support == 0 {
        "-".into()
    } else {
        format!("{:.3}", m.f1)
    }
}

fn markdown(reports: &[MetricsReport]) -> String {
    let mut s = String::from("## Overall\n\n");
    let _ = writeln!(s, "| {} |", OVERALL_HEADER.join(" | "));
    let _ = writeln!(s, "|{}", "---|".repeat(OVERALL_HEADER.len()));
    for r in reports {
        // Best value per column among rows with the same sequence length.
        let peers: Vec<&MetricsReport> = reports.iter().filter(|p| p.seq_len == r.seq_len).collect();
        let cell = |get: fn(&MetricsReport) -> f64| {
            let best = peers.iter().map(|p| format!("{:.2}", get(p))).max_by(|a, b| a.cmp(b)).unwrap_or_default();
            let v = format!("{:.2}", get(r));
            if peers.len() > 1 && v == best {
                format!("**{v}**")
            } else {
                v
            }
        };
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.model,
            r.dataset,
            r.seq_len,
            cell(|r| r.accuracy),
            cell(|r| r.precision),
            cell(|r| r.recall),
            cell(|r| r.f1)
        );
    }
    s.push_str("\n## Class-wise F1\n\n| Model | Sequence Length |");
    for c in CLASS_COLUMNS {
        let _ = write!(s, " {} |", c.title());
    }
    let _ = writeln!(s, "\n|{}", "---|".repeat(2 + CLASS_COLUMNS.len()));
    for r in reports {
        let _ = write!(s, "| {} | {} |", r.model, r.seq_len);
        for c in CLASS_COLUMNS {
            let _ = write!(s, " {} |", class_cell(r, c));
        }
        s.push('\n');
    }
    s
}

fn csv(reports: &[MetricsReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["model", "dataset", "seq_len", "accuracy", "precision", "recall", "f1_weighted"]
        .map(String::from)
        .to_vec();
    header.extend(CLASS_COLUMNS.iter().map(|c| format!("f1_{}", c.code().to_lowercase())));
    let csv_err = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in reports {
        let mut row = vec![
            r.model.clone(),
            r.dataset.clone(),
            r.seq_len.to_string(),
            format!("{:.2}", r.accuracy),
            format!("{:.2}", r.precision),
            format!("{:.2}", r.recall),
            format!("{:.2}", r.f1),
        ];
        row.extend(CLASS_COLUMNS.iter().map(|&c| class_cell(r, c)));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Renders the overall and class-wise tables. Overall metrics use two
/// decimals, class-wise F1 three; a class with no support shows `-`.
pub fn render_report(reports: &[MetricsReport], format: ReportFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Empty("no reports to render".into()));
    }
    match format {
        ReportFormat::Markdown => Ok(markdown(reports)),
        ReportFormat::Csv => csv(reports),
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(reports).map_err(|e| Error::Invalid(format!("json: {e}")))?;
            s.push('\n');
            Ok(s)
        }
    }
}

pub fn write_report(reports: &[MetricsReport], format: ReportFormat, path: &Path) -> Result<()> {
    let text = render_report(reports, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Category::*;

    #[test]
    fn majority_predictor() {
        let truths = [Grocery, Grocery, Clothing, Other];
        let preds = [Grocery; 4];
        let r = compute_metrics(&truths, &preds).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.classes[Grocery.index()].recall, 1.0);
        for c in [Clothing, GasStations, Other] {
            assert_eq!(r.classes[c.index()].f1, 0.0);
            assert_eq!(r.classes[c.index()].precision, 0.0);
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(compute_metrics(&[Grocery], &[Grocery, Other]).is_err());
        assert!(compute_metrics(&[], &[]).is_err());
    }

    #[test]
    fn zero_support_renders_dash() {
        let r = compute_metrics(&[Grocery, Other], &[Grocery, Grocery]).unwrap();
        let md = render_report(&[r.clone()], ReportFormat::Markdown).unwrap();
        assert!(md.contains(" - |"));
        assert!(!md.contains("NaN"));
        let csv = render_report(&[r], ReportFormat::Csv).unwrap();
        assert!(csv.lines().nth(1).unwrap().contains(",-,"));
    }
}
