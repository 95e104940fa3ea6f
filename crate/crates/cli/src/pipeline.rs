//! The pipeline stages. Each reads its inputs from the output directory,
//! fails with a prerequisite error naming the command that produces a
//! missing input, and writes its artifacts back under the same directory.

use std::path::{Path, PathBuf};

use nextcat_core::baseline::TieOrder;
use nextcat_core::eval::{self, BaselineEval, LmEval, MetricsReport, ProtocolEntry, ReportFormat, SeqModelEval};
use nextcat_core::instructions::{self, WindowSpec};
use nextcat_core::lora_lm::{self, LanguageModel, Scorer, Tokenizer, TrainingPair};
use nextcat_core::preprocess::{self, PreprocessReport};
use nextcat_core::seqmodels::{self, Cnn, Lstm, SeqModel, TrainReport};
use nextcat_core::synthgen::{self, GenerationTruth};
use nextcat_core::{io, Dataset};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Stage, TieBreak};
use crate::error::{CliError, CliResult};

pub const BANKS: [&str; 2] = ["bank_a", "bank_b"];

pub const MODEL_BASELINE: &str = "Baseline";
pub const MODEL_LSTM: &str = "LSTM";
pub const MODEL_CNN: &str = "CNN";
pub const MODEL_LORA: &str = "LoRA LM";
pub const MODEL_RAW: &str = "Raw LM";

/// Artifact locations relative to the output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Layout {
        Layout { root: root.into() }
    }

    pub fn raw(&self, bank: &str) -> PathBuf {
        self.root.join("data/raw").join(bank)
    }

    pub fn truth(&self, bank: &str) -> PathBuf {
        self.root.join(format!("data/raw/{bank}_truth.json"))
    }

    pub fn clean(&self, bank: &str) -> PathBuf {
        self.root.join("data/clean").join(bank)
    }

    pub fn preprocess_report(&self) -> PathBuf {
        self.root.join("data/clean/preprocess_report.json")
    }

    pub fn instructions(&self, bank: &str, k: usize) -> PathBuf {
        self.root.join(format!("instructions/{bank}_k{k}.jsonl"))
    }

    pub fn model(&self, file: &str) -> PathBuf {
        self.root.join("models").join(file)
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("reports/metrics.json")
    }

    pub fn report(&self, format: ReportFormat) -> PathBuf {
        self.root.join(format!("report.{}", format.extension()))
    }
}

pub struct Context {
    pub config: RunConfig,
    pub layout: Layout,
}

fn require(path: &Path, command: &'static str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Prerequisite {
            artifact: path.to_path_buf(),
            command,
        })
    }
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    ensure_parent(path)?;
    Ok(io::write_json(value, path)?)
}

#[derive(Serialize, Deserialize)]
pub struct BaselineArtifact {
    pub period_mode: nextcat_core::baseline::PeriodMode,
    pub tie_order: TieOrder,
}

#[derive(Serialize, Deserialize)]
pub struct SeqTrainArtifact {
    pub model: String,
    pub examples: usize,
    pub skipped: usize,
    pub report: TrainReport,
}

#[derive(Serialize, Deserialize)]
pub struct FinetuneArtifact {
    pub pairs: usize,
    pub trainable_parameters: usize,
    pub report: lora_lm::FinetuneReport,
    pub base_sha256_before: String,
    pub base_sha256_after: String,
}

impl Context {
    pub fn new(config: RunConfig, out: PathBuf) -> Context {
        Context {
            config,
            layout: Layout::new(out),
        }
    }

    pub fn gen_data(&self) -> CliResult<()> {
        for (bank, cfg) in [("bank_a", self.config.bank_a()), ("bank_b", self.config.bank_b())] {
            let (data, truth) = synthgen::generate_with_truth(&cfg)?;
            synthgen::export_csv(&data, &self.layout.raw(bank))?;
            write_json(&truth, &self.layout.truth(bank))?;
            log::info!("{bank}: {} customers, {} transactions", data.profiles.len(), data.transactions.len());
        }
        Ok(())
    }

    pub fn preprocess(&self) -> CliResult<()> {
        let mut reports: Vec<(String, PreprocessReport)> = Vec::new();
        for bank in BANKS {
            let dir = self.layout.raw(bank);
            require(&dir.join("profiles.csv"), "gen-data")?;
            let raw = synthgen::import_csv(&dir, bank)?;
            let (clean, report) = preprocess::run_pipeline(&raw, &self.config.preprocess);
            synthgen::export_csv(&clean, &self.layout.clean(bank))?;
            log::info!("{bank}: kept {} of {} users", report.users_out, report.users_in);
            reports.push((bank.to_string(), report));
        }
        write_json(&reports, &self.layout.preprocess_report())
    }

    /// A cleaned bank with income groups re-derived (they are not stored).
    pub fn clean(&self, bank: &str) -> CliResult<Dataset> {
        let dir = self.layout.clean(bank);
        require(&dir.join("profiles.csv"), "preprocess")?;
        let data = synthgen::import_csv(&dir, bank)?;
        Ok(preprocess::derive_income_group(&data))
    }

    pub fn make_instructions(&self) -> CliResult<()> {
        let a = self.clean("bank_a")?;
        let train_len = self.config.windows.train_len;
        let corpus = instructions::build_corpus(&a, WindowSpec::new(train_len))?;
        let path = self.layout.instructions("bank_a", train_len);
        ensure_parent(&path)?;
        instructions::export_jsonl(&corpus.samples, &path)?;
        log::info!("bank_a k={train_len}: {} pairs, {} skipped", corpus.samples.len(), corpus.skipped);
        let b = self.clean("bank_b")?;
        for &k in &self.config.windows.test_lengths {
            let corpus = instructions::build_corpus(&b, WindowSpec::new(k))?;
            instructions::export_jsonl(&corpus.samples, &self.layout.instructions("bank_b", k))?;
        }
        Ok(())
    }

    pub fn train_baseline(&self) -> CliResult<()> {
        let a = self.clean("bank_a")?;
        let tie_order = match self.config.baseline.tie_break {
            TieBreak::TrainingFrequency => TieOrder::from_training(&a),
            TieBreak::Fixed => TieOrder::default(),
        };
        write_json(
            &BaselineArtifact {
                period_mode: self.config.baseline.period_mode,
                tie_order,
            },
            &self.layout.model("baseline.json"),
        )
    }

    fn train_seq(&self, model: &mut dyn SeqModel, name: &str, train: &seqmodels::TrainConfig) -> CliResult<()> {
        let a = self.clean("bank_a")?;
        let (examples, skipped) = seqmodels::examples(&a, WindowSpec::new(self.config.windows.train_len))?;
        let report = seqmodels::train(model, &examples, train)?;
        let file = name.to_lowercase();
        let ckpt = self.layout.model(&format!("{file}.ckpt"));
        ensure_parent(&ckpt)?;
        model.save(&ckpt)?;
        write_json(
            &SeqTrainArtifact {
                model: name.to_string(),
                examples: examples.len(),
                skipped,
                report,
            },
            &self.layout.model(&format!("{file}_train.json")),
        )
    }

    fn new_lstm(&self) -> CliResult<Lstm> {
        Ok(Lstm::new(self.config.lstm.model.clone(), self.config.stage_seed(Stage::Lstm))?)
    }

    fn new_cnn(&self) -> CliResult<Cnn> {
        Ok(Cnn::new(self.config.cnn.model.clone(), self.config.stage_seed(Stage::Cnn))?)
    }

    pub fn train_lstm(&self) -> CliResult<()> {
        let mut m = self.new_lstm()?;
        self.train_seq(&mut m, MODEL_LSTM, &self.config.lstm_train())
    }

    pub fn train_cnn(&self) -> CliResult<()> {
        let mut m = self.new_cnn()?;
        self.train_seq(&mut m, MODEL_CNN, &self.config.cnn_train())
    }

    fn training_samples(&self) -> CliResult<Vec<instructions::InstructionSample>> {
        let path = self.layout.instructions("bank_a", self.config.windows.train_len);
        require(&path, "make-instructions")?;
        Ok(instructions::import_jsonl(&path)?)
    }

    pub fn pretrain_lm(&self) -> CliResult<()> {
        let samples = self.training_samples()?;
        let inputs: Vec<&str> = samples.iter().map(|s| s.instruction_input.as_str()).collect();
        let seed = self.config.stage_seed(Stage::Pretrain);
        let texts = lora_lm::pretraining_texts(&inputs, self.config.lm.filler_sentences, seed);
        let t = &self.config.lm.tokenizer;
        let tok = Tokenizer::build(texts.iter().map(String::as_str), t.min_count, t.max_vocab);
        let mut model = LanguageModel::new(self.config.lm.model, tok.len(), seed)?;
        let report = lora_lm::pretrain(&mut model, &tok, &texts, &self.config.pretrain())?;
        log::info!(
            "pre-training held-out loss {:.4} (uniform {:.4})",
            report.heldout_loss,
            report.uniform_bound
        );
        let path = self.layout.model("tokenizer.json");
        ensure_parent(&path)?;
        tok.save_json(&path)?;
        model.save_base(&self.layout.model("lm_base.ckpt"))?;
        write_json(&report, &self.layout.model("pretrain_report.json"))
    }

    fn load_base(&self) -> CliResult<(Tokenizer, LanguageModel)> {
        let tok_path = self.layout.model("tokenizer.json");
        let ckpt = self.layout.model("lm_base.ckpt");
        require(&tok_path, "pretrain-lm")?;
        require(&ckpt, "pretrain-lm")?;
        let tok = Tokenizer::load_json(&tok_path)?;
        let mut model = LanguageModel::new(self.config.lm.model, tok.len(), 0)?;
        model.load_base(&ckpt)?;
        Ok((tok, model))
    }

    pub fn finetune_lora(&self) -> CliResult<()> {
        let samples = self.training_samples()?;
        let (tok, base) = self.load_base()?;
        let before = sha256(&base.base_bytes());
        let max_len = self.config.lm.model.max_len;
        let pairs = samples
            .iter()
            .map(|s| TrainingPair::from_text(&tok, &s.instruction_input, s.label, max_len))
            .collect::<Result<Vec<_>, _>>()?;
        let mut model = base.attach_lora(self.config.lora.clone(), self.config.stage_seed(Stage::Lora))?;
        let trainable = model.store().trainable_scalars();
        let report = lora_lm::finetune(&mut model, &pairs, &self.config.finetune())?;
        log::info!(
            "fine-tuning answer loss {:.4} -> {:.4}",
            report.initial_loss,
            report.final_loss
        );
        let after = sha256(&model.base_bytes());
        if before != after {
            return Err(CliError::Check("fine-tuning changed base weights".into()));
        }
        model.save_adapters(&self.layout.model("lora_adapter.json"))?;
        write_json(
            &FinetuneArtifact {
                pairs: pairs.len(),
                trainable_parameters: trainable,
                report,
                base_sha256_before: before,
                base_sha256_after: after,
            },
            &self.layout.model("finetune_report.json"),
        )
    }

    pub fn evaluate(&self) -> CliResult<Vec<MetricsReport>> {
        let baseline_path = self.layout.model("baseline.json");
        require(&baseline_path, "train baseline")?;
        let baseline: BaselineArtifact = io::read_json(&baseline_path)?;
        let mut lstm = self.new_lstm()?;
        let mut cnn = self.new_cnn()?;
        for (m, file, cmd) in [
            (&mut lstm as &mut dyn SeqModel, "lstm.ckpt", "train lstm"),
            (&mut cnn as &mut dyn SeqModel, "cnn.ckpt", "train cnn"),
        ] {
            let p = self.layout.model(file);
            require(&p, cmd)?;
            m.load(&p)?;
        }
        let (tok, base) = self.load_base()?;
        let adapter = self.layout.model("lora_adapter.json");
        require(&adapter, "finetune-lora")?;
        let tuned = base.clone().load_adapters(&adapter)?;
        let test = self.clean("bank_b")?;

        let normalize = self.config.scoring.length_normalize;
        let raw_scorer = Scorer::new(&base, &tok, normalize);
        let tuned_scorer = Scorer::new(&tuned, &tok, normalize);
        let train_name = "bank_a".to_string();
        let b = BaselineEval {
            name: MODEL_BASELINE.into(),
            mode: baseline.period_mode,
            tie_order: baseline.tie_order,
        };
        let l = SeqModelEval {
            name: MODEL_LSTM.into(),
            trained_on: train_name.clone(),
            model: &lstm,
        };
        let c = SeqModelEval {
            name: MODEL_CNN.into(),
            trained_on: train_name.clone(),
            model: &cnn,
        };
        let t = LmEval {
            name: MODEL_LORA.into(),
            trained_on: Some(train_name),
            scorer: &tuned_scorer,
        };
        let r = LmEval {
            name: MODEL_RAW.into(),
            trained_on: None,
            scorer: &raw_scorer,
        };
        let lengths = self.config.windows.test_lengths.clone();
        let entries = vec![
            ProtocolEntry { model: &b, lengths: lengths.clone() },
            ProtocolEntry { model: &l, lengths: lengths.clone() },
            ProtocolEntry { model: &c, lengths: lengths.clone() },
            ProtocolEntry { model: &t, lengths },
            ProtocolEntry {
                model: &r,
                lengths: vec![self.config.windows.train_len],
            },
        ];
        let reports = eval::run_protocol(&entries, &test)?;
        write_json(&reports, &self.layout.metrics())?;
        Ok(reports)
    }

    pub fn load_metrics(&self) -> CliResult<Vec<MetricsReport>> {
        let path = self.layout.metrics();
        require(&path, "evaluate")?;
        Ok(io::read_json(&path)?)
    }

    pub fn report(&self) -> CliResult<()> {
        let reports = self.load_metrics()?;
        for format in [ReportFormat::Markdown, ReportFormat::Csv, ReportFormat::Json] {
            eval::write_report(&reports, format, &self.layout.report(format))?;
        }
        Ok(())
    }

    pub fn run_all(&self) -> CliResult<Vec<MetricsReport>> {
        self.gen_data()?;
        self.preprocess()?;
        self.make_instructions()?;
        self.train_baseline()?;
        self.train_lstm()?;
        self.train_cnn()?;
        self.pretrain_lm()?;
        self.finetune_lora()?;
        let reports = self.evaluate()?;
        self.report()?;
        Ok(reports)
    }
}

pub fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Truth records written by `gen-data`.
pub fn load_truth(layout: &Layout, bank: &str) -> CliResult<GenerationTruth> {
    let path = layout.truth(bank);
    require(&path, "gen-data")?;
    Ok(io::read_json(&path)?)
}

/// The ordering checks on the reports at the training length: the tuned
/// LM beats the baseline by 0.05 weighted F1 and beats the raw LM, and
/// each sequence model at least matches the baseline.
pub fn ordering_checks(reports: &[MetricsReport], k: usize) -> Vec<(String, bool)> {
    let f1 = |name: &str| {
        reports
            .iter()
            .find(|r| r.model == name && r.seq_len == k)
            .map(|r| r.f1)
    };
    let (Some(base), Some(tuned), Some(raw), Some(lstm), Some(cnn)) =
        (f1(MODEL_BASELINE), f1(MODEL_LORA), f1(MODEL_RAW), f1(MODEL_LSTM), f1(MODEL_CNN))
    else {
        return vec![("all five models reported".into(), false)];
    };
    vec![
        (format!("{MODEL_LORA} {tuned:.3} >= {MODEL_BASELINE} {base:.3} + 0.05"), tuned >= base + 0.05),
        (format!("{MODEL_LORA} {tuned:.3} > {MODEL_RAW} {raw:.3}"), tuned > raw),
        (format!("{MODEL_LSTM} {lstm:.3} >= {MODEL_BASELINE} {base:.3}"), lstm >= base),
        (format!("{MODEL_CNN} {cnn:.3} >= {MODEL_BASELINE} {base:.3}"), cnn >= base),
    ]
}
