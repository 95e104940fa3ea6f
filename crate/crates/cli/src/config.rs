//! Run configuration: one TOML file drives every stage.
//!
//! Every section and key is optional and falls back to the defaults below.
//! Per-stage seeds are not configurable; they are derived from the single
//! top-level `seed`.

use std::path::{Path, PathBuf};

use nextcat_core::baseline::PeriodMode;
use nextcat_core::lora_lm::{FinetuneConfig, LmConfig, LoraConfig, PretrainConfig};
use nextcat_core::preprocess::PreprocessConfig;
use nextcat_core::seqmodels::{CnnConfig, LstmConfig, TrainConfig};
use nextcat_core::synthgen::{paper_marginals, GeneratorConfig};
use nextcat_core::domain::NUM_CLASSES;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataPreset {
    /// Mixed-strength segments balanced to the target marginals.
    Default,
    /// Dominant transitions of 0.85, no balancing.
    StrongSignal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub preset: DataPreset,
    pub bank_a_customers: usize,
    pub bank_b_customers: usize,
    /// Maximum absolute change applied to each Bank B transition entry.
    pub bank_b_epsilon: f64,
    /// Category shares in `Grocery, Clothing, Gas stations, Other` order.
    pub target_marginals: [f64; NUM_CLASSES],
    /// Customers per bank generated with a missing demographic field.
    pub planted_incomplete: usize,
    /// Customers per bank generated with too little activity.
    pub planted_low_activity: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            preset: DataPreset::Default,
            bank_a_customers: 2000,
            bank_b_customers: 500,
            bank_b_epsilon: 0.05,
            target_marginals: paper_marginals(),
            planted_incomplete: 20,
            planted_low_activity: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub train_len: usize,
    pub test_lengths: Vec<usize>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            train_len: 9,
            test_lengths: vec![4, 7, 9, 14],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Most frequent Bank A class first.
    TrainingFrequency,
    /// Fixed default priority.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub period_mode: PeriodMode,
    pub tie_break: TieBreak,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            period_mode: PeriodMode::PerEvent,
            tie_break: TieBreak::TrainingFrequency,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmSection {
    pub model: LstmConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnSection {
    pub model: CnnConfig,
    pub train: TrainConfig,
}

impl Default for CnnSection {
    fn default() -> Self {
        CnnSection {
            model: CnnConfig::default(),
            train: TrainConfig {
                epochs: 20,
                lr: 0.01,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub min_count: usize,
    pub max_vocab: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            min_count: 2,
            max_vocab: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub model: LmConfig,
    pub tokenizer: TokenizerConfig,
    pub pretrain: PretrainConfig,
    /// Templated cue-and-label lines added to the pre-training texts.
    pub filler_sentences: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            model: LmConfig::default(),
            tokenizer: TokenizerConfig::default(),
            pretrain: PretrainConfig::default(),
            filler_sentences: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Mean rather than summed token log-probability per candidate answer.
    pub length_normalize: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig { length_normalize: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub windows: WindowConfig,
    pub baseline: BaselineConfig,
    pub lstm: LstmSection,
    pub cnn: CnnSection,
    pub lm: LmSection,
    pub lora: LoraConfig,
    pub finetune: FinetuneConfig,
    pub scoring: ScoringConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            windows: WindowConfig::default(),
            baseline: BaselineConfig::default(),
            lstm: LstmSection::default(),
            cnn: CnnSection::default(),
            lm: LmSection::default(),
            lora: LoraConfig::default(),
            finetune: FinetuneConfig::default(),
            scoring: ScoringConfig::default(),
        }
    }
}

/// Per-stage seed offsets.
#[derive(Clone, Copy, Debug)]
pub enum Stage {
    BankA,
    BankB,
    Lstm,
    Cnn,
    Pretrain,
    Lora,
}

/// Keys that would let a stage seed drift from the top-level seed.
const DERIVED_KEYS: &[&str] = &["seed"];

fn walk(input: &toml::Value, schema: &toml::Value, path: &str, out: &mut Vec<String>) {
    let (toml::Value::Table(inp), toml::Value::Table(sch)) = (input, schema) else {
        return;
    };
    for (key, value) in inp {
        let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match sch.get(key) {
            Some(_) if !path.is_empty() && DERIVED_KEYS.contains(&key.as_str()) => {
                out.push(format!("{full} (stage seeds derive from the top-level `seed`)"))
            }
            Some(s) => walk(value, s, &full, out),
            None => out.push(format!("{full} (unknown key)")),
        }
    }
}

impl RunConfig {
    /// Parses TOML, reporting every unknown key and every invalid value at
    /// once.
    pub fn from_toml(text: &str) -> CliResult<RunConfig> {
        let value: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(vec![e.to_string()]))?;
        let schema = toml::Value::try_from(RunConfig::default()).expect("default config serializes");
        let mut problems = Vec::new();
        walk(&value, &schema, "", &mut problems);
        if !problems.is_empty() {
            return Err(CliError::Config(problems));
        }
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| CliError::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        RunConfig::from_toml(&text)
    }

    /// TOML text that [`RunConfig::from_toml`] accepts; derived stage seeds
    /// are left out.
    pub fn to_toml(&self) -> String {
        fn strip(v: &mut toml::Value, top: bool) {
            if let toml::Value::Table(t) = v {
                if !top {
                    for k in DERIVED_KEYS {
                        t.remove(*k);
                    }
                }
                for (_, c) in t.iter_mut() {
                    strip(c, false);
                }
            }
        }
        let mut v = toml::Value::try_from(self).expect("config serializes");
        strip(&mut v, true);
        toml::to_string_pretty(&v).expect("config serializes")
    }

    /// Lists every invalid value.
    pub fn validate(&self) -> CliResult<()> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, key: &str, why: &str| {
            if !ok {
                bad.push(format!("{key} ({why})"));
            }
        };
        let d = &self.data;
        check(d.bank_a_customers > 0, "data.bank_a_customers", "must be positive");
        check(d.bank_b_customers > 0, "data.bank_b_customers", "must be positive");
        check((0.0..1.0).contains(&d.bank_b_epsilon), "data.bank_b_epsilon", "must be in [0, 1)");
        check(
            (d.target_marginals.iter().sum::<f64>() - 1.0).abs() < 1e-9 && d.target_marginals.iter().all(|&p| p > 0.0),
            "data.target_marginals",
            "must be positive and sum to 1",
        );
        let w = &self.windows;
        check(w.train_len > 0 && w.train_len <= 14, "windows.train_len", "must be in 1..=14");
        check(
            !w.test_lengths.is_empty() && w.test_lengths.iter().all(|&k| k > 0 && k <= 14),
            "windows.test_lengths",
            "must be non-empty with every length in 1..=14",
        );
        for (name, t) in [("lstm", &self.lstm.train), ("cnn", &self.cnn.train)] {
            check(t.batch_size > 0, &format!("{name}.train.batch_size"), "must be positive");
            check(t.lr > 0.0, &format!("{name}.train.lr"), "must be positive");
        }
        check(self.lstm.model.hidden > 0, "lstm.model.hidden", "must be positive");
        if let Err(e) = self.cnn.model.output_grid() {
            check(false, "cnn.model", &e.to_string());
        }
        if let Err(e) = self.lm.model.validate() {
            check(false, "lm.model", &e.to_string());
        }
        check(self.lm.tokenizer.max_vocab > 16, "lm.tokenizer.max_vocab", "must exceed 16");
        check(self.lm.pretrain.batch_size > 0, "lm.pretrain.batch_size", "must be positive");
        check(self.lm.pretrain.lr > 0.0, "lm.pretrain.lr", "must be positive");
        check(
            (0.0..1.0).contains(&self.lm.pretrain.heldout_fraction),
            "lm.pretrain.heldout_fraction",
            "must be in [0, 1)",
        );
        check(self.lora.rank > 0, "lora.rank", "must be positive");
        check(self.lora.alpha > 0.0, "lora.alpha", "must be positive");
        check(!self.lora.targets.is_empty(), "lora.targets", "must name at least one weight");
        check(self.finetune.batch_size > 0, "finetune.batch_size", "must be positive");
        check(self.finetune.lr > 0.0, "finetune.lr", "must be positive");
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad))
        }
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(stage as u64 * 7919)
    }

    fn generator(&self, base: GeneratorConfig, customers: usize) -> GeneratorConfig {
        GeneratorConfig {
            n_customers: customers,
            target_marginals: self.data.target_marginals,
            planted_incomplete: self.data.planted_incomplete,
            planted_low_activity: self.data.planted_low_activity,
            ..base
        }
    }

    pub fn bank_a(&self) -> GeneratorConfig {
        let preset = match self.data.preset {
            DataPreset::Default => GeneratorConfig::bank_a(),
            DataPreset::StrongSignal => GeneratorConfig::strong_signal(),
        };
        let mut cfg = self.generator(preset, self.data.bank_a_customers);
        cfg.name = "bank_a".into();
        cfg.seed = self.stage_seed(Stage::BankA);
        cfg
    }

    pub fn bank_b(&self) -> GeneratorConfig {
        let a = self.bank_a();
        let mut cfg = GeneratorConfig::bank_b(&a, self.data.bank_b_epsilon);
        cfg.n_customers = self.data.bank_b_customers;
        cfg.seed = self.stage_seed(Stage::BankB);
        cfg
    }

    pub fn lstm_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed(Stage::Lstm),
            ..self.lstm.train.clone()
        }
    }

    pub fn cnn_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed(Stage::Cnn),
            ..self.cnn.train.clone()
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.stage_seed(Stage::Pretrain),
            ..self.lm.pretrain.clone()
        }
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            seed: self.stage_seed(Stage::Lora),
            ..self.finetune.clone()
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
