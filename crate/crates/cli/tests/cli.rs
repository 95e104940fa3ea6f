use std::path::Path;
use std::process::Command;

use nextcat::manifest::{Manifest, MANIFEST};
use nextcat::pipeline::{sha256, Context, MODEL_RAW};
use nextcat::{CliError, RunConfig};

fn nextcat(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_nextcat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Small enough to run every stage in a few seconds.
const TINY: &str = r#"
seed = 3

[data]
bank_a_customers = 250
bank_b_customers = 60

[lstm.train]
epochs = 2

[cnn.train]
epochs = 2

[lm]
filler_sentences = 20

[lm.model]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_len = 64

[lm.pretrain]
epochs = 1

[finetune]
epochs = 1
eval_subset = 32
"#;

#[test]
fn every_unknown_key_is_listed() {
    let text = "seedd = 1\n[data]\nbank_a_customer = 3\n[lora]\nrank = 4\nalpha_ = 2.0\n[nope]\nx = 1\n";
    let Err(CliError::Config(problems)) = RunConfig::from_toml(text) else {
        panic!("config accepted");
    };
    for key in ["seedd", "data.bank_a_customer", "lora.alpha_", "nope"] {
        assert!(problems.iter().any(|p| p.starts_with(key)), "{key} missing from {problems:?}");
    }
    assert_eq!(problems.len(), 4);
}

#[test]
fn stage_seeds_cannot_be_set_directly() {
    let err = RunConfig::from_toml("[lm.pretrain]\nseed = 5\n").unwrap_err();
    assert!(err.to_string().contains("lm.pretrain.seed"), "{err}");
}

#[test]
fn every_invalid_value_is_listed() {
    let text = "[lora]\nrank = 0\n[windows]\ntrain_len = 20\n[finetune]\nlr = -1.0\n";
    let Err(CliError::Config(problems)) = RunConfig::from_toml(text) else {
        panic!("config accepted");
    };
    assert_eq!(problems.len(), 3, "{problems:?}");
}

#[test]
fn printed_config_parses_back_to_itself() {
    let cfg = RunConfig::from_toml(TINY).unwrap();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
}

#[test]
fn stage_seeds_follow_the_top_level_seed() {
    let a = RunConfig::default();
    let mut b = a.clone();
    b.seed += 1;
    assert_ne!(a.bank_a().seed, b.bank_a().seed);
    assert_ne!(a.pretrain().seed, b.pretrain().seed);
    assert_ne!(a.lstm_train().seed, a.cnn_train().seed);
}

#[test]
fn missing_artifacts_name_the_command_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = nextcat(&["--out", out, "evaluate"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("nextcat train baseline"), "{err}");

    let ctx = Context::new(RunConfig::default(), dir.path().to_path_buf());
    assert!(matches!(ctx.finetune_lora(), Err(CliError::Prerequisite { command: "make-instructions", .. })));
}

#[test]
fn selftest_passes_and_catches_an_injected_fault() {
    let ok = nextcat(&["selftest"]);
    let text = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(ok.status.code(), Some(0), "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
    assert!(text.contains("metrics oracle") && text.contains("baseline oracle"));

    let bad = nextcat(&["selftest", "--inject-fault"]);
    let text = String::from_utf8_lossy(&bad.stdout);
    assert_eq!(bad.status.code(), Some(2), "{text}");
    assert!(text.lines().any(|l| l.starts_with("FAIL gradient check")));
}

fn check_manifest(root: &Path) {
    let m: Manifest = serde_json::from_slice(&std::fs::read(root.join(MANIFEST)).unwrap()).unwrap();
    let mut on_disk = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p != root.join(MANIFEST) {
                on_disk.push(p);
            }
        }
    }
    assert_eq!(m.files.len(), on_disk.len());
    for f in &m.files {
        let bytes = std::fs::read(root.join(&f.path)).unwrap();
        assert_eq!(f.sha256, sha256(&bytes), "{}", f.path);
        assert_eq!(f.bytes, bytes.len() as u64);
    }
}

#[test]
fn tiny_run_all_writes_complete_reports_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    std::fs::write(&cfg_path, TINY).unwrap();
    let out = dir.path().join("run");
    let o = nextcat(&["--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap(), "run-all"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let metrics: Vec<nextcat_core::eval::MetricsReport> =
        serde_json::from_slice(&std::fs::read(out.join("reports/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.len(), 17);
    assert_eq!(metrics.iter().filter(|r| r.model == MODEL_RAW).count(), 1);
    for ext in ["md", "csv", "json"] {
        assert!(out.join(format!("report.{ext}")).exists());
    }
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 18);
    check_manifest(&out);

    // The written config reproduces the run's configuration hash.
    let written = RunConfig::load(&out.join("config.toml")).unwrap();
    let m: Manifest = serde_json::from_slice(&std::fs::read(out.join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(written.hash(), m.config_sha256);

    // Reports re-render identically from stored metrics.
    let before = std::fs::read(out.join("report.md")).unwrap();
    let o = nextcat(&["--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap(), "report"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(out.join("report.md")).unwrap(), before);
}
