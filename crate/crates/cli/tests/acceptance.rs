//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use nextcat::config::DataPreset;
use nextcat::pipeline::{self, Context, FinetuneArtifact, MODEL_RAW};
use nextcat::RunConfig;
use nextcat_core::autodiff::gradcheck;
use nextcat_core::baseline::{predict_window, PeriodMode, TieOrder};
use nextcat_core::domain::{Education, Gender, IncomeGroup, MaritalStatus};
use nextcat_core::eval::{compute_metrics, MetricsReport};
use nextcat_core::instructions::{serialize, WindowSpec};
use nextcat_core::lora_lm::{self, LanguageModel, LmConfig, LoraConfig, Tokenizer};
use nextcat_core::preprocess::{map_to_other, run_pipeline, PreprocessConfig};
use nextcat_core::seqmodels::{self, Lstm};
use nextcat_core::synthgen::{self, bayes_accuracy, paper_marginals, GeneratorConfig};
use nextcat_core::{io, Category, CustomerProfile, Merchant, Money, Transaction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut checks = gradcheck::primitive_suite(11).map_err(|e| e.to_string())?;
    checks.extend(seqmodels::gradient_checks(11).map_err(|e| e.to_string())?);
    checks.extend(lora_lm::gradient_checks(11).map_err(|e| e.to_string())?);
    let elapsed = start.elapsed();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| c.max_rel_error >= 1e-4).map(|c| c.name.as_str()).collect();
    verdict(
        failed.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} checks, worst relative error {worst:.2e}, {:.1}s, failing {failed:?}",
            checks.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn lora_identity() -> Outcome {
    let vocab = 300;
    let base = LanguageModel::new(LmConfig::default(), vocab, 21).map_err(|e| e.to_string())?;
    let adapted = base.clone().attach_lora(LoraConfig::default(), 22).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = rng.random_range(1..=LmConfig::default().max_len);
        let toks: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        let a = base.logits_of(&toks).map_err(|e| e.to_string())?;
        let b = adapted.logits_of(&toks).map_err(|e| e.to_string())?;
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    verdict(worst <= 1e-9, format!("max logit deviation {worst:.1e} over 100 inputs"))
}

fn freeze_invariance(ctx: &Context) -> Outcome {
    let artifact: FinetuneArtifact = io::read_json(&ctx.layout.model("finetune_report.json")).map_err(|e| e.to_string())?;
    let ckpt = std::fs::read(ctx.layout.model("lm_base.ckpt")).map_err(|e| e.to_string())?;
    // Re-serialize the base half of the fine-tuned model and compare bytes.
    let tok = Tokenizer::load_json(&ctx.layout.model("tokenizer.json")).map_err(|e| e.to_string())?;
    let mut base = LanguageModel::new(ctx.config.lm.model, tok.len(), 0).map_err(|e| e.to_string())?;
    base.load_base(&ctx.layout.model("lm_base.ckpt")).map_err(|e| e.to_string())?;
    let tuned = base
        .load_adapters(&ctx.layout.model("lora_adapter.json"))
        .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let resaved = dir.path().join("base.ckpt");
    tuned.save_base(&resaved).map_err(|e| e.to_string())?;
    let resaved = std::fs::read(&resaved).map_err(|e| e.to_string())?;
    let file_hash = pipeline::sha256(&ckpt);
    verdict(
        artifact.base_sha256_before == artifact.base_sha256_after && resaved == ckpt,
        format!(
            "base sha256 {}…, before/after equal: {}, re-saved checkpoint identical: {}",
            &file_hash[..12],
            artifact.base_sha256_before == artifact.base_sha256_after,
            resaved == ckpt
        ),
    )
}

fn baseline_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let start = NaiveDate::from_ymd_opt(2014, 9, 1).unwrap();
    let (mut mismatches, mut ties) = (0, 0);
    for i in 0..200 {
        // Random priority orders and short windows so ties are common.
        let mut order = Category::ALL;
        for j in (1..4).rev() {
            order.swap(j, rng.random_range(0..=j));
        }
        let tie = if i % 2 == 0 { TieOrder::default() } else { TieOrder(order) };
        let k = rng.random_range(1..=8);
        let window: Vec<Transaction> = (0..k)
            .map(|d| Transaction {
                customer_id: 7,
                date: start + chrono::Duration::days(d),
                amount: Money::from_cents(rng.random_range(100..20_000)),
                category: Merchant::Known(Category::ALL[rng.random_range(0..4)]),
            })
            .collect();
        let mut counts = [0usize; 4];
        for t in &window {
            counts[t.category.class().unwrap().index()] += 1;
        }
        let best = *counts.iter().max().unwrap();
        if counts.iter().filter(|&&c| c == best).count() > 1 {
            ties += 1;
        }
        let expected = *tie.0.iter().find(|c| counts[c.index()] == best).unwrap();
        if predict_window(&window, PeriodMode::PerEvent, &tie).ok() != Some(expected) {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0 && ties > 0,
        format!("{mismatches} mismatches over 200 windows ({ties} with ties)"),
    )
}

fn golden_serialization() -> Outcome {
    let golden = include_str!("../../core/tests/fixtures/golden_input.txt");
    let profile = CustomerProfile {
        customer_id: 1695432,
        age: Some(48),
        gender: Some(Gender::Male),
        marital_status: Some(MaritalStatus::Married),
        education: Some(Education::SecondarySchool),
        job: Some("private employee".into()),
        income: Some(Money::from_cents(12_000_000)),
        income_group: Some(IncomeGroup::High),
    };
    use Category::*;
    let rows = [
        (Grocery, (3, 28), 3982),
        (Grocery, (4, 1), 4725),
        (Grocery, (4, 15), 2781),
        (Other, (5, 1), 12497),
        (Clothing, (5, 27), 10597),
        (Other, (6, 4), 2495),
        (Clothing, (6, 4), 4999),
        (Clothing, (6, 4), 9995),
        (Clothing, (6, 8), 3990),
    ];
    let window: Vec<Transaction> = rows
        .iter()
        .map(|&(c, (m, d), cents)| Transaction {
            customer_id: profile.customer_id,
            date: NaiveDate::from_ymd_opt(2015, m, d).unwrap(),
            amount: Money::from_cents(cents),
            category: Merchant::Known(c),
        })
        .collect();
    let s = serialize(&profile, &window, GasStations).map_err(|e| e.to_string())?;
    let sum_cents: i64 = rows.iter().map(|r| r.2).sum();
    let ok = s.instruction_input == golden
        && s.instruction_output == "Gas stations."
        && Money::from_cents(sum_cents).to_string() == "560.61"
        && s.instruction_input.contains("$560.61");
    verdict(ok, format!("{} bytes, byte-exact: {}", golden.len(), s.instruction_input == golden))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    let mut perfect_ok = true;
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let truths: Vec<Category> = (0..n).map(|_| Category::ALL[rng.random_range(0..4)]).collect();
        let preds: Vec<Category> = truths
            .iter()
            .map(|&t| if rng.random_bool(0.5) { t } else { Category::ALL[rng.random_range(0..4)] })
            .collect();
        let r = compute_metrics(&truths, &preds).map_err(|e| e.to_string())?;
        // Independent tally: per class tp, false positives, false negatives.
        let (mut wp, mut wr, mut wf, mut hits) = (0.0, 0.0, 0.0, 0.0);
        for c in Category::ALL {
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            for (t, p) in truths.iter().zip(&preds) {
                match (*t == c, *p == c) {
                    (true, true) => tp += 1.0,
                    (false, true) => fp += 1.0,
                    (true, false) => fn_ += 1.0,
                    _ => {}
                }
            }
            hits += tp;
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rc = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f = if p + rc > 0.0 { 2.0 * p * rc / (p + rc) } else { 0.0 };
            let w = (tp + fn_) / n as f64;
            wp += w * p;
            wr += w * rc;
            wf += w * f;
            let m = r.classes[c.index()];
            worst = worst.max((m.precision - p).abs()).max((m.recall - rc).abs()).max((m.f1 - f).abs());
        }
        worst = worst
            .max((r.accuracy - hits / n as f64).abs())
            .max((r.precision - wp).abs())
            .max((r.recall - wr).abs())
            .max((r.f1 - wf).abs());
        let p = compute_metrics(&truths, &truths).map_err(|e| e.to_string())?;
        perfect_ok &= [p.accuracy, p.precision, p.recall, p.f1].iter().all(|&x| x == 1.0)
            && p.classes.iter().filter(|m| m.support > 0).all(|m| m.f1 == 1.0);
    }
    verdict(
        worst < 1e-9 && perfect_ok,
        format!("max deviation {worst:.1e} over 1000 sets, perfect predictions all 1.0: {perfect_ok}"),
    )
}

fn f1_at(reports: &[MetricsReport], model: &str, k: usize) -> Option<f64> {
    reports.iter().find(|r| r.model == model && r.seq_len == k).map(|r| r.f1)
}

fn ordering(ctx: &Context, reports: &[MetricsReport], elapsed: Duration) -> Outcome {
    let k = ctx.config.windows.train_len;
    let checks = pipeline::ordering_checks(reports, k);
    let fast = elapsed < Duration::from_secs(15 * 60);
    let detail = checks
        .iter()
        .map(|(what, ok)| format!("{}{what}", if *ok { "" } else { "NOT " }))
        .chain([format!("run-all {:.0}s", elapsed.as_secs_f64())])
        .collect::<Vec<_>>()
        .join("; ");
    verdict(checks.iter().all(|c| c.1) && fast, detail)
}

fn bayes_gap() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.data.preset = DataPreset::StrongSignal;
    let prep = PreprocessConfig::default();
    let a = run_pipeline(&synthgen::generate(&cfg.bank_a()).map_err(|e| e.to_string())?, &prep).0;
    let b_cfg = cfg.bank_b();
    let b = run_pipeline(&synthgen::generate(&b_cfg).map_err(|e| e.to_string())?, &prep).0;
    let spec = WindowSpec::new(9);
    let (train, _) = seqmodels::examples(&a, spec).map_err(|e| e.to_string())?;
    let (test, _) = seqmodels::examples(&b, spec).map_err(|e| e.to_string())?;
    let mut lstm = Lstm::new(cfg.lstm.model.clone(), 5).map_err(|e| e.to_string())?;
    seqmodels::train(&mut lstm, &train, &cfg.lstm_train()).map_err(|e| e.to_string())?;
    let seqs: Vec<_> = test.iter().map(|e| e.sequence.clone()).collect();
    let preds = seqmodels::predict(&lstm, &seqs).map_err(|e| e.to_string())?;
    let acc = preds.iter().zip(&test).filter(|(p, e)| p.category == e.label).count() as f64 / test.len() as f64;

    // Best constant predictor, judged on the test labels themselves.
    let mut counts = [0usize; 4];
    for e in &test {
        counts[e.label.index()] += 1;
    }
    let majority = *counts.iter().max().unwrap() as f64 / test.len() as f64;
    let bayes = bayes_accuracy(&b_cfg, 9).map_err(|e| e.to_string())?;
    let target = (majority + bayes) / 2.0;
    verdict(
        acc >= target,
        format!("LSTM accuracy {acc:.3}, majority {majority:.3}, Bayes {bayes:.3}, midpoint {target:.3}"),
    )
}

fn sweep(ctx: &Context, reports: &[MetricsReport]) -> Outcome {
    let lengths = [4, 7, 9, 14];
    let mut missing = Vec::new();
    for model in [pipeline::MODEL_BASELINE, pipeline::MODEL_LSTM, pipeline::MODEL_CNN, pipeline::MODEL_LORA] {
        for k in lengths {
            match reports.iter().find(|r| r.model == model && r.seq_len == k) {
                Some(r) if r.evaluated > 0 => {}
                _ => missing.push(format!("{model}@{k}")),
            }
        }
    }
    if f1_at(reports, MODEL_RAW, 9).is_none() {
        missing.push(format!("{MODEL_RAW}@9"));
    }
    let md = std::fs::read_to_string(ctx.layout.root.join("report.md")).unwrap_or_default();
    let csv = std::fs::read_to_string(ctx.layout.root.join("report.csv")).unwrap_or_default();
    let shaped = md.contains("F1 (weighted)") && md.contains("## Class-wise F1") && csv.lines().count() == 18;
    verdict(
        reports.len() == 17 && missing.is_empty() && shaped,
        format!("{} reports, missing {missing:?}, tables rendered: {shaped}", reports.len()),
    )
}

fn generator_fidelity(ctx: &Context) -> Outcome {
    let mut cfg = GeneratorConfig::bank_a();
    cfg.n_customers = 6000;
    cfg.target_marginals = paper_marginals();
    let raw = synthgen::generate(&cfg).map_err(|e| e.to_string())?;
    let folded = map_to_other(&raw, &PreprocessConfig::default().kept_categories);
    let counts = folded.class_counts();
    let n: usize = counts.iter().sum();
    let worst = Category::ALL
        .iter()
        .zip(paper_marginals())
        .map(|(c, t)| (counts[c.index()] as f64 / n as f64 - t).abs())
        .fold(0.0, f64::max);

    // Removed users in the full run are exactly the flagged ones, per bank.
    let mut exact = true;
    let mut planted = 0;
    for bank in pipeline::BANKS {
        let truth = pipeline::load_truth(&ctx.layout, bank).map_err(|e| e.to_string())?;
        let before = synthgen::import_csv(&ctx.layout.raw(bank), bank).map_err(|e| e.to_string())?;
        let after = synthgen::import_csv(&ctx.layout.clean(bank), bank).map_err(|e| e.to_string())?;
        let ids = |d: &nextcat_core::Dataset| d.profiles.iter().map(|p| p.customer_id).collect::<BTreeSet<u64>>();
        let removed: BTreeSet<u64> = ids(&before).difference(&ids(&after)).copied().collect();
        let flagged: BTreeSet<u64> = truth.incomplete.iter().chain(&truth.low_activity).copied().collect();
        exact &= removed == flagged;
        planted += flagged.len();
    }
    verdict(
        n >= 100_000 && worst < 0.02 && exact,
        format!("{n} transactions, worst marginal gap {:.2}pp; removed == flagged ({planted} users): {exact}", worst * 100.0),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    results.push(("1 gradient checks", gradient_checks()));
    results.push(("2 LoRA identity at init", lora_identity()));
    results.push(("4 baseline oracle", baseline_oracle()));
    results.push(("5 byte-exact serialization", golden_serialization()));
    results.push(("6 metrics oracle", metrics_oracle()));

    let dir = tempfile::tempdir().expect("temp dir");
    let out = dir.path().join("run");
    let mut cfg = RunConfig::default();
    cfg.out_dir = out.clone();
    let ctx = Context::new(cfg, out);
    let start = Instant::now();
    let run = ctx.run_all();
    let elapsed = start.elapsed();
    match run {
        Ok(reports) => {
            results.push(("3 freeze invariance", freeze_invariance(&ctx)));
            results.push(("7 end-to-end ordering", ordering(&ctx, &reports, elapsed)));
            results.push(("9 sequence-length sweep", sweep(&ctx, &reports)));
            results.push(("10 generator fidelity", generator_fidelity(&ctx)));
        }
        Err(e) => {
            for name in ["3 freeze invariance", "7 end-to-end ordering", "9 sequence-length sweep", "10 generator fidelity"] {
                results.push((name, Err(format!("run-all failed: {e}"))));
            }
        }
    }
    results.push(("8 Bayes-gap attainment", bayes_gap()));
    results.sort_by_key(|(name, _)| name.split(' ').next().and_then(|n| n.parse::<u32>().ok()));

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
