//! Gradient checks plus two small oracle suites, runnable from the command
//! line without any pipeline artifacts.

use chrono::NaiveDate;
use nextcat_core::autodiff::{gradcheck, inject_gradient_fault};
use nextcat_core::baseline::{predict_window, PeriodMode, TieOrder};
use nextcat_core::eval::compute_metrics;
use nextcat_core::{lora_lm, seqmodels, Category, Merchant, Money, Transaction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::CliResult;

#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Runs every suite; with `inject_fault` the sigmoid backward pass is
/// deliberately corrupted first so the gradient checks must fail.
pub fn run(seed: u64, inject_fault: bool) -> CliResult<Vec<Outcome>> {
    inject_gradient_fault(inject_fault);
    let result = run_suites(seed);
    inject_gradient_fault(false);
    result
}

fn run_suites(seed: u64) -> CliResult<Vec<Outcome>> {
    let mut checks = gradcheck::primitive_suite(seed)?;
    checks.extend(seqmodels::gradient_checks(seed)?);
    checks.extend(lora_lm::gradient_checks(seed)?);
    let mut out: Vec<Outcome> = checks
        .into_iter()
        .map(|c| Outcome {
            passed: c.passed(),
            detail: format!("max relative error {:.2e} over {} entries", c.max_rel_error, c.checked),
            name: format!("gradient check: {}", c.name),
        })
        .collect();
    out.push(metrics_oracle(seed));
    out.push(baseline_oracle(seed));
    Ok(out)
}

fn random_category(rng: &mut ChaCha8Rng) -> Category {
    Category::ALL[rng.random_range(0..Category::ALL.len())]
}

/// Accuracy and weighted F1 recomputed by direct counting over the pairs.
fn metrics_oracle(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..60);
        let truths: Vec<Category> = (0..n).map(|_| random_category(&mut rng)).collect();
        let preds: Vec<Category> = (0..n).map(|_| random_category(&mut rng)).collect();
        let r = compute_metrics(&truths, &preds).expect("non-empty");
        let hits = truths.iter().zip(&preds).filter(|(t, p)| t == p).count();
        let mut f1 = 0.0;
        for c in Category::ALL {
            let tp = truths.iter().zip(&preds).filter(|(t, p)| **t == c && **p == c).count() as f64;
            let support = truths.iter().filter(|t| **t == c).count() as f64;
            let predicted = preds.iter().filter(|p| **p == c).count() as f64;
            let denom = support + predicted;
            // F1 = 2·tp / (support + predicted), zero when the class is absent everywhere.
            let f = if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
            f1 += support / n as f64 * f;
        }
        worst = worst.max((r.accuracy - hits as f64 / n as f64).abs()).max((r.f1 - f1).abs());
    }
    Outcome {
        name: "metrics oracle".into(),
        passed: worst < 1e-9,
        detail: format!("max deviation {worst:.1e} over 200 random sets"),
    }
}

/// Per-event baseline against count-and-argmax with the same tie order.
fn baseline_oracle(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba5e);
    let tie = TieOrder::default();
    let start = NaiveDate::from_ymd_opt(2015, 1, 5).expect("valid date");
    let mut mismatches = 0;
    for _ in 0..200 {
        let k = rng.random_range(1..15);
        let window: Vec<Transaction> = (0..k)
            .map(|i| Transaction {
                customer_id: 1,
                date: start + chrono::Duration::days(i as i64),
                amount: Money::from_cents(1000),
                category: Merchant::Known(random_category(&mut rng)),
            })
            .collect();
        let mut counts = [0usize; 4];
        for t in &window {
            if let Merchant::Known(c) = t.category {
                counts[c.index()] += 1;
            }
        }
        let best = *counts.iter().max().expect("four counts");
        let expected = *tie.0.iter().find(|c| counts[c.index()] == best).expect("a maximum exists");
        if predict_window(&window, PeriodMode::PerEvent, &tie).ok() != Some(expected) {
            mismatches += 1;
        }
    }
    Outcome {
        name: "baseline oracle".into(),
        passed: mismatches == 0,
        detail: format!("{mismatches} mismatches over 200 random windows"),
    }
}
