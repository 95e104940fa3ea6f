use std::collections::HashMap;

use nextcat_core::baseline::{PeriodMode, TieOrder};
use nextcat_core::eval::*;
use nextcat_core::preprocess::{run_pipeline, PreprocessConfig};
use nextcat_core::synthgen::{generate, GeneratorConfig};
use nextcat_core::{par, Category, Dataset, Error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Second implementation: per-class tallies in hash maps, scikit-style
/// zero-division handling, weights by true-class share.
struct Oracle {
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    per_class: HashMap<Category, (f64, f64, f64)>,
}

fn oracle(truths: &[Category], preds: &[Category]) -> Oracle {
    let mut tp: HashMap<Category, f64> = HashMap::new();
    let mut fp: HashMap<Category, f64> = HashMap::new();
    let mut fn_: HashMap<Category, f64> = HashMap::new();
    for (t, p) in truths.iter().zip(preds) {
        if t == p {
            *tp.entry(*t).or_default() += 1.0;
        } else {
            *fp.entry(*p).or_default() += 1.0;
            *fn_.entry(*t).or_default() += 1.0;
        }
    }
    let n = truths.len() as f64;
    let get = |m: &HashMap<Category, f64>, c| m.get(&c).copied().unwrap_or(0.0);
    let mut out = Oracle {
        accuracy: tp.values().sum::<f64>() / n,
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        per_class: HashMap::new(),
    };
    for c in Category::ALL {
        let (t, f_p, f_n) = (get(&tp, c), get(&fp, c), get(&fn_, c));
        let p = if t + f_p > 0.0 { t / (t + f_p) } else { 0.0 };
        let r = if t + f_n > 0.0 { t / (t + f_n) } else { 0.0 };
        let f = if 2.0 * t + f_p + f_n > 0.0 { 2.0 * t / (2.0 * t + f_p + f_n) } else { 0.0 };
        let w = (t + f_n) / n;
        out.precision += w * p;
        out.recall += w * r;
        out.f1 += w * f;
        out.per_class.insert(c, (p, r, f));
    }
    out
}

fn random_set(rng: &mut ChaCha8Rng) -> (Vec<Category>, Vec<Category>) {
    let n = rng.random_range(1..300);
    // Skewed draws so some classes are often missing from one side.
    let skew: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>());
    let draw = |rng: &mut ChaCha8Rng| {
        let total: f64 = skew.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (i, s) in skew.iter().enumerate() {
            if u < *s {
                return Category::ALL[i];
            }
            u -= s;
        }
        Category::Other
    };
    let truths: Vec<Category> = (0..n).map(|_| draw(rng)).collect();
    let preds = truths
        .iter()
        .map(|t| if rng.random_bool(0.4) { *t } else { draw(rng) })
        .collect();
    (truths, preds)
}

#[test]
fn metrics_match_oracle_on_1000_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (truths, preds) = random_set(&mut rng);
        let r = compute_metrics(&truths, &preds).unwrap();
        let o = oracle(&truths, &preds);
        for (a, b) in [
            (r.accuracy, o.accuracy),
            (r.precision, o.precision),
            (r.recall, o.recall),
            (r.f1, o.f1),
        ] {
            worst = worst.max((a - b).abs());
        }
        for c in Category::ALL {
            let m = r.classes[c.index()];
            let (p, rc, f) = o.per_class[&c];
            worst = worst.max((m.precision - p).abs()).max((m.recall - rc).abs()).max((m.f1 - f).abs());
        }
    }
    assert!(worst < 1e-9, "max deviation {worst}");
}

#[test]
fn perfect_predictions_score_one_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (truths, _) = random_set(&mut rng);
        let r = compute_metrics(&truths, &truths).unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (1.0, 1.0, 1.0, 1.0));
        for c in Category::ALL {
            let m = r.classes[c.index()];
            if m.support > 0 {
                assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
            }
        }
    }
}

#[test]
fn empty_and_mismatched_inputs_fail() {
    assert!(matches!(compute_metrics(&[], &[]), Err(Error::Empty(_))));
    assert!(compute_metrics(&[Category::Grocery], &[]).is_err());
}

proptest! {
    #[test]
    fn confusion_margins_are_consistent(pairs in prop::collection::vec((0..4usize, 0..4usize), 1..200)) {
        let truths: Vec<Category> = pairs.iter().map(|p| Category::ALL[p.0]).collect();
        let preds: Vec<Category> = pairs.iter().map(|p| Category::ALL[p.1]).collect();
        let r = compute_metrics(&truths, &preds).unwrap();
        let m = r.confusion;
        prop_assert_eq!(m.total() as usize, pairs.len());
        prop_assert_eq!(Category::ALL.iter().map(|&c| m.support(c)).sum::<u64>(), m.total());
        prop_assert_eq!(Category::ALL.iter().map(|&c| m.predicted(c)).sum::<u64>(), m.total());
        // Weighted recall is accuracy.
        prop_assert!((r.recall - r.accuracy).abs() < 1e-12);
        for x in [r.accuracy, r.precision, r.recall, r.f1] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }
}

fn small_bank(seed: u64) -> Dataset {
    let mut cfg = GeneratorConfig::bank_a();
    cfg.name = "bank_b".into();
    cfg.n_customers = 150;
    cfg.tx_count_min = 5;
    cfg.tx_count_max = 20;
    cfg.seed = seed;
    run_pipeline(&generate(&cfg).unwrap(), &PreprocessConfig::default()).0
}

fn baseline() -> BaselineEval {
    BaselineEval {
        name: "Baseline".into(),
        mode: PeriodMode::PerEvent,
        tie_order: TieOrder::default(),
    }
}

#[test]
fn protocol_accounts_for_skipped_customers() {
    let test = small_bank(1);
    let b = baseline();
    let reports = run_protocol(
        &[ProtocolEntry {
            model: &b,
            lengths: vec![4, 7, 9, 14],
        }],
        &test,
    )
    .unwrap();
    assert_eq!(reports.len(), 4);
    for r in &reports {
        let eligible = test.histories().iter().filter(|(_, h)| h.len() > r.seq_len).count();
        assert_eq!(r.evaluated, eligible);
        assert_eq!(r.evaluated + r.skipped, test.profiles.len());
        assert_eq!(r.confusion.total() as usize, r.evaluated);
        assert_eq!(r.dataset, "bank_b");
    }
    assert!(reports[3].skipped > reports[0].skipped);
}

struct Leaky;

impl Evaluable for Leaky {
    fn name(&self) -> &str {
        "leaky"
    }
    fn trained_on(&self) -> Option<&str> {
        Some("bank_b")
    }
    fn predict(&self, windows: &[Window<'_>]) -> nextcat_core::Result<Vec<Category>> {
        Ok(windows.iter().map(|w| w.label).collect())
    }
}

#[test]
fn model_trained_on_the_test_bank_is_refused() {
    let test = small_bank(2);
    let err = run_protocol(&[ProtocolEntry { model: &Leaky, lengths: vec![9] }], &test).unwrap_err();
    assert!(err.to_string().contains("leaky"), "{err}");
}

#[test]
fn serial_and_parallel_protocol_agree() {
    let test = small_bank(3);
    let b = baseline();
    let entries = [ProtocolEntry {
        model: &b,
        lengths: vec![4, 9],
    }];
    par::set_parallel(false);
    let serial = run_protocol(&entries, &test);
    par::set_parallel(true);
    assert_eq!(serial.unwrap(), run_protocol(&entries, &test).unwrap());
}

fn fake_report(model: &str, k: usize, f1: f64) -> MetricsReport {
    let truths = [Category::Grocery, Category::Other, Category::Grocery];
    let mut r = compute_metrics(&truths, &truths).unwrap();
    r.model = model.into();
    r.dataset = "bank_b".into();
    r.seq_len = k;
    r.f1 = f1;
    r
}

#[test]
fn csv_report_round_trips_through_a_reader() {
    let reports = vec![fake_report("Baseline", 9, 0.4321), fake_report("LSTM", 9, 0.61)];
    let text = render_report(&reports, ReportFormat::Csv).unwrap();
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header[..7], ["model", "dataset", "seq_len", "accuracy", "precision", "recall", "f1_weighted"]);
    assert_eq!(header.len(), 11);
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][6], "0.43");
    // Clothing and gas stations have no support in these reports.
    assert_eq!(&rows[1][7], "-");
    assert_eq!(&rows[1][9], "1.000");
}

#[test]
fn markdown_bolds_the_best_row_per_length() {
    let reports = vec![
        fake_report("Baseline", 9, 0.43),
        fake_report("LSTM", 9, 0.61),
        fake_report("LSTM", 4, 0.50),
    ];
    let md = render_report(&reports, ReportFormat::Markdown).unwrap();
    assert!(md.contains("| **0.61** |"));
    assert!(md.contains("| 0.43 |"));
    // A lone row at its length is not bolded.
    assert!(md.contains("| 0.50 |"));
    assert!(md.contains("## Class-wise F1"));
    let json = render_report(&reports, ReportFormat::Json).unwrap();
    let back: Vec<MetricsReport> = serde_json::from_str(&json).unwrap();
    assert_eq!(back, reports);
    assert!(render_report(&[], ReportFormat::Csv).is_err());
}
