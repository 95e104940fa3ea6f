use nextcat_core::autodiff::{Graph, Tensor};
use nextcat_core::instructions::{build_corpus, WindowSpec};
use nextcat_core::lora_lm::tokenizer::{BOS_ID, EOS_ID, UNK_ID};
use nextcat_core::lora_lm::*;
use nextcat_core::preprocess::{run_pipeline, PreprocessConfig};
use nextcat_core::synthgen::{generate, GeneratorConfig};
use nextcat_core::{Category, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> LmConfig {
    LmConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_len: 48,
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// Adapted model whose `B` matrices are random, so the adapters matter.
fn active_adapters(model: LanguageModel, seed: u64) -> LanguageModel {
    let mut m = model.attach_lora(LoraConfig::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = m
        .store()
        .iter()
        .filter(|(_, p)| p.name.ends_with(".b") && p.name.starts_with(LORA_PREFIX))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for v in m.store_mut().value_mut(id).data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    m
}

fn word_texts(n: usize, seed: u64) -> Vec<String> {
    let words = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(4..12);
            let body: Vec<&str> = (0..len).map(|_| words[rng.random_range(0..words.len())]).collect();
            format!("Task Input: {}.", body.join(" "))
        })
        .collect()
}

#[test]
fn zero_b_leaves_logits_unchanged_on_100_inputs() {
    let vocab = 60;
    let base = LanguageModel::new(LmConfig::default(), vocab, 3).unwrap();
    let adapted = base.clone().attach_lora(LoraConfig::default(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = rng.random_range(1..40);
        let toks = random_tokens(&mut rng, vocab, len);
        let a = base.logits_of(&toks).unwrap();
        let b = adapted.logits_of(&toks).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst <= 1e-9, "max deviation {worst}");
}

#[test]
fn rank_zero_and_unknown_targets_are_rejected() {
    let base = LanguageModel::new(small(), 20, 1).unwrap();
    let zero = LoraConfig {
        rank: 0,
        ..LoraConfig::default()
    };
    assert!(matches!(base.clone().attach_lora(zero, 0), Err(Error::Config { .. })));
    let unknown = LoraConfig {
        targets: vec!["attn.q".into(), "attn.z".into()],
        ..LoraConfig::default()
    };
    let err = base.clone().attach_lora(unknown, 0).unwrap_err();
    assert!(err.to_string().contains("attn.z"), "{err}");
    let full_name = LoraConfig {
        targets: vec!["layers.1.mlp.fc2".into()],
        ..LoraConfig::default()
    };
    let m = base.attach_lora(full_name, 0).unwrap();
    assert_eq!(m.lora().unwrap().1.len(), 1);
}

#[test]
fn trainable_count_matches_enumeration() {
    let cfg = small();
    for targets in [
        vec!["attn.q", "attn.k", "attn.v", "attn.o"],
        vec!["attn.v", "mlp.fc1", "mlp.fc2"],
    ] {
        let lora = LoraConfig {
            rank: 3,
            alpha: 6.0,
            targets: targets.iter().map(|s| s.to_string()).collect(),
        };
        let m = LanguageModel::new(cfg, 30, 2).unwrap().attach_lora(lora, 0).unwrap();
        // Counting oracle: every matching (d_out, d_in) weight contributes r·(d_in + d_out).
        let per_layer: usize = targets
            .iter()
            .map(|t| match *t {
                "mlp.fc1" | "mlp.fc2" => 3 * (cfg.d_model + cfg.d_ff),
                _ => 3 * (cfg.d_model + cfg.d_model),
            })
            .sum();
        let expected = cfg.n_layers * per_layer;
        assert_eq!(m.store().trainable_scalars(), expected);
        assert!(m
            .store()
            .iter()
            .all(|(_, p)| p.requires_grad == p.name.starts_with(LORA_PREFIX)));
    }
}

#[test]
fn attention_is_causal_under_perturbation() {
    let vocab = 40;
    let m = active_adapters(LanguageModel::new(small(), vocab, 9).unwrap(), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let toks = random_tokens(&mut rng, vocab, 20);
        let base = m.logits_of(&toks).unwrap();
        for t in [0, 5, 19] {
            let mut changed = toks.clone();
            changed[t] = (changed[t] + 1) % vocab;
            let z = m.logits_of(&changed).unwrap();
            let rows = t * vocab;
            assert_eq!(&base.data()[..rows], &z.data()[..rows], "position {t} leaked backwards");
            assert_ne!(&base.data()[rows..], &z.data()[rows..]);
        }
    }
}

#[test]
fn pair_mask_covers_exactly_the_answer() {
    let x: Vec<usize> = (10..30).collect();
    let y = vec![5, 6, EOS_ID];
    let p = TrainingPair::new(&x, &y, 64).unwrap();
    assert_eq!(p.tokens[0], BOS_ID);
    assert_eq!(p.mask.iter().filter(|&&m| m).count(), 3);
    assert_eq!(&p.tokens[p.answer_start()..], &y[..]);

    // Too long: the oldest prompt tokens go, the answer stays whole.
    let p = TrainingPair::new(&x, &y, 10).unwrap();
    assert_eq!(p.tokens.len(), 10);
    assert_eq!(&p.tokens[1..7], &x[14..]);
    assert_eq!(&p.tokens[7..], &y[..]);
    assert!(TrainingPair::new(&x, &[], 10).is_err());
}

#[test]
fn prompt_positions_get_exactly_zero_gradient() {
    let vocab = 30;
    let m = active_adapters(LanguageModel::new(small(), vocab, 12).unwrap(), 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let pair = TrainingPair::new(&random_tokens(&mut rng, vocab, 15), &[7, 8, EOS_ID], 48).unwrap();
    let t = pair.tokens.len() - 1;

    // Loss over the full logits with the shifted answer mask.
    let logits = m.logits_of(&pair.tokens[..t]).unwrap();
    let mut g = Graph::new();
    let z = g.leaf(logits, true);
    let loss = g.cross_entropy_masked(z, &pair.tokens[1..], &pair.mask[1..]).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(z).unwrap();
    let start = pair.answer_start();
    assert!(grad[..(start - 1) * vocab].iter().all(|&v| v == 0.0));
    assert!(grad[(start - 1) * vocab..].iter().any(|&v| v != 0.0));

    let mut g2 = Graph::new();
    let l2 = pair_loss(&m, &mut g2, m.store(), &pair).unwrap();
    assert!((g.value(loss).item().unwrap() - g2.value(l2).item().unwrap()).abs() < 1e-12);

    let all_prompt = TrainingPair {
        tokens: pair.tokens.clone(),
        mask: vec![false; pair.tokens.len()],
    };
    let mut g3 = Graph::new();
    assert!(matches!(pair_loss(&m, &mut g3, m.store(), &all_prompt), Err(Error::Empty(_))));
}

#[test]
fn micro_gradient_checks_pass() {
    for seed in [1, 2] {
        for c in gradient_checks(seed).unwrap() {
            assert!(c.passed(), "{}: {}", c.name, c.max_rel_error);
            assert!(c.checked > 0);
        }
    }
}

#[test]
fn alternating_corpus_is_learned_exactly() {
    let seqs: Vec<Vec<usize>> = (0..220)
        .map(|i| (0..48).map(|j| if (i + j) % 2 == 0 { 4 } else { 5 }).collect())
        .collect();
    let cfg = LmConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_len: 48,
    };
    let mut m = LanguageModel::new(cfg, 6, 3).unwrap();
    let report = pretrain_tokens(
        &mut m,
        &seqs,
        &PretrainConfig {
            epochs: 2,
            lr: 0.01,
            ..PretrainConfig::default()
        },
    )
    .unwrap();
    assert!(report.heldout_loss < report.uniform_bound);
    let probe: Vec<usize> = (0..40).map(|j| if j % 2 == 0 { 5 } else { 4 }).collect();
    let z = m.logits_of(&probe).unwrap();
    for (i, row) in z.data().chunks(6).enumerate().take(probe.len() - 1) {
        let best = (0..6).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(best, probe[i + 1], "position {i}");
    }
}

#[test]
fn pretraining_is_seed_deterministic_and_beats_uniform() {
    let texts = word_texts(900, 1);
    let tok = Tokenizer::build(texts.iter().map(String::as_str), 1, 100);
    let run = || {
        let mut m = LanguageModel::new(small(), tok.len(), 4).unwrap();
        let r = pretrain(
            &mut m,
            &tok,
            &texts,
            &PretrainConfig {
                epochs: 1,
                ..PretrainConfig::default()
            },
        )
        .unwrap();
        (m.base_bytes(), r)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert!(ra.heldout_loss < ra.uniform_bound, "{ra:?}");
    assert!(ra.train_tokens >= MIN_PRETRAIN_TOKENS);
}

#[test]
fn tiny_corpus_is_rejected() {
    let texts = word_texts(5, 2);
    let tok = Tokenizer::build(texts.iter().map(String::as_str), 1, 100);
    let mut m = LanguageModel::new(small(), tok.len(), 4).unwrap();
    assert!(pretrain(&mut m, &tok, &texts, &PretrainConfig::default()).is_err());
}

#[test]
fn fine_tuning_leaves_base_bytes_identical() {
    let texts = word_texts(60, 3);
    let tok = Tokenizer::build(texts.iter().map(String::as_str), 1, 100);
    let base = LanguageModel::new(small(), tok.len(), 5).unwrap();
    let before = base.base_bytes();
    let pairs: Vec<TrainingPair> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| TrainingPair::from_text(&tok, t, Category::ALL[i % 4], 48).unwrap())
        .collect();
    let mut m = base.clone().attach_lora(LoraConfig::default(), 6).unwrap();
    let at_init = mean_pair_loss(&m, &pairs).unwrap();
    assert_eq!(at_init, mean_pair_loss(&base, &pairs).unwrap());
    let r = finetune(
        &mut m,
        &pairs,
        &FinetuneConfig {
            epochs: 2,
            ..FinetuneConfig::default()
        },
    )
    .unwrap();
    assert_eq!(r.initial_loss, mean_pair_loss(&base, &pairs[..pairs.len().min(256)]).unwrap());
    assert_eq!(m.base_bytes(), before);
    let b_moved = m
        .store()
        .iter()
        .filter(|(_, p)| p.name.starts_with(LORA_PREFIX) && p.name.ends_with(".b"))
        .any(|(_, p)| p.value.data().iter().any(|&v| v != 0.0));
    assert!(b_moved);
}

#[test]
fn constant_label_corpus_predicts_grocery() {
    let texts = word_texts(1200, 4);
    let tok = Tokenizer::build(texts.iter().map(String::as_str), 1, 100);
    let mut base = LanguageModel::new(small(), tok.len(), 7).unwrap();
    pretrain(
        &mut base,
        &tok,
        &texts[..1000],
        &PretrainConfig {
            epochs: 1,
            ..PretrainConfig::default()
        },
    )
    .unwrap();
    let pairs: Vec<TrainingPair> = texts[..200]
        .iter()
        .map(|t| TrainingPair::from_text(&tok, t, Category::Grocery, 48).unwrap())
        .collect();
    let mut m = base.attach_lora(LoraConfig::default(), 8).unwrap();
    finetune(
        &mut m,
        &pairs,
        &FinetuneConfig {
            epochs: 3,
            lr: 0.01,
            ..FinetuneConfig::default()
        },
    )
    .unwrap();
    let scorer = Scorer::new(&m, &tok, true);
    for t in &texts[1000..1100] {
        let s = scorer.score(t);
        assert_eq!(s.category, Category::Grocery, "{t}: {:?}", s.scores);
    }
}

#[test]
fn fast_scorer_matches_graph_and_reports_its_argmax() {
    let texts = word_texts(40, 5);
    let tok = Tokenizer::build(texts.iter().map(String::as_str), 1, 100);
    let m = active_adapters(LanguageModel::new(small(), tok.len(), 15).unwrap(), 16);
    for normalize in [true, false] {
        let scorer = Scorer::new(&m, &tok, normalize);
        for t in &texts {
            let fast = scorer.score(t);
            let slow = label_scores_graph(&m, &tok, t, normalize).unwrap();
            for (a, b) in fast.scores.iter().zip(slow.scores) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
            assert_eq!(fast.category, slow.category);
            let best = fast.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = fast.scores.iter().position(|&s| s == best).unwrap();
            assert_eq!(fast.category, Category::ALL[first]);
        }
    }
}

#[test]
fn long_prompts_are_trimmed_for_scoring() {
    let texts: Vec<String> = word_texts(40, 6).into_iter().map(|t| t.repeat(12)).collect();
    let tok = Tokenizer::build(texts.iter().map(String::as_str), 1, 100);
    let m = active_adapters(LanguageModel::new(small(), tok.len(), 17).unwrap(), 18);
    let scorer = Scorer::new(&m, &tok, true);
    for t in texts.iter().take(5) {
        assert!(tok.encode(t).len() > 48);
        let fast = scorer.score(t);
        let slow = label_scores_graph(&m, &tok, t, true).unwrap();
        for (a, b) in fast.scores.iter().zip(slow.scores) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn adapters_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let texts = word_texts(20, 7);
    let tok = Tokenizer::build(texts.iter().map(String::as_str), 1, 100);
    let base = LanguageModel::new(small(), tok.len(), 19).unwrap();
    let m = active_adapters(base.clone(), 20);
    base.save_base(&dir.path().join("base.ckpt")).unwrap();
    m.save_base(&dir.path().join("base2.ckpt")).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("base.ckpt")).unwrap(),
        std::fs::read(dir.path().join("base2.ckpt")).unwrap()
    );
    m.save_adapters(&dir.path().join("adapter.json")).unwrap();
    tok.save_json(&dir.path().join("tok.json")).unwrap();

    let tok2 = Tokenizer::load_json(&dir.path().join("tok.json")).unwrap();
    let mut fresh = LanguageModel::new(small(), tok2.len(), 99).unwrap();
    fresh.load_base(&dir.path().join("base.ckpt")).unwrap();
    let loaded = fresh.load_adapters(&dir.path().join("adapter.json")).unwrap();
    for t in &texts {
        assert_eq!(predict(&m, &tok, t), predict(&loaded, &tok2, t));
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("adapter.json")).unwrap()).unwrap();
    let names: Vec<&str> = json["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t[0].as_str().unwrap())
        .collect();
    assert!(names.iter().all(|n| n.starts_with(LORA_PREFIX)));
    assert_eq!(names.len(), 2 * 4 * small().n_layers);
}

#[test]
fn non_finite_weights_abort_training() {
    let texts = word_texts(900, 8);
    let tok = Tokenizer::build(texts.iter().map(String::as_str), 1, 100);
    let mut m = LanguageModel::new(small(), tok.len(), 21).unwrap();
    let id = m.store().id("head").unwrap();
    m.store_mut().value_mut(id).data_mut()[0] = f64::NAN;
    let r = pretrain(&mut m, &tok, &texts, &PretrainConfig::default());
    assert!(matches!(r, Err(Error::Diverged(_))), "{r:?}");
}

#[test]
fn label_sentences_never_hit_unk() {
    let tok = Tokenizer::build(["unrelated words only"], 1, 10);
    for c in Category::ALL {
        let ids = answer_tokens(&tok, c);
        assert!(!ids.contains(&UNK_ID));
        assert_eq!(*ids.last().unwrap(), EOS_ID);
        assert_eq!(tok.decode(&ids[..ids.len() - 1]), c.label_sentence());
    }
}

#[test]
fn planted_signal_fine_tuning_cuts_answer_loss() {
    let data = generate(&GeneratorConfig {
        n_customers: 520,
        ..GeneratorConfig::bank_a()
    })
    .unwrap();
    let (clean, _) = run_pipeline(&data, &PreprocessConfig::default());
    let corpus = build_corpus(&clean, WindowSpec::new(9)).unwrap();
    let samples = &corpus.samples[..500];
    let tok = Tokenizer::build(samples.iter().map(|s| s.instruction_input.as_str()), 2, 800);
    let cfg = LmConfig {
        max_len: 256,
        ..LmConfig::default()
    };
    let base = LanguageModel::new(cfg, tok.len(), 22).unwrap();
    let pairs: Vec<TrainingPair> = samples
        .iter()
        .map(|s| TrainingPair::from_text(&tok, &s.instruction_input, s.label, 256).unwrap())
        .collect();
    let mut m = base.attach_lora(LoraConfig::default(), 23).unwrap();
    let r = finetune(
        &mut m,
        &pairs,
        &FinetuneConfig {
            epochs: 1,
            eval_subset: 128,
            ..FinetuneConfig::default()
        },
    )
    .unwrap();
    assert!(r.final_loss < 0.9 * r.initial_loss, "{r:?}");
}

#[test]
fn merged_weights_fold_the_scaled_update() {
    let m = active_adapters(LanguageModel::new(small(), 25, 24).unwrap(), 25);
    let merged = m.merged();
    assert!(merged.lora().is_none());
    let (cfg, adapters) = m.lora().unwrap();
    let ad = &adapters[0];
    let w = m.store().value(ad.weight);
    let a = m.store().value(ad.a);
    let b = m.store().value(ad.b);
    let id = merged.store().id(&m.store().get(ad.weight).name).unwrap();
    let mw: &Tensor = merged.store().value(id);
    let (d_out, d_in) = w.dims2().unwrap();
    let scale = cfg.alpha / cfg.rank as f64;
    for i in 0..d_out {
        for j in 0..d_in {
            let delta: f64 = (0..cfg.rank).map(|r| b.data()[i * cfg.rank + r] * a.data()[r * d_in + j]).sum();
            let expect = w.data()[i * d_in + j] + scale * delta;
            assert!((mw.data()[i * d_in + j] - expect).abs() < 1e-12);
        }
    }
}
