//! Constrained label scoring.
//!
//! Each candidate answer sentence (plus EOS) is scored by its mean token
//! log-probability under teacher forcing. The fast path folds adapters into
//! the base weights and reuses the prompt's keys and values for all four
//! candidates; `label_scores_graph` is the slow reference built on the
//! autodiff graph.

use serde::{Deserialize, Serialize};

use super::model::{LanguageModel, LayerRefs};
use super::tokenizer::{Tokenizer, BOS_ID};
use super::{answer_tokens, prompt};
use crate::autodiff::{gemm, LAYER_NORM_EPS};
use crate::domain::{Category, NUM_CLASSES};
use crate::error::Result;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub category: Category,
    /// Per-category score in `Category::ALL` order.
    pub scores: [f64; NUM_CLASSES],
}

impl LabelScores {
    fn from_scores(scores: [f64; NUM_CLASSES]) -> LabelScores {
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        LabelScores {
            category: Category::from_index(best).expect("class index"),
            scores,
        }
    }
}

/// `BOS` plus the prompt, trimmed from the left so the longest candidate
/// still fits.
fn scoring_prefix(tok: &Tokenizer, input: &str, answers: &[Vec<usize>], max_len: usize) -> Vec<usize> {
    let longest = answers.iter().map(Vec::len).max().unwrap_or(0);
    let x = tok.encode(&prompt(input));
    let keep = x.len().min(max_len.saturating_sub(1 + longest));
    let mut p = vec![BOS_ID];
    p.extend_from_slice(&x[x.len() - keep..]);
    p
}

fn answers(tok: &Tokenizer) -> Vec<Vec<usize>> {
    Category::ALL.iter().map(|&c| answer_tokens(tok, c)).collect()
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

fn finish(sum: f64, len: usize, normalize: bool) -> f64 {
    if normalize {
        sum / len as f64
    } else {
        sum
    }
}

/// Reference scorer: one full graph forward per candidate.
pub fn label_scores_graph(model: &LanguageModel, tok: &Tokenizer, input: &str, normalize: bool) -> Result<LabelScores> {
    let answers = answers(tok);
    let prefix = scoring_prefix(tok, input, &answers, model.config.max_len);
    let mut scores = [0.0; NUM_CLASSES];
    for (c, y) in answers.iter().enumerate() {
        let mut seq = prefix.clone();
        seq.extend_from_slice(y);
        let logits = model.logits_of(&seq)?;
        let v = model.vocab_size;
        let sum: f64 = (0..y.len())
            .map(|j| {
                let row = prefix.len() - 1 + j;
                log_softmax_at(&logits.data()[row * v..(row + 1) * v], y[j])
            })
            .sum();
        scores[c] = finish(sum, y.len(), normalize);
    }
    Ok(LabelScores::from_scores(scores))
}

/// Keys and values of every processed position, per layer.
#[derive(Clone)]
struct Cache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    len: usize,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = g.len();
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(n).zip(out.chunks_mut(n)) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..n {
            o[j] = (row[j] - mean) * inv * g[j] + b[j];
        }
    }
    out
}

/// `x · Wᵀ (+ bias)` for `rows × d_in` input and `d_out × d_in` weight.
fn linear(x: &[f64], rows: usize, w: &[f64], bias: Option<&[f64]>, d_out: usize) -> Vec<f64> {
    let d_in = w.len() / d_out;
    let mut out = vec![0.0; rows * d_out];
    gemm(rows, d_in, d_out, 1.0, x, false, w, true, 0.0, &mut out);
    if let Some(b) = bias {
        for r in out.chunks_mut(d_out) {
            for (o, bv) in r.iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
    out
}

/// Scores instruction inputs with adapters merged into the base weights.
pub struct Scorer {
    model: LanguageModel,
    answers: Vec<Vec<usize>>,
    tok: Tokenizer,
    pub normalize: bool,
}

impl Scorer {
    pub fn new(model: &LanguageModel, tok: &Tokenizer, normalize: bool) -> Scorer {
        Scorer {
            model: model.merged(),
            answers: answers(tok),
            tok: tok.clone(),
            normalize,
        }
    }

    fn empty_cache(&self) -> Cache {
        let n = self.model.config.n_layers;
        Cache {
            k: vec![Vec::new(); n],
            v: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Runs `tokens` after whatever the cache already holds; returns their
    /// final-normalized hidden rows.
    fn extend(&self, cache: &mut Cache, tokens: &[usize]) -> Vec<f64> {
        let cfg = &self.model.config;
        let (d, heads) = (cfg.d_model, cfg.n_heads);
        let dh = d / heads;
        let n = tokens.len();
        let p0 = cache.len;
        let view = self.model.ids();
        let (tok, pos) = (view.tok(), view.pos());
        let mut x = vec![0.0; n * d];
        for (i, &t) in tokens.iter().enumerate() {
            for j in 0..d {
                x[i * d + j] = tok[t * d + j] + pos[(p0 + i) * d + j];
            }
        }
        let scale = 1.0 / (dh as f64).sqrt();
        for (li, l) in view.layers().iter().enumerate() {
            let LayerRefs { ln1, q, k, v, o, ln2, fc1, fc2 } = l;
            let h = layer_norm(&x, ln1.0, ln1.1);
            let qs = linear(&h, n, q, None, d);
            cache.k[li].extend(linear(&h, n, k, None, d));
            cache.v[li].extend(linear(&h, n, v, None, d));
            let (ks, vs) = (&cache.k[li], &cache.v[li]);
            let mut att = vec![0.0; n * d];
            let mut w = Vec::with_capacity(p0 + n);
            for i in 0..n {
                let visible = p0 + i + 1;
                for hd in 0..heads {
                    let qi = &qs[i * d + hd * dh..i * d + (hd + 1) * dh];
                    w.clear();
                    w.extend((0..visible).map(|j| {
                        let kj = &ks[j * d + hd * dh..j * d + (hd + 1) * dh];
                        qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                    }));
                    let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for s in w.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let out = &mut att[i * d + hd * dh..i * d + (hd + 1) * dh];
                    for (j, s) in w.iter().enumerate() {
                        let p = s / total;
                        let vj = &vs[j * d + hd * dh..j * d + (hd + 1) * dh];
                        for (a, b) in out.iter_mut().zip(vj) {
                            *a += p * b;
                        }
                    }
                }
            }
            for (a, b) in x.iter_mut().zip(linear(&att, n, o, None, d)) {
                *a += b;
            }
            let h = layer_norm(&x, ln2.0, ln2.1);
            let mut f = linear(&h, n, fc1.0, Some(fc1.1), cfg.d_ff);
            f.iter_mut().for_each(|v| *v = v.max(0.0));
            for (a, b) in x.iter_mut().zip(linear(&f, n, fc2.0, Some(fc2.1), d)) {
                *a += b;
            }
        }
        cache.len += n;
        let (g, b) = view.ln_f();
        layer_norm(&x, g, b)
    }

    fn head(&self, hidden: &[f64]) -> Vec<f64> {
        let rows = hidden.len() / self.model.config.d_model;
        linear(hidden, rows, self.model.ids().head(), None, self.model.vocab_size)
    }

    pub fn score(&self, input: &str) -> LabelScores {
        let d = self.model.config.d_model;
        let v = self.model.vocab_size;
        let prefix = scoring_prefix(&self.tok, input, &self.answers, self.model.config.max_len);
        let mut cache = self.empty_cache();
        let hidden = self.extend(&mut cache, &prefix);
        let last = self.head(&hidden[(prefix.len() - 1) * d..]);
        let mut scores = [0.0; NUM_CLASSES];
        for (c, y) in self.answers.iter().enumerate() {
            let mut sum = log_softmax_at(&last, y[0]);
            if y.len() > 1 {
                let mut branch = cache.clone();
                let h = self.extend(&mut branch, &y[..y.len() - 1]);
                let logits = self.head(&h);
                for j in 1..y.len() {
                    sum += log_softmax_at(&logits[(j - 1) * v..j * v], y[j]);
                }
            }
            scores[c] = finish(sum, y.len(), self.normalize);
        }
        LabelScores::from_scores(scores)
    }
}

/// Scores one instruction input.
pub fn predict(model: &LanguageModel, tok: &Tokenizer, input: &str) -> LabelScores {
    Scorer::new(model, tok, true).score(input)
}

/// Scores many inputs in parallel, preserving order.
pub fn predict_batch(scorer: &Scorer, inputs: &[&str]) -> Vec<LabelScores> {
    par::map(inputs, |s| scorer.score(s))
}
