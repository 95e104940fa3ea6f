use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{LanguageModel, LmConfig, LoraConfig};
use super::tokenizer::{Tokenizer, BOS_ID, EOS_ID};
use super::{TrainingPair, OUTPUT_CUE};
use crate::autodiff::gradcheck::{self, GradCheck};
use crate::autodiff::{optim, GradSet, Graph, OptimizerKind, ParamStore, Var};
use crate::domain::Category;
use crate::error::{Error, Result};
use crate::par;

/// Fewest tokens accepted for pre-training.
pub const MIN_PRETRAIN_TOKENS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Share of sequences held out to measure next-token loss.
    pub heldout_fraction: f64,
    pub grad_chunk: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 4,
            batch_size: 16,
            lr: 3e-3,
            clip_norm: 1.0,
            heldout_fraction: 0.05,
            grad_chunk: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub heldout_loss: f64,
    /// `ln V`, the loss of a uniform predictor.
    pub uniform_bound: f64,
    pub train_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Pairs (taken from the front) on which initial and final loss are
    /// measured.
    pub eval_subset: usize,
    pub grad_chunk: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 6,
            batch_size: 16,
            lr: 3e-3,
            clip_norm: 1.0,
            eval_subset: 256,
            grad_chunk: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Next-token cross-entropy over a whole sequence.
pub fn sequence_loss(model: &LanguageModel, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
    if tokens.len() < 2 {
        return Err(Error::Empty("sequence needs at least two tokens".into()));
    }
    let t = tokens.len() - 1;
    let h = model.hidden(g, store, &tokens[..t])?;
    let z = model.logits(g, store, h, 0, t)?;
    g.cross_entropy(z, &tokens[1..])
}

/// Mean cross-entropy of the answer tokens given everything before them.
/// Only the rows that predict answer tokens are projected to the
/// vocabulary, so prompt positions contribute nothing to the loss.
pub fn pair_loss(model: &LanguageModel, g: &mut Graph, store: &ParamStore, pair: &TrainingPair) -> Result<Var> {
    if pair.mask.len() != pair.tokens.len() {
        return Err(Error::shape("pair mask", &[pair.mask.len()], &[pair.tokens.len()]));
    }
    if !pair.mask.iter().any(|&m| m) {
        return Err(Error::Empty("training pair has no masked answer tokens".into()));
    }
    let start = pair.answer_start();
    if start == 0 || pair.mask[start..].iter().any(|&m| !m) {
        return Err(Error::Invalid("answer mask must be one trailing block after BOS".into()));
    }
    let t = pair.tokens.len() - 1;
    let h = model.hidden(g, store, &pair.tokens[..t])?;
    let z = model.logits(g, store, h, start - 1, pair.answer_len())?;
    g.cross_entropy(z, &pair.tokens[start..])
}

fn check_finite(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("non-finite loss during {what}")))
    }
}

type LossFn<'a, T> = dyn Fn(&mut Graph, &ParamStore, &T) -> Result<Var> + Sync + 'a;

/// Sum of per-item losses and of their gradients over one slice.
fn slice_grads<T: Sync>(store: &ParamStore, items: &[&T], loss: &LossFn<'_, T>) -> Result<(f64, GradSet)> {
    let mut total = 0.0;
    let mut acc: Option<GradSet> = None;
    for item in items {
        let mut g = Graph::new();
        let l = loss(&mut g, store, item)?;
        g.backward(l)?;
        total += g.value(l).data()[0];
        let grads = g.param_grads();
        match acc.as_mut() {
            Some(a) => a.add_assign(&grads),
            None => acc = Some(grads),
        }
    }
    Ok((total, acc.unwrap_or(GradSet { entries: Vec::new() })))
}

fn mean_loss<T: Sync>(store: &ParamStore, items: &[T], loss: &LossFn<'_, T>) -> Result<f64> {
    let parts = par::map(items, |item| {
        let mut g = Graph::new();
        let l = loss(&mut g, store, item)?;
        Ok(g.value(l).data()[0])
    });
    let total = parts.into_iter().sum::<Result<f64>>()?;
    Ok(total / items.len() as f64)
}

struct Schedule {
    epochs: usize,
    batch_size: usize,
    lr: f64,
    clip_norm: f64,
    grad_chunk: usize,
    seed: u64,
}

/// Mini-batch Adam over `items`; returns the mean loss per epoch.
fn run_epochs<T: Sync>(
    model: &mut LanguageModel,
    items: &[T],
    s: &Schedule,
    what: &str,
    loss: &LossFn<'_, T>,
) -> Result<Vec<f64>> {
    if s.batch_size == 0 {
        return Err(Error::config(format!("{what}.batch_size"), "must be positive"));
    }
    let mut opt = optim::build(OptimizerKind::Adam, s.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut losses = Vec::with_capacity(s.epochs);
    for epoch in 0..s.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(s.batch_size) {
            let refs: Vec<&T> = batch.iter().map(|&i| &items[i]).collect();
            let store = model.store();
            let parts = par::map_chunks(&refs, s.grad_chunk, |chunk| slice_grads(store, chunk, loss));
            let store = model.store_mut();
            store.zero_grad();
            let mut batch_loss = 0.0;
            for part in parts {
                let (l, grads) = part?;
                batch_loss += l;
                store.accumulate(&grads);
            }
            check_finite(batch_loss, what)?;
            store.scale_grads(1.0 / refs.len() as f64);
            if s.clip_norm > 0.0 {
                store.clip_grad_norm(s.clip_norm);
            }
            opt.step(store);
            total += batch_loss;
        }
        let mean = total / items.len() as f64;
        log::info!("{what} epoch {}: loss {mean:.4}", epoch + 1);
        losses.push(mean);
    }
    Ok(losses)
}

/// Texts for pre-training: instruction inputs with their answers withheld,
/// plus `filler` templated lines pairing the output cue with a random
/// category sentence.
pub fn pretraining_texts(inputs: &[&str], filler: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<String> = inputs.iter().map(|s| s.to_string()).collect();
    for _ in 0..filler {
        let c = Category::ALL[rng.random_range(0..Category::ALL.len())];
        out.push(format!("{OUTPUT_CUE} {}", c.label_sentence()));
    }
    out
}

/// Trains every base parameter on next-token prediction. Sequences are
/// wrapped in `BOS … EOS` and cut to the model's context from the left.
pub fn pretrain(model: &mut LanguageModel, tok: &Tokenizer, texts: &[String], config: &PretrainConfig) -> Result<PretrainReport> {
    if model.lora().is_some() {
        return Err(Error::Invalid("pre-training expects a model without adapters".into()));
    }
    let max_len = model.config.max_len + 1;
    let seqs: Vec<Vec<usize>> = texts
        .iter()
        .map(|t| {
            let mut s = vec![BOS_ID];
            s.extend(tok.encode(t));
            s.push(EOS_ID);
            if s.len() > max_len {
                s.drain(1..1 + s.len() - max_len);
            }
            s
        })
        .collect();
    pretrain_tokens(model, &seqs, config)
}

/// [`pretrain`] over already-tokenized sequences.
pub fn pretrain_tokens(model: &mut LanguageModel, seqs: &[Vec<usize>], config: &PretrainConfig) -> Result<PretrainReport> {
    let total: usize = seqs.iter().map(Vec::len).sum();
    if total < MIN_PRETRAIN_TOKENS {
        return Err(Error::Invalid(format!(
            "pre-training corpus has {total} tokens; at least {MIN_PRETRAIN_TOKENS} are required"
        )));
    }
    if !(0.0..1.0).contains(&config.heldout_fraction) {
        return Err(Error::config("pretrain.heldout_fraction", "must be in [0, 1)"));
    }
    let mut idx: Vec<usize> = (0..seqs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed));
    let n_held = ((seqs.len() as f64 * config.heldout_fraction).ceil() as usize).min(seqs.len() - 1);
    let (held, train) = idx.split_at(n_held);
    let train: Vec<&[usize]> = train.iter().map(|&i| seqs[i].as_slice()).collect();
    let held: Vec<&[usize]> = held.iter().map(|&i| seqs[i].as_slice()).collect();

    let snapshot = model.clone();
    let loss = |g: &mut Graph, s: &ParamStore, t: &&[usize]| sequence_loss(&snapshot, g, s, t);
    let schedule = Schedule {
        epochs: config.epochs,
        batch_size: config.batch_size,
        lr: config.lr,
        clip_norm: config.clip_norm,
        grad_chunk: config.grad_chunk,
        seed: config.seed,
    };
    let epoch_losses = run_epochs(model, &train, &schedule, "pretrain", &loss)?;
    let heldout_loss = if held.is_empty() {
        f64::NAN
    } else {
        mean_loss(model.store(), &held, &loss)?
    };
    Ok(PretrainReport {
        epoch_losses,
        heldout_loss,
        uniform_bound: (model.vocab_size as f64).ln(),
        train_tokens: train.iter().map(|s| s.len()).sum(),
    })
}

/// Mean answer loss of `pairs` under the model's current weights.
pub fn mean_pair_loss(model: &LanguageModel, pairs: &[TrainingPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("no pairs to evaluate".into()));
    }
    mean_loss(model.store(), pairs, &|g, s, p| pair_loss(model, g, s, p))
}

/// Trains only the adapter matrices on answer-token cross-entropy.
pub fn finetune(model: &mut LanguageModel, pairs: &[TrainingPair], config: &FinetuneConfig) -> Result<FinetuneReport> {
    if model.lora().is_none() {
        return Err(Error::Invalid("fine-tuning needs attached adapters".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Empty("fine-tuning pairs".into()));
    }
    let eval = &pairs[..pairs.len().min(config.eval_subset.max(1))];
    let initial_loss = mean_pair_loss(model, eval)?;
    check_finite(initial_loss, "fine-tuning")?;
    let snapshot = model.clone();
    let loss = |g: &mut Graph, s: &ParamStore, p: &TrainingPair| pair_loss(&snapshot, g, s, p);
    let schedule = Schedule {
        epochs: config.epochs,
        batch_size: config.batch_size,
        lr: config.lr,
        clip_norm: config.clip_norm,
        grad_chunk: config.grad_chunk,
        seed: config.seed,
    };
    let epoch_losses = run_epochs(model, pairs, &schedule, "finetune", &loss)?;
    let final_loss = mean_pair_loss(model, eval)?;
    check_finite(final_loss, "fine-tuning")?;
    Ok(FinetuneReport {
        epoch_losses,
        initial_loss,
        final_loss,
    })
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

/// Finite-difference checks of a micro transformer (d=8, one block, two
/// heads): every base parameter on a sequence loss, then the adapter
/// matrices (rank 2, non-zero `B`) on an answer-only loss.
pub fn gradient_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LmConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 12,
        max_len: 8,
    };
    let vocab = 9;
    let mut base = LanguageModel::new(cfg, vocab, seed)?;
    randomize(base.store_mut(), &mut rng, 0.8);
    let seq: Vec<usize> = (0..7).map(|_| rng.random_range(0..vocab)).collect();
    let mut out = vec![gradcheck::check_params("lm micro base", base.store(), |g, s| {
        sequence_loss(&base, g, s, &seq)
    })?];

    let lora = LoraConfig {
        rank: 2,
        alpha: 3.0,
        targets: vec!["attn.q".into(), "attn.v".into(), "mlp.fc1".into()],
    };
    let mut adapted = base.clone().attach_lora(lora, seed + 1)?;
    let ids: Vec<_> = adapted
        .store()
        .iter()
        .filter(|(_, p)| p.requires_grad)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for v in adapted.store_mut().value_mut(id).data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    let pair = TrainingPair::new(&seq[..4], &seq[4..6], cfg.max_len)?;
    out.push(gradcheck::check_params("lm micro lora", adapted.store(), |g, s| {
        pair_loss(&adapted, g, s, &pair)
    })?);
    Ok(out)
}
