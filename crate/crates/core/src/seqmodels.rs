//! LSTM and CNN classifiers over encoded category sequences.
//!
//! Windows are left-padded to [`L_MAX`] with an explicit PAD symbol, so a
//! model trained on one history length accepts any length up to `L_MAX`.
//! Both models see categories only; demographics and amounts are not inputs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::{self, GradCheck};
use crate::autodiff::{checkpoint, init, optim, GradSet, Graph, OptimizerKind, ParamId, ParamStore, Tensor, Var};
use crate::domain::{Category, Dataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::instructions::WindowSpec;
use crate::par;

pub const L_MAX: usize = 14;
/// Four categories plus PAD.
pub const SYMBOLS: usize = NUM_CLASSES + 1;
pub const PAD: usize = NUM_CLASSES;

/// Left-padded symbol sequence; row `t` of the one-hot matrix is `symbols[t]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSequence {
    symbols: [usize; L_MAX],
    len: usize,
}

impl EncodedSequence {
    pub fn symbols(&self) -> &[usize; L_MAX] {
        &self.symbols
    }

    /// True (unpadded) length.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `L_MAX × SYMBOLS` one-hot matrix.
    pub fn one_hot(&self) -> Tensor {
        let mut data = vec![0.0; L_MAX * SYMBOLS];
        for (t, &s) in self.symbols.iter().enumerate() {
            data[t * SYMBOLS + s] = 1.0;
        }
        Tensor::new(&[L_MAX, SYMBOLS], data).expect("fixed shape")
    }
}

pub fn encode(window: &[Category]) -> Result<EncodedSequence> {
    if window.is_empty() || window.len() > L_MAX {
        return Err(Error::Invalid(format!(
            "sequence length {} outside 1..={L_MAX}",
            window.len()
        )));
    }
    let mut symbols = [PAD; L_MAX];
    let offset = L_MAX - window.len();
    for (i, c) in window.iter().enumerate() {
        symbols[offset + i] = c.index();
    }
    Ok(EncodedSequence {
        symbols,
        len: window.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub customer_id: u64,
    pub sequence: EncodedSequence,
    pub label: Category,
}

/// One example per customer with at least `seq_len + 1` transactions, plus
/// the number of customers skipped for short history.
pub fn examples(dataset: &Dataset, spec: WindowSpec) -> Result<(Vec<Example>, usize)> {
    if spec.seq_len > L_MAX {
        return Err(Error::config("seq_len", format!("must be at most {L_MAX}")));
    }
    let mut out = Vec::new();
    let mut skipped = 0;
    for (profile, history) in dataset.histories() {
        let Some((window, target)) = spec.select(history) else {
            skipped += 1;
            continue;
        };
        let class = |t: &crate::domain::Transaction| {
            t.category
                .class()
                .ok_or_else(|| Error::Invalid(format!("unmapped category `{}`", t.category.as_code())))
        };
        let cats = window.iter().map(class).collect::<Result<Vec<_>>>()?;
        out.push(Example {
            customer_id: profile.customer_id,
            sequence: encode(&cats)?,
            label: class(target)?,
        });
    }
    Ok((out, skipped))
}

/// Time-major batch input: one `B × SYMBOLS` one-hot matrix per position.
fn step_inputs(batch: &[&EncodedSequence]) -> Vec<Tensor> {
    (0..L_MAX)
        .map(|t| {
            let mut data = vec![0.0; batch.len() * SYMBOLS];
            for (b, s) in batch.iter().enumerate() {
                data[b * SYMBOLS + s.symbols[t]] = 1.0;
            }
            Tensor::new(&[batch.len(), SYMBOLS], data).expect("fixed shape")
        })
        .collect()
}

/// A classifier producing `B × 4` logits for a batch of sequences.
pub trait SeqModel: Sync {
    fn name(&self) -> &'static str;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &[&EncodedSequence]) -> Result<Var>;

    fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(self.store(), path, |_| true)
    }

    fn load(&mut self, path: &Path) -> Result<()> {
        let tensors = checkpoint::load(path)?;
        checkpoint::restore(self.store_mut(), tensors)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmConfig {
    pub hidden: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig { hidden: 128 }
    }
}

/// Single-layer LSTM over the padded sequence; the last hidden state feeds a
/// dense layer to four logits. Gates are computed jointly as
/// `[x_t, h_{t-1}] · Wᵀ + b`, split into input, forget, cell and output.
pub struct Lstm {
    pub config: LstmConfig,
    store: ParamStore,
    w: ParamId,
    b: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

impl Lstm {
    pub fn new(config: LstmConfig, seed: u64) -> Result<Lstm> {
        let h = config.hidden;
        if h == 0 {
            return Err(Error::config("lstm.hidden", "must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = store.add("lstm.w", init::dense(4 * h, SYMBOLS + h, &mut rng))?;
        let b = store.add("lstm.b", Tensor::zeros(&[4 * h]))?;
        let w_out = store.add("lstm.out.w", init::dense(NUM_CLASSES, h, &mut rng))?;
        let b_out = store.add("lstm.out.b", Tensor::zeros(&[NUM_CLASSES]))?;
        Ok(Lstm {
            config,
            store,
            w,
            b,
            w_out,
            b_out,
        })
    }
}

impl SeqModel for Lstm {
    fn name(&self) -> &'static str {
        "LSTM"
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &[&EncodedSequence]) -> Result<Var> {
        let hd = self.config.hidden;
        let n = batch.len();
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let mut h = g.input(Tensor::zeros(&[n, hd]));
        let mut c = g.input(Tensor::zeros(&[n, hd]));
        for x in step_inputs(batch) {
            let x = g.input(x);
            let xh = g.concat(&[x, h], 1)?;
            let z = g.matmul_bt(xh, w)?;
            let z = g.add_row(z, b)?;
            let i = g.slice(z, 1, 0, hd)?;
            let i = g.sigmoid(i);
            let f = g.slice(z, 1, hd, hd)?;
            let f = g.sigmoid(f);
            let cand = g.slice(z, 1, 2 * hd, hd)?;
            let cand = g.tanh(cand);
            let o = g.slice(z, 1, 3 * hd, hd)?;
            let o = g.sigmoid(o);
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            c = g.add(keep, write)?;
            let squashed = g.tanh(c);
            h = g.mul(o, squashed)?;
        }
        let w_out = g.param(store, self.w_out);
        let b_out = g.param(store, self.b_out);
        let z = g.matmul_bt(h, w_out)?;
        g.add_row(z, b_out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolPlacement {
    /// conv → conv → pool (default).
    AfterConvs,
    /// conv → pool → conv → pool.
    AfterEach,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub filters: [usize; 2],
    /// Kernel height and width, shared by both layers.
    pub kernel: [usize; 2],
    pub pool: PoolPlacement,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            filters: [8, 16],
            kernel: [3, 3],
            pool: PoolPlacement::AfterConvs,
        }
    }
}

impl CnnConfig {
    /// Spatial size of the final pooled map.
    pub fn output_grid(&self) -> Result<(usize, usize)> {
        let [kh, kw] = self.kernel;
        let conv = |(h, w): (usize, usize)| -> Result<(usize, usize)> {
            if kh == 0 || kw == 0 || kh > h || kw > w {
                return Err(Error::config(
                    "cnn.kernel",
                    format!("{kh}x{kw} kernel does not fit a {h}x{w} feature map"),
                ));
            }
            Ok((h - kh + 1, w - kw + 1))
        };
        let pool = |(h, w): (usize, usize)| (h.div_ceil(2), w.div_ceil(2));
        let grid = conv((L_MAX, SYMBOLS))?;
        let grid = match self.pool {
            PoolPlacement::AfterConvs => pool(conv(grid)?),
            PoolPlacement::AfterEach => pool(conv(pool(grid))?),
        };
        Ok(grid)
    }
}

/// Two 2-D convolutions over the 1 × L_MAX × SYMBOLS one-hot grid, 2×2 max
/// pooling, flatten, dense to four logits.
pub struct Cnn {
    pub config: CnnConfig,
    store: ParamStore,
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    dense: (ParamId, ParamId),
    flat: usize,
}

impl Cnn {
    pub fn new(config: CnnConfig, seed: u64) -> Result<Cnn> {
        let (gh, gw) = config.output_grid()?;
        let [f1, f2] = config.filters;
        if f1 == 0 || f2 == 0 {
            return Err(Error::config("cnn.filters", "must be positive"));
        }
        let [kh, kw] = config.kernel;
        let flat = f2 * gh * gw;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = kh * kw;
        let conv1 = (
            store.add("cnn.conv1.w", init::xavier_uniform(&[f1, 1, kh, kw], k, f1 * k, &mut rng))?,
            store.add("cnn.conv1.b", Tensor::zeros(&[f1]))?,
        );
        let conv2 = (
            store.add("cnn.conv2.w", init::xavier_uniform(&[f2, f1, kh, kw], f1 * k, f2 * k, &mut rng))?,
            store.add("cnn.conv2.b", Tensor::zeros(&[f2]))?,
        );
        let dense = (
            store.add("cnn.out.w", init::dense(NUM_CLASSES, flat, &mut rng))?,
            store.add("cnn.out.b", Tensor::zeros(&[NUM_CLASSES]))?,
        );
        Ok(Cnn {
            config,
            store,
            conv1,
            conv2,
            dense,
            flat,
        })
    }
}

impl SeqModel for Cnn {
    fn name(&self) -> &'static str {
        "CNN"
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &[&EncodedSequence]) -> Result<Var> {
        let n = batch.len();
        let mut data = Vec::with_capacity(n * L_MAX * SYMBOLS);
        for s in batch {
            data.extend_from_slice(s.one_hot().data());
        }
        let x = g.input(Tensor::new(&[n, 1, L_MAX, SYMBOLS], data)?);
        let (w1, b1) = (g.param(store, self.conv1.0), g.param(store, self.conv1.1));
        let (w2, b2) = (g.param(store, self.conv2.0), g.param(store, self.conv2.1));
        let h = g.conv2d(x, w1, b1)?;
        let mut h = g.relu(h);
        if self.config.pool == PoolPlacement::AfterEach {
            h = g.max_pool2d(h)?;
        }
        let h = g.conv2d(h, w2, b2)?;
        let h = g.relu(h);
        let h = g.max_pool2d(h)?;
        let h = g.reshape(h, &[n, self.flat])?;
        let (wd, bd) = (g.param(store, self.dense.0), g.param(store, self.dense.1));
        let z = g.matmul_bt(h, wd)?;
        g.add_row(z, bd)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// L2 penalty coefficient added to every gradient as `weight_decay · w`.
    pub weight_decay: f64,
    /// Examples per independently differentiated slice of a batch. Slices may
    /// run on different threads; their gradients are summed in slice order.
    pub grad_chunk: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 32,
            lr: 0.005,
            optimizer: OptimizerKind::Adam,
            clip_norm: 5.0,
            weight_decay: 0.0,
            grad_chunk: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn labels(items: &[&Example]) -> Vec<usize> {
    items.iter().map(|e| e.label.index()).collect()
}

/// Summed loss and gradients of one slice of a batch.
fn slice_grads<M: SeqModel + ?Sized>(model: &M, items: &[&Example]) -> Result<(f64, GradSet)> {
    let mut g = Graph::new();
    let seqs: Vec<&EncodedSequence> = items.iter().map(|e| &e.sequence).collect();
    let logits = model.forward(&mut g, model.store(), &seqs)?;
    let loss = g.cross_entropy(logits, &labels(items))?;
    g.backward(loss)?;
    let mut grads = g.param_grads();
    let n = items.len() as f64;
    grads.scale(n);
    Ok((g.value(loss).data()[0] * n, grads))
}

/// Mean cross-entropy over `examples` without updating anything.
pub fn mean_loss<M: SeqModel + ?Sized>(model: &M, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("loss over no examples".into()));
    }
    let parts = par::map_chunks(examples, 64, |chunk| -> Result<f64> {
        let mut g = Graph::new();
        let seqs: Vec<&EncodedSequence> = chunk.iter().map(|e| &e.sequence).collect();
        let logits = model.forward(&mut g, model.store(), &seqs)?;
        let refs: Vec<&Example> = chunk.iter().collect();
        let loss = g.cross_entropy(logits, &labels(&refs))?;
        Ok(g.value(loss).data()[0] * chunk.len() as f64)
    });
    let total = parts.into_iter().sum::<Result<f64>>()?;
    Ok(total / examples.len() as f64)
}

/// Minibatch training with a seeded shuffle each epoch.
pub fn train<M: SeqModel + ?Sized>(model: &mut M, examples: &[Example], config: &TrainConfig) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let mut opt = optim::build(config.optimizer, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let items: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
            let parts = par::map_chunks(&items, config.grad_chunk, |chunk| slice_grads(&*model, chunk));
            let store = model.store_mut();
            store.zero_grad();
            let mut batch_loss = 0.0;
            for part in parts {
                let (loss, grads) = part?;
                batch_loss += loss;
                store.accumulate(&grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss in epoch {epoch}")));
            }
            store.scale_grads(1.0 / items.len() as f64);
            if config.weight_decay > 0.0 {
                store.add_weight_decay(config.weight_decay);
            }
            if config.clip_norm > 0.0 {
                store.clip_grad_norm(config.clip_norm);
            }
            opt.step(store);
            total += batch_loss;
        }
        let mean = total / examples.len() as f64;
        log::debug!("{} epoch {epoch}: loss {mean:.4}", model.name());
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub category: Category,
    pub logits: [f64; NUM_CLASSES],
}

fn argmax(logits: &[f64]) -> Category {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    Category::from_index(best).expect("four logits")
}

pub fn predict<M: SeqModel + ?Sized>(model: &M, sequences: &[EncodedSequence]) -> Result<Vec<Prediction>> {
    let parts = par::map_chunks(sequences, 64, |chunk| -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let refs: Vec<&EncodedSequence> = chunk.iter().collect();
        let z = model.forward(&mut g, model.store(), &refs)?;
        Ok(g.value(z)
            .data()
            .chunks(NUM_CLASSES)
            .map(|row| Prediction {
                category: argmax(row),
                logits: row.try_into().expect("four logits"),
            })
            .collect())
    });
    let mut out = Vec::with_capacity(sequences.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Finite-difference checks of a tiny LSTM (hidden 4) and a tiny CNN with
/// every parameter randomized, including biases.
pub fn gradient_checks(seed: u64) -> Result<Vec<GradCheck>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<Example> = (0..3)
        .map(|i| {
            let len = [4, 9, 14][i];
            let cats: Vec<Category> = (0..len)
                .map(|_| Category::from_index(rng.random_range(0..NUM_CLASSES)).expect("index"))
                .collect();
            Example {
                customer_id: i as u64,
                sequence: encode(&cats).expect("valid length"),
                label: cats[0],
            }
        })
        .collect();
    let mut randomize = |store: &mut ParamStore| {
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = init::uniform(&shape, 0.5, &mut rng);
        }
    };
    let refs: Vec<&Example> = batch.iter().collect();
    let seqs: Vec<&EncodedSequence> = batch.iter().map(|e| &e.sequence).collect();
    let targets = labels(&refs);

    let mut lstm = Lstm::new(LstmConfig { hidden: 4 }, seed)?;
    randomize(lstm.store_mut());
    let lstm_check = gradcheck::check_params("lstm_micro", lstm.store(), |g, s| {
        let z = lstm.forward(g, s, &seqs)?;
        g.cross_entropy(z, &targets)
    })?;

    let mut cnn = Cnn::new(
        CnnConfig {
            filters: [2, 3],
            ..CnnConfig::default()
        },
        seed,
    )?;
    randomize(cnn.store_mut());
    let cnn_check = gradcheck::check_params("cnn_micro", cnn.store(), |g, s| {
        let z = cnn.forward(g, s, &seqs)?;
        g.cross_entropy(z, &targets)
    })?;
    Ok(vec![lstm_check, cnn_check])
}
