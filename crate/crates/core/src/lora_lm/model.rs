use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, init, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::io;

pub const LORA_PREFIX: &str = "lora.";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Longest token sequence, including BOS and the answer.
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 256,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("lm.{name}"), "must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config("lm.n_heads", "must divide d_model"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Weight names to adapt. A name matches a full weight name
    /// (`layers.0.attn.q`) or a suffix applied to every layer (`attn.q`).
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            targets: ["attn.q", "attn.k", "attn.v", "attn.o"].map(String::from).to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

/// Low-rank update `ΔW = (alpha / rank) · B · A` for one base weight.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub target: String,
    pub weight: ParamId,
    pub a: ParamId,
    pub b: ParamId,
}

/// Pre-LN decoder-only transformer with learned positions and a separate
/// output head. Linear weights are stored `out × in`.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub vocab_size: usize,
    store: ParamStore,
    tok: ParamId,
    pos: ParamId,
    layers: Vec<LayerIds>,
    ln_f: (ParamId, ParamId),
    head: ParamId,
    lora: Option<(LoraConfig, Vec<LoraAdapter>)>,
    by_weight: HashMap<ParamId, usize>,
}

#[derive(Serialize, Deserialize)]
struct AdapterFile {
    rank: usize,
    alpha: f64,
    targets: Vec<String>,
    tensors: Vec<(String, Tensor)>,
}

impl LanguageModel {
    pub fn new(config: LmConfig, vocab_size: usize, seed: u64) -> Result<LanguageModel> {
        config.validate()?;
        if vocab_size < 5 {
            return Err(Error::config("vocab_size", "must exceed the four special tokens"));
        }
        let (d, f) = (config.d_model, config.d_ff);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let emb_scale = 0.1;
        let tok = s.add("tok_emb", init::uniform(&[vocab_size, d], emb_scale, &mut rng))?;
        let pos = s.add("pos_emb", init::uniform(&[config.max_len, d], emb_scale, &mut rng))?;
        let mut layers = Vec::new();
        for l in 0..config.n_layers {
            let p = format!("layers.{l}");
            let ln = |s: &mut ParamStore, n: &str| -> Result<(ParamId, ParamId)> {
                Ok((
                    s.add(format!("{p}.{n}.g"), Tensor::full(&[d], 1.0))?,
                    s.add(format!("{p}.{n}.b"), Tensor::zeros(&[d]))?,
                ))
            };
            let ln1 = ln(&mut s, "ln1")?;
            let ln2 = ln(&mut s, "ln2")?;
            layers.push(LayerIds {
                ln1,
                q: s.add(format!("{p}.attn.q"), init::dense(d, d, &mut rng))?,
                k: s.add(format!("{p}.attn.k"), init::dense(d, d, &mut rng))?,
                v: s.add(format!("{p}.attn.v"), init::dense(d, d, &mut rng))?,
                o: s.add(format!("{p}.attn.o"), init::dense(d, d, &mut rng))?,
                ln2,
                fc1: (
                    s.add(format!("{p}.mlp.fc1"), init::dense(f, d, &mut rng))?,
                    s.add(format!("{p}.mlp.fc1_b"), Tensor::zeros(&[f]))?,
                ),
                fc2: (
                    s.add(format!("{p}.mlp.fc2"), init::dense(d, f, &mut rng))?,
                    s.add(format!("{p}.mlp.fc2_b"), Tensor::zeros(&[d]))?,
                ),
            });
        }
        let ln_f = (
            s.add("ln_f.g", Tensor::full(&[d], 1.0))?,
            s.add("ln_f.b", Tensor::zeros(&[d]))?,
        );
        let head = s.add("head", init::dense(vocab_size, d, &mut rng))?;
        Ok(LanguageModel {
            config,
            vocab_size,
            store: s,
            tok,
            pos,
            layers,
            ln_f,
            head,
            lora: None,
            by_weight: HashMap::new(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn lora(&self) -> Option<&(LoraConfig, Vec<LoraAdapter>)> {
        self.lora.as_ref()
    }

    /// Names of every linear weight LoRA can target.
    pub fn linear_weights(&self) -> Vec<(String, ParamId)> {
        let mut out = Vec::new();
        for l in &self.layers {
            for id in [l.q, l.k, l.v, l.o, l.fc1.0, l.fc2.0] {
                out.push((self.store.get(id).name.clone(), id));
            }
        }
        out
    }

    /// Freezes every base parameter and registers trainable `A` (small
    /// random) and `B` (zeros) for each target weight.
    pub fn attach_lora(mut self, config: LoraConfig, seed: u64) -> Result<LanguageModel> {
        if config.rank == 0 {
            return Err(Error::config("lora.rank", "must be positive"));
        }
        if self.lora.is_some() {
            return Err(Error::Invalid("adapters already attached".into()));
        }
        let weights = self.linear_weights();
        let mut chosen: Vec<(String, ParamId)> = Vec::new();
        for t in &config.targets {
            let hits: Vec<_> = weights
                .iter()
                .filter(|(name, _)| name == t || name.ends_with(&format!(".{t}")))
                .cloned()
                .collect();
            if hits.is_empty() {
                return Err(Error::config("lora.targets", format!("unknown target weight `{t}`")));
            }
            for h in hits {
                if !chosen.iter().any(|(n, _)| *n == h.0) {
                    chosen.push(h);
                }
            }
        }
        chosen.sort_by_key(|(_, id)| *id);
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            self.store.set_requires_grad(id, false);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adapters = Vec::new();
        for (name, weight) in chosen {
            let [d_out, d_in] = *self.store.value(weight).shape() else {
                unreachable!("linear weights are 2-D")
            };
            let a = init::uniform(&[config.rank, d_in], 1.0 / (d_in as f64).sqrt(), &mut rng);
            let a = self.store.add(format!("{LORA_PREFIX}{name}.a"), a)?;
            let b = self.store.add(format!("{LORA_PREFIX}{name}.b"), Tensor::zeros(&[d_out, config.rank]))?;
            self.by_weight.insert(weight, adapters.len());
            adapters.push(LoraAdapter {
                target: name,
                weight,
                a,
                b,
            });
        }
        self.lora = Some((config, adapters));
        Ok(self)
    }

    /// `alpha / rank` of the attached adapters.
    pub fn lora_scale(&self) -> Option<f64> {
        self.lora.as_ref().map(|(c, _)| c.alpha / c.rank as f64)
    }

    /// `x · Wᵀ`, plus `(alpha/rank) · (x · Aᵀ) · Bᵀ` when `w` is adapted.
    fn linear(&self, g: &mut Graph, store: &ParamStore, x: Var, w: ParamId) -> Result<Var> {
        let wv = g.param(store, w);
        let y = g.matmul_bt(x, wv)?;
        let Some(&i) = self.by_weight.get(&w) else {
            return Ok(y);
        };
        let (cfg, adapters) = self.lora.as_ref().expect("adapter map implies lora");
        let ad = &adapters[i];
        let a = g.param(store, ad.a);
        let b = g.param(store, ad.b);
        let t = g.matmul_bt(x, a)?;
        let u = g.matmul_bt(t, b)?;
        let u = g.scale(u, cfg.alpha / cfg.rank as f64);
        g.add(y, u)
    }

    /// Final-normalized hidden states, `T × d`.
    pub fn hidden(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
        let t = tokens.len();
        if t == 0 || t > self.config.max_len {
            return Err(Error::shape("lm input", &[t], &[self.config.max_len]));
        }
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let tok = g.param(store, self.tok);
        let pos = g.param(store, self.pos);
        let e = g.embedding(tok, tokens)?;
        let positions: Vec<usize> = (0..t).collect();
        let p = g.embedding(pos, &positions)?;
        let mut x = g.add(e, p)?;
        for l in &self.layers {
            let (g1, b1) = (g.param(store, l.ln1.0), g.param(store, l.ln1.1));
            let h = g.layer_norm(x, g1, b1)?;
            let q = self.linear(g, store, h, l.q)?;
            let k = self.linear(g, store, h, l.k)?;
            let v = self.linear(g, store, h, l.v)?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice(q, 1, hd * dh, dh)?;
                let kh = g.slice(k, 1, hd * dh, dh)?;
                let vh = g.slice(v, 1, hd * dh, dh)?;
                let s = g.matmul_bt(qh, kh)?;
                let s = g.scale(s, 1.0 / (dh as f64).sqrt());
                let a = g.causal_softmax(s)?;
                outs.push(g.matmul(a, vh)?);
            }
            let cat = g.concat(&outs, 1)?;
            let o = self.linear(g, store, cat, l.o)?;
            x = g.add(x, o)?;

            let (g2, b2) = (g.param(store, l.ln2.0), g.param(store, l.ln2.1));
            let h = g.layer_norm(x, g2, b2)?;
            let f = self.linear(g, store, h, l.fc1.0)?;
            let fb = g.param(store, l.fc1.1);
            let f = g.add_row(f, fb)?;
            let f = g.relu(f);
            let m = self.linear(g, store, f, l.fc2.0)?;
            let mb = g.param(store, l.fc2.1);
            let m = g.add_row(m, mb)?;
            x = g.add(x, m)?;
        }
        let (gf, bf) = (g.param(store, self.ln_f.0), g.param(store, self.ln_f.1));
        g.layer_norm(x, gf, bf)
    }

    /// Vocabulary logits for hidden rows `start..start + len`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, hidden: Var, start: usize, len: usize) -> Result<Var> {
        let rows = g.slice(hidden, 0, start, len)?;
        let head = g.param(store, self.head);
        g.matmul_bt(rows, head)
    }

    /// Logits for every position.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
        let h = self.hidden(g, store, tokens)?;
        self.logits(g, store, h, 0, tokens.len())
    }

    /// Logits for every position as a plain tensor.
    pub fn logits_of(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = self.forward(&mut g, &self.store, tokens)?;
        Ok(g.value(z).clone())
    }

    pub(crate) fn ids(&self) -> LayerView<'_> {
        LayerView { model: self }
    }

    /// Base weights only, in store order.
    pub fn save_base(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path, |n| !n.starts_with(LORA_PREFIX))
    }

    pub fn base_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(
            self.store
                .iter()
                .filter(|(_, p)| !p.name.starts_with(LORA_PREFIX))
                .map(|(_, p)| (p.name.as_str(), &*p.value)),
        )
    }

    pub fn load_base(&mut self, path: &Path) -> Result<()> {
        let tensors = checkpoint::load(path)?;
        if let Some((n, _)) = tensors.iter().find(|(n, _)| n.starts_with(LORA_PREFIX)) {
            return Err(Error::Invalid(format!("base checkpoint contains adapter tensor `{n}`")));
        }
        checkpoint::restore(&mut self.store, tensors)
    }

    /// Adapter file: rank, alpha, target names and the `A`, `B` tensors.
    pub fn save_adapters(&self, path: &Path) -> Result<()> {
        let (cfg, adapters) = self
            .lora
            .as_ref()
            .ok_or_else(|| Error::Invalid("no adapters attached".into()))?;
        let mut tensors = Vec::new();
        for ad in adapters {
            for id in [ad.a, ad.b] {
                let p = self.store.get(id);
                tensors.push((p.name.clone(), (*p.value).clone()));
            }
        }
        let file = AdapterFile {
            rank: cfg.rank,
            alpha: cfg.alpha,
            targets: adapters.iter().map(|a| a.target.clone()).collect(),
            tensors,
        };
        io::write_json(&file, path)
    }

    /// Attaches adapters described by an adapter file to this base model.
    pub fn load_adapters(self, path: &Path) -> Result<LanguageModel> {
        let file: AdapterFile = io::read_json(path)?;
        let cfg = LoraConfig {
            rank: file.rank,
            alpha: file.alpha,
            targets: file.targets,
        };
        let mut model = self.attach_lora(cfg, 0)?;
        checkpoint::restore(&mut model.store, file.tensors)?;
        Ok(model)
    }

    /// Base weights with every adapter folded in: `W + (alpha/rank) · B · A`.
    /// The result has no adapters and is otherwise identical.
    pub fn merged(&self) -> LanguageModel {
        let mut out = self.clone();
        if let Some((cfg, adapters)) = self.lora.as_ref() {
            let scale = cfg.alpha / cfg.rank as f64;
            for ad in adapters {
                let a = self.store.value(ad.a);
                let b = self.store.value(ad.b);
                let [d_out, r] = *b.shape() else { unreachable!() };
                let d_in = a.shape()[1];
                let w = out.store.value_mut(ad.weight);
                crate::autodiff::gemm(d_out, r, d_in, scale, b.data(), false, a.data(), false, 1.0, w.data_mut());
            }
            let mut store = ParamStore::new();
            for (_, p) in self.store.iter().filter(|(_, p)| !p.name.starts_with(LORA_PREFIX)) {
                let id = out.store.id(&p.name).expect("same names");
                store
                    .add(p.name.clone(), out.store.value(id).clone())
                    .expect("unique names");
            }
            out.store = store;
            out.lora = None;
            out.by_weight.clear();
        }
        out
    }
}

/// Read-only access to weights for the inference path.
pub(crate) struct LayerView<'a> {
    model: &'a LanguageModel,
}

pub(crate) struct LayerRefs<'a> {
    pub ln1: (&'a [f64], &'a [f64]),
    pub q: &'a [f64],
    pub k: &'a [f64],
    pub v: &'a [f64],
    pub o: &'a [f64],
    pub ln2: (&'a [f64], &'a [f64]),
    pub fc1: (&'a [f64], &'a [f64]),
    pub fc2: (&'a [f64], &'a [f64]),
}

impl<'a> LayerView<'a> {
    fn v(&self, id: ParamId) -> &'a [f64] {
        self.model.store.value(id).data()
    }

    pub fn tok(&self) -> &'a [f64] {
        self.v(self.model.tok)
    }

    pub fn pos(&self) -> &'a [f64] {
        self.v(self.model.pos)
    }

    pub fn head(&self) -> &'a [f64] {
        self.v(self.model.head)
    }

    pub fn ln_f(&self) -> (&'a [f64], &'a [f64]) {
        (self.v(self.model.ln_f.0), self.v(self.model.ln_f.1))
    }

    pub fn layers(&self) -> Vec<LayerRefs<'a>> {
        self.model
            .layers
            .iter()
            .map(|l| LayerRefs {
                ln1: (self.v(l.ln1.0), self.v(l.ln1.1)),
                q: self.v(l.q),
                k: self.v(l.k),
                v: self.v(l.v),
                o: self.v(l.o),
                ln2: (self.v(l.ln2.0), self.v(l.ln2.1)),
                fc1: (self.v(l.fc1.0), self.v(l.fc1.1)),
                fc2: (self.v(l.fc2.0), self.v(l.fc2.1)),
            })
            .collect()
    }
}
