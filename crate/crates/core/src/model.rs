//! A k-layer post-layernorm transformer encoder with one classifier per
//! layer. Layer `i` (1-based) feeds off-ramp `i` for `i < k`; the last layer
//! feeds the final classifier. Every classifier is a single affine map on
//! the first-token state.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{bail, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of transformer layers, which is also the number of exits.
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub classes: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden: 128,
            heads: 4,
            ffn: 256,
            vocab: 1000,
            classes: 2,
            max_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            bail!(Config, "need at least 2 layers, got {}", self.layers);
        }
        if self.classes < 2 {
            bail!(Config, "need at least 2 classes, got {}", self.classes);
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            bail!(Config, "hidden {} not divisible by heads {}", self.hidden, self.heads);
        }
        if self.hidden == 0 || self.ffn == 0 || self.vocab == 0 || self.max_len == 0 {
            bail!(Config, "hidden, ffn, vocab and max_len must be positive");
        }
        Ok(())
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ownership {
    Embedding,
    /// Transformer layer, 1-based.
    Layer(usize),
    /// Off-ramp after layer `i`, `1 <= i < k`.
    OffRamp(usize),
    FinalClassifier,
}

/// Coarse grouping used by freeze masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OwnerClass {
    Backbone,
    OffRamp,
    FinalClassifier,
}

impl Ownership {
    pub fn class(self) -> OwnerClass {
        match self {
            Ownership::Embedding | Ownership::Layer(_) => OwnerClass::Backbone,
            Ownership::OffRamp(_) => OwnerClass::OffRamp,
            Ownership::FinalClassifier => OwnerClass::FinalClassifier,
        }
    }
}

impl fmt::Display for Ownership {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ownership::Embedding => write!(f, "backbone:embedding"),
            Ownership::Layer(l) => write!(f, "backbone:layer{l}"),
            Ownership::OffRamp(i) => write!(f, "off_ramp:{i}"),
            Ownership::FinalClassifier => write!(f, "final_classifier"),
        }
    }
}

impl FromStr for Ownership {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("unknown ownership tag {s:?}"));
        match s {
            "backbone:embedding" => Ok(Ownership::Embedding),
            "final_classifier" => Ok(Ownership::FinalClassifier),
            _ => {
                if let Some(l) = s.strip_prefix("backbone:layer") {
                    l.parse().map(Ownership::Layer).map_err(|_| bad())
                } else if let Some(i) = s.strip_prefix("off_ramp:") {
                    i.parse().map(Ownership::OffRamp).map_err(|_| bad())
                } else {
                    Err(bad())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub owner: Ownership,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerIds {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Index {
    tok: usize,
    pos: usize,
    emb_g: usize,
    emb_b: usize,
    layers: Vec<LayerIds>,
    /// `(weight, bias)` per exit; entry `k-1` is the final classifier.
    exits: Vec<(usize, usize)>,
}

/// Named parameter tensors of a multi-exit encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    index: Index,
}

enum InitKind {
    Normal,
    Zeros,
    Ones,
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Ownership, Vec<usize>, InitKind)> {
    use InitKind::*;
    let (h, f, c) = (cfg.hidden, cfg.ffn, cfg.classes);
    let mut specs = vec![
        ("embeddings.token".to_string(), Ownership::Embedding, vec![cfg.vocab, h], Normal),
        ("embeddings.position".to_string(), Ownership::Embedding, vec![cfg.max_len, h], Normal),
        ("embeddings.ln.gain".to_string(), Ownership::Embedding, vec![h], Ones),
        ("embeddings.ln.bias".to_string(), Ownership::Embedding, vec![h], Zeros),
    ];
    for l in 1..=cfg.layers {
        let o = Ownership::Layer(l);
        let p = |s: &str| format!("layer{l}.{s}");
        specs.extend([
            (p("attn.q.weight"), o, vec![h, h], Normal),
            (p("attn.q.bias"), o, vec![h], Zeros),
            (p("attn.k.weight"), o, vec![h, h], Normal),
            (p("attn.k.bias"), o, vec![h], Zeros),
            (p("attn.v.weight"), o, vec![h, h], Normal),
            (p("attn.v.bias"), o, vec![h], Zeros),
            (p("attn.out.weight"), o, vec![h, h], Normal),
            (p("attn.out.bias"), o, vec![h], Zeros),
            (p("ln1.gain"), o, vec![h], Ones),
            (p("ln1.bias"), o, vec![h], Zeros),
            (p("ffn.in.weight"), o, vec![h, f], Normal),
            (p("ffn.in.bias"), o, vec![f], Zeros),
            (p("ffn.out.weight"), o, vec![f, h], Normal),
            (p("ffn.out.bias"), o, vec![h], Zeros),
            (p("ln2.gain"), o, vec![h], Ones),
            (p("ln2.bias"), o, vec![h], Zeros),
        ]);
    }
    for i in 1..cfg.layers {
        let o = Ownership::OffRamp(i);
        specs.push((format!("off_ramp{i}.weight"), o, vec![h, c], Normal));
        specs.push((format!("off_ramp{i}.bias"), o, vec![c], Zeros));
    }
    specs.push(("classifier.weight".to_string(), Ownership::FinalClassifier, vec![h, c], Normal));
    specs.push(("classifier.bias".to_string(), Ownership::FinalClassifier, vec![c], Zeros));
    specs
}

fn build_index(cfg: &ModelConfig) -> Index {
    let per_layer = 16;
    let layers = (0..cfg.layers)
        .map(|l| {
            let b = 4 + l * per_layer;
            LayerIds {
                wq: b,
                bq: b + 1,
                wk: b + 2,
                bk: b + 3,
                wv: b + 4,
                bv: b + 5,
                wo: b + 6,
                bo: b + 7,
                ln1_g: b + 8,
                ln1_b: b + 9,
                w1: b + 10,
                b1: b + 11,
                w2: b + 12,
                b2: b + 13,
                ln2_g: b + 14,
                ln2_b: b + 15,
            }
        })
        .collect();
    let base = 4 + cfg.layers * per_layer;
    let exits = (0..cfg.layers).map(|i| (base + 2 * i, base + 2 * i + 1)).collect();
    Index {
        tok: 0,
        pos: 1,
        emb_g: 2,
        emb_b: 3,
        layers,
        exits,
    }
}

/// Truncated normal: redraw anything beyond two standard deviations.
fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Fresh parameters: truncated-normal weights (σ = 0.02), zero biases,
    /// unit layernorm gains. Deterministic in `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = param_specs(config)
            .into_iter()
            .map(|(name, owner, shape, kind)| {
                let n: usize = shape.iter().product();
                let data = match kind {
                    InitKind::Normal => (0..n)
                        .map(|_| T::from_f64_lossy(truncated_normal(&mut rng, INIT_STD)))
                        .collect(),
                    InitKind::Zeros => vec![T::zero(); n],
                    InitKind::Ones => vec![T::one(); n],
                };
                Param {
                    name,
                    owner,
                    value: Tensor::new(shape, data).expect("spec shapes are consistent"),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params,
            index: build_index(config),
        })
    }

    /// Rebuilds a store from named tensors, checking them against the layout
    /// `config` implies. Any difference in names, ownership or shapes is a
    /// checkpoint error.
    pub fn from_params(config: &ModelConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(config);
        if specs.len() != params.len() {
            bail!(
                Checkpoint,
                "layout mismatch: config implies {} tensors, found {}",
                specs.len(),
                params.len()
            );
        }
        for ((name, owner, shape, _), p) in specs.iter().zip(&params) {
            if *name != p.name || *owner != p.owner || shape.as_slice() != p.value.shape() {
                bail!(
                    Checkpoint,
                    "layout mismatch at {}: expected {} {:?} {}, found {} {:?} {}",
                    name,
                    name,
                    shape,
                    owner,
                    p.name,
                    p.value.shape(),
                    p.owner
                );
            }
        }
        Ok(Self {
            config: config.clone(),
            params,
            index: build_index(config),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Ids of the `(weight, bias)` pair of exit `i` (1-based).
    pub fn exit_param_ids(&self, i: usize) -> (usize, usize) {
        self.index.exits[i - 1]
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    owner: p.owner,
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter on `tape`. Parameters for which `trainable`
    /// returns false are recorded as constants and never receive gradients.
    pub fn bind(&self, tape: &Tape<T>, trainable: impl Fn(Ownership) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if trainable(p.owner) {
                    tape.param(i, &p.value)
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Named gradient map with zero tensors for parameters absent from `grads`.
    pub fn named_grads(&self, grads: &crate::autograd::Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let g = grads
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                (p.name.clone(), g)
            })
            .collect()
    }
}

/// Parameters of one [`ParamStore`] recorded on a tape, indexed like the store.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// Padded token ids for a batch. Position 0 of each row is the [CLS] token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub lengths: Vec<usize>,
    pub seq_len: usize,
}

impl TokenBatch {
    /// Pads variable-length sequences with id 0 to a common length.
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Result<Self> {
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.is_empty() {
                bail!(Data, "empty token sequence");
            }
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(0, seq_len - s.len()));
            lengths.push(s.len());
        }
        Ok(Self { ids, lengths, seq_len })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// True at padded positions.
    pub fn pad_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.ids.len());
        for &l in &self.lengths {
            m.extend((0..self.seq_len).map(|p| p >= l));
        }
        m
    }
}

/// Per-exit logits `f_1..f_k` for one batch, recorded on a tape.
#[derive(Debug, Clone)]
pub struct ExitOutputs {
    pub logits: Vec<Var>,
}

impl ExitOutputs {
    pub fn num_exits(&self) -> usize {
        self.logits.len()
    }

    pub fn final_exit(&self) -> Var {
        *self.logits.last().expect("at least two exits")
    }
}

/// Layer-by-layer evaluation of the encoder on one tape. `Encoder::exit`
/// after `Encoder::advance` gives the logits of the exit attached to the
/// layer just computed, so callers can stop as soon as they have what they
/// need without touching deeper layers.
pub struct Encoder<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    tape: &'a Tape<T>,
    bound: &'a Bound,
    batch: usize,
    seq: usize,
    lengths: Vec<usize>,
    cls_rows: Vec<usize>,
    hidden: Var,
    depth: usize,
}

impl<'a, T: Scalar> Encoder<'a, T> {
    pub fn new(store: &'a ParamStore<T>, tape: &'a Tape<T>, bound: &'a Bound, tokens: &TokenBatch) -> Result<Self> {
        let cfg = &store.config;
        let b = tokens.batch_size();
        let l = tokens.seq_len;
        if b == 0 {
            bail!(Data, "empty batch");
        }
        if tokens.ids.len() != b * l {
            bail!(Dimension, "token batch holds {} ids for {}x{}", tokens.ids.len(), b, l);
        }
        if l > cfg.max_len {
            bail!(Data, "sequence length {} exceeds max_len {}", l, cfg.max_len);
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id as usize >= cfg.vocab) {
            bail!(Data, "token id {} out of range for vocab {}", bad, cfg.vocab);
        }
        if tokens.lengths.iter().any(|&n| n == 0 || n > l) {
            bail!(Data, "sequence lengths must lie in 1..={}", l);
        }
        let ix = &store.index;
        let ids: Vec<usize> = tokens.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let tok = tape.embedding(bound.var(ix.tok), &ids)?;
        let pos = tape.embedding(bound.var(ix.pos), &positions)?;
        let sum = tape.add(tok, pos)?;
        let hidden = tape.layernorm(sum, bound.var(ix.emb_g), bound.var(ix.emb_b), LAYERNORM_EPS)?;
        Ok(Self {
            store,
            tape,
            bound,
            batch: b,
            seq: l,
            lengths: tokens.lengths.clone(),
            cls_rows: (0..b).map(|r| r * l).collect(),
            hidden,
            depth: 0,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    fn affine(&self, x: Var, w: usize, b: usize) -> Result<Var> {
        let y = self.tape.matmul(x, self.bound.var(w))?;
        self.tape.add_row(y, self.bound.var(b))
    }

    /// Runs the next transformer layer.
    pub fn advance(&mut self) -> Result<()> {
        if self.depth == self.store.config.layers {
            bail!(Contract, "all {} layers already computed", self.depth);
        }
        let p = self.store.index.layers[self.depth];
        let (tape, x) = (self.tape, self.hidden);
        let q = self.affine(x, p.wq, p.bq)?;
        let k = self.affine(x, p.wk, p.bk)?;
        let v = self.affine(x, p.wv, p.bv)?;
        let ctx = tape.attention(q, k, v, self.batch, self.seq, self.store.config.heads, &self.lengths)?;
        let attn = self.affine(ctx, p.wo, p.bo)?;
        let res1 = tape.add(x, attn)?;
        let x1 = tape.layernorm(res1, self.bound.var(p.ln1_g), self.bound.var(p.ln1_b), LAYERNORM_EPS)?;
        let inner = self.affine(x1, p.w1, p.b1)?;
        let act = tape.gelu(inner);
        let ffn = self.affine(act, p.w2, p.b2)?;
        let res2 = tape.add(x1, ffn)?;
        self.hidden = tape.layernorm(res2, self.bound.var(p.ln2_g), self.bound.var(p.ln2_b), LAYERNORM_EPS)?;
        self.depth += 1;
        Ok(())
    }

    /// Logits of the exit attached to the current depth.
    pub fn exit(&self) -> Result<Var> {
        if self.depth == 0 {
            bail!(Contract, "no layer computed yet");
        }
        let cls = self.tape.select_rows(self.hidden, &self.cls_rows)?;
        let (w, b) = self.store.index.exits[self.depth - 1];
        self.affine(cls, w, b)
    }
}

/// Logits of every exit.
pub fn forward_all_exits<T: Scalar>(
    store: &ParamStore<T>,
    tape: &Tape<T>,
    bound: &Bound,
    tokens: &TokenBatch,
) -> Result<ExitOutputs> {
    let mut enc = Encoder::new(store, tape, bound, tokens)?;
    let mut logits = Vec::with_capacity(store.config.layers);
    for _ in 0..store.config.layers {
        enc.advance()?;
        logits.push(enc.exit()?);
    }
    Ok(ExitOutputs { logits })
}

/// Logits of exit `upto` (1-based) without computing deeper layers.
pub fn forward_prefix<T: Scalar>(
    store: &ParamStore<T>,
    tape: &Tape<T>,
    bound: &Bound,
    tokens: &TokenBatch,
    upto: usize,
) -> Result<Var> {
    if upto == 0 || upto > store.config.layers {
        bail!(Contract, "exit index {} outside 1..={}", upto, store.config.layers);
    }
    let mut enc = Encoder::new(store, tape, bound, tokens)?;
    for _ in 0..upto {
        enc.advance()?;
    }
    enc.exit()
}

/// Convenience wrapper: evaluates all exits on a throwaway tape and returns
/// the logits as plain tensors.
pub fn eval_all_exits<T: Scalar>(store: &ParamStore<T>, tokens: &TokenBatch) -> Result<Vec<Tensor<T>>> {
    let tape = Tape::new();
    let bound = store.bind(&tape, |_| false);
    let out = forward_all_exits(store, &tape, &bound, tokens)?;
    Ok(out.logits.iter().map(|&v| tape.value(v).clone()).collect())
}
