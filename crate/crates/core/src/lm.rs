//! Micro decoder-only language model (pre-norm blocks, learned positions,
//! untied output head), prompt assembly with the BEV placeholder, LoRA
//! adapters on all six block linears, greedy decoding and adapter merging.
//!
//! Linear weights are stored `[in×out]`, so LoRA factors follow the same
//! convention: `A: [in×r]`, `B: [r×out]`, adapted output
//! `x·W + b + (α/r)·(x·A)·B`.

use bella_numcore::{ParamStore, Scalar, SplitMix64, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{BellaError, Result};
use crate::langdata::{Vocab, BEV_PLACEHOLDER, BOS, EOS};
use crate::params::{fan_in_uniform, init_linear, init_norm, linear, norm, normal_like, Bound};

pub const LM_PREFIX: &str = "lm/";
pub const LORA_PREFIX: &str = "lora/";
/// Index of the placeholder token in every prompt.
pub const PLACEHOLDER_POS: usize = 1;
/// Block linears that receive adapters, with their `(in, out)` multiples of d.
pub const ADAPTED: [(&str, usize, usize); 6] = [
    ("attn.q", 1, 1),
    ("attn.k", 1, 1),
    ("attn.v", 1, 1),
    ("attn.o", 1, 1),
    ("ff.up", 1, 4),
    ("ff.down", 4, 1),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(BellaError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.max_len < 4 || self.vocab_size < 5 {
            return Err(BellaError::Config(format!("degenerate language model {self:?}")));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0 }
    }
}

impl LoraConfig {
    /// Adapter size for a full-size language model.
    pub const FULL_SCALE: LoraConfig = LoraConfig { rank: 64, alpha: 128.0 };

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Frozen base weights under `lm/`.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroLm {
    pub cfg: LmConfig,
    pub params: ParamStore,
    merged: bool,
}

impl MicroLm {
    pub fn init(cfg: LmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::derive(seed, "lm/init");
        let d = cfg.d_model;
        let mut s = ParamStore::new();
        // Unit-scale token rows match the LayerNorm-ed BEV token.
        s.insert("lm/tok_emb", normal_like(&mut rng, &[cfg.vocab_size, d], 1.0));
        s.insert("lm/pos_emb", normal_like(&mut rng, &[cfg.max_len, d], 0.1));
        for l in 0..cfg.n_layers {
            let p = format!("lm/block{l}");
            init_norm(&mut s, &format!("{p}.ln1"), d);
            for (name, i, o) in ADAPTED {
                init_linear(&mut s, &mut rng, &format!("{p}.{name}"), i * d, o * d);
            }
            init_norm(&mut s, &format!("{p}.ln2"), d);
        }
        init_norm(&mut s, "lm/ln_f", d);
        init_linear(&mut s, &mut rng, "lm/head", d, cfg.vocab_size);
        Ok(Self {
            cfg,
            params: s,
            merged: false,
        })
    }

    pub fn from_store(cfg: LmConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut params = store.subset(LM_PREFIX);
        params.set_requires_grad_all(false);
        let want = Self::init(cfg, 0)?.params;
        for (name, t) in want.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| BellaError::Config(format!("checkpoint lacks `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(BellaError::Config(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self {
            cfg,
            params,
            merged: false,
        })
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn checksum(&self) -> String {
        self.params.checksum(LM_PREFIX)
    }

    /// `W' = W + (α/r)·A·B` for every adapted linear. A model that already
    /// carries merged adapters is rejected until [`MicroLm::unmerge_lora`].
    pub fn merge_lora(&self, lora: &ParamStore, lcfg: &LoraConfig) -> Result<MicroLm> {
        if self.merged {
            return Err(BellaError::AlreadyMerged);
        }
        let mut out = self.clone();
        out.apply_delta(lora, lcfg.scaling())?;
        out.merged = true;
        Ok(out)
    }

    pub fn unmerge_lora(&self, lora: &ParamStore, lcfg: &LoraConfig) -> Result<MicroLm> {
        if !self.merged {
            return Err(BellaError::Config("no merged adapters to remove".into()));
        }
        let mut out = self.clone();
        out.apply_delta(lora, -lcfg.scaling())?;
        out.merged = false;
        Ok(out)
    }

    fn apply_delta(&mut self, lora: &ParamStore, scale: f64) -> Result<()> {
        for l in 0..self.cfg.n_layers {
            for (name, _, _) in ADAPTED {
                let a = lora.expect(&format!("lora/block{l}.{name}.a"))?;
                let b = lora.expect(&format!("lora/block{l}.{name}.b"))?;
                let w = self
                    .params
                    .get_mut(&format!("lm/block{l}.{name}.w"))
                    .ok_or_else(|| BellaError::Config(format!("missing lm/block{l}.{name}.w")))?;
                let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
                let r = a.shape()[1];
                if a.shape() != [n_in, r] || b.shape() != [r, n_out] {
                    return Err(BellaError::Config(format!(
                        "adapter {name} shapes {:?}/{:?} do not fit weight {:?}",
                        a.shape(),
                        b.shape(),
                        w.shape()
                    )));
                }
                let (ad, bd) = (a.data(), b.data());
                let wd = w.data_mut();
                for i in 0..n_in {
                    for j in 0..n_out {
                        let mut acc = 0f64;
                        for k in 0..r {
                            acc += ad[i * r + k] as f64 * bd[k * n_out + j] as f64;
                        }
                        wd[i * n_out + j] = (wd[i * n_out + j] as f64 + scale * acc) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

/// `A` fan-in uniform, `B = 0`, so the adapted model starts equal to the base.
pub fn init_lora(cfg: &LmConfig, lcfg: &LoraConfig, seed: u64) -> ParamStore {
    let mut rng = SplitMix64::derive(seed, "lora/init");
    let d = cfg.d_model;
    let r = lcfg.rank;
    let mut s = ParamStore::new();
    for l in 0..cfg.n_layers {
        for (name, i, o) in ADAPTED {
            s.insert(
                format!("lora/block{l}.{name}.a"),
                fan_in_uniform(&mut rng, &[i * d, r], i * d),
            );
            s.insert(format!("lora/block{l}.{name}.b"), Tensor::zeros(&[r, o * d]));
        }
    }
    s.set_requires_grad_all(true);
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Token ids with one placeholder at [`PLACEHOLDER_POS`] and the positions
/// whose token is a training target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptAssembly {
    pub ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl PromptAssembly {
    /// Next-token targets aligned with logits rows: row `t` predicts
    /// `ids[t+1]` when that position is masked in.
    pub fn targets(&self) -> Vec<Option<usize>> {
        (0..self.ids.len())
            .map(|t| match self.loss_mask.get(t + 1) {
                Some(true) => Some(self.ids[t + 1]),
                _ => None,
            })
            .collect()
    }

    pub fn num_targets(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    pub fn placeholder_count(&self) -> usize {
        self.ids.iter().filter(|&&t| t == BEV_PLACEHOLDER).count()
    }
}

/// Stage 1: `[BOS, <bev>, y…, EOS]`, loss on `y…` and EOS.
/// Stage 2: `[BOS, <bev>, q…, ., a…, EOS]`, loss on `a…` and EOS.
pub fn assemble_prompt(
    stage: Stage,
    question: &[usize],
    target: &[usize],
    sep: usize,
    max_len: usize,
) -> Result<PromptAssembly> {
    let mut ids = vec![BOS, BEV_PLACEHOLDER];
    let mut mask = vec![false, false];
    if stage == Stage::Finetune {
        if question.is_empty() {
            return Err(BellaError::Prompt("finetuning prompt needs a question".into()));
        }
        ids.extend_from_slice(question);
        ids.push(sep);
        mask.resize(ids.len(), false);
    }
    ids.extend_from_slice(target);
    ids.push(EOS);
    mask.resize(ids.len(), true);
    if ids.len() > max_len {
        return Err(BellaError::SequenceTooLong {
            len: ids.len(),
            max: max_len,
            detail: format!("question {} + target {} + 3 specials", question.len(), target.len()),
        });
    }
    let a = PromptAssembly { ids, loss_mask: mask };
    validate_ids(&a.ids[..])?;
    Ok(a)
}

/// Generation prefix `[BOS, <bev>, q…, .]`.
pub fn question_prefix(question: &[usize], sep: usize, max_len: usize) -> Result<Vec<usize>> {
    if question.is_empty() {
        return Err(BellaError::Prompt("empty question".into()));
    }
    let mut ids = vec![BOS, BEV_PLACEHOLDER];
    ids.extend_from_slice(question);
    ids.push(sep);
    if ids.len() >= max_len {
        return Err(BellaError::SequenceTooLong {
            len: ids.len(),
            max: max_len,
            detail: "no room for an answer".into(),
        });
    }
    Ok(ids)
}

fn validate_ids(ids: &[usize]) -> Result<()> {
    let n = ids.iter().filter(|&&t| t == BEV_PLACEHOLDER).count();
    if n != 1 || ids.get(PLACEHOLDER_POS) != Some(&BEV_PLACEHOLDER) {
        return Err(BellaError::Prompt(format!(
            "expected exactly one placeholder at position {PLACEHOLDER_POS}, found {n}"
        )));
    }
    Ok(())
}

fn adapted_linear<T: Scalar>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    lora: Option<(&Bound, T)>,
    layer: usize,
    name: &str,
    x: Var,
) -> Result<Var> {
    let y = linear(tape, p, &format!("lm/block{layer}.{name}"), x)?;
    let Some((lp, scale)) = lora else { return Ok(y) };
    let a = lp.get(&format!("lora/block{layer}.{name}.a"))?;
    let b = lp.get(&format!("lora/block{layer}.{name}.b"))?;
    let t = tape.matmul(x, a)?;
    let t = tape.matmul(t, b)?;
    let t = tape.scale(t, scale);
    Ok(tape.add(y, t)?)
}

/// Embedding stage: token rows, placeholder row replaced by `e_bev`, then
/// positional rows added. Returns `[L×d]`.
pub fn embed<T: Scalar>(tape: &mut Tape<'_, T>, p: &Bound, ids: &[usize], e_bev: Var) -> Result<Var> {
    validate_ids(ids)?;
    let tok = tape.embedding(p.get("lm/tok_emb")?, ids)?;
    let x = tape.replace_row(tok, PLACEHOLDER_POS, e_bev)?;
    let pos = tape.slice_rows(p.get("lm/pos_emb")?, 0, ids.len())?;
    Ok(tape.add(x, pos)?)
}

/// Logits `[L×V]` for `ids` with the placeholder row set to `e_bev` (`[1×d]`).
pub fn forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &LmConfig,
    p: &Bound,
    lora: Option<(&Bound, &LoraConfig)>,
    ids: &[usize],
    e_bev: Var,
) -> Result<Var> {
    if ids.len() > cfg.max_len {
        return Err(BellaError::SequenceTooLong {
            len: ids.len(),
            max: cfg.max_len,
            detail: "forward".into(),
        });
    }
    if tape.shape(e_bev) != [1, cfg.d_model] {
        return Err(BellaError::Config(format!(
            "BEV embedding {:?} does not match width {}",
            tape.shape(e_bev),
            cfg.d_model
        )));
    }
    let lora = lora.map(|(b, c)| (b, T::from_f64(c.scaling())));
    let mut x = embed(tape, p, ids, e_bev)?;
    for l in 0..cfg.n_layers {
        let h = norm(tape, p, &format!("lm/block{l}.ln1"), x)?;
        let q = adapted_linear(tape, p, lora, l, "attn.q", h)?;
        let k = adapted_linear(tape, p, lora, l, "attn.k", h)?;
        let v = adapted_linear(tape, p, lora, l, "attn.v", h)?;
        let a = tape.causal_attention(q, k, v, cfg.n_heads)?;
        let o = adapted_linear(tape, p, lora, l, "attn.o", a)?;
        x = tape.add(x, o)?;
        let h = norm(tape, p, &format!("lm/block{l}.ln2"), x)?;
        let f = adapted_linear(tape, p, lora, l, "ff.up", h)?;
        let f = tape.gelu(f);
        let f = adapted_linear(tape, p, lora, l, "ff.down", f)?;
        x = tape.add(x, f)?;
    }
    let x = norm(tape, p, "lm/ln_f", x)?;
    linear(tape, p, "lm/head", x)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding after `prefix` until EOS or `max_new` tokens. The
/// returned ids exclude EOS.
pub fn generate(
    lm: &MicroLm,
    lora: Option<(&ParamStore, &LoraConfig)>,
    prefix: &[usize],
    e_bev: &Tensor<f32>,
    max_new: usize,
) -> Result<Vec<usize>> {
    if max_new == 0 {
        return Err(BellaError::Prompt("max_new must be at least 1".into()));
    }
    let mut ids = prefix.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        if ids.len() >= lm.cfg.max_len {
            break;
        }
        let mut tape = Tape::new();
        let p = Bound::bind(&mut tape, &lm.params);
        let lb = lora.map(|(s, _)| Bound::bind(&mut tape, s));
        let e = tape.leaf(e_bev);
        let logits = forward(&mut tape, &lm.cfg, &p, lb.as_ref().zip(lora.map(|l| l.1)), &ids, e)?;
        let lv = tape.value(logits);
        let next = argmax(lv.row(ids.len() - 1));
        if next == EOS {
            break;
        }
        out.push(next);
        ids.push(next);
    }
    Ok(out)
}

/// Logits without gradients.
pub fn logits_value(
    lm: &MicroLm,
    lora: Option<(&ParamStore, &LoraConfig)>,
    ids: &[usize],
    e_bev: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let p = Bound::bind(&mut tape, &lm.params);
    let lb = lora.map(|(s, _)| Bound::bind(&mut tape, s));
    let e = tape.leaf(e_bev);
    let logits = forward(&mut tape, &lm.cfg, &p, lb.as_ref().zip(lora.map(|l| l.1)), ids, e)?;
    Ok(tape.value(logits).clone())
}

/// Checks that the vocabulary used for prompts matches the model head.
pub fn check_vocab(cfg: &LmConfig, vocab: &Vocab) -> Result<()> {
    if cfg.vocab_size != vocab.len() {
        return Err(BellaError::VocabMismatch(format!(
            "model has {} output tokens, vocabulary has {}",
            cfg.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}
