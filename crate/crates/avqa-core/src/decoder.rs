//! Small causal decoder with a corpus-derived vocabulary.
//!
//! The language model is deliberately tiny — a handful of pre-norm
//! transformer blocks whose attention projections are LoRA-wrapped (the
//! projection weights themselves stay frozen at init; only the low-rank
//! factors train). The token embedding doubles as the output projection
//! (weight tying), and decoding is greedy with ties broken toward the lowest
//! token id so generation is fully deterministic.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fusion::{feed_forward, FeedForward, LN_EPS};
use crate::graph::{Graph, TensorId};
use crate::lora::{lora_forward, BoundLora, LoraConfig, LoraLinear};
use crate::param::{Bindings, Param};

// ── vocabulary ──────────────────────────────────────────────────────────

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token table: four reserved ids, then corpus tokens in lexicographic
/// order. Built once from the training corpus and serialized alongside
/// checkpoints so generation is reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Collects all distinct tokens from the corpus (already-normalized or
    /// raw text — it is tokenized here either way).
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut set = std::collections::BTreeSet::new();
        for line in corpus {
            for tok in crate::text::tokenize_text(line) {
                set.insert(tok);
            }
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(set); // BTreeSet iterates in lexicographic order
        Vocab::from_tokens(tokens).expect("reserved prefix is well-formed")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < RESERVED.len()
            || tokens[..RESERVED.len()] != RESERVED.map(String::from)
        {
            return Err(CoreError::Format(
                "vocabulary must start with <pad>, <bos>, <eos>, <unk>".into(),
            ));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CoreError::Format(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Text to token ids (no BOS/EOS framing — callers add those).
    pub fn encode(&self, text: &str) -> Vec<usize> {
        crate::text::tokenize_text(text).iter().map(|t| self.id(t)).collect()
    }

    /// Ids back to text; reserved ids are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= RESERVED.len() && id < self.tokens.len())
            .map(|&id| self.tokens[id].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = CoreError;
    fn try_from(tokens: Vec<String>) -> Result<Vocab> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Vec<String> {
        v.tokens
    }
}

// ── decoder ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
}

impl DecoderConfig {
    pub fn lora(&self) -> LoraConfig {
        LoraConfig { rank: self.lora_rank, alpha: self.lora_alpha, dropout: self.lora_dropout }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(CoreError::Config(format!(
                "model_dim {} must be divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.n_blocks == 0 || self.max_len == 0 || self.vocab_size <= UNK_ID {
            return Err(CoreError::Config("decoder dimensions must be positive".into()));
        }
        self.lora().validate(self.model_dim, self.model_dim)
    }
}

/// One pre-norm block: LayerNorm, causal self-attention with LoRA-wrapped
/// q/k/v/output projections, residual; LayerNorm, feed-forward, residual.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln1_gain: Param,
    pub ln1_bias: Param,
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub o: LoraLinear,
    pub ln2_gain: Param,
    pub ln2_bias: Param,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    fn new(prefix: &str, cfg: &DecoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.model_dim;
        let lora = cfg.lora();
        Ok(DecoderBlock {
            ln1_gain: Param::full(format!("{prefix}.ln1.gain"), &[d], 1.0),
            ln1_bias: Param::zeros(format!("{prefix}.ln1.bias"), &[d]),
            q: LoraLinear::new(&format!("{prefix}.attn.q"), d, d, true, lora, rng)?,
            k: LoraLinear::new(&format!("{prefix}.attn.k"), d, d, true, lora, rng)?,
            v: LoraLinear::new(&format!("{prefix}.attn.v"), d, d, true, lora, rng)?,
            o: LoraLinear::new(&format!("{prefix}.attn.o"), d, d, true, lora, rng)?,
            ln2_gain: Param::full(format!("{prefix}.ln2.gain"), &[d], 1.0),
            ln2_bias: Param::zeros(format!("{prefix}.ln2.bias"), &[d]),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), d, cfg.ffn_mult * d, rng),
        })
    }

    /// Every weight, frozen ones included (for checkpoints).
    pub fn all_params(&self) -> Vec<&Param> {
        let mut ps = vec![&self.ln1_gain, &self.ln1_bias];
        for l in [&self.q, &self.k, &self.v, &self.o] {
            ps.extend(l.all_params());
        }
        ps.push(&self.ln2_gain);
        ps.push(&self.ln2_bias);
        ps.extend(self.ffn.params());
        ps
    }

    /// Weights the optimizer may touch: norms, adapters, feed-forward. The
    /// wrapped projection bases stay frozen.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = vec![&mut self.ln1_gain, &mut self.ln1_bias];
        for l in [&mut self.q, &mut self.k, &mut self.v, &mut self.o] {
            ps.extend(l.adapter_params_mut());
        }
        ps.push(&mut self.ln2_gain);
        ps.push(&mut self.ln2_bias);
        ps.extend(self.ffn.params_mut());
        ps
    }

    /// Every weight mutably, frozen ones included (for checkpoint loading).
    pub fn all_params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = vec![&mut self.ln1_gain, &mut self.ln1_bias];
        for l in [&mut self.q, &mut self.k, &mut self.v, &mut self.o] {
            let LoraLinear { base_w, base_b, a, b, .. } = l;
            ps.push(base_w);
            if let Some(bb) = base_b {
                ps.push(bb);
            }
            ps.push(a);
            ps.push(b);
        }
        ps.push(&mut self.ln2_gain);
        ps.push(&mut self.ln2_bias);
        ps.extend(self.ffn.params_mut());
        ps
    }
}

/// The decoder stack plus its embeddings.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    /// `[vocab, model_dim]`; also the (tied) output projection.
    pub tok_embed: Param,
    /// `[max_len, model_dim]` learned positions.
    pub pos_embed: Param,
    pub blocks: Vec<DecoderBlock>,
    pub ln_f_gain: Param,
    pub ln_f_bias: Param,
}

impl Decoder {
    pub fn new(prefix: &str, config: DecoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let tok_embed = Param::uniform(format!("{prefix}.tok_embed"), &[config.vocab_size, d], bound, rng);
        let pos_embed = Param::uniform(format!("{prefix}.pos_embed"), &[config.max_len, d], bound, rng);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            blocks.push(DecoderBlock::new(&format!("{prefix}.b{i}"), &config, rng)?);
        }
        Ok(Decoder {
            config,
            tok_embed,
            pos_embed,
            blocks,
            ln_f_gain: Param::full(format!("{prefix}.ln_f.gain"), &[d], 1.0),
            ln_f_bias: Param::zeros(format!("{prefix}.ln_f.bias"), &[d]),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.config.model_dim / self.config.n_heads
    }

    pub fn all_params(&self) -> Vec<&Param> {
        let mut ps = vec![&self.tok_embed, &self.pos_embed];
        for b in &self.blocks {
            ps.extend(b.all_params());
        }
        ps.push(&self.ln_f_gain);
        ps.push(&self.ln_f_bias);
        ps
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = vec![&mut self.tok_embed, &mut self.pos_embed];
        for b in &mut self.blocks {
            ps.extend(b.trainable_params_mut());
        }
        ps.push(&mut self.ln_f_gain);
        ps.push(&mut self.ln_f_bias);
        ps
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = vec![&mut self.tok_embed, &mut self.pos_embed];
        for b in &mut self.blocks {
            ps.extend(b.all_params_mut());
        }
        ps.push(&mut self.ln_f_gain);
        ps.push(&mut self.ln_f_bias);
        ps
    }

    pub fn bind(&self, g: &mut Graph, binds: &mut Bindings, trainable: bool) -> Result<BoundDecoder> {
        let bind_one = |g: &mut Graph, binds: &mut Bindings, p: &Param, t: bool| {
            if t { binds.bind(g, p) } else { binds.bind_frozen(g, p) }
        };
        let tok_embed = bind_one(g, binds, &self.tok_embed, trainable)?;
        let pos_embed = bind_one(g, binds, &self.pos_embed, trainable)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            blocks.push(BoundDecoderBlock {
                ln1: (
                    bind_one(g, binds, &b.ln1_gain, trainable)?,
                    bind_one(g, binds, &b.ln1_bias, trainable)?,
                ),
                q: b.q.bind(g, binds, !trainable)?,
                k: b.k.bind(g, binds, !trainable)?,
                v: b.v.bind(g, binds, !trainable)?,
                o: b.o.bind(g, binds, !trainable)?,
                ln2: (
                    bind_one(g, binds, &b.ln2_gain, trainable)?,
                    bind_one(g, binds, &b.ln2_bias, trainable)?,
                ),
                ffn: [
                    bind_one(g, binds, &b.ffn.w1, trainable)?,
                    bind_one(g, binds, &b.ffn.b1, trainable)?,
                    bind_one(g, binds, &b.ffn.w2, trainable)?,
                    bind_one(g, binds, &b.ffn.b2, trainable)?,
                ],
            });
        }
        let ln_f = (
            bind_one(g, binds, &self.ln_f_gain, trainable)?,
            bind_one(g, binds, &self.ln_f_bias, trainable)?,
        );
        Ok(BoundDecoder {
            tok_embed,
            pos_embed,
            blocks,
            ln_f,
            n_heads: self.config.n_heads,
            head_dim: self.head_dim(),
            max_len: self.config.max_len,
        })
    }
}

pub struct BoundDecoderBlock {
    ln1: (TensorId, TensorId),
    q: BoundLora,
    k: BoundLora,
    v: BoundLora,
    o: BoundLora,
    ln2: (TensorId, TensorId),
    ffn: [TensorId; 4],
}

pub struct BoundDecoder {
    pub tok_embed: TensorId,
    pub pos_embed: TensorId,
    blocks: Vec<BoundDecoderBlock>,
    ln_f: (TensorId, TensorId),
    n_heads: usize,
    head_dim: usize,
    max_len: usize,
}

fn block_forward(
    g: &mut Graph,
    block: &BoundDecoderBlock,
    x: TensorId,
    n_heads: usize,
    head_dim: usize,
    seed: u64,
) -> Result<TensorId> {
    let normed = g.layernorm(x, block.ln1.0, block.ln1.1, LN_EPS)?;
    let q = lora_forward(g, &block.q, normed, derive_seed(seed, 1))?;
    let k = lora_forward(g, &block.k, normed, derive_seed(seed, 2))?;
    let v = lora_forward(g, &block.v, normed, derive_seed(seed, 3))?;

    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.affine(scores, scale, 0.0)?;
        let masked = g.causal_mask(scaled)?;
        let weights = g.softmax_rows(masked)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let attn_out = lora_forward(g, &block.o, merged, derive_seed(seed, 4))?;
    let x = g.add(x, attn_out)?;

    let normed2 = g.layernorm(x, block.ln2.0, block.ln2.1, LN_EPS)?;
    let ffn_out = feed_forward(g, &block.ffn, normed2)?;
    g.add(x, ffn_out)
}

/// Runs the stack over `[prefix rows; embedded tokens]` and returns logits
/// for every position (`[prefix_len + token_len, vocab]`). The prefix, when
/// present, occupies the leading positions as already-embedded context rows;
/// answer tokens follow it. Positional embeddings cover the whole sequence.
pub fn decoder_logits(
    g: &mut Graph,
    dec: &BoundDecoder,
    prefix: Option<TensorId>,
    token_ids: &[usize],
    seed: u64,
) -> Result<TensorId> {
    if token_ids.is_empty() && prefix.is_none() {
        return Err(CoreError::InvalidShape {
            op: "decoder_logits",
            shape: vec![0],
            reason: "need a prefix or at least one token".into(),
        });
    }
    let prefix_len = match prefix {
        Some(p) => g.shape(p)[0],
        None => 0,
    };
    let total = prefix_len + token_ids.len();
    if total > dec.max_len {
        return Err(CoreError::TooLong { what: "decoder sequence", len: total, max: dec.max_len });
    }

    let mut parts = Vec::new();
    if let Some(p) = prefix {
        parts.push(p);
    }
    if !token_ids.is_empty() {
        parts.push(g.embedding(dec.tok_embed, token_ids)?);
    }
    let x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
    let pos = g.slice_rows(dec.pos_embed, 0, total)?;
    let mut x = g.add(x, pos)?;

    for (i, block) in dec.blocks.iter().enumerate() {
        x = block_forward(g, block, x, dec.n_heads, dec.head_dim, derive_seed(seed, 100 + i as u64))?;
    }
    let x = g.layernorm(x, dec.ln_f.0, dec.ln_f.1, LN_EPS)?;
    // Tied output head: project onto the embedding table.
    let table_t = g.transpose(dec.tok_embed)?;
    g.matmul(x, table_t)
}

/// Index of the maximum entry; ties resolve to the lowest index so decoding
/// never depends on float comparison order.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Cheap deterministic stream splitter (splitmix64 finalizer) for deriving
/// per-layer dropout seeds from one base seed.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
