//! Gated cross-modal fusion: question tokens attend over encoded video
//! frames, and a per-token, per-channel gate (computed from the text alone)
//! decides how much of the attended video signal is let through.
//!
//! For queries `X` (`[L, model_dim]` question-token embeddings) and keys
//! `H` (`[T, kv_dim]` encoded frames):
//!
//! ```text
//! A      = multi-head softmax(Q K^T / sqrt(d_k)) V, projected back to model_dim
//! g      = sigmoid(W_g X + b_g)            gates, text-only
//! H_t    = LayerNorm(X + g * A)            gated residual
//! Z      = LayerNorm(H_t + FFN(H_t))       position-wise feed-forward, tanh
//! ```
//!
//! Saturating the gate bias negative cuts the video pathway entirely (the
//! gated contribution falls below f64 resolution, so `Z` is bit-invariant to
//! the frames); saturating it positive recovers plain ungated cross-attention.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, TensorId};
use crate::param::{Bindings, Param};

/// Layer-norm epsilon used across the fusion block.
pub const LN_EPS: f64 = 1e-5;

// ── multi-head cross attention ──────────────────────────────────────────

/// Per-head projections. Queries come from the text side (`model_dim`),
/// keys/values from the video side (`kv_dim`); the output projection maps
/// the concatenated heads back to `model_dim`.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub model_dim: usize,
    pub kv_dim: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub w_q: Vec<Param>,
    pub w_k: Vec<Param>,
    pub w_v: Vec<Param>,
    pub w_o: Param,
}

impl CrossAttention {
    pub fn new(prefix: &str, model_dim: usize, kv_dim: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_heads == 0 || model_dim % n_heads != 0 {
            return Err(CoreError::Config(format!(
                "model_dim {model_dim} must be divisible by n_heads {n_heads}"
            )));
        }
        let head_dim = model_dim / n_heads;
        let qb = 1.0 / (model_dim as f64).sqrt();
        let kb = 1.0 / (kv_dim as f64).sqrt();
        let mut w_q = Vec::with_capacity(n_heads);
        let mut w_k = Vec::with_capacity(n_heads);
        let mut w_v = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            w_q.push(Param::uniform(format!("{prefix}.q{h}"), &[head_dim, model_dim], qb, rng));
            w_k.push(Param::uniform(format!("{prefix}.k{h}"), &[head_dim, kv_dim], kb, rng));
            w_v.push(Param::uniform(format!("{prefix}.v{h}"), &[head_dim, kv_dim], kb, rng));
        }
        let w_o = Param::uniform(format!("{prefix}.o"), &[model_dim, n_heads * head_dim], qb, rng);
        Ok(CrossAttention { model_dim, kv_dim, n_heads, head_dim, w_q, w_k, w_v, w_o })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps: Vec<&Param> = Vec::new();
        for h in 0..self.n_heads {
            ps.push(&self.w_q[h]);
            ps.push(&self.w_k[h]);
            ps.push(&self.w_v[h]);
        }
        ps.push(&self.w_o);
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps: Vec<&mut Param> = Vec::new();
        for (q, (k, v)) in self.w_q.iter_mut().zip(self.w_k.iter_mut().zip(self.w_v.iter_mut())) {
            ps.push(q);
            ps.push(k);
            ps.push(v);
        }
        ps.push(&mut self.w_o);
        ps
    }

    pub fn bind(&self, g: &mut Graph, binds: &mut Bindings, trainable: bool) -> Result<BoundCrossAttention> {
        let mut bind_one = |g: &mut Graph, p: &Param| {
            if trainable { binds.bind(g, p) } else { binds.bind_frozen(g, p) }
        };
        let mut w_q = Vec::new();
        let mut w_k = Vec::new();
        let mut w_v = Vec::new();
        for h in 0..self.n_heads {
            w_q.push(bind_one(g, &self.w_q[h])?);
            w_k.push(bind_one(g, &self.w_k[h])?);
            w_v.push(bind_one(g, &self.w_v[h])?);
        }
        let w_o = bind_one(g, &self.w_o)?;
        Ok(BoundCrossAttention {
            w_q,
            w_k,
            w_v,
            w_o,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BoundCrossAttention {
    w_q: Vec<TensorId>,
    w_k: Vec<TensorId>,
    w_v: Vec<TensorId>,
    w_o: TensorId,
    pub n_heads: usize,
    pub head_dim: usize,
}

/// Attended values (`[L, model_dim]`) plus the per-head attention weight
/// matrices (`[L, T]` each) for inspection.
pub fn cross_attend(
    g: &mut Graph,
    attn: &BoundCrossAttention,
    x_text: TensorId,
    h_video: TensorId,
) -> Result<(TensorId, Vec<TensorId>)> {
    let scale = 1.0 / (attn.head_dim as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(attn.n_heads);
    let mut head_weights = Vec::with_capacity(attn.n_heads);
    for h in 0..attn.n_heads {
        let q = g.linear(x_text, attn.w_q[h], None)?;
        let k = g.linear(h_video, attn.w_k[h], None)?;
        let v = g.linear(h_video, attn.w_v[h], None)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scaled = g.affine(scores, scale, 0.0)?;
        let weights = g.softmax_rows(scaled)?;
        let attended = g.matmul(weights, v)?;
        head_outputs.push(attended);
        head_weights.push(weights);
    }
    let merged = if head_outputs.len() == 1 {
        head_outputs[0]
    } else {
        g.concat_cols(&head_outputs)?
    };
    let out = g.linear(merged, attn.w_o, None)?;
    Ok((out, head_weights))
}

// ── gate ────────────────────────────────────────────────────────────────

/// Per-token, per-channel sigmoid gate computed from the text only.
#[derive(Debug, Clone)]
pub struct Gate {
    pub w_g: Param,
    pub b_g: Param,
}

impl Gate {
    /// Small uniform weight, zero bias: every gate starts at 1/2, leaving the
    /// optimizer free to open or close each channel.
    pub fn new(prefix: &str, model_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 0.1 / (model_dim as f64).sqrt();
        Gate {
            w_g: Param::uniform(format!("{prefix}.w_g"), &[model_dim, model_dim], bound, rng),
            b_g: Param::zeros(format!("{prefix}.b_g"), &[model_dim]),
        }
    }

    /// Pins the gate: zero weight and constant bias. Strongly negative bias
    /// shuts the video pathway; strongly positive opens it fully.
    pub fn force(&mut self, bias: f64) {
        for v in &mut self.w_g.data {
            *v = 0.0;
        }
        for v in &mut self.b_g.data {
            *v = bias;
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w_g, &self.b_g]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_g, &mut self.b_g]
    }
}

// ── feed-forward ────────────────────────────────────────────────────────

/// Two-layer position-wise feed-forward with tanh, expansion factor
/// `hidden_dim / model_dim`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl FeedForward {
    pub fn new(prefix: &str, model_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let b1 = 1.0 / (model_dim as f64).sqrt();
        let b2 = 1.0 / (hidden_dim as f64).sqrt();
        FeedForward {
            w1: Param::uniform(format!("{prefix}.w1"), &[hidden_dim, model_dim], b1, rng),
            b1: Param::zeros(format!("{prefix}.b1"), &[hidden_dim]),
            w2: Param::uniform(format!("{prefix}.w2"), &[model_dim, hidden_dim], b2, rng),
            b2: Param::zeros(format!("{prefix}.b2"), &[model_dim]),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Applies `w2 tanh(w1 x + b1) + b2` given bound parameter ids in the order
/// returned by [`FeedForward::params`].
pub fn feed_forward(g: &mut Graph, ids: &[TensorId; 4], x: TensorId) -> Result<TensorId> {
    let hidden = g.linear(x, ids[0], Some(ids[1]))?;
    let hidden = g.tanh(hidden)?;
    g.linear(hidden, ids[2], Some(ids[3]))
}

// ── the full block ──────────────────────────────────────────────────────

/// All weights of the fusion block.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub attn: CrossAttention,
    pub gate: Gate,
    pub ln1_gain: Param,
    pub ln1_bias: Param,
    pub ffn: FeedForward,
    pub ln2_gain: Param,
    pub ln2_bias: Param,
}

impl FusionBlock {
    pub fn new(prefix: &str, model_dim: usize, kv_dim: usize, n_heads: usize, ffn_mult: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(FusionBlock {
            attn: CrossAttention::new(&format!("{prefix}.attn"), model_dim, kv_dim, n_heads, rng)?,
            gate: Gate::new(&format!("{prefix}.gate"), model_dim, rng),
            ln1_gain: Param::full(format!("{prefix}.ln1.gain"), &[model_dim], 1.0),
            ln1_bias: Param::zeros(format!("{prefix}.ln1.bias"), &[model_dim]),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), model_dim, ffn_mult * model_dim, rng),
            ln2_gain: Param::full(format!("{prefix}.ln2.gain"), &[model_dim], 1.0),
            ln2_bias: Param::zeros(format!("{prefix}.ln2.bias"), &[model_dim]),
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps = self.attn.params();
        ps.extend(self.gate.params());
        ps.push(&self.ln1_gain);
        ps.push(&self.ln1_bias);
        ps.extend(self.ffn.params());
        ps.push(&self.ln2_gain);
        ps.push(&self.ln2_bias);
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.attn.params_mut();
        ps.extend(self.gate.params_mut());
        ps.push(&mut self.ln1_gain);
        ps.push(&mut self.ln1_bias);
        ps.extend(self.ffn.params_mut());
        ps.push(&mut self.ln2_gain);
        ps.push(&mut self.ln2_bias);
        ps
    }
}

/// Detached copies of everything the block computed, for diagnostics and
/// tests. Row-major, shapes given by the length fields.
#[derive(Debug, Clone, Serialize)]
pub struct FusionState {
    pub query_len: usize,
    pub key_len: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub kv_dim: usize,
    /// Encoded video `H` as seen by the block, `[key_len, kv_dim]`.
    pub video_encoding: Vec<f64>,
    /// Per-head attention weights, each `[query_len, key_len]`.
    pub attn_weights: Vec<Vec<f64>>,
    /// Attended values before gating, `[query_len, model_dim]`.
    pub attended: Vec<f64>,
    /// Gate activations, `[query_len, model_dim]`.
    pub gates: Vec<f64>,
    /// Gated attended values, `[query_len, model_dim]`.
    pub gated: Vec<f64>,
    /// Post-attention normalized text, `[query_len, model_dim]`.
    pub normed_text: Vec<f64>,
    /// Final fused representation `Z`, `[query_len, model_dim]`.
    pub fused: Vec<f64>,
}

impl FusionState {
    /// Per-query-token `(min, mean, max)` of the gate activations.
    pub fn gate_stats(&self) -> Vec<(f64, f64, f64)> {
        let d = self.model_dim;
        (0..self.query_len)
            .map(|i| {
                let row = &self.gates[i * d..(i + 1) * d];
                let min = row.iter().copied().fold(f64::INFINITY, f64::min);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mean = row.iter().sum::<f64>() / d as f64;
                (min, mean, max)
            })
            .collect()
    }
}

/// Bound ids for one forward pass of the block.
pub struct BoundFusionBlock {
    pub attn: BoundCrossAttention,
    pub w_g: TensorId,
    pub b_g: TensorId,
    pub ln1_gain: TensorId,
    pub ln1_bias: TensorId,
    pub ffn: [TensorId; 4],
    pub ln2_gain: TensorId,
    pub ln2_bias: TensorId,
}

impl FusionBlock {
    /// `gate_trainable` is split out so ablations can keep a pinned gate
    /// frozen while the rest of the block trains.
    pub fn bind(
        &self,
        g: &mut Graph,
        binds: &mut Bindings,
        trainable: bool,
        gate_trainable: bool,
    ) -> Result<BoundFusionBlock> {
        let attn = self.attn.bind(g, binds, trainable)?;
        let mut bind_one = |g: &mut Graph, p: &Param, t: bool| {
            if t { binds.bind(g, p) } else { binds.bind_frozen(g, p) }
        };
        let w_g = bind_one(g, &self.gate.w_g, trainable && gate_trainable)?;
        let b_g = bind_one(g, &self.gate.b_g, trainable && gate_trainable)?;
        let ln1_gain = bind_one(g, &self.ln1_gain, trainable)?;
        let ln1_bias = bind_one(g, &self.ln1_bias, trainable)?;
        let ffn = [
            bind_one(g, &self.ffn.w1, trainable)?,
            bind_one(g, &self.ffn.b1, trainable)?,
            bind_one(g, &self.ffn.w2, trainable)?,
            bind_one(g, &self.ffn.b2, trainable)?,
        ];
        let ln2_gain = bind_one(g, &self.ln2_gain, trainable)?;
        let ln2_bias = bind_one(g, &self.ln2_bias, trainable)?;
        Ok(BoundFusionBlock { attn, w_g, b_g, ln1_gain, ln1_bias, ffn, ln2_gain, ln2_bias })
    }
}

/// Runs the whole block: cross attention, text-conditioned gating, gated
/// residual + LayerNorm, feed-forward residual + LayerNorm. Returns the
/// fused tensor id plus a detached [`FusionState`].
pub fn fusion_block(
    g: &mut Graph,
    block: &BoundFusionBlock,
    x_text: TensorId,
    h_video: TensorId,
) -> Result<(TensorId, FusionState)> {
    let (l, model_dim) = match g.shape(x_text) {
        &[l, d] => (l, d),
        other => {
            return Err(CoreError::InvalidShape {
                op: "fusion_block",
                shape: other.to_vec(),
                reason: "text input must be [L, model_dim]".into(),
            })
        }
    };
    let (t, kv_dim) = match g.shape(h_video) {
        &[t, d] => (t, d),
        other => {
            return Err(CoreError::InvalidShape {
                op: "fusion_block",
                shape: other.to_vec(),
                reason: "video input must be [T, kv_dim]".into(),
            })
        }
    };

    let (attended, head_weights) = cross_attend(g, &block.attn, x_text, h_video)?;

    let gate_pre = g.linear(x_text, block.w_g, Some(block.b_g))?;
    let gates = g.sigmoid(gate_pre)?;
    let gated = g.mul(gates, attended)?;

    let res1 = g.add(x_text, gated)?;
    let h_t = g.layernorm(res1, block.ln1_gain, block.ln1_bias, LN_EPS)?;

    let ffn_out = feed_forward(g, &block.ffn, h_t)?;
    let res2 = g.add(h_t, ffn_out)?;
    let z = g.layernorm(res2, block.ln2_gain, block.ln2_bias, LN_EPS)?;

    let state = FusionState {
        query_len: l,
        key_len: t,
        n_heads: block.attn.n_heads,
        model_dim,
        kv_dim,
        video_encoding: g.data(h_video).to_vec(),
        attn_weights: head_weights.iter().map(|&w| g.data(w).to_vec()).collect(),
        attended: g.data(attended).to_vec(),
        gates: g.data(gates).to_vec(),
        gated: g.data(gated).to_vec(),
        normed_text: g.data(h_t).to_vec(),
        fused: g.data(z).to_vec(),
    };
    Ok((z, state))
}
