//! The assembled anticipation model: frames → bidirectional GRU → gated
//! cross-attention fusion with the question tokens → fused rows as prefix
//! context for the causal decoder, which generates the answer.
//!
//! Three variants exist for controlled comparisons:
//! * `Full` — the architecture as designed;
//! * `GateClosed` — the fusion gate pinned hard shut (and frozen), so the
//!   answer provably cannot depend on the video;
//! * `MeanPool` — the recurrent encoder replaced by a temporal mean over
//!   frames, destroying order information.

use serde::{Deserialize, Serialize};

use crate::decoder::{decoder_logits, derive_seed, argmax_lowest, Decoder, DecoderConfig, Vocab, BOS_ID, EOS_ID};
use crate::error::{CoreError, Result};
use crate::fusion::{fusion_block, FusionBlock, FusionState};
use crate::graph::{Graph, TensorId};
use crate::gru::{encode_bidirectional, BiGru};
use crate::param::{init_rng, Bindings, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    Full,
    GateClosed,
    MeanPool,
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelVariant::Full => write!(f, "full"),
            ModelVariant::GateClosed => write!(f, "gate-closed"),
            ModelVariant::MeanPool => write!(f, "mean-pool"),
        }
    }
}

/// Bias value used to pin the gate shut in the `GateClosed` variant. At
/// sigmoid(-100) the gated video contribution is ~1e-44 of the attended
/// values — far below f64 resolution next to O(1) embeddings, so the fused
/// output is bit-invariant to the frames.
pub const CLOSED_GATE_BIAS: f64 = -100.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Per-frame feature dimension D.
    pub frame_dim: usize,
    /// GRU hidden width H (the video pathway's output dimension).
    pub gru_hidden: usize,
    /// Shared text/model width.
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub n_blocks: usize,
    pub max_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    /// Whether the two GRU directions share weights.
    pub tied_gru: bool,
    pub variant: ModelVariant,
}

impl ModelConfig {
    /// Desk-scale defaults; `frame_dim` is dataset-driven.
    pub fn small(frame_dim: usize) -> Self {
        ModelConfig {
            frame_dim,
            gru_hidden: frame_dim,
            model_dim: 64,
            n_heads: 4,
            ffn_mult: 4,
            n_blocks: 2,
            max_len: 128,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_dropout: 0.1,
            tied_gru: false,
            variant: ModelVariant::Full,
        }
    }
}

/// One training/evaluation item as the model consumes it.
#[derive(Debug, Clone)]
pub struct Sample {
    pub question_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
    /// Row-major `[t_len, frame_dim]` frame features.
    pub frames: Vec<f64>,
    pub t_len: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    /// Absent in the `MeanPool` variant.
    pub encoder: Option<BiGru>,
    pub fusion: FusionBlock,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Model> {
        if config.frame_dim == 0 || config.gru_hidden == 0 {
            return Err(CoreError::Config("frame/hidden dimensions must be positive".into()));
        }
        let mut rng = init_rng(seed);
        let encoder = match config.variant {
            ModelVariant::MeanPool => None,
            _ => Some(BiGru::new("encoder", config.frame_dim, config.gru_hidden, config.tied_gru, &mut rng)),
        };
        // The fusion keys/values come from the GRU states, or straight from
        // the pooled frame features when the encoder is ablated away.
        let kv_dim = if encoder.is_some() { config.gru_hidden } else { config.frame_dim };
        let mut fusion = FusionBlock::new("fusion", config.model_dim, kv_dim, config.n_heads, config.ffn_mult, &mut rng)?;
        if config.variant == ModelVariant::GateClosed {
            fusion.gate.force(CLOSED_GATE_BIAS);
        }
        let dec_cfg = DecoderConfig {
            vocab_size: vocab.size(),
            model_dim: config.model_dim,
            n_heads: config.n_heads,
            n_blocks: config.n_blocks,
            max_len: config.max_len,
            ffn_mult: config.ffn_mult,
            lora_rank: config.lora_rank,
            lora_alpha: config.lora_alpha,
            lora_dropout: config.lora_dropout,
        };
        let decoder = Decoder::new("decoder", dec_cfg, &mut rng)?;
        Ok(Model { config, vocab, encoder, fusion, decoder })
    }

    // ── parameter access ─────────────────────────────────────────────────

    /// Every weight, frozen ones included, in stable order (checkpoints).
    pub fn all_params(&self) -> Vec<&Param> {
        let mut ps = Vec::new();
        if let Some(enc) = &self.encoder {
            ps.extend(enc.params());
        }
        ps.extend(self.fusion.params());
        ps.extend(self.decoder.all_params());
        ps
    }

    /// Weights the optimizer may update for this variant.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        let gate_frozen = self.config.variant == ModelVariant::GateClosed;
        let mut ps: Vec<&mut Param> = Vec::new();
        if let Some(enc) = &mut self.encoder {
            ps.extend(enc.params_mut());
        }
        for p in self.fusion.params_mut() {
            if gate_frozen && (p.name.ends_with(".w_g") || p.name.ends_with(".b_g")) {
                continue;
            }
            ps.push(p);
        }
        ps.extend(self.decoder.trainable_params_mut());
        ps
    }

    pub fn trainable_names(&mut self) -> Vec<String> {
        self.trainable_params_mut().iter().map(|p| p.name.clone()).collect()
    }

    /// Replaces parameter data from a loaded checkpoint. Strict: names and
    /// shapes must match the model exactly.
    pub fn load_state(&mut self, tensors: Vec<Param>) -> Result<()> {
        use std::collections::BTreeMap;
        let mut incoming: BTreeMap<String, Param> = tensors.into_iter().map(|p| (p.name.clone(), p)).collect();
        let mut own: Vec<&mut Param> = Vec::new();
        if let Some(enc) = &mut self.encoder {
            own.extend(enc.params_mut());
        }
        own.extend(self.fusion.params_mut());
        own.extend(self.decoder.all_params_mut());
        for p in own {
            let loaded = incoming.remove(&p.name).ok_or_else(|| {
                CoreError::Format(format!("checkpoint missing tensor `{}`", p.name))
            })?;
            if loaded.shape != p.shape {
                return Err(CoreError::Format(format!(
                    "checkpoint tensor `{}` has shape {:?}, expected {:?}",
                    p.name, loaded.shape, p.shape
                )));
            }
            p.data = loaded.data;
        }
        if let Some((name, _)) = incoming.into_iter().next() {
            return Err(CoreError::Format(format!("checkpoint has unknown tensor `{name}`")));
        }
        Ok(())
    }

    // ── forward passes ───────────────────────────────────────────────────

    fn check_frames(&self, frames: &[f64], t_len: usize) -> Result<()> {
        if t_len == 0 || frames.len() != t_len * self.config.frame_dim {
            return Err(CoreError::InvalidShape {
                op: "model frames",
                shape: vec![t_len, self.config.frame_dim],
                reason: format!("got {} values", frames.len()),
            });
        }
        Ok(())
    }

    /// Builds the video pathway onto a graph: encoded states for the
    /// recurrent variants, the temporal mean for `MeanPool`.
    fn video_pathway(
        &self,
        g: &mut Graph,
        binds: &mut Bindings,
        frames: &[f64],
        t_len: usize,
        trainable: bool,
    ) -> Result<TensorId> {
        let f = g.input(frames.to_vec(), &[t_len, self.config.frame_dim])?;
        match &self.encoder {
            Some(enc) => {
                let bound = enc.bind(g, binds, trainable)?;
                encode_bidirectional(g, &bound, f)
            }
            None => g.mean_rows(f),
        }
    }

    /// Full differentiable pass: fused context + teacher-forced answer loss.
    /// Returns the graph (backward not yet run), the loss id, and bindings
    /// for gradient collection.
    pub fn loss_graph(&self, sample: &Sample, train_mode: bool, seed: u64) -> Result<(Graph, TensorId, Bindings)> {
        self.check_frames(&sample.frames, sample.t_len)?;
        if sample.question_ids.is_empty() {
            return Err(CoreError::InvalidShape {
                op: "model question",
                shape: vec![0],
                reason: "question must have at least one token".into(),
            });
        }
        let mut g = if train_mode { Graph::new_training() } else { Graph::new() };
        let mut binds = Bindings::new();

        let dec = self.decoder.bind(&mut g, &mut binds, true)?;
        let gate_trainable = self.config.variant != ModelVariant::GateClosed;
        let fus = self.fusion.bind(&mut g, &mut binds, true, gate_trainable)?;

        let x_text = g.embedding(dec.tok_embed, &sample.question_ids)?;
        let h_video = self.video_pathway(&mut g, &mut binds, &sample.frames, sample.t_len, true)?;
        let (z, _state) = fusion_block(&mut g, &fus, x_text, h_video)?;

        // Teacher forcing: feed [BOS, answer...]; predict [answer..., EOS].
        let mut fed = Vec::with_capacity(sample.answer_ids.len() + 1);
        fed.push(BOS_ID);
        fed.extend_from_slice(&sample.answer_ids);
        let prefix_len = sample.question_ids.len();
        let logits = decoder_logits(&mut g, &dec, Some(z), &fed, derive_seed(seed, 7))?;

        let mut targets: Vec<Option<usize>> = vec![None; prefix_len];
        for j in 0..fed.len() {
            let t = if j + 1 < fed.len() { fed[j + 1] } else { EOS_ID };
            targets.push(Some(t));
        }
        let loss = g.cross_entropy_with_logits(logits, &targets)?;
        Ok((g, loss, binds))
    }

    /// Runs the context half once (evaluation mode) and detaches the fused
    /// rows, so repeated decode steps don't re-run the encoder and fusion.
    pub fn encode_context(&self, question_ids: &[usize], frames: &[f64], t_len: usize) -> Result<(Vec<f64>, FusionState)> {
        self.check_frames(frames, t_len)?;
        if question_ids.is_empty() {
            return Err(CoreError::InvalidShape {
                op: "model question",
                shape: vec![0],
                reason: "question must have at least one token".into(),
            });
        }
        let mut g = Graph::new();
        let mut binds = Bindings::new();
        let dec = self.decoder.bind(&mut g, &mut binds, false)?;
        let fus = self.fusion.bind(&mut g, &mut binds, false, false)?;
        let x_text = g.embedding(dec.tok_embed, question_ids)?;
        let h_video = self.video_pathway(&mut g, &mut binds, frames, t_len, false)?;
        let (z, state) = fusion_block(&mut g, &fus, x_text, h_video)?;
        Ok((g.data(z).to_vec(), state))
    }

    /// Greedy decoding: lowest-id tie break, stops at EOS or `max_new`
    /// tokens. Returns generated answer ids (BOS/EOS excluded) and the
    /// fusion diagnostics for the clip.
    pub fn generate(&self, question_ids: &[usize], frames: &[f64], t_len: usize, max_new: usize) -> Result<(Vec<usize>, FusionState)> {
        let (z_data, state) = self.encode_context(question_ids, frames, t_len)?;
        let l = question_ids.len();
        let mut out: Vec<usize> = Vec::new();
        for _ in 0..max_new {
            let mut fed = Vec::with_capacity(out.len() + 1);
            fed.push(BOS_ID);
            fed.extend_from_slice(&out);
            let mut g = Graph::new();
            let mut binds = Bindings::new();
            let dec = self.decoder.bind(&mut g, &mut binds, false)?;
            let z = g.input(z_data.clone(), &[l, self.config.model_dim])?;
            let logits = decoder_logits(&mut g, &dec, Some(z), &fed, 0)?;
            let vocab = self.vocab.size();
            let rows = g.shape(logits)[0];
            let last = &g.data(logits)[(rows - 1) * vocab..rows * vocab];
            let next = argmax_lowest(last);
            if next == EOS_ID {
                break;
            }
            out.push(next);
        }
        Ok((out, state))
    }

    /// Teacher-forced answer-token accuracy on one sample: how many of the
    /// answer positions (EOS included) the model's argmax gets right.
    pub fn token_match(&self, sample: &Sample) -> Result<(usize, usize)> {
        self.check_frames(&sample.frames, sample.t_len)?;
        let mut g = Graph::new();
        let mut binds = Bindings::new();
        let dec = self.decoder.bind(&mut g, &mut binds, false)?;
        let fus = self.fusion.bind(&mut g, &mut binds, false, false)?;
        let x_text = g.embedding(dec.tok_embed, &sample.question_ids)?;
        let h_video = self.video_pathway(&mut g, &mut binds, &sample.frames, sample.t_len, false)?;
        let (z, _) = fusion_block(&mut g, &fus, x_text, h_video)?;

        let mut fed = vec![BOS_ID];
        fed.extend_from_slice(&sample.answer_ids);
        let logits = decoder_logits(&mut g, &dec, Some(z), &fed, 0)?;
        let vocab = self.vocab.size();
        let prefix_len = sample.question_ids.len();
        let mut correct = 0usize;
        for j in 0..fed.len() {
            let target = if j + 1 < fed.len() { fed[j + 1] } else { EOS_ID };
            let row = prefix_len + j;
            let slice = &g.data(logits)[row * vocab..(row + 1) * vocab];
            if argmax_lowest(slice) == target {
                correct += 1;
            }
        }
        Ok((correct, fed.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(variant: ModelVariant) -> Model {
        let vocab = Vocab::build([
            "what is the next phase",
            "the next phase is closure",
            "the next phase is sellar",
        ]);
        let mut config = ModelConfig::small(6);
        config.model_dim = 16;
        config.n_heads = 2;
        config.n_blocks = 1;
        config.ffn_mult = 2;
        config.max_len = 32;
        config.lora_rank = 4;
        config.lora_dropout = 0.0;
        config.variant = variant;
        Model::new(config, vocab, 42).unwrap()
    }

    fn sample_for(m: &Model, frames: Vec<f64>, t: usize) -> Sample {
        Sample {
            question_ids: m.vocab.encode("what is the next phase"),
            answer_ids: m.vocab.encode("the next phase is closure"),
            frames,
            t_len: t,
        }
    }

    #[test]
    fn loss_is_finite_and_params_get_grads() {
        let m = tiny_model(ModelVariant::Full);
        let s = sample_for(&m, vec![0.1; 4 * 6], 4);
        let (mut g, loss, binds) = m.loss_graph(&s, false, 1).unwrap();
        assert!(g.data(loss)[0].is_finite());
        g.backward(loss).unwrap();
        let mut grads = std::collections::BTreeMap::new();
        binds.collect_grads(&g, &mut grads).unwrap();
        // A few representative blocks must be receiving gradient.
        assert!(grads.keys().any(|k| k.starts_with("encoder.")));
        assert!(grads.keys().any(|k| k.starts_with("fusion.")));
        assert!(grads.keys().any(|k| k.contains(".lora.")));
        assert!(grads.contains_key("decoder.tok_embed"));
        // Frozen projection bases must not.
        assert!(!grads.keys().any(|k| k.ends_with("attn.q.weight")));
    }

    #[test]
    fn closed_gate_makes_output_video_invariant() {
        let m = tiny_model(ModelVariant::GateClosed);
        let q = m.vocab.encode("what is the next phase");
        let (a_ids, a_state) = m.generate(&q, &vec![0.3; 4 * 6], 4, 8).unwrap();
        let (b_ids, b_state) = m.generate(&q, &vec![-2.0; 4 * 6], 4, 8).unwrap();
        assert_eq!(a_ids, b_ids);
        for (x, y) in a_state.fused.iter().zip(&b_state.fused) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn full_variant_reacts_to_video_content() {
        let m = tiny_model(ModelVariant::Full);
        let q = m.vocab.encode("what is the next phase");
        let (_, a) = m.encode_context(&q, &vec![0.3; 4 * 6], 4).unwrap();
        let (_, b) = m.encode_context(&q, &vec![-2.0; 4 * 6], 4).unwrap();
        assert!(a.fused.iter().zip(&b.fused).any(|(x, y)| x != y));
    }

    #[test]
    fn mean_pool_variant_has_single_key() {
        let m = tiny_model(ModelVariant::MeanPool);
        let q = m.vocab.encode("what is the next phase");
        let (_, state) = m.encode_context(&q, &vec![0.5; 4 * 6], 4).unwrap();
        assert_eq!(state.key_len, 1);
        for head in &state.attn_weights {
            assert!(head.iter().all(|w| *w == 1.0));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let m = tiny_model(ModelVariant::Full);
        let q = m.vocab.encode("what is the next phase");
        let frames = vec![0.25; 4 * 6];
        let (a, _) = m.generate(&q, &frames, 4, 8).unwrap();
        let (b, _) = m.generate(&q, &frames, 4, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn token_match_counts_answer_positions_plus_eos() {
        let m = tiny_model(ModelVariant::Full);
        let s = sample_for(&m, vec![0.1; 4 * 6], 4);
        let (_, total) = m.token_match(&s).unwrap();
        assert_eq!(total, s.answer_ids.len() + 1);
    }

    #[test]
    fn checkpoint_state_round_trips() {
        let mut m = tiny_model(ModelVariant::Full);
        let loaded: Vec<Param> = m.all_params().into_iter().cloned().collect();
        let before: Vec<f64> = m.all_params().iter().flat_map(|p| p.data.clone()).collect();
        m.load_state(loaded).unwrap();
        let after: Vec<f64> = m.all_params().iter().flat_map(|p| p.data.clone()).collect();
        assert_eq!(before, after);

        let mut truncated: Vec<Param> = m.all_params().into_iter().cloned().collect();
        truncated.pop();
        assert!(m.load_state(truncated).is_err());
    }
}
