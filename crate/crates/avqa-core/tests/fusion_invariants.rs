//! Analytic invariants of the gated cross-attention fusion block, checked
//! against in-test oracles that recompute the expected quantities directly
//! from the captured intermediate state.

use avqa_core::fusion::{fusion_block, FusionBlock, LN_EPS};
use avqa_core::graph::Graph;
use avqa_core::gru::{encode_bidirectional, BiGru};
use avqa_core::param::{init_rng, Bindings};
use rand::Rng;

const DM: usize = 6;
const KV: usize = 4;
const HEADS: usize = 2;
const L: usize = 3;
const T: usize = 5;

fn random_block(seed: u64) -> FusionBlock {
    let mut rng = init_rng(seed);
    FusionBlock::new("fusion", DM, KV, HEADS, 2, &mut rng).unwrap()
}

fn run(block: &FusionBlock, x_text: &[f64], h_video: &[f64], t: usize, kv: usize) -> avqa_core::fusion::FusionState {
    let mut g = Graph::new();
    let mut binds = Bindings::new();
    let bound = block.bind(&mut g, &mut binds, false, false).unwrap();
    let x = g.input(x_text.to_vec(), &[L, DM]).unwrap();
    let h = g.input(h_video.to_vec(), &[t, kv]).unwrap();
    let (_, state) = fusion_block(&mut g, &bound, x, h).unwrap();
    state
}

/// Independent layer-norm oracle: population variance, documented epsilon,
/// unit gain and zero bias (the blocks are tested at init where that holds).
fn layernorm_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    out
}

fn random_inputs(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = init_rng(seed);
    let x: Vec<f64> = (0..L * DM).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let h: Vec<f64> = (0..T * KV).map(|_| rng.gen_range(-1.5..1.5)).collect();
    (x, h)
}

fn permute_rows(x: &[f64], cols: usize, perm: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for &r in perm {
        out.extend_from_slice(&x[r * cols..(r + 1) * cols]);
    }
    out
}

#[test]
fn gates_are_strictly_bounded_and_contract_the_attended_signal() {
    for seed in [1u64, 2, 3, 4, 5] {
        let block = random_block(seed);
        let (x, h) = random_inputs(seed + 100);
        let state = run(&block, &x, &h, T, KV);
        for gate in &state.gates {
            assert!(*gate > 0.0 && *gate < 1.0, "gate {gate} escaped (0,1)");
        }
        for (gated, attended) in state.gated.iter().zip(&state.attended) {
            assert!(
                gated.abs() <= attended.abs() + 1e-15,
                "|gated| {gated} exceeds |attended| {attended}"
            );
        }
    }
}

#[test]
fn gates_depend_on_text_only() {
    let block = random_block(9);
    let (x, h) = random_inputs(50);
    let (_, h2) = random_inputs(51);
    let a = run(&block, &x, &h, T, KV);
    let b = run(&block, &x, &h2, T, KV);
    // Different video: attention output must move, gates must not.
    assert!(a.attended.iter().zip(&b.attended).any(|(p, q)| p != q));
    for (p, q) in a.gates.iter().zip(&b.gates) {
        assert_eq!(p.to_bits(), q.to_bits());
    }
}

#[test]
fn permuting_video_rows_permutes_attention_and_preserves_output() {
    // Fed directly (temporal encoder bypassed), attention is a softmax
    // mixture over key positions, so shuffling the rows shuffles the weight
    // columns and leaves the attended values — and Z — unchanged.
    let block = random_block(13);
    let (x, h) = random_inputs(60);
    let perm = [3usize, 0, 4, 1, 2];

    let base = run(&block, &x, &h, T, KV);
    let shuffled = run(&block, &x, &permute_rows(&h, KV, &perm), T, KV);

    for head in 0..HEADS {
        let w0 = &base.attn_weights[head];
        let w1 = &shuffled.attn_weights[head];
        for l in 0..L {
            for (new_t, &old_t) in perm.iter().enumerate() {
                let a = w0[l * T + old_t];
                let b = w1[l * T + new_t];
                assert!((a - b).abs() < 1e-12, "head {head} weight moved: {a} vs {b}");
            }
        }
    }
    for (a, b) in base.fused.iter().zip(&shuffled.fused) {
        assert!((a - b).abs() < 1e-12, "Z changed under key permutation: {a} vs {b}");
    }
}

#[test]
fn with_the_recurrent_encoder_in_front_frame_order_matters() {
    let mut rng = init_rng(99);
    let frame_dim = 3;
    let bigru = BiGru::new("enc", frame_dim, KV, false, &mut rng);
    let block = random_block(14);
    let (x, _) = random_inputs(70);
    let frames: Vec<f64> = (0..T * frame_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let perm = [3usize, 0, 4, 1, 2];

    let encode_and_fuse = |frames: &[f64]| {
        let mut g = Graph::new();
        let mut binds = Bindings::new();
        let eb = bigru.bind(&mut g, &mut binds, false).unwrap();
        let fb = block.bind(&mut g, &mut binds, false, false).unwrap();
        let f = g.input(frames.to_vec(), &[T, frame_dim]).unwrap();
        let enc = encode_bidirectional(&mut g, &eb, f).unwrap();
        let xid = g.input(x.clone(), &[L, DM]).unwrap();
        let (_, state) = fusion_block(&mut g, &fb, xid, enc).unwrap();
        state.fused
    };

    let base = encode_and_fuse(&frames);
    let shuffled = encode_and_fuse(&permute_rows(&frames, frame_dim, &perm));
    let max_diff = base
        .iter()
        .zip(&shuffled)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_diff > 1e-6, "recurrent encoding should be order-sensitive, diff {max_diff:e}");
}

#[test]
fn closed_gate_reduces_the_first_stage_to_plain_text_normalization() {
    let mut block = random_block(15);
    block.gate.force(-100.0);
    let (x, h) = random_inputs(80);
    let state = run(&block, &x, &h, T, KV);

    let expect = layernorm_rows(&x, L, DM);
    for (a, b) in state.normed_text.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "closed gate: {a} vs oracle {b}");
    }
}

#[test]
fn open_gate_reproduces_normalized_residual_attention() {
    let mut block = random_block(16);
    block.gate.force(100.0);
    let (x, h) = random_inputs(81);
    let state = run(&block, &x, &h, T, KV);

    let summed: Vec<f64> = x.iter().zip(&state.attended).map(|(a, b)| a + b).collect();
    let expect = layernorm_rows(&summed, L, DM);
    for (a, b) in state.normed_text.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "open gate: {a} vs oracle {b}");
    }
}

#[test]
fn closed_gate_with_zero_ffn_is_double_normalization_of_text() {
    let mut block = random_block(17);
    block.gate.force(-100.0);
    for p in block.ffn.params_mut() {
        for v in &mut p.data {
            *v = 0.0;
        }
    }
    let (x, h) = random_inputs(82);
    let state = run(&block, &x, &h, T, KV);

    let expect = layernorm_rows(&layernorm_rows(&x, L, DM), L, DM);
    for (a, b) in state.fused.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "text-only path: {a} vs oracle {b}");
    }
}

#[test]
fn attention_rows_sum_to_one_on_random_instances() {
    for seed in 0..10u64 {
        let block = random_block(seed);
        let (x, h) = random_inputs(seed * 7 + 3);
        let state = run(&block, &x, &h, T, KV);
        for head in &state.attn_weights {
            for row in head.chunks(T) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|v| *v > 0.0 && *v < 1.0));
            }
        }
    }
}
