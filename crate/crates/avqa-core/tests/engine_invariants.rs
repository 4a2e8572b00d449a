//! Tape-engine contracts exercised through the assembled model rather than
//! single ops: bit-identical replay, single-use backward, and the rule that
//! gradients land on trainable parameters only.

use avqa_core::decoder::Vocab;
use avqa_core::error::CoreError;
use avqa_core::model::{Model, ModelConfig, ModelVariant, Sample};

fn build_model(variant: ModelVariant) -> Model {
    let vocab = Vocab::build([
        "what is the next phase",
        "the next phase is closure",
        "which instruments come next",
        "suction and kerrisons",
    ]);
    let mut config = ModelConfig::small(5);
    config.model_dim = 16;
    config.n_heads = 2;
    config.n_blocks = 2;
    config.ffn_mult = 2;
    config.max_len = 48;
    config.lora_rank = 4;
    config.lora_dropout = 0.1;
    config.variant = variant;
    Model::new(config, vocab, 1234).unwrap()
}

fn sample(m: &Model) -> Sample {
    Sample {
        question_ids: m.vocab.encode("what is the next phase"),
        answer_ids: m.vocab.encode("the next phase is closure"),
        frames: (0..6 * 5).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect(),
        t_len: 6,
    }
}

#[test]
fn recording_and_replaying_the_same_model_pass_is_bit_identical() {
    let m = build_model(ModelVariant::Full);
    let s = sample(&m);
    // Training mode includes the dropout path; the seed pins its masks.
    let run = || {
        let (mut g, loss, binds) = m.loss_graph(&s, true, 42).unwrap();
        g.backward(loss).unwrap();
        let mut grads = std::collections::BTreeMap::new();
        binds.collect_grads(&g, &mut grads).unwrap();
        (g.data(loss)[0], grads)
    };
    let (la, ga) = run();
    let (lb, gb) = run();
    assert_eq!(la.to_bits(), lb.to_bits());
    assert_eq!(ga.len(), gb.len());
    for (name, a) in &ga {
        let b = &gb[name];
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits(), "grad replay diverged at {name}");
        }
    }
}

#[test]
fn backward_can_only_run_once_per_recording() {
    let m = build_model(ModelVariant::Full);
    let s = sample(&m);
    let (mut g, loss, _) = m.loss_graph(&s, false, 1).unwrap();
    g.backward(loss).unwrap();
    assert!(matches!(g.backward(loss), Err(CoreError::BackwardConsumed)));
}

#[test]
fn every_trainable_parameter_receives_a_gradient() {
    let mut m = build_model(ModelVariant::Full);
    let trainable = m.trainable_names();
    let s = sample(&m);
    let (mut g, loss, binds) = m.loss_graph(&s, false, 1).unwrap();
    g.backward(loss).unwrap();
    let mut grads = std::collections::BTreeMap::new();
    binds.collect_grads(&g, &mut grads).unwrap();

    for name in &trainable {
        assert!(grads.contains_key(name), "no gradient for trainable `{name}`");
    }
    // And nothing outside the trainable set sneaks in.
    for name in grads.keys() {
        assert!(trainable.contains(name), "gradient for non-trainable `{name}`");
    }
}

#[test]
fn frozen_projection_bases_never_appear_in_gradients() {
    let m = build_model(ModelVariant::Full);
    let s = sample(&m);
    let (mut g, loss, binds) = m.loss_graph(&s, false, 1).unwrap();
    g.backward(loss).unwrap();
    let mut grads = std::collections::BTreeMap::new();
    binds.collect_grads(&g, &mut grads).unwrap();
    for name in grads.keys() {
        assert!(
            !(name.contains(".attn.") && (name.ends_with(".weight") || name.ends_with(".bias"))),
            "frozen base `{name}` received a gradient"
        );
    }
}

#[test]
fn gate_parameters_are_frozen_in_the_gate_closed_variant() {
    let mut m = build_model(ModelVariant::GateClosed);
    let trainable = m.trainable_names();
    assert!(!trainable.iter().any(|n| n.ends_with(".w_g") || n.ends_with(".b_g")));

    let s = sample(&m);
    let (mut g, loss, binds) = m.loss_graph(&s, false, 1).unwrap();
    g.backward(loss).unwrap();
    let mut grads = std::collections::BTreeMap::new();
    binds.collect_grads(&g, &mut grads).unwrap();
    assert!(!grads.keys().any(|n| n.ends_with(".w_g") || n.ends_with(".b_g")));
}

#[test]
fn mean_pool_variant_trains_without_an_encoder() {
    let mut m = build_model(ModelVariant::MeanPool);
    assert!(m.encoder.is_none());
    assert!(!m.trainable_names().iter().any(|n| n.starts_with("encoder.")));

    let s = sample(&m);
    let (mut g, loss, binds) = m.loss_graph(&s, false, 1).unwrap();
    assert!(g.data(loss)[0].is_finite());
    g.backward(loss).unwrap();
    let mut grads = std::collections::BTreeMap::new();
    binds.collect_grads(&g, &mut grads).unwrap();
    assert!(grads.keys().any(|n| n.starts_with("fusion.")));
}
