//! Full finite-difference battery over every trainable parameter block.
//!
//! Analytic gradients from the tape must agree with central differences
//! (step 1e-5, 64-bit) within a relative error of 1e-4 on every entry of
//! every block, from single modules up to the assembled model.

use std::time::Instant;

use avqa_core::gradcheck::GRAD_REL_TOL;
use avqa_core::verify::standard_blocks;

#[test]
fn every_parameter_block_matches_finite_differences() {
    let started = Instant::now();
    let reports = standard_blocks(7).expect("battery must run");

    let mut failed = Vec::new();
    for r in &reports {
        println!("{}", r.summary_line());
        assert!(r.checked_entries > 0, "block {} checked nothing", r.block);
        if !r.passed {
            failed.push(r.summary_line());
        }
    }
    assert!(failed.is_empty(), "gradient mismatches:\n{}", failed.join("\n"));

    // The battery must enumerate at least the documented block set.
    let names: Vec<&str> = reports.iter().map(|r| r.block.as_str()).collect();
    for required in [
        "gru.forward",
        "gru.backward",
        "fusion.attn.qkvo",
        "fusion.gate",
        "fusion.ffn",
        "fusion.layernorms",
        "lora.adapters",
        "decoder.block",
        "decoder.embeddings",
    ] {
        assert!(names.contains(&required), "missing block {required}");
    }
    assert!(reports.len() >= 9, "need at least 9 blocks, got {}", reports.len());

    let elapsed = started.elapsed();
    println!("battery: {} blocks in {:.1?}", reports.len(), elapsed);
    assert!(elapsed.as_secs() < 120, "battery must finish in under two minutes");
}

#[test]
fn battery_is_deterministic_per_seed() {
    let a = standard_blocks(21).unwrap();
    let b = standard_blocks(21).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.block, y.block);
        assert_eq!(x.max_rel_err.to_bits(), y.max_rel_err.to_bits());
    }
}

#[test]
fn tolerance_is_the_documented_bound() {
    assert_eq!(GRAD_REL_TOL, 1e-4);
}
