//! End-to-end gradient verification of the composed training objective.
//!
//! Builds a toy model, encodes a small batch, pools, scores, applies the
//! task loss plus ramped regularizers, and compares reverse-mode gradients
//! against central finite differences for a sample of coordinates in every
//! parameter.
//!
//! The check runs at a generic parameter point: every weight is re-drawn at
//! a healthy scale first. At the near-identity adapter initialization the
//! up-projection gradients are ~1e-9, far below what central differences
//! can resolve at step 1e-5, so checking there measures finite-difference
//! noise instead of adjoint correctness. (The identity initialization has
//! its own dedicated test.)

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::{
    init_adapters, init_backbone, param_seed, AdapterConfig, AdapterSet, Encoder, EncoderConfig,
    TokenSequence,
};
use crate::objectives::{
    contrastive_loss_on_tape, flops_reg_on_tape, l1_reg_on_tape, margin_mse_on_tape,
    total_loss_on_tape, RegularizerConfig, TeacherMargins,
};
use crate::sparse::{pooled_weights_on_tape, term_logits_on_tape};
use crate::tape::{grad_check, GradCheckConfig, ParameterStore, Tape};
use crate::trainer::TrainTask;
use crate::Result;

/// Redraws every parameter at a generic position: weights ~ N(0, std),
/// layer-norm gains ~ 1 + N(0, std). Deterministic per (seed, name).
pub fn randomize_generic(store: &mut ParameterStore, std: f64, seed: u64) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let mut rng = ChaCha12Rng::seed_from_u64(param_seed(seed, &name));
        let dist = Normal::new(0.0, std).expect("positive std");
        let offset = if name.ends_with("ln.gain") { 1.0 } else { 0.0 };
        let m = store.value_mut(&name).expect("name from iteration");
        for v in m.data_mut() {
            *v = offset + dist.sample(&mut rng);
        }
    }
}

/// Deterministic toy batch: two queries and four documents with token ids
/// spread over the vocabulary.
fn toy_sequences(vocab_size: usize) -> Vec<Vec<u32>> {
    let v = vocab_size as u32;
    let t = |i: u32| 1 + (i % (v - 1));
    vec![
        vec![t(0), t(4), t(8)],
        vec![t(0), t(6)],
        vec![t(1), t(7), t(10), t(3)],
        vec![t(2), t(5)],
        vec![t(1), t(9), t(11)],
        vec![t(2), t(12), t(13), t(14)],
    ]
}

/// Max relative error between reverse-mode and central-difference gradients
/// for the full objective: encode -> pool -> score -> task loss -> ramped
/// L1 + FLOPS regularizers. All parameters are trainable for the check.
pub fn composed_objective_grad_check(
    encoder_cfg: &EncoderConfig,
    adapters: &AdapterConfig,
    regularizer: &RegularizerConfig,
    task: TrainTask,
    check: &GradCheckConfig,
) -> Result<f64> {
    let mut store = init_backbone(encoder_cfg, check.seed)?;
    init_adapters(&mut store, encoder_cfg, adapters, check.seed)?;
    randomize_generic(&mut store, 0.2, check.seed ^ 0xa5a5);
    store.set_all_trainable(true);

    let sequences = toy_sequences(encoder_cfg.vocab_size);
    let teacher = TeacherMargins(vec![0.5, -0.25]);
    let err = grad_check(
        |s, tape: &mut Tape| {
            let enc = Encoder::new(encoder_cfg, adapters, s)?;
            let mut pooled = Vec::new();
            for ids in &sequences {
                let seq = TokenSequence::unpadded(ids.clone());
                let hidden = enc.encode(tape, &seq, AdapterSet::Shared)?;
                let logits = term_logits_on_tape(tape, s, hidden)?;
                let active: Vec<usize> = (0..ids.len()).collect();
                pooled.push(pooled_weights_on_tape(tape, logits, &active)?);
            }
            let queries = tape.concat_rows(&pooled[..2])?;
            let docs = tape.concat_rows(&pooled[2..])?;
            let task_node = match task {
                TrainTask::Triplets => {
                    let scores = tape.matmul_transpose_b(queries, docs)?;
                    contrastive_loss_on_tape(tape, scores, &[0, 1])?
                }
                TrainTask::Distill => {
                    // positives: docs 0..2, negatives: docs 2..4
                    let pos = tape.concat_rows(&pooled[2..4])?;
                    let neg = tape.concat_rows(&pooled[4..6])?;
                    let sp = tape.rowwise_dot(queries, pos)?;
                    let sn = tape.rowwise_dot(queries, neg)?;
                    margin_mse_on_tape(tape, sp, sn, &teacher)?
                }
            };
            let l1 = l1_reg_on_tape(tape, queries)?;
            let flops = flops_reg_on_tape(tape, docs, regularizer.flops_squared)?;
            total_loss_on_tape(tape, task_node, l1, flops, 1, regularizer)
        },
        &store,
        check,
    )?;
    Ok(err)
}
