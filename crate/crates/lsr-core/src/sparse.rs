//! Vocabulary term-weight head and sparse representations.
//!
//! The head maps final hidden states to one weight per vocabulary entry:
//! `transform(h_i) * E_j + b_j`, where `transform` is linear -> GELU ->
//! layer norm and `E` is the token embedding table itself (weight tying:
//! the head reuses the `embed.token` parameter, so mutating an embedding
//! row changes both the input side and the head side).
//!
//! Per-term document weights come from max pooling over unmasked positions
//! with a log saturation: `w_j = max_i log(1 + relu(w_ij))`. Since
//! `log1p . relu` is nondecreasing, saturating before or after the max is
//! equivalent; the tape applies the max first so only one position per term
//! receives gradient. Padding positions never participate in the max.

use crate::encoder::{AdapterSet, Encoder, TokenSequence};
use crate::linalg::{Matrix, LAYER_NORM_EPS};
use crate::tape::{NodeId, ParameterStore, Tape};
use crate::{Error, Result};

/// Sorted sparse term weights. Ids strictly increase and every stored
/// weight is > 0 (zeros are omitted, nothing is ever negative).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVector {
    entries: Vec<(u32, f64)>,
}

impl SparseVector {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Validates ordering and positivity.
    pub fn new(entries: Vec<(u32, f64)>) -> Result<Self> {
        for w in entries.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(Error::Contract(format!(
                    "term ids must strictly increase: {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some((id, w)) = entries.iter().find(|(_, w)| *w <= 0.0 || !w.is_finite()) {
            return Err(Error::Contract(format!(
                "weight for term {id} must be finite and > 0, got {w}"
            )));
        }
        Ok(SparseVector { entries })
    }

    /// Keeps the strictly positive coordinates of a dense weight row.
    pub fn from_dense(weights: &[f64]) -> Self {
        let entries = weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, &w)| (i as u32, w))
            .collect();
        SparseVector { entries }
    }

    pub fn to_dense(&self, size: usize) -> Vec<f64> {
        let mut v = vec![0.0; size];
        for &(id, w) in &self.entries {
            v[id as usize] = w;
        }
        v
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn support_size(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sum of weights (the L1 norm, since weights are nonnegative).
    pub fn l1(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w).sum()
    }

    /// Drops entries with weight < epsilon.
    pub fn pruned(&self, epsilon: f64) -> SparseVector {
        SparseVector {
            entries: self
                .entries
                .iter()
                .copied()
                .filter(|(_, w)| *w >= epsilon)
                .collect(),
        }
    }

    /// `term:weight term:weight ...` with weights at 6 decimals.
    pub fn format_entries(&self) -> String {
        self.entries
            .iter()
            .map(|(id, w)| format!("{id}:{w:.6}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Dot product over shared term ids (sorted-id two-pointer walk).
pub fn score(q: &SparseVector, d: &SparseVector) -> f64 {
    let (qa, da) = (q.entries(), d.entries());
    let mut acc = 0.0;
    let (mut i, mut j) = (0, 0);
    while i < qa.len() && j < da.len() {
        match qa[i].0.cmp(&da[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += qa[i].1 * da[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

/// One debug line: `docid<TAB>term:weight term:weight ...`.
pub fn format_sparse_line(doc_id: &str, v: &SparseVector) -> String {
    format!("{doc_id}\t{}", v.format_entries())
}

/// Term logits for every position: `transform(h) E^T + b` as n x |V|.
pub fn term_logits_on_tape(
    tape: &mut Tape,
    store: &ParameterStore,
    hidden: NodeId,
) -> Result<NodeId> {
    let w = tape.param(store, "head.transform.w")?;
    let b = tape.param(store, "head.transform.b")?;
    let gain = tape.param(store, "head.ln.gain")?;
    let bias = tape.param(store, "head.ln.bias")?;
    let t = tape.matmul(hidden, w)?;
    let t = tape.add_row_broadcast(t, b)?;
    let t = tape.gelu(t);
    let t = tape.layer_norm(t, gain, bias, LAYER_NORM_EPS)?;
    let embeddings = tape.param(store, "embed.token")?; // tied table
    let logits = tape.matmul_transpose_b(t, embeddings)?;
    let vocab_bias = tape.param(store, "head.vocab_bias")?;
    tape.add_row_broadcast(logits, vocab_bias)
}

/// Pooled term weights as a dense 1 x |V| node:
/// `log1p(relu(max over active rows))`.
pub fn pooled_weights_on_tape(
    tape: &mut Tape,
    logits: NodeId,
    active_rows: &[usize],
) -> Result<NodeId> {
    let m = tape.masked_col_max(logits, active_rows)?;
    let m = tape.relu(m);
    Ok(tape.log1p_clamp(m))
}

/// Value-level pooling of a logit matrix into a sparse vector. Padding
/// positions (mask 0) are excluded from the max; an all-masked input yields
/// the empty vector.
pub fn pool(logits: &Matrix, mask: &[u8]) -> Result<SparseVector> {
    if mask.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "mask of length {} for {} logit rows",
            mask.len(),
            logits.rows()
        )));
    }
    let mut entries = Vec::new();
    for j in 0..logits.cols() {
        let mut best = f64::NEG_INFINITY;
        for i in 0..logits.rows() {
            if mask[i] != 0 {
                best = best.max(logits.get(i, j));
            }
        }
        if best > 0.0 && best.is_finite() {
            entries.push((j as u32, best.ln_1p()));
        }
    }
    Ok(SparseVector { entries })
}

/// Encodes a sequence straight to its pooled sparse representation on a
/// throwaway tape, using the config's inference precision.
pub fn encode_to_sparse(
    encoder: &Encoder<'_>,
    seq: &TokenSequence,
    set: AdapterSet,
) -> Result<SparseVector> {
    let mut tape = Tape::with_precision(encoder.config.precision);
    let truncated_active: Vec<usize> = seq
        .active_positions()
        .into_iter()
        .filter(|&p| p < encoder.config.max_seq_len)
        .collect();
    let hidden = encoder.encode(&mut tape, seq, set)?;
    let logits = term_logits_on_tape(&mut tape, encoder.store, hidden)?;
    let mask: Vec<u8> = (0..tape.value(logits).rows())
        .map(|i| u8::from(truncated_active.contains(&i)))
        .collect();
    pool(tape.value(logits), &mask)
}
