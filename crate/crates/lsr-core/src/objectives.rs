//! Training losses and sparsity regularizers.
//!
//! Two task losses — a contrastive softmax over candidate documents and a
//! margin-MSE distillation loss — plus the L1 (query side) and FLOPS
//! (document side) regularizers, combined on a quadratic lambda ramp.
//!
//! Each loss exists twice: a value-level function over plain scores (the
//! testable contract) and a tape-level builder the trainer differentiates
//! through. Tests pin them against each other.
//!
//! The FLOPS regularizer here is sum over terms of the squared mean
//! activation, `sum_j (mean_i w_ij)^2`. A literal unsquared variant
//! (`sum_j mean_i w_ij`) is available behind `squared = false` for
//! comparison; note the unsquared form degenerates to an L1 on documents.

use crate::sparse::SparseVector;
use crate::tape::{NodeId, Tape};
use crate::{Error, Result};

/// Regularizer strengths and ramp length.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerConfig {
    /// Query-side L1 weight at full strength.
    pub lambda_q: f64,
    /// Document-side FLOPS weight at full strength.
    pub lambda_d: f64,
    /// Steps until lambda reaches full strength (quadratic ramp).
    pub ramp_steps: usize,
    /// Mean-then-square FLOPS (the standard form) vs the literal unsquared
    /// variant.
    pub flops_squared: bool,
}

impl Default for RegularizerConfig {
    /// Triplet-training defaults.
    fn default() -> Self {
        RegularizerConfig {
            lambda_q: 5e-4,
            lambda_d: 9e-5,
            ramp_steps: 50_000,
            flops_squared: true,
        }
    }
}

impl RegularizerConfig {
    /// Distillation-training defaults.
    pub fn distillation() -> Self {
        RegularizerConfig {
            lambda_q: 9e-2,
            lambda_d: 1e-2,
            ramp_steps: 50_000,
            flops_squared: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_q < 0.0 || self.lambda_d < 0.0 {
            return Err(Error::Config("lambda weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Scores for one query: its own positive and mined negative, plus scores
/// against in-batch candidates.
#[derive(Debug, Clone)]
pub struct QueryScores {
    pub positive: f64,
    pub negative: f64,
    pub in_batch: Vec<f64>,
}

/// Per-query score table for one batch.
#[derive(Debug, Clone, Default)]
pub struct BatchScores {
    pub queries: Vec<QueryScores>,
}

/// Teacher positive-minus-negative margins, one per training triple.
#[derive(Debug, Clone, Default)]
pub struct TeacherMargins(pub Vec<f64>);

fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean over queries of `-log softmax(positive | positive, negative,
/// in-batch candidates)`, computed with a stable log-sum-exp.
pub fn contrastive_loss(batch: &BatchScores) -> Result<f64> {
    if batch.queries.is_empty() {
        return Err(Error::Contract("contrastive loss over an empty batch".into()));
    }
    let mut total = 0.0;
    for q in &batch.queries {
        let mut candidates = Vec::with_capacity(2 + q.in_batch.len());
        candidates.push(q.positive);
        candidates.push(q.negative);
        candidates.extend_from_slice(&q.in_batch);
        if candidates.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite candidate score".into()));
        }
        total += logsumexp(&candidates) - q.positive;
    }
    Ok(total / batch.queries.len() as f64)
}

/// Mean squared error between student and teacher positive-negative
/// margins. In-batch candidates are ignored here.
pub fn margin_mse_loss(student: &BatchScores, teacher: &TeacherMargins) -> Result<f64> {
    if student.queries.len() != teacher.0.len() {
        return Err(Error::Contract(format!(
            "{} student triples vs {} teacher margins",
            student.queries.len(),
            teacher.0.len()
        )));
    }
    if student.queries.is_empty() {
        return Err(Error::Contract("margin loss over an empty batch".into()));
    }
    let mut total = 0.0;
    for (q, &mt) in student.queries.iter().zip(&teacher.0) {
        let ms = q.positive - q.negative;
        total += (ms - mt) * (ms - mt);
    }
    Ok(total / student.queries.len() as f64)
}

/// Mean over the batch of summed term weights.
pub fn l1_reg(reps: &[SparseVector]) -> f64 {
    if reps.is_empty() {
        return 0.0;
    }
    reps.iter().map(SparseVector::l1).sum::<f64>() / reps.len() as f64
}

/// `sum_j (mean_i w_ij)^2` over the batch (or the unsquared literal sum of
/// means when `squared` is false).
pub fn flops_reg(reps: &[SparseVector], squared: bool) -> Result<f64> {
    if reps.is_empty() {
        return Err(Error::Contract("flops regularizer over an empty batch".into()));
    }
    let n = reps.len() as f64;
    let mut sums: std::collections::BTreeMap<u32, f64> = std::collections::BTreeMap::new();
    for rep in reps {
        for &(id, w) in rep.entries() {
            *sums.entry(id).or_insert(0.0) += w;
        }
    }
    Ok(sums
        .values()
        .map(|s| {
            let mean = s / n;
            if squared {
                mean * mean
            } else {
                mean
            }
        })
        .sum())
}

/// Ramped lambdas at a step: `lambda_max * min(1, (step/T)^2)`; with T = 0
/// the full strength applies immediately.
pub fn lambda_at(step: usize, config: &RegularizerConfig) -> (f64, f64) {
    let ramp = if config.ramp_steps == 0 {
        1.0
    } else {
        let frac = step as f64 / config.ramp_steps as f64;
        (frac * frac).min(1.0)
    };
    (config.lambda_q * ramp, config.lambda_d * ramp)
}

/// Task loss plus scheduled regularizers over pooled representations.
pub fn total_loss(
    task: f64,
    query_reps: &[SparseVector],
    doc_reps: &[SparseVector],
    step: usize,
    config: &RegularizerConfig,
) -> Result<f64> {
    let (lq, ld) = lambda_at(step, config);
    let flops = if ld == 0.0 {
        0.0
    } else {
        flops_reg(doc_reps, config.flops_squared)?
    };
    Ok(task + lq * l1_reg(query_reps) + ld * flops)
}

/// Contrastive loss on a tape: `scores` is the B x C candidate matrix,
/// `targets[i]` the positive's column for query i.
pub fn contrastive_loss_on_tape(
    tape: &mut Tape,
    scores: NodeId,
    targets: &[usize],
) -> Result<NodeId> {
    let lse = tape.row_logsumexp(scores);
    let picked = tape.gather_entries(scores, targets)?;
    let per_query = tape.sub(lse, picked)?;
    tape.mean_all(per_query)
}

/// Margin-MSE on a tape from B x 1 positive/negative score columns and
/// constant teacher margins.
pub fn margin_mse_on_tape(
    tape: &mut Tape,
    positive: NodeId,
    negative: NodeId,
    teacher: &TeacherMargins,
) -> Result<NodeId> {
    let rows = tape.value(positive).rows();
    if teacher.0.len() != rows {
        return Err(Error::Contract(format!(
            "{rows} student triples vs {} teacher margins",
            teacher.0.len()
        )));
    }
    let margins = tape.sub(positive, negative)?;
    let t = tape.constant(crate::linalg::Matrix::from_vec(rows, 1, teacher.0.clone())?);
    let diff = tape.sub(margins, t)?;
    let sq = tape.mul_elementwise(diff, diff)?;
    tape.mean_all(sq)
}

/// L1 regularizer on a tape over a B x |V| matrix of pooled weights.
pub fn l1_reg_on_tape(tape: &mut Tape, reps: NodeId) -> Result<NodeId> {
    let rows = tape.value(reps).rows();
    if rows == 0 {
        return Err(Error::Contract("l1 regularizer over an empty batch".into()));
    }
    let total = tape.sum_all(reps);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

/// FLOPS regularizer on a tape over an N x |V| matrix of pooled weights.
pub fn flops_reg_on_tape(tape: &mut Tape, reps: NodeId, squared: bool) -> Result<NodeId> {
    let means = tape.mean_rows(reps)?;
    if squared {
        let sq = tape.mul_elementwise(means, means)?;
        Ok(tape.sum_all(sq))
    } else {
        Ok(tape.sum_all(means))
    }
}

/// `task + lambda_q(step) * l1 + lambda_d(step) * flops` on a tape.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    task: NodeId,
    l1: NodeId,
    flops: NodeId,
    step: usize,
    config: &RegularizerConfig,
) -> Result<NodeId> {
    let (lq, ld) = lambda_at(step, config);
    let l1_term = tape.scale(l1, lq);
    let flops_term = tape.scale(flops, ld);
    let reg = tape.add(l1_term, flops_term)?;
    tape.add(task, reg)
}
