//! Optimization loops: triplet and distillation training with Adam,
//! best-checkpoint selection by validation MRR@10, the adapter-layer
//! ablation sweep, hard-negative mining, and domain-adaptation rounds.
//!
//! One training run owns its parameter store exclusively; validation reads
//! a snapshot of the same store between steps. Determinism: for a fixed
//! seed, batch order, initialization and the whole parameter trajectory are
//! reproducible bit-for-bit in f64.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{MetricsLog, Qrels, TextTable, Tokenizer, TrainingExample};
use crate::encoder::{
    ablate, count_params, init_adapters, init_backbone, set_trainable, AdapterConfig, AdapterSet,
    Encoder, EncoderConfig, TokenSequence, TrainMode,
};
use crate::eval::mrr_at_k;
use crate::index::{build_index, estimate_rflops, InvertedIndex};
use crate::objectives::{
    contrastive_loss_on_tape, flops_reg_on_tape, l1_reg_on_tape, lambda_at, margin_mse_on_tape,
    total_loss_on_tape, RegularizerConfig, TeacherMargins,
};
use crate::sparse::{encode_to_sparse, pooled_weights_on_tape, term_logits_on_tape, SparseVector};
use crate::tape::{GradientMap, NodeId, ParameterStore, Tape};
use crate::{Error, Result};

/// Which task loss drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTask {
    Triplets,
    Distill,
}

impl TrainTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "triplets" => Ok(TrainTask::Triplets),
            "distill" => Ok(TrainTask::Distill),
            other => Err(Error::Config(format!("unknown training task `{other}`"))),
        }
    }
}

/// Candidate set for the contrastive denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InBatchNegatives {
    /// Own positive + own negative + every other query's positive and
    /// negative.
    Full,
    /// Own positive + own negative + every other query's positive.
    PositivesOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_iters: usize,
    /// Linear warmup length.
    pub warmup_steps: usize,
    /// Hold the peak rate instead of decaying linearly to zero.
    pub constant_after_warmup: bool,
    pub eval_every: usize,
    pub seed: u64,
    pub task: TrainTask,
    pub encoder_mode: TrainMode,
    /// Distinct query/document adapter sets.
    pub bi_adapter: bool,
    pub in_batch: InBatchNegatives,
    /// Optional epoch cap on top of `total_iters`.
    pub epochs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 8e-5,
            batch_size: 128,
            total_iters: 300_000,
            warmup_steps: 6_000,
            constant_after_warmup: false,
            eval_every: 1_000,
            seed: 42,
            task: TrainTask::Triplets,
            encoder_mode: TrainMode::AdapterTune,
            bi_adapter: false,
            in_batch: InBatchNegatives::Full,
            epochs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 || self.total_iters == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "batch_size, total_iters and eval_every must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Best checkpoint found during a run.
#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub step: usize,
    pub mrr10: f64,
    pub path: PathBuf,
}

/// Adam with the usual bias correction; moments are kept per parameter
/// name and only parameters that received gradients move.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &GradientMap,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads.iter() {
            let value = store.value_mut(name)?;
            if value.shape() != grad.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}` is {}x{}, parameter is {}x{}",
                    grad.rows(),
                    grad.cols(),
                    value.rows(),
                    value.cols()
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for ((p, &g), (mi, vi)) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to the peak rate, then (by default) linear decay to zero
/// at `total_iters`. `step` is 1-based.
pub fn learning_rate_at(step: usize, config: &TrainConfig) -> f64 {
    let peak = config.learning_rate;
    if config.warmup_steps > 0 && step <= config.warmup_steps {
        return peak * step as f64 / config.warmup_steps as f64;
    }
    if config.constant_after_warmup {
        return peak;
    }
    let total = config.total_iters.max(config.warmup_steps + 1);
    let remaining = total.saturating_sub(step) as f64;
    let span = (total - config.warmup_steps) as f64;
    peak * (remaining / span).max(0.0)
}

/// Index of the best (step, mrr) record: highest MRR, earliest step on
/// ties.
pub fn select_best(records: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(_, mrr)) in records.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if mrr > records[b].1 => best = Some(i),
            _ => {}
        }
    }
    best
}

/// Everything a run needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub encoder: EncoderConfig,
    pub adapters: AdapterConfig,
    pub regularizer: RegularizerConfig,
    pub train: TrainConfig,
}

/// Borrowed training and validation data.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub tokenizer: &'a Tokenizer,
    pub collection: &'a TextTable,
    pub queries: &'a TextTable,
    pub triplets: &'a [TrainingExample],
    pub dev_queries: &'a TextTable,
    pub dev_qrels: &'a Qrels,
    /// Judgments for the training queries (needed by mining); falls back to
    /// `dev_qrels` when absent.
    pub train_qrels: Option<&'a Qrels>,
}

/// Tokenized-sequence cache (ids are stable for a run).
#[derive(Default)]
struct SeqCache {
    queries: HashMap<String, TokenSequence>,
    docs: HashMap<String, TokenSequence>,
}

impl SeqCache {
    fn query<'a>(
        &'a mut self,
        tok: &Tokenizer,
        table: &TextTable,
        id: &str,
    ) -> Result<&'a TokenSequence> {
        if !self.queries.contains_key(id) {
            let text = table
                .get(id)
                .ok_or_else(|| Error::Data(format!("unknown query id `{id}`")))?;
            self.queries.insert(id.to_string(), tok.encode_sequence(text));
        }
        Ok(&self.queries[id])
    }

    fn doc<'a>(
        &'a mut self,
        tok: &Tokenizer,
        table: &TextTable,
        id: &str,
    ) -> Result<&'a TokenSequence> {
        if !self.docs.contains_key(id) {
            let text = table
                .get(id)
                .ok_or_else(|| Error::Data(format!("unknown doc id `{id}`")))?;
            self.docs.insert(id.to_string(), tok.encode_sequence(text));
        }
        Ok(&self.docs[id])
    }
}

/// One training run over one parameter store.
pub struct Trainer {
    pub setup: TrainSetup,
    pub store: ParameterStore,
    adam: Adam,
    rng: ChaCha12Rng,
    step: usize,
    cache: SeqCache,
}

impl Trainer {
    /// Applies the freeze policy for the configured mode and prepares the
    /// optimizer.
    pub fn new(setup: TrainSetup, mut store: ParameterStore) -> Result<Self> {
        setup.encoder.validate()?;
        setup.adapters.validate(&setup.encoder)?;
        setup.train.validate()?;
        setup.regularizer.validate()?;
        if setup.train.bi_adapter
            && setup.adapters.adapter_sets != crate::encoder::AdapterSets::QueryDocument
        {
            return Err(Error::Config(
                "bi_adapter training needs adapter sets = query-document".into(),
            ));
        }
        set_trainable(&mut store, &setup.adapters, setup.train.encoder_mode);
        let rng = ChaCha12Rng::seed_from_u64(setup.train.seed);
        Ok(Trainer {
            setup,
            store,
            adam: Adam::new(),
            rng,
            step: 0,
            cache: SeqCache::default(),
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    fn query_set(&self) -> AdapterSet {
        if self.setup.train.bi_adapter {
            AdapterSet::Query
        } else {
            AdapterSet::Shared
        }
    }

    fn doc_set(&self) -> AdapterSet {
        if self.setup.train.bi_adapter {
            AdapterSet::Document
        } else {
            AdapterSet::Shared
        }
    }

    /// Encodes a sequence to its pooled 1 x |V| weights on the tape.
    fn pooled(
        &self,
        tape: &mut Tape,
        seq: &TokenSequence,
        set: AdapterSet,
    ) -> Result<NodeId> {
        let enc = Encoder::new(&self.setup.encoder, &self.setup.adapters, &self.store)?;
        let hidden = enc.encode(tape, seq, set)?;
        let logits = term_logits_on_tape(tape, &self.store, hidden)?;
        let active: Vec<usize> = seq
            .active_positions()
            .into_iter()
            .filter(|&p| p < self.setup.encoder.max_seq_len)
            .collect();
        pooled_weights_on_tape(tape, logits, &active)
    }

    /// One optimizer step over a batch. Returns the total loss value.
    pub fn train_step(&mut self, data: TrainData<'_>, batch: &[TrainingExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let mut tape = Tape::new();
        let (mut q_nodes, mut p_nodes, mut n_nodes) = (Vec::new(), Vec::new(), Vec::new());
        for ex in batch {
            let q_seq = self
                .cache
                .query(data.tokenizer, data.queries, &ex.query_id)?
                .clone();
            let p_seq = self
                .cache
                .doc(data.tokenizer, data.collection, &ex.positive_id)?
                .clone();
            let n_seq = self
                .cache
                .doc(data.tokenizer, data.collection, &ex.negative_id)?
                .clone();
            q_nodes.push(self.pooled(&mut tape, &q_seq, self.query_set())?);
            p_nodes.push(self.pooled(&mut tape, &p_seq, self.doc_set())?);
            n_nodes.push(self.pooled(&mut tape, &n_seq, self.doc_set())?);
        }
        let q = tape.concat_rows(&q_nodes)?;
        let p = tape.concat_rows(&p_nodes)?;
        let n = tape.concat_rows(&n_nodes)?;
        let docs = tape.concat_rows(&[p, n])?;

        let task = match self.setup.train.task {
            TrainTask::Triplets => match self.setup.train.in_batch {
                InBatchNegatives::Full => {
                    let scores = tape.matmul_transpose_b(q, docs)?;
                    let targets: Vec<usize> = (0..batch.len()).collect();
                    contrastive_loss_on_tape(&mut tape, scores, &targets)?
                }
                InBatchNegatives::PositivesOnly => {
                    let pos_scores = tape.matmul_transpose_b(q, p)?;
                    let own_neg = tape.rowwise_dot(q, n)?;
                    let scores = tape.concat_cols(&[pos_scores, own_neg])?;
                    let targets: Vec<usize> = (0..batch.len()).collect();
                    contrastive_loss_on_tape(&mut tape, scores, &targets)?
                }
            },
            TrainTask::Distill => {
                let margins: Option<Vec<f64>> =
                    batch.iter().map(TrainingExample::teacher_margin).collect();
                let Some(margins) = margins else {
                    let missing: Vec<&str> = batch
                        .iter()
                        .filter(|e| e.teacher_margin().is_none())
                        .map(|e| e.query_id.as_str())
                        .collect();
                    return Err(Error::Contract(format!(
                        "distillation batch lacks teacher scores for queries {missing:?}"
                    )));
                };
                let pos_scores = tape.rowwise_dot(q, p)?;
                let neg_scores = tape.rowwise_dot(q, n)?;
                margin_mse_on_tape(&mut tape, pos_scores, neg_scores, &TeacherMargins(margins))?
            }
        };

        let l1 = l1_reg_on_tape(&mut tape, q)?;
        let flops = flops_reg_on_tape(&mut tape, docs, self.setup.regularizer.flops_squared)?;
        let total = total_loss_on_tape(
            &mut tape,
            task,
            l1,
            flops,
            self.step,
            &self.setup.regularizer,
        )?;

        let loss = tape.scalar_value(total)?;
        if !loss.is_finite() {
            let ids: Vec<String> = batch
                .iter()
                .map(|e| {
                    format!("({}, {}, {})", e.query_id, e.positive_id, e.negative_id)
                })
                .collect();
            return Err(Error::Contract(format!(
                "non-finite loss {loss} at step {}; batch: {}",
                self.step,
                ids.join(" ")
            )));
        }

        let grads = tape.backward(total)?;
        drop(tape);
        self.step += 1;
        let lr = learning_rate_at(self.step, &self.setup.train);
        self.adam.step(&mut self.store, &grads, lr)?;
        Ok(loss)
    }

    /// Encodes the whole collection with the current parameters.
    pub fn encode_corpus(&self, data: TrainData<'_>) -> Result<Vec<(String, SparseVector)>> {
        encode_corpus(
            &self.setup.encoder,
            &self.setup.adapters,
            &self.store,
            data.tokenizer,
            data.collection,
            self.doc_set(),
        )
    }

    /// Brute-force validation MRR@10 of the current parameters.
    pub fn evaluate_mrr(&self, data: TrainData<'_>) -> Result<f64> {
        let corpus = self.encode_corpus(data)?;
        let enc = Encoder::new(&self.setup.encoder, &self.setup.adapters, &self.store)?;
        let mut run = crate::data::RunFile::new("dev");
        for (qid, text) in data.dev_queries.iter() {
            let rep = encode_to_sparse(&enc, &data.tokenizer.encode_sequence(text), self.query_set())?;
            let hits = crate::index::brute_force_search(&corpus, &rep, 10);
            run.set_ranking(qid, hits)?;
        }
        Ok(mrr_at_k(&run, data.dev_qrels, 10).mean)
    }

    /// Full training loop: iterates batches (reshuffled each epoch),
    /// evaluates every `eval_every` steps plus once before and after, and
    /// keeps the checkpoint with the highest validation MRR@10.
    pub fn train(&mut self, data: TrainData<'_>, out_dir: &Path) -> Result<CheckpointRecord> {
        if data.triplets.is_empty() {
            return Err(Error::Contract("no training triplets".into()));
        }
        if data.dev_queries.is_empty() {
            return Err(Error::Contract("no validation queries".into()));
        }
        if self.setup.train.task == TrainTask::Distill {
            if let Some(bad) = data.triplets.iter().find(|t| t.teacher_margin().is_none()) {
                return Err(Error::Contract(format!(
                    "distillation requires teacher scores; query `{}` lacks them",
                    bad.query_id
                )));
            }
        }
        std::fs::create_dir_all(out_dir)?;
        let ckpt_path = out_dir.join("checkpoint_best.bin");
        let mut log = MetricsLog::create(&out_dir.join("metrics.log"))?;

        let mut best: Option<CheckpointRecord> = None;
        fn save_if_best(
            step: usize,
            mrr: f64,
            ckpt_path: &Path,
            setup: &TrainSetup,
            store: &ParameterStore,
            best: &mut Option<CheckpointRecord>,
        ) -> Result<()> {
            if best.as_ref().map_or(true, |b| mrr > b.mrr10) {
                save_checkpoint(ckpt_path, &setup.encoder, &setup.adapters, store)?;
                *best = Some(CheckpointRecord {
                    step,
                    mrr10: mrr,
                    path: ckpt_path.to_path_buf(),
                });
            }
            Ok(())
        }

        // The starting parameters are a candidate too (important for
        // adaptation rounds, where they are the previous best).
        let mrr0 = self.evaluate_mrr(data)?;
        save_if_best(0, mrr0, &ckpt_path, &self.setup, &self.store, &mut best)?;
        let (lq0, ld0) = lambda_at(0, &self.setup.regularizer);
        log.record(0, f64::NAN, lq0, ld0, Some(mrr0))?;

        let mut order: Vec<usize> = (0..data.triplets.len()).collect();
        let mut cursor = order.len(); // force a shuffle on first use
        let mut epoch = 0usize;
        let total = self.setup.train.total_iters;
        'outer: for _ in 0..total {
            if cursor >= order.len() {
                if let Some(cap) = self.setup.train.epochs {
                    if epoch >= cap {
                        break 'outer;
                    }
                }
                order.shuffle(&mut self.rng);
                cursor = 0;
                epoch += 1;
            }
            let take = self.setup.train.batch_size.min(order.len() - cursor);
            let batch: Vec<TrainingExample> = order[cursor..cursor + take]
                .iter()
                .map(|&i| data.triplets[i].clone())
                .collect();
            cursor += take;

            let loss = self.train_step(data, &batch)?;
            let step = self.step;
            let (lq, ld) = lambda_at(step, &self.setup.regularizer);
            let due = step % self.setup.train.eval_every == 0 || step == total;
            let mrr = if due { Some(self.evaluate_mrr(data)?) } else { None };
            log.record(step, loss, lq, ld, mrr)?;
            if let Some(m) = mrr {
                save_if_best(step, m, &ckpt_path, &self.setup, &self.store, &mut best)?;
            }
        }
        // Final candidate when the loop ended off the eval grid.
        if self.step % self.setup.train.eval_every != 0 {
            let m = self.evaluate_mrr(data)?;
            save_if_best(self.step, m, &ckpt_path, &self.setup, &self.store, &mut best)?;
        }
        Ok(best.expect("at least the initial evaluation ran"))
    }
}

/// Encodes every collection document with the given parameters.
pub fn encode_corpus(
    enc_cfg: &EncoderConfig,
    acfg: &AdapterConfig,
    store: &ParameterStore,
    tokenizer: &Tokenizer,
    collection: &TextTable,
    set: AdapterSet,
) -> Result<Vec<(String, SparseVector)>> {
    let enc = Encoder::new(enc_cfg, acfg, store)?;
    let mut out = Vec::with_capacity(collection.len());
    for (doc_id, text) in collection.iter() {
        let rep = encode_to_sparse(&enc, &tokenizer.encode_sequence(text), set)?;
        out.push((doc_id.to_string(), rep));
    }
    Ok(out)
}

/// Outcome of a mining pass.
#[derive(Debug, Clone)]
pub struct MiningOutcome {
    pub examples: Vec<TrainingExample>,
    /// Queries without any positive in the qrels.
    pub skipped_no_positive: usize,
    /// Queries whose retrieved depth contained no non-relevant document.
    pub skipped_no_negative: usize,
}

/// Mines hard negatives: for each query, retrieve `depth` documents, drop
/// the judged-relevant ones, and sample `per_query` negatives uniformly
/// from the rest, each paired with a sampled positive from the qrels.
pub fn mine_hard_negatives(
    index: &InvertedIndex,
    query_reps: &[(String, SparseVector)],
    qrels: &Qrels,
    depth: usize,
    per_query: usize,
    seed: u64,
) -> MiningOutcome {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut outcome = MiningOutcome {
        examples: Vec::new(),
        skipped_no_positive: 0,
        skipped_no_negative: 0,
    };
    for (qid, rep) in query_reps {
        let positives: Vec<&str> = qrels
            .relevant_docs(qid)
            .into_iter()
            .map(|(d, _)| d)
            .collect();
        if positives.is_empty() {
            outcome.skipped_no_positive += 1;
            continue;
        }
        let retrieved = index.search(rep, depth);
        let candidates: Vec<&String> = retrieved
            .iter()
            .map(|(d, _)| d)
            .filter(|d| !qrels.is_relevant(qid, d))
            .collect();
        if candidates.is_empty() {
            outcome.skipped_no_negative += 1;
            continue;
        }
        for _ in 0..per_query {
            let neg = candidates[rng.gen_range(0..candidates.len())].clone();
            let pos = positives[rng.gen_range(0..positives.len())].to_string();
            outcome.examples.push(TrainingExample {
                query_id: qid.clone(),
                positive_id: pos,
                negative_id: neg,
                teacher_positive: None,
                teacher_negative: None,
            });
        }
    }
    outcome
}

/// One row of the ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub k: usize,
    /// Rendered active set, e.g. `2-5` or `none`.
    pub active_layers: String,
    pub test_mrr10: f64,
    pub rflops: f64,
    pub trainable_fraction: f64,
    pub train_seconds: f64,
}

pub fn ablation_table_tsv(rows: &[AblationRow]) -> String {
    use std::fmt::Write;
    let mut out = String::from("k\tactive_layers\ttest_mrr10\trflops\ttrainable_fraction\ttrain_seconds\n");
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
            r.k, r.active_layers, r.test_mrr10, r.rflops, r.trainable_fraction, r.train_seconds
        )
        .expect("string write");
    }
    out
}

/// Extra held-out data for sweeps and adaptation rounds.
#[derive(Clone, Copy)]
pub struct TestData<'a> {
    pub queries: &'a TextTable,
    pub qrels: &'a Qrels,
}

fn test_mrr(
    setup: &TrainSetup,
    store: &ParameterStore,
    tokenizer: &Tokenizer,
    collection: &TextTable,
    test: TestData<'_>,
    bi_adapter: bool,
) -> Result<(f64, f64)> {
    let doc_set = if bi_adapter {
        AdapterSet::Document
    } else {
        AdapterSet::Shared
    };
    let query_set = if bi_adapter {
        AdapterSet::Query
    } else {
        AdapterSet::Shared
    };
    let corpus = encode_corpus(
        &setup.encoder,
        &setup.adapters,
        store,
        tokenizer,
        collection,
        doc_set,
    )?;
    let enc = Encoder::new(&setup.encoder, &setup.adapters, store)?;
    let mut run = crate::data::RunFile::new("test");
    for (qid, text) in test.queries.iter() {
        let rep = encode_to_sparse(&enc, &tokenizer.encode_sequence(text), query_set)?;
        let hits = crate::index::brute_force_search(&corpus, &rep, 100);
        run.set_ranking(qid, hits)?;
    }
    let mrr = mrr_at_k(&run, test.qrels, 10).mean;
    let recall = crate::eval::recall_at_k(&run, test.qrels, 100).mean;
    Ok((mrr, recall))
}

/// Trains one model per ablation prefix `k` (fresh init each time, shared
/// seed) and reports effectiveness, sparsity cost, trainable fraction and
/// the training wall-clock.
pub fn run_ablation_suite(
    base: &TrainSetup,
    data: TrainData<'_>,
    test: TestData<'_>,
    ks: &[usize],
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for &k in ks {
        let mut setup = base.clone();
        setup.adapters = ablate(&base.adapters, base.encoder.num_layers, k)?;
        let mut store = init_backbone(&setup.encoder, setup.train.seed)?;
        init_adapters(&mut store, &setup.encoder, &setup.adapters, setup.train.seed)?;

        let run_dir = out_dir.join(format!("ablate_k{k}"));
        let mut trainer = Trainer::new(setup.clone(), store)?;
        let started = Instant::now();
        let best = trainer.train(data, &run_dir)?;
        let train_seconds = started.elapsed().as_secs_f64();

        let best_store = load_checkpoint(&best.path)?.store;
        let (mrr, _recall) = test_mrr(
            &setup,
            &best_store,
            data.tokenizer,
            data.collection,
            test,
            setup.train.bi_adapter,
        )?;

        let corpus = encode_corpus(
            &setup.encoder,
            &setup.adapters,
            &best_store,
            data.tokenizer,
            data.collection,
            AdapterSet::Shared,
        )?;
        let index = build_index(corpus, setup.encoder.vocab_size, 0.0)?;
        let enc = Encoder::new(&setup.encoder, &setup.adapters, &best_store)?;
        let dev_reps: Vec<SparseVector> = data
            .dev_queries
            .iter()
            .map(|(_, text)| {
                encode_to_sparse(&enc, &data.tokenizer.encode_sequence(text), AdapterSet::Shared)
            })
            .collect::<Result<_>>()?;
        let rflops = estimate_rflops(&index, &dev_reps)?;

        let counts = count_params(&trainer.store);
        let active = if setup.adapters.active_layers.is_empty() {
            "none".to_string()
        } else {
            let lo = setup.adapters.active_layers.iter().min().expect("non-empty");
            let hi = setup.adapters.active_layers.iter().max().expect("non-empty");
            format!("{lo}-{hi}")
        };
        rows.push(AblationRow {
            k,
            active_layers: active,
            test_mrr10: mrr,
            rflops,
            trainable_fraction: counts.fraction(),
            train_seconds,
        });
    }
    std::fs::write(out_dir.join("ablation.tsv"), ablation_table_tsv(&rows))?;
    Ok(rows)
}

/// Per-round adaptation metrics; round 0 is the zero-shot evaluation.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_mrr10: f64,
    pub test_recall100: f64,
    pub mined_examples: usize,
}

/// Settings for the adaptation rounds.
#[derive(Debug, Clone)]
pub struct AdaptConfig {
    pub rounds: usize,
    pub mining_depth: usize,
    pub negatives_per_query: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            rounds: 2,
            mining_depth: 50,
            negatives_per_query: 4,
        }
    }
}

/// Domain adaptation: round 0 evaluates the starting model zero-shot; each
/// following round mines hard negatives with the current best model, trains
/// from it (with dev evaluation at every epoch boundary via `eval_every`),
/// and evaluates the best-dev model on the test split.
///
/// Missing adapter parameters are initialized fresh (identity) before the
/// first round, so a checkpoint trained without adapters can be adapted in
/// adapter mode.
pub fn adapt_domain(
    setup: &TrainSetup,
    mut store: ParameterStore,
    data: TrainData<'_>,
    test: TestData<'_>,
    adapt: &AdaptConfig,
    out_dir: &Path,
) -> Result<Vec<RoundMetrics>> {
    std::fs::create_dir_all(out_dir)?;
    // Create any adapter parameters the incoming checkpoint lacks.
    let mut fresh = ParameterStore::new();
    init_adapters(&mut fresh, &setup.encoder, &setup.adapters, setup.train.seed)?;
    for (name, param) in fresh.iter() {
        if !store.contains(name) {
            store.insert(name, param.value.clone(), param.trainable);
        }
    }

    let (mrr0, recall0) = test_mrr(
        setup,
        &store,
        data.tokenizer,
        data.collection,
        test,
        setup.train.bi_adapter,
    )?;
    let mut metrics = vec![RoundMetrics {
        round: 0,
        test_mrr10: mrr0,
        test_recall100: recall0,
        mined_examples: 0,
    }];

    let query_set = if setup.train.bi_adapter {
        AdapterSet::Query
    } else {
        AdapterSet::Shared
    };
    for round in 1..=adapt.rounds {
        // Mine with the current model.
        let corpus = encode_corpus(
            &setup.encoder,
            &setup.adapters,
            &store,
            data.tokenizer,
            data.collection,
            if setup.train.bi_adapter {
                AdapterSet::Document
            } else {
                AdapterSet::Shared
            },
        )?;
        let index = build_index(corpus, setup.encoder.vocab_size, 0.0)?;
        let enc = Encoder::new(&setup.encoder, &setup.adapters, &store)?;
        let query_reps: Vec<(String, SparseVector)> = data
            .queries
            .iter()
            .map(|(qid, text)| {
                encode_to_sparse(&enc, &data.tokenizer.encode_sequence(text), query_set)
                    .map(|rep| (qid.to_string(), rep))
            })
            .collect::<Result<_>>()?;
        let mined = mine_hard_negatives(
            &index,
            &query_reps,
            data.dev_qrels_for_mining(),
            adapt.mining_depth,
            adapt.negatives_per_query,
            setup.train.seed ^ round as u64,
        );
        if mined.examples.is_empty() {
            return Err(Error::Contract(format!(
                "round {round}: mining produced no training examples"
            )));
        }

        let mut round_setup = setup.clone();
        round_setup.train.seed = setup.train.seed.wrapping_add(round as u64);
        let round_dir = out_dir.join(format!("round{round}"));
        let round_data = TrainData {
            triplets: &mined.examples,
            ..data
        };
        let mut trainer = Trainer::new(round_setup.clone(), store.clone())?;
        let best = trainer.train(round_data, &round_dir)?;
        store = load_checkpoint(&best.path)?.store;

        let (mrr, recall) = test_mrr(
            setup,
            &store,
            data.tokenizer,
            data.collection,
            test,
            setup.train.bi_adapter,
        )?;
        metrics.push(RoundMetrics {
            round,
            test_mrr10: mrr,
            test_recall100: recall,
            mined_examples: mined.examples.len(),
        });
    }
    save_checkpoint(
        &out_dir.join("adapted_final.bin"),
        &setup.encoder,
        &setup.adapters,
        &store,
    )?;
    Ok(metrics)
}

impl<'a> TrainData<'a> {
    /// Mining judges negatives against the training qrels. The struct keeps
    /// a single qrels field for validation; mining reuses it when the train
    /// split's qrels are the same object, which is the desk-scale layout.
    fn dev_qrels_for_mining(&self) -> &'a Qrels {
        self.train_qrels.unwrap_or(self.dev_qrels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn tiny_synth() -> (SynthConfig, crate::synth::SynthDataset) {
        let cfg = SynthConfig {
            vocab_terms: 120,
            num_docs: 60,
            train_queries: 12,
            dev_queries: 6,
            test_queries: 6,
            terms_per_doc: 6,
            signature_len: 2,
            relevant_per_query: 1,
            negatives_per_query: 2,
            domain_shift: 0.0,
            teacher_margin: 4.0,
            seed: 11,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        (cfg, data)
    }

    fn tiny_setup(vocab_size: usize, seed: u64, mode: TrainMode) -> TrainSetup {
        let encoder = EncoderConfig {
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 24,
            vocab_size,
            max_seq_len: 16,
            precision: crate::linalg::Precision::F64,
        };
        let adapters = AdapterConfig::houlsby(encoder.num_layers, 8);
        let regularizer = RegularizerConfig {
            lambda_q: 1e-4,
            lambda_d: 1e-4,
            ramp_steps: 20,
            flops_squared: true,
        };
        let train = TrainConfig {
            learning_rate: 2e-3,
            batch_size: 4,
            total_iters: 30,
            warmup_steps: 5,
            constant_after_warmup: true,
            eval_every: 15,
            seed,
            task: TrainTask::Triplets,
            encoder_mode: mode,
            bi_adapter: false,
            in_batch: InBatchNegatives::Full,
            epochs: None,
        };
        TrainSetup {
            encoder,
            adapters,
            regularizer,
            train,
        }
    }

    struct Fixture {
        tokenizer: Tokenizer,
        data: crate::synth::SynthDataset,
    }

    impl Fixture {
        fn new() -> Self {
            let (_, data) = tiny_synth();
            let tokenizer =
                Tokenizer::from_texts(data.collection.iter().map(|(_, t)| t), true);
            Fixture { tokenizer, data }
        }

        fn train_data(&self) -> TrainData<'_> {
            TrainData {
                tokenizer: &self.tokenizer,
                collection: &self.data.collection,
                queries: &self.data.train_queries,
                triplets: &self.data.train_triplets,
                dev_queries: &self.data.dev_queries,
                dev_qrels: &self.data.dev_qrels,
                train_qrels: Some(&self.data.train_qrels),
            }
        }

        fn setup(&self, seed: u64, mode: TrainMode) -> TrainSetup {
            tiny_setup(self.tokenizer.vocab_size(), seed, mode)
        }

        fn store_for(&self, setup: &TrainSetup) -> ParameterStore {
            let mut store = init_backbone(&setup.encoder, setup.train.seed).unwrap();
            init_adapters(&mut store, &setup.encoder, &setup.adapters, setup.train.seed)
                .unwrap();
            store
        }
    }

    #[test]
    fn learning_rate_schedule_shapes() {
        let mut cfg = TrainConfig {
            learning_rate: 1.0,
            warmup_steps: 10,
            total_iters: 110,
            constant_after_warmup: false,
            ..TrainConfig::default()
        };
        assert!((learning_rate_at(1, &cfg) - 0.1).abs() < 1e-12);
        assert!((learning_rate_at(10, &cfg) - 1.0).abs() < 1e-12);
        assert!((learning_rate_at(60, &cfg) - 0.5).abs() < 1e-12);
        assert!(learning_rate_at(110, &cfg).abs() < 1e-12);
        cfg.constant_after_warmup = true;
        assert!((learning_rate_at(60, &cfg) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn select_best_is_argmax_with_earliest_tie() {
        let records = vec![(0, 0.1), (10, 0.5), (20, 0.5), (30, 0.3)];
        assert_eq!(select_best(&records), Some(1));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn adam_moves_only_given_gradients() {
        let mut store = ParameterStore::new();
        store.insert("a", crate::linalg::Matrix::row_vector(&[1.0, 2.0]), true);
        store.insert("b", crate::linalg::Matrix::row_vector(&[3.0]), true);
        let mut tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        let sq = tape.mul_elementwise(a, a).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();

        let mut adam = Adam::new();
        adam.step(&mut store, &grads, 0.1).unwrap();
        assert_ne!(store.value("a").unwrap().data(), &[1.0, 2.0]);
        assert_eq!(store.value("b").unwrap().data(), &[3.0]);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let fx = Fixture::new();
        let mut setup = fx.setup(3, TrainMode::AdapterTune);
        setup.train.learning_rate = 1e-300; // validation requires > 0
        let store = fx.store_for(&setup);
        let snapshot: Vec<(String, Vec<f64>)> = store
            .iter()
            .map(|(n, p)| (n.to_string(), p.value.data().to_vec()))
            .collect();
        let mut trainer = Trainer::new(setup, store).unwrap();
        let batch: Vec<TrainingExample> = fx.data.train_triplets[..2].to_vec();
        trainer.train_step(fx.train_data(), &batch).unwrap();
        for (name, before) in snapshot {
            let after = trainer.store.value(&name).unwrap();
            let max_move = before
                .iter()
                .zip(after.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_move < 1e-290, "{name} moved by {max_move}");
        }
    }

    #[test]
    fn loss_decreases_on_repeated_single_batch() {
        let fx = Fixture::new();
        let setup = fx.setup(5, TrainMode::AdapterTune);
        let store = fx.store_for(&setup);
        let mut trainer = Trainer::new(setup, store).unwrap();
        let batch: Vec<TrainingExample> = fx.data.train_triplets[..1].to_vec();
        let mut losses = Vec::new();
        for _ in 0..10 {
            losses.push(trainer.train_step(fx.train_data(), &batch).unwrap());
        }
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "{losses:?}"
        );
        let decreasing = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(decreasing >= 7, "{losses:?}");
    }

    #[test]
    fn frozen_parameters_never_move() {
        let fx = Fixture::new();
        let setup = fx.setup(7, TrainMode::AdapterTune);
        let store = fx.store_for(&setup);
        let mut trainer = Trainer::new(setup, store).unwrap();
        let frozen: Vec<(String, Vec<u64>)> = trainer
            .store
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, p)| {
                (
                    n.to_string(),
                    p.value.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect();
        assert!(!frozen.is_empty());
        let data = fx.train_data();
        for i in 0..20 {
            let start = (i * 2) % (fx.data.train_triplets.len() - 2);
            let batch = fx.data.train_triplets[start..start + 2].to_vec();
            trainer.train_step(data, &batch).unwrap();
        }
        for (name, before) in frozen {
            let after: Vec<u64> = trainer
                .store
                .value(&name)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(before, after, "{name} drifted");
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let fx = Fixture::new();
        let run = || {
            let setup = fx.setup(13, TrainMode::AdapterTune);
            let store = fx.store_for(&setup);
            let mut trainer = Trainer::new(setup, store).unwrap();
            let mut losses = Vec::new();
            let data = fx.train_data();
            for i in 0..6 {
                let start = (i * 2) % (fx.data.train_triplets.len() - 2);
                let batch = fx.data.train_triplets[start..start + 2].to_vec();
                losses.push(trainer.train_step(data, &batch).unwrap());
            }
            let params: Vec<u64> = trainer
                .store
                .iter()
                .flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()))
                .collect();
            (losses, params)
        };
        let (la, pa) = run();
        let (lb, pb) = run();
        assert_eq!(la, lb);
        assert_eq!(pa, pb);
    }

    #[test]
    fn bi_adapter_gradient_routing() {
        // A query-side forward pass must produce gradients only for
        // query-set adapters (plus shared trainables), never document-set
        // ones.
        let fx = Fixture::new();
        let mut setup = fx.setup(17, TrainMode::AdapterTune);
        setup.adapters.adapter_sets = crate::encoder::AdapterSets::QueryDocument;
        setup.train.bi_adapter = true;
        let store = fx.store_for(&setup);
        let trainer = Trainer::new(setup, store).unwrap();

        let mut tape = Tape::new();
        let seq = fx.tokenizer.encode_sequence("t00000 t00001");
        let pooled = trainer.pooled(&mut tape, &seq, AdapterSet::Query).unwrap();
        let loss = tape.sum_all(pooled);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.iter().any(|(n, _)| n.starts_with("adapter.query.")));
        assert!(!grads.iter().any(|(n, _)| n.starts_with("adapter.document.")));
    }

    #[test]
    fn distill_mode_requires_teacher_scores() {
        let fx = Fixture::new();
        let mut setup = fx.setup(19, TrainMode::AdapterTune);
        setup.train.task = TrainTask::Distill;
        let store = fx.store_for(&setup);
        let mut trainer = Trainer::new(setup, store).unwrap();
        let batch = fx.data.train_triplets[..2].to_vec(); // no teacher scores
        let err = trainer.train_step(fx.train_data(), &batch).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));

        let batch = fx.data.teacher_triplets[..2].to_vec();
        trainer.train_step(fx.train_data(), &batch).unwrap();
    }

    #[test]
    fn non_finite_loss_reports_batch_ids() {
        let fx = Fixture::new();
        let setup = fx.setup(23, TrainMode::AdapterTune);
        let mut store = fx.store_for(&setup);
        // A corrupted parameter drives the whole loss to NaN through the
        // score matrix (inf - inf in the log-sum-exp).
        for v in store.value_mut("head.vocab_bias").unwrap().data_mut() {
            *v = f64::INFINITY;
        }
        let mut trainer = Trainer::new(setup, store).unwrap();
        let batch = fx.data.train_triplets[..1].to_vec();
        let err = trainer
            .train_step(fx.train_data(), &batch)
            .unwrap_err()
            .to_string();
        assert!(err.contains(&batch[0].query_id), "{err}");
    }

    #[test]
    fn train_smoke_run_produces_best_checkpoint() {
        let fx = Fixture::new();
        let setup = fx.setup(29, TrainMode::AdapterTune);
        let store = fx.store_for(&setup);
        let dir = tempfile::tempdir().unwrap();
        let mut trainer = Trainer::new(setup, store).unwrap();
        let best = trainer.train(fx.train_data(), dir.path()).unwrap();
        assert!(best.path.exists());
        assert!((0.0..=1.0).contains(&best.mrr10));
        assert!(dir.path().join("metrics.log").exists());

        // same seed, same best
        let setup = fx.setup(29, TrainMode::AdapterTune);
        let store = fx.store_for(&setup);
        let dir2 = tempfile::tempdir().unwrap();
        let mut trainer2 = Trainer::new(setup, store).unwrap();
        let best2 = trainer2.train(fx.train_data(), dir2.path()).unwrap();
        assert_eq!(best.mrr10, best2.mrr10);
        assert_eq!(best.step, best2.step);
    }

    #[test]
    fn mining_excludes_judged_relevant_docs() {
        let fx = Fixture::new();
        // Lexical bag-of-words reps plus a weak background term shared by
        // everything, so retrieval reaches non-relevant documents too.
        let lexical = |text: &str| {
            let mut dense = vec![0.0; fx.tokenizer.vocab_size()];
            for tok in fx.tokenizer.encode(text) {
                dense[tok as usize] += 1.0;
            }
            dense[crate::data::UNK_ID as usize] = 0.01;
            SparseVector::from_dense(&dense)
        };
        let reps: Vec<(String, SparseVector)> = fx
            .data
            .collection
            .iter()
            .map(|(id, text)| (id.to_string(), lexical(text)))
            .collect();
        let index = build_index(reps.clone(), fx.tokenizer.vocab_size(), 0.0).unwrap();
        let query_reps: Vec<(String, SparseVector)> = fx
            .data
            .train_queries
            .iter()
            .map(|(qid, text)| (qid.to_string(), lexical(text)))
            .collect();
        let outcome = mine_hard_negatives(
            &index,
            &query_reps,
            &fx.data.train_qrels,
            20,
            3,
            99,
        );
        assert!(!outcome.examples.is_empty());
        for ex in &outcome.examples {
            assert!(
                !fx.data.train_qrels.is_relevant(&ex.query_id, &ex.negative_id),
                "judged-relevant doc {} mined as negative",
                ex.negative_id
            );
            assert!(fx.data.train_qrels.is_relevant(&ex.query_id, &ex.positive_id));
        }
    }

    #[test]
    fn mining_skips_degenerate_queries() {
        // depth 1 retrieving only the positive -> skipped (no negative)
        let reps = vec![
            ("pos".to_string(), SparseVector::new(vec![(0, 5.0)]).unwrap()),
            ("other".to_string(), SparseVector::new(vec![(1, 1.0)]).unwrap()),
        ];
        let index = build_index(reps, 4, 0.0).unwrap();
        let mut qrels = Qrels::new();
        qrels.insert("q1", "pos", 1).unwrap();
        let queries = vec![("q1".to_string(), SparseVector::new(vec![(0, 1.0)]).unwrap())];
        let outcome = mine_hard_negatives(&index, &queries, &qrels, 1, 2, 1);
        assert_eq!(outcome.skipped_no_negative, 1);
        assert!(outcome.examples.is_empty());

        // query with no positive in qrels -> skipped and counted
        let queries = vec![("qX".to_string(), SparseVector::new(vec![(0, 1.0)]).unwrap())];
        let outcome = mine_hard_negatives(&index, &queries, &qrels, 5, 2, 1);
        assert_eq!(outcome.skipped_no_positive, 1);
    }
}
