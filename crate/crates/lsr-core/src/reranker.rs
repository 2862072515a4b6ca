//! Cross-encoding reranker: a scalar head on the sequence-start position of
//! a jointly encoded query-document pair.
//!
//! The parameter store reuses the encoder layout minus the term-weight head,
//! plus a two-row segment embedding (query side 0, document side 1) and the
//! always-freshly-initialized classification head `cls.w` / `cls.b`. A
//! reranker can start from scratch or copy the backbone of a first-stage
//! checkpoint; in adapter mode the copied backbone (and the segment table)
//! stays frozen while fresh adapters and the head train.
//!
//! Training uses the contrastive loss restricted to the (positive, negative)
//! pair per query — no in-batch negatives — and selects the best checkpoint
//! by pairwise accuracy on held-out triples, the natural validation signal
//! when no first-stage run is available during training.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{TextTable, Tokenizer, TrainingExample};
use crate::encoder::{
    init_adapters, AdapterConfig, AdapterSet, Encoder, EncoderConfig, TokenSequence, TrainMode,
};
use crate::objectives::contrastive_loss_on_tape;
use crate::tape::{NodeId, ParameterStore, Tape};
use crate::trainer::{learning_rate_at, Adam, TrainConfig};
use crate::{Error, Result};

/// Std-dev for the fresh classification head.
pub const CLS_INIT_STD: f64 = 0.02;

/// Tokenized pair input: `[START] query [SEP] document` with segment
/// markers.
#[derive(Debug, Clone)]
pub struct PairInput {
    pub seq: TokenSequence,
    pub segments: Vec<u8>,
}

impl PairInput {
    pub fn from_texts(
        tokenizer: &Tokenizer,
        query: &str,
        document: &str,
        max_len: usize,
    ) -> Self {
        let (seq, segments) = tokenizer.encode_pair(query, document, max_len);
        PairInput { seq, segments }
    }
}

fn reranker_extra_spec(d: usize) -> [(&'static str, usize, usize); 3] {
    [("embed.segment", 2, d), ("cls.w", d, 1), ("cls.b", 1, 1)]
}

fn init_extra(store: &mut ParameterStore, config: &EncoderConfig, seed: u64) {
    use rand_distr::{Distribution, Normal};
    for (name, rows, cols) in reranker_extra_spec(config.hidden_dim) {
        let value = if name == "cls.b" {
            crate::linalg::Matrix::zeros(rows, cols)
        } else {
            let mut rng =
                ChaCha12Rng::seed_from_u64(crate::encoder::param_seed(seed, name));
            let dist = Normal::new(0.0, CLS_INIT_STD).expect("positive std");
            let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
            crate::linalg::Matrix::from_vec(rows, cols, data).expect("consistent shape")
        };
        store.insert(name, value, true);
    }
}

/// Fresh cross-encoder: random backbone, segment table and head; no
/// term-weight head.
pub fn init_cross_encoder(
    config: &EncoderConfig,
    adapters: &AdapterConfig,
    seed: u64,
) -> Result<ParameterStore> {
    let mut store = crate::encoder::init_backbone(config, seed)?;
    strip_splade_head(&mut store);
    init_adapters(&mut store, config, adapters, seed)?;
    init_extra(&mut store, config, seed);
    Ok(store)
}

fn strip_splade_head(store: &mut ParameterStore) {
    let heads: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("head."))
        .map(str::to_string)
        .collect();
    for name in heads {
        store.remove(&name);
    }
}

/// Copies a first-stage backbone into a cross-encoder. The term-weight head
/// and any first-stage adapters are discarded; the classification head and
/// segment table are freshly initialized regardless of the source.
///
/// `FinetuneAll` leaves everything trainable. `AdapterTune` freezes the
/// copied backbone (and segments), adds fresh identity adapters, and trains
/// them with the head (plus sublayer layer norms when the flag says so).
pub fn init_from_first_stage(
    checkpoint: &Checkpoint,
    target: &EncoderConfig,
    adapters: &AdapterConfig,
    mode: TrainMode,
    seed: u64,
) -> Result<ParameterStore> {
    let src = &checkpoint.encoder;
    let mut mismatches = Vec::new();
    for (field, a, b) in [
        ("num_layers", src.num_layers, target.num_layers),
        ("hidden_dim", src.hidden_dim, target.hidden_dim),
        ("num_heads", src.num_heads, target.num_heads),
        ("ffn_dim", src.ffn_dim, target.ffn_dim),
        ("vocab_size", src.vocab_size, target.vocab_size),
        ("max_seq_len", src.max_seq_len, target.max_seq_len),
    ] {
        if a != b {
            mismatches.push(format!("{field} (checkpoint {a}, reranker {b})"));
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::Config(format!(
            "first-stage checkpoint is incompatible: {}",
            mismatches.join(", ")
        )));
    }

    let mut store = ParameterStore::new();
    for (name, param) in checkpoint.store.iter() {
        if name.starts_with("head.") || name.starts_with("adapter.") {
            continue;
        }
        store.insert(name, param.value.clone(), true);
    }
    init_adapters(&mut store, target, adapters, seed)?;
    init_extra(&mut store, target, seed);
    set_reranker_trainable(&mut store, adapters, mode);
    Ok(store)
}

/// Freeze policy for the reranker: the classification head always trains;
/// in adapter mode the backbone and segment table freeze while adapters
/// (and optionally the sublayer norms) train.
pub fn set_reranker_trainable(store: &mut ParameterStore, acfg: &AdapterConfig, mode: TrainMode) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let on = match mode {
            TrainMode::FinetuneAll => true,
            TrainMode::HeadOnly => name.starts_with("cls."),
            TrainMode::AdapterTune => {
                name.starts_with("cls.")
                    || crate::encoder::is_adapter_of_active_layer(&name, acfg)
                    || (acfg.train_layernorms
                        && crate::encoder::is_sublayer_norm_of_active_layer(&name, acfg))
            }
        };
        store.set_trainable(&name, on).expect("name from iteration");
    }
}

/// Read-only scoring surface.
pub struct CrossEncoder<'a> {
    pub config: &'a EncoderConfig,
    pub adapters: &'a AdapterConfig,
    pub store: &'a ParameterStore,
}

impl<'a> CrossEncoder<'a> {
    pub fn new(
        config: &'a EncoderConfig,
        adapters: &'a AdapterConfig,
        store: &'a ParameterStore,
    ) -> Result<Self> {
        config.validate()?;
        adapters.validate(config)?;
        Ok(CrossEncoder {
            config,
            adapters,
            store,
        })
    }

    /// Score node on a tape: encoder forward, hidden state of position 0,
    /// then the linear head.
    pub fn score_on_tape(&self, tape: &mut Tape, pair: &PairInput) -> Result<NodeId> {
        let enc = Encoder::new(self.config, self.adapters, self.store)?;
        let hidden =
            enc.encode_with_segments(tape, &pair.seq, Some(&pair.segments), AdapterSet::Shared)?;
        let first = tape.gather_rows(hidden, &[0])?;
        let w = tape.param(self.store, "cls.w")?;
        let b = tape.param(self.store, "cls.b")?;
        let s = tape.matmul(first, w)?;
        tape.add(s, b)
    }

    /// Plain scalar score on a throwaway tape.
    pub fn score(&self, pair: &PairInput) -> Result<f64> {
        let mut tape = Tape::with_precision(self.config.precision);
        let node = self.score_on_tape(&mut tape, pair)?;
        tape.scalar_value(node)
    }
}

/// Sorts (doc, score) by descending score with ascending-id ties — shared
/// by reranking and its tests (any strictly increasing transform of the
/// scores leaves this order unchanged).
pub fn reorder_by_score(mut scored: Vec<(String, f64)>) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    scored
}

/// Rescore the top `depth` of each query's ranking with the cross-encoder.
/// Output rankings are permutations of the input prefixes.
pub fn rerank(
    ce: &CrossEncoder<'_>,
    tokenizer: &Tokenizer,
    collection: &TextTable,
    queries: &TextTable,
    run: &crate::data::RunFile,
    depth: usize,
) -> Result<crate::data::RunFile> {
    let mut out = crate::data::RunFile::new(format!("{}-rerank", run.tag));
    for qid in run.queries() {
        let query_text = queries
            .get(qid)
            .ok_or_else(|| Error::Data(format!("query `{qid}` missing from query table")))?;
        let ranked = run.ranking(qid).expect("query from iteration");
        let mut scored = Vec::new();
        for (doc_id, _) in ranked.iter().take(depth) {
            let doc_text = collection
                .get(doc_id)
                .ok_or_else(|| Error::Data(format!("doc `{doc_id}` missing from collection")))?;
            let pair =
                PairInput::from_texts(tokenizer, query_text, doc_text, ce.config.max_seq_len);
            scored.push((doc_id.clone(), ce.score(&pair)?));
        }
        out.set_ranking(qid, reorder_by_score(scored))?;
    }
    Ok(out)
}

/// Fraction of triples where the positive outscores the negative.
pub fn pairwise_accuracy(
    ce: &CrossEncoder<'_>,
    tokenizer: &Tokenizer,
    collection: &TextTable,
    queries: &TextTable,
    triples: &[TrainingExample],
) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::Contract("no triples to score".into()));
    }
    let mut wins = 0usize;
    for t in triples {
        let q = queries
            .get(&t.query_id)
            .ok_or_else(|| Error::Data(format!("unknown query `{}`", t.query_id)))?;
        let pos_text = collection
            .get(&t.positive_id)
            .ok_or_else(|| Error::Data(format!("unknown doc `{}`", t.positive_id)))?;
        let neg_text = collection
            .get(&t.negative_id)
            .ok_or_else(|| Error::Data(format!("unknown doc `{}`", t.negative_id)))?;
        let sp = ce.score(&PairInput::from_texts(
            tokenizer,
            q,
            pos_text,
            ce.config.max_seq_len,
        ))?;
        let sn = ce.score(&PairInput::from_texts(
            tokenizer,
            q,
            neg_text,
            ce.config.max_seq_len,
        ))?;
        if sp > sn {
            wins += 1;
        }
    }
    Ok(wins as f64 / triples.len() as f64)
}

/// Best reranker checkpoint by held-out pairwise accuracy.
#[derive(Debug, Clone)]
pub struct RerankerRecord {
    pub step: usize,
    pub accuracy: f64,
    pub path: PathBuf,
}

pub struct RerankerData<'a> {
    pub tokenizer: &'a Tokenizer,
    pub collection: &'a TextTable,
    pub queries: &'a TextTable,
    pub triplets: &'a [TrainingExample],
    pub dev_triplets: &'a [TrainingExample],
}

/// Contrastive training over exactly (positive, negative) per query — the
/// denominator has two terms and in-batch candidates are never used. The
/// loop contract matches the first-stage trainer: Adam, linear warmup,
/// epoch reshuffling, frozen parameters never move.
pub fn train_reranker(
    config: &EncoderConfig,
    adapters: &AdapterConfig,
    train: &TrainConfig,
    mut store: ParameterStore,
    data: &RerankerData<'_>,
    out_dir: &Path,
) -> Result<RerankerRecord> {
    config.validate()?;
    adapters.validate(config)?;
    train.validate()?;
    if data.triplets.is_empty() {
        return Err(Error::Contract("no reranker training triples".into()));
    }
    if data.dev_triplets.is_empty() {
        return Err(Error::Contract("no reranker validation triples".into()));
    }
    set_reranker_trainable(&mut store, adapters, train.encoder_mode);
    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join("reranker_best.bin");

    let mut adam = Adam::new();
    let mut rng = ChaCha12Rng::seed_from_u64(train.seed);
    let mut pair_cache: HashMap<(String, String), PairInput> = HashMap::new();

    let mut best: Option<RerankerRecord> = None;
    let consider = |step: usize,
                        store: &ParameterStore,
                        best: &mut Option<RerankerRecord>|
     -> Result<()> {
        let ce = CrossEncoder::new(config, adapters, store)?;
        let acc = pairwise_accuracy(
            &ce,
            data.tokenizer,
            data.collection,
            data.queries,
            data.dev_triplets,
        )?;
        if best.as_ref().map_or(true, |b| acc > b.accuracy) {
            save_checkpoint(&ckpt_path, config, adapters, store)?;
            *best = Some(RerankerRecord {
                step,
                accuracy: acc,
                path: ckpt_path.clone(),
            });
        }
        Ok(())
    };
    consider(0, &store, &mut best)?;

    let mut order: Vec<usize> = (0..data.triplets.len()).collect();
    let mut cursor = order.len();
    for step in 1..=train.total_iters {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let take = train.batch_size.min(order.len() - cursor);
        let batch: Vec<&TrainingExample> = order[cursor..cursor + take]
            .iter()
            .map(|&i| &data.triplets[i])
            .collect();
        cursor += take;

        let mut tape = Tape::new();
        let mut pos_nodes = Vec::new();
        let mut neg_nodes = Vec::new();
        {
            let ce = CrossEncoder::new(config, adapters, &store)?;
            for ex in &batch {
                for (doc, nodes) in [
                    (&ex.positive_id, &mut pos_nodes),
                    (&ex.negative_id, &mut neg_nodes),
                ] {
                    let key = (ex.query_id.clone(), doc.to_string());
                    if !pair_cache.contains_key(&key) {
                        let q = data
                            .queries
                            .get(&ex.query_id)
                            .ok_or_else(|| {
                                Error::Data(format!("unknown query `{}`", ex.query_id))
                            })?;
                        let d = data.collection.get(doc).ok_or_else(|| {
                            Error::Data(format!("unknown doc `{doc}`"))
                        })?;
                        pair_cache.insert(
                            key.clone(),
                            PairInput::from_texts(data.tokenizer, q, d, config.max_seq_len),
                        );
                    }
                    nodes.push(ce.score_on_tape(&mut tape, &pair_cache[&key])?);
                }
            }
        }
        let pos = tape.concat_rows(&pos_nodes)?;
        let neg = tape.concat_rows(&neg_nodes)?;
        let scores = tape.concat_cols(&[pos, neg])?;
        let targets = vec![0usize; batch.len()];
        let loss = contrastive_loss_on_tape(&mut tape, scores, &targets)?;
        let loss_val = tape.scalar_value(loss)?;
        if !loss_val.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|e| e.query_id.as_str()).collect();
            return Err(Error::Contract(format!(
                "non-finite reranker loss {loss_val} at step {step}; queries {ids:?}"
            )));
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        adam.step(&mut store, &grads, learning_rate_at(step, train))?;

        if step % train.eval_every == 0 || step == train.total_iters {
            consider(step, &store, &mut best)?;
        }
    }
    Ok(best.expect("initial evaluation ran"))
}
