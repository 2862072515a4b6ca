//! Seeded synthetic retrieval corpus with planted relevance.
//!
//! Every query owns a disjoint block of signature terms that appear in
//! exactly its relevant documents; distractor documents draw only from the
//! shared noise region of the vocabulary. A lexical scorer can therefore
//! solve the task, and a trainable encoder has a clean signal to learn.
//!
//! The domain-shift knob rotates the whole term universe by a fraction of
//! the vocabulary, so a shifted dataset keeps the same token inventory
//! (tokenizers built on the base domain still cover it) while the roles of
//! individual terms move: signatures land where the base domain had noise.
//!
//! Every term in the universe is guaranteed to occur in the collection
//! (noise terms are dealt round-robin before random filler), so a
//! vocabulary built from the collection has exactly `vocab_terms + 4`
//! entries. Generation is fully determined by the seed: identical configs
//! produce byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::data::{Qrels, TextTable, TrainingExample};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Distinct word types emitted (tokenizer vocab = this + 4 reserved).
    pub vocab_terms: usize,
    pub num_docs: usize,
    pub train_queries: usize,
    pub dev_queries: usize,
    pub test_queries: usize,
    pub terms_per_doc: usize,
    /// Signature terms per query.
    pub signature_len: usize,
    /// Relevant documents per query.
    pub relevant_per_query: usize,
    /// Training triples emitted per train query.
    pub negatives_per_query: usize,
    /// Noise terms appended to each query text (after the signature),
    /// diluting surface overlap the way verbose real queries do.
    pub query_noise_terms: usize,
    /// Fraction of the vocabulary the term universe is rotated by.
    pub domain_shift: f64,
    /// Oracle-teacher margin for the distillation triples.
    pub teacher_margin: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_terms: 500,
            num_docs: 400,
            train_queries: 60,
            dev_queries: 20,
            test_queries: 20,
            terms_per_doc: 10,
            signature_len: 2,
            relevant_per_query: 2,
            negatives_per_query: 4,
            query_noise_terms: 0,
            domain_shift: 0.0,
            teacher_margin: 6.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn total_queries(&self) -> usize {
        self.train_queries + self.dev_queries + self.test_queries
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_queries() == 0 || self.num_docs == 0 || self.vocab_terms == 0 {
            return Err(Error::Config("counts must be positive".into()));
        }
        if self.signature_len == 0 || self.relevant_per_query == 0 {
            return Err(Error::Config(
                "signature_len and relevant_per_query must be >= 1".into(),
            ));
        }
        let signature_terms = self.total_queries() * self.signature_len;
        if signature_terms + 1 > self.vocab_terms {
            return Err(Error::Config(format!(
                "{} signature terms leave no noise region in a vocabulary of {}",
                signature_terms, self.vocab_terms
            )));
        }
        if self.terms_per_doc < self.signature_len {
            return Err(Error::Config(
                "terms_per_doc must be >= signature_len".into(),
            ));
        }
        let relevant_docs = self.total_queries() * self.relevant_per_query;
        if relevant_docs > self.num_docs {
            return Err(Error::Config(format!(
                "{relevant_docs} relevant docs exceed num_docs {}",
                self.num_docs
            )));
        }
        if !(0.0..=1.0).contains(&self.domain_shift) {
            return Err(Error::Config("domain_shift must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Generated dataset, ready to use in memory or to write as files.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub collection: TextTable,
    pub train_queries: TextTable,
    pub dev_queries: TextTable,
    pub test_queries: TextTable,
    pub train_qrels: Qrels,
    pub dev_qrels: Qrels,
    pub test_qrels: Qrels,
    /// Plain triples over the train split.
    pub train_triplets: Vec<TrainingExample>,
    /// The same triples with oracle-teacher scores attached.
    pub teacher_triplets: Vec<TrainingExample>,
}

fn doc_id(idx: usize) -> String {
    format!("d{idx:06}")
}

fn query_id(split: &str, idx: usize) -> String {
    format!("q{split}{idx:04}")
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);

    let rotation = (config.domain_shift * config.vocab_terms as f64).round() as usize;
    let term_name = |idx: usize| -> String {
        format!("t{:05}", (idx + rotation) % config.vocab_terms)
    };

    let total_queries = config.total_queries();
    let signature_terms = total_queries * config.signature_len;
    let noise_range = signature_terms..config.vocab_terms;
    let noise_len = noise_range.len();

    // Per-query signature blocks (disjoint by construction).
    let signature_of =
        |q: usize| -> Vec<usize> { (q * config.signature_len..(q + 1) * config.signature_len).collect() };

    // Documents as term-index lists. Relevant docs first, then distractors;
    // ids are assigned after a shuffle so relevance is uncorrelated with id
    // order.
    let mut docs: Vec<(Option<usize>, Vec<usize>)> = Vec::with_capacity(config.num_docs);
    for q in 0..total_queries {
        for _ in 0..config.relevant_per_query {
            let mut terms = signature_of(q);
            while terms.len() < config.terms_per_doc {
                terms.push(noise_range.start + rng.gen_range(0..noise_len));
            }
            docs.push((Some(q), terms));
        }
    }
    // Deal every noise term once across distractors before random filler so
    // the collection covers the whole vocabulary.
    let mut pending_noise: Vec<usize> = noise_range.clone().collect();
    while docs.len() < config.num_docs {
        let mut terms = Vec::with_capacity(config.terms_per_doc);
        while terms.len() < config.terms_per_doc {
            if let Some(t) = pending_noise.pop() {
                terms.push(t);
            } else {
                terms.push(noise_range.start + rng.gen_range(0..noise_len));
            }
        }
        docs.push((None, terms));
    }
    if !pending_noise.is_empty() {
        // Tiny corpora may not have enough distractor slots; spill the
        // remaining coverage terms into the last documents' filler.
        for (i, t) in pending_noise.drain(..).enumerate() {
            let slot = docs.len() - 1 - (i % docs.len());
            docs[slot].1.push(t);
        }
    }
    docs.shuffle(&mut rng);

    let mut collection = TextTable::new();
    let mut relevant_docs_of: Vec<Vec<String>> = vec![Vec::new(); total_queries];
    let mut nonrelevant_ids: Vec<String> = Vec::new();
    for (idx, (owner, terms)) in docs.iter().enumerate() {
        let id = doc_id(idx);
        let text = terms
            .iter()
            .map(|&t| term_name(t))
            .collect::<Vec<_>>()
            .join(" ");
        collection.push(id.clone(), text)?;
        match owner {
            Some(q) => relevant_docs_of[*q].push(id),
            None => nonrelevant_ids.push(id),
        }
    }

    let splits = [
        ("train", config.train_queries),
        ("dev", config.dev_queries),
        ("test", config.test_queries),
    ];
    let mut tables = Vec::new();
    let mut qrels_list = Vec::new();
    let mut global_q = 0usize;
    let mut train_query_ids: Vec<(String, usize)> = Vec::new();
    for (split, count) in splits {
        let mut table = TextTable::new();
        let mut qrels = Qrels::new();
        for i in 0..count {
            let qid = query_id(split, i);
            // Signature terms first, then any noise dilution.
            let mut terms = signature_of(global_q);
            for _ in 0..config.query_noise_terms {
                terms.push(noise_range.start + rng.gen_range(0..noise_len));
            }
            let text = terms
                .iter()
                .map(|&t| term_name(t))
                .collect::<Vec<_>>()
                .join(" ");
            table.push(qid.clone(), text)?;
            for doc in &relevant_docs_of[global_q] {
                qrels.insert(&qid, doc, 1)?;
            }
            if split == "train" {
                train_query_ids.push((qid, global_q));
            }
            global_q += 1;
        }
        tables.push(table);
        qrels_list.push(qrels);
    }

    // Training triples: positives from the planted relevance, negatives
    // sampled uniformly from documents not relevant to the query.
    let mut train_triplets = Vec::new();
    let mut teacher_triplets = Vec::new();
    for (qid, q) in &train_query_ids {
        for _ in 0..config.negatives_per_query {
            let pos = relevant_docs_of[*q]
                .get(rng.gen_range(0..relevant_docs_of[*q].len()))
                .expect("relevant_per_query >= 1")
                .clone();
            let neg = loop {
                // Any doc not relevant to this query qualifies, including
                // other queries' relevant docs.
                let idx = rng.gen_range(0..config.num_docs);
                let cand = doc_id(idx);
                if !relevant_docs_of[*q].contains(&cand) {
                    break cand;
                }
            };
            let base = TrainingExample {
                query_id: qid.clone(),
                positive_id: pos,
                negative_id: neg,
                teacher_positive: None,
                teacher_negative: None,
            };
            teacher_triplets.push(TrainingExample {
                teacher_positive: Some(config.teacher_margin),
                teacher_negative: Some(0.0),
                ..base.clone()
            });
            train_triplets.push(base);
        }
    }

    let mut it = tables.into_iter();
    let mut qr = qrels_list.into_iter();
    Ok(SynthDataset {
        collection,
        train_queries: it.next().expect("three splits"),
        dev_queries: it.next().expect("three splits"),
        test_queries: it.next().expect("three splits"),
        train_qrels: qr.next().expect("three splits"),
        dev_qrels: qr.next().expect("three splits"),
        test_qrels: qr.next().expect("three splits"),
        train_triplets,
        teacher_triplets,
    })
}

/// File names used under an output directory.
pub const COLLECTION_FILE: &str = "collection.tsv";
pub const TRAIN_QUERIES_FILE: &str = "queries.train.tsv";
pub const DEV_QUERIES_FILE: &str = "queries.dev.tsv";
pub const TEST_QUERIES_FILE: &str = "queries.test.tsv";
pub const TRAIN_TRIPLETS_FILE: &str = "triplets.train.tsv";
pub const TEACHER_TRIPLETS_FILE: &str = "triplets.teacher.tsv";
pub const TRAIN_QRELS_FILE: &str = "qrels.train.txt";
pub const DEV_QRELS_FILE: &str = "qrels.dev.txt";
pub const TEST_QRELS_FILE: &str = "qrels.test.txt";

pub fn write_dataset(data: &SynthDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::data::write_text_table(&dir.join(COLLECTION_FILE), &data.collection)?;
    crate::data::write_text_table(&dir.join(TRAIN_QUERIES_FILE), &data.train_queries)?;
    crate::data::write_text_table(&dir.join(DEV_QUERIES_FILE), &data.dev_queries)?;
    crate::data::write_text_table(&dir.join(TEST_QUERIES_FILE), &data.test_queries)?;
    crate::data::write_triplets(&dir.join(TRAIN_TRIPLETS_FILE), &data.train_triplets)?;
    crate::data::write_triplets(&dir.join(TEACHER_TRIPLETS_FILE), &data.teacher_triplets)?;
    crate::data::write_qrels(&dir.join(TRAIN_QRELS_FILE), &data.train_qrels)?;
    crate::data::write_qrels(&dir.join(DEV_QRELS_FILE), &data.dev_qrels)?;
    crate::data::write_qrels(&dir.join(TEST_QRELS_FILE), &data.test_qrels)?;
    Ok(())
}

/// Summary line for logs.
pub fn describe(data: &SynthDataset) -> String {
    let mut s = String::new();
    write!(
        s,
        "docs={} train_q={} dev_q={} test_q={} triples={} qrels={}/{}/{}",
        data.collection.len(),
        data.train_queries.len(),
        data.dev_queries.len(),
        data.test_queries.len(),
        data.train_triplets.len(),
        data.train_qrels.num_pairs(),
        data.dev_qrels.num_pairs(),
        data.test_qrels.num_pairs()
    )
    .expect("string write");
    s
}
