//! Corpus, query, triplet, qrels and run-file I/O, plus the tokenizer.
//!
//! File formats (tab-separated unless noted, UTF-8, one record per line):
//!
//! - collection: `docid<TAB>text`
//! - queries: `qid<TAB>text`
//! - triplets: `qid<TAB>posid<TAB>negid`
//! - distillation triplets: `qid<TAB>posid<TAB>negid<TAB>teacher_pos<TAB>teacher_neg`
//! - qrels (whitespace, TREC 4-column): `qid 0 docid rel`
//! - run (whitespace, TREC 6-column): `qid Q0 docid rank score tag`
//! - vocabulary: one token per line, line number = token id
//!
//! The tokenizer is a deterministic whitespace splitter with optional
//! lowercasing over a vocabulary built from the collection; unknown tokens
//! map to `[UNK]`. Subword modeling is deliberately out of scope.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::encoder::TokenSequence;
use crate::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const START_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["[PAD]", "[START]", "[SEP]", "[UNK]"];

/// Whitespace tokenizer over a fixed vocabulary with four reserved ids.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    lowercase: bool,
}

impl Tokenizer {
    /// Builds the vocabulary from text: unique tokens, sorted, after the
    /// reserved entries. Deterministic for a given input set.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, lowercase: bool) -> Self {
        let mut uniq = BTreeSet::new();
        for text in texts {
            for tok in text.split_whitespace() {
                let tok = if lowercase {
                    tok.to_lowercase()
                } else {
                    tok.to_string()
                };
                if !RESERVED_TOKENS.contains(&tok.as_str()) {
                    uniq.insert(tok);
                }
            }
        }
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(uniq);
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Tokenizer {
            tokens,
            ids,
            lowercase,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn token_id(&self, token: &str) -> u32 {
        // Reserved tokens match verbatim, before case folding.
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        if self.lowercase {
            if let Some(&id) = self.ids.get(token.to_lowercase().as_str()) {
                return id;
            }
        }
        UNK_ID
    }

    pub fn token_text(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Raw token ids, no special tokens.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|t| self.token_id(t)).collect()
    }

    /// `[START] tokens...` with an all-ones mask.
    pub fn encode_sequence(&self, text: &str) -> TokenSequence {
        let mut ids = vec![START_ID];
        ids.extend(self.encode(text));
        TokenSequence::unpadded(ids)
    }

    /// `[START] query [SEP] document` with segment markers (0 for the query
    /// side including the separator, 1 for the document side). The document
    /// is truncated first to fit `max_len`.
    pub fn encode_pair(&self, query: &str, document: &str, max_len: usize) -> (TokenSequence, Vec<u8>) {
        let q = self.encode(query);
        let d = self.encode(document);
        let head_len = (q.len() + 2).min(max_len);
        let doc_room = max_len.saturating_sub(head_len);
        let mut ids = vec![START_ID];
        ids.extend(q.iter().copied());
        ids.push(SEP_ID);
        ids.truncate(head_len);
        let mut segments = vec![0u8; ids.len()];
        for &t in d.iter().take(doc_room) {
            ids.push(t);
            segments.push(1);
        }
        (TokenSequence::unpadded(ids), segments)
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.tokens {
            writeln!(out, "{tok}").expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED_TOKENS.len()
            || tokens[..4] != RESERVED_TOKENS.map(str::to_string)
        {
            return Err(Error::FileFormat(format!(
                "{}: vocabulary must begin with the reserved tokens",
                path.display()
            )));
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Tokenizer {
            tokens,
            ids,
            lowercase: true,
        })
    }
}

/// Id-to-text table (collections and query sets share the shape).
#[derive(Debug, Clone, Default)]
pub struct TextTable {
    entries: Vec<(String, String)>,
    index: HashMap<String, usize>,
}

impl TextTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: String, text: String) -> Result<()> {
        if self.index.contains_key(&id) {
            return Err(Error::Data(format!("duplicate id `{id}`")));
        }
        self.index.insert(id.clone(), self.entries.len());
        self.entries.push((id, text));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.index.get(id).map(|&i| self.entries[i].1.as_str())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(i, t)| (i.as_str(), t.as_str()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(i, _)| i.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One training triple; teacher scores are present only for distillation
/// data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub query_id: String,
    pub positive_id: String,
    pub negative_id: String,
    pub teacher_positive: Option<f64>,
    pub teacher_negative: Option<f64>,
}

impl TrainingExample {
    pub fn teacher_margin(&self) -> Option<f64> {
        Some(self.teacher_positive? - self.teacher_negative?)
    }
}

/// Graded relevance judgments keyed by (query, document).
#[derive(Debug, Clone, Default)]
pub struct Qrels {
    by_query: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: &str, doc_id: &str, rel: u32) -> Result<()> {
        let docs = self.by_query.entry(query_id.to_string()).or_default();
        if docs.contains_key(doc_id) {
            return Err(Error::Data(format!(
                "duplicate qrels pair ({query_id}, {doc_id})"
            )));
        }
        docs.insert(doc_id.to_string(), rel);
        Ok(())
    }

    pub fn relevance(&self, query_id: &str, doc_id: &str) -> Option<u32> {
        self.by_query.get(query_id)?.get(doc_id).copied()
    }

    pub fn is_relevant(&self, query_id: &str, doc_id: &str) -> bool {
        self.relevance(query_id, doc_id).unwrap_or(0) > 0
    }

    /// Docs with rel > 0 for a query.
    pub fn relevant_docs(&self, query_id: &str) -> Vec<(&str, u32)> {
        self.by_query
            .get(query_id)
            .map(|docs| {
                docs.iter()
                    .filter(|(_, &r)| r > 0)
                    .map(|(d, &r)| (d.as_str(), r))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn judgments(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.by_query.get(query_id)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.by_query.keys().map(String::as_str)
    }

    pub fn num_queries(&self) -> usize {
        self.by_query.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.by_query.values().map(BTreeMap::len).sum()
    }
}

/// A ranked run: per query, documents ordered by descending score (ranks
/// 1..n contiguous).
#[derive(Debug, Clone)]
pub struct RunFile {
    pub tag: String,
    rankings: BTreeMap<String, Vec<(String, f64)>>,
}

impl RunFile {
    pub fn new(tag: impl Into<String>) -> Self {
        RunFile {
            tag: tag.into(),
            rankings: BTreeMap::new(),
        }
    }

    /// Addition replaces any previous ranking for the query. Scores must be
    /// non-increasing.
    pub fn set_ranking(&mut self, query_id: &str, ranked: Vec<(String, f64)>) -> Result<()> {
        for w in ranked.windows(2) {
            if w[1].1 > w[0].1 {
                return Err(Error::Data(format!(
                    "non-monotone scores for query {query_id}: {} then {}",
                    w[0].1, w[1].1
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for (doc, _) in &ranked {
            if !seen.insert(doc.clone()) {
                return Err(Error::Data(format!(
                    "duplicate doc `{doc}` in ranking for query {query_id}"
                )));
            }
        }
        self.rankings.insert(query_id.to_string(), ranked);
        Ok(())
    }

    pub fn ranking(&self, query_id: &str) -> Option<&[(String, f64)]> {
        self.rankings.get(query_id).map(Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.rankings.keys().map(String::as_str)
    }

    pub fn num_queries(&self) -> usize {
        self.rankings.len()
    }

    /// TREC 6-column lines; scores at 6 decimals.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (qid, ranked) in &self.rankings {
            for (rank, (doc, score)) in ranked.iter().enumerate() {
                writeln!(out, "{qid} Q0 {doc} {} {score:.6} {}", rank + 1, self.tag)
                    .expect("string write");
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn read_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    Ok(BufReader::new(file).lines())
}

fn load_text_table(path: &Path, kind: &str) -> Result<TextTable> {
    let mut table = TextTable::new();
    for (lineno, line) in read_lines(path)?.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let Some((id, text)) = line.split_once('\t') else {
            return Err(parse_error(
                path,
                lineno + 1,
                format!("expected `{kind}id<TAB>text`"),
            ));
        };
        table
            .push(id.to_string(), text.to_string())
            .map_err(|e| parse_error(path, lineno + 1, e.to_string()))?;
    }
    Ok(table)
}

pub fn load_collection(path: &Path) -> Result<TextTable> {
    load_text_table(path, "doc")
}

pub fn load_queries(path: &Path) -> Result<TextTable> {
    load_text_table(path, "q")
}

pub fn write_text_table(path: &Path, table: &TextTable) -> Result<()> {
    let mut out = String::new();
    for (id, text) in table.iter() {
        writeln!(out, "{id}\t{text}").expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn load_triplets_impl(
    path: &Path,
    queries: &TextTable,
    collection: &TextTable,
    with_teacher: bool,
) -> Result<Vec<TrainingExample>> {
    let want_cols = if with_teacher { 5 } else { 3 };
    let mut out = Vec::new();
    for (lineno, line) in read_lines(path)?.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != want_cols {
            return Err(parse_error(
                path,
                lineno + 1,
                format!("expected {want_cols} tab-separated fields, got {}", cols.len()),
            ));
        }
        let (qid, pos, neg) = (cols[0], cols[1], cols[2]);
        if !queries.contains(qid) {
            return Err(parse_error(path, lineno + 1, format!("unknown query id `{qid}`")));
        }
        for doc in [pos, neg] {
            if !collection.contains(doc) {
                return Err(parse_error(
                    path,
                    lineno + 1,
                    format!("unknown doc id `{doc}`"),
                ));
            }
        }
        let (tp, tn) = if with_teacher {
            let parse = |s: &str, what: &str| {
                s.parse::<f64>().map_err(|_| {
                    parse_error(path, lineno + 1, format!("non-numeric {what} score `{s}`"))
                })
            };
            (
                Some(parse(cols[3], "teacher positive")?),
                Some(parse(cols[4], "teacher negative")?),
            )
        } else {
            (None, None)
        };
        out.push(TrainingExample {
            query_id: qid.to_string(),
            positive_id: pos.to_string(),
            negative_id: neg.to_string(),
            teacher_positive: tp,
            teacher_negative: tn,
        });
    }
    Ok(out)
}

pub fn load_triplets(
    path: &Path,
    queries: &TextTable,
    collection: &TextTable,
) -> Result<Vec<TrainingExample>> {
    load_triplets_impl(path, queries, collection, false)
}

pub fn load_teacher_triplets(
    path: &Path,
    queries: &TextTable,
    collection: &TextTable,
) -> Result<Vec<TrainingExample>> {
    load_triplets_impl(path, queries, collection, true)
}

pub fn write_triplets(path: &Path, triplets: &[TrainingExample]) -> Result<()> {
    let mut out = String::new();
    for t in triplets {
        match (t.teacher_positive, t.teacher_negative) {
            (Some(tp), Some(tn)) => writeln!(
                out,
                "{}\t{}\t{}\t{tp:.6}\t{tn:.6}",
                t.query_id, t.positive_id, t.negative_id
            )
            .expect("string write"),
            _ => writeln!(out, "{}\t{}\t{}", t.query_id, t.positive_id, t.negative_id)
                .expect("string write"),
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_qrels(path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (lineno, line) in read_lines(path)?.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(parse_error(
                path,
                lineno + 1,
                format!("expected 4 whitespace-separated fields, got {}", cols.len()),
            ));
        }
        let rel: u32 = cols[3].parse().map_err(|_| {
            parse_error(path, lineno + 1, format!("non-numeric relevance `{}`", cols[3]))
        })?;
        qrels
            .insert(cols[0], cols[2], rel)
            .map_err(|e| parse_error(path, lineno + 1, e.to_string()))?;
    }
    Ok(qrels)
}

pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    let mut out = String::new();
    for qid in qrels.queries() {
        for (doc, rel) in qrels.judgments(qid).expect("query from iteration") {
            writeln!(out, "{qid} 0 {doc} {rel}").expect("string write");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_run(path: &Path) -> Result<RunFile> {
    let mut per_query: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
    let mut tag = String::new();
    for (lineno, line) in read_lines(path)?.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(parse_error(
                path,
                lineno + 1,
                format!("expected 6 whitespace-separated fields, got {}", cols.len()),
            ));
        }
        let rank: usize = cols[3]
            .parse()
            .map_err(|_| parse_error(path, lineno + 1, format!("bad rank `{}`", cols[3])))?;
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| parse_error(path, lineno + 1, format!("bad score `{}`", cols[4])))?;
        tag = cols[5].to_string();
        per_query
            .entry(cols[0].to_string())
            .or_default()
            .push((rank, cols[2].to_string(), score));
    }
    let mut run = RunFile::new(tag);
    for (qid, mut entries) in per_query {
        entries.sort_by_key(|(rank, _, _)| *rank);
        for (i, (rank, _, _)) in entries.iter().enumerate() {
            if *rank != i + 1 {
                return Err(Error::Data(format!(
                    "ranks for query {qid} are not contiguous from 1"
                )));
            }
        }
        let ranked = entries.into_iter().map(|(_, d, s)| (d, s)).collect();
        run.set_ranking(&qid, ranked)?;
    }
    Ok(run)
}

/// Writer for the line-delimited training metrics log
/// (`step<TAB>loss<TAB>lambda_q<TAB>lambda_d<TAB>mrr10`).
pub struct MetricsLog {
    file: std::fs::File,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "step\tloss\tlambda_q\tlambda_d\tmrr10")?;
        Ok(MetricsLog { file })
    }

    pub fn record(
        &mut self,
        step: usize,
        loss: f64,
        lambda_q: f64,
        lambda_d: f64,
        mrr10: Option<f64>,
    ) -> Result<()> {
        let mrr = mrr10.map_or(String::new(), |m| format!("{m:.6}"));
        writeln!(
            self.file,
            "{step}\t{loss:.6}\t{lambda_q:.6e}\t{lambda_d:.6e}\t{mrr}"
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn tokenizer_reserved_ids_and_determinism() {
        let t = Tokenizer::from_texts(["the cat", "a cat sat"], true);
        assert_eq!(t.token_id("[PAD]"), PAD_ID);
        assert_eq!(t.token_id("[START]"), START_ID);
        assert_eq!(t.token_id("[SEP]"), SEP_ID);
        assert_eq!(t.token_id("[UNK]"), UNK_ID);
        assert_eq!(t.vocab_size(), 4 + 4); // a, cat, sat, the
        assert_eq!(t.token_id("zebra"), UNK_ID);

        let t2 = Tokenizer::from_texts(["a cat sat", "the cat"], true);
        assert_eq!(t.encode("the cat sat"), t2.encode("the cat sat"));
    }

    #[test]
    fn tokenizer_lowercases_when_asked() {
        let t = Tokenizer::from_texts(["Apple"], true);
        assert_eq!(t.token_id("APPLE"), t.token_id("apple"));
        let t = Tokenizer::from_texts(["Apple apple"], false);
        assert_ne!(t.token_id("Apple"), t.token_id("apple"));
    }

    #[test]
    fn encode_sequence_prepends_start() {
        let t = Tokenizer::from_texts(["x y"], true);
        let seq = t.encode_sequence("y x");
        assert_eq!(seq.ids[0], START_ID);
        assert_eq!(seq.ids.len(), 3);
        assert!(seq.mask.iter().all(|&m| m == 1));
    }

    #[test]
    fn encode_pair_truncates_document_first() {
        let t = Tokenizer::from_texts(["a b c d e f g h"], true);
        let (seq, segs) = t.encode_pair("a b", "c d e f g h", 8);
        // [START] a b [SEP] -> 4 head tokens, 4 doc tokens fit
        assert_eq!(seq.len(), 8);
        assert_eq!(segs.len(), 8);
        assert_eq!(&segs[..4], &[0, 0, 0, 0]);
        assert_eq!(&segs[4..], &[1, 1, 1, 1]);
        assert_eq!(seq.ids[3], SEP_ID);
        // query survives in full, document is cut
        let (seq2, _) = t.encode_pair("a b", "c d e f g h", 6);
        assert_eq!(seq2.len(), 6);
        assert_eq!(seq2.ids[..4], seq.ids[..4]);
    }

    #[test]
    fn vocabulary_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let t = Tokenizer::from_texts(["foo bar baz"], true);
        t.save(&path).unwrap();
        let loaded = Tokenizer::load(&path).unwrap();
        assert_eq!(loaded.vocab_size(), t.vocab_size());
        assert_eq!(loaded.token_id("bar"), t.token_id("bar"));
    }

    #[test]
    fn collection_load_and_duplicate_detection() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("collection.tsv");
        std::fs::write(&path, "d1\tsome text\nd2\tmore text\n").unwrap();
        let c = load_collection(&path).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get("d1"), Some("some text"));

        std::fs::write(&path, "d1\ta\nd1\tb\n").unwrap();
        let err = load_collection(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        assert!(err.contains("d1"), "{err}");
    }

    #[test]
    fn triplet_unknown_doc_names_line() {
        let dir = tempdir().unwrap();
        let cpath = dir.path().join("c.tsv");
        let qpath = dir.path().join("q.tsv");
        let tpath = dir.path().join("t.tsv");
        std::fs::write(&cpath, "d1\tx\nd2\ty\n").unwrap();
        std::fs::write(&qpath, "q1\tquery\n").unwrap();
        std::fs::write(&tpath, "q1\td1\td2\nq1\td1\tdMISSING\n").unwrap();
        let c = load_collection(&cpath).unwrap();
        let q = load_queries(&qpath).unwrap();
        let err = load_triplets(&tpath, &q, &c).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("dMISSING"), "{err}");
    }

    #[test]
    fn teacher_triplets_parse_scores() {
        let dir = tempdir().unwrap();
        let cpath = dir.path().join("c.tsv");
        let qpath = dir.path().join("q.tsv");
        let tpath = dir.path().join("t.tsv");
        std::fs::write(&cpath, "d1\tx\nd2\ty\n").unwrap();
        std::fs::write(&qpath, "q1\tquery\n").unwrap();
        std::fs::write(&tpath, "q1\td1\td2\t4.25\t-0.5\n").unwrap();
        let c = load_collection(&cpath).unwrap();
        let q = load_queries(&qpath).unwrap();
        let t = load_teacher_triplets(&tpath, &q, &c).unwrap();
        assert_eq!(t[0].teacher_margin(), Some(4.75));

        std::fs::write(&tpath, "q1\td1\td2\tnotanumber\t0\n").unwrap();
        assert!(load_teacher_triplets(&tpath, &q, &c).is_err());
    }

    #[test]
    fn qrels_round_trip_and_duplicates() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("qrels.txt");
        let mut qrels = Qrels::new();
        qrels.insert("q1", "d1", 2).unwrap();
        qrels.insert("q1", "d2", 0).unwrap();
        qrels.insert("q2", "d1", 1).unwrap();
        assert!(qrels.insert("q1", "d1", 1).is_err());

        write_qrels(&path, &qrels).unwrap();
        let loaded = load_qrels(&path).unwrap();
        assert_eq!(loaded.num_pairs(), 3);
        assert_eq!(loaded.relevance("q1", "d1"), Some(2));
        assert_eq!(loaded.relevance("q1", "d2"), Some(0));
        assert!(!loaded.is_relevant("q1", "d2"));
        assert_eq!(loaded.relevant_docs("q1"), vec![("d1", 2)]);
    }

    #[test]
    fn run_file_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.txt");
        let mut run = RunFile::new("testtag");
        run.set_ranking("q1", vec![("d2".into(), 3.5), ("d1".into(), 1.25)])
            .unwrap();
        run.set_ranking("q2", vec![("d1".into(), 0.5)]).unwrap();
        run.write(&path).unwrap();

        let loaded = load_run(&path).unwrap();
        assert_eq!(loaded.tag, "testtag");
        assert_eq!(
            loaded.ranking("q1").unwrap(),
            &[("d2".to_string(), 3.5), ("d1".to_string(), 1.25)]
        );

        // non-monotone scores rejected at construction
        let mut bad = RunFile::new("x");
        assert!(bad
            .set_ranking("q1", vec![("a".into(), 1.0), ("b".into(), 2.0)])
            .is_err());
    }

    #[test]
    fn run_file_rejects_gappy_ranks() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.txt");
        std::fs::write(&path, "q1 Q0 d1 1 2.0 t\nq1 Q0 d2 3 1.0 t\n").unwrap();
        assert!(load_run(&path).is_err());
    }

    #[test]
    fn missing_file_is_io_error_with_path() {
        let err = load_collection(Path::new("/definitely/not/here.tsv"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("not/here.tsv"), "{err}");
    }
}
