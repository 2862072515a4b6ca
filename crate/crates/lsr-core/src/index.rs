//! Inverted index over sparse vectors: exact top-k retrieval and the
//! retrieval-FLOPS estimate.
//!
//! Scoring is term-at-a-time into a dense accumulator, which makes ranking
//! exactly equal to brute-force dot products (no approximation, no skipping)
//! with a fixed summation order (ascending term id, then posting order).
//! Ties are broken by ascending doc id, so rankings are stable across runs.
//!
//! The on-disk format is little-endian and versioned:
//!
//! ```text
//! magic "LSRIDX01" | version u32 | doc_count u64 | vocab_size u64
//! per-term offsets: vocab_size x u64   (relative to the postings section;
//!                                       u64::MAX marks an empty term)
//! doc-id table: doc_count x (len u32, utf8 bytes)
//! postings section: per non-empty term, count u64 then count x (doc u32, weight f64)
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::sparse::{score, SparseVector};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"LSRIDX01";
const VERSION: u32 = 1;
const EMPTY_TERM: u64 = u64::MAX;

/// Immutable postings over a fixed corpus; build once, search freely.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    doc_ids: Vec<String>,
    /// Per term id: (doc index, weight), sorted by doc index.
    postings: Vec<Vec<(u32, f64)>>,
}

impl InvertedIndex {
    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.postings.len()
    }

    pub fn doc_id(&self, idx: usize) -> &str {
        &self.doc_ids[idx]
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.doc_ids.iter().map(String::as_str)
    }

    pub fn postings(&self, term: u32) -> &[(u32, f64)] {
        &self.postings[term as usize]
    }

    /// Documents containing the term.
    pub fn document_frequency(&self, term: u32) -> usize {
        self.postings[term as usize].len()
    }

    /// Total stored (term, doc) pairs.
    pub fn num_postings(&self) -> usize {
        self.postings.iter().map(Vec::len).sum()
    }

    /// Fraction of documents activating the term (binary activation).
    pub fn doc_activation(&self, term: u32) -> f64 {
        if self.doc_ids.is_empty() {
            0.0
        } else {
            self.document_frequency(term) as f64 / self.doc_ids.len() as f64
        }
    }

    /// Exact top-k by dot product; documents never touched by a query term
    /// score zero and are excluded. Ties order by ascending doc id.
    pub fn search(&self, query: &SparseVector, k: usize) -> Vec<(String, f64)> {
        if k == 0 || query.is_empty() {
            return Vec::new();
        }
        let mut acc = vec![0.0f64; self.doc_ids.len()];
        for &(term, qw) in query.entries() {
            if (term as usize) < self.postings.len() {
                for &(doc, dw) in &self.postings[term as usize] {
                    acc[doc as usize] += qw * dw;
                }
            }
        }
        let mut hits: Vec<(u32, f64)> = acc
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > 0.0)
            .map(|(i, &s)| (i as u32, s))
            .collect();
        hits.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("scores are finite")
                .then_with(|| self.doc_ids[a.0 as usize].cmp(&self.doc_ids[b.0 as usize]))
        });
        hits.truncate(k);
        hits.into_iter()
            .map(|(i, s)| (self.doc_ids[i as usize].clone(), s))
            .collect()
    }

    /// Writes the versioned binary layout described in the module docs.
    pub fn save(&self, path: &Path) -> Result<()> {
        // Serialize postings first to know the per-term offsets.
        let mut offsets = vec![EMPTY_TERM; self.postings.len()];
        let mut blob: Vec<u8> = Vec::new();
        for (term, postings) in self.postings.iter().enumerate() {
            if postings.is_empty() {
                continue;
            }
            offsets[term] = blob.len() as u64;
            blob.extend_from_slice(&(postings.len() as u64).to_le_bytes());
            for &(doc, w) in postings {
                blob.extend_from_slice(&doc.to_le_bytes());
                blob.extend_from_slice(&w.to_le_bytes());
            }
        }

        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.doc_ids.len() as u64).to_le_bytes())?;
        out.write_all(&(self.postings.len() as u64).to_le_bytes())?;
        for off in &offsets {
            out.write_all(&off.to_le_bytes())?;
        }
        for id in &self.doc_ids {
            out.write_all(&(id.len() as u32).to_le_bytes())?;
            out.write_all(id.as_bytes())?;
        }
        out.write_all(&blob)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut cur = Cursor::new(&bytes, path);
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(Error::FileFormat(format!(
                "{}: bad magic, not an index file",
                path.display()
            )));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::FileFormat(format!(
                "{}: unsupported index version {version} (expected {VERSION})",
                path.display()
            )));
        }
        let doc_count = cur.u64()? as usize;
        let vocab_size = cur.u64()? as usize;
        let mut offsets = Vec::with_capacity(vocab_size);
        for _ in 0..vocab_size {
            offsets.push(cur.u64()?);
        }
        let mut doc_ids = Vec::with_capacity(doc_count);
        for _ in 0..doc_count {
            let len = cur.u32()? as usize;
            let raw = cur.take(len)?;
            let id = std::str::from_utf8(raw)
                .map_err(|_| {
                    Error::FileFormat(format!("{}: doc id is not utf-8", path.display()))
                })?
                .to_string();
            doc_ids.push(id);
        }
        let postings_base = cur.pos;
        let mut postings = vec![Vec::new(); vocab_size];
        for (term, &off) in offsets.iter().enumerate() {
            if off == EMPTY_TERM {
                continue;
            }
            let mut entry_cur = Cursor {
                bytes: &bytes,
                pos: postings_base + off as usize,
                path,
            };
            let count = entry_cur.u64()? as usize;
            let mut list = Vec::with_capacity(count);
            for _ in 0..count {
                let doc = entry_cur.u32()?;
                let w = entry_cur.f64()?;
                list.push((doc, w));
            }
            postings[term] = list;
        }
        Ok(InvertedIndex { doc_ids, postings })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Cursor {
            bytes,
            pos: 0,
            path,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::FileFormat(format!(
                "{}: truncated file (wanted {n} bytes at offset {})",
                self.path.display(),
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Builds postings from a corpus stream. Weights below `epsilon` are
/// dropped (`epsilon = 0` keeps everything: stored weights are > 0 by the
/// sparse-vector invariant).
pub fn build_index<I>(corpus: I, vocab_size: usize, epsilon: f64) -> Result<InvertedIndex>
where
    I: IntoIterator<Item = (String, SparseVector)>,
{
    let mut doc_ids: Vec<String> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut postings: Vec<Vec<(u32, f64)>> = vec![Vec::new(); vocab_size];
    for (doc_id, rep) in corpus {
        if !seen.insert(doc_id.clone()) {
            return Err(Error::Data(format!("duplicate doc id `{doc_id}`")));
        }
        let doc_idx = doc_ids.len() as u32;
        doc_ids.push(doc_id);
        for &(term, w) in rep.entries() {
            if term as usize >= vocab_size {
                return Err(Error::Contract(format!(
                    "term id {term} out of range for vocab size {vocab_size}"
                )));
            }
            if w >= epsilon && w > 0.0 {
                postings[term as usize].push((doc_idx, w));
            }
        }
    }
    // Docs were appended in order, so postings are already sorted by index.
    Ok(InvertedIndex { doc_ids, postings })
}

/// Expected term-overlap count between a random query from the sample and a
/// random indexed document: `sum_j p_q[j] * p_d[j]` with binary activation
/// probabilities estimated from the query sample and the index.
pub fn estimate_rflops(index: &InvertedIndex, queries: &[SparseVector]) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Contract(
            "retrieval-FLOPS estimate needs at least one query".into(),
        ));
    }
    let nq = queries.len() as f64;
    let mut query_df: BTreeMap<u32, usize> = BTreeMap::new();
    for q in queries {
        for &(term, _) in q.entries() {
            *query_df.entry(term).or_insert(0) += 1;
        }
    }
    let mut total = 0.0;
    for (&term, &df) in &query_df {
        if (term as usize) < index.vocab_size() {
            total += (df as f64 / nq) * index.doc_activation(term);
        }
    }
    Ok(total)
}

/// Brute-force whole-corpus scoring with the same tie-break, used as the
/// test oracle and for desk-scale validation evaluation.
pub fn brute_force_search(
    corpus: &[(String, SparseVector)],
    query: &SparseVector,
    k: usize,
) -> Vec<(String, f64)> {
    let mut hits: Vec<(String, f64)> = corpus
        .iter()
        .map(|(id, rep)| (id.clone(), score(query, rep)))
        .filter(|(_, s)| *s > 0.0)
        .collect();
    hits.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    hits.truncate(k);
    hits
}
