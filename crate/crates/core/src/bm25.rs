//! Passage corpus ingestion and an inverted-index BM25 retriever.
//!
//! Analyzer: case-fold, split on non-alphanumerics, no stemming and no
//! index-side stopword removal. Scoring uses the Lucene-style idf
//! `ln((N - df + 0.5) / (df + 0.5) + 1)`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SEGMENT_SIZE: usize = 100;
pub const DEFAULT_K1: f64 = 0.9;
pub const DEFAULT_B: f64 = 0.4;

/// Index file layout, all integers little-endian:
///
/// ```text
/// magic    8 bytes  "DRBM25IX"
/// version  u32
/// k1, b    f64, f64
/// n_docs   u64
/// per doc  id u32 | title str | text str | token_count u32 | doc_len u32
/// n_terms  u64
/// per term term str | n_postings u32 | (doc_idx u32, tf u32) * n_postings
/// ```
///
/// `str` is a u32 byte length followed by UTF-8 bytes. Terms are written in
/// lexicographic order.
pub const INDEX_MAGIC: &[u8; 8] = b"DRBM25IX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate passage id {0}")]
    DuplicatePassage(u32),
    #[error("cannot build an index from zero passages")]
    EmptyCorpus,
    #[error("corpus line {line}: {message}")]
    CorpusRecord { line: usize, message: String },
    #[error("index file is not a BM25 index")]
    BadMagic,
    #[error("index version {found} does not match {expected}; rebuild the index")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: u32,
    pub source_doc: String,
    pub text: String,
    pub token_count: usize,
}

/// Greedy split of `body` into consecutive runs of `segment_size`
/// whitespace tokens; the remainder becomes the last passage. Ids are
/// assigned from `first_id` upward.
pub fn segment_document(first_id: u32, title: &str, body: &str, segment_size: usize) -> Vec<Passage> {
    let size = segment_size.max(1);
    let tokens: Vec<&str> = body.split_whitespace().collect();
    tokens
        .chunks(size)
        .enumerate()
        .map(|(k, chunk)| Passage {
            passage_id: first_id + k as u32,
            source_doc: title.to_string(),
            text: chunk.join(" "),
            token_count: chunk.len(),
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct CorpusRecord {
    title: String,
    text: String,
}

/// Reads `{"title", "text"}` JSONL and segments every document.
pub fn load_corpus(path: &Path, segment_size: usize) -> Result<Vec<Passage>, IndexError> {
    let reader = BufReader::new(File::open(path)?);
    let mut passages = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| IndexError::CorpusRecord { line: i + 1, message: e.to_string() })?;
        let next = passages.len() as u32;
        passages.extend(segment_document(next, &rec.title, &rec.text, segment_size));
    }
    Ok(passages)
}

/// Lowercased alphanumeric runs of `text`.
pub fn analyze(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    /// Index into the passage table (ingestion order sorted by id).
    pub doc: u32,
    pub tf: u32,
}

/// Lucene-style BM25 idf.
pub fn idf(doc_count: usize, df: usize) -> f64 {
    let n = doc_count as f64;
    let df = df as f64;
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

/// Saturated, length-normalized term weight.
pub fn term_weight(tf: u32, doc_len: u32, avg_doc_len: f64, k1: f64, b: f64) -> f64 {
    let tf = f64::from(tf);
    let norm = if avg_doc_len > 0.0 { f64::from(doc_len) / avg_doc_len } else { 0.0 };
    tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassageIndex {
    passages: Vec<Passage>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    postings: HashMap<String, Vec<Posting>>,
    k1: f64,
    b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalStatus {
    Hits,
    NoHits,
    /// The query contained no indexable terms.
    EmptyQuery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub passage_id: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub status: RetrievalStatus,
    pub hits: Vec<Hit>,
    pub query_terms_used: Vec<String>,
}

/// Anything that can serve top-k passages for a flat query string.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str, k: usize) -> Result<RetrievalResult, IndexError>;
    fn passage(&self, id: u32) -> Option<&Passage>;
}

impl PassageIndex {
    pub fn build(passages: Vec<Passage>) -> Result<Self, IndexError> {
        Self::build_with(passages, DEFAULT_K1, DEFAULT_B)
    }

    pub fn build_with(mut passages: Vec<Passage>, k1: f64, b: f64) -> Result<Self, IndexError> {
        if passages.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        passages.sort_by_key(|p| p.passage_id);
        if let Some(w) = passages.windows(2).find(|w| w[0].passage_id == w[1].passage_id) {
            return Err(IndexError::DuplicatePassage(w[0].passage_id));
        }
        let mut doc_lengths = Vec::with_capacity(passages.len());
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        for (doc, p) in passages.iter().enumerate() {
            let terms = analyze(&p.text);
            doc_lengths.push(terms.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (term, tf) in tf {
                // docs are visited in id order, so lists stay sorted
                postings.entry(term).or_default().push(Posting { doc: doc as u32, tf });
            }
        }
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        let avg_doc_length = total as f64 / doc_lengths.len() as f64;
        Ok(Self { passages, doc_lengths, avg_doc_length, postings, k1, b })
    }

    pub fn doc_count(&self) -> usize {
        self.passages.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.doc_lengths
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn params(&self) -> (f64, f64) {
        (self.k1, self.b)
    }

    /// Postings for `term` as `(passage_id, tf)`; empty for unknown terms.
    pub fn postings(&self, term: &str) -> Vec<(u32, u32)> {
        self.postings
            .get(term)
            .map(|list| list.iter().map(|p| (self.passages[p.doc as usize].passage_id, p.tf)).collect())
            .unwrap_or_default()
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn search(&self, query: &str, k: usize) -> Result<RetrievalResult, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        let mut seen = HashSet::new();
        let terms: Vec<String> = analyze(query).into_iter().filter(|t| seen.insert(t.clone())).collect();
        if terms.is_empty() {
            return Ok(RetrievalResult { status: RetrievalStatus::EmptyQuery, hits: vec![], query_terms_used: terms });
        }
        let n = self.doc_count();
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else { continue };
            let w_idf = idf(n, list.len());
            for p in list {
                let len = self.doc_lengths[p.doc as usize];
                *acc.entry(p.doc).or_insert(0.0) += w_idf * term_weight(p.tf, len, self.avg_doc_length, self.k1, self.b);
            }
        }
        let mut hits: Vec<Hit> = acc
            .into_iter()
            .map(|(doc, score)| Hit { passage_id: self.passages[doc as usize].passage_id, score })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.passage_id.cmp(&b.passage_id)));
        hits.truncate(k);
        let status = if hits.is_empty() { RetrievalStatus::NoHits } else { RetrievalStatus::Hits };
        Ok(RetrievalResult { status, hits, query_terms_used: terms })
    }

    pub fn passage_by_id(&self, id: u32) -> Option<&Passage> {
        self.passages
            .binary_search_by_key(&id, |p| p.passage_id)
            .ok()
            .map(|i| &self.passages[i])
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), IndexError> {
        w.write_all(INDEX_MAGIC)?;
        w.write_u32::<LittleEndian>(INDEX_VERSION)?;
        w.write_f64::<LittleEndian>(self.k1)?;
        w.write_f64::<LittleEndian>(self.b)?;
        w.write_u64::<LittleEndian>(self.passages.len() as u64)?;
        for (p, &len) in self.passages.iter().zip(&self.doc_lengths) {
            w.write_u32::<LittleEndian>(p.passage_id)?;
            write_str(w, &p.source_doc)?;
            write_str(w, &p.text)?;
            w.write_u32::<LittleEndian>(p.token_count as u32)?;
            w.write_u32::<LittleEndian>(len)?;
        }
        let mut terms: Vec<&String> = self.postings.keys().collect();
        terms.sort();
        w.write_u64::<LittleEndian>(terms.len() as u64)?;
        for term in terms {
            let list = &self.postings[term];
            write_str(w, term)?;
            w.write_u32::<LittleEndian>(list.len() as u32)?;
            for p in list {
                w.write_u32::<LittleEndian>(p.doc)?;
                w.write_u32::<LittleEndian>(p.tf)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, IndexError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(IndexError::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != INDEX_VERSION {
            return Err(IndexError::VersionMismatch { found: version, expected: INDEX_VERSION });
        }
        let k1 = r.read_f64::<LittleEndian>()?;
        let b = r.read_f64::<LittleEndian>()?;
        let n_docs = r.read_u64::<LittleEndian>()? as usize;
        let mut passages = Vec::with_capacity(n_docs.min(1 << 20));
        let mut doc_lengths = Vec::with_capacity(n_docs.min(1 << 20));
        for _ in 0..n_docs {
            let passage_id = r.read_u32::<LittleEndian>()?;
            let source_doc = read_str(r)?;
            let text = read_str(r)?;
            let token_count = r.read_u32::<LittleEndian>()? as usize;
            doc_lengths.push(r.read_u32::<LittleEndian>()?);
            passages.push(Passage { passage_id, source_doc, text, token_count });
        }
        if passages.is_empty() {
            return Err(IndexError::Corrupt("no passages".into()));
        }
        let n_terms = r.read_u64::<LittleEndian>()? as usize;
        let mut postings = HashMap::with_capacity(n_terms.min(1 << 20));
        for _ in 0..n_terms {
            let term = read_str(r)?;
            let n = r.read_u32::<LittleEndian>()? as usize;
            let mut list = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let doc = r.read_u32::<LittleEndian>()?;
                if doc as usize >= passages.len() {
                    return Err(IndexError::Corrupt(format!("posting for {term:?} points past the passage table")));
                }
                list.push(Posting { doc, tf: r.read_u32::<LittleEndian>()? });
            }
            postings.insert(term, list);
        }
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        let avg_doc_length = total as f64 / doc_lengths.len() as f64;
        Ok(Self { passages, doc_lengths, avg_doc_length, postings, k1, b })
    }
}

impl Retriever for PassageIndex {
    fn retrieve(&self, query: &str, k: usize) -> Result<RetrievalResult, IndexError> {
        self.search(query, k)
    }

    fn passage(&self, id: u32) -> Option<&Passage> {
        self.passage_by_id(id)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String, IndexError> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| IndexError::Corrupt(e.to_string()))
}
