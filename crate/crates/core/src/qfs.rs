//! Query formulation from the triggering token's attention over its whole
//! preceding context.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stopwords::StopwordSet;
use crate::trace::{GenerationTrace, PromptRegion, TraceError};

#[derive(Debug, Error)]
pub enum QfsError {
    #[error("top-n must be at least 1")]
    InvalidTopN,
    #[error("token {0} has no preceding context")]
    NoContext(usize),
    #[error("no eligible context words before token {0}")]
    NoEligibleWords(usize),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Which prompt regions may contribute query words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QfsOptions {
    pub mask_exemplars: bool,
    pub mask_question: bool,
}

impl Default for QfsOptions {
    fn default() -> Self {
        Self { mask_exemplars: true, mask_question: false }
    }
}

impl QfsOptions {
    fn admits(&self, region: PromptRegion) -> bool {
        match region {
            PromptRegion::Exemplar => !self.mask_exemplars,
            PromptRegion::Question => !self.mask_question,
            PromptRegion::Context | PromptRegion::Other => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub words: Vec<String>,
    /// Context positions (prompt positions first, then `prompt_len + g` for
    /// generated token `g`) of the first selected token of each word.
    pub source_positions: Vec<usize>,
    pub n_requested: usize,
}

impl Query {
    pub fn render(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum WordKey {
    Prompt(usize),
    Generated(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub position: usize,
    pub word: String,
    pub weight: f64,
    pub eligible: bool,
    pub selected: bool,
}

struct Ranked {
    rows: Vec<Candidate>,
    keys: Vec<Option<WordKey>>,
    /// Indices into `rows` of the selected tokens.
    selected: Vec<usize>,
}

fn rank(
    trace: &GenerationTrace,
    trigger: usize,
    n: usize,
    stopwords: &StopwordSet,
    opts: QfsOptions,
) -> Result<Ranked, QfsError> {
    if n == 0 {
        return Err(QfsError::InvalidTopN);
    }
    let tok = trace
        .tokens()
        .get(trigger)
        .ok_or(TraceError::OutOfRange { position: trigger, len: trace.len() })?;
    let row = &tok.attention_row;
    if row.is_empty() {
        return Err(QfsError::NoContext(trigger));
    }
    let prompt_len = trace.prompt_len();
    let mut rows = Vec::with_capacity(row.len());
    let mut keys = Vec::with_capacity(row.len());
    for (pos, &weight) in row.iter().enumerate() {
        let (word, key) = if pos < prompt_len {
            match trace.prompt_tokens().get(pos) {
                Some(pt) => {
                    let word = trace.word_of_prompt_token(pos).unwrap_or("").to_string();
                    let ok = opts.admits(pt.region)
                        && !pt.surface.trim().is_empty()
                        && !stopwords.is_stop_word(&word);
                    (word, ok.then_some(WordKey::Prompt(pt.word_index)))
                }
                // prompt text was not shipped: nothing to map to
                None => (String::new(), None),
            }
        } else {
            let g = pos - prompt_len;
            let word = trace.word_of_token(g)?.to_string();
            let ok = !trace.is_stop_token(g, stopwords)?;
            (word, ok.then_some(WordKey::Generated(trace.tokens()[g].word_index)))
        };
        rows.push(Candidate { position: pos, word, weight, eligible: key.is_some(), selected: false });
        keys.push(key);
    }

    let mut order: Vec<usize> = (0..rows.len()).filter(|&i| keys[i].is_some()).collect();
    // descending weight, ties to the earlier position
    order.sort_by(|&a, &b| rows[b].weight.total_cmp(&rows[a].weight).then(a.cmp(&b)));
    order.truncate(n);
    for &i in &order {
        rows[i].selected = true;
    }
    Ok(Ranked { rows, keys, selected: order })
}

/// Builds the query for the token at `trigger`: rank its attention row,
/// keep the top `n` eligible tokens, map them to words, dedupe and restore
/// text order. Slots freed by dedupe are not backfilled.
pub fn formulate(
    trace: &GenerationTrace,
    trigger: usize,
    n: usize,
    stopwords: &StopwordSet,
    opts: QfsOptions,
) -> Result<Query, QfsError> {
    let ranked = rank(trace, trigger, n, stopwords, opts)?;
    let mut picked: Vec<(WordKey, usize)> = ranked
        .selected
        .iter()
        .map(|&i| (ranked.keys[i].expect("selected tokens are eligible"), i))
        .collect();
    picked.sort();
    picked.dedup_by_key(|(k, _)| *k);
    if picked.is_empty() {
        return Err(QfsError::NoEligibleWords(trigger));
    }
    Ok(Query {
        words: picked.iter().map(|&(_, i)| ranked.rows[i].word.clone()).collect(),
        source_positions: picked.iter().map(|&(_, i)| ranked.rows[i].position).collect(),
        n_requested: n,
    })
}

/// Per-position view of one formulation, for inspection.
pub fn candidates(
    trace: &GenerationTrace,
    trigger: usize,
    n: usize,
    stopwords: &StopwordSet,
    opts: QfsOptions,
) -> Result<Vec<Candidate>, QfsError> {
    Ok(rank(trace, trigger, n, stopwords, opts)?.rows)
}

/// Writes `position,word,weight,selected` rows.
pub fn write_candidates_csv<W: Write>(rows: &[Candidate], out: W) -> Result<(), QfsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["position", "word", "weight", "selected"])?;
    for c in rows {
        w.write_record([c.position.to_string(), c.word.clone(), c.weight.to_string(), c.selected.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
