#![allow(dead_code)]

use rand::Rng;

use dynrag_core::stopwords::ENGLISH_STOPWORDS;
use dynrag_core::trace::{
    assign_word_indices, FinishedReason, GenerationTrace, PromptRegion, PromptToken, TokenRecord, TraceData,
    ATTENTION_POLICY,
};

const CONTENT: &[&str] = &[
    "Genghis", "Khan", "film", "directed", "Morayta", "died", "1999", "Hypocrite", "June", "Paris", "river", "Murnau",
    "born", "country", "father", "Mongol", "2013",
];
const STOP: &[&str] = &["the", "of", "in", "is", "a", "was", "and", "The", "by"];
const PIECES: &[&str] = &["oc", "rite", "ing", "s", "'s"];
const PUNCT: &[&str] = &[".", ",", "?", ")"];
const BLANK: &[&str] = &[" ", "\n", "  "];

/// One random surface: a new word, a word piece, punctuation or pure
/// whitespace.
pub fn surface<R: Rng>(rng: &mut R, first: bool) -> String {
    let lead = if first && rng.gen_bool(0.5) { "" } else { " " };
    match rng.gen_range(0..100) {
        0..=44 => format!("{lead}{}", CONTENT[rng.gen_range(0..CONTENT.len())]),
        45..=69 => format!("{lead}{}", STOP[rng.gen_range(0..STOP.len())]),
        70..=82 => PIECES[rng.gen_range(0..PIECES.len())].to_string(),
        83..=92 => PUNCT[rng.gen_range(0..PUNCT.len())].to_string(),
        _ => BLANK[rng.gen_range(0..BLANK.len())].to_string(),
    }
}

/// A normalized random row; sometimes spiky, sometimes with exact zeros.
pub fn attention_row<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    if len == 0 {
        return vec![];
    }
    let mut row: Vec<f64> = (0..len)
        .map(|_| match rng.gen_range(0..10) {
            0 => 0.0,
            1 => rng.gen_range(5.0..20.0),
            _ => rng.gen_range(0.0..1.0),
        })
        .collect();
    if row.iter().all(|v| *v == 0.0) {
        row[rng.gen_range(0..len)] = 1.0;
    }
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= total);
    row
}

fn region<R: Rng>(rng: &mut R) -> PromptRegion {
    match rng.gen_range(0..4) {
        0 => PromptRegion::Exemplar,
        1 => PromptRegion::Context,
        2 => PromptRegion::Question,
        _ => PromptRegion::Other,
    }
}

pub struct TraceShape {
    pub max_prompt: usize,
    pub max_tokens: usize,
    pub ship_prompt: bool,
}

/// Random valid trace with explicit scalar entropies (no distributions).
pub fn random_trace<R: Rng>(rng: &mut R, shape: &TraceShape) -> GenerationTrace {
    let prompt_len = rng.gen_range(0..=shape.max_prompt);
    let n = rng.gen_range(1..=shape.max_tokens);
    let prompt_surfaces: Vec<String> = (0..prompt_len).map(|k| surface(rng, k == 0)).collect();
    let prompt_idx = assign_word_indices(&prompt_surfaces);
    let prompt_tokens = if shape.ship_prompt {
        prompt_surfaces
            .iter()
            .zip(&prompt_idx)
            .map(|(s, &w)| PromptToken { surface: s.clone(), word_index: w, region: region(rng) })
            .collect()
    } else {
        vec![]
    };
    let surfaces: Vec<String> = (0..n).map(|k| surface(rng, k == 0)).collect();
    let idx = assign_word_indices(&surfaces);
    let tokens = surfaces
        .iter()
        .enumerate()
        .map(|(j, s)| TokenRecord {
            position: j,
            surface: s.clone(),
            word_index: idx[j],
            entropy: if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..4.0) },
            top_prob: rng.gen_range(0.05..1.0),
            attention_row: attention_row(rng, prompt_len + j),
            distribution: None,
        })
        .collect();
    TraceData {
        policy: ATTENTION_POLICY.into(),
        prompt_len,
        prompt_tokens,
        tokens,
        finished_reason: FinishedReason::BackendStop,
        vocab_size: None,
    }
    .validate()
    .expect("generated trace is valid")
}

/// Whitespace-split words of concatenated surfaces.
pub fn words_of<'a>(surfaces: impl Iterator<Item = &'a str>) -> Vec<String> {
    surfaces.collect::<String>().split_whitespace().map(str::to_string).collect()
}

/// Independent stopword gate: whitespace-only tokens, punctuation-only
/// words and listed words are all stop.
pub fn oracle_is_stop(surface: &str, word: &str) -> bool {
    if surface.trim().is_empty() {
        return true;
    }
    let bare: String = word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    bare.is_empty() || ENGLISH_STOPWORDS.contains(&bare.as_str())
}
