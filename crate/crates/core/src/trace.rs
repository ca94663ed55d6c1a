//! Generation-trace data model: the engine's view of one LLM call.
//!
//! A [`GenerationTrace`] can only be obtained through validation, so every
//! downstream consumer (trigger detection, query formulation, truncation)
//! may assume the invariants listed on [`TraceData`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stopwords::StopwordSet;

/// Layer/head reduction the engine expects attention rows to carry.
pub const ATTENTION_POLICY: &str = "last_layer/mean_heads";
/// Allowed drift of an attention row sum from 1.
pub const ATTENTION_SUM_TOLERANCE: f64 = 1e-4;
/// Allowed drift of a full next-token distribution sum from 1.
pub const DISTRIBUTION_SUM_TOLERANCE: f64 = 1e-6;
/// Agreement required between a shipped entropy and one recomputed from the
/// shipped distribution.
pub const ENTROPY_MATCH_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("attention policy mismatch: expected {expected:?}, got {got:?}")]
    PolicyMismatch { expected: String, got: String },
    #[error("prompt_tokens has {got} entries but prompt_len is {prompt_len}")]
    PromptTokenCount { prompt_len: usize, got: usize },
    #[error("token {index}: position field is {position}")]
    PositionMismatch { index: usize, position: usize },
    #[error("token {position}: entropy {entropy} is negative or not finite")]
    NegativeEntropy { position: usize, entropy: f64 },
    #[error("token {position}: entropy {entropy} exceeds ln(vocab_size={vocab_size})")]
    EntropyAboveBound { position: usize, entropy: f64, vocab_size: usize },
    #[error("token {position}: top_prob {top_prob} outside [0, 1]")]
    TopProbRange { position: usize, top_prob: f64 },
    #[error("token {position}: attention row has length {got}, expected {expected}")]
    AttentionLength { position: usize, expected: usize, got: usize },
    #[error("token {position}: attention entry {index} is {value}")]
    AttentionEntry { position: usize, index: usize, value: f64 },
    #[error("token {position}: attention row sums to {sum}")]
    AttentionSum { position: usize, sum: f64 },
    #[error("token {position}: shipped entropy {shipped} != distribution entropy {computed}")]
    EntropyMismatch { position: usize, shipped: f64, computed: f64 },
    #[error("token {position}: shipped top_prob {shipped} != distribution max {computed}")]
    TopProbMismatch { position: usize, shipped: f64, computed: f64 },
    #[error("{segment} token {index}: word_index {word_index} invalid ({reason})")]
    WordIndex {
        segment: &'static str,
        index: usize,
        word_index: usize,
        reason: &'static str,
    },
    #[error("distribution: {0}")]
    Distribution(String),
    #[error("position {position} out of range for {len} tokens")]
    OutOfRange { position: usize, len: usize },
    #[error("trace has no generated tokens")]
    Empty,
}

/// Full next-token distribution at one decoding step (mock path only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(String, f64)>", into = "Vec<(String, f64)>")]
pub struct ProbabilityDistribution {
    probs: Vec<(String, f64)>,
}

impl ProbabilityDistribution {
    pub fn new(probs: Vec<(String, f64)>) -> Result<Self, TraceError> {
        check_probabilities(probs.iter().map(|(_, p)| *p))?;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[(String, f64)] {
        &self.probs
    }

    pub fn top_prob(&self) -> f64 {
        self.probs.iter().map(|(_, p)| *p).fold(0.0, f64::max)
    }
}

impl TryFrom<Vec<(String, f64)>> for ProbabilityDistribution {
    type Error = TraceError;
    fn try_from(probs: Vec<(String, f64)>) -> Result<Self, Self::Error> {
        Self::new(probs)
    }
}

impl From<ProbabilityDistribution> for Vec<(String, f64)> {
    fn from(d: ProbabilityDistribution) -> Self {
        d.probs
    }
}

fn check_probabilities(probs: impl Iterator<Item = f64>) -> Result<(), TraceError> {
    let mut sum = 0.0;
    let mut count = 0;
    for p in probs {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(TraceError::Distribution(format!("probability {p} outside [0, 1]")));
        }
        sum += p;
        count += 1;
    }
    if count == 0 {
        return Err(TraceError::Distribution("empty distribution".into()));
    }
    if (sum - 1.0).abs() > DISTRIBUTION_SUM_TOLERANCE {
        return Err(TraceError::Distribution(format!("probabilities sum to {sum}")));
    }
    Ok(())
}

/// Shannon entropy in nats; zero-probability terms contribute nothing.
pub fn compute_entropy(dist: &ProbabilityDistribution) -> f64 {
    entropy_nats(dist.probs.iter().map(|(_, p)| *p))
}

/// Validating entropy over a bare probability vector.
pub fn entropy_of(probs: &[f64]) -> Result<f64, TraceError> {
    check_probabilities(probs.iter().copied())?;
    Ok(entropy_nats(probs.iter().copied()))
}

fn entropy_nats(probs: impl Iterator<Item = f64>) -> f64 {
    let h: f64 = probs.filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum();
    // -0.0 and tiny negative rounding from one-hot inputs
    h.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRegion {
    /// Few-shot demonstration text.
    Exemplar,
    /// Retrieved passages.
    Context,
    /// The question being answered.
    Question,
    #[default]
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptToken {
    pub surface: String,
    pub word_index: usize,
    #[serde(default)]
    pub region: PromptRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub position: usize,
    pub surface: String,
    pub word_index: usize,
    /// Nats.
    pub entropy: f64,
    pub top_prob: f64,
    /// Head-averaged last-layer attention over prompt positions followed by
    /// generated positions `0..position`.
    pub attention_row: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<ProbabilityDistribution>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishedReason {
    LengthCap,
    EndMarker,
    BackendStop,
}

fn default_policy() -> String {
    ATTENTION_POLICY.to_string()
}

/// Unvalidated trace payload, exactly the `.trace.json` schema.
///
/// Invariants checked by [`TraceData::validate`]:
/// - `policy` equals [`ATTENTION_POLICY`];
/// - `tokens[k].position == k`;
/// - entropy is finite, non-negative and at most `ln(vocab_size)` when known;
/// - `top_prob` lies in `[0, 1]`;
/// - attention rows have length `prompt_len + position`, non-negative
///   entries and sum to 1 within [`ATTENTION_SUM_TOLERANCE`];
/// - a shipped distribution reproduces `entropy` and `top_prob`;
/// - `word_index` values are non-decreasing, start at 0, advance by at most
///   one and address a whitespace word of the detokenized text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceData {
    #[serde(default = "default_policy")]
    pub policy: String,
    pub prompt_len: usize,
    #[serde(default)]
    pub prompt_tokens: Vec<PromptToken>,
    pub tokens: Vec<TokenRecord>,
    pub finished_reason: FinishedReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
}

impl TraceData {
    pub fn validate(self) -> Result<GenerationTrace, TraceError> {
        GenerationTrace::try_from(self)
    }
}

/// A validated, immutable generation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TraceData", into = "TraceData")]
pub struct GenerationTrace {
    data: TraceData,
    text: String,
    words: Vec<String>,
    prompt_words: Vec<String>,
    /// Byte offset of each token's surface in `text`.
    offsets: Vec<usize>,
}

impl From<GenerationTrace> for TraceData {
    fn from(t: GenerationTrace) -> Self {
        t.data
    }
}

impl TryFrom<TraceData> for GenerationTrace {
    type Error = TraceError;

    fn try_from(data: TraceData) -> Result<Self, Self::Error> {
        if data.policy != ATTENTION_POLICY {
            return Err(TraceError::PolicyMismatch {
                expected: ATTENTION_POLICY.into(),
                got: data.policy.clone(),
            });
        }
        if !data.prompt_tokens.is_empty() && data.prompt_tokens.len() != data.prompt_len {
            return Err(TraceError::PromptTokenCount {
                prompt_len: data.prompt_len,
                got: data.prompt_tokens.len(),
            });
        }
        for (k, tok) in data.tokens.iter().enumerate() {
            validate_token(k, tok, data.prompt_len, data.vocab_size)?;
        }

        let prompt_words = split_words(data.prompt_tokens.iter().map(|t| t.surface.as_str()));
        check_word_indices(
            "prompt",
            data.prompt_tokens.iter().map(|t| t.word_index),
            prompt_words.len(),
        )?;

        let mut text = String::new();
        let mut offsets = Vec::with_capacity(data.tokens.len());
        for tok in &data.tokens {
            offsets.push(text.len());
            text.push_str(&tok.surface);
        }
        let words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        check_word_indices("generated", data.tokens.iter().map(|t| t.word_index), words.len())?;

        Ok(Self { data, text, words, prompt_words, offsets })
    }
}

fn validate_token(
    k: usize,
    tok: &TokenRecord,
    prompt_len: usize,
    vocab_size: Option<usize>,
) -> Result<(), TraceError> {
    let position = tok.position;
    if position != k {
        return Err(TraceError::PositionMismatch { index: k, position });
    }
    if !tok.entropy.is_finite() || tok.entropy < 0.0 {
        return Err(TraceError::NegativeEntropy { position, entropy: tok.entropy });
    }
    if let Some(v) = vocab_size {
        if v > 0 && tok.entropy > (v as f64).ln() + ENTROPY_MATCH_TOLERANCE {
            return Err(TraceError::EntropyAboveBound { position, entropy: tok.entropy, vocab_size: v });
        }
    }
    if !tok.top_prob.is_finite() || !(0.0..=1.0).contains(&tok.top_prob) {
        return Err(TraceError::TopProbRange { position, top_prob: tok.top_prob });
    }
    let expected = prompt_len + position;
    if tok.attention_row.len() != expected {
        return Err(TraceError::AttentionLength { position, expected, got: tok.attention_row.len() });
    }
    for (index, &value) in tok.attention_row.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(TraceError::AttentionEntry { position, index, value });
        }
    }
    if expected > 0 {
        let sum: f64 = tok.attention_row.iter().sum();
        if (sum - 1.0).abs() > ATTENTION_SUM_TOLERANCE {
            return Err(TraceError::AttentionSum { position, sum });
        }
    }
    if let Some(dist) = &tok.distribution {
        let computed = compute_entropy(dist);
        if (computed - tok.entropy).abs() > ENTROPY_MATCH_TOLERANCE {
            return Err(TraceError::EntropyMismatch { position, shipped: tok.entropy, computed });
        }
        let top = dist.top_prob();
        if (top - tok.top_prob).abs() > ENTROPY_MATCH_TOLERANCE {
            return Err(TraceError::TopProbMismatch { position, shipped: tok.top_prob, computed: top });
        }
    }
    Ok(())
}

fn split_words<'a>(surfaces: impl Iterator<Item = &'a str>) -> Vec<String> {
    let text: String = surfaces.collect();
    text.split_whitespace().map(str::to_string).collect()
}

fn check_word_indices(
    segment: &'static str,
    indices: impl Iterator<Item = usize>,
    word_count: usize,
) -> Result<(), TraceError> {
    let mut prev: Option<usize> = None;
    for (index, word_index) in indices.enumerate() {
        let err = |reason| TraceError::WordIndex { segment, index, word_index, reason };
        match prev {
            None if word_index != 0 => return Err(err("first token must start at word 0")),
            Some(p) if word_index < p => return Err(err("decreasing")),
            Some(p) if word_index > p + 1 => return Err(err("skips a word")),
            _ => {}
        }
        if word_index >= word_count.max(1) {
            return Err(err("beyond the last word"));
        }
        prev = Some(word_index);
    }
    Ok(())
}

/// Word indices for a token sequence under the concatenation joining rule.
///
/// A token belongs to the word containing its first non-whitespace
/// character. Whitespace-only tokens are attached to the word that follows
/// them (or the last word when none follows).
pub fn assign_word_indices<S: AsRef<str>>(surfaces: &[S]) -> Vec<usize> {
    let mut out = Vec::with_capacity(surfaces.len());
    let mut words_started = 0usize;
    let mut in_word = false;
    for s in surfaces {
        let mut assigned = None;
        for c in s.as_ref().chars() {
            if c.is_whitespace() {
                in_word = false;
            } else {
                if !in_word {
                    words_started += 1;
                    in_word = true;
                }
                if assigned.is_none() {
                    assigned = Some(words_started - 1);
                }
            }
        }
        // whitespace-only: index of the next word to start
        out.push(assigned.unwrap_or(if in_word { words_started - 1 } else { words_started }));
    }
    let last = words_started.saturating_sub(1);
    for w in &mut out {
        *w = (*w).min(last);
    }
    out
}

impl GenerationTrace {
    pub fn data(&self) -> &TraceData {
        &self.data
    }

    pub fn prompt_len(&self) -> usize {
        self.data.prompt_len
    }

    pub fn tokens(&self) -> &[TokenRecord] {
        &self.data.tokens
    }

    pub fn len(&self) -> usize {
        self.data.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.tokens.is_empty()
    }

    pub fn prompt_tokens(&self) -> &[PromptToken] {
        &self.data.prompt_tokens
    }

    pub fn finished_reason(&self) -> FinishedReason {
        self.data.finished_reason
    }

    /// Detokenized output: the concatenation of all token surfaces.
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn prompt_words(&self) -> &[String] {
        &self.prompt_words
    }

    /// Byte range of token `position` inside [`GenerationTrace::text`].
    pub fn token_span(&self, position: usize) -> std::ops::Range<usize> {
        let start = self.offsets[position];
        start..start + self.data.tokens[position].surface.len()
    }

    /// Detokenized text of tokens `range`.
    pub fn text_of(&self, range: std::ops::Range<usize>) -> &str {
        if range.start >= range.end {
            return "";
        }
        let start = self.offsets[range.start];
        let end = self.token_span(range.end - 1).end;
        &self.text[start..end]
    }

    /// The whitespace-delimited word (punctuation retained) containing the
    /// generated token at `position`.
    pub fn word_of_token(&self, position: usize) -> Result<&str, TraceError> {
        let tok = self
            .data
            .tokens
            .get(position)
            .ok_or(TraceError::OutOfRange { position, len: self.len() })?;
        Ok(self.words.get(tok.word_index).map(String::as_str).unwrap_or(""))
    }

    /// Word containing prompt token `position`, when prompt tokens were shipped.
    pub fn word_of_prompt_token(&self, position: usize) -> Option<&str> {
        let tok = self.data.prompt_tokens.get(position)?;
        Some(self.prompt_words.get(tok.word_index).map(String::as_str).unwrap_or(""))
    }

    /// Whether the generated token at `position` belongs to a stopword (or a
    /// word with no alphanumeric content). Whitespace-only tokens count as
    /// stop tokens.
    pub fn is_stop_token(&self, position: usize, stopwords: &StopwordSet) -> Result<bool, TraceError> {
        let word = self.word_of_token(position)?;
        if self.data.tokens[position].surface.trim().is_empty() {
            return Ok(true);
        }
        Ok(stopwords.is_stop_word(word))
    }

    /// A copy holding only the first `n` tokens.
    pub fn truncated(&self, n: usize, reason: FinishedReason) -> GenerationTrace {
        let mut data = self.data.clone();
        data.tokens.truncate(n);
        data.finished_reason = reason;
        // trailing whitespace tokens may point at a word the cut removed
        let words = split_words(data.tokens.iter().map(|t| t.surface.as_str())).len();
        let last = words.saturating_sub(1);
        for t in &mut data.tokens {
            t.word_index = t.word_index.min(last);
        }
        GenerationTrace::try_from(data).expect("prefix of a validated trace")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(pairs: &[(&str, f64)]) -> ProbabilityDistribution {
        ProbabilityDistribution::new(pairs.iter().map(|(s, p)| (s.to_string(), *p)).collect()).unwrap()
    }

    pub(crate) fn simple_trace(surfaces: &[&str], prompt_len: usize) -> GenerationTrace {
        let word_idx = assign_word_indices(surfaces);
        let tokens = surfaces
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let n = prompt_len + k;
                TokenRecord {
                    position: k,
                    surface: s.to_string(),
                    word_index: word_idx[k],
                    entropy: 0.5,
                    top_prob: 0.8,
                    attention_row: vec![1.0 / n.max(1) as f64; n],
                    distribution: None,
                }
            })
            .collect();
        TraceData {
            policy: ATTENTION_POLICY.into(),
            prompt_len,
            prompt_tokens: vec![],
            tokens,
            finished_reason: FinishedReason::LengthCap,
            vocab_size: None,
        }
        .validate()
        .unwrap()
    }

    #[test]
    fn entropy_uniform_four() {
        let d = dist(&[("a", 0.25), ("b", 0.25), ("c", 0.25), ("d", 0.25)]);
        assert!((compute_entropy(&d) - 4f64.ln()).abs() < 1e-12);
        assert!((compute_entropy(&d) - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn entropy_one_hot_is_zero() {
        assert_eq!(compute_entropy(&dist(&[("a", 1.0)])), 0.0);
    }

    #[test]
    fn entropy_zero_terms_ignored() {
        let d = dist(&[("a", 0.5), ("b", 0.5), ("c", 0.0), ("d", 0.0)]);
        assert!((compute_entropy(&d) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn malformed_distributions_rejected() {
        assert!(entropy_of(&[0.5, 0.6]).is_err());
        assert!(entropy_of(&[1.2, -0.2]).is_err());
        assert!(entropy_of(&[]).is_err());
        assert!(ProbabilityDistribution::new(vec![("a".into(), 0.9)]).is_err());
    }

    #[test]
    fn word_of_token_subwords_and_punctuation() {
        let trace = simple_trace(&[" Gen", "ghis", " Khan", " died", " in", " 2013", "."], 0);
        assert_eq!(trace.word_of_token(0).unwrap(), "Genghis");
        assert_eq!(trace.word_of_token(1).unwrap(), "Genghis");
        assert_eq!(trace.word_of_token(4).unwrap(), "in");
        assert_eq!(trace.word_of_token(6).unwrap(), "2013.");
        assert!(matches!(trace.word_of_token(7), Err(TraceError::OutOfRange { .. })));
    }

    #[test]
    fn detokenizer_word_boundaries_on_fixture_sentence() {
        let surfaces = ["Miguel", " Mor", "ayta", " died", " on", " 19", " June", " 2013", "."];
        // whitespace split of the joined text is the oracle
        let joined: String = surfaces.concat();
        let oracle: Vec<&str> = joined.split_whitespace().collect();
        let idx = assign_word_indices(&surfaces);
        assert_eq!(idx, vec![0, 1, 1, 2, 3, 4, 5, 6, 6]);
        for (k, &w) in idx.iter().enumerate() {
            assert!(oracle[w].contains(surfaces[k].trim()));
        }
        assert_eq!(oracle[idx[8]], "2013.");
    }

    #[test]
    fn whitespace_tokens_attach_to_following_word() {
        assert_eq!(assign_word_indices(&["A", "\n", "B", " "]), vec![0, 1, 1, 1]);
        assert_eq!(assign_word_indices(&[" ", " "]), vec![0, 0]);
    }

    #[test]
    fn detokenization_round_trip() {
        let surfaces = ["The", " film", " Hyp", "ocrite", "\n", "was", "."];
        let trace = simple_trace(&surfaces, 3);
        assert_eq!(trace.text(), surfaces.concat());
        assert_eq!(trace.text_of(2..4), " Hypocrite");
        assert_eq!(trace.text_of(0..0), "");
    }

    #[test]
    fn prefix_ending_in_whitespace_stays_valid() {
        let trace = simple_trace(&[" Khan", " ", "\n", " died"], 0);
        assert_eq!(trace.tokens()[1].word_index, 1);
        let cut = trace.truncated(3, FinishedReason::LengthCap);
        assert_eq!(cut.text(), " Khan \n");
        assert!(cut.tokens().iter().all(|t| t.word_index == 0));
    }

    #[test]
    fn attention_sum_violation_rejected() {
        let trace = simple_trace(&["a", " b"], 2);
        let mut data: TraceData = trace.into();
        data.tokens[1].attention_row = vec![0.3, 0.3, 0.2];
        let err = data.validate().unwrap_err();
        assert!(matches!(err, TraceError::AttentionSum { position: 1, .. }), "{err}");
    }

    #[test]
    fn attention_length_and_position_checked() {
        let trace = simple_trace(&["a", " b"], 2);
        let mut data: TraceData = trace.clone().into();
        data.tokens[1].attention_row.pop();
        assert!(matches!(data.validate(), Err(TraceError::AttentionLength { .. })));
        let mut data: TraceData = trace.into();
        data.tokens[1].position = 5;
        assert!(matches!(data.validate(), Err(TraceError::PositionMismatch { .. })));
    }

    #[test]
    fn distribution_must_reproduce_entropy() {
        let trace = simple_trace(&["a"], 1);
        let mut data: TraceData = trace.into();
        data.tokens[0].distribution = Some(dist(&[("a", 0.5), ("b", 0.5)]));
        data.tokens[0].top_prob = 0.5;
        assert!(matches!(data.clone().validate(), Err(TraceError::EntropyMismatch { .. })));
        data.tokens[0].entropy = 2f64.ln();
        assert!(data.validate().is_ok());
    }

    #[test]
    fn entropy_bound_by_vocab() {
        let trace = simple_trace(&["a"], 1);
        let mut data: TraceData = trace.into();
        data.vocab_size = Some(1);
        assert!(matches!(data.validate(), Err(TraceError::EntropyAboveBound { .. })));
    }

    #[test]
    fn policy_tag_must_match() {
        let mut data: TraceData = simple_trace(&["a"], 1).into();
        data.policy = "all_layers/max_heads".into();
        assert!(matches!(data.validate(), Err(TraceError::PolicyMismatch { .. })));
    }

    #[test]
    fn json_round_trip_validates() {
        let trace = simple_trace(&["Hello", " world"], 2);
        let json = serde_json::to_string(&trace).unwrap();
        let back: GenerationTrace = serde_json::from_str(&json).unwrap();
        assert_eq!(back, trace);
        let bad = json.replace("\"position\":1", "\"position\":4");
        assert!(serde_json::from_str::<GenerationTrace>(&bad).is_err());
    }
}
