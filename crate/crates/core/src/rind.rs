//! Real-time information-need detection.
//!
//! Each generated token is scored as `entropy * a_max * s`, where `a_max`
//! is the largest attention any later generated token pays to it and `s`
//! gates out stopwords. Retrieval fires at the earliest non-exempt token
//! whose score exceeds the threshold.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::stopwords::StopwordSet;
use crate::trace::{GenerationTrace, TraceError};

#[derive(Debug, Error)]
pub enum RindError {
    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone)]
pub struct RindConfig<'a> {
    theta: f64,
    stopwords: &'a StopwordSet,
}

impl<'a> RindConfig<'a> {
    /// `theta` may be `f64::INFINITY`, which disables triggering.
    pub fn new(theta: f64, stopwords: &'a StopwordSet) -> Result<Self, RindError> {
        if theta.is_nan() || theta <= 0.0 {
            return Err(RindError::InvalidThreshold(theta));
        }
        Ok(Self { theta, stopwords })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn stopwords(&self) -> &StopwordSet {
        self.stopwords
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionPeak {
    pub value: f64,
    /// False for the final token, whose peak is 0 by convention.
    pub has_followers: bool,
}

/// Largest attention that any later generated token pays to generated
/// token `position`. Attention to prompt positions never enters.
pub fn max_subsequent_attention(
    trace: &GenerationTrace,
    position: usize,
) -> Result<AttentionPeak, TraceError> {
    let tokens = trace.tokens();
    if position >= tokens.len() {
        return Err(TraceError::OutOfRange { position, len: tokens.len() });
    }
    let column = trace.prompt_len() + position;
    let followers = &tokens[position + 1..];
    let value = followers
        .iter()
        .map(|t| t.attention_row[column])
        .fold(0.0, f64::max);
    Ok(AttentionPeak { value, has_followers: !followers.is_empty() })
}

/// 0 when the token's word is a stopword, 1 otherwise.
pub fn semantic_indicator(
    trace: &GenerationTrace,
    position: usize,
    stopwords: &StopwordSet,
) -> Result<u8, TraceError> {
    Ok(if trace.is_stop_token(position, stopwords)? { 0 } else { 1 })
}

pub fn rind_score(entropy: f64, a_max: f64, s: u8) -> f64 {
    entropy * a_max * f64::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenScore {
    pub position: usize,
    pub entropy: f64,
    pub a_max: f64,
    pub s: u8,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriggerDecision {
    pub triggered: bool,
    pub position: Option<usize>,
    pub score: Option<f64>,
    pub per_token_scores: Vec<f64>,
}

impl TriggerDecision {
    pub fn none(per_token_scores: Vec<f64>) -> Self {
        Self { triggered: false, position: None, score: None, per_token_scores }
    }

    pub fn at(position: usize, score: f64, per_token_scores: Vec<f64>) -> Self {
        Self { triggered: true, position: Some(position), score: Some(score), per_token_scores }
    }
}

/// Full per-token breakdown, used by [`detect`] and the CSV dump.
pub fn score_tokens(
    trace: &GenerationTrace,
    stopwords: &StopwordSet,
) -> Result<Vec<TokenScore>, TraceError> {
    let tokens = trace.tokens();
    let prompt_len = trace.prompt_len();
    let n = tokens.len();
    // column-wise max over follower rows
    let mut a_max = vec![0.0f64; n];
    for tok in tokens.iter().skip(1) {
        let row = &tok.attention_row[prompt_len..];
        for (i, &w) in row.iter().enumerate() {
            if w > a_max[i] {
                a_max[i] = w;
            }
        }
    }
    (0..n)
        .map(|i| {
            let s = semantic_indicator(trace, i, stopwords)?;
            let entropy = tokens[i].entropy;
            Ok(TokenScore { position: i, entropy, a_max: a_max[i], s, score: rind_score(entropy, a_max[i], s) })
        })
        .collect()
}

/// Scores every token and triggers at the earliest position
/// `p >= exempt_until` with `score > theta`.
pub fn detect(
    trace: &GenerationTrace,
    config: &RindConfig<'_>,
    exempt_until: usize,
) -> Result<TriggerDecision, RindError> {
    if trace.is_empty() {
        return Err(TraceError::Empty.into());
    }
    let scores: Vec<f64> = score_tokens(trace, config.stopwords)?.into_iter().map(|s| s.score).collect();
    let hit = scores
        .iter()
        .enumerate()
        .skip(exempt_until)
        .find(|(_, &s)| s > config.theta);
    Ok(match hit {
        Some((p, &s)) => TriggerDecision::at(p, s, scores),
        None => TriggerDecision::none(scores),
    })
}

/// Writes `position,surface,entropy,a_max,s,score` rows.
pub fn write_score_csv<W: Write>(
    trace: &GenerationTrace,
    stopwords: &StopwordSet,
    out: W,
) -> Result<(), RindError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["position", "surface", "entropy", "a_max", "s", "score"])?;
    for s in score_tokens(trace, stopwords)? {
        w.write_record([
            s.position.to_string(),
            trace.tokens()[s.position].surface.clone(),
            s.entropy.to_string(),
            s.a_max.to_string(),
            s.s.to_string(),
            s.score.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{assign_word_indices, FinishedReason, TokenRecord, TraceData, ATTENTION_POLICY};

    /// Trace with no prompt, explicit entropies and a dense attention matrix
    /// `attn[j][i]` for `i < j`.
    fn fixture(surfaces: &[&str], entropies: &[f64], attn: &[Vec<f64>]) -> GenerationTrace {
        let idx = assign_word_indices(surfaces);
        TraceData {
            policy: ATTENTION_POLICY.into(),
            prompt_len: 0,
            prompt_tokens: vec![],
            tokens: surfaces
                .iter()
                .enumerate()
                .map(|(k, s)| TokenRecord {
                    position: k,
                    surface: s.to_string(),
                    word_index: idx[k],
                    entropy: entropies[k],
                    top_prob: 0.5,
                    attention_row: attn[k].clone(),
                    distribution: None,
                })
                .collect(),
            finished_reason: FinishedReason::LengthCap,
            vocab_size: None,
        }
        .validate()
        .unwrap()
    }

    fn four_token() -> GenerationTrace {
        fixture(
            &[" Genghis", " Khan", " ruled", " Mongolia"],
            &[1.2, 0.3, 2.0, 0.7],
            &[vec![], vec![1.0], vec![0.90, 0.10], vec![0.40, 0.35, 0.25]],
        )
    }

    #[test]
    fn peak_is_max_over_followers() {
        let t = four_token();
        // brute force over j > 1
        let oracle = (2..4).map(|j| t.tokens()[j].attention_row[1]).fold(0.0, f64::max);
        let peak = max_subsequent_attention(&t, 1).unwrap();
        assert_eq!(peak.value, oracle);
        assert_eq!(peak.value, 0.35);
        assert!(peak.has_followers);
    }

    #[test]
    fn final_token_peak_is_zero() {
        let t = four_token();
        let peak = max_subsequent_attention(&t, 3).unwrap();
        assert_eq!(peak, AttentionPeak { value: 0.0, has_followers: false });
    }

    #[test]
    fn singleton_follower() {
        let t = fixture(&[" Paris", " is"], &[1.0, 1.0], &[vec![], vec![1.0]]);
        let t2 = fixture(&[" a", " b", " c"], &[1.0; 3], &[vec![], vec![1.0], vec![0.0, 1.0]]);
        assert_eq!(max_subsequent_attention(&t, 0).unwrap().value, 1.0);
        // second-to-last token: single follower with weight 1.0 on it
        assert_eq!(max_subsequent_attention(&t2, 1).unwrap().value, 1.0);
        let t3 = fixture(&[" x", " y"], &[1.0; 2], &[vec![], vec![1.0]]);
        let mut d: TraceData = t3.into();
        d.prompt_len = 1;
        d.tokens[0].attention_row = vec![1.0];
        d.tokens[1].attention_row = vec![0.1, 0.9];
        let t3 = d.validate().unwrap();
        assert_eq!(max_subsequent_attention(&t3, 0).unwrap().value, 0.9);
    }

    #[test]
    fn indicator_cases() {
        let sw = StopwordSet::english();
        let t = fixture(&[" the", " Genghis", " The"], &[1.0; 3], &[vec![], vec![1.0], vec![0.5, 0.5]]);
        assert_eq!(semantic_indicator(&t, 0, sw).unwrap(), 0);
        assert_eq!(semantic_indicator(&t, 1, sw).unwrap(), 1);
        assert_eq!(semantic_indicator(&t, 2, sw).unwrap(), 0);
        assert!(semantic_indicator(&t, 3, sw).is_err());
    }

    #[test]
    fn score_products() {
        assert!((rind_score(1.2, 0.8, 1) - 0.96).abs() < 1e-12);
        assert_eq!(rind_score(5.0, 0.99, 0), 0.0);
        assert_eq!(rind_score(0.0, 1.0, 1), 0.0);
    }

    /// Trace whose per-token scores are exactly `scores` (a_max = 1 against
    /// the follower, s = 1) plus a trailing zero-entropy token.
    fn scored(scores: &[f64]) -> GenerationTrace {
        let n = scores.len() + 1;
        let surfaces: Vec<String> = (0..n).map(|k| format!(" w{k}")).collect();
        let refs: Vec<&str> = surfaces.iter().map(String::as_str).collect();
        let mut entropies = scores.to_vec();
        entropies.push(0.0);
        let attn: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut row = vec![0.0; j];
                if j > 0 {
                    row[j - 1] = 1.0;
                }
                row
            })
            .collect();
        fixture(&refs, &entropies, &attn)
    }

    #[test]
    fn detect_earliest_above_theta() {
        let sw = StopwordSet::english();
        let cfg = RindConfig::new(1.4, sw).unwrap();
        let d = detect(&scored(&[0.5, 1.6, 0.2]), &cfg, 0).unwrap();
        assert!(d.triggered);
        assert_eq!(d.position, Some(1));
        assert_eq!(d.score, Some(1.6));
        assert_eq!(d.per_token_scores.len(), 4);
    }

    #[test]
    fn detect_respects_exemption() {
        let sw = StopwordSet::english();
        let cfg = RindConfig::new(1.4, sw).unwrap();
        let d = detect(&scored(&[1.6, 0.2]), &cfg, 1).unwrap();
        assert!(!d.triggered);
        assert_eq!(d.position, None);
        assert_eq!(d.per_token_scores[0], 1.6);
    }

    #[test]
    fn strict_inequality_and_infinite_theta() {
        let sw = StopwordSet::english();
        let at = detect(&scored(&[1.5]), &RindConfig::new(1.5, sw).unwrap(), 0).unwrap();
        assert!(!at.triggered);
        let inf = detect(&scored(&[1e300]), &RindConfig::new(f64::INFINITY, sw).unwrap(), 0).unwrap();
        assert!(!inf.triggered);
    }

    #[test]
    fn bad_threshold_rejected() {
        let sw = StopwordSet::english();
        assert!(RindConfig::new(0.0, sw).is_err());
        assert!(RindConfig::new(-1.0, sw).is_err());
        assert!(RindConfig::new(f64::NAN, sw).is_err());
    }

    #[test]
    fn final_token_never_triggers() {
        let sw = StopwordSet::english();
        let t = fixture(&[" a1", " Zebra"], &[0.0, 100.0], &[vec![], vec![1.0]]);
        let d = detect(&t, &RindConfig::new(0.1, sw).unwrap(), 0).unwrap();
        assert!(!d.triggered);
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let mut buf = Vec::new();
        write_score_csv(&four_token(), StopwordSet::english(), &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "position,surface,entropy,a_max,s,score");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "0, Genghis,1.2,1,1,1.2");
        assert_eq!(lines[2], "1, Khan,0.3,0.35,1,0.105");
    }
}
