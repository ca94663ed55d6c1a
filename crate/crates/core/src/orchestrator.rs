//! The generate → detect → truncate → formulate → retrieve → re-prompt
//! loop, shared by the trace-triggered strategy and the baselines.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::bm25::{Passage, RetrievalStatus, Retriever};
use crate::gateway::{Gateway, GenerateRequest, RegionSpan};
use crate::qfs::{formulate, QfsOptions};
use crate::rind::{detect, RindConfig, TriggerDecision};
use crate::sentence::split_sentences;
use crate::stopwords::StopwordSet;
use crate::trace::{GenerationTrace, PromptRegion};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("strategy {kind:?} requires {field}")]
    Missing { kind: StrategyKind, field: &'static str },
    #[error("{0} must be at least 1")]
    ZeroCap(&'static str),
    #[error("theta must be positive")]
    Theta,
    #[error("strategy {0:?} needs a retriever")]
    NoRetriever(StrategyKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    WoRag,
    SrRag,
    FlRag,
    FsRag,
    Flare,
    Dragin,
}

impl StrategyKind {
    pub fn uses_attention(self) -> bool {
        !matches!(self, StrategyKind::WoRag | StrategyKind::SrRag)
    }

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::WoRag => "wo_rag",
            StrategyKind::SrRag => "sr_rag",
            StrategyKind::FlRag => "fl_rag",
            StrategyKind::FsRag => "fs_rag",
            StrategyKind::Flare => "flare",
            StrategyKind::Dragin => "dragin",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.replace('-', "_").to_lowercase().as_str() {
            "wo_rag" => StrategyKind::WoRag,
            "sr_rag" => StrategyKind::SrRag,
            "fl_rag" => StrategyKind::FlRag,
            "fs_rag" => StrategyKind::FsRag,
            "flare" => StrategyKind::Flare,
            "dragin" => StrategyKind::Dragin,
            other => return Err(format!("unknown strategy {other:?}")),
        })
    }
}

fn default_window() -> usize {
    25
}
fn default_top_n() -> usize {
    35
}
fn default_max_retrievals() -> usize {
    5
}
fn default_generate_length() -> usize {
    100
}
fn default_top_k() -> usize {
    3
}
fn default_stop_markers() -> Vec<String> {
    vec!["\nQuestion:".to_string()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flare_prob_threshold: Option<f64>,
    #[serde(default = "default_window")]
    pub n_tokens_window: usize,
    #[serde(default = "default_top_n")]
    pub qfs_top_n: usize,
    #[serde(default = "default_max_retrievals")]
    pub max_retrievals_per_question: usize,
    /// Token budget for the whole answer across rounds.
    #[serde(default = "default_generate_length")]
    pub generate_length: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_stop_markers")]
    pub stop_markers: Vec<String>,
    #[serde(default)]
    pub qfs: QfsOptions,
    /// Keep passages from earlier rounds in the re-prompt.
    #[serde(default)]
    pub accumulate_context: bool,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            theta: None,
            flare_prob_threshold: None,
            n_tokens_window: default_window(),
            qfs_top_n: default_top_n(),
            max_retrievals_per_question: default_max_retrievals(),
            generate_length: default_generate_length(),
            top_k: default_top_k(),
            stop_markers: default_stop_markers(),
            qfs: QfsOptions::default(),
            accumulate_context: false,
        }
    }

    pub fn dragin(theta: f64, top_n: usize) -> Self {
        Self { theta: Some(theta), qfs_top_n: top_n, ..Self::new(StrategyKind::Dragin) }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let kind = self.kind;
        for (v, name) in [
            (self.max_retrievals_per_question, "max_retrievals_per_question"),
            (self.generate_length, "generate_length"),
            (self.top_k, "top_k"),
        ] {
            if v == 0 {
                return Err(ConfigError::ZeroCap(name));
            }
        }
        match kind {
            StrategyKind::Dragin => {
                let theta = self.theta.ok_or(ConfigError::Missing { kind, field: "theta" })?;
                if theta.is_nan() || theta <= 0.0 {
                    return Err(ConfigError::Theta);
                }
                if self.qfs_top_n == 0 {
                    return Err(ConfigError::ZeroCap("qfs_top_n"));
                }
            }
            StrategyKind::Flare if self.flare_prob_threshold.is_none() => {
                return Err(ConfigError::Missing { kind, field: "flare_prob_threshold" });
            }
            StrategyKind::FlRag if self.n_tokens_window == 0 => return Err(ConfigError::ZeroCap("n_tokens_window")),
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub question: String,
    pub answer: String,
}

/// Few-shot demonstrations shared by every prompt of a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(default)]
    pub exemplars: Vec<Exemplar>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledPrompt {
    pub text: String,
    pub regions: Vec<RegionSpan>,
}

pub const CONTINUE_INSTRUCTION: &str = "Answer in the same format as before.";

struct PromptWriter {
    text: String,
    regions: Vec<RegionSpan>,
}

impl PromptWriter {
    fn push(&mut self, s: &str, region: PromptRegion) {
        let start = self.text.len();
        self.text.push_str(s);
        if region != PromptRegion::Other && !s.is_empty() {
            self.regions.push(RegionSpan { start, end: self.text.len(), region });
        }
    }
}

impl PromptTemplate {
    fn begin(&self) -> PromptWriter {
        let mut w = PromptWriter { text: String::new(), regions: vec![] };
        let mut block = String::new();
        for ex in &self.exemplars {
            block.push_str(&format!("Question: {}\nAnswer: {}\n\n", ex.question, ex.answer));
        }
        w.push(&block, PromptRegion::Exemplar);
        w
    }

    fn finish(mut w: PromptWriter, question: &str, committed: &str) -> AssembledPrompt {
        w.push("Question: ", PromptRegion::Other);
        w.push(question, PromptRegion::Question);
        w.push("\nAnswer:", PromptRegion::Other);
        w.push(committed, PromptRegion::Other);
        AssembledPrompt { text: w.text, regions: w.regions }
    }

    /// Exemplars, then `Question: …\nAnswer:` and the committed text.
    pub fn direct(&self, question: &str, committed: &str) -> AssembledPrompt {
        Self::finish(self.begin(), question, committed)
    }

    /// Exemplars, the numbered `Context:` block (omitted when there are no
    /// passages), the continue instruction, the question and `Answer:`
    /// followed by the committed text.
    pub fn augmented(&self, question: &str, committed: &str, passages: &[&str]) -> AssembledPrompt {
        let mut w = self.begin();
        if !passages.is_empty() {
            let mut block = String::from("Context:\n");
            for (k, p) in passages.iter().enumerate() {
                block.push_str(&format!("[{}] {}\n", k + 1, p));
            }
            w.push(&block, PromptRegion::Context);
        }
        w.push(CONTINUE_INSTRUCTION, PromptRegion::Other);
        w.push("\n", PromptRegion::Other);
        Self::finish(w, question, committed)
    }
}

pub fn assemble_prompt(template: &PromptTemplate, question: &str, committed: &str, passages: &[&str]) -> AssembledPrompt {
    template.augmented(question, committed, passages)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Truncation {
    /// Tokens `[0, cut)` survive.
    pub cut: usize,
    pub text: String,
}

/// Text strictly before the trigger token, snapped back to the start of the
/// word containing it.
pub fn truncate_at(trace: &GenerationTrace, trigger: usize) -> Truncation {
    let tokens = trace.tokens();
    let trigger = trigger.min(tokens.len());
    let mut cut = trigger;
    if trigger < tokens.len() {
        let word = tokens[trigger].word_index;
        while cut > 0 && tokens[cut - 1].word_index == word {
            cut -= 1;
        }
    }
    Truncation { cut, text: trace.text_of(0..cut).to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRound {
    pub round: usize,
    /// Trace-local position of the triggering token (0 for up-front retrieval).
    pub trigger_position: usize,
    /// Committed answer tokens when the round fired.
    pub committed_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub query: String,
    pub status: RetrievalStatus,
    pub passage_ids: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub committed_text: String,
    pub committed_tokens: usize,
    pub retrieval_count: usize,
    pub generate_calls: usize,
    pub rounds: Vec<RetrievalRound>,
    pub exhausted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl SessionState {
    fn commit(&mut self, text: &str, tokens: usize) {
        self.committed_text.push_str(text);
        self.committed_tokens += tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub answer_text: String,
    pub state: SessionState,
}

/// Positions where a rule-based strategy would fire on this trace.
pub fn firing_positions(kind: StrategyKind, trace: &GenerationTrace, state: &SessionState, cfg: &StrategyConfig) -> Vec<usize> {
    match kind {
        StrategyKind::FlRag => {
            let n = cfg.n_tokens_window.max(1);
            (0..trace.len()).filter(|p| (state.committed_tokens + p + 1).is_multiple_of(n)).collect()
        }
        StrategyKind::FsRag => {
            let ends: Vec<usize> = split_sentences(trace.text())
                .into_iter()
                .filter(|s| s.complete)
                .map(|s| s.range.end)
                .collect();
            let mut out: Vec<usize> = ends
                .iter()
                .filter_map(|&end| (0..trace.len()).find(|&p| trace.token_span(p).start >= end))
                .collect();
            out.dedup();
            out
        }
        StrategyKind::Flare => {
            let thr = cfg.flare_prob_threshold.unwrap_or(0.0);
            trace.tokens().iter().filter(|t| t.top_prob < thr).map(|t| t.position).collect()
        }
        _ => vec![],
    }
}

/// Trigger decision of a rule-based strategy; `per_token_scores` carries 1
/// at every firing position.
pub fn baseline_trigger(
    kind: StrategyKind,
    trace: &GenerationTrace,
    state: &SessionState,
    cfg: &StrategyConfig,
    exempt_until: usize,
) -> TriggerDecision {
    let fires = firing_positions(kind, trace, state, cfg);
    let mut scores = vec![0.0; trace.len()];
    for &p in &fires {
        scores[p] = 1.0;
    }
    match fires.into_iter().find(|&p| p >= exempt_until) {
        Some(p) => TriggerDecision::at(p, 1.0, scores),
        None => TriggerDecision::none(scores),
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Query text of a rule-based strategy fired at `trigger`.
pub fn baseline_query(kind: StrategyKind, trace: &GenerationTrace, trigger: usize, cfg: &StrategyConfig, question: &str) -> String {
    match kind {
        StrategyKind::FlRag => {
            let start = (trigger + 1).saturating_sub(cfg.n_tokens_window.max(1));
            collapse_ws(trace.text_of(start..trigger + 1))
        }
        StrategyKind::FsRag => {
            let at = trace.token_span(trigger).start;
            split_sentences(trace.text())
                .into_iter().rfind(|s| s.complete && s.range.end <= at)
                .map(|s| collapse_ws(&trace.text()[s.range]))
                .unwrap_or_default()
        }
        StrategyKind::Flare => {
            let thr = cfg.flare_prob_threshold.unwrap_or(0.0);
            let span = trace.token_span(trigger);
            let sentences = split_sentences(trace.text());
            let Some(sentence) = sentences
                .iter()
                .find(|s| s.range.end > span.start && s.range.start < span.end.max(span.start + 1))
                .or(sentences.last())
            else {
                return String::new();
            };
            let kept: String = (0..trace.len())
                .filter(|&p| {
                    let r = trace.token_span(p);
                    r.start < sentence.range.end && r.end > sentence.range.start
                })
                .filter(|&p| trace.tokens()[p].top_prob >= thr)
                .map(|p| trace.tokens()[p].surface.as_str())
                .collect();
            collapse_ws(&kept)
        }
        StrategyKind::SrRag | StrategyKind::WoRag | StrategyKind::Dragin => question.to_string(),
    }
}

/// Everything a session needs besides the question.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    pub strategy: &'a StrategyConfig,
    pub template: &'a PromptTemplate,
    pub gateway: &'a Gateway,
    pub retriever: Option<&'a dyn Retriever>,
    pub stopwords: &'a StopwordSet,
}

enum Fired {
    No,
    At { position: usize, score: Option<f64> },
}

impl<'a> Engine<'a> {
    fn request(&self, prompt: AssembledPrompt, max_new_tokens: usize) -> GenerateRequest {
        GenerateRequest {
            stop_markers: self.strategy.stop_markers.clone(),
            want_attention: self.strategy.kind.uses_attention(),
            regions: prompt.regions,
            ..GenerateRequest::new(prompt.text, max_new_tokens)
        }
    }

    fn passages(&self, ids: &[u32]) -> Vec<&'a Passage> {
        let Some(r) = self.retriever else { return vec![] };
        ids.iter().filter_map(|&id| r.passage(id)).collect()
    }

    fn retrieve(&self, query: &str) -> (RetrievalStatus, Vec<u32>) {
        let Some(r) = self.retriever else { return (RetrievalStatus::NoHits, vec![]) };
        match r.retrieve(query, self.strategy.top_k) {
            Ok(res) => (res.status, res.hits.iter().map(|h| h.passage_id).collect()),
            Err(e) => {
                warn!(error = %e, "retrieval failed; continuing without context");
                (RetrievalStatus::NoHits, vec![])
            }
        }
    }

    fn prompt_for(&self, question: &str, state: &SessionState, context: &[u32]) -> AssembledPrompt {
        if state.rounds.is_empty() {
            return self.template.direct(question, &state.committed_text);
        }
        let texts: Vec<&str> = self.passages(context).into_iter().map(|p| p.text.as_str()).collect();
        self.template.augmented(question, &state.committed_text, &texts)
    }

    fn trigger(&self, trace: &GenerationTrace, state: &SessionState, exempt: usize) -> Fired {
        let decision = match self.strategy.kind {
            StrategyKind::Dragin => {
                let theta = self.strategy.theta.unwrap_or(f64::INFINITY);
                let cfg = match RindConfig::new(theta, self.stopwords) {
                    Ok(c) => c,
                    Err(_) => return Fired::No,
                };
                match detect(trace, &cfg, exempt) {
                    Ok(d) => d,
                    Err(_) => return Fired::No,
                }
            }
            kind => baseline_trigger(kind, trace, state, self.strategy, exempt),
        };
        match decision.position {
            Some(position) => Fired::At { position, score: decision.score },
            None => Fired::No,
        }
    }

    fn query(&self, trace: &GenerationTrace, trigger: usize, question: &str) -> String {
        match self.strategy.kind {
            StrategyKind::Dragin => match formulate(trace, trigger, self.strategy.qfs_top_n, self.stopwords, self.strategy.qfs) {
                Ok(q) => q.render(),
                Err(e) => {
                    warn!(error = %e, "query formulation produced no words");
                    String::new()
                }
            },
            kind => baseline_query(kind, trace, trigger, self.strategy, question),
        }
    }

    fn record_round(&self, state: &mut SessionState, trigger_position: usize, score: Option<f64>, query: String, context: &mut Vec<u32>) {
        let (status, ids) = self.retrieve(&query);
        if ids.is_empty() {
            warn!(query = %query, ?status, "empty retrieval; resuming without context");
        }
        if self.strategy.accumulate_context {
            for id in &ids {
                if !context.contains(id) {
                    context.push(*id);
                }
            }
        } else {
            *context = ids.clone();
        }
        state.rounds.push(RetrievalRound {
            round: state.rounds.len() + 1,
            trigger_position,
            committed_tokens: state.committed_tokens,
            score,
            query,
            status,
            passage_ids: ids,
        });
        state.retrieval_count += 1;
    }

    /// Runs one question to completion. Backend failures end the session
    /// early with `state.failure` set and the partial answer kept.
    pub fn run_question(&self, question: &str) -> Session {
        let cfg = self.strategy;
        let mut state = SessionState::default();
        if let Err(e) = cfg.validate() {
            state.failure = Some(e.to_string());
            return Session { answer_text: String::new(), state };
        }
        if cfg.kind != StrategyKind::WoRag && self.retriever.is_none() {
            state.failure = Some(ConfigError::NoRetriever(cfg.kind).to_string());
            return Session { answer_text: String::new(), state };
        }
        let mut context: Vec<u32> = Vec::new();
        if cfg.kind == StrategyKind::SrRag {
            self.record_round(&mut state, 0, None, question.to_string(), &mut context);
        }
        let dynamic = matches!(cfg.kind, StrategyKind::FlRag | StrategyKind::FsRag | StrategyKind::Flare | StrategyKind::Dragin);
        let mut exempt = 0;
        loop {
            let remaining = cfg.generate_length.saturating_sub(state.committed_tokens);
            if remaining == 0 {
                break;
            }
            let request = self.request(self.prompt_for(question, &state, &context), remaining);
            state.generate_calls += 1;
            let trace = match self.gateway.generate(&request) {
                Ok(t) => t,
                Err(e) => {
                    state.failure = Some(e.to_string());
                    break;
                }
            };
            if trace.is_empty() {
                break;
            }
            if !dynamic {
                state.commit(trace.text(), trace.len());
                break;
            }
            if state.retrieval_count >= cfg.max_retrievals_per_question {
                state.exhausted = true;
                state.commit(trace.text(), trace.len());
                break;
            }
            match self.trigger(&trace, &state, exempt) {
                Fired::No => {
                    state.commit(trace.text(), trace.len());
                    break;
                }
                Fired::At { position, score } => {
                    let query = self.query(&trace, position, question);
                    let cut = truncate_at(&trace, position);
                    self.record_round(&mut state, position, score, query, &mut context);
                    state.commit(&cut.text, cut.cut);
                    exempt = 1;
                }
            }
        }
        Session { answer_text: state.committed_text.clone(), state }
    }

    /// Re-runs a logged session: every round fires at its logged position
    /// with its logged passages, so no detection or retrieval happens.
    pub fn replay(&self, question: &str, rounds: &[RetrievalRound]) -> Session {
        let cfg = self.strategy;
        let mut state = SessionState::default();
        let mut pending = rounds.iter();
        let mut context: Vec<u32> = Vec::new();
        if cfg.kind == StrategyKind::SrRag {
            if let Some(r) = pending.next() {
                context = r.passage_ids.clone();
                state.rounds.push(r.clone());
                state.retrieval_count += 1;
            }
        }
        loop {
            let remaining = cfg.generate_length.saturating_sub(state.committed_tokens);
            if remaining == 0 {
                break;
            }
            let request = self.request(self.prompt_for(question, &state, &context), remaining);
            state.generate_calls += 1;
            let trace = match self.gateway.generate(&request) {
                Ok(t) => t,
                Err(e) => {
                    state.failure = Some(e.to_string());
                    break;
                }
            };
            match pending.next() {
                Some(r) if cfg.kind != StrategyKind::SrRag => {
                    let cut = truncate_at(&trace, r.trigger_position);
                    if self.strategy.accumulate_context {
                        context.extend(r.passage_ids.iter().filter(|id| !context.contains(id)).collect::<Vec<_>>());
                    } else {
                        context = r.passage_ids.clone();
                    }
                    state.rounds.push(r.clone());
                    state.retrieval_count += 1;
                    state.commit(&cut.text, cut.cut);
                }
                _ => {
                    state.commit(trace.text(), trace.len());
                    break;
                }
            }
        }
        Session { answer_text: state.committed_text.clone(), state }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::TraceBuilder;

    fn trace_of(surfaces: &[&str]) -> GenerationTrace {
        let mut b = TraceBuilder::new().prompt("Q", PromptRegion::Other);
        for s in surfaces {
            b = b.token(s, vec![(s.to_string(), 1.0)]);
        }
        b.build().unwrap()
    }

    #[test]
    fn truncation_excludes_trigger() {
        let t = trace_of(&["Miguel", " Morayta", " died"]);
        assert_eq!(truncate_at(&t, 2), Truncation { cut: 2, text: "Miguel Morayta".into() });
        assert_eq!(truncate_at(&t, 0), Truncation { cut: 0, text: String::new() });
    }

    #[test]
    fn truncation_snaps_to_word_start() {
        let t = trace_of(&[" The", " film", " Hyp", "oc", "rite", " was"]);
        for trigger in 2..5 {
            let cut = truncate_at(&t, trigger);
            assert_eq!(cut.cut, 2);
            assert_eq!(cut.text, " The film");
            // no partial word survives: the prefix is a whole-word prefix of the text
            let words: Vec<&str> = cut.text.split_whitespace().collect();
            assert_eq!(words, t.words()[..words.len()].iter().map(String::as_str).collect::<Vec<_>>());
        }
    }

    #[test]
    fn prompt_layout_with_three_passages() {
        let tpl = PromptTemplate {
            exemplars: vec![Exemplar { question: "Q1?".into(), answer: "A1. So the answer is x.".into() }],
        };
        let p = assemble_prompt(&tpl, "Who?", " He", &["one", "two", "three"]);
        assert_eq!(
            p.text,
            "Question: Q1?\nAnswer: A1. So the answer is x.\n\nContext:\n[1] one\n[2] two\n[3] three\nAnswer in the same format as before.\nQuestion: Who?\nAnswer: He"
        );
        let regions: Vec<_> = p.regions.iter().map(|r| (r.region, &p.text[r.start..r.end])).collect();
        assert_eq!(regions[1], (PromptRegion::Context, "Context:\n[1] one\n[2] two\n[3] three\n"));
        assert_eq!(regions[2], (PromptRegion::Question, "Who?"));
    }

    #[test]
    fn prompt_without_passages_omits_context() {
        let tpl = PromptTemplate::default();
        let p = assemble_prompt(&tpl, "Who?", "", &[]);
        assert_eq!(p.text, "Answer in the same format as before.\nQuestion: Who?\nAnswer:");
        assert!(p.text.ends_with("Answer:"));
        assert!(!p.text.contains("Context:"));
    }

    #[test]
    fn fl_rag_fires_every_window() {
        let surfaces: Vec<String> = (0..60).map(|k| format!(" t{k}")).collect();
        let refs: Vec<&str> = surfaces.iter().map(String::as_str).collect();
        let t = trace_of(&refs);
        let cfg = StrategyConfig::new(StrategyKind::FlRag);
        assert_eq!(firing_positions(StrategyKind::FlRag, &t, &SessionState::default(), &cfg), vec![24, 49]);
        let d = baseline_trigger(StrategyKind::FlRag, &t, &SessionState::default(), &cfg, 0);
        assert_eq!(d.position, Some(24));
        // after committing 24 tokens the window stays globally aligned
        let state = SessionState { committed_tokens: 24, ..SessionState::default() };
        assert_eq!(baseline_trigger(StrategyKind::FlRag, &t, &state, &cfg, 1).position, Some(25));
    }

    #[test]
    fn fl_rag_query_is_previous_window() {
        let surfaces: Vec<String> = (0..30).map(|k| format!(" t{k}")).collect();
        let refs: Vec<&str> = surfaces.iter().map(String::as_str).collect();
        let t = trace_of(&refs);
        let cfg = StrategyConfig::new(StrategyKind::FlRag);
        let expected = (0..=24).map(|k| format!("t{k}")).collect::<Vec<_>>().join(" ");
        assert_eq!(baseline_query(StrategyKind::FlRag, &t, 24, &cfg, "q"), expected);
    }

    #[test]
    fn fs_rag_fires_after_each_sentence() {
        let t = trace_of(&["A", ".", " B", "?", " C"]);
        let cfg = StrategyConfig::new(StrategyKind::FsRag);
        assert_eq!(firing_positions(StrategyKind::FsRag, &t, &SessionState::default(), &cfg), vec![2, 4]);
        assert_eq!(baseline_query(StrategyKind::FsRag, &t, 2, &cfg, "q"), "A.");
        assert_eq!(baseline_query(StrategyKind::FsRag, &t, 4, &cfg, "q"), "B?");
        assert_eq!(truncate_at(&t, 2).text, "A.");
    }

    fn flare_trace(probs: &[(&str, f64)]) -> GenerationTrace {
        let mut b = TraceBuilder::new().prompt("Q", PromptRegion::Other);
        for (s, p) in probs {
            let alts = ((1.0 - p) / p).ceil() as usize;
            let mut dist = vec![(s.to_string(), *p)];
            dist.extend((0..alts).map(|k| (format!("<alt{k}>"), (1.0 - p) / alts as f64)));
            b = b.token(s, dist);
        }
        b.build().unwrap()
    }

    #[test]
    fn flare_fires_on_first_low_probability_token() {
        let t = flare_trace(&[(" a", 0.9), (" b", 0.3), (" c", 0.2)]);
        let cfg = StrategyConfig { flare_prob_threshold: Some(0.4), ..StrategyConfig::new(StrategyKind::Flare) };
        assert_eq!(baseline_trigger(StrategyKind::Flare, &t, &SessionState::default(), &cfg, 0).position, Some(1));
        assert_eq!(baseline_trigger(StrategyKind::Flare, &t, &SessionState::default(), &cfg, 2).position, Some(2));
    }

    #[test]
    fn flare_query_masks_low_probability_tokens() {
        let t = flare_trace(&[(" Morayta", 0.9), (" died", 0.8), (" in", 0.95), (" 1999", 0.1)]);
        let cfg = StrategyConfig { flare_prob_threshold: Some(0.4), ..StrategyConfig::new(StrategyKind::Flare) };
        assert_eq!(baseline_query(StrategyKind::Flare, &t, 3, &cfg, "q"), "Morayta died in");
    }

    #[test]
    fn config_validation() {
        assert!(StrategyConfig::new(StrategyKind::Dragin).validate().is_err());
        assert!(StrategyConfig::dragin(1.4, 35).validate().is_ok());
        assert!(StrategyConfig::dragin(f64::INFINITY, 35).validate().is_ok());
        assert!(StrategyConfig::new(StrategyKind::Flare).validate().is_err());
        let zero = StrategyConfig { top_k: 0, ..StrategyConfig::new(StrategyKind::WoRag) };
        assert_eq!(zero.validate(), Err(ConfigError::ZeroCap("top_k")));
        assert_eq!("fl-rag".parse::<StrategyKind>(), Ok(StrategyKind::FlRag));
    }
}
