//! Deterministic scripted backend plus a builder for hand-written traces.
//!
//! A [`MockScript`] is an ordered list of rules; the first rule whose
//! matcher accepts the prompt supplies the trace. The mock then applies the
//! request's stop markers and token cap, so it is a pure function of
//! `(script, request)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gateway::{Backend, GatewayError, GenerateRequest, RegionSpan};
use crate::trace::{
    assign_word_indices, compute_entropy, FinishedReason, GenerationTrace, ProbabilityDistribution,
    PromptRegion, PromptToken, TokenRecord, TraceData, TraceError, ATTENTION_POLICY,
};

/// All present conditions must hold.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMatcher {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suffix: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
}

impl PromptMatcher {
    pub fn exact(s: impl Into<String>) -> Self {
        Self { exact: Some(s.into()), ..Self::default() }
    }

    pub fn prefix(s: impl Into<String>) -> Self {
        Self { prefix: Some(s.into()), ..Self::default() }
    }

    pub fn suffix(s: impl Into<String>) -> Self {
        Self { suffix: Some(s.into()), ..Self::default() }
    }

    pub fn and_contains(mut self, s: impl Into<String>) -> Self {
        self.contains = Some(s.into());
        self
    }

    pub fn matches(&self, prompt: &str) -> bool {
        self.exact.as_deref().is_none_or(|s| prompt == s)
            && self.prefix.as_deref().is_none_or(|s| prompt.starts_with(s))
            && self.suffix.as_deref().is_none_or(|s| prompt.ends_with(s))
            && self.contains.as_deref().is_none_or(|s| prompt.contains(s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub matcher: PromptMatcher,
    pub trace: GenerationTrace,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn push(&mut self, matcher: PromptMatcher, trace: GenerationTrace) -> &mut Self {
        self.rules.push(MockRule { matcher, trace });
        self
    }

    pub fn lookup(&self, prompt: &str) -> Option<&GenerationTrace> {
        self.rules.iter().find(|r| r.matcher.matches(prompt)).map(|r| &r.trace)
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    script: MockScript,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self { script }
    }

    /// Loads a JSON script; every trace is validated on load.
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let err = |message: String| GatewayError::Script { path: path.to_path_buf(), message };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let script: MockScript = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        Ok(Self::new(script))
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    /// The scripted trace after stop markers and the token cap are applied.
    pub fn respond(&self, request: &GenerateRequest) -> Result<GenerationTrace, GatewayError> {
        let scripted = self.script.lookup(&request.prompt).ok_or_else(|| {
            let tail: String = request.prompt.chars().rev().take(60).collect::<Vec<_>>().into_iter().rev().collect();
            GatewayError::NoScript(tail)
        })?;
        let mut keep = scripted.len();
        let mut reason = scripted.finished_reason();
        let stop_at = request
            .stop_markers
            .iter()
            .filter(|m| !m.is_empty())
            .filter_map(|m| scripted.text().find(m.as_str()))
            .min();
        if let Some(cut) = stop_at {
            // drop every token that reaches into the marker
            keep = (0..scripted.len()).take_while(|&k| scripted.token_span(k).end <= cut).count();
            reason = FinishedReason::EndMarker;
        }
        if keep > request.max_new_tokens {
            keep = request.max_new_tokens;
            reason = FinishedReason::LengthCap;
        }
        if keep == scripted.len() && reason == scripted.finished_reason() {
            return Ok(scripted.clone());
        }
        Ok(scripted.truncated(keep, reason))
    }
}

impl Backend for MockBackend {
    fn generate(&self, request: &GenerateRequest) -> Result<TraceData, GatewayError> {
        Ok(self.respond(request)?.into())
    }
}

/// Splits text into whitespace-prefixed word pieces, e.g.
/// `"Answer: The film"` → `["Answer:", " The", " film"]`.
pub fn split_surfaces(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut cur = String::new();
    let mut seen_word = false;
    for c in text.chars() {
        if c.is_whitespace() && seen_word {
            out.push(std::mem::take(&mut cur));
            seen_word = false;
        }
        if !c.is_whitespace() {
            seen_word = true;
        }
        cur.push(c);
    }
    if !cur.is_empty() {
        match (seen_word, out.last_mut()) {
            (false, Some(last)) => last.push_str(&cur),
            _ => out.push(cur),
        }
    }
    out
}

#[derive(Debug, Clone)]
struct PlannedToken {
    surface: String,
    dist: Vec<(String, f64)>,
}

/// Builds valid traces with synthetic distributions and attention.
///
/// Every attention row spreads its unassigned mass uniformly over the
/// positions that were not given an explicit weight with [`attend`].
///
/// [`attend`]: TraceBuilder::attend
#[derive(Debug, Clone, Default)]
pub struct TraceBuilder {
    prompt: Vec<(String, PromptRegion)>,
    tokens: Vec<PlannedToken>,
    focus: Vec<(usize, usize, f64)>,
    finished: Option<FinishedReason>,
}

impl TraceBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn prompt(mut self, text: &str, region: PromptRegion) -> Self {
        self.prompt.extend(split_surfaces(text).into_iter().map(|s| (s, region)));
        self
    }

    /// Appends `text` with each token tagged by the span holding its first
    /// non-whitespace byte.
    pub fn prompt_regions(mut self, text: &str, regions: &[RegionSpan]) -> Self {
        let mut offset = 0;
        for s in split_surfaces(text) {
            let lead = s.len() - s.trim_start().len();
            let at = offset + lead;
            let region = regions
                .iter()
                .find(|r| r.start <= at && at < r.end)
                .map_or(PromptRegion::Other, |r| r.region);
            offset += s.len();
            self.prompt.push((s, region));
        }
        self
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt.len()
    }

    /// Generated token count so far.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Context position of the first prompt token whose bare word is `word`.
    pub fn prompt_position(&self, word: &str) -> Option<usize> {
        self.prompt.iter().position(|(s, _)| crate::stopwords::bare_word(s) == word.to_lowercase())
    }

    /// Like [`prompt_position`](Self::prompt_position) but only inside `region`.
    pub fn prompt_position_in(&self, word: &str, region: PromptRegion) -> Option<usize> {
        self.prompt
            .iter()
            .position(|(s, r)| *r == region && crate::stopwords::bare_word(s) == word.to_lowercase())
    }

    /// Context position of generated token `g`.
    pub fn generated_position(&self, g: usize) -> usize {
        self.prompt.len() + g
    }

    /// Appends tokens with a near-certain distribution.
    pub fn confident(mut self, text: &str) -> Self {
        for s in split_surfaces(text) {
            let dist = vec![(s.clone(), 0.98), ("<alt>".to_string(), 0.02)];
            self.tokens.push(PlannedToken { surface: s, dist });
        }
        self
    }

    /// Appends tokens each drawn from a uniform distribution over `choices`
    /// items (entropy `ln choices`, top probability `1 / choices`).
    pub fn uncertain(mut self, text: &str, choices: usize) -> Self {
        let choices = choices.max(1);
        for s in split_surfaces(text) {
            let p = 1.0 / choices as f64;
            let mut dist = vec![(s.clone(), p)];
            dist.extend((1..choices).map(|k| (format!("<alt{k}>"), p)));
            self.tokens.push(PlannedToken { surface: s, dist });
        }
        self
    }

    pub fn token(mut self, surface: &str, dist: Vec<(String, f64)>) -> Self {
        self.tokens.push(PlannedToken { surface: surface.to_string(), dist });
        self
    }

    /// Generated token `from` puts `weight` on context position `to`.
    pub fn attend(mut self, from: usize, to: usize, weight: f64) -> Self {
        self.focus.push((from, to, weight));
        self
    }

    pub fn finished(mut self, reason: FinishedReason) -> Self {
        self.finished = Some(reason);
        self
    }

    pub fn build(self) -> Result<GenerationTrace, TraceError> {
        let prompt_surfaces: Vec<&str> = self.prompt.iter().map(|(s, _)| s.as_str()).collect();
        let prompt_idx = assign_word_indices(&prompt_surfaces);
        let surfaces: Vec<&str> = self.tokens.iter().map(|t| t.surface.as_str()).collect();
        let gen_idx = assign_word_indices(&surfaces);
        let prompt_len = self.prompt.len();
        let mut tokens = Vec::with_capacity(self.tokens.len());
        for (j, t) in self.tokens.iter().enumerate() {
            let n = prompt_len + j;
            let mut row = vec![0.0; n];
            let mut fixed = vec![false; n];
            let mut mass = 0.0;
            for &(from, to, w) in &self.focus {
                if from == j && to < n {
                    row[to] = w;
                    fixed[to] = true;
                    mass += w;
                }
            }
            let free = fixed.iter().filter(|f| !**f).count();
            if free > 0 {
                let share = (1.0 - mass).max(0.0) / free as f64;
                for (v, f) in row.iter_mut().zip(&fixed) {
                    if !f {
                        *v = share;
                    }
                }
            } else if mass > 0.0 {
                row.iter_mut().for_each(|v| *v /= mass);
            }
            let dist = ProbabilityDistribution::new(t.dist.clone())?;
            tokens.push(TokenRecord {
                position: j,
                surface: t.surface.clone(),
                word_index: gen_idx[j],
                entropy: compute_entropy(&dist),
                top_prob: dist.top_prob(),
                attention_row: row,
                distribution: Some(dist),
            });
        }
        TraceData {
            policy: ATTENTION_POLICY.into(),
            prompt_len,
            prompt_tokens: self
                .prompt
                .iter()
                .zip(prompt_idx)
                .map(|((s, r), w)| PromptToken { surface: s.clone(), word_index: w, region: *r })
                .collect(),
            tokens,
            finished_reason: self.finished.unwrap_or(FinishedReason::BackendStop),
            vocab_size: None,
        }
        .validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GenerationTrace {
        TraceBuilder::new()
            .prompt("Question: Who?\nAnswer:", PromptRegion::Question)
            .confident(" Genghis Khan.\nQuestion: next")
            .build()
            .unwrap()
    }

    #[test]
    fn surfaces_split_on_leading_whitespace() {
        assert_eq!(split_surfaces("Answer: The film"), vec!["Answer:", " The", " film"]);
        assert_eq!(split_surfaces(" a\nb "), vec![" a", "\nb "]);
        assert_eq!(split_surfaces(""), Vec::<String>::new());
    }

    #[test]
    fn scripted_prompt_is_byte_stable() {
        let mut script = MockScript::default();
        script.push(PromptMatcher::suffix("Answer:"), sample());
        let mock = MockBackend::new(script);
        let req = GenerateRequest::new("Question: Who?\nAnswer:", 64);
        let a = serde_json::to_string(&mock.respond(&req).unwrap()).unwrap();
        let b = serde_json::to_string(&mock.respond(&req).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(mock.respond(&req).unwrap(), sample());
    }

    #[test]
    fn token_cap_of_one() {
        let mut script = MockScript::default();
        script.push(PromptMatcher::default(), sample());
        let t = MockBackend::new(script).respond(&GenerateRequest::new("anything", 1)).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.finished_reason(), FinishedReason::LengthCap);
    }

    #[test]
    fn stop_marker_cuts_before_marker() {
        let mut script = MockScript::default();
        script.push(PromptMatcher::default(), sample());
        let mut req = GenerateRequest::new("x", 64);
        req.stop_markers = vec!["\nQuestion:".into()];
        let t = MockBackend::new(script).respond(&req).unwrap();
        assert_eq!(t.text(), " Genghis Khan.");
        assert_eq!(t.finished_reason(), FinishedReason::EndMarker);
    }

    #[test]
    fn first_matching_rule_wins() {
        let other = TraceBuilder::new().confident(" other").build().unwrap();
        let mut script = MockScript::default();
        script
            .push(PromptMatcher::suffix("Answer:").and_contains("Context:"), other.clone())
            .push(PromptMatcher::suffix("Answer:"), sample());
        let mock = MockBackend::new(script);
        assert_eq!(mock.respond(&GenerateRequest::new("Context:\n[1] x\nAnswer:", 8)).unwrap(), other);
        assert_ne!(mock.respond(&GenerateRequest::new("Answer:", 8)).unwrap(), other);
        assert!(matches!(mock.respond(&GenerateRequest::new("nope", 8)), Err(GatewayError::NoScript(_))));
    }

    #[test]
    fn builder_focus_weights_and_distributions() {
        let b = TraceBuilder::new().prompt("film Morayta died", PromptRegion::Other).uncertain(" Miguel", 5).confident(" was");
        let morayta = b.prompt_position("Morayta").unwrap();
        let t = b.attend(1, morayta, 0.7).build().unwrap();
        let row = &t.tokens()[1].attention_row;
        assert_eq!(row[morayta], 0.7);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((t.tokens()[0].entropy - 5f64.ln()).abs() < 1e-12);
        assert!((t.tokens()[0].top_prob - 0.2).abs() < 1e-12);
    }

    #[test]
    fn prompt_regions_follow_spans() {
        let text = "Q: a b\nQuestion: Who?";
        let q = text.find("Who").unwrap();
        let regions = [
            RegionSpan { start: 0, end: 7, region: PromptRegion::Exemplar },
            RegionSpan { start: q, end: text.len(), region: PromptRegion::Question },
        ];
        let b = TraceBuilder::new().prompt_regions(text, &regions);
        let t = b.clone().confident(" x").build().unwrap();
        let tagged: Vec<_> = t.prompt_tokens().iter().map(|p| (p.surface.as_str(), p.region)).collect();
        assert_eq!(
            tagged,
            vec![
                ("Q:", PromptRegion::Exemplar),
                (" a", PromptRegion::Exemplar),
                (" b", PromptRegion::Exemplar),
                ("\nQuestion:", PromptRegion::Other),
                (" Who?", PromptRegion::Question),
            ]
        );
        assert_eq!(b.prompt_position_in("who", PromptRegion::Question), Some(4));
        assert_eq!(b.prompt_position_in("a", PromptRegion::Question), None);
    }

    #[test]
    fn script_json_round_trip() {
        let mut script = MockScript::default();
        script.push(PromptMatcher::prefix("Q"), sample());
        let json = serde_json::to_string(&script).unwrap();
        let back: MockScript = serde_json::from_str(&json).unwrap();
        assert_eq!(back, script);
    }
}
