//! Datasets, answer extraction, QA metrics and run reports.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{info, warn};

use crate::bm25::{DEFAULT_B, DEFAULT_K1, DEFAULT_SEGMENT_SIZE};
use crate::gateway::{Gateway, GatewayError, GenerateRequest};
use crate::orchestrator::{Engine, PromptTemplate, RetrievalRound, StrategyConfig, StrategyKind};
use crate::stopwords::ENGLISH_STOPWORDS_VERSION;

pub const ANSWER_MARKER: &str = "So the answer is";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("invalid theta range {0:?}; expected start:end:step")]
    Range(String),
    #[error("config: {0}")]
    Config(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Multihop,
    ReadingComprehension,
    CommonsenseYesno,
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").to_lowercase().as_str() {
            "multihop" => Ok(TaskKind::Multihop),
            "reading_comprehension" => Ok(TaskKind::ReadingComprehension),
            "commonsense_yesno" | "yesno" => Ok(TaskKind::CommonsenseYesno),
            other => Err(format!("unknown task kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub task_kind: TaskKind,
}

fn answer_strings(v: &Value) -> Option<Vec<String>> {
    match v {
        Value::String(s) => Some(vec![s.clone()]),
        Value::Bool(b) => Some(vec![if *b { "yes" } else { "no" }.to_string()]),
        Value::Number(n) => Some(vec![n.to_string()]),
        Value::Array(items) => items.iter().map(|i| answer_strings(i).and_then(|mut a| a.pop())).collect(),
        _ => None,
    }
}

fn parse_record(line: usize, text: &str, kind: TaskKind) -> Result<Option<QAExample>, EvalError> {
    let bad = |message: String| EvalError::Record { line, message };
    let v: Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| bad("record is not an object".into()))?;
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err(bad("missing \"id\"".into())),
    };
    let question = obj
        .get("question")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing \"question\"".into()))?
        .to_string();
    if obj.get("unanswerable").and_then(Value::as_bool) == Some(true) {
        return Ok(None);
    }
    let raw = obj
        .get("answers")
        .or_else(|| obj.get("answer"))
        .ok_or_else(|| bad("missing \"answer\" or \"answers\"".into()))?;
    let gold_answers = answer_strings(raw).ok_or_else(|| bad("answers must be strings".into()))?;
    if gold_answers.is_empty() {
        return Ok(None);
    }
    Ok(Some(QAExample { id, question, gold_answers, task_kind: kind }))
}

/// Reads JSONL records `{"id", "question", "answer" | "answers"}`. Records
/// flagged `"unanswerable": true` or with an empty answer list are dropped.
pub fn load_dataset(path: &Path, kind: TaskKind) -> Result<Vec<QAExample>, EvalError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    let mut dropped = 0;
    for (k, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(k + 1, &line, kind)? {
            Some(ex) => out.push(ex),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        info!(dropped, "skipped records without answers");
    }
    Ok(out)
}

/// Lowercase, strip punctuation, drop articles, collapse whitespace.
pub fn normalize(answer: &str) -> String {
    let lowered: String = answer
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(answer: &str, golds: &[String]) -> u8 {
    let a = normalize(answer);
    u8::from(golds.iter().any(|g| normalize(g) == a))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

fn f1_against(answer: &str, gold: &str) -> TokenScores {
    let pred: Vec<&str> = answer.split_whitespace().collect();
    let truth: Vec<&str> = gold.split_whitespace().collect();
    if pred.is_empty() || truth.is_empty() {
        let v = f64::from(u8::from(pred.is_empty() && truth.is_empty()));
        return TokenScores { f1: v, precision: v, recall: v };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &truth {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for p in &pred {
        if let Some(c) = counts.get_mut(p) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return TokenScores { f1: 0.0, precision: 0.0, recall: 0.0 };
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / truth.len() as f64;
    TokenScores { f1: 2.0 * precision * recall / (precision + recall), precision, recall }
}

/// Token-multiset F1 against the best-scoring gold.
pub fn token_f1(answer: &str, golds: &[String]) -> TokenScores {
    let a = normalize(answer);
    golds
        .iter()
        .map(|g| f1_against(&a, &normalize(g)))
        .fold(TokenScores { f1: 0.0, precision: 0.0, recall: 0.0 }, |best, s| if s.f1 > best.f1 { s } else { best })
}

fn clean_answer(fragment: &str) -> String {
    let first_line = fragment.trim_start().lines().next().unwrap_or("");
    first_line
        .trim()
        .trim_end_matches(|c: char| c.is_ascii_punctuation() && !matches!(c, ')' | '"' | '\'' | '%'))
        .trim()
        .to_string()
}

/// Text after the last answer marker, or `None` when the marker is absent.
pub fn answer_after_marker(text: &str) -> Option<String> {
    text.rfind(ANSWER_MARKER).map(|at| clean_answer(&text[at + ANSWER_MARKER.len()..]))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedAnswer {
    pub answer: String,
    pub second_pass: bool,
}

/// `prompt` is the text the generation continued; on a missing marker the
/// output is re-sent with the marker appended for one bounded continuation.
pub fn extract_answer(
    generated: &str,
    gateway: &Gateway,
    prompt: &str,
    max_new_tokens: usize,
    stop_markers: &[String],
) -> Result<ExtractedAnswer, GatewayError> {
    if let Some(answer) = answer_after_marker(generated) {
        return Ok(ExtractedAnswer { answer, second_pass: false });
    }
    let request = GenerateRequest {
        stop_markers: stop_markers.to_vec(),
        want_attention: false,
        ..GenerateRequest::new(format!("{prompt}{} {ANSWER_MARKER}", generated.trim_end()), max_new_tokens)
    };
    let trace = gateway.generate(&request)?;
    let answer = answer_after_marker(trace.text()).unwrap_or_else(|| clean_answer(trace.text()));
    if answer.is_empty() {
        warn!("answer extraction produced nothing");
    }
    Ok(ExtractedAnswer { answer, second_pass: true })
}

fn default_answer_tokens() -> usize {
    16
}
fn default_concurrency() -> usize {
    1
}
fn default_segment_size() -> usize {
    DEFAULT_SEGMENT_SIZE
}

/// Settings that shape results; hashed into the report fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub prompt: PromptTemplate,
    #[serde(default)]
    pub task_kind: TaskKind,
    #[serde(default = "default_answer_tokens")]
    pub answer_max_tokens: usize,
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    settings: &'a EvalSettings,
    stopwords: &'static str,
    bm25_k1: f64,
    bm25_b: f64,
}

impl EvalSettings {
    pub fn new(strategy: StrategyConfig) -> Self {
        Self { strategy, prompt: PromptTemplate::default(), task_kind: TaskKind::default(), answer_max_tokens: 16 }
    }

    /// Hex sha256 of the canonical TOML form plus pinned component versions.
    pub fn fingerprint(&self) -> String {
        let input = FingerprintInput {
            settings: self,
            stopwords: ENGLISH_STOPWORDS_VERSION,
            bm25_k1: DEFAULT_K1,
            bm25_b: DEFAULT_B,
        };
        let canonical = toml::to_string(&input).expect("settings serialize to toml");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Run config file: `[run]` paths plus the settings tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run: RunPaths,
    #[serde(flatten)]
    pub settings: EvalSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunPaths {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub index: Option<PathBuf>,
    #[serde(default)]
    pub backend: Option<String>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_segment_size")]
    pub segment_size: usize,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| EvalError::Config(e.to_string()))?;
        cfg.settings.strategy.validate().map_err(|e| EvalError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub answer: String,
    pub gold_answers: Vec<String>,
    pub em: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub retrieval_count: usize,
    pub generated_tokens: usize,
    pub generate_calls: usize,
    pub second_pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub questions: usize,
    pub failed: usize,
    pub em: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub retrieval_count: f64,
    pub generated_tokens: f64,
    pub total_retrievals: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl Aggregates {
    pub fn of(records: &[QuestionRecord]) -> Self {
        let accuracy = records
            .iter()
            .all(|r| r.accuracy.is_some())
            .then(|| mean(records.iter().filter_map(|r| r.accuracy)))
            .filter(|_| !records.is_empty());
        Self {
            questions: records.len(),
            failed: records.iter().filter(|r| r.failure.is_some()).count(),
            em: mean(records.iter().map(|r| r.em)),
            f1: mean(records.iter().map(|r| r.f1)),
            precision: mean(records.iter().map(|r| r.precision)),
            recall: mean(records.iter().map(|r| r.recall)),
            accuracy,
            retrieval_count: mean(records.iter().map(|r| r.retrieval_count as f64)),
            generated_tokens: mean(records.iter().map(|r| r.generated_tokens as f64)),
            total_retrievals: records.iter().map(|r| r.retrieval_count).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub fingerprint: String,
    pub strategy: StrategyKind,
    pub records: Vec<QuestionRecord>,
    pub aggregates: Aggregates,
}

/// One line of the per-question audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub id: String,
    pub question: String,
    pub strategy: StrategyKind,
    pub committed_text: String,
    pub committed_tokens: usize,
    pub generate_calls: usize,
    pub exhausted: bool,
    pub rounds: Vec<RetrievalRound>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

pub fn score_answer(answer: &str, example: &QAExample) -> (f64, TokenScores, Option<f64>) {
    let em = f64::from(exact_match(answer, &example.gold_answers));
    let scores = token_f1(answer, &example.gold_answers);
    let accuracy = (example.task_kind == TaskKind::CommonsenseYesno).then_some(em);
    (em, scores, accuracy)
}

pub fn run_example(engine: &Engine<'_>, settings: &EvalSettings, example: &QAExample) -> (QuestionRecord, AuditRecord) {
    let session = engine.run_question(&example.question);
    let state = &session.state;
    let mut failure = state.failure.clone();
    let mut second_pass = false;
    let answer = if failure.is_some() {
        String::new()
    } else {
        let prompt = settings.prompt.direct(&example.question, "").text;
        match extract_answer(
            &session.answer_text,
            engine.gateway,
            &prompt,
            settings.answer_max_tokens,
            &settings.strategy.stop_markers,
        ) {
            Ok(x) => {
                second_pass = x.second_pass;
                x.answer
            }
            Err(e) => {
                failure = Some(format!("answer extraction: {e}"));
                String::new()
            }
        }
    };
    if let Some(f) = &failure {
        warn!(id = %example.id, failure = %f, "question failed");
    }
    let (em, scores, accuracy) = score_answer(&answer, example);
    let record = QuestionRecord {
        id: example.id.clone(),
        answer,
        gold_answers: example.gold_answers.clone(),
        em,
        f1: scores.f1,
        precision: scores.precision,
        recall: scores.recall,
        accuracy,
        retrieval_count: state.retrieval_count,
        generated_tokens: state.committed_tokens,
        generate_calls: state.generate_calls,
        second_pass,
        failure: failure.clone(),
    };
    let audit = AuditRecord {
        id: example.id.clone(),
        question: example.question.clone(),
        strategy: settings.strategy.kind,
        committed_text: state.committed_text.clone(),
        committed_tokens: state.committed_tokens,
        generate_calls: state.generate_calls,
        exhausted: state.exhausted,
        rounds: state.rounds.clone(),
        failure,
    };
    (record, audit)
}

/// Runs every example concurrently; records keep dataset order.
pub fn run_dataset(
    engine: &Engine<'_>,
    settings: &EvalSettings,
    examples: &[QAExample],
    concurrency: usize,
) -> (RunReport, Vec<AuditRecord>) {
    let work = || examples.par_iter().map(|ex| run_example(engine, settings, ex)).collect::<Vec<_>>();
    let pairs = match rayon::ThreadPoolBuilder::new().num_threads(concurrency.max(1)).build() {
        Ok(pool) => pool.install(work),
        Err(_) => work(),
    };
    let (records, audits): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let aggregates = Aggregates::of(&records);
    let report = RunReport { fingerprint: settings.fingerprint(), strategy: settings.strategy.kind, records, aggregates };
    (report, audits)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), EvalError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Serialize)]
struct ReportTrailer<'a> {
    fingerprint: &'a str,
    strategy: StrategyKind,
    aggregates: &'a Aggregates,
}

/// Human-readable summary table.
pub fn render_summary(report: &RunReport) -> String {
    let a = &report.aggregates;
    let mut s = String::new();
    s.push_str(&format!("strategy     {}\n", report.strategy.name()));
    s.push_str(&format!("fingerprint  {}\n", report.fingerprint));
    s.push_str(&format!("questions    {} ({} failed)\n", a.questions, a.failed));
    s.push_str(&format!("EM           {:.4}\n", a.em));
    s.push_str(&format!("F1           {:.4}\n", a.f1));
    s.push_str(&format!("Precision    {:.4}\n", a.precision));
    s.push_str(&format!("Recall       {:.4}\n", a.recall));
    if let Some(acc) = a.accuracy {
        s.push_str(&format!("Accuracy     {acc:.4}\n"));
    }
    s.push_str(&format!("#Num         {:.4}\n", a.retrieval_count));
    s.push_str(&format!("Avg. Tokens  {:.4}\n", a.generated_tokens));
    s.push('\n');
    s.push_str(&format!("{:<16} {:>4} {:>6} {:>4} {:>6}  answer\n", "id", "EM", "F1", "#Num", "tokens"));
    for r in &report.records {
        s.push_str(&format!(
            "{:<16} {:>4} {:>6.3} {:>4} {:>6}  {}{}\n",
            r.id,
            r.em,
            r.f1,
            r.retrieval_count,
            r.generated_tokens,
            r.answer,
            if r.failure.is_some() { "  [failed]" } else { "" }
        ));
    }
    s
}

pub const REPORT_FILE: &str = "report.jsonl";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const AUDIT_FILE: &str = "audit.jsonl";

/// Writes `report.jsonl` (one record per line, aggregates last) and
/// `summary.txt` into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(REPORT_FILE);
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    for r in &report.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io_err(&path))?;
    }
    let trailer = ReportTrailer { fingerprint: &report.fingerprint, strategy: report.strategy, aggregates: &report.aggregates };
    serde_json::to_writer(&mut w, &trailer)?;
    w.write_all(b"\n").map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    let summary = dir.join(SUMMARY_FILE);
    std::fs::write(&summary, render_summary(report)).map_err(io_err(&summary))
}

pub fn emit_audit(audits: &[AuditRecord], dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_jsonl(&dir.join(AUDIT_FILE), audits)
}

/// Parses `start:end:step` into an inclusive list of thresholds.
pub fn parse_theta_range(range: &str) -> Result<Vec<f64>, EvalError> {
    let bad = || EvalError::Range(range.to_string());
    let parts: Vec<f64> = range.split(':').map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_, _>>()?;
    let (start, end, step) = match parts[..] {
        [single] => (single, single, 1.0),
        [start, end, step] => (start, end, step),
        _ => return Err(bad()),
    };
    if step.is_nan() || step <= 0.0 || !start.is_finite() || !end.is_finite() || end < start || start <= 0.0 {
        return Err(bad());
    }
    let steps = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=steps).map(|k| ((start + k as f64 * step) * 1e9).round() / 1e9).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta: f64,
    pub em: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub retrieval_count: f64,
    pub generated_tokens: f64,
}

impl SweepRow {
    pub fn from_report(theta: f64, report: &RunReport) -> Self {
        let a = &report.aggregates;
        Self {
            theta,
            em: a.em,
            f1: a.f1,
            accuracy: a.accuracy,
            retrieval_count: a.retrieval_count,
            generated_tokens: a.generated_tokens,
        }
    }
}

/// Threshold × (metric, #Num) grid.
pub fn render_sweep(rows: &[SweepRow]) -> String {
    let mut s = format!("{:>6} {:>8} {:>8} {:>8} {:>8}\n", "theta", "EM", "F1", "#Num", "tokens");
    for r in rows {
        s.push_str(&format!(
            "{:>6.2} {:>8.4} {:>8.4} {:>8.4} {:>8.2}\n",
            r.theta, r.em, r.f1, r.retrieval_count, r.generated_tokens
        ));
    }
    s
}

/// Runs the same dataset once per threshold with an otherwise fixed config.
pub fn sweep(
    engine: &Engine<'_>,
    settings: &EvalSettings,
    examples: &[QAExample],
    thetas: &[f64],
    concurrency: usize,
) -> Vec<SweepRow> {
    thetas
        .iter()
        .map(|&theta| {
            let mut s = settings.clone();
            s.strategy.theta = Some(theta);
            let e = Engine { strategy: &s.strategy, ..*engine };
            let (report, _) = run_dataset(&e, &s, examples, concurrency);
            SweepRow::from_report(theta, &report)
        })
        .collect()
}
