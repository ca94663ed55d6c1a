//! Regenerates the golden end-to-end fixture set.
//!
//! ```text
//! cargo run -p dynrag-core --example golden_fixture -- crates/core/tests/fixtures/golden
//! ```
//!
//! Writes the mock script, corpus, questions and run config, then runs the
//! dragin, dragin-at-infinity and wo_rag configurations and stores their
//! audit logs and reports next to the inputs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use dynrag_core::bm25::{load_corpus, PassageIndex, Retriever};
use dynrag_core::eval::{emit_audit, emit_report, load_dataset, run_dataset, EvalSettings, RunConfig, RunPaths, TaskKind, ANSWER_MARKER};
use dynrag_core::gateway::Gateway;
use dynrag_core::mock::{MockBackend, MockScript, PromptMatcher, TraceBuilder};
use dynrag_core::orchestrator::{
    truncate_at, AssembledPrompt, Engine, Exemplar, PromptTemplate, StrategyConfig, StrategyKind, CONTINUE_INSTRUCTION,
};
use dynrag_core::qfs::formulate;
use dynrag_core::stopwords::StopwordSet;
use dynrag_core::trace::{GenerationTrace, PromptRegion};

const CORPUS: &[(&str, &str)] = &[
    ("Hypocrite (film)", "Hypocrite is a 1949 Mexican drama film directed by Miguel Morayta."),
    ("Miguel Morayta", "Miguel Morayta Martinez was a Spanish film director and screenwriter. Morayta died on 19 June 2013 in Mexico City."),
    ("Laughter in Hell", "Laughter in Hell is a 1933 American drama film directed by Edward L. Cahn."),
    ("Edward L. Cahn", "Edward L. Cahn was an American film director and editor. Cahn died on August 25, 1963."),
    ("Martin Hodge", "Martin Hodge is an English former footballer who was born on 4 February 1959."),
    ("Ivania Martinich", "Ivania Martinich is a Chilean singer who was born on 25 July 1995."),
    ("Genghis Khan", "Genghis Khan was the founder of the Mongol Empire. His son Ogedei Khan succeeded him as ruler."),
    ("Nosferatu", "Nosferatu is a 1922 silent horror film directed by F.W. Murnau."),
    ("The Phantom Hour", "The Phantom Hour is a 2016 short film directed by Brian Patrick Butler."),
    ("Kurram Garhi", "Kurram Garhi is a village in the Khyber Pakhtunkhwa province of Pakistan."),
];

const Q1: &str = "When did the director of film Hypocrite (Film) die?";
const Q2: &str = "Who is the father-in-law of Boraqchin?";
const Q3: &str = "Who founded the Mongol Empire?";
const Q4: &str = "Who was born first out of Martin Hodge and Ivania Martinich?";
const Q5: &str = "When did the director of film Laughter In Hell die?";

struct Fixture<'a> {
    template: PromptTemplate,
    strategy: StrategyConfig,
    index: &'a PassageIndex,
    stopwords: &'a StopwordSet,
    script: MockScript,
}

impl Fixture<'_> {
    fn builder(prompt: &AssembledPrompt) -> TraceBuilder {
        TraceBuilder::new().prompt_regions(&prompt.text, &prompt.regions)
    }

    fn direct(&self, q: &str) -> AssembledPrompt {
        self.template.direct(q, "")
    }

    fn augmented(&self, q: &str, committed: &str, trace: &GenerationTrace, trigger: usize) -> AssembledPrompt {
        let query = formulate(trace, trigger, self.strategy.qfs_top_n, self.stopwords, self.strategy.qfs).unwrap();
        let result = self.index.retrieve(&query.render(), self.strategy.top_k).unwrap();
        let passages: Vec<&str> =
            result.hits.iter().map(|h| self.index.passage(h.passage_id).unwrap().text.as_str()).collect();
        self.template.augmented(q, committed, &passages)
    }

    fn add_direct(&mut self, q: &str, trace: &GenerationTrace) {
        self.script.push(PromptMatcher::suffix(format!("Question: {q}\nAnswer:")), trace.clone());
    }

    fn add_round(&mut self, q: &str, committed: &str, trace: &GenerationTrace) {
        let m = PromptMatcher::suffix(format!("Question: {q}\nAnswer:{committed}")).and_contains(CONTINUE_INSTRUCTION);
        self.script.push(m, trace.clone());
    }
}

fn question_pos(b: &TraceBuilder, word: &str) -> usize {
    b.prompt_position_in(word, PromptRegion::Question).unwrap_or_else(|| panic!("{word} not in question"))
}

fn write_inputs(dir: &Path) -> RunConfig {
    std::fs::create_dir_all(dir).unwrap();
    let corpus: String = CORPUS
        .iter()
        .map(|(t, x)| serde_json::to_string(&serde_json::json!({ "title": t, "text": x })).unwrap() + "\n")
        .collect();
    std::fs::write(dir.join("corpus.jsonl"), corpus).unwrap();
    let golds = [(Q1, "19 June 2013"), (Q2, "Genghis Khan"), (Q3, "Genghis Khan"), (Q4, "Martin Hodge"), (Q5, "August 25, 1963")];
    let questions: String = golds
        .iter()
        .enumerate()
        .map(|(k, (q, a))| {
            serde_json::to_string(&serde_json::json!({ "id": format!("q{}", k + 1), "question": q, "answer": a })).unwrap()
                + "\n"
        })
        .collect();
    std::fs::write(dir.join("questions.jsonl"), questions).unwrap();

    let strategy = StrategyConfig { top_k: 3, ..StrategyConfig::dragin(1.2, 3) };
    let mut settings = EvalSettings::new(strategy);
    settings.task_kind = TaskKind::Multihop;
    settings.prompt.exemplars.push(Exemplar {
        question: "Are both Kurram Garhi and Trojkrsti located in the same country?".into(),
        answer: "Kurram Garhi is located in the country of Pakistan. Trojkrsti is located in the country of Republic of Macedonia. Thus, they are not in the same country. So the answer is no.".into(),
    });
    let config = RunConfig {
        run: RunPaths {
            dataset: Some("questions.jsonl".into()),
            corpus: Some("corpus.jsonl".into()),
            index: None,
            backend: Some("mock://script.json".into()),
            out: Some("out".into()),
            segment_size: 100,
            concurrency: 2,
        },
        settings,
    };
    std::fs::write(dir.join("config.toml"), toml::to_string(&config).unwrap()).unwrap();
    config
}

fn build_script(fx: &mut Fixture<'_>) {
    // q1: two retrieval rounds
    let p = fx.direct(Q1);
    let b = Fixture::builder(&p);
    let g = |k| b.generated_position(k);
    let a = b
        .clone()
        .confident(" The film Hypocrite was directed by")
        .uncertain(" Miguel", 16)
        .confident(" Morayta. Miguel Morayta died in 1999. So the answer is 1999.")
        .attend(6, question_pos(&b, "director"), 0.3)
        .attend(6, question_pos(&b, "hypocrite"), 0.35)
        .attend(6, g(1), 0.2)
        .attend(7, g(6), 0.6)
        .build()
        .unwrap();
    fx.add_direct(Q1, &a);
    let committed = truncate_at(&a, 6).text;
    let p = fx.augmented(Q1, &committed, &a, 6);
    let b = Fixture::builder(&p);
    let g = |k| b.generated_position(k);
    let second = b
        .clone()
        .confident(" Miguel Morayta. Miguel Morayta died on")
        .uncertain(" 19", 16)
        .confident(" June 2013. So the answer is 19 June 2013.")
        .attend(6, g(2), 0.3)
        .attend(6, g(3), 0.3)
        .attend(6, g(4), 0.25)
        .attend(7, g(6), 0.6)
        .build()
        .unwrap();
    fx.add_round(Q1, &committed, &second);
    let committed = committed + &truncate_at(&second, 6).text;
    let b = Fixture::builder(&fx.augmented(Q1, &committed, &second, 6));
    let third = b.confident(" 19 June 2013. So the answer is 19 June 2013.").build().unwrap();
    fx.add_round(Q1, &committed, &third);

    // q2: the query has no indexed terms, so the resumed prompt has no context
    let p = fx.direct(Q2);
    let b = Fixture::builder(&p);
    let g = |k| b.generated_position(k);
    let a = b
        .clone()
        .confident(" Boraqchin is married to")
        .uncertain(" Ögedei", 16)
        .confident(" Khan. Ögedei Khan is the son of Chagatai. So the answer is Chagatai.")
        .attend(4, question_pos(&b, "boraqchin"), 0.3)
        .attend(4, g(0), 0.25)
        .attend(4, g(2), 0.2)
        .attend(5, g(4), 0.6)
        .build()
        .unwrap();
    fx.add_direct(Q2, &a);
    let committed = truncate_at(&a, 4).text;
    let b = Fixture::builder(&fx.augmented(Q2, &committed, &a, 4));
    let resumed = b
        .confident(" Ögedei Khan. Ögedei Khan's father is Genghis Khan. So the answer is Genghis Khan.")
        .build()
        .unwrap();
    fx.add_round(Q2, &committed, &resumed);

    // q3: no marker, answered by the second pass
    let body = " The Mongol Empire was founded by Genghis Khan.";
    let b = Fixture::builder(&fx.direct(Q3));
    fx.add_direct(Q3, &b.confident(body).build().unwrap());
    let followup = fx.template.direct(Q3, "").text + body + " " + ANSWER_MARKER;
    let b = TraceBuilder::new().prompt(&followup, PromptRegion::Other);
    fx.script.push(PromptMatcher::suffix(format!("{body} {ANSWER_MARKER}")), b.confident(" Khan.\n").build().unwrap());

    // q4: the continuation runs into the next question and is cut there
    let b = Fixture::builder(&fx.direct(Q4));
    let a = b
        .confident(" Martin Hodge was born on 4 February 1959. Ivania Martinich was born on 25 July 1995. Thus, Martin Hodge was born first. So the answer is Martin Hodge.\nQuestion: Who is older?")
        .build()
        .unwrap();
    fx.add_direct(Q4, &a);

    // q5: one retrieval at token 3
    let p = fx.direct(Q5);
    let b = Fixture::builder(&p);
    let g = |k| b.generated_position(k);
    let a = b
        .clone()
        .confident(" The director was")
        .uncertain(" Edward", 16)
        .confident(" L. Cahn. Cahn died in 1970. So the answer is 1970.")
        .attend(3, question_pos(&b, "director"), 0.3)
        .attend(3, question_pos(&b, "laughter"), 0.3)
        .attend(3, question_pos(&b, "hell"), 0.25)
        .attend(4, g(3), 0.6)
        .build()
        .unwrap();
    fx.add_direct(Q5, &a);
    let committed = truncate_at(&a, 3).text;
    let b = Fixture::builder(&fx.augmented(Q5, &committed, &a, 3));
    let resumed = b
        .confident(" Edward L. Cahn. Edward L. Cahn died on August 25, 1963. So the answer is August 25, 1963.")
        .build()
        .unwrap();
    fx.add_round(Q5, &committed, &resumed);
}

fn run_variant(dir: &Path, name: &str, config: &RunConfig, gateway: &Gateway, index: &PassageIndex, stopwords: &StopwordSet) {
    let examples = load_dataset(&dir.join("questions.jsonl"), config.settings.task_kind).unwrap();
    let engine = Engine {
        strategy: &config.settings.strategy,
        template: &config.settings.prompt,
        gateway,
        retriever: Some(index),
        stopwords,
    };
    let (report, audits) = run_dataset(&engine, &config.settings, &examples, config.run.concurrency);
    let out = dir.join("expected").join(name);
    emit_report(&report, &out).unwrap();
    emit_audit(&audits, &out).unwrap();
    println!("{name}: em {:.2} f1 {:.3} retrievals {}", report.aggregates.em, report.aggregates.f1, report.aggregates.total_retrievals);
}

fn main() {
    let dir: PathBuf = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "crates/core/tests/fixtures/golden".into());
    let config = write_inputs(&dir);
    let passages = load_corpus(&dir.join("corpus.jsonl"), config.run.segment_size).unwrap();
    let index = PassageIndex::build(passages).unwrap();
    let stopwords = StopwordSet::english();
    let mut fx = Fixture {
        template: config.settings.prompt.clone(),
        strategy: config.settings.strategy.clone(),
        index: &index,
        stopwords,
        script: MockScript::default(),
    };
    build_script(&mut fx);
    std::fs::write(dir.join("script.json"), serde_json::to_string(&fx.script).unwrap() + "\n").unwrap();

    let gateway = Gateway::new(Arc::new(MockBackend::new(fx.script)));
    run_variant(&dir, "dragin", &config, &gateway, &index, stopwords);
    let mut inf = config.clone();
    inf.settings.strategy.theta = Some(f64::INFINITY);
    run_variant(&dir, "dragin_inf", &inf, &gateway, &index, stopwords);
    let mut wo = config.clone();
    wo.settings.strategy = StrategyConfig { kind: StrategyKind::WoRag, theta: None, ..config.settings.strategy.clone() };
    run_variant(&dir, "wo_rag", &wo, &gateway, &index, stopwords);
}
