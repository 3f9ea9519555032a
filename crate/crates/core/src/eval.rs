//! Multiple-choice evaluation: prompt rendering, answer parsing, strict and
//! post-processed accuracy, length-binned reports, and the offline mock
//! adversary.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::client::{ChatClient, ChatRequest, ClientError, HttpEndpoint, Message, OpenAiChat, RetryPolicy};
use crate::distractor::{dot, MCQItem};
use crate::embed::VectorLookup;
use crate::jsonl;

pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/eval_prompt.toml");

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prompt template: {0}")]
    Template(String),
    #[error("few-shot exemplar {0} is also an evaluation item")]
    ShotOverlap(String),
    #[error("no embedding for text {0:?}")]
    MissingEmbedding(String),
    #[error("model endpoint unreachable: {0}")]
    Unreachable(ClientError),
    #[error("answer cache {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bin edges must start at 0 and be strictly increasing")]
    BinEdges,
    #[error("invalid eval config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionLabelStyle {
    AsciiDigits,
    PersianDigits,
}

impl OptionLabelStyle {
    /// Label for 1-based option `n`.
    pub fn label(&self, n: usize) -> char {
        let d = n as u32;
        match self {
            OptionLabelStyle::AsciiDigits => char::from_digit(d, 10).unwrap(),
            OptionLabelStyle::PersianDigits => char::from_u32(0x06F0 + d).unwrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system: String,
    pub instruction: String,
    pub option_label_style: OptionLabelStyle,
    pub shot_template: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::parse(DEFAULT_TEMPLATE).expect("bundled template is valid")
    }
}

impl PromptTemplate {
    pub fn parse(toml_text: &str) -> Result<Self, EvalError> {
        let t: PromptTemplate = toml::from_str(toml_text).map_err(|e| EvalError::Template(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EvalError::Template(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        for p in ["{prefix}", "{options}", "{n_shots_block}"] {
            if !self.instruction.contains(p) {
                return Err(EvalError::Template(format!("instruction lacks {p}")));
            }
        }
        for p in ["{prefix}", "{options}", "{answer}"] {
            if !self.shot_template.contains(p) {
                return Err(EvalError::Template(format!("shot_template lacks {p}")));
            }
        }
        Ok(())
    }

    fn options_block(&self, item: &MCQItem) -> String {
        item.options
            .iter()
            .enumerate()
            .map(|(i, o)| format!("{}) {o}", self.option_label_style.label(i + 1)))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Exemplar blocks in the given order, then the target question.
pub fn render_prompt(item: &MCQItem, template: &PromptTemplate, shots: &[MCQItem]) -> Result<String, EvalError> {
    let mut block = String::new();
    for shot in shots {
        if shot.item_id == item.item_id {
            return Err(EvalError::ShotOverlap(shot.item_id.clone()));
        }
        let answer = template.option_label_style.label(shot.gold_index + 1).to_string();
        block.push_str(
            &template
                .shot_template
                .replace("{prefix}", &shot.prefix)
                .replace("{options}", &template.options_block(shot))
                .replace("{answer}", &answer),
        );
    }
    // prefix and options are substituted last so item text containing a
    // placeholder-looking string is left alone
    Ok(template
        .instruction
        .replace("{n_shots_block}", &block)
        .replace("{options}", &template.options_block(item))
        .replace("{prefix}", &item.prefix))
}

/// 1–4 for ASCII or Persian-Indic digits one to four.
pub fn digit_value(c: char) -> Option<u8> {
    match c {
        '1'..='4' => Some(c as u8 - b'0'),
        '\u{06F1}'..='\u{06F4}' => Some((c as u32 - 0x06F0) as u8),
        _ => None,
    }
}

/// The trimmed output must be exactly one in-range digit.
pub fn parse_strict(raw: &str) -> Option<u8> {
    let mut chars = raw.trim().chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => digit_value(c),
        _ => None,
    }
}

/// Last in-range digit in logical order.
pub fn parse_postprocessed(raw: &str) -> Option<u8> {
    raw.chars().rev().find_map(digit_value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAnswer {
    pub item_id: String,
    pub model: String,
    pub n_shots: usize,
    pub raw_output: String,
    pub strict_parse: Option<u8>,
    pub pp_parse: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ModelAnswer {
    pub fn from_output(item_id: &str, model: &str, n_shots: usize, raw: String) -> Self {
        ModelAnswer {
            item_id: item_id.to_string(),
            model: model.to_string(),
            n_shots,
            strict_parse: parse_strict(&raw),
            pp_parse: parse_postprocessed(&raw),
            raw_output: raw,
            error: None,
        }
    }

    fn failed(item_id: &str, model: &str, n_shots: usize, error: String) -> Self {
        ModelAnswer {
            item_id: item_id.to_string(),
            model: model.to_string(),
            n_shots,
            raw_output: String::new(),
            strict_parse: None,
            pp_parse: None,
            error: Some(error),
        }
    }

    pub fn strict_correct(&self, item: &MCQItem) -> bool {
        self.strict_parse == Some(item.gold_index as u8 + 1)
    }

    pub fn pp_correct(&self, item: &MCQItem) -> bool {
        self.pp_parse == Some(item.gold_index as u8 + 1)
    }
}

/// Something that answers a rendered multiple-choice prompt.
pub trait Answerer: Send + Sync {
    fn model_name(&self) -> &str;
    fn respond(&self, item: &MCQItem, system: &str, prompt: &str) -> Result<String, ClientError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub endpoint: String,
    pub model_name: String,
    pub api_key_env: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_parallel_requests: usize,
    pub retry_limit: u32,
    pub timeout_seconds: f64,
    pub backoff_base_ms: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            endpoint: "https://api.openai.com/v1".into(),
            model_name: "gpt-4o-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: 0.0,
            max_tokens: 2048,
            max_parallel_requests: 8,
            retry_limit: 3,
            timeout_seconds: 120.0,
            backoff_base_ms: 500,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.model_name.is_empty() {
            return Err(EvalError::Config("model_name is empty".into()));
        }
        if self.max_parallel_requests == 0 {
            return Err(EvalError::Config("max_parallel_requests must be >= 1".into()));
        }
        Ok(())
    }

    pub fn http_client(&self) -> OpenAiChat {
        OpenAiChat::new(HttpEndpoint::new(
            &self.endpoint,
            Some(&self.api_key_env),
            Duration::from_secs_f64(self.timeout_seconds),
        ))
    }
}

pub struct ChatAnswerer {
    client: Arc<dyn ChatClient>,
    spec: ModelSpec,
}

impl ChatAnswerer {
    pub fn new(client: Arc<dyn ChatClient>, spec: ModelSpec) -> Self {
        ChatAnswerer { client, spec }
    }

    pub fn from_spec(spec: ModelSpec) -> Self {
        ChatAnswerer::new(Arc::new(spec.http_client()), spec)
    }
}

impl Answerer for ChatAnswerer {
    fn model_name(&self) -> &str {
        &self.spec.model_name
    }

    fn respond(&self, _item: &MCQItem, system: &str, prompt: &str) -> Result<String, ClientError> {
        let request = ChatRequest {
            model: self.spec.model_name.clone(),
            messages: vec![Message::system(system), Message::user(prompt)],
            temperature: self.spec.temperature,
            max_tokens: Some(self.spec.max_tokens),
        };
        RetryPolicy::new(self.spec.retry_limit, self.spec.backoff_base_ms).run(|| self.client.chat(&request))
    }
}

/// 1-based index of the option most cosine-similar to the prefix; the
/// lowest index wins ties.
pub fn mock_adversary(item: &MCQItem, lookup: &dyn VectorLookup) -> Result<usize, EvalError> {
    let get = |t: &str| lookup.vector(t).ok_or_else(|| EvalError::MissingEmbedding(t.to_string()));
    let prefix = get(&item.prefix)?;
    let pn = dot(&prefix, &prefix).sqrt();
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, option) in item.options.iter().enumerate() {
        let v = get(option)?;
        let c = dot(&prefix, &v) / (pn * dot(&v, &v).sqrt());
        if c > best.0 {
            best = (c, i + 1);
        }
    }
    Ok(best.1)
}

/// Answers with the mock adversary's choice as a bare digit.
pub struct MockAdversary<L> {
    lookup: L,
    name: String,
}

impl<L: VectorLookup> MockAdversary<L> {
    pub fn new(lookup: L) -> Self {
        MockAdversary {
            lookup,
            name: "mock-adversary".into(),
        }
    }
}

impl<L: VectorLookup> Answerer for MockAdversary<L> {
    fn model_name(&self) -> &str {
        &self.name
    }

    fn respond(&self, item: &MCQItem, _system: &str, _prompt: &str) -> Result<String, ClientError> {
        mock_adversary(item, &self.lookup)
            .map(|n| n.to_string())
            .map_err(|e| ClientError::Protocol(e.to_string()))
    }
}

/// Append-only cache of answers keyed by (model, item id, shot count).
pub struct AnswerCache {
    path: PathBuf,
    log: jsonl::Appender,
    map: RwLock<HashMap<(String, String, usize), ModelAnswer>>,
}

impl AnswerCache {
    pub fn open(path: &Path) -> Result<Self, EvalError> {
        let io = |source| EvalError::Cache {
            path: path.to_path_buf(),
            source,
        };
        let mut map = HashMap::new();
        if path.exists() {
            let (records, bad) = jsonl::read_lenient::<ModelAnswer>(path).map_err(io)?;
            if bad > 0 {
                warn!(bad, path = %path.display(), "skipping unreadable cached answers");
            }
            for r in records {
                map.insert((r.model.clone(), r.item_id.clone(), r.n_shots), r);
            }
        }
        Ok(AnswerCache {
            path: path.to_path_buf(),
            log: jsonl::Appender::open(path).map_err(io)?,
            map: RwLock::new(map),
        })
    }

    pub fn get(&self, model: &str, item_id: &str, n_shots: usize) -> Option<ModelAnswer> {
        self.map
            .read()
            .unwrap()
            .get(&(model.to_string(), item_id.to_string(), n_shots))
            .cloned()
    }

    pub fn insert(&self, answer: &ModelAnswer) -> Result<(), EvalError> {
        self.log.append(answer).map_err(|source| EvalError::Cache {
            path: self.path.clone(),
            source,
        })?;
        self.map.write().unwrap().insert(
            (answer.model.clone(), answer.item_id.clone(), answer.n_shots),
            answer.clone(),
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Items whose prefix has `lo <= tokens < hi`; `hi = None` is unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBin {
    pub lo: usize,
    pub hi: Option<usize>,
    pub count: usize,
    pub strict_correct: usize,
    pub pp_correct: usize,
    pub strict_acc: Option<f64>,
    pub pp_acc: Option<f64>,
}

impl LengthBin {
    pub fn label(&self) -> String {
        match self.hi {
            Some(hi) => format!("[{},{})", self.lo, hi),
            None => format!("[{},inf)", self.lo),
        }
    }
}

fn ratio(n: usize, d: usize) -> Option<f64> {
    (d > 0).then(|| n as f64 / d as f64)
}

/// Bucket items by prefix token count. `answers` is aligned with `items`.
pub fn length_binned_report(
    answers: &[ModelAnswer],
    items: &[MCQItem],
    tokenizer: &dyn Tokenizer,
    bin_edges: &[usize],
) -> Result<Vec<LengthBin>, EvalError> {
    if bin_edges.first() != Some(&0) || bin_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BinEdges);
    }
    let mut bins: Vec<LengthBin> = bin_edges
        .iter()
        .enumerate()
        .map(|(i, &lo)| LengthBin {
            lo,
            hi: bin_edges.get(i + 1).copied(),
            count: 0,
            strict_correct: 0,
            pp_correct: 0,
            strict_acc: None,
            pp_acc: None,
        })
        .collect();
    for (item, answer) in items.iter().zip(answers) {
        let n = tokenizer.count(&item.prefix);
        let b = bin_edges.partition_point(|&e| e <= n) - 1;
        bins[b].count += 1;
        bins[b].strict_correct += usize::from(answer.strict_correct(item));
        bins[b].pp_correct += usize::from(answer.pp_correct(item));
    }
    for b in &mut bins {
        b.strict_acc = ratio(b.strict_correct, b.count);
        b.pp_acc = ratio(b.pp_correct, b.count);
    }
    Ok(bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_shots: usize,
    pub bin_edges: Vec<usize>,
    pub max_parallel_requests: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_shots: 0,
            bin_edges: vec![0, 10, 20, 30, 40, 50],
            max_parallel_requests: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_name: String,
    pub n_items: usize,
    pub n_shots: usize,
    pub strict_correct: usize,
    pub pp_correct: usize,
    pub strict_acc: f64,
    pub pp_acc: f64,
    pub failed_items: usize,
    pub per_length_bins: Vec<LengthBin>,
}

impl EvalReport {
    /// One row for the whole set, then one per length bin.
    pub fn to_csv(&self) -> String {
        let fmt = |a: Option<f64>| a.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut out = String::from("model,n_shots,bin,count,strict_acc,pp_acc\n");
        out.push_str(&format!(
            "{},{},all,{},{:.6},{:.6}\n",
            self.model_name, self.n_shots, self.n_items, self.strict_acc, self.pp_acc
        ));
        for b in &self.per_length_bins {
            out.push_str(&format!(
                "{},{},\"{}\",{},{},{}\n",
                self.model_name,
                self.n_shots,
                b.label(),
                b.count,
                fmt(b.strict_acc),
                fmt(b.pp_acc)
            ));
        }
        out
    }
}

pub struct EvalOutcome {
    pub answers: Vec<ModelAnswer>,
    pub report: EvalReport,
    /// Model calls actually issued (cache misses).
    pub calls: usize,
}

/// Query the model once per item and score the answers.
///
/// Answers are cached as they arrive, so an outage part-way through loses
/// nothing: the error is returned and a rerun picks up where it stopped.
/// Other per-item failures count as incorrect and are not cached.
pub fn evaluate_dataset(
    items: &[MCQItem],
    answerer: &dyn Answerer,
    template: &PromptTemplate,
    shots: &[MCQItem],
    cfg: &EvalConfig,
    cache: Option<&AnswerCache>,
) -> Result<EvalOutcome, EvalError> {
    template.validate()?;
    if cfg.max_parallel_requests == 0 {
        return Err(EvalError::Config("max_parallel_requests must be >= 1".into()));
    }
    if shots.len() < cfg.n_shots {
        return Err(EvalError::Config(format!(
            "{} shots requested but only {} exemplars supplied",
            cfg.n_shots,
            shots.len()
        )));
    }
    let shots = &shots[..cfg.n_shots];
    let model = answerer.model_name().to_string();
    let calls = std::sync::atomic::AtomicUsize::new(0);

    let answer_one = |item: &MCQItem| -> Result<ModelAnswer, EvalError> {
        if let Some(hit) = cache.and_then(|c| c.get(&model, &item.item_id, cfg.n_shots)) {
            return Ok(hit);
        }
        let prompt = render_prompt(item, template, shots)?;
        calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        match answerer.respond(item, &template.system, &prompt) {
            Ok(raw) => {
                let a = ModelAnswer::from_output(&item.item_id, &model, cfg.n_shots, raw);
                if let Some(c) = cache {
                    c.insert(&a)?;
                }
                Ok(a)
            }
            Err(e) if e.is_outage() => Err(EvalError::Unreachable(e)),
            Err(e) => {
                warn!(item = %item.item_id, error = %e, "answer failed, counting as incorrect");
                Ok(ModelAnswer::failed(&item.item_id, &model, cfg.n_shots, e.to_string()))
            }
        }
    };

    let answers: Vec<ModelAnswer> = if cfg.max_parallel_requests == 1 {
        items.iter().map(answer_one).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.max_parallel_requests)
            .build()
            .map_err(|e| EvalError::Config(e.to_string()))?;
        pool.install(|| items.par_iter().map(answer_one).collect::<Result<_, _>>())?
    };

    let report = score(&model, items, &answers, cfg)?;
    Ok(EvalOutcome {
        answers,
        report,
        calls: calls.into_inner(),
    })
}

/// Build the report from answers aligned with `items`.
pub fn score(model: &str, items: &[MCQItem], answers: &[ModelAnswer], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let strict_correct = items.iter().zip(answers).filter(|(i, a)| a.strict_correct(i)).count();
    let pp_correct = items.iter().zip(answers).filter(|(i, a)| a.pp_correct(i)).count();
    let n = items.len();
    Ok(EvalReport {
        model_name: model.to_string(),
        n_items: n,
        n_shots: cfg.n_shots,
        strict_correct,
        pp_correct,
        strict_acc: ratio(strict_correct, n).unwrap_or(0.0),
        pp_acc: ratio(pp_correct, n).unwrap_or(0.0),
        failed_items: answers.iter().filter(|a| a.error.is_some()).count(),
        per_length_bins: length_binned_report(answers, items, &WhitespaceTokenizer, &cfg.bin_edges)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::mock_embed;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn item(id: &str, prefix: &str, gold: usize) -> MCQItem {
        MCQItem {
            item_id: id.into(),
            prefix: prefix.into(),
            options: (1..=4).map(|k| format!("{id} option {k}")).collect(),
            gold_index: gold,
            conjunction: "چون".into(),
            source_id: "s".into(),
            split: None,
            distractor_pair_ids: vec![],
        }
    }

    struct Scripted {
        out: HashMap<String, String>,
        calls: AtomicUsize,
    }

    impl Answerer for Scripted {
        fn model_name(&self) -> &str {
            "scripted"
        }
        fn respond(&self, item: &MCQItem, _: &str, _: &str) -> Result<String, ClientError> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            Ok(self.out[&item.item_id].clone())
        }
    }

    #[test]
    fn strict_parser_examples() {
        assert_eq!(parse_strict("3"), Some(3));
        assert_eq!(parse_strict("  4\n"), Some(4));
        assert_eq!(parse_strict("۲"), Some(2));
        assert_eq!(parse_strict("The answer is 3"), None);
        assert_eq!(parse_strict("5"), None);
        assert_eq!(parse_strict("33"), None);
        assert_eq!(parse_strict(""), None);
    }

    #[test]
    fn postprocessed_parser_takes_last_digit() {
        assert_eq!(parse_postprocessed("I think option 2 ... final answer: 4"), Some(4));
        assert_eq!(parse_postprocessed("no digits here"), None);
        assert_eq!(parse_postprocessed("گزینه ۳ درست است"), Some(3));
        assert_eq!(parse_postprocessed("option 3, not 7"), Some(3));
        assert_eq!(parse_postprocessed("۱ or 2"), Some(2));
    }

    #[test]
    fn digit_table() {
        let persian = ['۱', '۲', '۳', '۴'];
        for (k, c) in persian.iter().enumerate() {
            assert_eq!(digit_value(*c), Some(k as u8 + 1));
            assert_eq!(OptionLabelStyle::PersianDigits.label(k + 1), *c);
        }
        assert_eq!(digit_value('۰'), None);
        assert_eq!(digit_value('۵'), None);
        assert_eq!(digit_value('0'), None);
    }

    #[test]
    fn bundled_template_parses() {
        let t = PromptTemplate::default();
        assert!(t.instruction.contains("{prefix}"));
        let mut bad = t.clone();
        bad.instruction = "{prefix}".into();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn prompt_rendering() {
        let t = PromptTemplate::default();
        let target = item("t", "prefix text", 0);
        let zero = render_prompt(&target, &t, &[]).unwrap();
        assert!(zero.starts_with("جملهٔ ناتمام"));
        assert!(zero.contains("1) t option 1\n2) t option 2"));
        assert_eq!(zero, render_prompt(&target, &t, &[]).unwrap());

        let shots: Vec<_> = (0..5).map(|i| item(&format!("s{i}"), &format!("shot {i}"), i % 4)).collect();
        let five = render_prompt(&target, &t, &shots).unwrap();
        assert_eq!(five.matches("پاسخ: ").count(), 5);
        let positions: Vec<_> = (0..5).map(|i| five.find(&format!("shot {i}")).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(five.contains("s1 option 1\n2) s1 option 2\n3) s1 option 3\n4) s1 option 4\nپاسخ: 2"));

        let overlap = vec![item("t", "x", 0)];
        assert!(matches!(render_prompt(&target, &t, &overlap), Err(EvalError::ShotOverlap(_))));
    }

    #[test]
    fn scripted_outputs_give_half_and_eighty_percent() {
        let items: Vec<_> = (0..100).map(|i| item(&format!("i{i}"), "p", i % 4)).collect();
        let out = items
            .iter()
            .enumerate()
            .map(|(k, it)| {
                let gold = it.gold_index + 1;
                let wrong = gold % 4 + 1;
                let s = if k < 50 {
                    gold.to_string()
                } else if k < 80 {
                    format!("After thinking, option {wrong} is tempting but the answer is {gold}")
                } else {
                    wrong.to_string()
                };
                (it.item_id.clone(), s)
            })
            .collect();
        let model = Scripted { out, calls: AtomicUsize::new(0) };
        let r = evaluate_dataset(&items, &model, &PromptTemplate::default(), &[], &EvalConfig::default(), None)
            .unwrap()
            .report;
        assert_eq!(r.strict_acc, 0.5);
        assert_eq!(r.pp_acc, 0.8);
        assert_eq!(r.n_items, 100);
    }

    #[test]
    fn cached_answers_make_reruns_free() {
        let dir = tempfile::tempdir().unwrap();
        let items: Vec<_> = (0..20).map(|i| item(&format!("i{i}"), "p", 0)).collect();
        let out = items.iter().map(|i| (i.item_id.clone(), "1".to_string())).collect();
        let model = Scripted { out, calls: AtomicUsize::new(0) };
        let cfg = EvalConfig::default();
        let path = dir.path().join("answers.jsonl");
        let first = {
            let cache = AnswerCache::open(&path).unwrap();
            evaluate_dataset(&items, &model, &PromptTemplate::default(), &[], &cfg, Some(&cache)).unwrap()
        };
        assert_eq!(first.calls, 20);
        let cache = AnswerCache::open(&path).unwrap();
        let second = evaluate_dataset(&items, &model, &PromptTemplate::default(), &[], &cfg, Some(&cache)).unwrap();
        assert_eq!(second.calls, 0);
        assert_eq!(model.calls.load(Ordering::Relaxed), 20);
        assert_eq!(first.report, second.report);
        assert_eq!(first.report.strict_acc, 1.0);
        // a different shot count is a different cache key
        let shots = vec![item("x", "p", 1)];
        let cfg1 = EvalConfig { n_shots: 1, ..cfg };
        let third = evaluate_dataset(&items, &model, &PromptTemplate::default(), &shots, &cfg1, Some(&cache)).unwrap();
        assert_eq!(third.calls, 20);
    }

    #[test]
    fn outage_is_fatal_but_resumable() {
        struct Flaky(AtomicUsize);
        impl Answerer for Flaky {
            fn model_name(&self) -> &str {
                "flaky"
            }
            fn respond(&self, _: &MCQItem, _: &str, _: &str) -> Result<String, ClientError> {
                if self.0.fetch_add(1, Ordering::SeqCst) >= 5 {
                    Err(ClientError::Transport("connection refused".into()))
                } else {
                    Ok("2".into())
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let items: Vec<_> = (0..10).map(|i| item(&format!("i{i}"), "p", 1)).collect();
        let cfg = EvalConfig { max_parallel_requests: 1, ..Default::default() };
        let cache = AnswerCache::open(&path).unwrap();
        let r = evaluate_dataset(&items, &Flaky(AtomicUsize::new(0)), &PromptTemplate::default(), &[], &cfg, Some(&cache));
        assert!(matches!(r, Err(EvalError::Unreachable(_))));
        assert_eq!(cache.len(), 5);
    }

    #[test]
    fn rejected_requests_count_as_incorrect() {
        struct Rejecting;
        impl Answerer for Rejecting {
            fn model_name(&self) -> &str {
                "r"
            }
            fn respond(&self, _: &MCQItem, _: &str, _: &str) -> Result<String, ClientError> {
                Err(ClientError::Status { code: 400, body: "bad".into() })
            }
        }
        let items: Vec<_> = (0..4).map(|i| item(&format!("i{i}"), "p", 0)).collect();
        let r = evaluate_dataset(&items, &Rejecting, &PromptTemplate::default(), &[], &EvalConfig::default(), None)
            .unwrap()
            .report;
        assert_eq!((r.pp_acc, r.failed_items), (0.0, 4));
    }

    #[test]
    fn length_bins() {
        let items: Vec<_> = (1..=20)
            .map(|n| item(&format!("i{n}"), &vec!["w"; n].join(" "), 0))
            .collect();
        // correct only on long prefixes
        let answers: Vec<_> = items
            .iter()
            .map(|i| {
                let long = WhitespaceTokenizer.count(&i.prefix) >= 10;
                ModelAnswer::from_output(&i.item_id, "m", 0, if long { "1" } else { "2" }.into())
            })
            .collect();
        let bins = length_binned_report(&answers, &items, &WhitespaceTokenizer, &[0, 10]).unwrap();
        assert_eq!(bins[0].pp_acc, Some(0.0));
        assert_eq!(bins[1].pp_acc, Some(1.0));
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 20);

        let all = length_binned_report(&answers, &items, &WhitespaceTokenizer, &[0]).unwrap();
        let r = score("m", &items, &answers, &EvalConfig { bin_edges: vec![0], ..Default::default() }).unwrap();
        assert_eq!(all[0].pp_acc, Some(r.pp_acc));

        let sparse = length_binned_report(&answers, &items, &WhitespaceTokenizer, &[0, 100, 200]).unwrap();
        assert_eq!(sparse[1].count, 0);
        assert_eq!(sparse[1].pp_acc, None);
        assert!(length_binned_report(&answers, &items, &WhitespaceTokenizer, &[0, 5, 5]).is_err());
        assert!(length_binned_report(&answers, &items, &WhitespaceTokenizer, &[3, 5]).is_err());
    }

    #[test]
    fn mock_adversary_picks_most_similar_option() {
        let d = 16;
        let mut lookup: HashMap<String, Vec<f32>> = HashMap::new();
        let it = item("m", "prefix", 2);
        lookup.insert(it.prefix.clone(), mock_embed("anchor", d));
        for (k, o) in it.options.iter().enumerate() {
            let v = if k == 2 { mock_embed("anchor", d) } else { mock_embed(o, d) };
            lookup.insert(o.clone(), v);
        }
        assert_eq!(mock_adversary(&it, &lookup).unwrap(), 3);
        let adv = MockAdversary::new(lookup.clone());
        assert_eq!(adv.respond(&it, "", "").unwrap(), "3");
        lookup.remove(&it.options[0]);
        assert!(matches!(mock_adversary(&it, &lookup), Err(EvalError::MissingEmbedding(_))));
    }

    #[test]
    fn csv_has_overall_and_bin_rows() {
        let items: Vec<_> = (0..4).map(|i| item(&format!("i{i}"), "a b c", 0)).collect();
        let answers: Vec<_> = items.iter().map(|i| ModelAnswer::from_output(&i.item_id, "m", 0, "1".into())).collect();
        let r = score("m", &items, &answers, &EvalConfig { bin_edges: vec![0, 2], ..Default::default() }).unwrap();
        let csv = r.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "m,0,all,4,1.000000,1.000000");
        assert_eq!(lines[2], "m,0,\"[0,2)\",0,,");
    }

    proptest! {
        #[test]
        fn pp_extends_strict(s in "\\PC{0,12}") {
            if let Some(v) = parse_strict(&s) {
                prop_assert_eq!(parse_postprocessed(&s), Some(v));
            }
        }

        #[test]
        fn pp_acc_never_below_strict(outs in proptest::collection::vec("[0-9a-z ۱-۴]{0,6}", 1..40)) {
            let items: Vec<_> = (0..outs.len()).map(|i| item(&format!("i{i}"), "p", i % 4)).collect();
            let answers: Vec<_> = items.iter().zip(&outs).map(|(i, o)| ModelAnswer::from_output(&i.item_id, "m", 0, o.clone())).collect();
            let r = score("m", &items, &answers, &EvalConfig::default()).unwrap();
            prop_assert!(r.pp_acc >= r.strict_acc);
            prop_assert_eq!(r.per_length_bins.iter().map(|b| b.count).sum::<usize>(), items.len());
        }
    }
}
