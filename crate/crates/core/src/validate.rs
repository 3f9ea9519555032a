//! Binary LLM checks on candidate pairs: does the connective really act as a
//! discourse connective, and is the completion a complete sentence.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::client::{ChatClient, ChatRequest, ClientError, HttpEndpoint, Message, OpenAiChat, RetryPolicy};
use crate::hash::sha256_hex;
use crate::jsonl::{self, Appender};
use crate::segment::{ConjunctionEntry, SentenceCompletionPair};

pub const DEFAULT_CONNECTIVE_PROMPT: &str = include_str!("../templates/judge_connective.txt");
pub const DEFAULT_COMPLETENESS_PROMPT: &str = include_str!("../templates/judge_completeness.txt");

#[derive(Debug, Error)]
pub enum ValidateError {
    #[error("judge endpoint unreachable after retries: {0}")]
    Unreachable(ClientError),
    #[error("verdict cache {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid judge config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub endpoint: String,
    pub model_name: String,
    pub max_parallel_requests: usize,
    pub retry_limit: u32,
    pub timeout_seconds: f64,
    /// Template with `{sentence}` and `{conjunction}` placeholders.
    pub prompt_connective: String,
    /// Template with a `{completion}` placeholder.
    pub prompt_completeness: String,
    pub api_key_env: String,
    pub backoff_base_ms: u64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            endpoint: "https://api.openai.com/v1".into(),
            model_name: "gpt-4o-mini".into(),
            max_parallel_requests: 8,
            retry_limit: 3,
            timeout_seconds: 60.0,
            prompt_connective: DEFAULT_CONNECTIVE_PROMPT.into(),
            prompt_completeness: DEFAULT_COMPLETENESS_PROMPT.into(),
            api_key_env: "OPENAI_API_KEY".into(),
            backoff_base_ms: 500,
        }
    }
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<(), ValidateError> {
        if self.max_parallel_requests < 1 {
            return Err(ValidateError::Config("max_parallel_requests must be >= 1".into()));
        }
        if !self.prompt_connective.contains("{sentence}") {
            return Err(ValidateError::Config(
                "prompt_connective needs a {sentence} placeholder".into(),
            ));
        }
        if !self.prompt_completeness.contains("{completion}") {
            return Err(ValidateError::Config(
                "prompt_completeness needs a {completion} placeholder".into(),
            ));
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Connective,
    Completeness,
}

/// Read a yes/no verdict from the first line of a judge reply.
///
/// Accepts English and Persian tokens case-insensitively; a line carrying both
/// polarities, or neither, is unparseable.
pub fn parse_verdict(reply: &str) -> Option<bool> {
    const YES: &[&str] = &["yes", "بله", "بلی", "آری"];
    const NO: &[&str] = &["no", "خیر", "نه"];
    let first = reply.trim().lines().next()?.to_lowercase();
    let mut yes = false;
    let mut no = false;
    for tok in first.split(|c: char| !(c.is_alphanumeric() || c == '\u{200C}')) {
        if YES.contains(&tok) {
            yes = true;
        } else if NO.contains(&tok) {
            no = true;
        }
    }
    match (yes, no) {
        (true, false) => Some(true),
        (false, true) => Some(false),
        _ => None,
    }
}

pub fn render_connective_prompt(template: &str, pair: &SentenceCompletionPair) -> String {
    template
        .replace("{sentence}", &pair.reconstruct())
        .replace("{conjunction}", &pair.conjunction)
}

pub fn render_completeness_prompt(template: &str, pair: &SentenceCompletionPair) -> String {
    template.replace("{completion}", &pair.completion)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub pair_id: String,
    pub check: CheckKind,
    pub model: String,
    pub verdict: bool,
    /// No parseable answer was obtained; `verdict` is the conservative drop.
    pub anomaly: bool,
    pub raw_responses: Vec<String>,
}

type CacheKey = (String, CheckKind, String);

/// Append-only verdict cache keyed by (pair_id, check, model).
pub struct VerdictCache {
    path: PathBuf,
    entries: RwLock<HashMap<CacheKey, VerdictRecord>>,
    log: Appender,
}

impl VerdictCache {
    pub fn open(path: &Path) -> Result<Self, ValidateError> {
        let cache_err = |source| ValidateError::Cache {
            path: path.to_path_buf(),
            source,
        };
        let mut entries = HashMap::new();
        if path.exists() {
            let (records, bad) = jsonl::read_lenient::<VerdictRecord>(path).map_err(cache_err)?;
            if bad > 0 {
                warn!(path = %path.display(), bad, "ignoring torn lines in verdict cache");
            }
            for r in records {
                entries.insert((r.pair_id.clone(), r.check, r.model.clone()), r);
            }
        }
        Ok(VerdictCache {
            path: path.to_path_buf(),
            entries: RwLock::new(entries),
            log: Appender::open(path).map_err(cache_err)?,
        })
    }

    pub fn get(&self, pair_id: &str, check: CheckKind, model: &str) -> Option<VerdictRecord> {
        self.entries
            .read()
            .unwrap()
            .get(&(pair_id.to_string(), check, model.to_string()))
            .cloned()
    }

    pub fn insert(&self, record: VerdictRecord) -> Result<(), ValidateError> {
        self.log.append(&record).map_err(|source| ValidateError::Cache {
            path: self.path.clone(),
            source,
        })?;
        self.entries.write().unwrap().insert(
            (record.pair_id.clone(), record.check, record.model.clone()),
            record,
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub pair_id: String,
    /// Absent when the connective is unambiguous and the check is skipped.
    pub connective_ok: Option<bool>,
    pub completion_ok: bool,
    pub judge_model: String,
    pub raw_responses: Vec<String>,
}

impl ValidationVerdict {
    pub fn keep(&self) -> bool {
        self.connective_ok.unwrap_or(true) && self.completion_ok
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Retention {
    pub ambiguous: bool,
    pub before: usize,
    pub after: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub judge_model: String,
    pub input_pairs: usize,
    pub kept_pairs: usize,
    pub connective_rejections: usize,
    pub completeness_rejections: usize,
    pub anomalies: usize,
    pub per_conjunction: BTreeMap<String, Retention>,
}

pub struct FilterOutcome {
    pub kept: Vec<SentenceCompletionPair>,
    pub verdicts: Vec<ValidationVerdict>,
    pub report: ValidationReport,
}

pub struct Judge {
    client: Arc<dyn ChatClient>,
    cfg: JudgeConfig,
    cache: VerdictCache,
    anomalies: AtomicUsize,
}

impl Judge {
    pub fn new(client: Arc<dyn ChatClient>, cfg: JudgeConfig, cache: VerdictCache) -> Result<Self, ValidateError> {
        cfg.validate()?;
        Ok(Judge {
            client,
            cfg,
            cache,
            anomalies: AtomicUsize::new(0),
        })
    }

    /// Unparseable verdicts seen by this judge (cached anomalies included
    /// only when re-read during this session).
    pub fn anomalies(&self) -> usize {
        self.anomalies.load(Ordering::Relaxed)
    }

    pub fn cache(&self) -> &VerdictCache {
        &self.cache
    }

    fn run_check(
        &self,
        pair: &SentenceCompletionPair,
        kind: CheckKind,
    ) -> Result<VerdictRecord, ValidateError> {
        if let Some(hit) = self.cache.get(&pair.pair_id, kind, &self.cfg.model_name) {
            return Ok(hit);
        }
        let prompt = match kind {
            CheckKind::Connective => render_connective_prompt(&self.cfg.prompt_connective, pair),
            CheckKind::Completeness => render_completeness_prompt(&self.cfg.prompt_completeness, pair),
        };
        let request = ChatRequest {
            model: self.cfg.model_name.clone(),
            messages: vec![Message::user(prompt)],
            temperature: 0.0,
            max_tokens: Some(16),
        };
        let transport = RetryPolicy::new(self.cfg.retry_limit, self.cfg.backoff_base_ms);
        let mut raw = Vec::new();
        let mut verdict = None;
        for _ in 0..=self.cfg.retry_limit {
            match transport.run(|| self.client.chat(&request)) {
                Ok(reply) => {
                    verdict = parse_verdict(&reply);
                    raw.push(reply);
                }
                Err(e) if e.is_outage() => return Err(ValidateError::Unreachable(e)),
                Err(e) => raw.push(format!("<error: {e}>")),
            }
            if verdict.is_some() {
                break;
            }
        }
        let anomaly = verdict.is_none();
        if anomaly {
            self.anomalies.fetch_add(1, Ordering::Relaxed);
            warn!(pair_id = %pair.pair_id, check = ?kind, "no parseable verdict, dropping");
        }
        let record = VerdictRecord {
            pair_id: pair.pair_id.clone(),
            check: kind,
            model: self.cfg.model_name.clone(),
            verdict: verdict.unwrap_or(false),
            anomaly,
            raw_responses: raw,
        };
        self.cache.insert(record.clone())?;
        Ok(record)
    }

    pub fn check_connective(&self, pair: &SentenceCompletionPair) -> Result<bool, ValidateError> {
        Ok(self.run_check(pair, CheckKind::Connective)?.verdict)
    }

    pub fn check_completeness(&self, pair: &SentenceCompletionPair) -> Result<bool, ValidateError> {
        Ok(self.run_check(pair, CheckKind::Completeness)?.verdict)
    }

    pub fn verdict(
        &self,
        pair: &SentenceCompletionPair,
        ambiguous: bool,
    ) -> Result<ValidationVerdict, ValidateError> {
        let mut raw = Vec::new();
        let connective_ok = if ambiguous {
            let r = self.run_check(pair, CheckKind::Connective)?;
            raw.extend(r.raw_responses);
            Some(r.verdict)
        } else {
            None
        };
        let r = self.run_check(pair, CheckKind::Completeness)?;
        raw.extend(r.raw_responses);
        Ok(ValidationVerdict {
            pair_id: pair.pair_id.clone(),
            connective_ok,
            completion_ok: r.verdict,
            judge_model: self.cfg.model_name.clone(),
            raw_responses: raw,
        })
    }

    /// Judge every pair with bounded parallelism and keep the ones that pass.
    ///
    /// Verdicts are written to the cache as they arrive, so an outage leaves a
    /// checkpoint and a rerun only asks about the pairs still missing.
    pub fn filter_pairs(
        &self,
        pairs: &[SentenceCompletionPair],
        lexicon: &[ConjunctionEntry],
    ) -> Result<FilterOutcome, ValidateError> {
        let ambiguous: HashMap<&str, bool> = lexicon
            .iter()
            .map(|e| (e.surface.as_str(), e.ambiguous))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.max_parallel_requests)
            .build()
            .map_err(|e| ValidateError::Config(e.to_string()))?;
        let verdicts: Vec<ValidationVerdict> = pool.install(|| {
            pairs
                .par_iter()
                .map(|p| {
                    let amb = ambiguous.get(p.conjunction.as_str()).copied().unwrap_or(false);
                    self.verdict(p, amb)
                })
                .collect::<Result<Vec<_>, _>>()
        })?;

        let mut report = ValidationReport {
            judge_model: self.cfg.model_name.clone(),
            input_pairs: pairs.len(),
            ..Default::default()
        };
        let mut kept = Vec::new();
        for (p, v) in pairs.iter().zip(&verdicts) {
            let entry = report.per_conjunction.entry(p.conjunction.clone()).or_default();
            entry.ambiguous = ambiguous.get(p.conjunction.as_str()).copied().unwrap_or(false);
            entry.before += 1;
            if v.connective_ok == Some(false) {
                report.connective_rejections += 1;
            }
            if !v.completion_ok {
                report.completeness_rejections += 1;
            }
            if v.keep() {
                entry.after += 1;
                kept.push(p.clone());
            }
        }
        report.kept_pairs = kept.len();
        let model = &self.cfg.model_name;
        report.anomalies = verdicts
            .iter()
            .flat_map(|v| {
                let connective = v
                    .connective_ok
                    .and_then(|_| self.cache.get(&v.pair_id, CheckKind::Connective, model));
                let completeness = self.cache.get(&v.pair_id, CheckKind::Completeness, model);
                connective.into_iter().chain(completeness)
            })
            .filter(|r| r.anomaly)
            .count();
        Ok(FilterOutcome {
            kept,
            verdicts,
            report,
        })
    }
}

/// Offline judge: answers "no" for a deterministic fraction of prompts and
/// "yes" otherwise.
#[derive(Debug, Clone)]
pub struct MockJudge {
    pub reject_rate: f64,
}

impl ChatClient for MockJudge {
    fn chat(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let text: String = request.messages.iter().map(|m| m.content.as_str()).collect();
        let h = sha256_hex(text.as_bytes());
        let u = u32::from_str_radix(&h[..8], 16).unwrap() as f64 / u32::MAX as f64;
        Ok(if u < self.reject_rate { "no" } else { "yes" }.to_string())
    }
}
