//! Corpus loading, paragraph-length filtering and per-source sampling.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::hash::rng_for;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read corpus file {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid ingest config: {0}")]
    Config(String),
}

/// One normalized paragraph of source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "RawParagraph", into = "RawParagraph")]
pub struct Paragraph {
    pub source_id: String,
    pub doc_id: String,
    pub text: String,
    /// Unicode scalar count of `text`.
    pub char_len: usize,
}

#[derive(Serialize, Deserialize)]
struct RawParagraph {
    source_id: String,
    doc_id: String,
    text: String,
}

impl From<RawParagraph> for Paragraph {
    fn from(raw: RawParagraph) -> Self {
        Paragraph::new(raw.source_id, raw.doc_id, &raw.text)
    }
}

impl From<Paragraph> for RawParagraph {
    fn from(p: Paragraph) -> Self {
        RawParagraph {
            source_id: p.source_id,
            doc_id: p.doc_id,
            text: p.text,
        }
    }
}

impl Paragraph {
    pub fn new(source_id: impl Into<String>, doc_id: impl Into<String>, text: &str) -> Self {
        let text = normalize_whitespace(text);
        let char_len = text.chars().count();
        Paragraph {
            source_id: source_id.into(),
            doc_id: doc_id.into(),
            text,
            char_len,
        }
    }
}

/// Collapse every whitespace run to one ASCII space and trim both ends.
///
/// ZWNJ (U+200C) is not whitespace and survives untouched.
pub fn normalize_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub min_paragraph_chars: usize,
    pub max_paragraphs_per_source: usize,
    pub seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            min_paragraph_chars: 50,
            max_paragraphs_per_source: 200_000,
            seed: 0,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.min_paragraph_chars < 1 {
            return Err(IngestError::Config("min_paragraph_chars must be >= 1".into()));
        }
        if self.max_paragraphs_per_source < 1 {
            return Err(IngestError::Config(
                "max_paragraphs_per_source must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Streams paragraphs out of a list of JSONL files in order.
///
/// Malformed lines are logged and counted, never fatal. An unreadable file
/// ends the stream with an error naming the path.
pub struct CorpusReader {
    paths: std::vec::IntoIter<PathBuf>,
    current: Option<(PathBuf, std::io::Lines<BufReader<File>>, usize)>,
    malformed: usize,
    failed: bool,
}

impl CorpusReader {
    pub fn new<P: AsRef<Path>>(paths: &[P]) -> Self {
        let paths: Vec<PathBuf> = paths.iter().map(|p| p.as_ref().to_path_buf()).collect();
        CorpusReader {
            paths: paths.into_iter(),
            current: None,
            malformed: 0,
            failed: false,
        }
    }

    /// Lines skipped so far because they were not valid paragraph records.
    pub fn malformed(&self) -> usize {
        self.malformed
    }
}

impl Iterator for CorpusReader {
    type Item = Result<Paragraph, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            if self.current.is_none() {
                let path = self.paths.next()?;
                match File::open(&path) {
                    Ok(f) => self.current = Some((path, BufReader::new(f).lines(), 0)),
                    Err(source) => {
                        self.failed = true;
                        return Some(Err(IngestError::Unreadable { path, source }));
                    }
                }
            }
            let (path, lines, lineno) = self.current.as_mut().unwrap();
            match lines.next() {
                None => self.current = None,
                Some(Err(source)) => {
                    let path = path.clone();
                    self.failed = true;
                    return Some(Err(IngestError::Unreadable { path, source }));
                }
                Some(Ok(line)) => {
                    *lineno += 1;
                    if line.trim().is_empty() {
                        continue;
                    }
                    match serde_json::from_str::<Paragraph>(&line) {
                        Ok(p) => return Some(Ok(p)),
                        Err(e) => {
                            warn!(path = %path.display(), line = *lineno, error = %e, "skipping malformed corpus line");
                            self.malformed += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Load every paragraph from `paths`, returning the paragraphs and the
/// malformed-line count.
pub fn load_corpus<P: AsRef<Path>>(
    paths: &[P],
    config: &IngestConfig,
) -> Result<(Vec<Paragraph>, usize), IngestError> {
    config.validate()?;
    let mut reader = CorpusReader::new(paths);
    let paragraphs = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok((paragraphs, reader.malformed()))
}

pub fn filter_paragraphs<'a, I>(
    paragraphs: I,
    config: &'a IngestConfig,
) -> impl Iterator<Item = Paragraph> + 'a
where
    I: IntoIterator<Item = Paragraph>,
    I::IntoIter: 'a,
{
    paragraphs
        .into_iter()
        .filter(move |p| p.char_len >= config.min_paragraph_chars)
}

/// Cap each source at `max_paragraphs_per_source` with seeded reservoir
/// sampling (Algorithm R). Each source draws from its own RNG stream so the
/// result does not depend on how sources are interleaved in the input.
///
/// Output order: sources in order of first appearance, retained paragraphs in
/// input order within each source.
pub fn sample_per_source<I>(paragraphs: I, config: &IngestConfig) -> Vec<Paragraph>
where
    I: IntoIterator<Item = Paragraph>,
{
    let cap = config.max_paragraphs_per_source;
    let mut order: Vec<String> = Vec::new();
    let mut reservoirs: HashMap<String, Reservoir> = HashMap::new();

    for p in paragraphs {
        let res = reservoirs.entry(p.source_id.clone()).or_insert_with(|| {
            order.push(p.source_id.clone());
            Reservoir {
                rng: rng_for(config.seed, &["ingest-reservoir", &p.source_id]),
                seen: 0,
                kept: Vec::new(),
            }
        });
        let idx = res.seen;
        res.seen += 1;
        if res.kept.len() < cap {
            res.kept.push((idx, p));
        } else {
            let j = res.rng.random_range(0..=idx);
            if j < cap {
                res.kept[j] = (idx, p);
            }
        }
    }

    let mut out = Vec::new();
    for source in order {
        let mut res = reservoirs.remove(&source).unwrap();
        res.kept.sort_by_key(|(i, _)| *i);
        out.extend(res.kept.into_iter().map(|(_, p)| p));
    }
    out
}

struct Reservoir {
    rng: rand_chacha::ChaCha8Rng,
    seen: usize,
    kept: Vec<(usize, Paragraph)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub read: usize,
    pub dropped_short: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub files: Vec<String>,
    pub malformed_lines: usize,
    pub per_source: BTreeMap<String, SourceCounts>,
    pub total_kept: usize,
}

/// Full ingest stage: load, filter, then sample.
pub fn ingest<P: AsRef<Path>>(
    paths: &[P],
    config: &IngestConfig,
) -> Result<(Vec<Paragraph>, IngestReport), IngestError> {
    let (paragraphs, malformed) = load_corpus(paths, config)?;
    let mut report = IngestReport {
        files: paths
            .iter()
            .map(|p| p.as_ref().display().to_string())
            .collect(),
        malformed_lines: malformed,
        ..Default::default()
    };
    for p in &paragraphs {
        let c = report.per_source.entry(p.source_id.clone()).or_default();
        c.read += 1;
        if p.char_len < config.min_paragraph_chars {
            c.dropped_short += 1;
        }
    }
    let kept = sample_per_source(filter_paragraphs(paragraphs, config), config);
    for p in &kept {
        report.per_source.get_mut(&p.source_id).unwrap().kept += 1;
    }
    report.total_kept = kept.len();
    Ok((kept, report))
}
