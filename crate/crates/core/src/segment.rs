//! Conjunction-based sentence/completion segmentation.
//!
//! A paragraph is split at a connective whose first character lies inside a
//! configured offset window. The connective ends the prefix; after a single
//! space the completion runs to the end of the sentence containing it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{rng_for, short_id};
use crate::ingest::Paragraph;

/// The character placed between a prefix and its completion.
pub const SEPARATOR: char = ' ';

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("invalid segmentation config: {0}")]
    Config(String),
    #[error("no conjunction reaches the frequency floor of {0}")]
    EmptyLexicon(u64),
    #[error("cannot read lexicon {path}: {message}")]
    Lexicon { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjunctionEntry {
    pub surface: String,
    #[serde(default)]
    pub ambiguous: bool,
    #[serde(default = "one")]
    pub oversample_multiplier: f64,
    /// Observed corpus frequency, filled in by [`build_lexicon`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<u64>,
}

fn one() -> f64 {
    1.0
}

impl ConjunctionEntry {
    pub fn new(surface: &str) -> Self {
        ConjunctionEntry {
            surface: surface.to_string(),
            ambiguous: false,
            oversample_multiplier: 1.0,
            frequency: None,
        }
    }

    pub fn validate(&self) -> Result<(), SegmentError> {
        if self.surface.is_empty() || self.surface.trim() != self.surface {
            return Err(SegmentError::Config(format!(
                "conjunction surface {:?} must be non-empty without surrounding whitespace",
                self.surface
            )));
        }
        if self.oversample_multiplier.is_nan() || self.oversample_multiplier < 1.0 {
            return Err(SegmentError::Config(format!(
                "oversample_multiplier for {:?} must be >= 1",
                self.surface
            )));
        }
        Ok(())
    }

    /// Number of pairs this connective may contribute.
    pub fn quota(&self, cap: usize) -> usize {
        (cap as f64 * self.oversample_multiplier).round() as usize
    }
}

pub fn load_lexicon(path: &Path) -> Result<Vec<ConjunctionEntry>, SegmentError> {
    let err = |message: String| SegmentError::Lexicon {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let entries: Vec<ConjunctionEntry> =
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    for e in &entries {
        e.validate()?;
    }
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    pub min_split_offset: usize,
    pub max_split_offset: usize,
    pub max_completion_chars: usize,
    pub per_conjunction_cap: usize,
    pub min_corpus_frequency: u64,
    pub seed: u64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            min_split_offset: 50,
            max_split_offset: 250,
            max_completion_chars: 150,
            per_conjunction_cap: 4000,
            min_corpus_frequency: 500,
            seed: 0,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<(), SegmentError> {
        if self.min_split_offset == 0 || self.min_split_offset >= self.max_split_offset {
            return Err(SegmentError::Config(
                "require 0 < min_split_offset < max_split_offset".into(),
            ));
        }
        if self.max_completion_chars == 0 {
            return Err(SegmentError::Config("max_completion_chars must be > 0".into()));
        }
        if self.per_conjunction_cap == 0 {
            return Err(SegmentError::Config("per_conjunction_cap must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceCompletionPair {
    pub pair_id: String,
    pub prefix: String,
    pub completion: String,
    pub conjunction: String,
    pub source_id: String,
    pub doc_id: String,
}

impl SentenceCompletionPair {
    pub fn new(
        prefix: String,
        completion: String,
        conjunction: String,
        source_id: String,
        doc_id: String,
    ) -> Self {
        let pair_id = short_id(&[&source_id, &doc_id, &prefix, &conjunction, &completion]);
        SentenceCompletionPair {
            pair_id,
            prefix,
            completion,
            conjunction,
            source_id,
            doc_id,
        }
    }

    /// Prefix, separator and completion joined back together.
    pub fn reconstruct(&self) -> String {
        let mut s = String::with_capacity(self.prefix.len() + 1 + self.completion.len());
        s.push_str(&self.prefix);
        s.push(SEPARATOR);
        s.push_str(&self.completion);
        s
    }
}

/// Characters that belong to a word: letters, digits, combining marks and the
/// zero-width (non-)joiners used inside Persian words.
fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
        || matches!(c,
            '\u{200C}' | '\u{200D}' | '_'
            | '\u{0300}'..='\u{036F}'
            | '\u{0610}'..='\u{061A}'
            | '\u{064B}'..='\u{065F}'
            | '\u{0670}'
            | '\u{06D6}'..='\u{06ED}')
}

fn is_sentence_end(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '؟' | '…' | '。')
}

/// A word-bounded occurrence of a connective, in character offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Occurrence {
    pub lexicon_index: usize,
    pub char_start: usize,
    pub char_len: usize,
    byte_start: usize,
    byte_end: usize,
}

/// Paragraph text with a byte-to-char offset table.
struct Indexed<'a> {
    text: &'a str,
    /// char index -> byte offset; one extra entry for the end.
    char_bytes: Vec<usize>,
}

impl<'a> Indexed<'a> {
    fn new(text: &'a str) -> Self {
        let mut char_bytes: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
        char_bytes.push(text.len());
        Indexed { text, char_bytes }
    }

    fn char_at_byte(&self, byte: usize) -> usize {
        self.char_bytes.binary_search(&byte).unwrap()
    }

    fn occurrences(&self, surface: &str, lexicon_index: usize) -> Vec<Occurrence> {
        let surface_chars = surface.chars().count();
        let mut out = Vec::new();
        for (byte_start, m) in self.text.match_indices(surface) {
            let byte_end = byte_start + m.len();
            let before_ok = self.text[..byte_start]
                .chars()
                .next_back()
                .is_none_or(|c| !is_word_char(c));
            let after_ok = self.text[byte_end..]
                .chars()
                .next()
                .is_none_or(|c| !is_word_char(c));
            if before_ok && after_ok {
                out.push(Occurrence {
                    lexicon_index,
                    char_start: self.char_at_byte(byte_start),
                    char_len: surface_chars,
                    byte_start,
                    byte_end,
                });
            }
        }
        out
    }
}

/// Count word-bounded occurrences of `surface` in `text`.
pub fn count_occurrences(text: &str, surface: &str) -> usize {
    Indexed::new(text).occurrences(surface, 0).len()
}

/// Keep lexicon entries whose corpus frequency reaches the floor, annotating
/// each with its count.
pub fn build_lexicon(
    raw_entries: &[ConjunctionEntry],
    corpus: &[Paragraph],
    config: &SegmentationConfig,
) -> Result<Vec<ConjunctionEntry>, SegmentError> {
    if raw_entries.is_empty() {
        return Err(SegmentError::Config("lexicon is empty".into()));
    }
    for e in raw_entries {
        e.validate()?;
    }
    let counts: Vec<u64> = raw_entries
        .par_iter()
        .map(|e| {
            corpus
                .iter()
                .map(|p| count_occurrences(&p.text, &e.surface) as u64)
                .sum()
        })
        .collect();
    let kept: Vec<ConjunctionEntry> = raw_entries
        .iter()
        .zip(counts)
        .filter(|(_, n)| *n >= config.min_corpus_frequency)
        .map(|(e, n)| ConjunctionEntry {
            frequency: Some(n),
            ..e.clone()
        })
        .collect();
    if kept.is_empty() {
        return Err(SegmentError::EmptyLexicon(config.min_corpus_frequency));
    }
    Ok(kept)
}

/// End (exclusive byte offset) of the sentence that continues from `from`.
fn sentence_end(text: &str, from: usize) -> usize {
    let rest = &text[from..];
    let mut iter = rest.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if is_sentence_end(c) {
            // absorb runs like "?!" or "..."
            let mut end = i + c.len_utf8();
            while let Some(&(j, d)) = iter.peek() {
                if is_sentence_end(d) {
                    end = j + d.len_utf8();
                    iter.next();
                } else {
                    break;
                }
            }
            match iter.peek() {
                None => return from + end,
                Some(&(_, d)) if d.is_whitespace() => return from + end,
                _ => {}
            }
        }
    }
    text.len()
}

/// Try to split one paragraph. Occurrences are scanned leftmost first (ties
/// go to the longer surface); the first whose trailing clause is non-empty and
/// shorter than `max_completion_chars` wins.
pub fn segment_paragraph(
    p: &Paragraph,
    lexicon: &[ConjunctionEntry],
    config: &SegmentationConfig,
) -> Option<SentenceCompletionPair> {
    let indexed = Indexed::new(&p.text);
    let mut occ: Vec<Occurrence> = lexicon
        .iter()
        .enumerate()
        .flat_map(|(i, e)| indexed.occurrences(&e.surface, i))
        .filter(|o| o.char_start >= config.min_split_offset && o.char_start <= config.max_split_offset)
        .collect();
    occ.sort_by(|a, b| {
        a.char_start
            .cmp(&b.char_start)
            .then(b.char_len.cmp(&a.char_len))
            .then(a.lexicon_index.cmp(&b.lexicon_index))
    });

    for o in occ {
        let rest = &p.text[o.byte_end..];
        if !rest.starts_with(SEPARATOR) {
            continue;
        }
        let start = o.byte_end + SEPARATOR.len_utf8();
        let end = sentence_end(&p.text, start);
        let completion = &p.text[start..end];
        let completion_chars = completion.chars().count();
        if completion_chars == 0 || completion_chars >= config.max_completion_chars {
            continue;
        }
        return Some(SentenceCompletionPair::new(
            p.text[..o.byte_end].to_string(),
            completion.to_string(),
            lexicon[o.lexicon_index].surface.clone(),
            p.source_id.clone(),
            p.doc_id.clone(),
        ));
    }
    None
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConjunctionCount {
    pub found: usize,
    pub quota: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub paragraphs: usize,
    pub unsplittable: usize,
    pub per_conjunction: BTreeMap<String, ConjunctionCount>,
    pub total_pairs: usize,
}

/// Segment every paragraph and cap each connective at
/// `round(per_conjunction_cap * oversample_multiplier)` by seeded sampling.
///
/// Output is grouped in lexicon order, input order within a group.
pub fn extract_pairs(
    corpus: &[Paragraph],
    lexicon: &[ConjunctionEntry],
    config: &SegmentationConfig,
) -> Result<(Vec<SentenceCompletionPair>, SegmentReport), SegmentError> {
    config.validate()?;
    let found: Vec<Option<SentenceCompletionPair>> = corpus
        .par_iter()
        .map(|p| segment_paragraph(p, lexicon, config))
        .collect();

    let mut report = SegmentReport {
        paragraphs: corpus.len(),
        ..Default::default()
    };
    let mut groups: BTreeMap<&str, Vec<SentenceCompletionPair>> = BTreeMap::new();
    for pair in found {
        match pair {
            Some(pair) => {
                let surface = lexicon
                    .iter()
                    .find(|e| e.surface == pair.conjunction)
                    .map(|e| e.surface.as_str())
                    .unwrap();
                groups.entry(surface).or_default().push(pair);
            }
            None => report.unsplittable += 1,
        }
    }

    let mut out = Vec::new();
    for entry in lexicon {
        let group = groups.remove(entry.surface.as_str()).unwrap_or_default();
        let quota = entry.quota(config.per_conjunction_cap);
        let found = group.len();
        let kept: Vec<SentenceCompletionPair> = if found <= quota {
            group
        } else {
            let mut rng = rng_for(config.seed, &["segment-cap", &entry.surface]);
            let mut chosen = index::sample(&mut rng, found, quota).into_vec();
            chosen.sort_unstable();
            let mut group: Vec<Option<SentenceCompletionPair>> =
                group.into_iter().map(Some).collect();
            chosen.into_iter().map(|i| group[i].take().unwrap()).collect()
        };
        report.per_conjunction.insert(
            entry.surface.clone(),
            ConjunctionCount {
                found,
                quota,
                kept: kept.len(),
            },
        );
        out.extend(kept);
    }
    report.total_pairs = out.len();
    Ok((out, report))
}
