use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distractor::MCQItem;
use crate::eval::Tokenizer;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub n_items: usize,
    pub mean_prefix_chars: f64,
    /// Mean over items of the mean option length within each item.
    pub mean_completion_chars: f64,
    pub mean_prefix_tokens: f64,
    pub mean_completion_tokens: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub malformed_rows: usize,
    pub overall: SplitStats,
    pub per_split: BTreeMap<String, SplitStats>,
}

fn chars(s: &str) -> f64 {
    s.chars().count() as f64
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn split_stats(items: &[&MCQItem], tokenizer: &dyn Tokenizer) -> SplitStats {
    let per_item = |f: &dyn Fn(&str) -> f64| -> f64 {
        mean(items.iter().map(|i| mean(i.options.iter().map(|o| f(o)))))
    };
    SplitStats {
        n_items: items.len(),
        mean_prefix_chars: mean(items.iter().map(|i| chars(&i.prefix))),
        mean_completion_chars: per_item(&chars),
        mean_prefix_tokens: mean(items.iter().map(|i| tokenizer.count(&i.prefix) as f64)),
        mean_completion_tokens: per_item(&|o| tokenizer.count(o) as f64),
    }
}

fn well_formed(item: &MCQItem) -> bool {
    item.options.len() == 4 && item.gold_index < 4
}

/// Statistics over a dataset JSONL file; rows that fail to parse or are
/// not 4-option items are counted and excluded.
pub fn compute_stats(path: &Path, tokenizer: &dyn Tokenizer) -> std::io::Result<DatasetStats> {
    let file = std::fs::File::open(path)?;
    let mut items = Vec::new();
    let mut malformed = 0;
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<MCQItem>(&line) {
            Ok(item) if well_formed(&item) => items.push(item),
            _ => malformed += 1,
        }
    }
    Ok(stats_of(&items, malformed, tokenizer))
}

pub fn stats_of(items: &[MCQItem], malformed_rows: usize, tokenizer: &dyn Tokenizer) -> DatasetStats {
    let mut groups: BTreeMap<String, Vec<&MCQItem>> = BTreeMap::new();
    for item in items {
        let key = item.split.map(|s| s.as_str()).unwrap_or("unassigned");
        groups.entry(key.to_string()).or_default().push(item);
    }
    let all: Vec<&MCQItem> = items.iter().collect();
    DatasetStats {
        malformed_rows,
        overall: split_stats(&all, tokenizer),
        per_split: groups
            .into_iter()
            .map(|(k, v)| (k, split_stats(&v, tokenizer)))
            .collect(),
    }
}
