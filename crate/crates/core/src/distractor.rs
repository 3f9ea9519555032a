//! Distractor ranking and multiple-choice item assembly.
//!
//! Candidate `j` is scored for query pair `i` as
//! `alpha * cos(x_i, y_j) + beta * cos(y_i, y_j) + (1 - alpha - beta) * cos(z_i, y_j)`.
//! With unit vectors that is a single dot product between `y_j` and the
//! combined query `alpha * x_i + beta * y_i + (1 - alpha - beta) * z_i`, so
//! ranking the whole pool is one matrix-vector product per query.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{l2_norm, EmbeddingTriple};
use crate::hash::derive_seed;
use crate::segment::SentenceCompletionPair;

const UNIT_TOLERANCE: f64 = 1e-5;
/// Pool rows scored per tile in the blocked product.
const ROW_TILE: usize = 256;
/// Queries scored together against one tile.
const QUERY_TILE: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum DistractorError {
    #[error("scoring weights ({alpha}, {beta}) are off the simplex")]
    OffSimplex { alpha: f64, beta: f64 },
    #[error("invalid window: {0}")]
    Window(String),
    #[error("candidate pool: {0}")]
    Pool(String),
    #[error("need {needed} ranked candidates but only {available} are available")]
    InsufficientCandidates { needed: usize, available: usize },
    #[error("distractor {0:?} repeats the gold completion")]
    GoldDuplicate(String),
    #[error("distractor texts are not pairwise distinct")]
    DuplicateOptions,
    #[error("expected {expected} distractors, got {got}")]
    DistractorCount { expected: usize, got: usize },
    #[error("triples are not aligned with pairs at position {0}")]
    Misaligned(usize),
    #[error("split proportions must be non-negative and sum to 1 (got {0})")]
    Splits(f64),
}

/// Mixture weights of the three similarity terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringParams {
    pub alpha: f64,
    pub beta: f64,
}

impl ScoringParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, DistractorError> {
        let ok = alpha.is_finite()
            && beta.is_finite()
            && alpha >= 0.0
            && beta >= 0.0
            && alpha + beta <= 1.0 + 1e-12;
        if ok {
            Ok(ScoringParams { alpha, beta })
        } else {
            Err(DistractorError::OffSimplex { alpha, beta })
        }
    }

    /// Map the unit square onto the simplex: `alpha = u`, `beta = v * (1 - u)`.
    pub fn from_unit_square(u: f64, v: f64) -> Self {
        let u = u.clamp(0.0, 1.0);
        let v = v.clamp(0.0, 1.0);
        ScoringParams {
            alpha: u,
            beta: v * (1.0 - u),
        }
    }

    /// Weight of the prefix-plus-gold term.
    pub fn z_weight(&self) -> f64 {
        (1.0 - self.alpha - self.beta).max(0.0)
    }

    pub fn validate(&self) -> Result<(), DistractorError> {
        Self::new(self.alpha, self.beta).map(|_| ())
    }
}

impl Default for ScoringParams {
    fn default() -> Self {
        ScoringParams {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
        }
    }
}

/// Which ranks distractors are drawn from: drop the best `skip`, then draw
/// `n_distractors` uniformly from the next `window`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    pub skip: usize,
    pub window: usize,
    pub n_distractors: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            skip: 0,
            window: 20,
            n_distractors: 3,
        }
    }
}

impl WindowSpec {
    pub fn new(skip: usize, window: usize) -> Self {
        WindowSpec {
            skip,
            window,
            ..Default::default()
        }
    }

    pub fn needed(&self) -> usize {
        self.skip + self.window
    }

    pub fn validate(&self) -> Result<(), DistractorError> {
        if self.n_distractors != 3 {
            return Err(DistractorError::Window("n_distractors must be 3".into()));
        }
        if self.window < 3 || self.window < self.n_distractors {
            return Err(DistractorError::Window(format!(
                "window {} is smaller than the {} draws",
                self.window, self.n_distractors
            )));
        }
        Ok(())
    }

    pub fn validate_for_pool(&self, pool_size: usize) -> Result<(), DistractorError> {
        self.validate()?;
        if self.needed() + 1 > pool_size {
            return Err(DistractorError::Window(format!(
                "skip + window = {} needs a pool of at least {}, have {pool_size}",
                self.needed(),
                self.needed() + 1
            )));
        }
        Ok(())
    }
}

/// Every pair's gold completion, as unit vectors in one row-major matrix.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    ids: Vec<String>,
    texts: Vec<String>,
    matrix: Vec<f32>,
    dim: usize,
    index: HashMap<String, usize>,
}

impl CandidatePool {
    pub fn new(ids: Vec<String>, texts: Vec<String>, rows: Vec<Vec<f32>>) -> Result<Self, DistractorError> {
        if ids.len() != rows.len() || ids.len() != texts.len() {
            return Err(DistractorError::Pool("ids, texts and rows differ in length".into()));
        }
        if ids.len() < 4 {
            return Err(DistractorError::Pool(format!(
                "need at least 4 candidates, have {}",
                ids.len()
            )));
        }
        let dim = rows[0].len();
        let mut matrix = Vec::with_capacity(dim * rows.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(DistractorError::Pool(format!("row {i} has dimension {}", r.len())));
            }
            if (l2_norm(r) - 1.0).abs() > UNIT_TOLERANCE {
                return Err(DistractorError::Pool(format!("row {i} is not unit-norm")));
            }
            matrix.extend_from_slice(r);
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(DistractorError::Pool(format!("duplicate pair id {id}")));
            }
        }
        Ok(CandidatePool {
            ids,
            texts,
            matrix,
            dim,
            index,
        })
    }

    /// Pool of gold completions for `pairs`, with `triples` aligned by position.
    pub fn from_pairs(
        pairs: &[SentenceCompletionPair],
        triples: &[EmbeddingTriple],
    ) -> Result<Self, DistractorError> {
        check_alignment(pairs, triples)?;
        CandidatePool::new(
            pairs.iter().map(|p| p.pair_id.clone()).collect(),
            pairs.iter().map(|p| p.completion.clone()).collect(),
            triples.iter().map(|t| t.y.clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn text(&self, i: usize) -> &str {
        &self.texts[i]
    }

    pub fn position(&self, pair_id: &str) -> Option<usize> {
        self.index.get(pair_id).copied()
    }
}

fn check_alignment(
    pairs: &[SentenceCompletionPair],
    triples: &[EmbeddingTriple],
) -> Result<(), DistractorError> {
    if pairs.len() != triples.len() {
        return Err(DistractorError::Misaligned(pairs.len().min(triples.len())));
    }
    match pairs.iter().zip(triples).position(|(p, t)| p.pair_id != t.pair_id) {
        Some(i) => Err(DistractorError::Misaligned(i)),
        None => Ok(()),
    }
}

/// f32 storage, f64 accumulation.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `alpha * x + beta * y + (1 - alpha - beta) * z`, not re-normalized.
pub fn combined_query(triple: &EmbeddingTriple, params: &ScoringParams) -> Result<Vec<f32>, DistractorError> {
    params.validate()?;
    let (a, b, c) = (params.alpha, params.beta, params.z_weight());
    Ok(triple
        .x
        .iter()
        .zip(&triple.y)
        .zip(&triple.z)
        .map(|((&x, &y), &z)| (a * x as f64 + b * y as f64 + c * z as f64) as f32)
        .collect())
}

/// One ranked candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub pair_id: String,
    pub row: usize,
    pub score: f64,
}

/// Descending score, ties broken by ascending pair id.
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

struct HeapEntry<'a> {
    score: f64,
    id: &'a str,
    row: usize,
}

impl PartialEq for HeapEntry<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry<'_> {}
impl PartialOrd for HeapEntry<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry<'_> {
    // the heap top is the worst-ranked entry
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(self.score, self.id, other.score, other.id)
    }
}

struct TopK<'a> {
    k: usize,
    heap: BinaryHeap<HeapEntry<'a>>,
}

impl<'a> TopK<'a> {
    fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn offer(&mut self, score: f64, id: &'a str, row: usize) {
        if self.k == 0 {
            return;
        }
        let entry = HeapEntry { score, id, row };
        if self.heap.len() < self.k {
            self.heap.push(entry);
        } else if entry < *self.heap.peek().unwrap() {
            self.heap.pop();
            self.heap.push(entry);
        }
    }

    fn into_sorted(self) -> Vec<Ranked> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|e| Ranked {
                pair_id: e.id.to_string(),
                row: e.row,
                score: e.score,
            })
            .collect()
    }
}

/// Exact top-`k` for a batch of queries, each excluding its own row.
///
/// Queries are scored a tile at a time against tiles of pool rows.
pub fn topk_batch(
    queries: &[(&[f32], Option<usize>)],
    pool: &CandidatePool,
    k: usize,
) -> Result<Vec<Vec<Ranked>>, DistractorError> {
    for (q, _) in queries {
        if q.len() != pool.dim {
            return Err(DistractorError::Pool(format!(
                "query dimension {} != pool dimension {}",
                q.len(),
                pool.dim
            )));
        }
    }
    let excludes_own = queries.iter().any(|(_, own)| own.is_some());
    let available = pool.len() - usize::from(excludes_own);
    if k > available {
        return Err(DistractorError::InsufficientCandidates {
            needed: k,
            available,
        });
    }
    Ok(queries
        .par_chunks(QUERY_TILE)
        .flat_map_iter(|chunk| {
            let mut tops: Vec<TopK> = chunk.iter().map(|_| TopK::new(k)).collect();
            for start in (0..pool.len()).step_by(ROW_TILE) {
                let end = (start + ROW_TILE).min(pool.len());
                for ((q, own), top) in chunk.iter().zip(tops.iter_mut()) {
                    for row in start..end {
                        if Some(row) == *own {
                            continue;
                        }
                        top.offer(dot(q, pool.row(row)), &pool.ids[row], row);
                    }
                }
            }
            tops.into_iter().map(TopK::into_sorted)
        })
        .collect())
}

/// Exact top-`k_eff` candidates for one pair, its own completion excluded.
pub fn topk_candidates(
    triple: &EmbeddingTriple,
    params: &ScoringParams,
    pool: &CandidatePool,
    k_eff: usize,
    self_id: &str,
) -> Result<Vec<Ranked>, DistractorError> {
    let q = combined_query(triple, params)?;
    let own = pool.position(self_id);
    let available = pool.len() - usize::from(own.is_some());
    if k_eff > available {
        return Err(DistractorError::InsufficientCandidates {
            needed: k_eff,
            available,
        });
    }
    let mut out = topk_batch(&[(&q, own)], pool, k_eff)?;
    Ok(out.pop().unwrap())
}

/// Drop the first `skip` entries and draw `n_distractors` distinct entries
/// uniformly from the next `window`.
pub fn sample_distractors<T: Clone>(
    ranked: &[T],
    spec: &WindowSpec,
    rng_seed: u64,
) -> Result<Vec<T>, DistractorError> {
    spec.validate()?;
    if ranked.len() < spec.needed() {
        return Err(DistractorError::InsufficientCandidates {
            needed: spec.needed(),
            available: ranked.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let picks = index::sample(&mut rng, spec.window, spec.n_distractors);
    Ok(picks.iter().map(|i| ranked[spec.skip + i].clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// One emitted benchmark row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MCQItem {
    #[serde(rename = "id")]
    pub item_id: String,
    pub prefix: String,
    pub options: Vec<String>,
    /// Zero-based index of the gold option.
    #[serde(rename = "label")]
    pub gold_index: usize,
    pub conjunction: String,
    #[serde(rename = "source")]
    pub source_id: String,
    pub split: Option<Split>,
    #[serde(skip)]
    pub distractor_pair_ids: Vec<String>,
}

impl MCQItem {
    pub fn gold(&self) -> &str {
        &self.options[self.gold_index]
    }
}

/// Build the 4-option item for `pair` and shuffle with the seeded RNG.
/// `distractors` holds (pair_id, text) for the three chosen candidates.
pub fn assemble_item(
    pair: &SentenceCompletionPair,
    distractors: &[(String, String)],
    rng_seed: u64,
) -> Result<MCQItem, DistractorError> {
    if distractors.len() != 3 {
        return Err(DistractorError::DistractorCount {
            expected: 3,
            got: distractors.len(),
        });
    }
    if let Some((_, t)) = distractors.iter().find(|(_, t)| *t == pair.completion) {
        return Err(DistractorError::GoldDuplicate(t.clone()));
    }
    let distinct: HashSet<&str> = distractors.iter().map(|(_, t)| t.as_str()).collect();
    if distinct.len() != 3 {
        return Err(DistractorError::DuplicateOptions);
    }
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    let options = order
        .iter()
        .map(|&k| if k == 0 { pair.completion.clone() } else { distractors[k - 1].1.clone() })
        .collect();
    let gold_index = order.iter().position(|&k| k == 0).unwrap();
    Ok(MCQItem {
        item_id: pair.pair_id.clone(),
        prefix: pair.prefix.clone(),
        options,
        gold_index,
        conjunction: pair.conjunction.clone(),
        source_id: pair.source_id.clone(),
        split: None,
        distractor_pair_ids: distractors.iter().map(|(id, _)| id.clone()).collect(),
    })
}

/// Where an item's distractors came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemProvenance {
    pub id: String,
    pub distractor_pair_ids: Vec<String>,
    /// 1-based ranks after gold and duplicate-text removal.
    pub distractor_ranks: Vec<usize>,
    #[serde(default)]
    pub dev: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub pair_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct BuildOutcome {
    pub items: Vec<MCQItem>,
    pub provenance: Vec<ItemProvenance>,
    pub skipped: Vec<SkippedItem>,
    /// Candidates dropped because their text equals the query's gold text.
    pub gold_text_duplicates: usize,
    /// Candidates dropped because a better-ranked candidate has the same text.
    pub candidate_text_duplicates: usize,
}

struct Windowed {
    /// (rank after filtering, ranked entry)
    ranked: Vec<(usize, Ranked)>,
    gold_dups: usize,
    text_dups: usize,
    exhausted: bool,
}

/// An item with its provenance and the gold / repeated-text drop counts.
type Built = (MCQItem, ItemProvenance, usize, usize);
type Skipped = (SkippedItem, usize, usize);

/// Remove gold-text and repeated-text candidates, keeping rank order.
fn dedup_ranked(ranked: Vec<Ranked>, gold: &str, pool: &CandidatePool, pool_exhausted: bool) -> Windowed {
    let mut seen: HashSet<&str> = HashSet::new();
    let mut out = Vec::new();
    let (mut gold_dups, mut text_dups) = (0, 0);
    for r in ranked {
        let text = pool.text(r.row);
        if text == gold {
            gold_dups += 1;
        } else if !seen.insert(text) {
            text_dups += 1;
        } else {
            out.push((out.len() + 1, r));
        }
    }
    Windowed {
        ranked: out,
        gold_dups,
        text_dups,
        exhausted: pool_exhausted,
    }
}

fn ranked_window(
    q: &[f32],
    own: Option<usize>,
    gold: &str,
    pool: &CandidatePool,
    spec: &WindowSpec,
    first: Option<Vec<Ranked>>,
) -> Result<Windowed, DistractorError> {
    let max_k = pool.len() - 1;
    let mut k = (spec.needed() + 8).min(max_k);
    let mut ranked = match first {
        Some(r) => r,
        None => topk_batch(&[(q, own)], pool, k)?.pop().unwrap(),
    };
    loop {
        let w = dedup_ranked(ranked, gold, pool, k == max_k);
        if w.ranked.len() >= spec.needed() || w.exhausted {
            return Ok(w);
        }
        k = (k * 2).min(max_k);
        ranked = topk_batch(&[(q, own)], pool, k)?.pop().unwrap();
    }
}

/// Map every pair to one item: rank, filter, sample from the window, shuffle.
///
/// RNG streams are derived from `(seed, pair_id)` so the output does not
/// depend on thread scheduling. Pairs that cannot fill their window are
/// skipped and reported.
pub fn build_dataset(
    pairs: &[SentenceCompletionPair],
    triples: &[EmbeddingTriple],
    pool: &CandidatePool,
    params: &ScoringParams,
    spec: &WindowSpec,
    seed: u64,
) -> Result<BuildOutcome, DistractorError> {
    check_alignment(pairs, triples)?;
    params.validate()?;
    spec.validate_for_pool(pool.len())?;

    let queries: Vec<Vec<f32>> = triples
        .par_iter()
        .map(|t| combined_query(t, params))
        .collect::<Result<_, _>>()?;
    let owns: Vec<Option<usize>> = pairs.iter().map(|p| pool.position(&p.pair_id)).collect();
    let k0 = (spec.needed() + 8).min(pool.len() - 1);
    let batch: Vec<(&[f32], Option<usize>)> =
        queries.iter().map(|q| q.as_slice()).zip(owns.iter().copied()).collect();
    let first_pass = topk_batch(&batch, pool, k0)?;

    let results: Vec<Result<Built, Skipped>> = pairs
        .par_iter()
        .zip(first_pass)
        .enumerate()
        .map(|(i, (pair, first))| {
            let w = ranked_window(&queries[i], owns[i], &pair.completion, pool, spec, Some(first))
                .map_err(|e| (skip(pair, e.to_string()), 0, 0))?;
            let (gd, td) = (w.gold_dups, w.text_dups);
            let drawn = sample_distractors(&w.ranked, spec, derive_seed(seed, &["distractors", &pair.pair_id]))
                .map_err(|e| (skip(pair, e.to_string()), gd, td))?;
            let chosen: Vec<(String, String)> = drawn
                .iter()
                .map(|(_, r)| (r.pair_id.clone(), pool.text(r.row).to_string()))
                .collect();
            let item = assemble_item(pair, &chosen, derive_seed(seed, &["options", &pair.pair_id]))
                .map_err(|e| (skip(pair, e.to_string()), gd, td))?;
            let prov = ItemProvenance {
                id: item.item_id.clone(),
                distractor_pair_ids: item.distractor_pair_ids.clone(),
                distractor_ranks: drawn.iter().map(|(rank, _)| *rank).collect(),
                dev: false,
            };
            Ok((item, prov, gd, td))
        })
        .collect();

    let mut out = BuildOutcome::default();
    for r in results {
        match r {
            Ok((item, prov, gd, td)) => {
                out.items.push(item);
                out.provenance.push(prov);
                out.gold_text_duplicates += gd;
                out.candidate_text_duplicates += td;
            }
            Err((skipped, gd, td)) => {
                out.skipped.push(skipped);
                out.gold_text_duplicates += gd;
                out.candidate_text_duplicates += td;
            }
        }
    }
    Ok(out)
}

fn skip(pair: &SentenceCompletionPair, reason: String) -> SkippedItem {
    SkippedItem {
        pair_id: pair.pair_id.clone(),
        reason,
    }
}

/// Train/validation/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitProportions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitProportions {
    fn default() -> Self {
        let total = 106_217.0;
        SplitProportions {
            train: 86_217.0 / total,
            validation: 10_000.0 / total,
            test: 10_000.0 / total,
        }
    }
}

impl SplitProportions {
    pub fn validate(&self) -> Result<(), DistractorError> {
        let sum = self.train + self.validation + self.test;
        if self.train < 0.0 || self.validation < 0.0 || self.test < 0.0 || (sum - 1.0).abs() > 1e-9 {
            return Err(DistractorError::Splits(sum));
        }
        Ok(())
    }

    /// (train, validation, test) counts for `n` items; train takes the rounding slack.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let val = ((n as f64) * self.validation).round() as usize;
        let test = ((n as f64) * self.test).round() as usize;
        let val = val.min(n);
        let test = test.min(n - val);
        (n - val - test, val, test)
    }
}

/// Assign splits by a seeded shuffle of item ids; items keep their order.
pub fn assign_splits(items: &mut [MCQItem], props: &SplitProportions, seed: u64) -> Result<(), DistractorError> {
    props.validate()?;
    let mut ids: Vec<&str> = items.iter().map(|i| i.item_id.as_str()).collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &["splits"])));
    let (train, val, _) = props.counts(items.len());
    let split_of: HashMap<String, Split> = ids
        .iter()
        .enumerate()
        .map(|(pos, id)| {
            let s = if pos < train {
                Split::Train
            } else if pos < train + val {
                Split::Validation
            } else {
                Split::Test
            };
            (id.to_string(), s)
        })
        .collect();
    for item in items.iter_mut() {
        item.split = Some(split_of[&item.item_id]);
    }
    Ok(())
}
