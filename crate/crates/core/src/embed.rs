//! Embedding providers and the on-disk embedding cache.
//!
//! Cache layout, one directory per (provider, model):
//!
//! ```text
//! <cache_root>/<provider>/<model>/vectors.f32   little-endian f32 rows, append-only
//! <cache_root>/<provider>/<model>/index.json    {provider, model_name, dimension, rows: {text_hash: row}}
//! ```
//!
//! Rows past the last index write are ignored on reopen and get re-requested.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::info;

use crate::client::{embeddings_body, parse_embeddings, ClientError, HttpEndpoint, RetryPolicy};
use crate::hash::TextHash;
use crate::segment::{SentenceCompletionPair, SEPARATOR};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding provider failed for {} texts (first: {}): {error}", .failed.len(), .failed.first().map(|h| h.to_hex()).unwrap_or_default())]
    Provider { failed: Vec<TextHash>, error: ClientError },
    #[error("dimension mismatch: cache holds {expected}-d vectors, provider returned {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot embed an empty text")]
    EmptyText,
    #[error("provider returned a zero or non-finite vector")]
    Degenerate,
    #[error("embedding cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("invalid provider config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub model_name: String,
    pub batch_size: usize,
    pub max_parallel_requests: usize,
    pub mock_mode: bool,
    pub mock_dimension: usize,
    pub api_key_env: String,
    pub retry_limit: u32,
    pub timeout_seconds: f64,
    pub backoff_base_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            endpoint: "https://api.openai.com/v1".into(),
            model_name: "text-embedding-3-small".into(),
            batch_size: 64,
            max_parallel_requests: 4,
            mock_mode: false,
            mock_dimension: 64,
            api_key_env: "EMBEDDING_API_KEY".into(),
            retry_limit: 3,
            timeout_seconds: 60.0,
            backoff_base_ms: 500,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.batch_size < 1 {
            return Err(EmbedError::Config("batch_size must be >= 1".into()));
        }
        if self.max_parallel_requests < 1 {
            return Err(EmbedError::Config("max_parallel_requests must be >= 1".into()));
        }
        if self.mock_mode && self.mock_dimension < 2 {
            return Err(EmbedError::Config("mock_dimension must be >= 2".into()));
        }
        Ok(())
    }

    /// The provider this config describes.
    pub fn provider(&self) -> Box<dyn EmbeddingProvider> {
        if self.mock_mode {
            Box::new(MockProvider::new(self.mock_dimension))
        } else {
            Box::new(OpenAiEmbeddings::new(
                HttpEndpoint::new(
                    &self.endpoint,
                    Some(&self.api_key_env),
                    Duration::from_secs_f64(self.timeout_seconds),
                ),
                &self.model_name,
            ))
        }
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn model(&self) -> &str;
    /// One request for one batch; no retries.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ClientError>;
}

/// Deterministic pseudo-random unit vector seeded by the text's content hash.
pub fn mock_embed(text: &str, dimension: usize) -> Vec<f32> {
    assert!(dimension >= 2, "mock dimension must be >= 2");
    let mut rng = ChaCha8Rng::seed_from_u64(TextHash::of(text).seed());
    loop {
        let mut v: Vec<f32> = (0..dimension)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g as f32
            })
            .collect();
        if normalize(&mut v).is_ok() {
            return v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockProvider {
    name: String,
    dimension: usize,
}

impl MockProvider {
    pub fn new(dimension: usize) -> Self {
        MockProvider {
            name: format!("mock-{dimension}"),
            dimension,
        }
    }
}

impl EmbeddingProvider for MockProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn model(&self) -> &str {
        &self.name
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ClientError> {
        Ok(texts.iter().map(|t| mock_embed(t, self.dimension)).collect())
    }
}

/// Client for an OpenAI-compatible `/embeddings` endpoint.
#[derive(Debug, Clone)]
pub struct OpenAiEmbeddings {
    endpoint: HttpEndpoint,
    model: String,
}

impl OpenAiEmbeddings {
    pub fn new(endpoint: HttpEndpoint, model: &str) -> Self {
        OpenAiEmbeddings {
            endpoint,
            model: model.to_string(),
        }
    }
}

impl EmbeddingProvider for OpenAiEmbeddings {
    fn name(&self) -> &str {
        "openai-compatible"
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ClientError> {
        let resp = self
            .endpoint
            .post_json("embeddings", &embeddings_body(&self.model, texts))?;
        parse_embeddings(&resp, texts.len())
    }
}

/// Scale `v` to unit L2 norm, accumulating in f64.
pub fn normalize(v: &mut [f32]) -> Result<(), EmbedError> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(EmbedError::Degenerate);
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    Ok(())
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub text_hash: TextHash,
    pub provider: String,
    pub model_name: String,
    pub vector: Vec<f32>,
    pub normalized: bool,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    provider: String,
    model_name: String,
    dimension: Option<usize>,
    rows: BTreeMap<TextHash, usize>,
}

struct StoreData {
    dimension: Option<usize>,
    rows: HashMap<TextHash, usize>,
    vectors: Vec<f32>,
}

/// Anything that can hand out a vector for a text.
pub trait VectorLookup: Send + Sync {
    fn vector(&self, text: &str) -> Option<Vec<f32>>;
}

impl<T: VectorLookup + ?Sized> VectorLookup for &T {
    fn vector(&self, text: &str) -> Option<Vec<f32>> {
        (**self).vector(text)
    }
}

impl VectorLookup for HashMap<String, Vec<f32>> {
    fn vector(&self, text: &str) -> Option<Vec<f32>> {
        self.get(text).cloned()
    }
}

/// Content-addressed embedding cache for one (provider, model).
pub struct EmbeddingStore {
    dir: PathBuf,
    provider: String,
    model: String,
    data: RwLock<StoreData>,
    writer: Mutex<File>,
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

impl EmbeddingStore {
    /// Directory holding the store for one (provider, model).
    pub fn dir_for(root: &Path, provider: &str, model: &str) -> PathBuf {
        root.join(sanitize(provider)).join(sanitize(model))
    }

    pub fn open(root: &Path, provider: &str, model: &str) -> Result<Self, EmbedError> {
        let dir = Self::dir_for(root, provider, model);
        let cache_err = |e: std::io::Error| EmbedError::Cache {
            path: dir.clone(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(&dir).map_err(cache_err)?;
        let index_path = dir.join("index.json");
        let vec_path = dir.join("vectors.f32");

        let (dimension, rows) = if index_path.exists() {
            let text = std::fs::read_to_string(&index_path).map_err(cache_err)?;
            let idx: IndexFile = serde_json::from_str(&text).map_err(|e| EmbedError::Cache {
                path: index_path.clone(),
                message: e.to_string(),
            })?;
            (idx.dimension, idx.rows.into_iter().collect::<HashMap<_, _>>())
        } else {
            (None, HashMap::new())
        };

        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(&vec_path)
            .map_err(cache_err)?;
        let n_rows = rows.len();
        let floats = dimension.unwrap_or(0) * n_rows;
        let mut bytes = vec![0u8; floats * 4];
        file.read_exact(&mut bytes).map_err(|e| EmbedError::Cache {
            path: vec_path.clone(),
            message: format!("truncated vector file: {e}"),
        })?;
        // drop rows written after the last index flush
        file.set_len((floats * 4) as u64).map_err(cache_err)?;
        file.seek(SeekFrom::End(0)).map_err(cache_err)?;
        let vectors = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        Ok(EmbeddingStore {
            dir,
            provider: provider.to_string(),
            model: model.to_string(),
            data: RwLock::new(StoreData {
                dimension,
                rows,
                vectors,
            }),
            writer: Mutex::new(file),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn dimension(&self) -> Option<usize> {
        self.data.read().unwrap().dimension
    }

    pub fn len(&self) -> usize {
        self.data.read().unwrap().rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, hash: &TextHash) -> bool {
        self.data.read().unwrap().rows.contains_key(hash)
    }

    pub fn get(&self, hash: &TextHash) -> Option<Vec<f32>> {
        let data = self.data.read().unwrap();
        let row = *data.rows.get(hash)?;
        let d = data.dimension?;
        Some(data.vectors[row * d..(row + 1) * d].to_vec())
    }

    pub fn record(&self, hash: &TextHash) -> Option<EmbeddingRecord> {
        self.get(hash).map(|vector| EmbeddingRecord {
            text_hash: *hash,
            provider: self.provider.clone(),
            model_name: self.model.clone(),
            vector,
            normalized: true,
        })
    }

    /// Append vectors. Already-present hashes are ignored.
    pub fn insert(&self, items: &[(TextHash, Vec<f32>)]) -> Result<(), EmbedError> {
        let mut data = self.data.write().unwrap();
        let mut writer = self.writer.lock().unwrap();
        let mut buf = Vec::new();
        for (hash, v) in items {
            if data.rows.contains_key(hash) {
                continue;
            }
            match data.dimension {
                Some(d) if d != v.len() => {
                    return Err(EmbedError::DimensionMismatch {
                        expected: d,
                        got: v.len(),
                    })
                }
                None => data.dimension = Some(v.len()),
                _ => {}
            }
            let row = data.rows.len();
            data.rows.insert(*hash, row);
            data.vectors.extend_from_slice(v);
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        writer.write_all(&buf).map_err(|e| EmbedError::Cache {
            path: self.dir.clone(),
            message: e.to_string(),
        })?;
        Ok(())
    }

    /// Persist the index sidecar atomically.
    pub fn flush(&self) -> Result<(), EmbedError> {
        let data = self.data.read().unwrap();
        self.writer
            .lock()
            .unwrap()
            .sync_data()
            .map_err(|e| EmbedError::Cache {
                path: self.dir.clone(),
                message: e.to_string(),
            })?;
        let idx = IndexFile {
            provider: self.provider.clone(),
            model_name: self.model.clone(),
            dimension: data.dimension,
            rows: data.rows.iter().map(|(h, r)| (*h, *r)).collect(),
        };
        let tmp = self.dir.join("index.json.tmp");
        let write = || -> std::io::Result<()> {
            std::fs::write(&tmp, serde_json::to_vec(&idx)?)?;
            std::fs::rename(&tmp, self.dir.join("index.json"))
        };
        write().map_err(|e| EmbedError::Cache {
            path: self.dir.clone(),
            message: e.to_string(),
        })
    }
}

impl VectorLookup for EmbeddingStore {
    fn vector(&self, text: &str) -> Option<Vec<f32>> {
        self.get(&TextHash::of(text))
    }
}

/// Embed `texts` in order, consulting the cache first and batching the rest.
///
/// Every vector is unit-normalized before it is cached. Batches run in waves
/// of `max_parallel_requests` and are appended in batch order, so the cache
/// bytes do not depend on scheduling.
pub fn embed_texts<S: AsRef<str> + Sync>(
    texts: &[S],
    provider: &dyn EmbeddingProvider,
    store: &EmbeddingStore,
    cfg: &ProviderConfig,
) -> Result<Vec<EmbeddingRecord>, EmbedError> {
    cfg.validate()?;
    if texts.iter().any(|t| t.as_ref().is_empty()) {
        return Err(EmbedError::EmptyText);
    }
    let hashes: Vec<TextHash> = texts.iter().map(|t| TextHash::of(t.as_ref())).collect();

    let mut seen = HashSet::new();
    let missing: Vec<(TextHash, &str)> = hashes
        .iter()
        .zip(texts)
        .filter(|(h, _)| !store.contains(h) && seen.insert(**h))
        .map(|(h, t)| (*h, t.as_ref()))
        .collect();

    if !missing.is_empty() {
        info!(uncached = missing.len(), total = texts.len(), "requesting embeddings");
        let policy = RetryPolicy::new(cfg.retry_limit, cfg.backoff_base_ms);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.max_parallel_requests)
            .build()
            .map_err(|e| EmbedError::Config(e.to_string()))?;
        let batches: Vec<&[(TextHash, &str)]> = missing.chunks(cfg.batch_size).collect();
        let mut failure: Option<(Vec<TextHash>, ClientError)> = None;

        for wave in batches.chunks(cfg.max_parallel_requests) {
            let results: Vec<Result<Vec<Vec<f32>>, ClientError>> = pool.install(|| {
                wave.par_iter()
                    .map(|batch| {
                        let inputs: Vec<&str> = batch.iter().map(|(_, t)| *t).collect();
                        let vecs = policy.run(|| provider.embed_batch(&inputs))?;
                        if vecs.len() != inputs.len() {
                            return Err(ClientError::Protocol(format!(
                                "expected {} vectors, got {}",
                                inputs.len(),
                                vecs.len()
                            )));
                        }
                        Ok(vecs)
                    })
                    .collect()
            });
            let mut ready = Vec::new();
            for (batch, result) in wave.iter().zip(results) {
                match result {
                    Ok(vecs) => {
                        for ((hash, _), mut v) in batch.iter().zip(vecs) {
                            normalize(&mut v)?;
                            ready.push((*hash, v));
                        }
                    }
                    Err(e) => {
                        let entry = failure.get_or_insert_with(|| (Vec::new(), e));
                        entry.0.extend(batch.iter().map(|(h, _)| *h));
                    }
                }
            }
            store.insert(&ready)?;
        }
        store.flush()?;
        if let Some((failed, error)) = failure {
            return Err(EmbedError::Provider { failed, error });
        }
    }

    hashes
        .iter()
        .map(|h| {
            store.record(h).ok_or_else(|| EmbedError::Cache {
                path: store.dir.clone(),
                message: format!("vector for {h} missing after embedding"),
            })
        })
        .collect()
}

/// Embeddings for one pair: prefix (x), completion (y) and prefix joined to
/// its gold completion (z).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTriple {
    pub pair_id: String,
    pub x: Vec<f32>,
    pub y: Vec<f32>,
    pub z: Vec<f32>,
    pub x_hash: TextHash,
    pub y_hash: TextHash,
    pub z_hash: TextHash,
}

impl EmbeddingTriple {
    pub fn dimension(&self) -> usize {
        self.y.len()
    }
}

/// The text embedded as `z` for a pair.
pub fn joined_text(pair: &SentenceCompletionPair) -> String {
    pair.reconstruct()
}

/// The three texts embedded per pair, in (x, y, z) order.
pub fn triple_texts(pair: &SentenceCompletionPair) -> [String; 3] {
    debug_assert_eq!(joined_text(pair), format!("{}{SEPARATOR}{}", pair.prefix, pair.completion));
    [pair.prefix.clone(), pair.completion.clone(), joined_text(pair)]
}

pub fn build_triples(
    pairs: &[SentenceCompletionPair],
    provider: &dyn EmbeddingProvider,
    store: &EmbeddingStore,
    cfg: &ProviderConfig,
) -> Result<Vec<EmbeddingTriple>, EmbedError> {
    let texts: Vec<String> = pairs.iter().flat_map(triple_texts).collect();
    let records = embed_texts(&texts, provider, store, cfg)?;
    Ok(pairs
        .iter()
        .zip(records.chunks_exact(3))
        .map(|(p, r)| EmbeddingTriple {
            pair_id: p.pair_id.clone(),
            x: r[0].vector.clone(),
            y: r[1].vector.clone(),
            z: r[2].vector.clone(),
            x_hash: r[0].text_hash,
            y_hash: r[1].text_hash,
            z_hash: r[2].text_hash,
        })
        .collect())
}

/// Rebuild triples purely from the cache; fails if anything is missing.
pub fn triples_from_cache(
    pairs: &[SentenceCompletionPair],
    store: &EmbeddingStore,
) -> Result<Vec<EmbeddingTriple>, EmbedError> {
    pairs
        .iter()
        .map(|p| {
            let [xt, yt, zt] = triple_texts(p);
            let (xh, yh, zh) = (TextHash::of(&xt), TextHash::of(&yt), TextHash::of(&zt));
            let get = |h: &TextHash| {
                store.get(h).ok_or_else(|| EmbeddingStore::missing(store, h, &p.pair_id))
            };
            Ok(EmbeddingTriple {
                pair_id: p.pair_id.clone(),
                x: get(&xh)?,
                y: get(&yh)?,
                z: get(&zh)?,
                x_hash: xh,
                y_hash: yh,
                z_hash: zh,
            })
        })
        .collect()
}

impl EmbeddingStore {
    fn missing(&self, hash: &TextHash, pair_id: &str) -> EmbedError {
        EmbedError::Cache {
            path: self.dir.clone(),
            message: format!("no cached vector {hash} for pair {pair_id}; run the embed stage"),
        }
    }
}
