//! Stage-by-stage runner over a run directory.

pub mod config;
pub mod manifest;
pub mod stats;

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::info;

pub use config::{JudgeMode, PipelineConfig};
pub use manifest::{FileHash, RunManifest};

use crate::clock::Clock;
use crate::distractor::{assign_splits, build_dataset, CandidatePool, MCQItem, ScoringParams};
use crate::embed::{build_triples, triples_from_cache, EmbeddingStore, EmbeddingTriple};
use crate::eval::{evaluate_dataset, Answerer, AnswerCache, ChatAnswerer, MockAdversary, PromptTemplate, WhitespaceTokenizer};
use crate::hash::{rng_for, sha256_hex};
use crate::ingest::{ingest, Paragraph};
use crate::jsonl;
use crate::optimize::{load_study, run_study, select_dev_set, trial_report, AdversaryKind, Best, DatasetObjective, Objective};
use crate::segment::{build_lexicon, extract_pairs, load_lexicon, ConjunctionEntry, SentenceCompletionPair};
use crate::validate::{Judge, MockJudge, ValidationReport, VerdictCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Ingest,
    Segment,
    Validate,
    Embed,
    Optimize,
    Build,
    Eval,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Segment,
        Stage::Validate,
        Stage::Embed,
        Stage::Optimize,
        Stage::Build,
        Stage::Eval,
        Stage::Stats,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Segment => "segment",
            Stage::Validate => "validate",
            Stage::Embed => "embed",
            Stage::Optimize => "optimize",
            Stage::Build => "build",
            Stage::Eval => "eval",
            Stage::Stats => "stats",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage}: missing input {missing}; run `{hint}` first")]
    MissingUpstream {
        stage: &'static str,
        missing: String,
        hint: String,
    },
    #[error("run directory is locked by another process ({0}); remove the file if that process is gone")]
    Locked(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    /// 2 for configuration errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Held while a stage runs; removed on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
        let path = run_dir.join(".forge.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(path)),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// Which weights the final build used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub alpha: f64,
    pub beta: f64,
    pub params_from: String,
    pub n_pairs: usize,
    pub n_items: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub n_dev_items: usize,
    pub gold_text_duplicates: usize,
    pub candidate_text_duplicates: usize,
    pub skipped: Vec<crate::distractor::SkippedItem>,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub config_path: PathBuf,
    pub run_dir: PathBuf,
    pub clock: Clock,
}

impl Pipeline {
    /// `cfg` must already be finalized.
    pub fn new(cfg: PipelineConfig, config_path: &Path) -> Self {
        let clock = match cfg.run.timestamp_epoch {
            Some(t) => Clock::Fixed(t),
            None => Clock::from_env(),
        };
        Pipeline {
            run_dir: cfg.run.dir.clone(),
            cfg,
            config_path: config_path.to_path_buf(),
            clock,
        }
    }

    pub fn load(config_path: &Path) -> Result<Self, PipelineError> {
        Ok(Self::new(PipelineConfig::load(config_path)?, config_path))
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(stage.name())
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("manifest.json")
    }

    pub fn pairs_path(&self) -> PathBuf {
        self.stage_dir(Stage::Validate).join("pairs.jsonl")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.stage_dir(Stage::Build).join("dataset.jsonl")
    }

    pub fn study_log_path(&self) -> PathBuf {
        self.stage_dir(Stage::Optimize).join("study.jsonl")
    }

    pub fn best_path(&self) -> PathBuf {
        self.stage_dir(Stage::Optimize).join("best.json")
    }

    fn store_root(&self) -> PathBuf {
        self.stage_dir(Stage::Embed).join("cache")
    }

    fn provider_names(&self) -> (String, String) {
        let p = self.cfg.embeddings.provider();
        (p.name().to_string(), p.model().to_string())
    }

    fn open_store(&self) -> Result<EmbeddingStore, PipelineError> {
        let (provider, model) = self.provider_names();
        EmbeddingStore::open(&self.store_root(), &provider, &model).map_err(|e| PipelineError::Stage {
            stage: "embed",
            message: e.to_string(),
        })
    }

    fn store_files(&self) -> Vec<PathBuf> {
        let (provider, model) = self.provider_names();
        let dir = EmbeddingStore::dir_for(&self.store_root(), &provider, &model);
        vec![dir.join("index.json"), dir.join("vectors.f32")]
    }

    /// Files a stage reads, each with the stage that produces it (None for
    /// user-supplied files).
    fn inputs(&self, stage: Stage) -> Vec<(PathBuf, Option<Stage>)> {
        let up = |s: Stage, f: &str| (self.stage_dir(s).join(f), Some(s));
        let mut v = Vec::new();
        match stage {
            Stage::Ingest => v.extend(self.cfg.corpus.paths.iter().map(|p| (p.clone(), None))),
            Stage::Segment => {
                v.push(up(Stage::Ingest, "paragraphs.jsonl"));
                v.push((self.cfg.corpus.lexicon.clone(), None));
            }
            Stage::Validate => {
                v.push(up(Stage::Segment, "pairs.jsonl"));
                v.push(up(Stage::Segment, "lexicon.json"));
            }
            Stage::Embed => v.push(up(Stage::Validate, "pairs.jsonl")),
            Stage::Optimize => {
                v.push(up(Stage::Validate, "pairs.jsonl"));
                v.extend(self.store_files().into_iter().map(|p| (p, Some(Stage::Embed))));
                if self.cfg.study.adversary == AdversaryKind::Api {
                    v.extend(self.cfg.eval.template.iter().map(|p| (p.clone(), None)));
                }
            }
            Stage::Build => {
                v.push(up(Stage::Validate, "pairs.jsonl"));
                v.extend(self.store_files().into_iter().map(|p| (p, Some(Stage::Embed))));
                if self.cfg.build.params.is_none() {
                    v.push(up(Stage::Optimize, "best.json"));
                }
                if self.study_log_path().exists() {
                    v.push(up(Stage::Optimize, "study.jsonl"));
                }
            }
            Stage::Eval => {
                v.push(up(Stage::Build, "dataset.jsonl"));
                if self.cfg.eval.answerer == AdversaryKind::Mock {
                    v.extend(self.store_files().into_iter().map(|p| (p, Some(Stage::Embed))));
                }
                v.extend(self.cfg.eval.template.iter().map(|p| (p.clone(), None)));
            }
            Stage::Stats => v.push(up(Stage::Build, "dataset.jsonl")),
        }
        v
    }

    fn display_path(&self, p: &Path) -> String {
        p.strip_prefix(&self.run_dir)
            .map(|r| r.display().to_string())
            .unwrap_or_else(|_| p.display().to_string())
    }

    fn hash_files(&self, paths: &[PathBuf]) -> Result<Vec<FileHash>, PipelineError> {
        paths
            .iter()
            .map(|p| FileHash::of(p, self.display_path(p)).map_err(io_err(p)))
            .collect()
    }

    fn check_inputs(&self, stage: Stage) -> Result<Vec<FileHash>, PipelineError> {
        let inputs = self.inputs(stage);
        if stage == Stage::Ingest && inputs.is_empty() {
            return Err(PipelineError::Config("corpus.paths is empty".into()));
        }
        for (path, producer) in &inputs {
            if path.exists() {
                continue;
            }
            return Err(match producer {
                Some(up) => PipelineError::MissingUpstream {
                    stage: stage.name(),
                    missing: path.display().to_string(),
                    hint: format!("forge {} --config {}", up.name(), self.config_path.display()),
                },
                None => PipelineError::Config(format!("{} does not exist", path.display())),
            });
        }
        let paths: Vec<PathBuf> = inputs.into_iter().map(|(p, _)| p).collect();
        self.hash_files(&paths)
    }

    /// The previous manifest, if it still describes the files on disk.
    fn up_to_date(&self, stage: Stage, config_hash: &str, inputs: &[FileHash]) -> Option<RunManifest> {
        let m = RunManifest::read(&self.manifest_path(stage))?;
        if m.config_hash != config_hash || m.tool_version != env!("CARGO_PKG_VERSION") || m.input_hashes != inputs {
            return None;
        }
        for out in &m.output_paths {
            let p = self.run_dir.join(&out.path);
            match crate::hash::sha256_file(&p) {
                Ok(h) if h == out.sha256 => {}
                _ => return None,
            }
        }
        Some(m)
    }

    /// Run one stage, or skip it when its manifest matches the current
    /// config, inputs and outputs.
    pub fn run(&self, stage: Stage) -> Result<RunManifest, PipelineError> {
        let _lock = RunLock::acquire(&self.run_dir)?;
        let config_hash = self.cfg.stage_hash(stage);
        let inputs = self.check_inputs(stage)?;

        if let Some(mut m) = self.up_to_date(stage, &config_hash, &inputs) {
            info!(stage = stage.name(), "outputs up to date, skipping");
            m.skipped = true;
            m.last_checked = Some(self.clock.now());
            m.write(&self.manifest_path(stage)).map_err(io_err(&self.manifest_path(stage)))?;
            return Ok(m);
        }

        let dir = self.stage_dir(stage);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        // a stale manifest must not survive a failed rerun
        let _ = std::fs::remove_file(self.manifest_path(stage));
        let started = self.clock.now();
        info!(stage = stage.name(), "running");
        let fingerprint = sha256_hex(format!("{config_hash}{}", serde_json::to_string(&inputs).unwrap()).as_bytes());
        let outputs = match stage {
            Stage::Ingest => self.run_ingest()?,
            Stage::Segment => self.run_segment()?,
            Stage::Validate => self.run_validate()?,
            Stage::Embed => self.run_embed()?,
            Stage::Optimize => self.run_optimize(&fingerprint)?,
            Stage::Build => self.run_build()?,
            Stage::Eval => self.run_eval()?,
            Stage::Stats => self.run_stats()?,
        };
        let manifest = RunManifest {
            stage: stage.name().into(),
            config_hash,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            input_hashes: inputs,
            output_paths: self.hash_files(&outputs)?,
            started,
            finished: self.clock.now(),
            skipped: false,
            last_checked: None,
        };
        manifest
            .write(&self.manifest_path(stage))
            .map_err(io_err(&self.manifest_path(stage)))?;
        Ok(manifest)
    }

    /// Run stages in order, stopping at the first error.
    pub fn run_all(&self, stages: &[Stage]) -> Result<Vec<RunManifest>, PipelineError> {
        stages.iter().map(|s| self.run(*s)).collect()
    }

    fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<(), PipelineError> {
        let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
        text.push('\n');
        std::fs::write(path, text).map_err(io_err(path))
    }

    fn write_jsonl<T: Serialize>(&self, path: &Path, rows: &[T]) -> Result<(), PipelineError> {
        jsonl::write(path, rows).map_err(io_err(path))
    }

    fn read_jsonl<T: serde::de::DeserializeOwned>(&self, path: &Path) -> Result<Vec<T>, PipelineError> {
        jsonl::read(path).map_err(io_err(path))
    }

    fn run_ingest(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let dir = self.stage_dir(Stage::Ingest);
        let (paragraphs, report) = ingest(&self.cfg.corpus.paths, &self.cfg.ingest).map_err(stage_err("ingest"))?;
        let out = [dir.join("paragraphs.jsonl"), dir.join("report.json")];
        self.write_jsonl(&out[0], &paragraphs)?;
        self.write_json(&out[1], &report)?;
        Ok(out.to_vec())
    }

    fn run_segment(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let dir = self.stage_dir(Stage::Segment);
        let paragraphs: Vec<Paragraph> = self.read_jsonl(&self.stage_dir(Stage::Ingest).join("paragraphs.jsonl"))?;
        let raw = load_lexicon(&self.cfg.corpus.lexicon).map_err(|e| PipelineError::Config(e.to_string()))?;
        let lexicon = build_lexicon(&raw, &paragraphs, &self.cfg.segmentation).map_err(stage_err("segment"))?;
        let (pairs, report) =
            extract_pairs(&paragraphs, &lexicon, &self.cfg.segmentation).map_err(stage_err("segment"))?;
        let out = [dir.join("pairs.jsonl"), dir.join("lexicon.json"), dir.join("report.json")];
        self.write_jsonl(&out[0], &pairs)?;
        self.write_json(&out[1], &lexicon)?;
        self.write_json(&out[2], &report)?;
        Ok(out.to_vec())
    }

    fn run_validate(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let dir = self.stage_dir(Stage::Validate);
        let seg = self.stage_dir(Stage::Segment);
        let pairs: Vec<SentenceCompletionPair> = self.read_jsonl(&seg.join("pairs.jsonl"))?;
        let lexicon: Vec<ConjunctionEntry> = {
            let p = seg.join("lexicon.json");
            let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
            serde_json::from_str(&text).map_err(stage_err("validate"))?
        };
        let out = [dir.join("pairs.jsonl"), dir.join("verdicts.jsonl"), dir.join("report.json")];
        let mode = self.cfg.validate.mode;
        let (kept, verdicts, report) = if mode == JudgeMode::Off {
            let report = ValidationReport {
                judge_model: "off".into(),
                input_pairs: pairs.len(),
                kept_pairs: pairs.len(),
                ..Default::default()
            };
            (pairs, Vec::new(), report)
        } else {
            let mut jcfg = self.cfg.judge_config();
            let client: Arc<dyn crate::client::ChatClient> = if mode == JudgeMode::Mock {
                let rate = self.cfg.validate.mock_reject_rate;
                // keeps mock verdicts apart from real ones in the cache
                jcfg.model_name = format!("mock-judge-{rate}");
                Arc::new(MockJudge { reject_rate: rate })
            } else {
                Arc::new(jcfg.http_client())
            };
            let cache = VerdictCache::open(&dir.join("verdict_cache.jsonl")).map_err(stage_err("validate"))?;
            let judge = Judge::new(client, jcfg, cache).map_err(|e| PipelineError::Config(e.to_string()))?;
            let o = judge.filter_pairs(&pairs, &lexicon).map_err(stage_err("validate"))?;
            (o.kept, o.verdicts, o.report)
        };
        self.write_jsonl(&out[0], &kept)?;
        self.write_jsonl(&out[1], &verdicts)?;
        self.write_json(&out[2], &report)?;
        Ok(out.to_vec())
    }

    fn run_embed(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let dir = self.stage_dir(Stage::Embed);
        let pairs: Vec<SentenceCompletionPair> = self.read_jsonl(&self.pairs_path())?;
        let provider = self.cfg.embeddings.provider();
        let store = self.open_store()?;
        let triples = build_triples(&pairs, provider.as_ref(), &store, &self.cfg.embeddings).map_err(stage_err("embed"))?;
        store.flush().map_err(stage_err("embed"))?;
        let report = json!({
            "provider": provider.name(),
            "model_name": provider.model(),
            "pairs": triples.len(),
            "dimension": store.dimension(),
            "cached_texts": store.len(),
        });
        let report_path = dir.join("report.json");
        self.write_json(&report_path, &report)?;
        let mut out = vec![report_path];
        out.extend(self.store_files());
        Ok(out)
    }

    fn load_embedded(&self) -> Result<(Vec<SentenceCompletionPair>, Vec<EmbeddingTriple>, EmbeddingStore), PipelineError> {
        let pairs: Vec<SentenceCompletionPair> = self.read_jsonl(&self.pairs_path())?;
        let store = self.open_store()?;
        let triples = triples_from_cache(&pairs, &store).map_err(|e| PipelineError::MissingUpstream {
            stage: "embed",
            missing: format!("embeddings ({e})"),
            hint: format!("forge embed --config {}", self.config_path.display()),
        })?;
        Ok((pairs, triples, store))
    }

    fn template(&self) -> Result<PromptTemplate, PipelineError> {
        match &self.cfg.eval.template {
            Some(p) => PromptTemplate::load(p).map_err(|e| PipelineError::Config(e.to_string())),
            None => Ok(PromptTemplate::default()),
        }
    }

    fn answerer<'s>(&self, kind: AdversaryKind, store: &'s EmbeddingStore) -> Box<dyn Answerer + 's> {
        match kind {
            AdversaryKind::Mock => Box::new(MockAdversary::new(store)),
            AdversaryKind::Api => Box::new(ChatAnswerer::from_spec(self.cfg.eval.model.clone())),
        }
    }

    fn run_optimize(&self, fingerprint: &str) -> Result<Vec<PathBuf>, PipelineError> {
        let dir = self.stage_dir(Stage::Optimize);
        let log = self.study_log_path();
        // a study log only resumes under the config and inputs that began it
        let fp_path = dir.join(".fingerprint");
        let previous = std::fs::read_to_string(&fp_path).unwrap_or_default();
        if previous.trim() != fingerprint && log.exists() {
            info!("config or inputs changed, starting a fresh study");
            std::fs::remove_file(&log).map_err(io_err(&log))?;
        }
        std::fs::write(&fp_path, fingerprint).map_err(io_err(&fp_path))?;

        let (pairs, triples, store) = self.load_embedded()?;
        let pool = CandidatePool::from_pairs(&pairs, &triples).map_err(stage_err("optimize"))?;
        let study = &self.cfg.study;
        let dev_ids = select_dev_set(&pairs, study.dev_set_size, study.seed);
        let adversary = self.answerer(study.adversary, &store);
        let mut objective = DatasetObjective::new(
            &dev_ids,
            &pairs,
            &triples,
            &pool,
            study.window,
            study.seed,
            adversary.as_ref(),
            self.cfg.eval.eval_config(),
        )
        .map_err(|e| PipelineError::Config(e.to_string()))?;
        objective.template = self.template()?;
        let state = run_study(&objective as &dyn Objective, dev_ids, study, Some(&log), self.clock)
            .map_err(stage_err("optimize"))?;
        let best: &Best = state.best.as_ref().ok_or_else(|| PipelineError::Stage {
            stage: "optimize",
            message: "no trial completed".into(),
        })?;
        let report = trial_report(&state).map_err(stage_err("optimize"))?;
        let out = [log.clone(), dir.join("report.csv"), self.best_path()];
        std::fs::write(&out[1], report).map_err(io_err(&out[1]))?;
        self.write_json(&out[2], best)?;
        Ok(out.to_vec())
    }

    fn run_build(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let dir = self.stage_dir(Stage::Build);
        let (params, params_from) = match self.cfg.build.params {
            Some(p) => (p, "config".to_string()),
            None => {
                let p = self.best_path();
                let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
                let best: Best = serde_json::from_str(&text).map_err(stage_err("build"))?;
                let params = ScoringParams::new(best.alpha, best.beta).map_err(stage_err("build"))?;
                (params, format!("study trial {}", best.index))
            }
        };
        let (pairs, triples, _store) = self.load_embedded()?;
        let pool = CandidatePool::from_pairs(&pairs, &triples).map_err(stage_err("build"))?;
        let mut outcome = build_dataset(&pairs, &triples, &pool, &params, &self.cfg.window, self.cfg.build_seed())
            .map_err(stage_err("build"))?;
        assign_splits(&mut outcome.items, &self.cfg.splits, self.cfg.split_seed()).map_err(stage_err("build"))?;

        let dev: HashSet<String> = if self.study_log_path().exists() {
            load_study(&self.study_log_path())
                .map_err(stage_err("build"))?
                .dev_pair_ids
                .into_iter()
                .collect()
        } else {
            HashSet::new()
        };
        for p in &mut outcome.provenance {
            p.dev = dev.contains(&p.id);
        }
        let count = |s: crate::distractor::Split| outcome.items.iter().filter(|i| i.split == Some(s)).count();
        let report = BuildReport {
            alpha: params.alpha,
            beta: params.beta,
            params_from,
            n_pairs: pairs.len(),
            n_items: outcome.items.len(),
            n_train: count(crate::distractor::Split::Train),
            n_validation: count(crate::distractor::Split::Validation),
            n_test: count(crate::distractor::Split::Test),
            n_dev_items: outcome.provenance.iter().filter(|p| p.dev).count(),
            gold_text_duplicates: outcome.gold_text_duplicates,
            candidate_text_duplicates: outcome.candidate_text_duplicates,
            skipped: outcome.skipped.clone(),
        };
        let out = [self.dataset_path(), dir.join("provenance.jsonl"), dir.join("report.json")];
        self.write_jsonl(&out[0], &outcome.items)?;
        self.write_jsonl(&out[1], &outcome.provenance)?;
        self.write_json(&out[2], &report)?;
        Ok(out.to_vec())
    }

    fn run_eval(&self) -> Result<Vec<PathBuf>, PipelineError> {
        use rand::seq::SliceRandom;

        let dir = self.stage_dir(Stage::Eval);
        let all: Vec<MCQItem> = self.read_jsonl(&self.dataset_path())?;
        let ev = &self.cfg.eval;
        let items: Vec<MCQItem> = all.iter().filter(|i| i.split == Some(ev.split)).cloned().collect();
        if items.is_empty() {
            return Err(PipelineError::Stage {
                stage: "eval",
                message: format!("no items in split {}", ev.split.as_str()),
            });
        }
        let shots = if ev.n_shots == 0 {
            Vec::new()
        } else {
            let eval_ids: HashSet<&str> = items.iter().map(|i| i.item_id.as_str()).collect();
            let mut train: Vec<MCQItem> = all
                .iter()
                .filter(|i| i.split == Some(crate::distractor::Split::Train) && !eval_ids.contains(i.item_id.as_str()))
                .cloned()
                .collect();
            if train.len() < ev.n_shots {
                return Err(PipelineError::Config(format!(
                    "eval.n_shots = {} but only {} train items are available as exemplars",
                    ev.n_shots,
                    train.len()
                )));
            }
            train.shuffle(&mut rng_for(self.cfg.shot_seed(), &["exemplars"]));
            train.truncate(ev.n_shots);
            train
        };
        let template = self.template()?;
        let store;
        let answerer: Box<dyn Answerer + '_> = match ev.answerer {
            AdversaryKind::Mock => {
                store = self.open_store()?;
                self.answerer(AdversaryKind::Mock, &store)
            }
            AdversaryKind::Api => Box::new(ChatAnswerer::from_spec(ev.model.clone())),
        };
        let cache = AnswerCache::open(&dir.join("answer_cache.jsonl")).map_err(stage_err("eval"))?;
        let outcome = evaluate_dataset(&items, answerer.as_ref(), &template, &shots, &ev.eval_config(), Some(&cache))
            .map_err(stage_err("eval"))?;
        info!(calls = outcome.calls, pp_acc = outcome.report.pp_acc, "evaluation finished");
        let out = [dir.join("answers.jsonl"), dir.join("report.json"), dir.join("report.csv")];
        self.write_jsonl(&out[0], &outcome.answers)?;
        self.write_json(&out[1], &outcome.report)?;
        std::fs::write(&out[2], outcome.report.to_csv()).map_err(io_err(&out[2]))?;
        Ok(out.to_vec())
    }

    fn run_stats(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let path = self.dataset_path();
        let stats = stats::compute_stats(&path, &WhitespaceTokenizer).map_err(io_err(&path))?;
        let out = self.stage_dir(Stage::Stats).join("stats.json");
        self.write_json(&out, &stats)?;
        Ok(vec![out])
    }
}

fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}
