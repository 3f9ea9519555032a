//! The adversarial outer loop: propose scoring weights, build a provisional
//! dev dataset, measure an adversary on it, and keep the weights that make
//! it least accurate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::clock::Clock;
use crate::distractor::{build_dataset, CandidatePool, ScoringParams, WindowSpec};
use crate::embed::EmbeddingTriple;
use crate::eval::{evaluate_dataset, Answerer, EvalConfig, PromptTemplate};
use crate::hash::{derive_seed, rng_for};
use crate::jsonl;
use crate::segment::SentenceCompletionPair;
use crate::tpe::{self, Observation, TpeConfig};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("invalid study config: {0}")]
    Config(String),
    #[error("study log {path}: {message}")]
    Log { path: PathBuf, message: String },
    #[error("trial {index} aborted: {message}")]
    Aborted { index: usize, message: String },
    #[error("no completed trials")]
    NoTrials,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdversaryKind {
    #[default]
    Mock,
    Api,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub n_trials: usize,
    pub n_random: usize,
    pub window: WindowSpec,
    pub dev_set_size: usize,
    pub adversary: AdversaryKind,
    pub gamma: f64,
    pub n_ei_candidates: usize,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_trials: 30,
            n_random: 10,
            window: WindowSpec::default(),
            dev_set_size: 1000,
            adversary: AdversaryKind::Mock,
            gamma: 0.25,
            n_ei_candidates: 24,
            seed: 0,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), StudyError> {
        let err = |m: &str| Err(StudyError::Config(m.into()));
        if self.n_trials == 0 {
            return err("n_trials must be >= 1");
        }
        if self.n_random > self.n_trials {
            return err("n_random must not exceed n_trials");
        }
        if self.dev_set_size < 50 {
            return err("dev_set_size must be >= 50");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return err("gamma must lie in (0, 1)");
        }
        if self.n_ei_candidates == 0 {
            return err("n_ei_candidates must be >= 1");
        }
        self.window.validate().map_err(|e| StudyError::Config(e.to_string()))
    }

    pub fn tpe(&self) -> TpeConfig {
        TpeConfig {
            gamma: self.gamma,
            n_ei_candidates: self.n_ei_candidates,
            ..TpeConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    /// 1-based.
    pub index: usize,
    pub alpha: f64,
    pub beta: f64,
    pub u: f64,
    pub v: f64,
    /// `None` when the trial failed.
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub timestamp: String,
}

impl Trial {
    pub fn params(&self) -> ScoringParams {
        ScoringParams {
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        seed: u64,
        n_trials: usize,
        n_random: usize,
        window: WindowSpec,
        dev_pair_ids: Vec<String>,
    },
    Trial(Trial),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub index: usize,
    pub alpha: f64,
    pub beta: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyState {
    pub trials: Vec<Trial>,
    pub best: Option<Best>,
    pub dev_pair_ids: Vec<String>,
}

impl StudyState {
    fn from_trials(mut trials: Vec<Trial>, dev_pair_ids: Vec<String>) -> Self {
        trials.sort_by_key(|t| t.index);
        let best = trials
            .iter()
            .filter_map(|t| t.accuracy.map(|a| (t, a)))
            .min_by(|(ta, a), (tb, b)| a.total_cmp(b).then(ta.index.cmp(&tb.index)))
            .map(|(t, a)| Best {
                index: t.index,
                alpha: t.alpha,
                beta: t.beta,
                accuracy: a,
            });
        StudyState {
            trials,
            best,
            dev_pair_ids,
        }
    }

    pub fn completed(&self) -> impl Iterator<Item = &Trial> {
        self.trials.iter().filter(|t| t.accuracy.is_some())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrialError {
    /// This trial is recorded as failed and the study moves on.
    Failed(String),
    /// Stop the study; completed trials stay in the log.
    Fatal(String),
}

/// Accuracy to minimize for a point `(u, v)` and its simplex weights.
pub trait Objective {
    fn evaluate(&self, u: f64, v: f64, params: &ScoringParams) -> Result<f64, TrialError>;
}

impl<F> Objective for F
where
    F: Fn(f64, f64, &ScoringParams) -> Result<f64, TrialError>,
{
    fn evaluate(&self, u: f64, v: f64, params: &ScoringParams) -> Result<f64, TrialError> {
        self(u, v, params)
    }
}

/// Point for trial `index` (1-based): uniform for the first `n_random`
/// trials, TPE after. Each trial draws from its own RNG stream so a resumed
/// study proposes the same points.
pub fn suggest_params(history: &[Trial], cfg: &StudyConfig, index: usize) -> (f64, f64, ScoringParams) {
    let mut rng = rng_for(cfg.seed, &["suggest", &index.to_string()]);
    let (u, v) = if index <= cfg.n_random {
        tpe::uniform_point(&mut rng)
    } else {
        let obs: Vec<Observation> = history
            .iter()
            .filter(|t| t.index < index)
            .filter_map(|t| {
                t.accuracy.filter(|a| a.is_finite()).map(|value| Observation {
                    u: t.u,
                    v: t.v,
                    value,
                })
            })
            .collect();
        tpe::suggest(&obs, &cfg.tpe(), &mut rng)
    };
    (u, v, ScoringParams::from_unit_square(u, v))
}

/// Seeded sample of dev pair ids, kept in corpus order.
pub fn select_dev_set(pairs: &[SentenceCompletionPair], size: usize, seed: u64) -> Vec<String> {
    if pairs.len() <= size {
        if pairs.len() < size {
            warn!(have = pairs.len(), want = size, "fewer pairs than dev_set_size, using all");
        }
        return pairs.iter().map(|p| p.pair_id.clone()).collect();
    }
    let mut idx = index::sample(&mut rng_for(seed, &["dev-set"]), pairs.len(), size).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pairs[i].pair_id.clone()).collect()
}

fn read_log(path: &Path) -> Result<(Option<LogRecord>, BTreeMap<usize, Trial>), StudyError> {
    let (records, bad) = jsonl::read_lenient::<LogRecord>(path).map_err(|e| StudyError::Log {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if bad > 0 {
        // a torn final line from a crash
        warn!(bad, "ignoring unreadable study log lines");
    }
    let mut header = None;
    let mut trials = BTreeMap::new();
    for r in records {
        match r {
            h @ LogRecord::Header { .. } => {
                header.get_or_insert(h);
            }
            LogRecord::Trial(t) => {
                trials.entry(t.index).or_insert(t);
            }
        }
    }
    Ok((header, trials))
}

/// Run trials `1..=n_trials` sequentially, appending each to the log at
/// `log_path`. Trials already present in the log are not rerun.
pub fn run_study(
    objective: &dyn Objective,
    dev_pair_ids: Vec<String>,
    cfg: &StudyConfig,
    log_path: Option<&Path>,
    clock: Clock,
) -> Result<StudyState, StudyError> {
    cfg.validate()?;
    let header = LogRecord::Header {
        seed: cfg.seed,
        n_trials: cfg.n_trials,
        n_random: cfg.n_random,
        window: cfg.window,
        dev_pair_ids: dev_pair_ids.clone(),
    };
    let log_err = |path: &Path, e: std::io::Error| StudyError::Log {
        path: path.to_path_buf(),
        message: e.to_string(),
    };

    let mut done = BTreeMap::new();
    let mut log = None;
    if let Some(path) = log_path {
        let mut needs_header = true;
        if path.exists() {
            let (old_header, trials) = read_log(path)?;
            let mismatch = |message: &str| StudyError::Log {
                path: path.to_path_buf(),
                message: message.into(),
            };
            match old_header {
                Some(LogRecord::Header {
                    seed,
                    window,
                    dev_pair_ids: ids,
                    ..
                }) => {
                    if seed != cfg.seed || window != cfg.window || ids != dev_pair_ids {
                        return Err(mismatch("log belongs to a different study (seed, window or dev set differ)"));
                    }
                    needs_header = false;
                }
                _ if !trials.is_empty() => return Err(mismatch("log has trials but no header")),
                _ => {}
            }
            done = trials;
        }
        let appender = jsonl::Appender::open(path).map_err(|e| log_err(path, e))?;
        if needs_header {
            appender.append(&header).map_err(|e| log_err(path, e))?;
        }
        log = Some(appender);
    }
    if !done.is_empty() {
        info!(completed = done.len(), "resuming study");
    }

    for index in 1..=cfg.n_trials {
        if done.contains_key(&index) {
            continue;
        }
        let history: Vec<Trial> = done.values().cloned().collect();
        let (u, v, params) = suggest_params(&history, cfg, index);
        let (accuracy, error) = match objective.evaluate(u, v, &params) {
            Ok(a) if a.is_finite() => (Some(a), None),
            Ok(a) => (None, Some(format!("non-finite accuracy {a}"))),
            Err(TrialError::Failed(m)) => {
                warn!(index, error = %m, "trial failed");
                (None, Some(m))
            }
            Err(TrialError::Fatal(message)) => return Err(StudyError::Aborted { index, message }),
        };
        let trial = Trial {
            index,
            alpha: params.alpha,
            beta: params.beta,
            u,
            v,
            accuracy,
            error,
            timestamp: clock.now(),
        };
        info!(index, alpha = trial.alpha, beta = trial.beta, accuracy = ?trial.accuracy, "trial done");
        if let (Some(l), Some(path)) = (&log, log_path) {
            l.append(&LogRecord::Trial(trial.clone())).map_err(|e| log_err(path, e))?;
        }
        done.insert(index, trial);
    }
    Ok(StudyState::from_trials(done.into_values().collect(), dev_pair_ids))
}

/// Rebuild the state recorded in a study log.
pub fn load_study(path: &Path) -> Result<StudyState, StudyError> {
    let (header, trials) = read_log(path)?;
    let dev = match header {
        Some(LogRecord::Header { dev_pair_ids, .. }) => dev_pair_ids,
        _ => Vec::new(),
    };
    Ok(StudyState::from_trials(trials.into_values().collect(), dev))
}

/// Population standard deviation of up to the last three completed
/// accuracies, per trial.
pub fn rolling_std3(values: &[Option<f64>]) -> Vec<Option<f64>> {
    (0..values.len())
        .map(|i| {
            let w: Vec<f64> = values[i.saturating_sub(2)..=i].iter().flatten().copied().collect();
            if w.is_empty() {
                return None;
            }
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
            Some(var.sqrt())
        })
        .collect()
}

/// CSV with columns `trial,alpha,beta,accuracy,rolling_std3`.
pub fn trial_report(state: &StudyState) -> Result<String, StudyError> {
    if state.completed().next().is_none() {
        return Err(StudyError::NoTrials);
    }
    let acc: Vec<Option<f64>> = state.trials.iter().map(|t| t.accuracy).collect();
    let std = rolling_std3(&acc);
    let f = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
    let mut out = String::from("trial,alpha,beta,accuracy,rolling_std3\n");
    for (t, s) in state.trials.iter().zip(std) {
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{}\n",
            t.index,
            t.alpha,
            t.beta,
            f(t.accuracy),
            f(s)
        ));
    }
    Ok(out)
}

/// Builds the dev dataset for a point and returns the adversary's
/// post-processed accuracy on it.
pub struct DatasetObjective<'a> {
    pub dev_pairs: Vec<SentenceCompletionPair>,
    pub dev_triples: Vec<EmbeddingTriple>,
    /// Ranking searches the whole pool, not just the dev set.
    pub pool: &'a CandidatePool,
    pub window: WindowSpec,
    pub seed: u64,
    pub adversary: &'a dyn Answerer,
    pub template: PromptTemplate,
    pub eval: EvalConfig,
}

impl<'a> DatasetObjective<'a> {
    /// Select `dev_pair_ids` out of `pairs`/`triples` (aligned).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dev_pair_ids: &[String],
        pairs: &[SentenceCompletionPair],
        triples: &[EmbeddingTriple],
        pool: &'a CandidatePool,
        window: WindowSpec,
        seed: u64,
        adversary: &'a dyn Answerer,
        eval: EvalConfig,
    ) -> Result<Self, StudyError> {
        let wanted: std::collections::HashSet<&str> = dev_pair_ids.iter().map(String::as_str).collect();
        let (dev_pairs, dev_triples): (Vec<_>, Vec<_>) = pairs
            .iter()
            .zip(triples)
            .filter(|(p, _)| wanted.contains(p.pair_id.as_str()))
            .map(|(p, t)| (p.clone(), t.clone()))
            .unzip();
        if dev_pairs.len() != wanted.len() {
            return Err(StudyError::Config(format!(
                "{} dev pair ids are not in the pair set",
                wanted.len() - dev_pairs.len()
            )));
        }
        window
            .validate_for_pool(pool.len())
            .map_err(|e| StudyError::Config(e.to_string()))?;
        Ok(DatasetObjective {
            dev_pairs,
            dev_triples,
            pool,
            window,
            seed,
            adversary,
            template: PromptTemplate::default(),
            eval: EvalConfig { n_shots: 0, ..eval },
        })
    }

    pub fn accuracy(&self, params: &ScoringParams) -> Result<f64, TrialError> {
        // the same build seed every trial: only the weights move distractors
        let build_seed = derive_seed(self.seed, &["trial-build"]);
        let out = build_dataset(&self.dev_pairs, &self.dev_triples, self.pool, params, &self.window, build_seed)
            .map_err(|e| TrialError::Failed(e.to_string()))?;
        if !out.skipped.is_empty() {
            warn!(skipped = out.skipped.len(), "dev items skipped in provisional build");
        }
        if out.items.is_empty() {
            return Err(TrialError::Failed("provisional dataset is empty".into()));
        }
        let r = evaluate_dataset(&out.items, self.adversary, &self.template, &[], &self.eval, None)
            .map_err(|e| TrialError::Failed(e.to_string()))?;
        Ok(r.report.pp_acc)
    }
}

impl Objective for DatasetObjective<'_> {
    fn evaluate(&self, _u: f64, _v: f64, params: &ScoringParams) -> Result<f64, TrialError> {
        self.accuracy(params)
    }
}
