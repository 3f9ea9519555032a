use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{PipelineError, Stage};
use crate::distractor::{ScoringParams, Split, SplitProportions, WindowSpec};
use crate::embed::ProviderConfig;
use crate::eval::{EvalConfig, ModelSpec};
use crate::hash::{derive_seed, sha256_hex};
use crate::ingest::IngestConfig;
use crate::optimize::{AdversaryKind, StudyConfig};
use crate::segment::SegmentationConfig;
use crate::validate::JudgeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Artifacts go under `<dir>/<stage>/`.
    pub dir: PathBuf,
    /// Pin every timestamp to this Unix time; `SOURCE_DATE_EPOCH` is used
    /// when unset.
    pub timestamp_epoch: Option<i64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dir: PathBuf::from("run"),
            timestamp_epoch: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub paths: Vec<PathBuf>,
    pub lexicon: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeMode {
    /// Pairs pass through unchecked.
    #[default]
    Off,
    Mock,
    Api,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSection {
    pub mode: JudgeMode,
    /// Fraction of prompts the mock judge rejects.
    pub mock_reject_rate: f64,
}

impl Default for ValidateSection {
    fn default() -> Self {
        ValidateSection {
            mode: JudgeMode::Off,
            mock_reject_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildSection {
    /// Weights used by `build` when no study has been run.
    pub params: Option<ScoringParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub answerer: AdversaryKind,
    pub split: Split,
    /// Prompt template file; the bundled template when unset.
    pub template: Option<PathBuf>,
    pub n_shots: usize,
    pub bin_edges: Vec<usize>,
    pub model: ModelSpec,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        EvalSection {
            answerer: AdversaryKind::Api,
            split: Split::Test,
            template: None,
            n_shots: e.n_shots,
            bin_edges: e.bin_edges,
            model: ModelSpec::default(),
        }
    }
}

impl EvalSection {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_shots: self.n_shots,
            bin_edges: self.bin_edges.clone(),
            max_parallel_requests: self.model.max_parallel_requests,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Every stage seed is derived from this.
    pub master_seed: u64,
    pub run: RunConfig,
    pub corpus: CorpusConfig,
    pub ingest: IngestConfig,
    pub segmentation: SegmentationConfig,
    pub validate: ValidateSection,
    pub judge: Option<JudgeConfig>,
    pub embeddings: ProviderConfig,
    /// Window for the final build; trials use `study.window`.
    pub window: WindowSpec,
    pub study: StudyConfig,
    pub build: BuildSection,
    pub splits: SplitProportions,
    pub eval: EvalSection,
}

/// Replace `${NAME}` with the environment variable `NAME`.
pub fn interpolate_env(text: &str) -> Result<String, PipelineError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| PipelineError::Config("unterminated ${ in config".into()))?;
        let name = &after[..end];
        let value = std::env::var(name)
            .map_err(|_| PipelineError::Config(format!("environment variable {name} is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let text = interpolate_env(text)?;
        toml::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Parse, resolve relative paths against the file's directory, and
    /// derive stage seeds.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.finalize()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        self.run.dir = abs(&self.run.dir);
        self.corpus.paths = self.corpus.paths.iter().map(|p| abs(p)).collect();
        self.corpus.lexicon = abs(&self.corpus.lexicon);
        self.eval.template = self.eval.template.as_deref().map(abs);
    }

    /// Derive stage seeds from `master_seed` and check invariants. Stage
    /// seeds must not be set by hand.
    pub fn finalize(&mut self) -> Result<(), PipelineError> {
        let derived = [
            derive_seed(self.master_seed, &["ingest"]),
            derive_seed(self.master_seed, &["segment"]),
            derive_seed(self.master_seed, &["study"]),
        ];
        let set = [self.ingest.seed, self.segmentation.seed, self.study.seed];
        if set.iter().zip(&derived).any(|(s, d)| *s != 0 && s != d) {
            return Err(PipelineError::Config(
                "stage seeds are derived from master_seed; remove ingest.seed, segmentation.seed and study.seed".into(),
            ));
        }
        [self.ingest.seed, self.segmentation.seed, self.study.seed] = derived;
        self.validate()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: String| PipelineError::Config(e);
        self.ingest.validate().map_err(|e| cfg(e.to_string()))?;
        self.segmentation.validate().map_err(|e| cfg(e.to_string()))?;
        if let Some(j) = &self.judge {
            j.validate().map_err(|e| cfg(e.to_string()))?;
        }
        self.embeddings.validate().map_err(|e| cfg(e.to_string()))?;
        self.window.validate().map_err(|e| cfg(e.to_string()))?;
        self.study.validate().map_err(|e| cfg(e.to_string()))?;
        self.splits.validate().map_err(|e| cfg(e.to_string()))?;
        if let Some(p) = &self.build.params {
            p.validate().map_err(|e| cfg(e.to_string()))?;
        }
        self.eval.model.validate().map_err(|e| cfg(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.validate.mock_reject_rate) {
            return Err(cfg("validate.mock_reject_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn judge_config(&self) -> JudgeConfig {
        self.judge.clone().unwrap_or_default()
    }

    pub fn build_seed(&self) -> u64 {
        derive_seed(self.master_seed, &["build"])
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.master_seed, &["splits"])
    }

    pub fn shot_seed(&self) -> u64 {
        derive_seed(self.master_seed, &["shots"])
    }

    /// The configuration that determines one stage's outputs.
    pub fn stage_section(&self, stage: Stage) -> Value {
        fn v<T: Serialize>(x: &T) -> Value {
            serde_json::to_value(x).expect("config sections serialize")
        }
        let mut m = serde_json::Map::new();
        match stage {
            Stage::Ingest => {
                m.insert("ingest".into(), v(&self.ingest));
            }
            Stage::Segment => {
                m.insert("segmentation".into(), v(&self.segmentation));
            }
            Stage::Validate => {
                m.insert("validate".into(), v(&self.validate));
                if self.validate.mode == JudgeMode::Api {
                    m.insert("judge".into(), v(&self.judge_config()));
                }
            }
            Stage::Embed => {
                m.insert("embeddings".into(), v(&self.embeddings));
            }
            Stage::Optimize => {
                m.insert("study".into(), v(&self.study));
                if self.study.adversary == AdversaryKind::Api {
                    m.insert("model".into(), v(&self.eval.model));
                    m.insert("template".into(), v(&self.eval.template));
                }
            }
            Stage::Build => {
                m.insert("window".into(), v(&self.window));
                m.insert("splits".into(), v(&self.splits));
                m.insert("build".into(), v(&self.build));
                m.insert("seed".into(), v(&self.build_seed()));
            }
            Stage::Eval => {
                m.insert("eval".into(), v(&self.eval));
                m.insert("seed".into(), v(&self.shot_seed()));
            }
            Stage::Stats => {}
        }
        m.insert("stage".into(), Value::String(stage.name().into()));
        Value::Object(m)
    }

    /// SHA-256 of the stage's canonical configuration.
    pub fn stage_hash(&self, stage: Stage) -> String {
        config_hash(&self.stage_section(stage))
    }
}

/// Keys that affect speed or credentials, never outputs.
const OPERATIONAL_KEYS: &[&str] = &[
    "max_parallel_requests",
    "timeout_seconds",
    "retry_limit",
    "backoff_base_ms",
    "api_key_env",
    "batch_size",
];

fn strip_operational(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.retain(|k, _| !OPERATIONAL_KEYS.contains(&k.as_str()));
            m.values_mut().for_each(strip_operational);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_operational),
        _ => {}
    }
}

/// Hash of canonical JSON: operational keys removed, object keys sorted.
pub fn config_hash(section: &Value) -> String {
    let mut v = section.clone();
    strip_operational(&mut v);
    // serde_json's default map is ordered by key, so this is canonical
    sha256_hex(serde_json::to_string(&v).unwrap().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_file() {
        let mut cfg = PipelineConfig::parse("").unwrap();
        cfg.finalize().unwrap();
        assert_eq!(cfg.study.n_trials, 30);
        assert_eq!(cfg.window, WindowSpec::new(0, 20));
        assert_ne!(cfg.study.seed, 0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::parse("[run]\ndirr = 'x'\n").is_err());
        assert!(PipelineConfig::parse("bogus = 1\n").is_err());
    }

    #[test]
    fn hand_set_stage_seed_is_a_config_error() {
        let mut cfg = PipelineConfig::parse("[study]\nseed = 5\n").unwrap();
        assert!(matches!(cfg.finalize(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn env_interpolation() {
        // PATH is always set in test environments
        let path = std::env::var("PATH").unwrap();
        assert_eq!(interpolate_env("a ${PATH} b").unwrap(), format!("a {path} b"));
        assert!(interpolate_env("${FORGE_SURELY_UNSET_VAR_123}").is_err());
        assert!(interpolate_env("${oops").is_err());
        assert_eq!(interpolate_env("no vars").unwrap(), "no vars");
    }

    #[test]
    fn hash_ignores_operational_fields_only() {
        let base = PipelineConfig::default();
        let mut faster = base.clone();
        faster.embeddings.max_parallel_requests = 32;
        faster.embeddings.batch_size = 7;
        assert_eq!(base.stage_hash(Stage::Embed), faster.stage_hash(Stage::Embed));
        let mut other = base.clone();
        other.embeddings.mock_dimension = 8;
        assert_ne!(base.stage_hash(Stage::Embed), other.stage_hash(Stage::Embed));
        // sections are independent
        let mut eval_changed = base.clone();
        eval_changed.eval.n_shots = 5;
        assert_eq!(base.stage_hash(Stage::Build), eval_changed.stage_hash(Stage::Build));
        assert_ne!(base.stage_hash(Stage::Eval), eval_changed.stage_hash(Stage::Eval));
    }

    #[test]
    fn bad_splits_fail_validation() {
        let mut cfg = PipelineConfig::parse("[splits]\ntrain = 0.5\nvalidation = 0.2\ntest = 0.2\n").unwrap();
        assert!(cfg.finalize().is_err());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let mut cfg = PipelineConfig::parse("[corpus]\npaths = ['c.jsonl']\nlexicon = '/abs/lex.json'\n").unwrap();
        cfg.resolve_paths(Path::new("/cfg"));
        assert_eq!(cfg.corpus.paths, vec![PathBuf::from("/cfg/c.jsonl")]);
        assert_eq!(cfg.corpus.lexicon, PathBuf::from("/abs/lex.json"));
        assert_eq!(cfg.run.dir, PathBuf::from("/cfg/run"));
    }
}
