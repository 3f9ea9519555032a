use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// A copy of the fixture config whose run directory is inside `dir`.
fn config_in(dir: &Path, extra: &str) -> PathBuf {
    let f = fixtures();
    let text = std::fs::read_to_string(f.join("pipeline.toml"))
        .unwrap()
        .replace("dir = \"../target/fixture-run\"", "dir = \"run\"")
        .replace("\"corpus.jsonl\"", &format!("{:?}", f.join("corpus.jsonl").display().to_string()))
        .replace("\"lexicon.json\"", &format!("{:?}", f.join("lexicon.json").display().to_string()));
    let path = dir.join("pipeline.toml");
    std::fs::write(&path, format!("{text}\n{extra}")).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_lists_every_stage() {
    let o = forge(&["--help"]);
    assert!(o.status.success());
    for s in ["ingest", "segment", "validate", "embed", "build", "optimize", "eval", "stats"] {
        assert!(stdout(&o).contains(s), "{s}");
    }
}

#[test]
fn missing_config_exits_two() {
    let o = forge(&["ingest", "--config", "/definitely/not/here.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("config error"));
}

#[test]
fn bad_config_value_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("train = 0.6", "train = 0.9");
    std::fs::write(&cfg, text).unwrap();
    let o = forge(&["ingest", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn downstream_stage_before_upstream_exits_one_with_hint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), "");
    let o = forge(&["segment", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("forge ingest --config"), "{}", stderr(&o));
}

#[test]
fn stages_run_one_by_one_and_rerun_as_no_ops() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    for stage in ["ingest", "segment", "validate", "embed"] {
        let o = forge(&[stage, "--config", cfg]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
        assert!(stdout(&o).contains(&format!("{stage}: done")));
    }
    let o = forge(&["optimize", "--config", cfg, "--trials", "4", "--random-trials", "2", "--window", "10", "--skip", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(dir.path().join("run/optimize/study.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.lines().next().unwrap().contains("\"skip\":1"));
    for stage in ["build", "eval", "stats"] {
        let o = forge(&[stage, "--config", cfg, "--adversary", "mock"]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let o = forge(&["ingest", "--config", cfg]);
    assert!(stdout(&o).contains("ingest: up to date"));
    assert!(dir.path().join("run/stats/stats.json").exists());
}

#[test]
fn mock_embeddings_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("mock_mode = true", "mock_mode = false");
    std::fs::write(&cfg, text).unwrap();
    let o = forge(&["all", "--config", cfg.to_str().unwrap(), "--mock-embeddings"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("run/embed/cache/mock/mock-64/vectors.f32").exists());
}
