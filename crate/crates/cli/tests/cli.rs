use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toy() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy")
}

fn flowmine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowmine")).args(args).output().expect("binary runs")
}

fn text(o: &[u8]) -> String {
    String::from_utf8_lossy(o).into_owned()
}

#[test]
fn fixtures_verify_accepts_the_golden_manifest() {
    let manifest = toy().join("golden/run_manifest.json");
    let fixtures = toy().join("fixtures");
    let out = flowmine(&["fixtures", "verify", manifest.to_str().unwrap(), "--fixtures", fixtures.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("fixtures verified"));
}

#[test]
fn fixtures_verify_fails_against_an_empty_store() {
    let empty = tempfile::tempdir().unwrap();
    let manifest = toy().join("golden/run_manifest.json");
    let out = flowmine(&["fixtures", "verify", manifest.to_str().unwrap(), "--fixtures", empty.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn report_renders_the_golden_table() {
    let out = flowmine(&["report", toy().join("golden/eval_report.json").to_str().unwrap()]);
    assert!(out.status.success());
    let s = text(&out.stdout);
    assert!(s.contains("refund_never_bought") && s.contains("macro 0.9000"), "{s}");
}

#[test]
fn missing_config_exits_with_config_code() {
    let out = flowmine(&["run", "--config", "/definitely/not/here.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ill_typed_override_is_a_config_error() {
    let out = flowmine(&["retrieve", "-c", toy().join("toy.toml").to_str().unwrap(), "-o", "retrieval.k=\"many\""]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out.stderr));
}

#[test]
fn replay_run_matches_the_golden_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = format!("output_dir=\"{}\"", tmp.path().display());
    let out = flowmine(&["run", "-c", toy().join("toy.toml").to_str().unwrap(), "-o", &dir]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let run_dir = PathBuf::from(text(&out.stdout).lines().last().unwrap().trim());
    let got = std::fs::read(run_dir.join("eval_report.json")).unwrap();
    assert_eq!(got, std::fs::read(toy().join("golden/eval_report.json")).unwrap());
}

#[test]
fn replay_without_a_fixture_exits_with_miss_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = format!("output_dir=\"{}\"", tmp.path().display());
    let out = flowmine(&["run", "-c", toy().join("toy.toml").to_str().unwrap(), "-o", &dir, "-o", "retrieval.k=5"]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out.stderr));
    let failure = std::fs::read_dir(tmp.path().join("runs")).unwrap().next().unwrap().unwrap().path().join("failure.json");
    assert!(failure.exists());
}

#[test]
fn compliance_on_the_synthesized_corpus_has_no_violations() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = format!("output_dir=\"{}\"", tmp.path().display());
    let corpus = toy().join("golden/synth_corpus.jsonl");
    let out = flowmine(&["check-compliance", "-c", toy().join("toy.toml").to_str().unwrap(), "-o", &dir, "--corpus", corpus.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let all = text(&out.stdout).lines().find(|l| l.starts_with("all |")).unwrap().to_string();
    assert!(all.ends_with("| 0.00 | 0.00"), "{all}");
}
