use std::path::{Path, PathBuf};

use flowmine_core::corpus::load_corpus;
use serde_json::Value;

fn toy() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy")
}

#[test]
fn bundled_corpus_matches_its_manifest() {
    let corpus = load_corpus(toy().join("corpus.jsonl")).unwrap();
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(toy().join("corpus_manifest.json")).unwrap()).unwrap();
    assert_eq!(corpus.len(), 20);
    assert_eq!(manifest["conversations"], 20);
    let refund: Vec<String> = (1..=12).map(|i| format!("rnb-{i:02}")).collect();
    assert_eq!(corpus.intent_ids("refund_never_bought"), refund);
    for (intent, ids) in manifest["ids"].as_object().unwrap() {
        let want: Vec<&str> = ids.as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        assert_eq!(corpus.intent_ids(intent), want);
    }
}
