//! Regenerates `data/toy`: corpus, ground truth, QA pairs, every fixture the
//! toy runs need, and the golden outputs replayed from those fixtures.
//!
//! Usage: `record-toy-fixtures [DATA_DIR]`

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use flowmine_core::corpus::{load_corpus, save_corpus};
use flowmine_core::experiment::{run_experiment, run_experiment_with, ExperimentConfig, Session, MANIFEST_FILE, REPORT_FILE};
use flowmine_core::extraction::{generate_workflow, Strategy};
use flowmine_core::gateway::{ChatModel, Gateway, GatewayMode};
use flowmine_core::{Conversation, Corpus};
use flowmine_scripted::toy;
use flowmine_scripted::ScriptedTransport;
use serde_json::{json, Value};

const RECORDED_AT: &str = "2026-01-01T00:00:00Z";

fn recorder(fixtures: &Path) -> Result<Arc<Gateway>> {
    let gw = Gateway::builder(GatewayMode::Record)
        .fixtures(fixtures)
        .transport(Arc::new(ScriptedTransport))
        .recorded_at(RECORDED_AT)
        .build()?;
    Ok(Arc::new(gw))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, format!("{}\n", serde_json::to_string_pretty(value)?)).with_context(|| path.display().to_string())
}

fn config(dir: &Path, scratch: &Path, mode: &str) -> Result<ExperimentConfig> {
    let overrides = vec![format!("output_dir=\"{}\"", scratch.display()), format!("gateway.mode=\"{mode}\"")];
    Ok(ExperimentConfig::load(&dir.join("toy.toml"), &overrides)?)
}

fn write_data(dir: &Path) -> Result<()> {
    let corpus = Corpus::from_conversations(toy::corpus())?;
    save_corpus(&corpus, dir.join("corpus.jsonl"))?;
    let counts: BTreeMap<&str, usize> = corpus.intents().map(|i| (i, corpus.filter_by_intent(i).len())).collect();
    let ids: BTreeMap<&str, Vec<&str>> = corpus.intents().map(|i| (i, corpus.intent_ids(i))).collect();
    write_json(&dir.join("corpus_manifest.json"), &json!({"conversations": corpus.len(), "intents": counts, "ids": ids}))?;
    write_json(&dir.join("ground_truth.json"), &toy::ground_truth())?;
    write_json(&dir.join("qa_pairs.json"), &toy::qa_pairs())?;
    Ok(())
}

fn record_probes(dir: &Path, fixtures: &Path) -> Result<()> {
    let probes: Value = serde_json::from_str(&fs::read_to_string(dir.join("probes.json"))?)?;
    let corpus = load_corpus(dir.join("corpus.jsonl"))?;
    let intent = probes["intent"].as_str().context("probes.intent")?;
    let n = probes["conversations"].as_u64().context("probes.conversations")? as usize;
    let seed = probes["order_seed"].as_u64().context("probes.order_seed")?;
    let convs: Vec<&Conversation> = corpus.filter_by_intent(intent).into_iter().take(n).collect();
    let model_id = probes["model"].as_str().context("probes.model")?;
    for s in probes["strategies"].as_array().context("probes.strategies")? {
        let strategy: Strategy = serde_json::from_value(s.clone())?;
        let model = ChatModel::new(recorder(fixtures)?, model_id);
        generate_workflow(&convs, &strategy, &model, seed).with_context(|| format!("probe {strategy}"))?;
    }
    let endless = &probes["endless"];
    let strategy: Strategy = serde_json::from_value(endless["strategy"].clone())?;
    let model = ChatModel::new(recorder(fixtures)?, endless["model"].as_str().context("endless.model")?);
    let art = generate_workflow(&convs, &strategy, &model, seed)?;
    if !art.qa_transcript.is_some_and(|t| t.turn_cap_hit) {
        bail!("endless probe stopped before the exchange cap");
    }
    Ok(())
}

fn main() -> Result<()> {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy"));
    let dir = dir.canonicalize().with_context(|| format!("{} must exist", dir.display()))?;
    let fixtures = dir.join("fixtures");
    let golden = dir.join("golden");
    let scratch = std::env::temp_dir().join("flowmine-toy-recording");
    for d in [&fixtures, &golden, &scratch] {
        if d.exists() {
            fs::remove_dir_all(d)?;
        }
        fs::create_dir_all(d)?;
    }
    write_data(&dir)?;

    let cfg = config(&dir, &scratch.join("record"), "record")?;
    run_experiment_with(cfg, recorder(&fixtures)?)?;
    let out = run_experiment(config(&dir, &scratch.join("replay"), "replay")?)?;
    fs::copy(out.run_dir.join(REPORT_FILE), golden.join("eval_report.json"))?;
    fs::copy(out.run_dir.join(MANIFEST_FILE), golden.join("run_manifest.json"))?;

    record_probes(&dir, &fixtures)?;

    let mut s = Session::new(config(&dir, &scratch.join("synth"), "record")?, recorder(&fixtures)?)?;
    let intents = s.intents()?;
    let synth = Corpus::from_conversations(s.synthesize_stage(&intents)?)?;
    save_corpus(&synth, golden.join("synth_corpus.jsonl"))?;
    let toy_corpus = s.corpus()?.clone();
    s.compliance_stage(&toy_corpus)?;
    s.compliance_stage(&synth)?;

    let n = fs::read_dir(&fixtures)?.count();
    println!("recorded {n} fixtures into {}", fixtures.display());
    fs::remove_dir_all(&scratch)?;
    Ok(())
}
