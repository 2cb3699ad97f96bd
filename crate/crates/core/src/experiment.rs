//! Experiment configuration and end-to-end orchestration.
//!
//! A run executes extract-elements → retrieve → generate (one workflow per
//! order seed) → decompose → evaluate-e2e → aggregate, plus any configured
//! alternative evaluators, and writes everything under
//! `output_dir/runs/<run_id>/`:
//!
//! ```text
//! manifest.json            config snapshot, template hashes, fingerprints, call counts, results
//! timings.json             wall-clock per stage (not part of the manifest)
//! elements/<id>.json
//! selection/<intent>.json
//! workflows/<intent>/seed-<s>.json
//! plans/<intent>.json
//! dialogs/<intent>/seed-<s>/sf-<ii>.json
//! reports/seed-<s>.json
//! eval_report.json, eval_report.txt
//! alt/<intent>/seed-<s>.json
//! ```
//!
//! The run id hashes the config snapshot without `output_dir`; the snapshot
//! stored in the manifest omits it too, so moving the output keeps every
//! result byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::alt_eval::{self, AltInputs, ComplianceReport, EvalMethod, QaPair};
use crate::corpus::{load_corpus, Conversation, Corpus};
use crate::e2e::{self, E2eModels, EvalReport, GroundTruthPlan, Outcome, ScenarioResult};
use crate::elements::{extract_elements, ExtractedElements};
use crate::extraction::{generate_workflow, QaMode, Strategy, StrategyKind, WorkflowArtifact, DEFAULT_ENSEMBLE_WIDTH};
use crate::gateway::{
    canonical_json, ChatModel, EmbeddingModel, FixtureStore, Gateway, GatewayError, GatewayMode, HttpTransport,
    RequestFingerprint, Transport, DEFAULT_API_KEY_ENV, DEFAULT_PARALLELISM,
};
use crate::prompts::template_hashes;
use crate::retrieval::{
    embed_conversations, embed_elements, select_diverse, select_random, select_top_k, SelectionResult, SelectionStrategy,
};
use crate::subflow::{enumerate_paths, validate_graph, WorkflowGraph};
use crate::synth::{self, SynthSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "eval_report.json";
pub const E2E_EVALUATOR: &str = "e2e";

fn default_k() -> usize {
    10
}
fn default_conv_max_chars() -> usize {
    8000
}
fn default_order_seeds() -> Vec<u64> {
    vec![0, 1]
}
fn default_width() -> usize {
    DEFAULT_ENSEMBLE_WIDTH
}
fn default_turn_cap() -> usize {
    e2e::DEFAULT_TURN_CAP
}
fn default_evaluators() -> Vec<String> {
    vec![E2E_EVALUATOR.to_string()]
}
fn default_parallelism() -> usize {
    DEFAULT_PARALLELISM
}
fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}
fn default_intents() -> IntentSelection {
    IntentSelection::All
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IntentSelection {
    All,
    Only(Vec<String>),
}

impl Serialize for IntentSelection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            IntentSelection::All => s.serialize_str("all"),
            IntentSelection::Only(v) => v.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for IntentSelection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Word(String),
            List(Vec<String>),
        }
        match Raw::deserialize(d)? {
            Raw::Word(w) if w == "all" => Ok(IntentSelection::All),
            Raw::Word(w) => Ok(IntentSelection::Only(vec![w])),
            Raw::List(v) => Ok(IntentSelection::Only(v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub strategy: SelectionStrategy,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_conv_max_chars")]
    pub conv_max_chars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub strategy: StrategyKind,
    #[serde(default)]
    pub qa_mode: Option<QaMode>,
    #[serde(default = "default_width")]
    pub ensemble_width: usize,
    #[serde(default = "default_order_seeds")]
    pub order_seeds: Vec<u64>,
    #[serde(default)]
    pub temperature: f64,
}

impl GenerationConfig {
    pub fn strategy(&self) -> Strategy {
        Strategy { kind: self.strategy, qa_mode: self.qa_mode, ensemble_width: self.ensemble_width }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub gt_workflows_path: String,
    #[serde(default = "default_turn_cap")]
    pub turn_cap: usize,
    #[serde(default = "default_evaluators")]
    pub evaluators: Vec<String>,
    #[serde(default)]
    pub qa_pairs_path: Option<String>,
    #[serde(default)]
    pub unparseable_as_incorrect: bool,
}

impl EvaluationConfig {
    pub fn alt_methods(&self) -> Result<Vec<EvalMethod>, String> {
        self.evaluators.iter().filter(|e| e.as_str() != E2E_EVALUATOR).map(|e| e.parse()).collect()
    }

    pub fn runs_e2e(&self) -> bool {
        self.evaluators.iter().any(|e| e == E2E_EVALUATOR)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelIds {
    pub chat: String,
    pub embedding: String,
    #[serde(default)]
    pub elements: Option<String>,
    #[serde(default)]
    pub generator: Option<String>,
    #[serde(default)]
    pub decomposer: Option<String>,
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub customer: Option<String>,
    #[serde(default)]
    pub agent: Option<String>,
    #[serde(default)]
    pub judge: Option<String>,
    #[serde(default)]
    pub evaluator: Option<String>,
}

impl ModelIds {
    /// Fills every unset role with `chat` so the snapshot names each model.
    fn resolve(&mut self) {
        for slot in [
            &mut self.elements,
            &mut self.generator,
            &mut self.decomposer,
            &mut self.scenario,
            &mut self.customer,
            &mut self.agent,
            &mut self.judge,
            &mut self.evaluator,
        ] {
            if slot.is_none() {
                *slot = Some(self.chat.clone());
            }
        }
    }

    fn role(&self, slot: &Option<String>) -> String {
        slot.clone().unwrap_or_else(|| self.chat.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub mode: GatewayMode,
    #[serde(default)]
    pub fixtures_dir: Option<String>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    pub models: ModelIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubflowSource {
    Graph,
    Llm,
}

fn default_subflow_source() -> SubflowSource {
    SubflowSource::Graph
}
fn default_one() -> usize {
    1
}
fn default_two() -> usize {
    2
}
fn default_pool() -> usize {
    synth::DEFAULT_PROFILE_POOL
}
fn default_synth_temperature() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    #[serde(default = "default_subflow_source")]
    pub subflow_source: SubflowSource,
    #[serde(default = "default_one")]
    pub profiles_per_subflow: usize,
    #[serde(default = "default_two")]
    pub conversations_per_pairing: usize,
    #[serde(default = "default_pool")]
    pub profile_pool: usize,
    #[serde(default)]
    pub profile_seed: u64,
    #[serde(default = "default_synth_temperature")]
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus_path: String,
    #[serde(default = "default_intents")]
    pub intents: IntentSelection,
    pub output_dir: String,
    pub retrieval: RetrievalConfig,
    pub generation: GenerationConfig,
    pub evaluation: EvaluationConfig,
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub synthesis: Option<SynthesisConfig>,
    /// Directory relative paths are resolved against (the config file's).
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String, fixture_miss: Option<String> },
    #[error("failed to write {path}: {reason}")]
    Output { path: String, reason: String },
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Stage { fixture_miss: Some(_), .. } => 3,
            _ => 4,
        }
    }

    pub fn stage(stage: &str, err: &dyn std::error::Error, gateway: Option<&GatewayError>) -> Self {
        let fixture_miss = match gateway {
            Some(GatewayError::FixtureMiss { digest }) => Some(digest.clone()),
            _ => None,
        };
        ExperimentError::Stage { stage: stage.to_string(), message: err.to_string(), fixture_miss }
    }
}

fn config_err(m: impl fmt::Display) -> ExperimentError {
    ExperimentError::Config(m.to_string())
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn override_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Applies `a.b.c=value` to a parsed config table.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ExperimentError> {
    let (key, value) = spec.split_once('=').ok_or_else(|| config_err(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("override key {key:?} is malformed")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| config_err(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), override_value(value.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path, overrides: &[String]) -> Result<Self, ExperimentError> {
        let mut table: toml::Table = toml::from_str(text).map_err(config_err)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: ExperimentConfig = table.try_into().map_err(config_err)?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.gateway.models.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base, overrides)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.generation.order_seeds.is_empty() {
            return Err(config_err("generation.order_seeds must not be empty"));
        }
        self.generation.strategy().validate().map_err(config_err)?;
        if !self.generation.temperature.is_finite() || self.generation.temperature < 0.0 {
            return Err(config_err("generation.temperature must be >= 0"));
        }
        if self.retrieval.k == 0 {
            return Err(config_err("retrieval.k must be positive"));
        }
        if self.evaluation.turn_cap < 2 {
            return Err(config_err("evaluation.turn_cap must be at least 2"));
        }
        self.evaluation.alt_methods().map_err(config_err)?;
        if self.evaluation.evaluators.is_empty() {
            return Err(config_err("evaluation.evaluators must not be empty"));
        }
        let g = &self.gateway;
        if g.parallelism == 0 {
            return Err(config_err("gateway.parallelism must be positive"));
        }
        if g.models.chat.is_empty() || g.models.embedding.is_empty() {
            return Err(config_err("gateway.models.chat and gateway.models.embedding are required"));
        }
        match g.mode {
            GatewayMode::Replay if g.endpoint.is_some() => {
                return Err(config_err("replay mode forbids gateway.endpoint"));
            }
            GatewayMode::Replay | GatewayMode::Record if g.fixtures_dir.is_none() => {
                return Err(config_err(format!("{} mode needs gateway.fixtures_dir", g.mode)));
            }
            _ => {}
        }
        if let IntentSelection::Only(v) = &self.intents {
            if v.is_empty() {
                return Err(config_err("intents must be \"all\" or a non-empty list"));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// Snapshot echoed into the manifest: every default explicit, no `output_dir`.
    pub fn snapshot(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("output_dir");
        v
    }

    pub fn run_id(&self) -> String {
        let digest = Sha256::digest(canonical_json(&self.snapshot()).as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir).join("runs").join(self.run_id())
    }

    pub fn fixtures_dir(&self) -> Option<PathBuf> {
        self.gateway.fixtures_dir.as_deref().map(|d| self.resolve(d))
    }

    /// Gateway for this config. `transport` replaces the HTTP endpoint
    /// (it is ignored in replay mode).
    pub fn build_gateway(&self, transport: Option<Arc<dyn Transport>>) -> Result<Gateway, ExperimentError> {
        let g = &self.gateway;
        let mut b = Gateway::builder(g.mode).parallelism(g.parallelism);
        if let Some(dir) = self.fixtures_dir() {
            b = b.fixtures(dir);
        }
        if g.mode != GatewayMode::Replay {
            let t: Arc<dyn Transport> = match (transport, &g.endpoint) {
                (Some(t), _) => t,
                (None, Some(url)) => Arc::new(HttpTransport::from_env(url.clone(), &g.api_key_env).map_err(config_err)?),
                (None, None) => return Err(config_err(format!("{} mode needs gateway.endpoint", g.mode))),
            };
            b = b.transport(t);
        }
        b.build().map_err(config_err)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub issue: String,
    pub workflow: String,
    #[serde(default)]
    pub graph: Option<WorkflowGraph>,
}

pub fn load_ground_truth(path: &Path) -> Result<BTreeMap<String, GroundTruth>, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let gt: BTreeMap<String, GroundTruth> =
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    for (intent, g) in &gt {
        if g.workflow.trim().is_empty() || g.issue.trim().is_empty() {
            return Err(config_err(format!("ground truth for {intent:?} has an empty issue or workflow")));
        }
        if let Some(graph) = &g.graph {
            let report = validate_graph(graph);
            if !report.is_valid() {
                return Err(config_err(format!("ground-truth graph for {intent:?} is invalid: {:?}", report.violations)));
            }
        }
    }
    Ok(gt)
}

/// Writes result files in call order and remembers their run-relative paths.
#[derive(Debug)]
pub struct ResultWriter {
    root: PathBuf,
    written: BTreeSet<String>,
}

impl ResultWriter {
    pub fn new(root: PathBuf) -> Self {
        Self { root, written: BTreeSet::new() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<(), ExperimentError> {
        let path = self.root.join(rel);
        let err = |e: std::io::Error| ExperimentError::Output { path: path.display().to_string(), reason: e.to_string() };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(err)?;
        }
        fs::write(&path, text).map_err(err)?;
        self.written.insert(rel.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), ExperimentError> {
        let mut text = serde_json::to_string_pretty(value).expect("result serializes");
        text.push('\n');
        self.write_text(rel, &text)
    }

    pub fn written(&self) -> Vec<String> {
        self.written.iter().cloned().collect()
    }
}

/// File-system-safe form of an intent label.
pub fn path_component(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: Value,
    pub template_hashes: BTreeMap<String, String>,
    pub fingerprints: Vec<String>,
    pub stage_calls: BTreeMap<String, usize>,
    pub results: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }
}

/// Outcome of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub report: Option<EvalReport>,
}

/// Shared state of one run: config, models, gateway and the result writer.
pub struct Session {
    pub config: ExperimentConfig,
    pub gateway: Arc<Gateway>,
    pub writer: ResultWriter,
    corpus: Option<Corpus>,
    ground_truth: Option<BTreeMap<String, GroundTruth>>,
    stage_calls: BTreeMap<String, usize>,
    timings: BTreeMap<String, f64>,
    pool: rayon::ThreadPool,
}

impl Session {
    pub fn new(config: ExperimentConfig, gateway: Arc<Gateway>) -> Result<Self, ExperimentError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.gateway.parallelism)
            .build()
            .map_err(|e| config_err(format!("thread pool: {e}")))?;
        let writer = ResultWriter::new(config.run_dir());
        Ok(Self {
            config,
            gateway,
            writer,
            corpus: None,
            ground_truth: None,
            stage_calls: BTreeMap::new(),
            timings: BTreeMap::new(),
            pool,
        })
    }

    pub fn open(config: ExperimentConfig, transport: Option<Arc<dyn Transport>>) -> Result<Self, ExperimentError> {
        let gateway = Arc::new(config.build_gateway(transport)?);
        Self::new(config, gateway)
    }

    fn chat(&self, slot: &Option<String>) -> ChatModel {
        ChatModel::new(self.gateway.clone(), self.config.gateway.models.role(slot))
    }

    pub fn e2e_models(&self) -> E2eModels {
        let m = &self.config.gateway.models;
        E2eModels {
            decomposer: self.chat(&m.decomposer),
            scenario: self.chat(&m.scenario),
            customer: self.chat(&m.customer),
            agent: self.chat(&m.agent),
            judge: self.chat(&m.judge),
        }
    }

    pub fn embedder(&self) -> EmbeddingModel {
        EmbeddingModel::new(self.gateway.clone(), self.config.gateway.models.embedding.clone())
    }

    /// Runs `f` as stage `name` inside the worker pool, recording its call
    /// count and wall time.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce(&Self) -> Result<T, ExperimentError> + Send) -> Result<T, ExperimentError>
    where
        T: Send,
    {
        let before = self.gateway.call_count();
        let started = Instant::now();
        tracing::info!(stage = name, "stage started");
        let this: &Self = self;
        let out = this.pool.install(|| f(this));
        *self.stage_calls.entry(name.to_string()).or_default() += self.gateway.call_count() - before;
        *self.timings.entry(name.to_string()).or_default() += started.elapsed().as_secs_f64();
        if let Err(e) = &out {
            tracing::error!(stage = name, error = %e, "stage failed");
        }
        out
    }

    pub fn corpus(&mut self) -> Result<&Corpus, ExperimentError> {
        if self.corpus.is_none() {
            let path = self.config.resolve(&self.config.corpus_path);
            self.corpus = Some(load_corpus(&path).map_err(|e| config_err(format!("{}: {e}", path.display())))?);
        }
        Ok(self.corpus.as_ref().expect("loaded"))
    }

    pub fn ground_truth(&mut self) -> Result<&BTreeMap<String, GroundTruth>, ExperimentError> {
        if self.ground_truth.is_none() {
            self.ground_truth = Some(load_ground_truth(&self.config.resolve(&self.config.evaluation.gt_workflows_path))?);
        }
        Ok(self.ground_truth.as_ref().expect("loaded"))
    }

    /// Selected intents, in sorted order.
    pub fn intents(&mut self) -> Result<Vec<String>, ExperimentError> {
        let selection = self.config.intents.clone();
        let corpus = self.corpus()?;
        let known: BTreeSet<String> = corpus.intents().map(str::to_string).collect();
        match selection {
            IntentSelection::All => Ok(known.into_iter().collect()),
            IntentSelection::Only(list) => {
                if let Some(missing) = list.iter().find(|i| !known.contains(*i)) {
                    return Err(config_err(format!("intent {missing:?} has no conversations in the corpus")));
                }
                Ok(list.into_iter().collect::<BTreeSet<_>>().into_iter().collect())
            }
        }
    }

    fn conversations_of(&mut self, intents: &[String]) -> Result<Vec<Conversation>, ExperimentError> {
        let corpus = self.corpus()?;
        Ok(intents.iter().flat_map(|i| corpus.filter_by_intent(i)).cloned().collect())
    }

    /// Procedural elements for every conversation of `intents`.
    pub fn extract_elements_stage(&mut self, intents: &[String]) -> Result<Vec<ExtractedElements>, ExperimentError> {
        let convs = self.conversations_of(intents)?;
        let model = self.chat(&self.config.gateway.models.elements.clone());
        let extracted = self.stage("extract-elements", |_| {
            convs
                .par_iter()
                .map(|c| extract_elements(c, &model))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| {
                    let gw = match &e {
                        crate::elements::ElementsError::Gateway(g) => Some(g),
                        _ => None,
                    };
                    ExperimentError::stage("extract-elements", &e, gw)
                })
        })?;
        for x in &extracted {
            self.writer.write_json(&format!("elements/{}.json", path_component(&x.conversation_id)), x)?;
        }
        Ok(extracted)
    }

    /// Conversation selection per intent.
    pub fn retrieve_stage(
        &mut self,
        intents: &[String],
        elements: &[ExtractedElements],
    ) -> Result<BTreeMap<String, SelectionResult>, ExperimentError> {
        let mut per_intent = BTreeMap::new();
        for intent in intents {
            let convs = self.conversations_of(std::slice::from_ref(intent))?;
            per_intent.insert(intent.clone(), convs);
        }
        let rc = self.config.retrieval.clone();
        let embedder = self.embedder();
        let by_id: BTreeMap<&str, &ExtractedElements> = elements.iter().map(|e| (e.conversation_id.as_str(), e)).collect();
        let selections = self.stage("retrieve", |_| {
            per_intent
                .iter()
                .map(|(intent, convs)| {
                    let fail = |e: crate::retrieval::RetrievalError| {
                        let gw = match &e {
                            crate::retrieval::RetrievalError::Gateway(g) => Some(g.clone()),
                            _ => None,
                        };
                        ExperimentError::stage("retrieve", &e, gw.as_ref())
                    };
                    let refs: Vec<&Conversation> = convs.iter().collect();
                    let selection = match rc.strategy {
                        SelectionStrategy::Random => {
                            let ids: Vec<String> = convs.iter().map(|c| c.id.clone()).collect();
                            select_random(&ids, rc.k, rc.seed).map_err(fail)?
                        }
                        SelectionStrategy::ConvSim => {
                            let set = embed_conversations(&refs, &embedder, rc.conv_max_chars).map_err(fail)?;
                            select_top_k(&set, rc.k).map_err(fail)?
                        }
                        SelectionStrategy::ProcSim | SelectionStrategy::ProcDiv => {
                            let items = convs
                                .iter()
                                .map(|c| {
                                    by_id.get(c.id.as_str()).map(|e| (c.id.clone(), e.elements.clone())).ok_or_else(|| {
                                        ExperimentError::Stage {
                                            stage: "retrieve".into(),
                                            message: format!("no procedural elements for {}", c.id),
                                            fixture_miss: None,
                                        }
                                    })
                                })
                                .collect::<Result<Vec<_>, _>>()?;
                            let set = embed_elements(&items, &embedder).map_err(fail)?;
                            if rc.strategy == SelectionStrategy::ProcSim {
                                select_top_k(&set, rc.k).map_err(fail)?
                            } else {
                                select_diverse(&set, rc.k).map_err(fail)?
                            }
                        }
                    };
                    Ok((intent.clone(), selection))
                })
                .collect::<Result<BTreeMap<_, _>, ExperimentError>>()
        })?;
        for (intent, s) in &selections {
            self.writer.write_json(&format!("selection/{}.json", path_component(intent)), s)?;
        }
        Ok(selections)
    }

    /// One workflow per (intent, order seed).
    pub fn generate_stage(
        &mut self,
        selections: &BTreeMap<String, SelectionResult>,
    ) -> Result<BTreeMap<String, Vec<WorkflowArtifact>>, ExperimentError> {
        let mut sources: BTreeMap<String, Vec<Conversation>> = BTreeMap::new();
        {
            let corpus = self.corpus()?;
            for (intent, s) in selections {
                let convs = s
                    .selected_ids
                    .iter()
                    .map(|id| corpus.get(id).cloned().ok_or_else(|| config_err(format!("selected id {id:?} not in corpus"))))
                    .collect::<Result<Vec<_>, _>>()?;
                sources.insert(intent.clone(), convs);
            }
        }
        let strategy = self.config.generation.strategy();
        let seeds = self.config.generation.order_seeds.clone();
        let model = self.chat(&self.config.gateway.models.generator.clone()).with_temperature(self.config.generation.temperature);
        let jobs: Vec<(&String, u64)> = sources.keys().flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
        let artifacts = self.stage("generate", |_| {
            jobs.par_iter()
                .map(|&(intent, seed)| {
                    let refs: Vec<&Conversation> = sources[intent].iter().collect();
                    generate_workflow(&refs, &strategy, &model, seed).map_err(|e| {
                        let gw = match &e {
                            crate::extraction::ExtractionError::Gateway(g) => Some(g),
                            _ => None,
                        };
                        ExperimentError::stage("generate", &e, gw)
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
        let mut out: BTreeMap<String, Vec<WorkflowArtifact>> = BTreeMap::new();
        for a in artifacts {
            self.writer.write_json(&format!("workflows/{}/seed-{}.json", path_component(&a.intent), a.order_seed), &a)?;
            out.entry(a.intent.clone()).or_default().push(a);
        }
        Ok(out)
    }

    /// Sub-flows and scenarios of each ground-truth workflow.
    pub fn decompose_stage(&mut self, intents: &[String]) -> Result<BTreeMap<String, GroundTruthPlan>, ExperimentError> {
        let gt = self.ground_truth()?.clone();
        let missing: Vec<&String> = intents.iter().filter(|i| !gt.contains_key(*i)).collect();
        if !missing.is_empty() {
            return Err(config_err(format!("no ground-truth workflow for {missing:?}")));
        }
        let models = self.e2e_models();
        let plans = self.stage("decompose", |_| {
            intents
                .par_iter()
                .map(|i| {
                    let g = &gt[i];
                    e2e::plan_ground_truth(i, &g.issue, &g.workflow, &models)
                        .map(|p| (i.clone(), p))
                        .map_err(|e| ExperimentError::stage("decompose", &e, e.gateway_error()))
                })
                .collect::<Result<BTreeMap<_, _>, _>>()
        })?;
        for (i, p) in &plans {
            self.writer.write_json(&format!("plans/{}.json", path_component(i)), p)?;
        }
        Ok(plans)
    }

    /// Simulates and judges every scenario against each workflow. Returns
    /// per-seed reports and their mean.
    pub fn evaluate_e2e_stage(
        &mut self,
        plans: &BTreeMap<String, GroundTruthPlan>,
        workflows: &BTreeMap<String, Vec<(u64, String)>>,
    ) -> Result<(Vec<(u64, EvalReport)>, EvalReport), ExperimentError> {
        let models = self.e2e_models();
        let cap = self.config.evaluation.turn_cap;
        let jobs: Vec<(&String, u64, &String)> =
            workflows.iter().flat_map(|(i, ws)| ws.iter().map(move |(s, t)| (i, *s, t))).collect();
        let results = self.stage("evaluate-e2e", |_| {
            jobs.par_iter()
                .map(|&(intent, seed, text)| {
                    let plan = plans.get(intent).ok_or_else(|| config_err(format!("no plan for intent {intent:?}")))?;
                    e2e::evaluate_prediction(plan, text, &models, cap)
                        .map(|r| (intent.clone(), seed, r))
                        .map_err(|e| ExperimentError::stage("evaluate-e2e", &e, e.gateway_error()))
                })
                .collect::<Result<Vec<_>, _>>()
        });
        let results = match results {
            Ok(r) => r,
            Err(e) => return Err(e),
        };
        let mut by_seed: BTreeMap<u64, BTreeMap<String, Vec<Outcome>>> = BTreeMap::new();
        for (intent, seed, scenario_results) in &results {
            for r in scenario_results {
                self.writer.write_json(
                    &format!("dialogs/{}/seed-{}/sf-{:02}.json", path_component(intent), seed, r.scenario.subflow_ref),
                    r,
                )?;
            }
            by_seed.entry(*seed).or_default().insert(intent.clone(), scenario_results.iter().map(ScenarioResult::outcome).collect());
        }
        let reports = self.stage("aggregate", |_| {
            by_seed
                .iter()
                .map(|(seed, outcomes)| {
                    e2e::aggregate(outcomes).map(|r| (*seed, r)).map_err(|e| ExperimentError::stage("aggregate", &e, None))
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
        let only: Vec<EvalReport> = reports.iter().map(|(_, r)| r.clone()).collect();
        let mean = e2e::mean_reports(&only).map_err(|e| ExperimentError::stage("aggregate", &e, None))?;
        for (seed, r) in &reports {
            self.writer.write_json(&format!("reports/seed-{seed}.json"), r)?;
        }
        self.writer.write_json(REPORT_FILE, &mean)?;
        self.writer.write_text("eval_report.txt", &e2e::render_table(&mean))?;
        Ok((reports, mean))
    }

    /// Alternative evaluators for every generated workflow.
    pub fn evaluate_alt_stage(
        &mut self,
        workflows: &BTreeMap<String, Vec<(u64, String)>>,
        methods: &[EvalMethod],
    ) -> Result<(), ExperimentError> {
        let gt = self.ground_truth()?.clone();
        let qa: Option<BTreeMap<String, Vec<QaPair>>> = match &self.config.evaluation.qa_pairs_path {
            Some(p) => Some(alt_eval::load_qa_pairs(&self.config.resolve(p)).map_err(config_err)?),
            None if methods.contains(&EvalMethod::QaBased) => {
                return Err(config_err("qa_based evaluator needs evaluation.qa_pairs_path"));
            }
            None => None,
        };
        let chat = self.chat(&self.config.gateway.models.evaluator.clone());
        let embedder = self.embedder();
        let lenient = self.config.evaluation.unparseable_as_incorrect;
        let jobs: Vec<(&String, u64, &String)> =
            workflows.iter().flat_map(|(i, ws)| ws.iter().map(move |(s, t)| (i, *s, t))).collect();
        let scores = self.stage("evaluate-alt", |_| {
            jobs.par_iter()
                .map(|&(intent, seed, text)| {
                    let g = gt.get(intent).ok_or_else(|| config_err(format!("no ground truth for {intent:?}")))?;
                    let inputs = AltInputs {
                        gt_text: &g.workflow,
                        qa_pairs: qa.as_ref().and_then(|m| m.get(intent)).map(Vec::as_slice),
                        unparseable_as_incorrect: lenient,
                    };
                    alt_eval::evaluate_alt(inputs, text, methods, &chat, Some(&embedder))
                        .map(|s| (intent.clone(), seed, s))
                        .map_err(|e| {
                            let gw = match &e {
                                alt_eval::AltEvalError::Gateway(g) => Some(g),
                                _ => None,
                            };
                            ExperimentError::stage("evaluate-alt", &e, gw)
                        })
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
        for (intent, seed, s) in scores {
            let keyed: BTreeMap<&str, &alt_eval::EvaluatorScore> = s.iter().map(|(m, v)| (m.as_str(), v)).collect();
            self.writer.write_json(&format!("alt/{}/seed-{seed}.json", path_component(&intent)), &keyed)?;
        }
        Ok(())
    }

    /// Per-conversation compliance against the ground-truth workflow plus rollups.
    pub fn compliance_stage(&mut self, corpus: &Corpus) -> Result<Vec<ComplianceReport>, ExperimentError> {
        let gt = self.ground_truth()?.clone();
        let chat = self.chat(&self.config.gateway.models.evaluator.clone());
        let convs: Vec<&Conversation> = corpus.conversations().iter().collect();
        if let Some(c) = convs.iter().find(|c| !gt.contains_key(&c.intent_label)) {
            return Err(config_err(format!("no ground-truth workflow for intent {:?}", c.intent_label)));
        }
        let reports = self.stage("check-compliance", |_| {
            convs
                .par_iter()
                .map(|c| {
                    alt_eval::check_compliance(c, &gt[&c.intent_label].workflow, &chat).map_err(|e| {
                        let gw = match &e {
                            alt_eval::AltEvalError::Gateway(g) => Some(g),
                            _ => None,
                        };
                        ExperimentError::stage("check-compliance", &e, gw)
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
        for r in &reports {
            self.writer.write_json(&format!("compliance/{}.json", path_component(&r.conversation_id)), r)?;
        }
        let rows = alt_eval::rollup(&reports);
        self.writer.write_json("compliance/rollup.json", &rows)?;
        self.writer.write_text("compliance/rollup.csv", &alt_eval::rollups_csv(&rows))?;
        Ok(reports)
    }

    /// Sub-flow descriptions of one intent's ground truth, from its graph or the LLM.
    pub fn subflows_for(&mut self, intent: &str, source: SubflowSource) -> Result<Vec<String>, ExperimentError> {
        let g = self.ground_truth()?.get(intent).cloned().ok_or_else(|| config_err(format!("no ground truth for {intent:?}")))?;
        match source {
            SubflowSource::Graph => {
                let graph = g.graph.ok_or_else(|| config_err(format!("ground truth for {intent:?} has no graph")))?;
                let paths = enumerate_paths(&graph).map_err(|e| ExperimentError::stage("decompose", &e, None))?;
                Ok(paths.into_iter().map(|p| p.description).collect())
            }
            SubflowSource::Llm => {
                let model = self.e2e_models().decomposer;
                self.stage("decompose", |_| {
                    crate::subflow::decompose_workflow_llm(&g.workflow, &model).map_err(|e| {
                        let gw = match &e {
                            crate::subflow::SubflowError::Gateway(g) => Some(g),
                            _ => None,
                        };
                        ExperimentError::stage("decompose", &e, gw)
                    })
                })
            }
        }
    }

    /// Synthetic conversations for each selected intent.
    pub fn synthesize_stage(&mut self, intents: &[String]) -> Result<Vec<Conversation>, ExperimentError> {
        let sc = self.config.synthesis.clone().ok_or_else(|| config_err("missing [synthesis] section"))?;
        let mut all = Vec::new();
        for intent in intents {
            let subflows = self.subflows_for(intent, sc.subflow_source)?;
            let workflow = self.ground_truth()?[intent].workflow.clone();
            let spec = SynthSpec {
                intent: intent.clone(),
                workflow_text: workflow,
                subflows,
                profiles_per_subflow: sc.profiles_per_subflow,
                conversations_per_pairing: sc.conversations_per_pairing,
                profile_pool: sc.profile_pool,
                profile_seed: sc.profile_seed,
            };
            let model = self.chat(&self.config.gateway.models.generator.clone()).with_temperature(sc.temperature);
            let result = self.stage("synthesize", |_| Ok(synth::run_synthesis(&spec, &model)))?;
            match result {
                Ok((convs, manifest)) => {
                    self.writer.write_json(&format!("synth/{}.manifest.json", path_component(intent)), &manifest)?;
                    all.extend(convs);
                }
                Err(synth::SynthError::Partial { conversations, failures }) => {
                    self.writer.write_json(&format!("synth/{}.failures.json", path_component(intent)), &failures)?;
                    let partial = Corpus::from_conversations(conversations).map_err(|e| ExperimentError::stage("synthesize", &e, None))?;
                    self.writer.write_text(&format!("synth/{}.partial.jsonl", path_component(intent)), &partial.to_jsonl())?;
                    return Err(ExperimentError::Stage {
                        stage: "synthesize".into(),
                        message: format!("{} conversations failed for {intent}", failures.len()),
                        fixture_miss: failures
                            .iter()
                            .find_map(|f| f.reason.strip_prefix("no fixture recorded for request ").map(str::to_string)),
                    });
                }
                Err(e) => {
                    let gw = match &e {
                        synth::SynthError::Gateway(g) => Some(g),
                        _ => None,
                    };
                    return Err(ExperimentError::stage("synthesize", &e, gw));
                }
            }
        }
        all.sort_by(|a, b| a.id.cmp(&b.id));
        let corpus = Corpus::from_conversations(all.clone()).map_err(|e| ExperimentError::stage("synthesize", &e, None))?;
        self.writer.write_text("synth/corpus.jsonl", &corpus.to_jsonl())?;
        Ok(all)
    }

    /// Writes `manifest.json` and `timings.json` and returns the manifest.
    pub fn finish(&mut self) -> Result<RunManifest, ExperimentError> {
        let manifest = RunManifest {
            run_id: self.config.run_id(),
            config: self.config.snapshot(),
            template_hashes: template_hashes(),
            fingerprints: self.gateway.fingerprints().into_iter().map(|f| f.to_string()).collect(),
            stage_calls: self.stage_calls.clone(),
            results: self.writer.written(),
        };
        self.writer.write_json(MANIFEST_FILE, &manifest)?;
        let timings = self.timings.clone();
        self.writer.write_json("timings.json", &timings)?;
        Ok(manifest)
    }

    /// Records a failure next to the partial artifacts.
    pub fn record_failure(&mut self, err: &ExperimentError) {
        let body = serde_json::json!({ "error": err.to_string(), "exit_code": err.exit_code() });
        if let Err(e) = self.writer.write_json("failure.json", &body) {
            tracing::warn!(error = %e, "could not record failure");
        }
    }
}

pub fn texts_of(workflows: &BTreeMap<String, Vec<WorkflowArtifact>>) -> BTreeMap<String, Vec<(u64, String)>> {
    workflows.iter().map(|(i, ws)| (i.clone(), ws.iter().map(|w| (w.order_seed, w.text.clone())).collect())).collect()
}

fn run_pipeline(s: &mut Session) -> Result<Option<EvalReport>, ExperimentError> {
    let intents = s.intents()?;
    let elements = match s.config.retrieval.strategy.source() {
        Some(crate::retrieval::EmbeddingSource::ProceduralElements) => s.extract_elements_stage(&intents)?,
        _ => Vec::new(),
    };
    let selections = s.retrieve_stage(&intents, &elements)?;
    let workflows = s.generate_stage(&selections)?;
    let texts = texts_of(&workflows);
    let mut report = None;
    if s.config.evaluation.runs_e2e() {
        let plans = s.decompose_stage(&intents)?;
        report = Some(s.evaluate_e2e_stage(&plans, &texts)?.1);
    }
    let methods = s.config.evaluation.alt_methods().map_err(config_err)?;
    if !methods.is_empty() {
        s.evaluate_alt_stage(&texts, &methods)?;
    }
    Ok(report)
}

/// Full pipeline through `gateway`; on failure the partial artifacts and a
/// `failure.json` stay in the run directory.
pub fn run_experiment_with(config: ExperimentConfig, gateway: Arc<Gateway>) -> Result<RunOutput, ExperimentError> {
    let mut s = Session::new(config, gateway)?;
    let run_dir = s.writer.root().to_path_buf();
    match run_pipeline(&mut s) {
        Ok(report) => {
            let manifest = s.finish()?;
            Ok(RunOutput { run_dir, manifest, report })
        }
        Err(e) => {
            s.record_failure(&e);
            Err(e)
        }
    }
}

pub fn run_experiment(config: ExperimentConfig) -> Result<RunOutput, ExperimentError> {
    let gateway = Arc::new(config.build_gateway(None)?);
    run_experiment_with(config, gateway)
}

/// Rebuilds the mean report from archived dialog files alone.
pub fn recompute_report(run_dir: &Path) -> Result<EvalReport, ExperimentError> {
    let mut by_seed: BTreeMap<u64, BTreeMap<String, Vec<Outcome>>> = BTreeMap::new();
    for (intent, seed, result) in archived_dialogs(run_dir)? {
        by_seed.entry(seed).or_default().entry(intent).or_default().push(result.outcome());
    }
    let reports = by_seed
        .values()
        .map(e2e::aggregate)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ExperimentError::stage("aggregate", &e, None))?;
    e2e::mean_reports(&reports).map_err(|e| ExperimentError::stage("aggregate", &e, None))
}

/// Every archived dialog as (intent dir, seed, result), in path order.
pub fn archived_dialogs(run_dir: &Path) -> Result<Vec<(String, u64, ScenarioResult)>, ExperimentError> {
    let root = run_dir.join("dialogs");
    let read_err = |p: &Path, e: &dyn fmt::Display| ExperimentError::Output { path: p.display().to_string(), reason: e.to_string() };
    let sorted = |p: &Path| -> Result<Vec<PathBuf>, ExperimentError> {
        let mut v: Vec<PathBuf> = fs::read_dir(p).map_err(|e| read_err(p, &e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        v.sort();
        Ok(v)
    };
    let mut out = Vec::new();
    for intent_dir in sorted(&root)? {
        let intent = intent_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        for seed_dir in sorted(&intent_dir)? {
            let name = seed_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let seed: u64 = name.strip_prefix("seed-").and_then(|s| s.parse().ok()).ok_or_else(|| read_err(&seed_dir, &"bad seed dir"))?;
            for file in sorted(&seed_dir)? {
                let text = fs::read_to_string(&file).map_err(|e| read_err(&file, &e))?;
                let r: ScenarioResult = serde_json::from_str(&text).map_err(|e| read_err(&file, &e))?;
                out.push((intent.clone(), seed, r));
            }
        }
    }
    Ok(out)
}

/// Runs the transcript validator over every archived dialog. Returns the
/// number checked or the list of violations.
pub fn validate_run_transcripts(run_dir: &Path) -> Result<usize, Vec<String>> {
    let dialogs = archived_dialogs(run_dir).map_err(|e| vec![e.to_string()])?;
    let errors: Vec<String> = dialogs
        .iter()
        .filter_map(|(i, s, r)| e2e::validate_transcript(&r.transcript).err().map(|e| format!("{i}/seed-{s}/sf-{}: {e}", r.scenario.subflow_ref)))
        .collect();
    if errors.is_empty() {
        Ok(dialogs.len())
    } else {
        Err(errors)
    }
}

/// Checks that every fingerprint in the manifest resolves to an intact fixture.
pub fn verify_fixtures(manifest: &RunManifest, fixtures_dir: &Path) -> Result<usize, Vec<String>> {
    let store = FixtureStore::new(fixtures_dir);
    let errors: Vec<String> = manifest
        .fingerprints
        .iter()
        .filter_map(|f| match RequestFingerprint::parse(f) {
            None => Some(format!("{f}: not a fingerprint")),
            Some(d) => store.verify(&d).err().map(|e| e.to_string()),
        })
        .collect();
    if errors.is_empty() {
        Ok(manifest.fingerprints.len())
    } else {
        Err(errors)
    }
}

/// Text rendering of a JSON report file: an E2E report, alt scores or a
/// compliance rollup.
pub fn render_report_value(value: &Value) -> Result<String, String> {
    if let Ok(report) = serde_json::from_value::<EvalReport>(value.clone()) {
        return Ok(e2e::render_table(&report));
    }
    if let Ok(rows) = serde_json::from_value::<Vec<alt_eval::ComplianceRollup>>(value.clone()) {
        let mut out = String::from("intent | conversations | F% | NA% | NF% | NC%\n");
        for r in rows {
            out.push_str(&format!(
                "{} | {} | {:.2} | {:.2} | {:.2} | {:.2}\n",
                r.intent, r.conversations, r.followed_pct, r.not_applicable_pct, r.not_followed_pct, r.non_compliant_pct
            ));
        }
        return Ok(out);
    }
    if let Ok(scores) = serde_json::from_value::<BTreeMap<String, alt_eval::EvaluatorScore>>(value.clone()) {
        let mut out = String::from("method | value | perfect match\n");
        for (m, s) in scores {
            out.push_str(&format!("{m} | {:.4} | {}\n", s.value, if s.perfect_match() { "yes" } else { "no" }));
        }
        return Ok(out);
    }
    Err("not a recognised report (expected an E2E report, alt scores or a compliance rollup)".into())
}
