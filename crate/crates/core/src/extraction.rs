//! Workflow generation from selected conversations.
//!
//! | strategy         | chat calls                                        |
//! |------------------|---------------------------------------------------|
//! | `basic`          | 1                                                 |
//! | `reflect`        | 3: draft, critique, revision                      |
//! | `plan`           | 2: plan, workflow                                 |
//! | `ensemble`       | width + 1: candidates, consolidation              |
//! | `qa_cot`         | discussion call(s) + extraction                   |
//! | `qa_cot_reflect` | as `qa_cot` plus one discussion revision          |
//!
//! Conversations are shuffled with `order_seed` before any prompt is built.
//! Ensemble candidate `i` uses the shuffle seeded by
//! `derive_seed(order_seed, i)`; the consolidation prompt uses the
//! `order_seed` order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{render_conversation, Conversation};
use crate::gateway::{ChatModel, GatewayError};
use crate::prompts::Template;
use crate::rng::{derive_seed, shuffle};

pub const DEFAULT_ENSEMBLE_WIDTH: usize = 4;
/// Guide/implementer exchanges allowed in multi-turn mode.
pub const MAX_QA_EXCHANGES: usize = 25;
pub const QA_STOP_TOKEN: &str = "NO FURTHER QUESTIONS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Basic,
    Reflect,
    Plan,
    Ensemble,
    QaCot,
    QaCotReflect,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Basic => "basic",
            StrategyKind::Reflect => "reflect",
            StrategyKind::Plan => "plan",
            StrategyKind::Ensemble => "ensemble",
            StrategyKind::QaCot => "qa_cot",
            StrategyKind::QaCotReflect => "qa_cot_reflect",
        }
    }

    pub fn uses_qa(self) -> bool {
        matches!(self, StrategyKind::QaCot | StrategyKind::QaCotReflect)
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "basic" => StrategyKind::Basic,
            "reflect" => StrategyKind::Reflect,
            "plan" => StrategyKind::Plan,
            "ensemble" => StrategyKind::Ensemble,
            "qa_cot" => StrategyKind::QaCot,
            "qa_cot_reflect" => StrategyKind::QaCotReflect,
            other => return Err(format!("unknown generation strategy {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaMode {
    SinglePass,
    MultiTurn,
}

impl FromStr for QaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single_pass" => Ok(QaMode::SinglePass),
            "multi_turn" => Ok(QaMode::MultiTurn),
            other => Err(format!("unknown qa mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_mode: Option<QaMode>,
    #[serde(default = "default_width")]
    pub ensemble_width: usize,
}

fn default_width() -> usize {
    DEFAULT_ENSEMBLE_WIDTH
}

impl Strategy {
    pub fn basic() -> Self {
        Self::of(StrategyKind::Basic)
    }

    pub fn of(kind: StrategyKind) -> Self {
        Self { kind, qa_mode: None, ensemble_width: DEFAULT_ENSEMBLE_WIDTH }
    }

    pub fn qa(kind: StrategyKind, mode: QaMode) -> Self {
        Self { kind, qa_mode: Some(mode), ensemble_width: DEFAULT_ENSEMBLE_WIDTH }
    }

    pub fn validate(&self) -> Result<(), ExtractionError> {
        if self.kind.uses_qa() != self.qa_mode.is_some() {
            return Err(ExtractionError::InvalidStrategy(format!(
                "qa_mode must be set exactly for qa_cot and qa_cot_reflect (kind {}, qa_mode {:?})",
                self.kind.as_str(),
                self.qa_mode
            )));
        }
        if self.ensemble_width == 0 {
            return Err(ExtractionError::InvalidStrategy("ensemble_width must be positive".into()));
        }
        Ok(())
    }

    /// Chat calls the strategy issues, when that number is fixed in advance.
    /// Multi-turn discussions end at a model-chosen point, so they return `None`.
    pub fn expected_calls(&self) -> Option<usize> {
        Some(match (self.kind, self.qa_mode) {
            (StrategyKind::Basic, _) => 1,
            (StrategyKind::Reflect, _) => 3,
            (StrategyKind::Plan, _) => 2,
            (StrategyKind::Ensemble, _) => self.ensemble_width + 1,
            (StrategyKind::QaCot, Some(QaMode::SinglePass)) => 2,
            (StrategyKind::QaCotReflect, Some(QaMode::SinglePass)) => 3,
            _ => return None,
        })
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.as_str())?;
        match self.qa_mode {
            Some(QaMode::SinglePass) => f.write_str("/single_pass"),
            Some(QaMode::MultiTurn) => f.write_str("/multi_turn"),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaRole {
    Guide,
    Implementer,
}

impl QaRole {
    pub fn label(self) -> &'static str {
        match self {
            QaRole::Guide => "Guide",
            QaRole::Implementer => "Implementer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaTurn {
    pub role: QaRole,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaTranscript {
    pub turns: Vec<QaTurn>,
    pub mode: QaMode,
    pub turn_cap_hit: bool,
    /// Model output the turns were parsed from, when produced in one piece.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

impl QaTranscript {
    /// The discussion as given to later prompts: the raw text when there is
    /// one, otherwise `Guide:` / `Implementer:` lines.
    pub fn discussion(&self) -> String {
        match &self.raw {
            Some(raw) => raw.trim().to_string(),
            None => render_turns(&self.turns),
        }
    }

    pub fn exchanges(&self) -> usize {
        self.turns.iter().filter(|t| t.role == QaRole::Guide).count()
    }
}

pub fn render_turns(turns: &[QaTurn]) -> String {
    turns.iter().map(|t| format!("{}: {}", t.role.label(), t.text)).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowArtifact {
    pub intent: String,
    pub text: String,
    pub strategy: Strategy,
    pub source_conversation_ids: Vec<String>,
    pub order_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_transcript: Option<QaTranscript>,
    pub intermediate_outputs: BTreeMap<String, String>,
    /// Hashes of the templates this artifact's prompts were built from.
    pub template_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractionError {
    #[error("no conversations to generate from")]
    EmptyConversationList,
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("model returned an empty workflow")]
    EmptyWorkflow,
    #[error("could not split discussion into Guide/Implementer turns")]
    Unsplittable { raw: String },
    #[error("discussion transcript is empty")]
    EmptyTranscript,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// `Conversation 1:` ... blocks in the given order.
pub fn conversations_block(convs: &[&Conversation]) -> String {
    convs
        .iter()
        .enumerate()
        .map(|(i, c)| format!("Conversation {}:\n{}", i + 1, render_conversation(c)))
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn shuffled<'a>(convs: &[&'a Conversation], seed: u64) -> Vec<&'a Conversation> {
    let mut out = convs.to_vec();
    shuffle(&mut out, seed);
    out
}

struct Chain<'a> {
    model: &'a ChatModel,
    used: BTreeMap<String, String>,
}

impl Chain<'_> {
    fn call(&mut self, template: Template, values: &[(&str, &str)]) -> Result<String, ExtractionError> {
        let prompt = template.fill(values).expect("template placeholders are static");
        self.used.insert(template.name().to_string(), template.hash());
        Ok(self.model.complete(&prompt)?)
    }
}

pub fn generate_workflow(
    convs: &[&Conversation],
    strategy: &Strategy,
    model: &ChatModel,
    order_seed: u64,
) -> Result<WorkflowArtifact, ExtractionError> {
    strategy.validate()?;
    let first = convs.first().ok_or(ExtractionError::EmptyConversationList)?;
    let ordered = shuffled(convs, order_seed);
    let block = conversations_block(&ordered);
    let mut chain = Chain { model, used: BTreeMap::new() };
    let mut inter = BTreeMap::new();
    let mut qa_transcript = None;

    let text = match strategy.kind {
        StrategyKind::Basic => chain.call(Template::Basic, &[("conversations", &block)])?,
        StrategyKind::Reflect => {
            let draft = chain.call(Template::Basic, &[("conversations", &block)])?;
            let feedback = chain.call(Template::Reflect, &[("workflow", draft.trim()), ("conversations", &block)])?;
            let revised = chain.call(
                Template::ReflectGenerate,
                &[("workflow", draft.trim()), ("feedback", feedback.trim()), ("conversations", &block)],
            )?;
            inter.insert("draft".into(), draft);
            inter.insert("feedback".into(), feedback);
            revised
        }
        StrategyKind::Plan => {
            let plan = chain.call(Template::Plan, &[("conversations", &block)])?;
            let wf = chain.call(Template::PlanGenerate, &[("plan", plan.trim()), ("conversations", &block)])?;
            inter.insert("plan".into(), plan);
            wf
        }
        StrategyKind::Ensemble => {
            let mut candidates = Vec::with_capacity(strategy.ensemble_width);
            for i in 0..strategy.ensemble_width {
                let order = shuffled(convs, derive_seed(order_seed, i as u64));
                let cand = chain.call(Template::Basic, &[("conversations", &conversations_block(&order))])?;
                inter.insert(format!("candidate_{}", i + 1), cand.clone());
                candidates.push(cand);
            }
            let workflows = candidates
                .iter()
                .enumerate()
                .map(|(i, c)| format!("Workflow {}:\n{}", i + 1, c.trim()))
                .collect::<Vec<_>>()
                .join("\n\n");
            let count = candidates.len().to_string();
            chain.call(
                Template::Ensemble,
                &[("workflow_count", &count), ("workflows", &workflows), ("conversations", &block)],
            )?
        }
        StrategyKind::QaCot | StrategyKind::QaCotReflect => {
            let mode = strategy.qa_mode.expect("validated");
            let mut transcript = qa_dialogue(&mut chain, &block, mode)?;
            inter.insert("discussion".into(), transcript.discussion());
            if strategy.kind == StrategyKind::QaCotReflect {
                transcript = qa_reflect(&mut chain, &transcript, &block)?;
                inter.insert("discussion_revised".into(), transcript.discussion());
            }
            let wf = chain.call(Template::QaExtract, &[("conversations", &block), ("discussion", &transcript.discussion())])?;
            qa_transcript = Some(transcript);
            wf
        }
    };

    let text = text.trim().to_string();
    if text.is_empty() {
        return Err(ExtractionError::EmptyWorkflow);
    }
    Ok(WorkflowArtifact {
        intent: first.intent_label.clone(),
        text,
        strategy: *strategy,
        source_conversation_ids: convs.iter().map(|c| c.id.clone()).collect(),
        order_seed,
        qa_transcript,
        intermediate_outputs: inter,
        template_hashes: chain.used,
    })
}

/// Guide/implementer discussion over `convs` in the given order.
pub fn simulate_qa_dialogue(convs: &[&Conversation], mode: QaMode, model: &ChatModel) -> Result<QaTranscript, ExtractionError> {
    if convs.is_empty() {
        return Err(ExtractionError::EmptyConversationList);
    }
    let mut chain = Chain { model, used: BTreeMap::new() };
    qa_dialogue(&mut chain, &conversations_block(convs), mode)
}

fn qa_dialogue(chain: &mut Chain<'_>, block: &str, mode: QaMode) -> Result<QaTranscript, ExtractionError> {
    match mode {
        QaMode::SinglePass => {
            let raw = chain.call(Template::QaCot, &[("conversations", block)])?;
            let turns = split_discussion(&raw)?;
            Ok(QaTranscript { turns, mode, turn_cap_hit: false, raw: Some(raw) })
        }
        QaMode::MultiTurn => {
            let mut turns: Vec<QaTurn> = Vec::new();
            for _ in 0..MAX_QA_EXCHANGES {
                let discussion = discussion_so_far(&turns);
                let question = chain.call(Template::QaGuide, &[("conversations", block), ("discussion", &discussion)])?;
                if question.contains(QA_STOP_TOKEN) {
                    return Ok(QaTranscript { turns, mode, turn_cap_hit: false, raw: None });
                }
                let question = strip_label(question.trim(), QaRole::Guide).to_string();
                turns.push(QaTurn { role: QaRole::Guide, text: question.clone() });
                let answer = chain.call(
                    Template::QaImplementer,
                    &[("conversations", block), ("discussion", &discussion_so_far(&turns)), ("question", &question)],
                )?;
                let answer = strip_label(answer.trim(), QaRole::Implementer).to_string();
                turns.push(QaTurn { role: QaRole::Implementer, text: answer });
            }
            Ok(QaTranscript { turns, mode, turn_cap_hit: true, raw: None })
        }
    }
}

fn discussion_so_far(turns: &[QaTurn]) -> String {
    if turns.is_empty() {
        "(no questions asked yet)".to_string()
    } else {
        render_turns(turns)
    }
}

fn strip_label(text: &str, role: QaRole) -> &str {
    text.strip_prefix(&format!("{}:", role.label())).map(str::trim_start).unwrap_or(text)
}

/// Revises a discussion; the caller keeps the original.
pub fn reflect_qa_transcript(
    transcript: &QaTranscript,
    convs: &[&Conversation],
    model: &ChatModel,
) -> Result<QaTranscript, ExtractionError> {
    let mut chain = Chain { model, used: BTreeMap::new() };
    qa_reflect(&mut chain, transcript, &conversations_block(convs))
}

fn qa_reflect(chain: &mut Chain<'_>, transcript: &QaTranscript, block: &str) -> Result<QaTranscript, ExtractionError> {
    if transcript.turns.is_empty() {
        return Err(ExtractionError::EmptyTranscript);
    }
    let raw = chain.call(Template::QaReflect, &[("discussion", &transcript.discussion()), ("conversations", block)])?;
    let turns = split_discussion(&raw)?;
    Ok(QaTranscript { turns, mode: transcript.mode, turn_cap_hit: transcript.turn_cap_hit, raw: Some(raw) })
}

/// Splits text on line-leading `Guide:` / `Implementer:` labels (markdown
/// bold around the label is tolerated). Unlabeled lines continue the
/// current turn; text before the first label is dropped.
pub fn split_discussion(raw: &str) -> Result<Vec<QaTurn>, ExtractionError> {
    let mut turns: Vec<QaTurn> = Vec::new();
    let mut preamble = false;
    for line in raw.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let unbolded = trimmed.trim_start_matches("**");
        let labelled = [QaRole::Guide, QaRole::Implementer].into_iter().find_map(|role| {
            let rest = unbolded.strip_prefix(role.label())?;
            let rest = rest.strip_prefix(":**").or_else(|| rest.strip_prefix("**:")).or_else(|| rest.strip_prefix(':'))?;
            Some((role, rest.trim()))
        });
        match (labelled, turns.last_mut()) {
            (Some((role, rest)), _) => turns.push(QaTurn { role, text: rest.to_string() }),
            (None, Some(last)) => {
                if !last.text.is_empty() {
                    last.text.push('\n');
                }
                last.text.push_str(trimmed);
            }
            (None, None) => preamble = true,
        }
    }
    if preamble {
        tracing::warn!("discarded unlabeled text before the first Guide/Implementer line");
    }
    if turns.is_empty() {
        return Err(ExtractionError::Unsplittable { raw: raw.to_string() });
    }
    Ok(turns)
}
