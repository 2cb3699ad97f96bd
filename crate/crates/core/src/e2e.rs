//! End-to-end evaluation of a predicted workflow.
//!
//! 1. decompose the ground-truth workflow into sub-flows;
//! 2. map each sub-flow to user and system information;
//! 3. attach the expected outcome as success criteria;
//! 4. simulate a dialog between a customer bot and an agent bot that follows
//!    the predicted workflow;
//! 5. judge whether the dialog met the criteria.
//!
//! Scores: macro accuracy is the mean of per-intent accuracies, micro is
//! pooled successes over pooled sub-flows, `avg_utt` is the mean utterance
//! count of all simulated dialogs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::Speaker;
use crate::elements::JSON_REPAIR_SUFFIX;
use crate::gateway::{ChatModel, GatewayError};
use crate::prompts::Template;
use crate::subflow::{decompose_workflow_llm, SubflowError};
use crate::text::extract_json_payload;

pub const DEFAULT_TURN_CAP: usize = 30;
pub const DONE_TOKEN: &str = "DONE";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub subflow_ref: usize,
    pub subflow: String,
    pub user_information: Vec<String>,
    pub system_information: Vec<String>,
    pub success_criteria: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndedBy {
    AgentDone,
    TurnCap,
    GatewayError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogTurn {
    pub role: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogTranscript {
    pub subflow_ref: usize,
    pub turns: Vec<DialogTurn>,
    pub ended_by: EndedBy,
    /// Stored utterances; a bare `DONE` reply is never stored.
    pub utterance_count: usize,
    pub turn_cap: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub successful: bool,
    pub explanation: String,
}

#[derive(Debug, Error)]
pub enum E2eError {
    #[error("scenario for sub-flow {subflow}: schema violation at {key:?}: {reason}")]
    ScenarioSchema { subflow: usize, key: String, reason: String },
    #[error("judge output unparseable after retry: {reason}")]
    JudgeUnparseable { raw: String, reason: String },
    #[error("nothing to aggregate{0}")]
    EmptyAggregate(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("dialog for sub-flow {}: {error}", .transcript.subflow_ref)]
    Dialog { transcript: Box<DialogTranscript>, error: GatewayError },
    #[error(transparent)]
    Subflow(#[from] SubflowError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl E2eError {
    pub fn gateway_error(&self) -> Option<&GatewayError> {
        match self {
            E2eError::Gateway(e) | E2eError::Dialog { error: e, .. } => Some(e),
            E2eError::Subflow(SubflowError::Gateway(e)) => Some(e),
            _ => None,
        }
    }
}

pub fn scenario_prompt(gt_workflow_text: &str, subflow: &str) -> String {
    Template::Scenario.fill(&[("policy", gt_workflow_text.trim()), ("scenario", subflow)]).expect("scenario template")
}

pub fn parse_scenario(raw: &str, subflow_ref: usize, subflow: &str) -> Result<Scenario, E2eError> {
    let bad = |key: &str, reason: &str| E2eError::ScenarioSchema { subflow: subflow_ref, key: key.into(), reason: reason.into() };
    let payload = extract_json_payload(raw).ok_or_else(|| bad("$", "no JSON object found"))?;
    let value: Value = serde_json::from_str(payload).map_err(|e| bad("$", &e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| bad("$", "expected an object"))?;
    let list = |key: &str| -> Result<Vec<String>, E2eError> {
        match obj.get(key) {
            None => Err(bad(key, "missing")),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| v.as_str().map(|s| s.trim().to_string()).ok_or_else(|| bad(key, "items must be strings")))
                .filter(|r| !matches!(r, Ok(s) if s.is_empty()))
                .collect(),
            Some(Value::String(s)) if s.trim().is_empty() => Ok(vec![]),
            Some(Value::String(s)) => Ok(vec![s.trim().to_string()]),
            Some(_) => Err(bad(key, "expected a list of strings")),
        }
    };
    let user_information = list("user information")?;
    let system_information = list("system information")?;
    let outcome = obj
        .get("outcome")
        .ok_or_else(|| bad("outcome", "missing"))?
        .as_str()
        .ok_or_else(|| bad("outcome", "expected a string"))?
        .trim();
    if outcome.is_empty() {
        return Err(bad("outcome", "empty"));
    }
    Ok(Scenario {
        subflow_ref,
        subflow: subflow.to_string(),
        user_information,
        system_information,
        success_criteria: outcome.to_string(),
    })
}

/// One scenario per sub-flow description, each parsed with one repair retry.
pub fn build_scenarios(gt_workflow_text: &str, subflows: &[String], model: &ChatModel) -> Result<Vec<Scenario>, E2eError> {
    if subflows.is_empty() {
        return Err(E2eError::Invalid("no sub-flows to map to scenarios".into()));
    }
    subflows
        .par_iter()
        .enumerate()
        .map(|(i, sf)| {
            let prompt = scenario_prompt(gt_workflow_text, sf);
            match parse_scenario(&model.complete(&prompt)?, i, sf) {
                Ok(s) => Ok(s),
                Err(_) => parse_scenario(&model.complete(&format!("{prompt}{JSON_REPAIR_SUFFIX}"))?, i, sf),
            }
        })
        .collect()
}

fn bullet_list(items: &[String]) -> String {
    if items.is_empty() {
        "(none)".to_string()
    } else {
        items.iter().map(|s| format!("- {s}")).collect::<Vec<_>>().join("\n")
    }
}

pub fn render_dialog(turns: &[DialogTurn]) -> String {
    turns.iter().map(|t| format!("{}: {}", t.role.label(), t.text)).collect::<Vec<_>>().join("\n")
}

fn history(turns: &[DialogTurn]) -> String {
    if turns.is_empty() {
        "(the conversation has not started)".to_string()
    } else {
        render_dialog(turns)
    }
}

pub fn customer_prompt(issue: &str, scenario: &Scenario, turns: &[DialogTurn]) -> String {
    Template::CustomerBot
        .fill(&[("issue", issue), ("info", &bullet_list(&scenario.user_information)), ("history", &history(turns))])
        .expect("customer template")
}

pub fn agent_prompt(workflow: &str, scenario: &Scenario, turns: &[DialogTurn]) -> String {
    Template::AgentBot
        .fill(&[("policy", workflow.trim()), ("info", &bullet_list(&scenario.system_information)), ("history", &history(turns))])
        .expect("agent template")
}

/// Splits an agent reply into its content and whether it ends the dialog.
/// Terminal when the trimmed reply is `DONE` or ends with the standalone
/// word `DONE` (surrounding quotes and punctuation ignored).
pub fn split_done(reply: &str) -> (String, bool) {
    let is_trail = |c: char| c.is_whitespace() || matches!(c, '"' | '\'' | '`' | '*' | '.' | '!' | ')' | ']');
    let core = reply.trim_end_matches(is_trail);
    if let Some(before) = core.strip_suffix(DONE_TOKEN) {
        if before.chars().last().is_none_or(|c| !c.is_alphanumeric() && c != '_') {
            let opener = |c: char| c.is_whitespace() || matches!(c, '"' | '\'' | '`' | '*' | '(' | '[' | '-' | ':');
            return (before.trim_end_matches(opener).trim().to_string(), true);
        }
    }
    (reply.trim().to_string(), false)
}

/// Customer opens; roles alternate until the agent says DONE or `turn_cap`
/// utterances are stored. A gateway failure returns the partial transcript.
pub fn simulate_dialog(
    scenario: &Scenario,
    issue: &str,
    predicted_workflow: &str,
    customer: &ChatModel,
    agent: &ChatModel,
    turn_cap: usize,
) -> Result<DialogTranscript, E2eError> {
    if predicted_workflow.trim().is_empty() {
        return Err(E2eError::Invalid("predicted workflow is empty".into()));
    }
    if turn_cap < 2 {
        return Err(E2eError::Invalid(format!("turn cap must be at least 2, got {turn_cap}")));
    }
    let mut turns: Vec<DialogTurn> = Vec::new();
    let finish = |turns: Vec<DialogTurn>, ended_by| DialogTranscript {
        subflow_ref: scenario.subflow_ref,
        utterance_count: turns.len(),
        turns,
        ended_by,
        turn_cap,
    };
    while turns.len() < turn_cap {
        let customer_turn = turns.len() % 2 == 0;
        let reply = if customer_turn {
            customer.complete(&customer_prompt(issue, scenario, &turns))
        } else {
            agent.complete(&agent_prompt(predicted_workflow, scenario, &turns))
        };
        let reply = match reply {
            Ok(r) => r,
            Err(error) => {
                return Err(E2eError::Dialog { transcript: Box::new(finish(turns, EndedBy::GatewayError)), error });
            }
        };
        if customer_turn {
            turns.push(DialogTurn { role: Speaker::Customer, text: reply.trim().to_string() });
            continue;
        }
        let (content, done) = split_done(&reply);
        if done {
            if !content.is_empty() {
                turns.push(DialogTurn { role: Speaker::Agent, text: content });
            }
            return Ok(finish(turns, EndedBy::AgentDone));
        }
        turns.push(DialogTurn { role: Speaker::Agent, text: content });
    }
    Ok(finish(turns, EndedBy::TurnCap))
}

/// Structural checks every archived transcript must pass.
pub fn validate_transcript(t: &DialogTranscript) -> Result<(), String> {
    if t.turns.is_empty() {
        return Err("transcript has no turns".into());
    }
    if t.turns[0].role != Speaker::Customer {
        return Err("first turn is not the customer".into());
    }
    for (i, pair) in t.turns.windows(2).enumerate() {
        if pair[0].role == pair[1].role {
            return Err(format!("turns {i} and {} share a role", i + 1));
        }
    }
    if t.utterance_count != t.turns.len() {
        return Err(format!("utterance_count {} != {} turns", t.utterance_count, t.turns.len()));
    }
    if let Some(i) = t.turns.iter().position(|x| x.role == Speaker::Agent && x.text.trim() == DONE_TOKEN) {
        return Err(format!("turn {i} is a bare DONE marker"));
    }
    if t.turns.len() > t.turn_cap {
        return Err(format!("{} turns exceed the cap of {}", t.turns.len(), t.turn_cap));
    }
    match t.ended_by {
        EndedBy::TurnCap if t.turns.len() != t.turn_cap => Err("ended_by turn_cap below the cap".into()),
        EndedBy::AgentDone if t.turns.last().is_some_and(|x| x.role == Speaker::Agent && split_done(&x.text).1) => {
            Err("stored agent turn still carries DONE".into())
        }
        _ => Ok(()),
    }
}

pub fn judge_prompt(transcript: &DialogTranscript, gt_workflow_text: &str, success_criteria: &str) -> String {
    Template::Judge
        .fill(&[("policy", gt_workflow_text.trim()), ("outcome", success_criteria), ("conversation", &render_dialog(&transcript.turns))])
        .expect("judge template")
}

pub fn parse_judgment(raw: &str) -> Result<Judgment, String> {
    let payload = extract_json_payload(raw).ok_or("no JSON object found")?;
    let value: Value = serde_json::from_str(payload).map_err(|e| e.to_string())?;
    let successful = match value.get("successful") {
        Some(Value::String(s)) => match s.trim().to_ascii_lowercase().as_str() {
            "yes" => true,
            "no" => false,
            other => return Err(format!("\"successful\" must be yes or no, got {other:?}")),
        },
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err("\"successful\" must be yes or no".into()),
        None => return Err("missing \"successful\"".into()),
    };
    let explanation = value.get("explanation").and_then(Value::as_str).map(str::trim).unwrap_or_default();
    if explanation.is_empty() {
        return Err("missing or empty \"explanation\"".into());
    }
    Ok(Judgment { successful, explanation: explanation.to_string() })
}

pub fn judge_success(
    transcript: &DialogTranscript,
    gt_workflow_text: &str,
    success_criteria: &str,
    model: &ChatModel,
) -> Result<Judgment, E2eError> {
    if transcript.turns.is_empty() {
        return Err(E2eError::Invalid("cannot judge an empty transcript".into()));
    }
    let prompt = judge_prompt(transcript, gt_workflow_text, success_criteria);
    match parse_judgment(&model.complete(&prompt)?) {
        Ok(j) => Ok(j),
        Err(_) => {
            let raw = model.complete(&format!("{prompt}{JSON_REPAIR_SUFFIX}"))?;
            parse_judgment(&raw).map_err(|reason| E2eError::JudgeUnparseable { raw, reason })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub success: bool,
    pub utterances: usize,
}

fn round4<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64((v * 10_000.0).round() / 10_000.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentResult {
    pub outcomes: Vec<bool>,
    pub utterances: Vec<usize>,
    pub correct: usize,
    pub total: usize,
    #[serde(serialize_with = "round4")]
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_intent: BTreeMap<String, IntentResult>,
    #[serde(rename = "macro")]
    pub macro_accuracy: f64,
    #[serde(rename = "micro")]
    pub micro_accuracy: f64,
    pub avg_utt: f64,
}

pub fn aggregate(outcomes: &BTreeMap<String, Vec<Outcome>>) -> Result<EvalReport, E2eError> {
    if outcomes.is_empty() {
        return Err(E2eError::EmptyAggregate(String::new()));
    }
    let mut per_intent = BTreeMap::new();
    let (mut correct_all, mut total_all, mut utt_sum) = (0usize, 0usize, 0usize);
    for (intent, list) in outcomes {
        if list.is_empty() {
            return Err(E2eError::EmptyAggregate(format!(" for intent {intent:?}")));
        }
        let correct = list.iter().filter(|o| o.success).count();
        correct_all += correct;
        total_all += list.len();
        utt_sum += list.iter().map(|o| o.utterances).sum::<usize>();
        per_intent.insert(
            intent.clone(),
            IntentResult {
                outcomes: list.iter().map(|o| o.success).collect(),
                utterances: list.iter().map(|o| o.utterances).collect(),
                correct,
                total: list.len(),
                accuracy: correct as f64 / list.len() as f64,
            },
        );
    }
    let macro_accuracy = per_intent.values().map(|r: &IntentResult| r.accuracy).sum::<f64>() / per_intent.len() as f64;
    Ok(EvalReport {
        per_intent,
        macro_accuracy,
        micro_accuracy: correct_all as f64 / total_all as f64,
        avg_utt: utt_sum as f64 / total_all as f64,
    })
}

/// Arithmetic mean of several reports over the same intents (one report per
/// generated workflow). Outcome lists are concatenated.
pub fn mean_reports(reports: &[EvalReport]) -> Result<EvalReport, E2eError> {
    let first = reports.first().ok_or_else(|| E2eError::EmptyAggregate(" (no reports)".into()))?;
    let n = reports.len() as f64;
    for r in reports {
        if r.per_intent.keys().ne(first.per_intent.keys()) {
            return Err(E2eError::Invalid("reports cover different intents".into()));
        }
    }
    let per_intent = first
        .per_intent
        .keys()
        .map(|intent| {
            let parts: Vec<&IntentResult> = reports.iter().map(|r| &r.per_intent[intent]).collect();
            let result = IntentResult {
                outcomes: parts.iter().flat_map(|p| p.outcomes.iter().copied()).collect(),
                utterances: parts.iter().flat_map(|p| p.utterances.iter().copied()).collect(),
                correct: parts.iter().map(|p| p.correct).sum(),
                total: parts.iter().map(|p| p.total).sum(),
                accuracy: parts.iter().map(|p| p.accuracy).sum::<f64>() / n,
            };
            (intent.clone(), result)
        })
        .collect();
    Ok(EvalReport {
        per_intent,
        macro_accuracy: reports.iter().map(|r| r.macro_accuracy).sum::<f64>() / n,
        micro_accuracy: reports.iter().map(|r| r.micro_accuracy).sum::<f64>() / n,
        avg_utt: reports.iter().map(|r| r.avg_utt).sum::<f64>() / n,
    })
}

pub fn render_table(report: &EvalReport) -> String {
    let width = report.per_intent.keys().map(String::len).max().unwrap_or(0).max("intent".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$} | sub-flows | correct | accuracy", "intent");
    let _ = writeln!(out, "{}-+-----------+---------+---------", "-".repeat(width));
    for (intent, r) in &report.per_intent {
        let _ = writeln!(out, "{intent:<width$} | {:>9} | {:>7} | {:>8.4}", r.total, r.correct, r.accuracy);
    }
    let _ = writeln!(
        out,
        "macro {:.4} | micro {:.4} | #utt {:.2}",
        report.macro_accuracy, report.micro_accuracy, report.avg_utt
    );
    out
}

/// Chat models for each evaluation role.
#[derive(Debug, Clone)]
pub struct E2eModels {
    pub decomposer: ChatModel,
    pub scenario: ChatModel,
    pub customer: ChatModel,
    pub agent: ChatModel,
    pub judge: ChatModel,
}

impl E2eModels {
    pub fn uniform(model: ChatModel) -> Self {
        Self { decomposer: model.clone(), scenario: model.clone(), customer: model.clone(), agent: model.clone(), judge: model }
    }
}

/// Steps 1-3 for one ground-truth workflow; reusable across predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPlan {
    pub intent: String,
    pub issue: String,
    pub workflow: String,
    pub subflows: Vec<String>,
    pub scenarios: Vec<Scenario>,
}

pub fn plan_ground_truth(intent: &str, issue: &str, gt_workflow: &str, models: &E2eModels) -> Result<GroundTruthPlan, E2eError> {
    let subflows = decompose_workflow_llm(gt_workflow, &models.decomposer)?;
    let scenarios = build_scenarios(gt_workflow, &subflows, &models.scenario)?;
    Ok(GroundTruthPlan { intent: intent.into(), issue: issue.into(), workflow: gt_workflow.into(), subflows, scenarios })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub transcript: DialogTranscript,
    pub judgment: Judgment,
}

impl ScenarioResult {
    pub fn outcome(&self) -> Outcome {
        Outcome { success: self.judgment.successful, utterances: self.transcript.utterance_count }
    }
}

/// Steps 4-5 for one predicted workflow, scenarios in parallel, results in
/// scenario order.
pub fn evaluate_prediction(
    plan: &GroundTruthPlan,
    predicted_workflow: &str,
    models: &E2eModels,
    turn_cap: usize,
) -> Result<Vec<ScenarioResult>, E2eError> {
    plan.scenarios
        .par_iter()
        .map(|scenario| {
            let transcript = simulate_dialog(scenario, &plan.issue, predicted_workflow, &models.customer, &models.agent, turn_cap)?;
            let judgment = judge_success(&transcript, &plan.workflow, &scenario.success_criteria, &models.judge)?;
            Ok(ScenarioResult { scenario: scenario.clone(), transcript, judgment })
        })
        .collect()
}
