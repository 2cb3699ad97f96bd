//! Alternative workflow evaluators, conversation compliance checking and
//! agreement statistics.
//!
//! Formula-based scores:
//! - embedding: `1 / (1 - cos(ref, pred))`
//! - edit distance: `1 / #edits`
//! - step accuracy: covered reference steps over all reference steps
//!
//! The first two are undefined for identical workflows; they are capped at
//! [`PERFECT_MATCH_CAP`] and flagged with `perfect_match: true` in details.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{render_conversation, Conversation};
use crate::elements::JSON_REPAIR_SUFFIX;
use crate::gateway::{ChatModel, EmbeddingModel, EmbeddingVector, GatewayError};
use crate::prompts::Template;
use crate::retrieval::{cosine_similarity, RetrievalError};
use crate::text::{extract_json_payload, numbered_list, parse_numbered_steps};

pub const PERFECT_MATCH_CAP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    QaBased,
    Embedding,
    EditDistance,
    StepAccuracy,
    Likert,
}

impl EvalMethod {
    pub const ALL: [EvalMethod; 5] =
        [EvalMethod::QaBased, EvalMethod::Embedding, EvalMethod::EditDistance, EvalMethod::StepAccuracy, EvalMethod::Likert];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMethod::QaBased => "qa_based",
            EvalMethod::Embedding => "embedding",
            EvalMethod::EditDistance => "edit_distance",
            EvalMethod::StepAccuracy => "step_accuracy",
            EvalMethod::Likert => "likert",
        }
    }
}

impl std::str::FromStr for EvalMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown evaluator {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorScore {
    pub method: EvalMethod,
    pub value: f64,
    pub details: Value,
}

impl EvaluatorScore {
    pub fn perfect_match(&self) -> bool {
        self.details.get("perfect_match").and_then(Value::as_bool).unwrap_or(false)
    }
}

#[derive(Debug, Error)]
pub enum AltEvalError {
    #[error("{method} response unparseable: {reason}")]
    Unparseable { method: &'static str, reason: String, raw: String },
    #[error("likert score {0} outside 1..=100")]
    OutOfRange(i64),
    #[error("expected {expected} step verdicts, got {found}")]
    VerdictCount { expected: usize, found: usize },
    #[error("compliance response is missing {0}")]
    MissingRule(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("qa pairs file {path}: {reason}")]
    PairsFile { path: String, reason: String },
}

fn unparseable(method: &'static str, reason: impl Into<String>, raw: &str) -> AltEvalError {
    AltEvalError::Unparseable { method, reason: reason.into(), raw: raw.to_string() }
}

fn require_text(what: &str, text: &str) -> Result<(), AltEvalError> {
    if text.trim().is_empty() {
        Err(AltEvalError::Invalid(format!("{what} is empty")))
    } else {
        Ok(())
    }
}

fn inverse_with_cap(denominator: f64) -> (f64, bool) {
    if denominator <= 1.0 / PERFECT_MATCH_CAP {
        (PERFECT_MATCH_CAP, true)
    } else {
        (1.0 / denominator, false)
    }
}

pub fn score_embedding_values(reference: &[f64], prediction: &[f64]) -> Result<EvaluatorScore, AltEvalError> {
    let cos = cosine_similarity(reference, prediction)?;
    let distance = 1.0 - cos;
    let (value, perfect) = inverse_with_cap(distance);
    Ok(EvaluatorScore {
        method: EvalMethod::Embedding,
        value,
        details: json!({"cosine_similarity": cos, "cosine_distance": distance, "perfect_match": perfect}),
    })
}

pub fn score_embedding(reference: &EmbeddingVector, prediction: &EmbeddingVector) -> Result<EvaluatorScore, AltEvalError> {
    score_embedding_values(&reference.values, &prediction.values)
}

pub fn embed_and_score(gt_text: &str, pred_text: &str, model: &EmbeddingModel) -> Result<EvaluatorScore, AltEvalError> {
    require_text("reference workflow", gt_text)?;
    require_text("predicted workflow", pred_text)?;
    let v = model.embed(&[gt_text.to_string(), pred_text.to_string()])?;
    score_embedding(&v[0], &v[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    Insertion,
    Deletion,
    Reordering,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOperation {
    #[serde(rename = "type")]
    pub kind: EditKind,
    #[serde(default)]
    pub step: String,
}

pub fn parse_edit_operations(raw: &str) -> Result<Vec<EditOperation>, AltEvalError> {
    #[derive(Deserialize)]
    struct Alignment {
        operations: Vec<EditOperation>,
    }
    let payload = extract_json_payload(raw).ok_or_else(|| unparseable("edit_distance", "no JSON found", raw))?;
    let parsed: Alignment = serde_json::from_str(payload).map_err(|e| unparseable("edit_distance", e.to_string(), raw))?;
    Ok(parsed.operations)
}

pub fn edit_score(operations: Vec<EditOperation>) -> EvaluatorScore {
    let (value, perfect) = inverse_with_cap(operations.len() as f64);
    EvaluatorScore {
        method: EvalMethod::EditDistance,
        value,
        details: json!({"edits": operations.len(), "operations": operations, "perfect_match": perfect}),
    }
}

fn complete_with_retry<T>(
    model: &ChatModel,
    prompt: &str,
    parse: impl Fn(&str) -> Result<T, AltEvalError>,
) -> Result<T, AltEvalError> {
    match parse(&model.complete(prompt)?) {
        Ok(v) => Ok(v),
        Err(AltEvalError::Unparseable { .. }) => parse(&model.complete(&format!("{prompt}{JSON_REPAIR_SUFFIX}"))?),
        Err(e) => Err(e),
    }
}

pub fn align_and_score_edit(gt_text: &str, pred_text: &str, model: &ChatModel) -> Result<EvaluatorScore, AltEvalError> {
    require_text("reference workflow", gt_text)?;
    require_text("predicted workflow", pred_text)?;
    let prompt = Template::AltEdit.fill(&[("reference", gt_text.trim()), ("prediction", pred_text.trim())]).expect("alt_edit");
    complete_with_retry(model, &prompt, parse_edit_operations).map(edit_score)
}

pub fn parse_step_verdicts(raw: &str, expected: usize) -> Result<Vec<bool>, AltEvalError> {
    #[derive(Deserialize)]
    struct Verdict {
        step: usize,
        covered: bool,
    }
    #[derive(Deserialize)]
    struct Verdicts {
        verdicts: Vec<Verdict>,
    }
    let payload = extract_json_payload(raw).ok_or_else(|| unparseable("step_accuracy", "no JSON found", raw))?;
    let parsed: Verdicts = serde_json::from_str(payload).map_err(|e| unparseable("step_accuracy", e.to_string(), raw))?;
    if parsed.verdicts.len() != expected {
        return Err(AltEvalError::VerdictCount { expected, found: parsed.verdicts.len() });
    }
    let mut out = vec![None; expected];
    for v in parsed.verdicts {
        match out.get_mut(v.step.wrapping_sub(1)) {
            Some(slot @ None) => *slot = Some(v.covered),
            Some(Some(_)) => return Err(unparseable("step_accuracy", format!("step {} judged twice", v.step), raw)),
            None => return Err(unparseable("step_accuracy", format!("step {} out of range", v.step), raw)),
        }
    }
    Ok(out.into_iter().map(|v| v.expect("all steps filled")).collect())
}

pub fn step_score(verdicts: &[bool]) -> EvaluatorScore {
    let covered = verdicts.iter().filter(|&&c| c).count();
    EvaluatorScore {
        method: EvalMethod::StepAccuracy,
        value: covered as f64 / verdicts.len() as f64,
        details: json!({"covered": covered, "total": verdicts.len(), "verdicts": verdicts}),
    }
}

pub fn score_steps(gt_steps: &[String], pred_text: &str, model: &ChatModel) -> Result<EvaluatorScore, AltEvalError> {
    if gt_steps.is_empty() {
        return Err(AltEvalError::Invalid("no reference steps".into()));
    }
    require_text("predicted workflow", pred_text)?;
    let prompt = Template::AltSteps.fill(&[("steps", &numbered_list(gt_steps)), ("prediction", pred_text.trim())]).expect("alt_steps");
    let verdicts = complete_with_retry(model, &prompt, |raw| parse_step_verdicts(raw, gt_steps.len()))?;
    Ok(step_score(&verdicts))
}

/// Integer in 1..=100; a trailing period is tolerated, anything else is not.
pub fn parse_likert(raw: &str) -> Result<i64, AltEvalError> {
    let t = raw.trim();
    let t = t.strip_suffix('.').unwrap_or(t);
    let n: i64 = t.parse().map_err(|_| unparseable("likert", "expected an integer", raw))?;
    if (1..=100).contains(&n) {
        Ok(n)
    } else {
        Err(AltEvalError::OutOfRange(n))
    }
}

pub fn score_likert(gt_text: &str, pred_text: &str, model: &ChatModel) -> Result<EvaluatorScore, AltEvalError> {
    require_text("reference workflow", gt_text)?;
    require_text("predicted workflow", pred_text)?;
    let prompt = Template::AltLikert.fill(&[("reference", gt_text.trim()), ("prediction", pred_text.trim())]).expect("alt_likert");
    let raw = model.complete(&prompt)?;
    let n = parse_likert(&raw)?;
    Ok(EvaluatorScore { method: EvalMethod::Likert, value: n as f64, details: json!({"raw": raw.trim()}) })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    #[serde(alias = "answer")]
    pub expected_answer: String,
}

impl QaPair {
    pub fn new(question: impl Into<String>, expected: impl Into<String>) -> Self {
        Self { question: question.into(), expected_answer: expected.into() }
    }
}

/// Question/answer pairs for one workflow, as generated and then reviewed.
pub fn generate_qa_pairs(workflow: &str, model: &ChatModel) -> Result<Vec<QaPair>, AltEvalError> {
    require_text("workflow", workflow)?;
    #[derive(Deserialize)]
    struct Pairs {
        pairs: Vec<QaPair>,
    }
    let prompt = Template::QaPairs.fill(&[("workflow", workflow.trim())]).expect("qa_pairs");
    let pairs = complete_with_retry(model, &prompt, |raw| {
        let payload = extract_json_payload(raw).ok_or_else(|| unparseable("qa_pairs", "no JSON found", raw))?;
        serde_json::from_str::<Pairs>(payload).map_err(|e| unparseable("qa_pairs", e.to_string(), raw))
    })?;
    let pairs: Vec<QaPair> = pairs
        .pairs
        .into_iter()
        .filter(|p| !p.question.trim().is_empty() && !p.expected_answer.trim().is_empty())
        .collect();
    if pairs.is_empty() {
        return Err(AltEvalError::Invalid("model produced no usable QA pairs".into()));
    }
    Ok(pairs)
}

/// Reads `{intent: [{question, expected_answer}]}`.
pub fn load_qa_pairs(path: &Path) -> Result<BTreeMap<String, Vec<QaPair>>, AltEvalError> {
    let err = |reason: String| AltEvalError::PairsFile { path: path.display().to_string(), reason };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let pairs: BTreeMap<String, Vec<QaPair>> = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    for (intent, list) in &pairs {
        if let Some(i) = list.iter().position(|p| p.question.trim().is_empty() || p.expected_answer.trim().is_empty()) {
            return Err(err(format!("{intent}: pair {i} has an empty field")));
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grade {
    Correct,
    Incorrect,
    Unparseable,
}

pub fn parse_grade(raw: &str) -> Option<Grade> {
    let t = raw.trim().trim_matches(|c: char| c == '"' || c == '\'' || c == '.' || c == '*').trim().to_ascii_lowercase();
    match t.as_str() {
        "correct" => Some(Grade::Correct),
        "incorrect" => Some(Grade::Incorrect),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaVerdict {
    pub question: String,
    pub expected_answer: String,
    pub answer: String,
    pub grade: Grade,
    pub raw_grade: String,
}

/// Answers every question from `pred_text` and grades it. An ungradeable
/// reply fails the run unless `unparseable_as_incorrect` is set, in which
/// case it counts against the score and stays visible in details.
pub fn qa_evaluate(
    pairs: &[QaPair],
    pred_text: &str,
    model: &ChatModel,
    unparseable_as_incorrect: bool,
) -> Result<EvaluatorScore, AltEvalError> {
    if pairs.is_empty() {
        return Err(AltEvalError::Invalid("no QA pairs".into()));
    }
    require_text("predicted workflow", pred_text)?;
    let verdicts: Vec<QaVerdict> = pairs
        .par_iter()
        .map(|pair| {
            let ask = Template::QaAnswer.fill(&[("workflow", pred_text.trim()), ("question", &pair.question)]).expect("qa_answer");
            let answer = model.complete(&ask)?.trim().to_string();
            let grade_prompt = Template::QaGrade
                .fill(&[("question", &pair.question), ("expected", &pair.expected_answer), ("answer", &answer)])
                .expect("qa_grade");
            let raw_grade = model.complete(&grade_prompt)?;
            let grade = match parse_grade(&raw_grade) {
                Some(g) => g,
                None if unparseable_as_incorrect => Grade::Unparseable,
                None => return Err(unparseable("qa_grade", "expected correct or incorrect", &raw_grade)),
            };
            Ok(QaVerdict {
                question: pair.question.clone(),
                expected_answer: pair.expected_answer.clone(),
                answer,
                grade,
                raw_grade: raw_grade.trim().to_string(),
            })
        })
        .collect::<Result<_, AltEvalError>>()?;
    let correct = verdicts.iter().filter(|v| v.grade == Grade::Correct).count();
    let unparsed = verdicts.iter().filter(|v| v.grade == Grade::Unparseable).count();
    Ok(EvaluatorScore {
        method: EvalMethod::QaBased,
        value: correct as f64 / verdicts.len() as f64,
        details: json!({"correct": correct, "total": verdicts.len(), "unparseable": unparsed, "verdicts": verdicts}),
    })
}

/// Everything the alternative evaluators may need for one intent.
#[derive(Debug, Clone, Copy)]
pub struct AltInputs<'a> {
    pub gt_text: &'a str,
    pub qa_pairs: Option<&'a [QaPair]>,
    pub unparseable_as_incorrect: bool,
}

/// Runs the requested evaluators concurrently; keys are method names.
pub fn evaluate_alt(
    inputs: AltInputs<'_>,
    pred_text: &str,
    methods: &[EvalMethod],
    chat: &ChatModel,
    embedder: Option<&EmbeddingModel>,
) -> Result<BTreeMap<EvalMethod, EvaluatorScore>, AltEvalError> {
    methods
        .par_iter()
        .map(|&m| {
            let score = match m {
                EvalMethod::Embedding => {
                    let e = embedder.ok_or_else(|| AltEvalError::Invalid("embedding evaluator needs an embedding model".into()))?;
                    embed_and_score(inputs.gt_text, pred_text, e)?
                }
                EvalMethod::EditDistance => align_and_score_edit(inputs.gt_text, pred_text, chat)?,
                EvalMethod::StepAccuracy => score_steps(&parse_numbered_steps(inputs.gt_text), pred_text, chat)?,
                EvalMethod::Likert => score_likert(inputs.gt_text, pred_text, chat)?,
                EvalMethod::QaBased => {
                    let pairs = inputs.qa_pairs.ok_or_else(|| AltEvalError::Invalid("qa_based evaluator needs QA pairs".into()))?;
                    qa_evaluate(pairs, pred_text, chat, inputs.unparseable_as_incorrect)?
                }
            };
            Ok((m, score))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplianceVerdict {
    Followed,
    NotApplicable,
    NotFollowed,
}

impl ComplianceVerdict {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace('_', " ").as_str() {
            "followed" => Some(Self::Followed),
            "not applicable" => Some(Self::NotApplicable),
            "not followed" => Some(Self::NotFollowed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleVerdict {
    pub rule_index: usize,
    pub verdict: ComplianceVerdict,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub conversation_id: String,
    pub intent: String,
    pub per_rule: Vec<RuleVerdict>,
    pub compliant: bool,
}

impl ComplianceReport {
    pub fn new(conversation_id: impl Into<String>, intent: impl Into<String>, per_rule: Vec<RuleVerdict>) -> Self {
        let compliant = per_rule.iter().all(|r| r.verdict != ComplianceVerdict::NotFollowed);
        Self { conversation_id: conversation_id.into(), intent: intent.into(), per_rule, compliant }
    }
}

pub fn compliance_prompt(conv: &Conversation, gt_workflow_text: &str) -> String {
    Template::Compliance
        .fill(&[("guidelines", gt_workflow_text.trim()), ("conversation", &render_conversation(conv))])
        .expect("compliance")
}

pub fn parse_compliance(raw: &str, rule_count: usize) -> Result<Vec<RuleVerdict>, AltEvalError> {
    let payload = extract_json_payload(raw).ok_or_else(|| unparseable("compliance", "no JSON found", raw))?;
    let value: Value = serde_json::from_str(payload).map_err(|e| unparseable("compliance", e.to_string(), raw))?;
    let obj = value.as_object().ok_or_else(|| unparseable("compliance", "expected an object", raw))?;
    (1..=rule_count)
        .map(|i| {
            let key = format!("Rule_{i}");
            let entry = obj.get(&key).ok_or_else(|| AltEvalError::MissingRule(key.clone()))?;
            let response = entry
                .get("response")
                .and_then(Value::as_str)
                .ok_or_else(|| unparseable("compliance", format!("{key}.response missing"), raw))?;
            let verdict = ComplianceVerdict::parse(response)
                .ok_or_else(|| unparseable("compliance", format!("{key}: unknown verdict {response:?}"), raw))?;
            let explanation = entry.get("explanation").and_then(Value::as_str).unwrap_or_default().trim().to_string();
            Ok(RuleVerdict { rule_index: i, verdict, explanation })
        })
        .collect()
}

pub fn check_compliance(conv: &Conversation, gt_workflow_text: &str, model: &ChatModel) -> Result<ComplianceReport, AltEvalError> {
    let rules = parse_numbered_steps(gt_workflow_text);
    if rules.is_empty() {
        return Err(AltEvalError::Invalid("workflow has no numbered rules".into()));
    }
    let prompt = compliance_prompt(conv, gt_workflow_text);
    let per_rule = complete_with_retry(model, &prompt, |raw| parse_compliance(raw, rules.len()))?;
    Ok(ComplianceReport::new(&conv.id, &conv.intent_label, per_rule))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceRollup {
    pub intent: String,
    pub conversations: usize,
    pub verdicts: usize,
    pub followed_pct: f64,
    pub not_applicable_pct: f64,
    pub not_followed_pct: f64,
    pub non_compliant_pct: f64,
}

pub const ALL_INTENTS: &str = "all";

/// Per-intent rollups in intent order, followed by the corpus-level `all` row.
pub fn rollup(reports: &[ComplianceReport]) -> Vec<ComplianceRollup> {
    let mut groups: BTreeMap<&str, Vec<&ComplianceReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.intent.as_str()).or_default().push(r);
    }
    let mut out: Vec<ComplianceRollup> = groups.into_iter().map(|(intent, rs)| rollup_group(intent, &rs)).collect();
    if !reports.is_empty() {
        out.push(rollup_group(ALL_INTENTS, &reports.iter().collect::<Vec<_>>()));
    }
    out
}

fn rollup_group(intent: &str, reports: &[&ComplianceReport]) -> ComplianceRollup {
    let count = |v: ComplianceVerdict| reports.iter().flat_map(|r| &r.per_rule).filter(|x| x.verdict == v).count();
    let (f, na, nf) = (count(ComplianceVerdict::Followed), count(ComplianceVerdict::NotApplicable), count(ComplianceVerdict::NotFollowed));
    let total = f + na + nf;
    let pct = |n: usize, d: usize| if d == 0 { 0.0 } else { 100.0 * n as f64 / d as f64 };
    ComplianceRollup {
        intent: intent.to_string(),
        conversations: reports.len(),
        verdicts: total,
        followed_pct: pct(f, total),
        not_applicable_pct: pct(na, total),
        not_followed_pct: pct(nf, total),
        non_compliant_pct: pct(reports.iter().filter(|r| !r.compliant).count(), reports.len()),
    }
}

pub fn rollups_csv(rows: &[ComplianceRollup]) -> String {
    let mut out = String::from("intent,F%,NA%,NF%,NC%\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.2},{:.2},{:.2},{:.2}",
            r.intent, r.followed_pct, r.not_applicable_pct, r.not_followed_pct, r.non_compliant_pct
        );
    }
    out
}

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("zero variance")]
    ZeroVariance,
    #[error("non-finite input")]
    NonFinite,
}

/// Cohen's kappa over opaque labels. Perfect agreement on a single label
/// (expected agreement 1) gives 1.0.
pub fn cohen_kappa<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<f64, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::TooFew { needed: 1, got: 0 });
    }
    let n = a.len() as f64;
    let p_o = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let mut counts: HashMap<&T, (usize, usize)> = HashMap::new();
    for x in a {
        counts.entry(x).or_default().0 += 1;
    }
    for y in b {
        counts.entry(y).or_default().1 += 1;
    }
    let p_e: f64 = counts.values().map(|&(ca, cb)| (ca as f64 / n) * (cb as f64 / n)).sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(if p_o == 1.0 { 1.0 } else { 0.0 });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Sample Pearson correlation, clamped to [-1, 1].
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::TooFew { needed: 2, got: x.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;
    use crate::gateway::{FnTransport, Gateway};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn model(f: impl Fn(&str) -> String + Send + Sync + 'static) -> ChatModel {
        ChatModel::new(Arc::new(Gateway::live(Arc::new(FnTransport::replying(f)))), "m")
    }

    fn ops(n: usize) -> String {
        let items: Vec<String> = (0..n).map(|i| format!(r#"{{"type":"insertion","step":"s{i}"}}"#)).collect();
        format!(r#"{{"operations":[{}]}}"#, items.join(","))
    }

    #[test]
    fn embedding_formula() {
        // Unit vectors at 60 degrees: cos = 0.5.
        let s = score_embedding_values(&[1.0, 0.0], &[0.5, 3f64.sqrt() / 2.0]).unwrap();
        assert!((s.value - 2.0).abs() < 1e-12);
        let s = score_embedding_values(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(s.value, 1.0);
        let s = score_embedding_values(&[0.3, 0.4], &[0.3, 0.4]).unwrap();
        assert_eq!(s.value, PERFECT_MATCH_CAP);
        assert!(s.perfect_match());
        assert!(matches!(score_embedding_values(&[0.0, 0.0], &[1.0, 0.0]), Err(AltEvalError::Retrieval(_))));
    }

    proptest! {
        #[test]
        fn embedding_score_monotone(c1 in -1.0f64..0.999, c2 in -1.0f64..0.999) {
            prop_assume!(c1 < c2 - 1e-9);
            let at = |c: f64| score_embedding_values(&[1.0, 0.0], &[c, (1.0 - c * c).max(0.0).sqrt()]).unwrap().value;
            prop_assert!(at(c1) < at(c2));
        }

        #[test]
        fn step_scores_are_count_ratios(verdicts in prop::collection::vec(any::<bool>(), 1..60)) {
            let s = step_score(&verdicts);
            let scaled = s.value * verdicts.len() as f64;
            prop_assert!((scaled - scaled.round()).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&s.value));
        }

        #[test]
        fn kappa_symmetric(pairs in prop::collection::vec((0u8..3, 0u8..3), 1..80)) {
            let (a, b): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let k1 = cohen_kappa(&a, &b).unwrap();
            let k2 = cohen_kappa(&b, &a).unwrap();
            prop_assert!((k1 - k2).abs() < 1e-12);
        }

        #[test]
        fn pearson_symmetric_and_affine_invariant(
            xs in prop::collection::vec(-100.0f64..100.0, 3..40),
            noise in prop::collection::vec(-50.0f64..50.0, 40),
            scale in 0.1f64..10.0,
            shift in -20.0f64..20.0,
        ) {
            let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, n)| x + n).collect();
            let r = match pearson(&xs, &ys) { Ok(r) => r, Err(_) => return Ok(()) };
            prop_assert!((pearson(&ys, &xs).unwrap() - r).abs() < 1e-12);
            let xs2: Vec<f64> = xs.iter().map(|x| scale * x + shift).collect();
            prop_assert!((pearson(&xs2, &ys).unwrap() - r).abs() < 1e-9);
        }
    }

    #[test]
    fn edit_distance_cases() {
        assert_eq!(align_and_score_edit("1. a", "1. b", &model(|_| ops(2))).unwrap().value, 0.5);
        assert_eq!(align_and_score_edit("1. a", "1. b", &model(|_| ops(4))).unwrap().value, 0.25);
        let perfect = align_and_score_edit("1. a", "1. a", &model(|_| ops(0))).unwrap();
        assert!(perfect.perfect_match());
        assert_eq!(perfect.value, PERFECT_MATCH_CAP);
        let bad = model(|_| r#"{"operations":[{"type":"swap","step":"x"}]}"#.into());
        assert!(matches!(align_and_score_edit("1. a", "1. b", &bad), Err(AltEvalError::Unparseable { .. })));
    }

    #[test]
    fn step_accuracy_cases() {
        let steps: Vec<String> = (1..=4).map(|i| format!("step {i}")).collect();
        let reply = |covered: [bool; 4]| {
            let v: Vec<String> = covered.iter().enumerate().map(|(i, c)| format!(r#"{{"step":{},"covered":{c}}}"#, i + 1)).collect();
            format!(r#"{{"verdicts":[{}]}}"#, v.join(","))
        };
        let r = reply([true, true, false, true]);
        assert_eq!(score_steps(&steps, "x", &model(move |_| r.clone())).unwrap().value, 0.75);
        let r = reply([true; 4]);
        assert_eq!(score_steps(&steps, "x", &model(move |_| r.clone())).unwrap().value, 1.0);
        let r = reply([false; 4]);
        assert_eq!(score_steps(&steps, "x", &model(move |_| r.clone())).unwrap().value, 0.0);
        let short = model(|_| r#"{"verdicts":[{"step":1,"covered":true}]}"#.into());
        assert!(matches!(score_steps(&steps, "x", &short), Err(AltEvalError::VerdictCount { expected: 4, found: 1 })));
    }

    #[test]
    fn likert_contract() {
        assert_eq!(score_likert("a", "b", &model(|_| "87".into())).unwrap().value, 87.0);
        assert!(matches!(score_likert("a", "b", &model(|_| "0".into())), Err(AltEvalError::OutOfRange(0))));
        assert!(matches!(score_likert("a", "b", &model(|_| "great".into())), Err(AltEvalError::Unparseable { .. })));
        assert!(matches!(parse_likert("101"), Err(AltEvalError::OutOfRange(101))));
    }

    #[test]
    fn qa_evaluation() {
        let pairs = vec![QaPair::new("q1?", "a1"), QaPair::new("q2?", "a2")];
        let m = model(|p| {
            if Template::detect(p) == Some(Template::QaGrade) {
                if p.contains("q1?") { "correct".into() } else { "Incorrect.".into() }
            } else {
                "some answer".into()
            }
        });
        let s = qa_evaluate(&pairs, "1. x", &m, false).unwrap();
        assert_eq!(s.value, 0.5);
        assert_eq!(s.details["verdicts"].as_array().unwrap().len(), 2);
        let single = model(|p| if Template::detect(p) == Some(Template::QaGrade) { "incorrect".into() } else { "x".into() });
        assert_eq!(qa_evaluate(&pairs[..1], "1. x", &single, false).unwrap().value, 0.0);
        let vague = model(|p| if Template::detect(p) == Some(Template::QaGrade) { "partly".into() } else { "x".into() });
        assert!(qa_evaluate(&pairs, "1. x", &vague, false).is_err());
        let s = qa_evaluate(&pairs, "1. x", &vague, true).unwrap();
        assert_eq!((s.value, s.details["unparseable"].as_u64()), (0.0, Some(2)));
    }

    fn conv() -> Conversation {
        Conversation::new("c1", "refund", vec![Utterance::customer("hi"), Utterance::agent("hello")])
    }

    fn compliance_reply(verdicts: &[&str]) -> String {
        let body: Vec<String> =
            verdicts.iter().enumerate().map(|(i, v)| format!(r#""Rule_{}": {{"response": "{v}", "explanation": "e"}}"#, i + 1)).collect();
        format!("{{{}}}", body.join(", "))
    }

    #[test]
    fn compliance_cases() {
        let wf = "1. Ask name.\n2. If gold, refund.\n3. Close.";
        let r = compliance_reply(&["followed", "not applicable", "followed"]);
        let report = check_compliance(&conv(), wf, &model(move |_| r.clone())).unwrap();
        assert!(report.compliant);
        assert_eq!(report.per_rule[1].verdict, ComplianceVerdict::NotApplicable);
        let r = compliance_reply(&["followed", "not followed", "followed"]);
        assert!(!check_compliance(&conv(), wf, &model(move |_| r.clone())).unwrap().compliant);
        let r = compliance_reply(&["followed", "followed"]);
        assert!(matches!(check_compliance(&conv(), wf, &model(move |_| r.clone())), Err(AltEvalError::MissingRule(k)) if k == "Rule_3"));
        let r = compliance_reply(&["followed", "mostly", "followed"]);
        assert!(matches!(check_compliance(&conv(), wf, &model(move |_| r.clone())), Err(AltEvalError::Unparseable { .. })));
    }

    #[test]
    fn rollup_partitions() {
        let v = |x| RuleVerdict { rule_index: 1, verdict: x, explanation: String::new() };
        use ComplianceVerdict::*;
        let reports = vec![
            ComplianceReport::new("a", "i1", vec![v(Followed), v(NotApplicable), v(NotFollowed)]),
            ComplianceReport::new("b", "i1", vec![v(Followed), v(Followed)]),
            ComplianceReport::new("c", "i2", vec![v(NotApplicable)]),
        ];
        let rows = rollup(&reports);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].intent, ALL_INTENTS);
        for r in &rows {
            assert!((r.followed_pct + r.not_applicable_pct + r.not_followed_pct - 100.0).abs() < 1e-9);
        }
        assert!((rows[0].non_compliant_pct - 50.0).abs() < 1e-12);
        assert!(rollups_csv(&rows).starts_with("intent,F%,NA%,NF%,NC%\ni1,"));
    }

    #[test]
    fn kappa_cases() {
        assert!((cohen_kappa(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap() - 0.5).abs() < 1e-12);
        assert!((cohen_kappa(&["a", "b", "c"], &["a", "b", "c"]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cohen_kappa(&["x", "x"], &["x", "x"]).unwrap(), 1.0);
        assert!(cohen_kappa(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn kappa_independent_labels() {
        let mut rng = crate::rng::rng_from_seed(7);
        let a: Vec<u64> = (0..10_000).map(|_| crate::rng::uniform_below(&mut rng, 2)).collect();
        let b: Vec<u64> = (0..10_000).map(|_| crate::rng::uniform_below(&mut rng, 2)).collect();
        assert!(cohen_kappa(&a, &b).unwrap().abs() < 0.05);
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(StatsError::ZeroVariance));
        // Hand oracle: x=[1,2,3], y=[1,3,2]: cov=0.5, var_x=var_y=1 -> 0.5.
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
    }
}
