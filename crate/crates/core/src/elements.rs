//! Procedural elements: intent, slot values and resolution steps mined from
//! one conversation, plus the canonical text used to embed them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{render_conversation, Conversation};
use crate::gateway::{ChatModel, GatewayError};
use crate::prompts::Template;
use crate::text::extract_json_payload;

pub const INTENT_SOFT_LIMIT: usize = 50;
pub const JSON_REPAIR_SUFFIX: &str = "\n\nRespond with valid JSON only.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProceduralElements {
    pub intent: String,
    pub slot_values: BTreeMap<String, String>,
    pub resolution_steps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ElementsError {
    #[error("schema violation at {key:?}: {reason}")]
    Schema { key: String, reason: String },
    #[error("could not parse elements after retry: {reason}")]
    Unparseable { raw: String, reason: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Elements together with the model output they were parsed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedElements {
    pub conversation_id: String,
    pub elements: ProceduralElements,
    pub raw: String,
    pub repaired: bool,
}

pub fn elements_prompt(conv: &Conversation) -> String {
    Template::Elements
        .fill(&[("conversation", &render_conversation(conv))])
        .expect("elements template placeholders")
}

/// Runs the extraction prompt, retrying once with a JSON-only reminder.
pub fn extract_elements(conv: &Conversation, model: &ChatModel) -> Result<ExtractedElements, ElementsError> {
    let prompt = elements_prompt(conv);
    let raw = model.complete(&prompt)?;
    match parse_elements_json(&raw) {
        Ok(elements) => Ok(finish(conv, elements, raw, false)),
        Err(first) => {
            tracing::debug!(conversation = %conv.id, error = %first, "elements output unparseable, retrying");
            let retry_raw = model.complete(&format!("{prompt}{JSON_REPAIR_SUFFIX}"))?;
            match parse_elements_json(&retry_raw) {
                Ok(elements) => Ok(finish(conv, elements, retry_raw, true)),
                Err(e) => Err(ElementsError::Unparseable { raw: retry_raw, reason: e.to_string() }),
            }
        }
    }
}

fn finish(conv: &Conversation, elements: ProceduralElements, raw: String, repaired: bool) -> ExtractedElements {
    if elements.intent.chars().count() > INTENT_SOFT_LIMIT {
        tracing::warn!(conversation = %conv.id, intent = %elements.intent, "intent longer than {INTENT_SOFT_LIMIT} characters");
    }
    ExtractedElements { conversation_id: conv.id.clone(), elements, raw, repaired }
}

/// Parses a bare JSON object or the first fenced block of a response.
pub fn parse_elements_json(raw: &str) -> Result<ProceduralElements, ElementsError> {
    let schema = |key: &str, reason: &str| ElementsError::Schema { key: key.into(), reason: reason.into() };
    let payload = extract_json_payload(raw).ok_or_else(|| schema("$", "no JSON object found"))?;
    let value: Value = serde_json::from_str(payload).map_err(|e| schema("$", &e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| schema("$", "expected a JSON object"))?;

    let intent = obj
        .get("intent")
        .ok_or_else(|| schema("intent", "missing"))?
        .as_str()
        .ok_or_else(|| schema("intent", "expected a string"))?
        .trim()
        .to_string();

    let slots = obj.get("slot_values").ok_or_else(|| schema("slot_values", "missing"))?;
    let slot_values = match slots {
        Value::Object(map) => map
            .iter()
            .map(|(k, v)| {
                let text = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), text)
            })
            .collect(),
        Value::Null => BTreeMap::new(),
        _ => return Err(schema("slot_values", "expected an object")),
    };

    let steps = obj
        .get("resolution_steps")
        .ok_or_else(|| schema("resolution_steps", "missing"))?
        .as_array()
        .ok_or_else(|| schema("resolution_steps", "expected an array"))?;
    let mut resolution_steps = Vec::with_capacity(steps.len());
    for (i, step) in steps.iter().enumerate() {
        let text = step.as_str().ok_or_else(|| schema("resolution_steps", &format!("item {i} is not a string")))?;
        let text = text.trim();
        if !text.is_empty() {
            resolution_steps.push(text.to_string());
        }
    }
    Ok(ProceduralElements { intent, slot_values, resolution_steps })
}

/// Deterministic text used as embedding input: intent line, slots sorted by
/// key, then the steps as a numbered list in their original order.
pub fn canonical_text(elems: &ProceduralElements) -> String {
    let mut out = format!("Intent: {}\n", elems.intent);
    for (key, value) in &elems.slot_values {
        out.push_str(&format!("{key}: {value}\n"));
    }
    for (i, step) in elems.resolution_steps.iter().enumerate() {
        out.push_str(&format!("{}. {step}\n", i + 1));
    }
    out
}

pub fn sidecar_path(dir: &Path, conversation_id: &str) -> PathBuf {
    dir.join(format!("{conversation_id}.json"))
}

pub fn save_sidecar(dir: &Path, extracted: &ExtractedElements) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = sidecar_path(dir, &extracted.conversation_id);
    let mut text = serde_json::to_string_pretty(extracted).map_err(std::io::Error::other)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

pub fn load_sidecar(dir: &Path, conversation_id: &str) -> std::io::Result<ExtractedElements> {
    let text = fs::read_to_string(sidecar_path(dir, conversation_id))?;
    serde_json::from_str(&text).map_err(std::io::Error::other)
}
