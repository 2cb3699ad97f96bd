//! Deterministic rule-based stand-in for the chat and embedding models.
//!
//! [`ScriptedTransport`] recognises every bundled prompt template, recovers
//! the filled-in values and answers from the toy knowledge base in [`kb`].
//! It only understands workflows written in that knowledge base's phrasing.

pub mod kb;
pub mod policy;
pub mod toy;

use std::collections::BTreeMap;

use flowmine_core::elements::JSON_REPAIR_SUFFIX;
use flowmine_core::gateway::{ChatRequest, ChatResponse, Transport};
use flowmine_core::prompts::Template;
use flowmine_core::text::{numbered_list, parse_numbered_steps};
use flowmine_core::GatewayError;
use serde_json::{json, Value};

use kb::*;
use policy::*;

/// Guide model id that never runs out of questions.
pub const ENDLESS_MODEL: &str = "scripted-endless";
pub const EMBEDDING_DIM: usize = 64;

#[derive(Debug, Default, Clone, Copy)]
pub struct ScriptedTransport;

impl Transport for ScriptedTransport {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let prompt = request.messages.last().map(|m| m.content.as_str()).unwrap_or_default();
        respond(&request.model_id, prompt).map(ChatResponse::stop)
    }

    fn embed(&self, _model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        Ok(texts.iter().map(|t| embed_text(t)).collect())
    }
}

/// Hashed bag of words, L2-normalised.
pub fn embed_text(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; EMBEDDING_DIM];
    for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.to_lowercase().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        v[(h % EMBEDDING_DIM as u64) as usize] += 1.0;
    }
    if v.iter().all(|x| *x == 0.0) {
        v[0] = 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

pub fn respond(model_id: &str, prompt: &str) -> Result<String, GatewayError> {
    let prompt = prompt.strip_suffix(JSON_REPAIR_SUFFIX).unwrap_or(prompt);
    let unknown = || GatewayError::Transport("scripted backend does not recognise this prompt".into());
    let template = Template::detect(prompt).ok_or_else(unknown)?;
    let v = template.parse_filled(prompt).ok_or_else(unknown)?;
    let get = |k: &str| v.get(k).map(String::as_str).unwrap_or_default();
    let out = match template {
        Template::Elements => elements(get("conversation")),
        Template::Decompose => Intent::detect(get("policy")).subflows().join("\n"),
        Template::Scenario => scenario(get("policy"), get("scenario")),
        Template::CustomerBot => {
            let intent = Intent::detect(get("issue"));
            customer_reply(intent, &parse_info(get("info")), &history(get("history")))
        }
        Template::AgentBot => agent_reply(get("policy"), &parse_info(get("info")), &history(get("history"))),
        Template::Judge => {
            let (ok, why) = judge(get("outcome"), &parse_history(get("conversation")));
            json!({"successful": if ok { "yes" } else { "no" }, "explanation": why}).to_string()
        }
        Template::Compliance => {
            let verdicts = compliance(get("guidelines"), &parse_history(get("conversation")));
            let obj: serde_json::Map<String, Value> = verdicts
                .into_iter()
                .enumerate()
                .map(|(i, (v, why))| (format!("Rule_{}", i + 1), json!({"response": v.as_str(), "explanation": why})))
                .collect();
            Value::Object(obj).to_string()
        }
        Template::Basic => {
            let items = evidenced(get("conversations"));
            workflow(&items, |s| match s {
                s if s == REFUND_ITEMS[0].sentence => Some(ACCOUNT_ONLY_SENTENCE),
                s if s == SHIPPING_ITEMS[5].sentence => None,
                s => Some(s),
            })
        }
        Template::Reflect => feedback(get("workflow"), get("conversations")),
        Template::ReflectGenerate => workflow(&evidenced(get("conversations")), |s| (s != SHIPPING_ITEMS[5].sentence).then_some(s)),
        Template::Plan => plan(get("conversations")),
        Template::PlanGenerate => workflow(&evidenced(get("conversations")), |s| (s != REFUND_ITEMS[5].sentence).then_some(s)),
        Template::Ensemble => workflow(&evidenced(get("conversations")), |s| {
            Some(if s == REFUND_ITEMS[5].sentence { GOLD_CREDIT_SENTENCE } else { s })
        }),
        Template::QaCot | Template::QaReflect => discussion(&evidenced(get("conversations"))),
        Template::QaExtract => workflow(&evidenced(get("conversations")), Some),
        Template::QaGuide => guide(model_id, &evidenced(get("conversations")), get("discussion")),
        Template::QaImplementer => implementer(get("conversations"), get("question")),
        Template::AltEdit => edit_operations(get("reference"), get("prediction")),
        Template::AltSteps => step_verdicts(get("steps"), get("prediction")),
        Template::AltLikert => likert(get("reference"), get("prediction")).to_string(),
        Template::QaPairs => qa_pairs(get("workflow")),
        Template::QaAnswer => qa_answer(get("workflow"), get("question")),
        Template::QaGrade => {
            if normalize(get("expected")) == normalize(get("answer")) { "correct" } else { "incorrect" }.to_string()
        }
        Template::SynthConversation => synth_dialog(
            get("policy"),
            get("subflow"),
            get("replicate").parse().unwrap_or(1),
            get("user_name"),
            get("user_profession"),
            get("city"),
        ),
    };
    Ok(out)
}

fn history(text: &str) -> Vec<Turn> {
    parse_history(text)
}

pub fn normalize(text: &str) -> String {
    text.trim().trim_end_matches('.').trim().to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Knowledge-base items whose evidence shows up in the conversations, in KB order.
pub fn evidenced(conversations: &str) -> Vec<&'static Item> {
    let intent = Intent::detect(conversations);
    let lower = conversations.to_lowercase();
    intent.items().iter().filter(|it| lower.contains(it.evidence)).collect()
}

fn workflow<'a>(items: &[&'a Item], edit: impl Fn(&'a str) -> Option<&'a str>) -> String {
    let lines: Vec<&str> = items.iter().filter_map(|it| edit(it.sentence)).collect();
    if lines.is_empty() {
        return "1. Ask the customer to describe the issue.".into();
    }
    numbered_list(&lines)
}

fn feedback(workflow: &str, conversations: &str) -> String {
    let have: Vec<String> = parse_numbered_steps(workflow).iter().map(|s| normalize(s)).collect();
    let gaps: Vec<String> = evidenced(conversations)
        .into_iter()
        .filter(|it| !have.contains(&normalize(it.sentence)))
        .map(|it| format!("- The chats show a step the workflow lacks: {}", it.sentence))
        .collect();
    if gaps.is_empty() {
        "Coverage gaps\n- None found.".into()
    } else {
        format!("Coverage gaps\n{}\n\nSuggestions\n- Add the missing steps above.", gaps.join("\n"))
    }
}

fn plan(conversations: &str) -> String {
    let intent = Intent::detect(conversations);
    let keys: Vec<&str> = evidenced(conversations).iter().map(|it| it.key).collect();
    format!(
        "Problem: {}.\nPlan:\n1. Collect the details the agent always asks for.\n2. Note each decision point and its outcomes.\nSteps seen: {}.",
        intent.summary(),
        keys.join(", ")
    )
}

fn discussion(items: &[&Item]) -> String {
    items.iter().map(|it| format!("Guide: {}\nImplementer: {}", it.question, it.sentence)).collect::<Vec<_>>().join("\n")
}

fn guide(model_id: &str, items: &[&Item], discussion: &str) -> String {
    let asked = discussion.lines().filter(|l| l.trim_start().starts_with("Guide:")).count();
    match items.get(asked) {
        Some(it) => it.question.to_string(),
        None if model_id == ENDLESS_MODEL => format!("Could you go over follow-up point {}?", asked + 1 - items.len()),
        None => "NO FURTHER QUESTIONS".into(),
    }
}

fn implementer(conversations: &str, question: &str) -> String {
    let q = normalize(question);
    evidenced(conversations)
        .into_iter()
        .find(|it| normalize(it.question) == q)
        .map(|it| it.sentence.to_string())
        .unwrap_or_else(|| "The conversations do not show this.".into())
}

fn elements(conversation: &str) -> String {
    let turns = parse_history(conversation);
    let text: String = turns.iter().map(|(_, t)| t.as_str()).collect::<Vec<_>>().join("\n");
    let intent = Intent::detect(&text);
    let slots: serde_json::Map<String, Value> =
        customer_facts(&turns).into_iter().map(|(s, v)| (s.key(), Value::from(v))).collect();
    let mut steps = Vec::new();
    for (role, t) in &turns {
        if *role != Role::Agent {
            continue;
        }
        if t.contains("system error") {
            steps.push("Agent checked the system for an error.".to_string());
        }
        let asked = asked_slots(t);
        if !asked.is_empty() && t.contains('?') {
            let any = asked.contains(&Slot::FullName) && asked.contains(&Slot::AccountId);
            steps.push(format!("Agent asked for the {}.", join_labels(&asked, if any { "or" } else { "and" })));
        }
        let lower = t.to_lowercase();
        if let Some(o) = Outcome::ALL.into_iter().find(|o| lower.contains(o.marker())) {
            steps.push(format!("Agent {}.", o.past()));
        }
    }
    json!({"intent": intent.summary(), "slot_values": slots, "resolution_steps": steps}).to_string()
}

fn scenario(policy: &str, description: &str) -> String {
    let intent = Intent::detect(policy);
    let facts = scenario_facts(intent, description, None);
    let user: Vec<String> = facts.user.iter().map(|(s, v)| format!("{}: {v}", s.label())).collect();
    let outcome = facts.outcome.map(|o| o.criteria()).unwrap_or("The agent resolves the issue.");
    json!({"user information": user, "system information": facts.system, "outcome": outcome}).to_string()
}

fn steps_of(text: &str) -> Vec<String> {
    parse_numbered_steps(text).iter().map(|s| normalize(s)).collect()
}

/// Indices into `seq` forming one longest increasing subsequence.
fn lis(seq: &[usize]) -> Vec<usize> {
    let n = seq.len();
    let mut len = vec![1usize; n];
    let mut prev = vec![usize::MAX; n];
    for i in 0..n {
        for j in 0..i {
            if seq[j] < seq[i] && len[j] + 1 > len[i] {
                len[i] = len[j] + 1;
                prev[i] = j;
            }
        }
    }
    let Some(mut at) = (0..n).max_by_key(|&i| (len[i], std::cmp::Reverse(i))) else {
        return vec![];
    };
    let mut out = vec![at];
    while prev[at] != usize::MAX {
        at = prev[at];
        out.push(at);
    }
    out.reverse();
    out
}

fn edit_operations(reference: &str, prediction: &str) -> String {
    let r = steps_of(reference);
    let p = steps_of(prediction);
    let mut ops = Vec::new();
    for s in r.iter().filter(|s| !p.contains(s)) {
        ops.push(json!({"type": "insertion", "step": s}));
    }
    for s in p.iter().filter(|s| !r.contains(s)) {
        ops.push(json!({"type": "deletion", "step": s}));
    }
    let common: Vec<&String> = p.iter().filter(|s| r.contains(s)).collect();
    let positions: Vec<usize> = common.iter().map(|s| r.iter().position(|x| x == *s).unwrap()).collect();
    let keep = lis(&positions);
    for (i, s) in common.iter().enumerate() {
        if !keep.contains(&i) {
            ops.push(json!({"type": "reordering", "step": s}));
        }
    }
    json!({"operations": ops}).to_string()
}

fn step_verdicts(steps: &str, prediction: &str) -> String {
    let p = steps_of(prediction);
    let verdicts: Vec<Value> =
        steps_of(steps).iter().enumerate().map(|(i, s)| json!({"step": i + 1, "covered": p.contains(s)})).collect();
    json!({"verdicts": verdicts}).to_string()
}

fn likert(reference: &str, prediction: &str) -> i64 {
    let r = steps_of(reference);
    let p = steps_of(prediction);
    let inter = r.iter().filter(|s| p.contains(s)).count();
    let union = r.len() + p.len() - inter;
    if union == 0 {
        return 100;
    }
    ((100.0 * inter as f64 / union as f64).round() as i64).clamp(1, 100)
}

fn split_conditional(step: &str) -> Option<(String, String)> {
    let rest = step.trim().strip_prefix("If ").or_else(|| step.trim().strip_prefix("if "))?;
    let (cond, action) = rest.split_once(',')?;
    Some((normalize(cond), normalize(action)))
}

pub fn qa_pairs(workflow: &str) -> String {
    let pairs: Vec<Value> = parse_numbered_steps(workflow)
        .iter()
        .map(|step| match split_conditional(step) {
            Some((cond, action)) => json!({"question": format!("What should the agent do if {cond}?"), "answer": action}),
            None => json!({"question": format!("Does the workflow require the agent to {}?", normalize(step)), "answer": "yes"}),
        })
        .collect();
    json!({"pairs": pairs}).to_string()
}

fn qa_answer(workflow: &str, question: &str) -> String {
    let steps = parse_numbered_steps(workflow);
    let q = question.trim().trim_end_matches('?');
    if let Some(cond) = q.strip_prefix("What should the agent do if ") {
        let cond = normalize(cond);
        if let Some((_, action)) = steps.iter().filter_map(|s| split_conditional(s)).find(|(c, _)| *c == cond) {
            return action;
        }
    } else if let Some(step) = q.strip_prefix("Does the workflow require the agent to ") {
        let step = normalize(step);
        if steps.iter().any(|s| normalize(s) == step) {
            return "yes".into();
        }
    }
    "not specified".into()
}

fn synth_dialog(policy: &str, subflow: &str, replicate: usize, name: &str, profession: &str, city: &str) -> String {
    let intent = Intent::detect(policy);
    let facts = scenario_facts(intent, subflow, Some(name));
    let greeting = ["Hi", "Hello", "Good morning", "Hey there"][(replicate + 3) % 4];
    let body = intent.opener().trim_start_matches("Hi, ");
    let opener = format!("{greeting}, I'm {name}, a {} from {city}. {}", profession.to_lowercase(), sentence_start(body));
    play_dialog(intent, policy, &facts, Some(&opener), 30)
        .into_iter()
        .map(|(r, t)| format!("{}: {t}", if r == Role::Customer { "User" } else { "Agent" }))
        .collect::<Vec<_>>()
        .join("\n")
}

fn sentence_start(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

/// Template name to the number of times it was answered, handy in tests.
pub fn template_histogram<'a>(prompts: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for p in prompts {
        if let Some(t) = Template::detect(p) {
            *out.entry(t.name().to_string()).or_insert(0) += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_unit_length() {
        for t in ["", "refund please", "order shipping status"] {
            let v = embed_text(t);
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn edit_operations_find_reordering() {
        let r = "1. a\n2. b\n3. c";
        let p = "1. b\n2. a\n3. c\n4. d";
        let v: Value = serde_json::from_str(&edit_operations(r, p)).unwrap();
        let kinds: Vec<&str> = v["operations"].as_array().unwrap().iter().map(|o| o["type"].as_str().unwrap()).collect();
        assert_eq!(kinds, ["deletion", "reordering"]);
    }

    #[test]
    fn qa_pairs_answer_themselves() {
        let wf = numbered_list(&REFUND_ITEMS.iter().map(|i| i.sentence).collect::<Vec<_>>());
        let v: Value = serde_json::from_str(&qa_pairs(&wf)).unwrap();
        for p in v["pairs"].as_array().unwrap() {
            let ans = qa_answer(&wf, p["question"].as_str().unwrap());
            assert_eq!(normalize(&ans), normalize(p["answer"].as_str().unwrap()));
        }
    }

    #[test]
    fn unknown_prompt_is_a_transport_error() {
        assert!(matches!(respond("m", "hello"), Err(GatewayError::Transport(_))));
    }

    #[test]
    fn likert_bounds() {
        assert_eq!(likert("1. a", "1. a"), 100);
        assert_eq!(likert("1. a", "1. b"), 1);
    }
}
