//! The bundled toy dataset: corpus, ground-truth workflows and QA pairs.

use std::collections::BTreeMap;

use flowmine_core::experiment::GroundTruth;
use flowmine_core::subflow::{Edge, Node, NodeKind, WorkflowGraph};
use flowmine_core::text::numbered_list;
use flowmine_core::{Conversation, Utterance};
use serde_json::Value;

use crate::kb::*;
use crate::policy::{play_dialog, scenario_facts, Role};

pub const REFUND_INTENT: &str = "refund_never_bought";
pub const SHIPPING_INTENT: &str = "shipping_delay";

const NAMES: [&str; 20] = [
    "Ana Ruiz", "Tom Becker", "Priya Nair", "Lukas Berg", "Mei Tan", "Omar Haddad", "Sofia Costa", "Jon Park",
    "Nadia Okafor", "Erik Lund", "Hana Sato", "Diego Vargas", "Clara Weiss", "Samir Khan", "Lea Dubois",
    "Ivan Petrov", "Grace Lee", "Marco Rossi", "Aisha Bello", "Noah Fischer",
];
const GREETINGS: [&str; 4] = ["Hi", "Hello", "Good afternoon", "Hey"];

pub fn intent_of(label: &str) -> Intent {
    if label == SHIPPING_INTENT {
        Intent::Shipping
    } else {
        Intent::Refund
    }
}

pub fn gt_workflow(intent: Intent) -> String {
    numbered_list(&intent.items().iter().map(|i| i.sentence).collect::<Vec<_>>())
}

fn render_workflow(lines: &[&str]) -> String {
    numbered_list(lines)
}

fn conversation(id: String, label: &str, intent: Intent, workflow: &str, subflow: &str, n: usize) -> Conversation {
    let name = NAMES[n % NAMES.len()];
    let facts = scenario_facts(intent, subflow, Some(name));
    let body = intent.opener().trim_start_matches("Hi, ");
    let opener = format!("{}, {body}", GREETINGS[n % GREETINGS.len()]);
    let utterances = play_dialog(intent, workflow, &facts, Some(&opener), 30)
        .into_iter()
        .map(|(r, t)| if r == Role::Customer { Utterance::customer(t) } else { Utterance::agent(t) })
        .collect();
    Conversation::new(id, label, utterances)
}

/// 12 refund conversations (one of them handled against policy) and 8 shipping ones.
pub fn corpus() -> Vec<Conversation> {
    let mut out = Vec::new();
    let refund = Intent::Refund.subflows();
    let gt = gt_workflow(Intent::Refund);
    for (i, sf) in refund.iter().enumerate() {
        out.push(conversation(format!("rnb-{:02}", i + 1), REFUND_INTENT, Intent::Refund, &gt, sf, i));
    }
    let flawed: Vec<&str> =
        REFUND_ITEMS.iter().map(|i| if i.key == "gold" { GOLD_CREDIT_SENTENCE } else { i.sentence }).collect();
    out.push(conversation("rnb-11".into(), REFUND_INTENT, Intent::Refund, &render_workflow(&flawed), &refund[7], 10));
    out.push(conversation("rnb-12".into(), REFUND_INTENT, Intent::Refund, &gt, &refund[9], 11));

    let shipping = Intent::Shipping.subflows();
    let gt = gt_workflow(Intent::Shipping);
    for (i, idx) in [0, 1, 2, 0, 1, 2, 1, 2].into_iter().enumerate() {
        out.push(conversation(format!("sd-{:02}", i + 1), SHIPPING_INTENT, Intent::Shipping, &gt, &shipping[idx], 12 + i));
    }
    out
}

fn node(id: &str, kind: NodeKind, label: &str) -> Node {
    Node { id: id.into(), kind, label: label.into() }
}

fn edge(from: &str, to: &str, condition: Option<&str>) -> Edge {
    Edge { from: from.into(), to: to.into(), condition: condition.map(str::to_string) }
}

pub fn refund_graph() -> WorkflowGraph {
    use NodeKind::*;
    let s = |k: &str| REFUND_ITEMS.iter().find(|i| i.key == k).unwrap().sentence;
    WorkflowGraph {
        nodes: vec![
            node("start", Start, "start"),
            node("identify", Step, s("identify")),
            node("identity", Branch, "identity"),
            node("validate", Step, s("validate")),
            node("check", Step, s("check_error")),
            node("error", Branch, "system error"),
            node("reverse", Step, s("reverse")),
            node("membership_ask", Step, s("membership")),
            node("membership", Branch, "membership"),
            node("gold", Step, s("gold")),
            node("silver", Step, s("silver")),
            node("bronze", Step, s("bronze")),
            node("guest", Step, s("guest")),
            node("end", End, "end"),
        ],
        edges: vec![
            edge("start", "identify", None),
            edge("identify", "identity", None),
            edge("identity", "validate", Some("full name")),
            edge("identity", "validate", Some("account ID")),
            edge("validate", "check", None),
            edge("check", "error", None),
            edge("error", "reverse", Some("error")),
            edge("error", "membership_ask", Some("no error")),
            edge("reverse", "end", None),
            edge("membership_ask", "membership", None),
            edge("membership", "gold", Some("gold")),
            edge("membership", "silver", Some("silver")),
            edge("membership", "bronze", Some("bronze")),
            edge("membership", "guest", Some("guest")),
            edge("gold", "end", None),
            edge("silver", "end", None),
            edge("bronze", "end", None),
            edge("guest", "end", None),
        ],
    }
}

pub fn shipping_graph() -> WorkflowGraph {
    use NodeKind::*;
    let s = |k: &str| SHIPPING_ITEMS.iter().find(|i| i.key == k).unwrap().sentence;
    WorkflowGraph {
        nodes: vec![
            node("start", Start, "start"),
            node("order", Step, s("order")),
            node("status_ask", Step, s("status")),
            node("status", Branch, "shipping status"),
            node("claim", Step, s("claim")),
            node("membership_ask", Step, s("transit")),
            node("membership", Branch, "membership"),
            node("express", Step, s("express")),
            node("estimate", Step, s("estimate")),
            node("end", End, "end"),
        ],
        edges: vec![
            edge("start", "order", None),
            edge("order", "status_ask", None),
            edge("status_ask", "status", None),
            edge("status", "claim", Some("delivered")),
            edge("status", "membership_ask", Some("in transit")),
            edge("claim", "end", None),
            edge("membership_ask", "membership", None),
            edge("membership", "express", Some("gold or silver")),
            edge("membership", "estimate", Some("bronze or guest")),
            edge("express", "end", None),
            edge("estimate", "end", None),
        ],
    }
}

pub fn ground_truth() -> BTreeMap<String, GroundTruth> {
    BTreeMap::from([
        (
            REFUND_INTENT.to_string(),
            GroundTruth {
                issue: "I was charged for an order I never placed and I want a refund.".into(),
                workflow: gt_workflow(Intent::Refund),
                graph: Some(refund_graph()),
            },
        ),
        (
            SHIPPING_INTENT.to_string(),
            GroundTruth {
                issue: "My order has not arrived yet and I want to know where my package is.".into(),
                workflow: gt_workflow(Intent::Shipping),
                graph: Some(shipping_graph()),
            },
        ),
    ])
}

/// `{intent: [{question, answer}]}` built from the ground-truth workflows.
pub fn qa_pairs() -> Value {
    let mut out = serde_json::Map::new();
    for (label, gt) in ground_truth() {
        let raw: Value = serde_json::from_str(&crate::qa_pairs(&gt.workflow)).expect("scripted pairs are JSON");
        out.insert(label, raw["pairs"].clone());
    }
    Value::Object(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowmine_core::subflow::enumerate_paths;

    #[test]
    fn graphs_enumerate_the_kb_subflows() {
        for (graph, intent) in [(refund_graph(), Intent::Refund), (shipping_graph(), Intent::Shipping)] {
            let got: Vec<String> = enumerate_paths(&graph).unwrap().into_iter().map(|p| p.description).collect();
            assert_eq!(got, intent.subflows());
        }
    }

    #[test]
    fn corpus_counts() {
        let c = corpus();
        assert_eq!(c.len(), 20);
        assert_eq!(c.iter().filter(|c| c.intent_label == REFUND_INTENT).count(), 12);
        assert!(c.iter().all(|c| c.validate().is_ok()));
    }
}
