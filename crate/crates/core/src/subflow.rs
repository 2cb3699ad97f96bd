//! Workflows as branch-conditioned DAGs, sub-flow enumeration, and the
//! model-driven decomposition of free-text workflows into branch lines.
//!
//! Graph file format:
//!
//! ```json
//! {"nodes": [{"id": "s", "kind": "start", "label": "START"}, ...],
//!  "edges": [{"from": "s", "to": "b", "condition": null}, ...]}
//! ```
//!
//! Structural rules: one `start`, at least one `end`, no cycles, every node
//! reachable from start, every non-end node has an out-edge, end nodes have
//! none. `start` and `step` nodes have exactly one unconditioned out-edge.
//! `branch` nodes have at least two out-edges, each carrying a condition,
//! conditions distinct per branch, and branch labels are unique.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatModel, GatewayError};
use crate::prompts::Template;

pub const MAX_PATHS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Start,
    Step,
    Branch,
    End,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    #[serde(default)]
    pub condition: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WorkflowGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    StartCount { ids: Vec<String> },
    NoEnd,
    DuplicateNode { id: String },
    UnknownNode { edge_index: usize, id: String },
    Cycle { nodes: Vec<String> },
    Unreachable { id: String },
    DeadEnd { id: String },
    EndHasOutEdges { id: String },
    StepOutDegree { id: String, count: usize },
    ConditionOnStep { id: String },
    DegenerateBranch { id: String, out_edges: usize },
    UnconditionedBranchEdge { id: String },
    DuplicateCondition { id: String, condition: String },
    DuplicateBranchLabel { label: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::StartCount { ids } => write!(f, "expected exactly one start node, found {} ({})", ids.len(), ids.join(", ")),
            Violation::NoEnd => f.write_str("graph has no end node"),
            Violation::DuplicateNode { id } => write!(f, "duplicate node id {id}"),
            Violation::UnknownNode { edge_index, id } => write!(f, "edge {edge_index} references unknown node {id}"),
            Violation::Cycle { nodes } => write!(f, "cycle through {}", nodes.join(" -> ")),
            Violation::Unreachable { id } => write!(f, "node {id} is unreachable from start"),
            Violation::DeadEnd { id } => write!(f, "non-end node {id} has no outgoing edge"),
            Violation::EndHasOutEdges { id } => write!(f, "end node {id} has outgoing edges"),
            Violation::StepOutDegree { id, count } => write!(f, "node {id} must have exactly one outgoing edge, has {count}"),
            Violation::ConditionOnStep { id } => write!(f, "edge out of non-branch node {id} carries a condition"),
            Violation::DegenerateBranch { id, out_edges } => write!(f, "branch {id} has {out_edges} outgoing edge(s); at least 2 required"),
            Violation::UnconditionedBranchEdge { id } => write!(f, "edge out of branch {id} has no condition"),
            Violation::DuplicateCondition { id, condition } => write!(f, "branch {id} repeats condition {condition:?}"),
            Violation::DuplicateBranchLabel { label } => write!(f, "branch label {label:?} is used twice"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&lines.join("; "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubFlow {
    pub index: usize,
    pub node_path: Vec<String>,
    /// Branch label to the condition taken on this path.
    pub condition_bindings: BTreeMap<String, String>,
    /// `label: condition` pairs in path order, joined by `; `.
    pub description: String,
}

#[derive(Debug, Error)]
pub enum SubflowError {
    #[error("invalid workflow graph: {0}")]
    InvalidGraph(ValidationReport),
    #[error("more than {0} paths; refusing to enumerate")]
    TooManyPaths(usize),
    #[error("workflow text is empty")]
    EmptyWorkflow,
    #[error("decomposition returned no branches")]
    EmptyDecomposition,
    #[error("failed to read graph {path}: {reason}")]
    Io { path: String, reason: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl WorkflowGraph {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SubflowError> {
        let path = path.as_ref();
        let io = |reason: String| SubflowError::Io { path: path.display().to_string(), reason };
        let text = fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| io(e.to_string()))
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Outgoing edges in traversal order: unconditioned first, then by
    /// condition, then by target id.
    fn sorted_out_edges(&self) -> HashMap<&str, Vec<&Edge>> {
        let mut out: HashMap<&str, Vec<&Edge>> = HashMap::new();
        for e in &self.edges {
            out.entry(e.from.as_str()).or_default().push(e);
        }
        for list in out.values_mut() {
            list.sort_by(|a, b| a.condition.cmp(&b.condition).then_with(|| a.to.cmp(&b.to)));
        }
        out
    }
}

pub fn validate_graph(graph: &WorkflowGraph) -> ValidationReport {
    let mut v = Vec::new();
    let mut ids = HashSet::new();
    for n in &graph.nodes {
        if !ids.insert(n.id.as_str()) {
            v.push(Violation::DuplicateNode { id: n.id.clone() });
        }
    }
    let starts: Vec<String> = graph.nodes.iter().filter(|n| n.kind == NodeKind::Start).map(|n| n.id.clone()).collect();
    if starts.len() != 1 {
        v.push(Violation::StartCount { ids: starts.clone() });
    }
    if !graph.nodes.iter().any(|n| n.kind == NodeKind::End) {
        v.push(Violation::NoEnd);
    }
    for (i, e) in graph.edges.iter().enumerate() {
        for id in [&e.from, &e.to] {
            if !ids.contains(id.as_str()) {
                v.push(Violation::UnknownNode { edge_index: i, id: id.clone() });
            }
        }
    }

    let out = graph.sorted_out_edges();
    let mut labels = HashSet::new();
    for n in &graph.nodes {
        let edges = out.get(n.id.as_str()).map(Vec::as_slice).unwrap_or_default();
        match n.kind {
            NodeKind::End => {
                if !edges.is_empty() {
                    v.push(Violation::EndHasOutEdges { id: n.id.clone() });
                }
            }
            NodeKind::Start | NodeKind::Step => {
                if edges.is_empty() {
                    v.push(Violation::DeadEnd { id: n.id.clone() });
                } else if edges.len() > 1 {
                    v.push(Violation::StepOutDegree { id: n.id.clone(), count: edges.len() });
                }
                if edges.iter().any(|e| e.condition.is_some()) {
                    v.push(Violation::ConditionOnStep { id: n.id.clone() });
                }
            }
            NodeKind::Branch => {
                if edges.is_empty() {
                    v.push(Violation::DeadEnd { id: n.id.clone() });
                }
                if edges.len() < 2 {
                    v.push(Violation::DegenerateBranch { id: n.id.clone(), out_edges: edges.len() });
                }
                let mut seen = HashSet::new();
                for e in edges {
                    match &e.condition {
                        None => v.push(Violation::UnconditionedBranchEdge { id: n.id.clone() }),
                        Some(c) if !seen.insert(c.as_str()) => {
                            v.push(Violation::DuplicateCondition { id: n.id.clone(), condition: c.clone() })
                        }
                        Some(_) => {}
                    }
                }
                if !labels.insert(n.label.as_str()) {
                    v.push(Violation::DuplicateBranchLabel { label: n.label.clone() });
                }
            }
        }
    }

    if let Some(cycle) = find_cycle(graph, &out) {
        v.push(Violation::Cycle { nodes: cycle });
    }
    if let [start] = starts.as_slice() {
        let mut seen = HashSet::from([start.as_str()]);
        let mut stack = vec![start.as_str()];
        while let Some(id) = stack.pop() {
            for e in out.get(id).map(Vec::as_slice).unwrap_or_default() {
                if seen.insert(e.to.as_str()) {
                    stack.push(e.to.as_str());
                }
            }
        }
        for n in &graph.nodes {
            if !seen.contains(n.id.as_str()) {
                v.push(Violation::Unreachable { id: n.id.clone() });
            }
        }
    }
    ValidationReport { violations: v }
}

fn find_cycle(graph: &WorkflowGraph, out: &HashMap<&str, Vec<&Edge>>) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let mut mark: HashMap<&str, Mark> = graph.nodes.iter().map(|n| (n.id.as_str(), Mark::New)).collect();
    for root in &graph.nodes {
        if mark[root.id.as_str()] != Mark::New {
            continue;
        }
        // Iterative DFS with explicit edge cursors.
        let mut stack: Vec<(&str, usize)> = vec![(root.id.as_str(), 0)];
        mark.insert(root.id.as_str(), Mark::Active);
        while let Some((id, cursor)) = stack.last_mut() {
            let edges = out.get(*id).map(Vec::as_slice).unwrap_or_default();
            if *cursor == edges.len() {
                mark.insert(*id, Mark::Done);
                stack.pop();
                continue;
            }
            let next = edges[*cursor].to.as_str();
            *cursor += 1;
            match mark.get(next).copied() {
                Some(Mark::New) => {
                    mark.insert(next, Mark::Active);
                    stack.push((next, 0));
                }
                Some(Mark::Active) => {
                    let from = stack.iter().position(|(n, _)| *n == next).unwrap_or(0);
                    let mut cycle: Vec<String> = stack[from..].iter().map(|(n, _)| n.to_string()).collect();
                    cycle.push(next.to_string());
                    return Some(cycle);
                }
                _ => {}
            }
        }
    }
    None
}

/// Every start-to-end path, depth first, out-edges ordered by condition
/// (unconditioned first) and then by target id.
pub fn enumerate_paths(graph: &WorkflowGraph) -> Result<Vec<SubFlow>, SubflowError> {
    let report = validate_graph(graph);
    if !report.is_valid() {
        return Err(SubflowError::InvalidGraph(report));
    }
    let out = graph.sorted_out_edges();
    let labels: HashMap<&str, &Node> = graph.nodes.iter().map(|n| (n.id.as_str(), n)).collect();
    let start = graph.nodes.iter().find(|n| n.kind == NodeKind::Start).expect("validated");

    let mut result = Vec::new();
    let mut path: Vec<&str> = vec![start.id.as_str()];
    let mut bindings: Vec<(&str, &str)> = Vec::new();
    // Stack of (node, next edge cursor, whether that node pushed a binding).
    let mut stack: Vec<(&str, usize)> = vec![(start.id.as_str(), 0)];
    while let Some((id, cursor)) = stack.last_mut() {
        let node = labels[*id];
        if node.kind == NodeKind::End {
            if result.len() == MAX_PATHS {
                return Err(SubflowError::TooManyPaths(MAX_PATHS));
            }
            result.push(SubFlow {
                index: result.len(),
                node_path: path.iter().map(|s| s.to_string()).collect(),
                condition_bindings: bindings.iter().map(|(l, c)| (l.to_string(), c.to_string())).collect(),
                description: bindings.iter().map(|(l, c)| format!("{l}: {c}")).collect::<Vec<_>>().join("; "),
            });
            stack.pop();
            path.pop();
            pop_binding(&mut bindings, &stack, &labels);
            continue;
        }
        let edges = &out[*id];
        if *cursor == edges.len() {
            stack.pop();
            path.pop();
            pop_binding(&mut bindings, &stack, &labels);
            continue;
        }
        let edge = edges[*cursor];
        *cursor += 1;
        if node.kind == NodeKind::Branch {
            bindings.push((node.label.as_str(), edge.condition.as_deref().expect("validated")));
        }
        path.push(edge.to.as_str());
        stack.push((edge.to.as_str(), 0));
    }
    Ok(result)
}

/// After leaving a child, undo the binding its parent branch pushed.
fn pop_binding(bindings: &mut Vec<(&str, &str)>, stack: &[(&str, usize)], labels: &HashMap<&str, &Node>) {
    if let Some((parent, _)) = stack.last() {
        if labels[*parent].kind == NodeKind::Branch {
            bindings.pop();
        }
    }
}

pub fn decompose_prompt(workflow_text: &str) -> String {
    Template::Decompose.fill(&[("policy", workflow_text.trim())]).expect("decompose template placeholders")
}

/// One branch description per non-blank output line, in order.
pub fn parse_branch_lines(raw: &str) -> Vec<String> {
    raw.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect()
}

pub fn decompose_workflow_llm(workflow_text: &str, model: &ChatModel) -> Result<Vec<String>, SubflowError> {
    if workflow_text.trim().is_empty() {
        return Err(SubflowError::EmptyWorkflow);
    }
    let lines = parse_branch_lines(&model.complete(&decompose_prompt(workflow_text))?);
    if lines.is_empty() {
        return Err(SubflowError::EmptyDecomposition);
    }
    Ok(lines)
}
