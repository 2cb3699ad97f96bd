//! Conversation corpora: on-disk JSONL format, validation and the intent index.
//!
//! One JSON object per line:
//!
//! ```json
//! {"id": "c1", "intent": "refund", "utterances": [{"speaker": "customer", "text": "Hi"}, ...]}
//! ```
//!
//! The machine-readable schema is [`CORPUS_SCHEMA`]. Speakers other than
//! `customer` and `agent` are rejected. Intent labels are opaque and matched
//! exactly.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// JSON Schema describing one corpus line.
pub const CORPUS_SCHEMA: &str = include_str!("../assets/corpus.schema.json");

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate conversation id {0:?}")]
    DuplicateId(String),
    #[error("corpus {0} contains no conversations")]
    Empty(PathBuf),
    #[error("invalid conversation {id:?}: {reason}")]
    Invalid { id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Customer,
    Agent,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::Customer => "Customer",
            Speaker::Agent => "Agent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

impl Utterance {
    pub fn customer(text: impl Into<String>) -> Self {
        Self { speaker: Speaker::Customer, text: text.into() }
    }

    pub fn agent(text: impl Into<String>) -> Self {
        Self { speaker: Speaker::Agent, text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conversation {
    pub id: String,
    #[serde(rename = "intent")]
    pub intent_label: String,
    pub utterances: Vec<Utterance>,
    /// Free-form provenance (e.g. the sub-flow and profile of a synthesized conversation).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<BTreeMap<String, String>>,
}

impl Conversation {
    pub fn new(id: impl Into<String>, intent: impl Into<String>, utterances: Vec<Utterance>) -> Self {
        Self { id: id.into(), intent_label: intent.into(), utterances, metadata: None }
    }

    /// Checks the per-conversation invariants.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id is empty".into());
        }
        if self.intent_label.trim().is_empty() {
            return Err("intent is empty".into());
        }
        if self.utterances.len() < 2 {
            return Err(format!("needs at least 2 utterances, found {}", self.utterances.len()));
        }
        if let Some(pos) = self.utterances.iter().position(|u| u.text.trim().is_empty()) {
            return Err(format!("utterance {pos} has empty text"));
        }
        Ok(())
    }
}

/// Validated conversations plus an index from intent label to members.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    conversations: Vec<Conversation>,
    by_intent: BTreeMap<String, Vec<usize>>,
}

impl Corpus {
    pub fn from_conversations(conversations: Vec<Conversation>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for conv in &conversations {
            conv.validate()
                .map_err(|reason| CorpusError::Invalid { id: conv.id.clone(), reason })?;
            if !seen.insert(conv.id.as_str()) {
                return Err(CorpusError::DuplicateId(conv.id.clone()));
            }
        }
        let mut by_intent: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, conv) in conversations.iter().enumerate() {
            by_intent.entry(conv.intent_label.clone()).or_default().push(i);
        }
        Ok(Self { conversations, by_intent })
    }

    pub fn conversations(&self) -> &[Conversation] {
        &self.conversations
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    /// Intent labels in lexicographic order.
    pub fn intents(&self) -> impl Iterator<Item = &str> {
        self.by_intent.keys().map(String::as_str)
    }

    /// Conversation ids for `intent`, in corpus order.
    pub fn intent_ids(&self, intent: &str) -> Vec<&str> {
        self.by_intent
            .get(intent)
            .map(|idx| idx.iter().map(|&i| self.conversations[i].id.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn get(&self, id: &str) -> Option<&Conversation> {
        self.conversations.iter().find(|c| c.id == id)
    }

    /// All conversations whose label equals `intent`, in corpus order.
    pub fn filter_by_intent(&self, intent: &str) -> Vec<&Conversation> {
        self.by_intent
            .get(intent)
            .map(|idx| idx.iter().map(|&i| &self.conversations[i]).collect())
            .unwrap_or_default()
    }

    pub fn into_conversations(self) -> Vec<Conversation> {
        self.conversations
    }

    /// Serializes the corpus as JSONL (one line per conversation, trailing newline).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for conv in &self.conversations {
            out.push_str(&serde_json::to_string(conv).expect("conversation serializes"));
            out.push('\n');
        }
        out
    }
}

/// Parses JSONL corpus text. `origin` only labels the empty-corpus error.
pub fn parse_corpus(reader: impl BufRead, origin: &Path) -> Result<Corpus, CorpusError> {
    let mut conversations = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Parse { line: line_no, reason: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let conv: Conversation = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Parse { line: line_no, reason: e.to_string() })?;
        conv.validate()
            .map_err(|reason| CorpusError::Parse { line: line_no, reason: format!("{}: {reason}", conv.id) })?;
        if !seen.insert(conv.id.clone()) {
            return Err(CorpusError::DuplicateId(conv.id));
        }
        conversations.push(conv);
    }
    if conversations.is_empty() {
        return Err(CorpusError::Empty(origin.to_path_buf()));
    }
    Corpus::from_conversations(conversations)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let file = fs::File::open(path)
        .map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    parse_corpus(BufReader::new(file), path)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|source| CorpusError::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(path, corpus.to_jsonl()).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

/// Prompt form of a conversation: one `Customer: ...` / `Agent: ...` line per
/// utterance, in order. Backslashes and line breaks inside an utterance are
/// escaped so the rendering stays one line per utterance.
pub fn render_conversation(conv: &Conversation) -> String {
    render_utterances(&conv.utterances)
}

pub fn render_utterances(utterances: &[Utterance]) -> String {
    utterances
        .iter()
        .map(|u| format!("{}: {}", u.speaker.label(), escape_line(&u.text)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn escape_line(text: &str) -> String {
    if !text.contains(['\\', '\n', '\r']) {
        return text.to_string();
    }
    let mut out = String::with_capacity(text.len() + 4);
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn conv(id: &str, intent: &str) -> Conversation {
        Conversation::new(id, intent, vec![Utterance::customer("hi"), Utterance::agent("hello")])
    }

    fn parse(text: &str) -> Result<Corpus, CorpusError> {
        parse_corpus(text.as_bytes(), Path::new("mem"))
    }

    #[test]
    fn three_records_two_intents() {
        let text: String = [conv("a", "x"), conv("b", "y"), conv("c", "x")]
            .iter()
            .map(|c| serde_json::to_string(c).unwrap() + "\n")
            .collect();
        let corpus = parse(&text).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.intents().count(), 2);
        assert_eq!(corpus.intent_ids("x"), vec!["a", "c"]);
    }

    #[test]
    fn duplicate_id_is_named() {
        let line = serde_json::to_string(&conv("c1", "x")).unwrap();
        let err = parse(&format!("{line}\n{line}\n")).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId(ref id) if id == "c1"));
        assert!(err.to_string().contains("c1"));
    }

    #[test]
    fn empty_file() {
        assert!(matches!(parse(""), Err(CorpusError::Empty(_))));
        assert!(matches!(parse("\n  \n"), Err(CorpusError::Empty(_))));
    }

    #[test]
    fn parse_error_carries_line_number() {
        let good = serde_json::to_string(&conv("a", "x")).unwrap();
        let err = parse(&format!("{good}\n{{not json\n")).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn unknown_speaker_is_rejected() {
        let line = r#"{"id":"a","intent":"x","utterances":[{"speaker":"bot","text":"hi"},{"speaker":"agent","text":"yo"}]}"#;
        let err = parse(line).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 1, ref reason } if reason.contains("bot")));
    }

    #[test]
    fn invariants_enforced() {
        let one = r#"{"id":"a","intent":"x","utterances":[{"speaker":"customer","text":"hi"}]}"#;
        assert!(matches!(parse(one), Err(CorpusError::Parse { .. })));
        let blank = r#"{"id":"a","intent":"x","utterances":[{"speaker":"customer","text":"  "},{"speaker":"agent","text":"x"}]}"#;
        assert!(matches!(parse(blank), Err(CorpusError::Parse { .. })));
        let no_intent = r#"{"id":"a","intent":"","utterances":[{"speaker":"customer","text":"a"},{"speaker":"agent","text":"x"}]}"#;
        assert!(matches!(parse(no_intent), Err(CorpusError::Parse { .. })));
    }

    #[test]
    fn filter_by_intent_cases() {
        let corpus = Corpus::from_conversations(vec![conv("a", "A"), conv("b", "B"), conv("c", "A")]).unwrap();
        let ids: Vec<_> = corpus.filter_by_intent("A").iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "c"]);
        assert!(corpus.filter_by_intent("zzz").is_empty());
        assert_eq!(corpus.filter_by_intent("B").len(), 1);
        // Labels are exact-match.
        assert!(corpus.filter_by_intent("a").is_empty());
    }

    #[test]
    fn render_two_lines() {
        let c = conv("a", "x");
        let rendered = render_conversation(&c);
        assert_eq!(rendered, "Customer: hi\nAgent: hello");
        assert_eq!(rendered, render_conversation(&c));
    }

    #[test]
    fn render_escapes_line_breaks() {
        let c = Conversation::new("a", "x", vec![Utterance::customer("a\nb"), Utterance::agent("c\\n")]);
        assert_eq!(render_conversation(&c), "Customer: a\\nb\nAgent: c\\\\n");
    }

    #[test]
    fn schema_is_valid_json() {
        let v: serde_json::Value = serde_json::from_str(CORPUS_SCHEMA).unwrap();
        assert_eq!(v["required"], serde_json::json!(["id", "intent", "utterances"]));
    }

    fn arb_utterance() -> impl Strategy<Value = Utterance> {
        (any::<bool>(), "[a-z\\\\\n ]{0,6}[a-z]").prop_map(|(c, t)| Utterance {
            speaker: if c { Speaker::Customer } else { Speaker::Agent },
            text: t,
        })
    }

    fn arb_conversation() -> impl Strategy<Value = Conversation> {
        ("[a-z]{1,6}", "[a-z_]{1,5}", prop::collection::vec(arb_utterance(), 2..6))
            .prop_map(|(id, intent, utterances)| Conversation::new(id, intent, utterances))
    }

    proptest! {
        #[test]
        fn save_load_round_trip(convs in prop::collection::vec(arb_conversation(), 1..8)) {
            let mut seen = HashSet::new();
            let convs: Vec<_> = convs.into_iter().filter(|c| seen.insert(c.id.clone())).collect();
            let corpus = Corpus::from_conversations(convs).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.jsonl");
            save_corpus(&corpus, &path).unwrap();
            prop_assert_eq!(load_corpus(&path).unwrap(), corpus);
        }

        #[test]
        fn intent_partition(convs in prop::collection::vec(arb_conversation(), 1..12)) {
            let mut seen = HashSet::new();
            let convs: Vec<_> = convs.into_iter().filter(|c| seen.insert(c.id.clone())).collect();
            let corpus = Corpus::from_conversations(convs).unwrap();
            let mut union: Vec<&str> = corpus
                .intents()
                .flat_map(|i| corpus.filter_by_intent(i))
                .map(|c| c.id.as_str())
                .collect();
            let total = union.len();
            union.sort();
            union.dedup();
            prop_assert_eq!(union.len(), total);
            prop_assert_eq!(total, corpus.len());
        }

        #[test]
        fn render_is_injective(a in prop::collection::vec(arb_utterance(), 1..4),
                               b in prop::collection::vec(arb_utterance(), 1..4)) {
            if a != b {
                prop_assert_ne!(render_utterances(&a), render_utterances(&b));
            }
        }
    }
}
