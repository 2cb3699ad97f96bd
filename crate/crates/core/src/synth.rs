//! Synthetic conversations that follow one sub-flow of a workflow, spoken
//! by sampled user profiles.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Conversation, Speaker, Utterance};
use crate::gateway::{ChatModel, GatewayError};
use crate::prompts::Template;
use crate::rng::{rng_from_seed, uniform_below};

const NAMES: &str = include_str!("../assets/names.txt");
const PROFESSIONS: &str = include_str!("../assets/professions.txt");
const CITIES: &str = include_str!("../assets/cities.txt");

pub const DEFAULT_PROFILE_POOL: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UserProfile {
    pub name: String,
    pub profession: String,
    pub city: String,
    pub seed_index: usize,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("requested {requested} profiles but only {capacity} distinct combinations exist")]
    Capacity { requested: usize, capacity: usize },
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("conversation starts with the agent")]
    AgentFirst,
    #[error("unparseable conversation: {0}")]
    Unparseable(String),
    #[error("{} of {} conversations failed", .failures.len(), .failures.len() + .conversations.len())]
    Partial { conversations: Vec<Conversation>, failures: Vec<SynthFailure> },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthFailure {
    pub id: String,
    pub reason: String,
}

fn pool(text: &str) -> Vec<&str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

pub fn pool_sizes() -> (usize, usize, usize) {
    (pool(NAMES).len(), pool(PROFESSIONS).len(), pool(CITIES).len())
}

/// `n` distinct profiles, drawn with replacement and rejecting repeats.
pub fn make_profiles(n: usize, seed: u64) -> Result<Vec<UserProfile>, SynthError> {
    let (names, profs, cities) = (pool(NAMES), pool(PROFESSIONS), pool(CITIES));
    let capacity = names.len() * profs.len() * cities.len();
    if n == 0 || n > capacity {
        return Err(SynthError::Capacity { requested: n, capacity });
    }
    let mut rng = rng_from_seed(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let triple = (
            uniform_below(&mut rng, names.len() as u64) as usize,
            uniform_below(&mut rng, profs.len() as u64) as usize,
            uniform_below(&mut rng, cities.len() as u64) as usize,
        );
        if seen.insert(triple) {
            out.push(UserProfile {
                name: names[triple.0].to_string(),
                profession: profs[triple.1].to_string(),
                city: cities[triple.2].to_string(),
                seed_index: out.len(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub intent: String,
    pub workflow_text: String,
    pub subflows: Vec<String>,
    pub profiles_per_subflow: usize,
    pub conversations_per_pairing: usize,
    pub profile_pool: usize,
    pub profile_seed: u64,
}

impl SynthSpec {
    pub fn new(intent: impl Into<String>, workflow_text: impl Into<String>, subflows: Vec<String>) -> Self {
        Self {
            intent: intent.into(),
            workflow_text: workflow_text.into(),
            subflows,
            profiles_per_subflow: 1,
            conversations_per_pairing: 2,
            profile_pool: DEFAULT_PROFILE_POOL,
            profile_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.subflows.is_empty() {
            return bad("no sub-flows");
        }
        if self.intent.trim().is_empty() || self.workflow_text.trim().is_empty() {
            return bad("intent and workflow text must be non-empty");
        }
        if self.profiles_per_subflow == 0 || self.conversations_per_pairing == 0 || self.profile_pool == 0 {
            return bad("profiles_per_subflow, conversations_per_pairing and profile_pool must be positive");
        }
        Ok(())
    }
}

pub fn conversation_id(intent: &str, subflow: usize, profile: usize, replicate: usize) -> String {
    format!("{intent}-sf{subflow:03}-p{profile:03}-r{replicate}")
}

pub fn synth_prompt(workflow_text: &str, subflow: &str, profile: &UserProfile, replicate: usize) -> String {
    Template::SynthConversation
        .fill(&[
            ("policy", workflow_text.trim()),
            ("subflow", subflow.trim()),
            ("replicate", &(replicate + 1).to_string()),
            ("user_name", &profile.name),
            ("user_profession", &profile.profession),
            ("city", &profile.city),
        ])
        .expect("synth template")
}

fn speaker_prefix(line: &str) -> Option<(Speaker, &str)> {
    let (label, rest) = line.split_once(':')?;
    let speaker = match label.trim().trim_matches('*').to_ascii_lowercase().as_str() {
        "user" | "customer" => Speaker::Customer,
        "agent" => Speaker::Agent,
        _ => return None,
    };
    Some((speaker, rest.trim()))
}

/// Role-tagged lines into utterances. Untagged lines continue the previous
/// utterance; consecutive lines from one speaker are merged.
pub fn parse_dialog(raw: &str) -> Result<Vec<Utterance>, SynthError> {
    let mut out: Vec<Utterance> = Vec::new();
    for line in raw.lines().map(str::trim).filter(|l| !l.is_empty()) {
        match speaker_prefix(line) {
            Some((speaker, text)) => {
                if out.is_empty() && speaker == Speaker::Agent {
                    return Err(SynthError::AgentFirst);
                }
                match out.last_mut() {
                    Some(last) if last.speaker == speaker => {
                        last.text.push(' ');
                        last.text.push_str(text);
                    }
                    _ => out.push(Utterance { speaker, text: text.to_string() }),
                }
            }
            None => {
                if let Some(last) = out.last_mut() {
                    last.text.push(' ');
                    last.text.push_str(line);
                }
            }
        }
    }
    out.retain(|u| !u.text.trim().is_empty());
    if out.len() < 2 {
        return Err(SynthError::Unparseable(format!("found {} role-tagged utterances", out.len())));
    }
    if out.windows(2).any(|w| w[0].speaker == w[1].speaker) {
        return Err(SynthError::Unparseable("roles do not alternate".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct Pairing<'a> {
    pub intent: &'a str,
    pub subflow_index: usize,
    pub subflow: &'a str,
    pub profile_index: usize,
    pub profile: &'a UserProfile,
    pub replicate: usize,
}

impl Pairing<'_> {
    pub fn id(&self) -> String {
        conversation_id(self.intent, self.subflow_index, self.profile_index, self.replicate)
    }
}

pub fn synthesize_conversation(workflow_text: &str, pairing: Pairing<'_>, model: &ChatModel) -> Result<Conversation, SynthError> {
    if workflow_text.trim().is_empty() || pairing.subflow.trim().is_empty() {
        return Err(SynthError::InvalidSpec("workflow and sub-flow must be non-empty".into()));
    }
    let raw = model.complete(&synth_prompt(workflow_text, pairing.subflow, pairing.profile, pairing.replicate))?;
    let utterances = parse_dialog(&raw)?;
    let p = pairing.profile;
    let metadata = BTreeMap::from([
        ("subflow".to_string(), pairing.subflow.to_string()),
        ("subflow_index".to_string(), pairing.subflow_index.to_string()),
        ("profile".to_string(), format!("{} | {} | {}", p.name, p.profession, p.city)),
        ("profile_index".to_string(), pairing.profile_index.to_string()),
        ("replicate".to_string(), pairing.replicate.to_string()),
    ]);
    Ok(Conversation { id: pairing.id(), intent_label: pairing.intent.to_string(), utterances, metadata: Some(metadata) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    pub template_hash: String,
    pub profiles: Vec<UserProfile>,
    pub conversation_ids: Vec<String>,
    pub failures: Vec<SynthFailure>,
}

/// Pairing (sub-flow i, slot j) uses profile `(i * profiles_per_subflow + j)
/// mod profile_pool`. Output is ordered by id.
pub fn run_synthesis(spec: &SynthSpec, model: &ChatModel) -> Result<(Vec<Conversation>, SynthManifest), SynthError> {
    spec.validate()?;
    let profiles = make_profiles(spec.profile_pool, spec.profile_seed)?;
    let mut jobs = Vec::new();
    for (i, sf) in spec.subflows.iter().enumerate() {
        for j in 0..spec.profiles_per_subflow {
            let profile = &profiles[(i * spec.profiles_per_subflow + j) % profiles.len()];
            for r in 0..spec.conversations_per_pairing {
                jobs.push(Pairing { intent: &spec.intent, subflow_index: i, subflow: sf, profile_index: j, profile, replicate: r });
            }
        }
    }
    let results: Vec<(String, Result<Conversation, SynthError>)> =
        jobs.par_iter().map(|p| (p.id(), synthesize_conversation(&spec.workflow_text, *p, model))).collect();
    let mut conversations = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(c) => conversations.push(c),
            Err(e) => failures.push(SynthFailure { id, reason: e.to_string() }),
        }
    }
    conversations.sort_by(|a, b| a.id.cmp(&b.id));
    if !failures.is_empty() {
        return Err(SynthError::Partial { conversations, failures });
    }
    let manifest = SynthManifest {
        spec: spec.clone(),
        template_hash: Template::SynthConversation.hash(),
        profiles,
        conversation_ids: conversations.iter().map(|c| c.id.clone()).collect(),
        failures,
    };
    Ok((conversations, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Corpus;
    use crate::gateway::{FnTransport, Gateway};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn model(f: impl Fn(&str) -> String + Send + Sync + 'static) -> ChatModel {
        ChatModel::new(Arc::new(Gateway::live(Arc::new(FnTransport::replying(f)))), "m")
    }

    #[test]
    fn pools_meet_minimums() {
        let (n, p, c) = pool_sizes();
        assert!(n >= 100 && p >= 40 && c >= 40);
        for text in [NAMES, PROFESSIONS, CITIES] {
            let items = pool(text);
            assert_eq!(items.iter().collect::<HashSet<_>>().len(), items.len());
        }
    }

    #[test]
    fn fifty_profiles() {
        let a = make_profiles(50, 1).unwrap();
        assert_eq!(a, make_profiles(50, 1).unwrap());
        let distinct: HashSet<_> = a.iter().map(|p| (&p.name, &p.profession, &p.city)).collect();
        assert_eq!(distinct.len(), 50);
        let b = make_profiles(50, 2).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (&x.name, &x.profession, &x.city) != (&y.name, &y.profession, &y.city)));
        let one = make_profiles(1, 9).unwrap();
        assert!(!one[0].name.is_empty() && !one[0].profession.is_empty() && !one[0].city.is_empty());
        let (n, p, c) = pool_sizes();
        assert!(matches!(make_profiles(n * p * c + 1, 0), Err(SynthError::Capacity { .. })));
    }

    #[test]
    fn dialog_parsing() {
        let raw = "Here you go:\nUser: Hi there\nAgent: Hello,\nhow can I help?\nUser: Refund please\nAgent: Done.\nUser: Thanks\nAgent: Bye\nUser: Bye\nAgent: Take care";
        let u = parse_dialog(raw).unwrap();
        assert_eq!(u.len(), 8);
        assert_eq!(u[1].text, "Hello, how can I help?");
        assert_eq!(u[0].speaker, Speaker::Customer);
        assert!(matches!(parse_dialog("Agent: Hello\nUser: Hi"), Err(SynthError::AgentFirst)));
        assert!(matches!(parse_dialog("no tags at all"), Err(SynthError::Unparseable(_))));
    }

    fn spec(n_subflows: usize, pps: usize) -> SynthSpec {
        let mut s = SynthSpec::new("refund", "1. Ask name.\n2. Refund.", (0..n_subflows).map(|i| format!("branch {i}")).collect());
        s.profiles_per_subflow = pps;
        s
    }

    #[test]
    fn run_product_and_roundtrip() {
        let m = model(|p| format!("User: hi ({})\nAgent: hello\nUser: refund\nAgent: approved", p.len()));
        let (convs, manifest) = run_synthesis(&spec(3, 2), &m).unwrap();
        assert_eq!(convs.len(), 12);
        assert_eq!(manifest.conversation_ids.len(), 12);
        assert_eq!(convs[0].id, "refund-sf000-p000-r0");
        let corpus = Corpus::from_conversations(convs.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.jsonl");
        crate::corpus::save_corpus(&corpus, &path).unwrap();
        assert_eq!(crate::corpus::load_corpus(&path).unwrap().conversations(), &convs[..]);
        assert!(matches!(run_synthesis(&spec(0, 1), &m), Err(SynthError::InvalidSpec(_))));
    }

    #[test]
    fn partial_failures_are_reported() {
        let m = model(|p| if p.contains("branch 1") { "Agent: hi\nUser: hello".into() } else { "User: a\nAgent: b".into() });
        match run_synthesis(&spec(2, 1), &m) {
            Err(SynthError::Partial { conversations, failures }) => {
                assert_eq!(conversations.len(), 2);
                assert_eq!(failures.len(), 2);
                assert!(failures[0].id.contains("sf001"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn ids_are_injective(a in (0usize..1000, 0usize..1000, 0usize..10), b in (0usize..1000, 0usize..1000, 0usize..10)) {
            prop_assume!(a != b);
            prop_assert_ne!(conversation_id("x", a.0, a.1, a.2), conversation_id("x", b.0, b.1, b.2));
        }
    }
}
