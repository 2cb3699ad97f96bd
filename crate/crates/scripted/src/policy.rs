//! Reads workflow sentences as condition/action rules and plays them out.

use std::collections::BTreeMap;

use crate::kb::*;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Cond {
    Error,
    NoError,
    Levels(Vec<&'static str>),
    Status(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Ask { slots: Vec<Slot>, any: bool },
    Check,
    Outcome(Outcome),
    Nothing,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub text: String,
    pub cond: Option<Cond>,
    pub action: Action,
}

const LEVELS: [&str; 4] = ["gold", "silver", "bronze", "guest"];

fn parse_cond(text: &str) -> Option<Cond> {
    let t = text.to_lowercase();
    if t.contains("no error") {
        return Some(Cond::NoError);
    }
    if t.contains("error") {
        return Some(Cond::Error);
    }
    if t.contains("in transit") {
        return Some(Cond::Status("in transit"));
    }
    if t.contains("delivered") {
        return Some(Cond::Status("delivered"));
    }
    let levels: Vec<&'static str> = LEVELS.into_iter().filter(|l| t.contains(l)).collect();
    (!levels.is_empty()).then_some(Cond::Levels(levels))
}

pub fn asked_slots(text: &str) -> Vec<Slot> {
    let t = text.to_lowercase();
    Slot::ALL.into_iter().filter(|s| t.contains(s.keyword())).collect()
}

fn parse_action(text: &str) -> Action {
    let t = text.to_lowercase();
    if let Some(o) = Outcome::ALL.into_iter().find(|o| t.contains(o.workflow_phrase())) {
        return Action::Outcome(o);
    }
    if t.trim_start().starts_with("check") {
        return Action::Check;
    }
    let slots = asked_slots(&t);
    if slots.is_empty() {
        return Action::Nothing;
    }
    let any = t.contains("full name or account id");
    Action::Ask { slots, any }
}

pub fn parse_rule(line: &str) -> Rule {
    let text = line.trim().to_string();
    let lower = text.to_lowercase();
    if lower.starts_with("if ") {
        if let Some((cond, action)) = text.split_once(',') {
            return Rule { cond: parse_cond(cond), action: parse_action(action), text };
        }
    }
    Rule { cond: None, action: parse_action(&text), text }
}

pub fn parse_rules(workflow: &str) -> Vec<Rule> {
    flowmine_core::text::parse_numbered_steps(workflow).iter().map(|l| parse_rule(l)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Customer,
    Agent,
}

pub type Turn = (Role, String);

/// `Customer: ...` / `Agent: ...` (or `User:`) lines; other lines continue
/// the previous turn.
pub fn parse_history(text: &str) -> Vec<Turn> {
    let mut out: Vec<Turn> = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let tagged = [("Customer:", Role::Customer), ("User:", Role::Customer), ("Agent:", Role::Agent)]
            .into_iter()
            .find_map(|(p, r)| line.strip_prefix(p).map(|rest| (r, rest.trim().to_string())));
        match (tagged, out.last_mut()) {
            (Some(t), _) => out.push(t),
            (None, Some(last)) => {
                last.1.push(' ');
                last.1.push_str(line);
            }
            (None, None) => {}
        }
    }
    out
}

/// Slot values stated by the customer.
pub fn customer_facts(turns: &[Turn]) -> BTreeMap<Slot, String> {
    let mut out = BTreeMap::new();
    for (role, text) in turns {
        if *role != Role::Customer {
            continue;
        }
        let lower = text.to_lowercase();
        for slot in Slot::ALL {
            let pattern = if slot == Slot::ShippingStatus {
                "shipping status says ".to_string()
            } else {
                format!("my {} is ", slot.label().to_lowercase())
            };
            if let Some(at) = lower.find(&pattern) {
                let rest = &text[at + pattern.len()..];
                let end = [rest.find(", "), rest.find(" and my "), rest.find(" and the ")].into_iter().flatten().min().unwrap_or(rest.len());
                let value = rest[..end].trim().trim_end_matches('.').trim();
                if !value.is_empty() {
                    out.insert(slot, value.to_string());
                }
            }
        }
    }
    out
}

/// `- label: value` bullet lines.
pub fn parse_info(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| {
            let l = l.trim().trim_start_matches('-').trim();
            let (k, v) = l.split_once(':')?;
            Some((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn system_error(info: &[(String, String)], turns: &[Turn]) -> Option<bool> {
    if let Some((_, v)) = info.iter().find(|(k, _)| k.eq_ignore_ascii_case("system error")) {
        return Some(v.eq_ignore_ascii_case("yes"));
    }
    let agent_said = |p: &str| turns.iter().any(|(r, t)| *r == Role::Agent && t.contains(p));
    if agent_said(ERROR_STATEMENT) {
        Some(true)
    } else if agent_said(NO_ERROR_STATEMENT) {
        Some(false)
    } else {
        None
    }
}

fn cond_holds(cond: &Cond, facts: &BTreeMap<Slot, String>, error: Option<bool>) -> Option<bool> {
    match cond {
        Cond::Error => error,
        Cond::NoError => error.map(|e| !e),
        Cond::Levels(levels) => facts.get(&Slot::Membership).map(|m| levels.iter().any(|l| m.eq_ignore_ascii_case(l))),
        Cond::Status(s) => facts.get(&Slot::ShippingStatus).map(|v| v.eq_ignore_ascii_case(s)),
    }
}

pub fn join_labels(slots: &[Slot], conj: &str) -> String {
    let labels: Vec<&str> = slots.iter().map(|s| s.label()).collect();
    match labels.len() {
        0 => String::new(),
        1 => labels[0].to_string(),
        n => format!("{} {conj} {}", labels[..n - 1].join(", "), labels[n - 1]),
    }
}

pub fn ask_utterance(slots: &[Slot], any: bool) -> String {
    format!("Could you please share your {}?", join_labels(slots, if any { "or" } else { "and" }))
}

fn outcome_in(text: &str) -> Option<Outcome> {
    let t = text.to_lowercase();
    Outcome::ALL.into_iter().find(|o| t.contains(o.marker()))
}

/// Next agent message for `history` under `workflow`; `DONE` marks the end.
pub fn agent_reply(workflow: &str, info: &[(String, String)], history: &[Turn]) -> String {
    let last_agent = history.iter().rev().find(|(r, _)| *r == Role::Agent);
    if last_agent.is_some_and(|(_, t)| outcome_in(t).is_some()) {
        return "DONE".into();
    }
    let rules = parse_rules(workflow);
    let facts = customer_facts(history);
    let error = system_error(info, history);
    let announced = history.iter().any(|(r, t)| *r == Role::Agent && t.contains("system error"));
    let mut seen_check = false;
    for rule in &rules {
        if let Some(c) = &rule.cond {
            if cond_holds(c, &facts, error) != Some(true) {
                continue;
            }
        }
        let prefix = |body: &str| -> String {
            match (seen_check && !announced, error) {
                (true, Some(true)) => format!("{ERROR_STATEMENT} {body}"),
                (true, Some(false)) => format!("{NO_ERROR_STATEMENT} {body}"),
                _ => body.to_string(),
            }
        };
        match &rule.action {
            Action::Check => seen_check = true,
            Action::Nothing => {}
            Action::Outcome(o) => return prefix(o.utterance()),
            Action::Ask { slots, any } => {
                let known = |s: &Slot| facts.contains_key(s);
                let satisfied = if *any { slots.iter().any(known) } else { slots.iter().all(known) };
                if satisfied {
                    continue;
                }
                let already_asked = history.windows(2).any(|w| {
                    w[0].0 == Role::Agent && w[1].0 == Role::Customer && asked_slots(&w[0].1) == *slots && w[1].1.contains("don't have")
                });
                if already_asked {
                    return format!("{STUCK_MISSING} DONE");
                }
                return prefix(&ask_utterance(slots, *any));
            }
        }
    }
    format!("{STUCK_NO_STEP} DONE")
}

fn sentence_case(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

pub fn answer_slots(values: &[(Slot, String)]) -> String {
    let parts: Vec<String> = values
        .iter()
        .map(|(s, v)| if *s == Slot::ShippingStatus { format!("the shipping status says {v}") } else { format!("my {} is {v}", s.label()) })
        .collect();
    let body = match parts.len() {
        0 => String::new(),
        1 => parts[0].clone(),
        n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
    };
    format!("{}.", sentence_case(&body))
}

/// Next customer message given their issue and shareable slot values.
pub fn customer_reply(intent: Intent, info: &[(String, String)], history: &[Turn]) -> String {
    let Some((_, last)) = history.iter().rev().find(|(r, _)| *r == Role::Agent) else {
        return intent.opener().to_string();
    };
    let requested = asked_slots(last);
    if !requested.is_empty() {
        let have: Vec<(Slot, String)> = requested
            .iter()
            .filter_map(|s| info.iter().find(|(k, _)| Slot::from_label(k) == Some(*s)).map(|(_, v)| (*s, v.clone())))
            .collect();
        if have.is_empty() {
            return DONT_HAVE.to_string();
        }
        return answer_slots(&have);
    }
    if outcome_in(last).is_some() {
        THANKS.to_string()
    } else {
        ACK.to_string()
    }
}

fn fnv(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

const NAMES: [&str; 8] = ["Ana Ruiz", "Tom Becker", "Priya Nair", "Lukas Berg", "Mei Tan", "Omar Haddad", "Sofia Costa", "Jon Park"];

/// User information, system information and outcome for a sub-flow description.
pub struct ScenarioFacts {
    pub user: Vec<(Slot, String)>,
    pub system: Vec<String>,
    pub outcome: Option<Outcome>,
}

pub fn bindings(description: &str) -> Vec<(String, String)> {
    description
        .split(';')
        .filter_map(|part| part.split_once(':').map(|(k, v)| (k.trim().to_lowercase(), v.trim().to_string())))
        .collect()
}

pub fn scenario_facts(intent: Intent, description: &str, full_name: Option<&str>) -> ScenarioFacts {
    let h = fnv(description);
    let name = full_name.map(str::to_string).unwrap_or_else(|| NAMES[(h % NAMES.len() as u64) as usize].to_string());
    let handle: String = name.split_whitespace().next().unwrap_or("user").to_lowercase();
    let order = format!("ORD-{}", 10_000 + h % 90_000);
    let mut user = Vec::new();
    let mut system = Vec::new();
    let mut outcome = None;
    let b = bindings(description);
    let get = |k: &str| b.iter().find(|(key, _)| key == k).map(|(_, v)| v.to_lowercase());
    match intent {
        Intent::Refund => {
            match get("identity").as_deref() {
                Some("full name") => user.push((Slot::FullName, name.clone())),
                _ => user.push((Slot::AccountId, format!("ACC-{}", 1000 + (h >> 8) % 9000))),
            }
            user.push((Slot::Username, format!("{handle}{}", 10 + (h >> 16) % 90)));
            user.push((Slot::Email, format!("{handle}@example.com")));
            user.push((Slot::OrderId, order));
            match get("system error").as_deref() {
                Some("error") => {
                    system.push("system error: yes".to_string());
                    outcome = Some(Outcome::Reverse);
                }
                _ => system.push("system error: no".to_string()),
            }
            if let Some(level) = get("membership") {
                user.push((Slot::Membership, level.clone()));
                outcome = match level.as_str() {
                    "gold" => Some(Outcome::FullRefund),
                    "silver" => Some(Outcome::ApproveRefund),
                    "bronze" => Some(Outcome::StoreCredit),
                    "guest" => Some(Outcome::Dispute),
                    _ => outcome,
                };
            }
        }
        Intent::Shipping => {
            user.push((Slot::OrderId, order));
            let status = get("shipping status").unwrap_or_else(|| "in transit".into());
            user.push((Slot::ShippingStatus, status.clone()));
            if status == "delivered" {
                outcome = Some(Outcome::Claim);
            } else if let Some(m) = get("membership") {
                let first = m.split(" or ").next().unwrap_or("gold").to_string();
                user.push((Slot::Membership, first));
                outcome = Some(if m.contains("gold") { Outcome::Express } else { Outcome::Estimate });
            }
        }
    }
    ScenarioFacts { user, system, outcome }
}

/// Plays the agent (under `workflow`) against a customer holding `facts`.
pub fn play_dialog(intent: Intent, workflow: &str, facts: &ScenarioFacts, opener: Option<&str>, cap: usize) -> Vec<Turn> {
    let info: Vec<(String, String)> = facts.user.iter().map(|(s, v)| (s.label().to_string(), v.clone())).collect();
    let sys: Vec<(String, String)> = facts.system.iter().filter_map(|l| l.split_once(':')).map(|(k, v)| (k.trim().into(), v.trim().into())).collect();
    let mut turns: Vec<Turn> = Vec::new();
    while turns.len() < cap {
        if turns.len() % 2 == 0 {
            let text = match (turns.is_empty(), opener) {
                (true, Some(o)) => o.to_string(),
                _ => customer_reply(intent, &info, &turns),
            };
            turns.push((Role::Customer, text));
        } else {
            let reply = agent_reply(workflow, &sys, &turns);
            if let Some(rest) = reply.strip_suffix("DONE") {
                let rest = rest.trim();
                if !rest.is_empty() {
                    turns.push((Role::Agent, rest.to_string()));
                }
                break;
            }
            turns.push((Role::Agent, reply));
        }
    }
    turns
}

pub fn judge(criteria: &str, turns: &[Turn]) -> (bool, String) {
    let Some(outcome) = Outcome::from_criteria(criteria) else {
        return (false, "The success criteria name no recognisable outcome.".into());
    };
    let done = turns.iter().any(|(r, t)| *r == Role::Agent && t.to_lowercase().contains(outcome.marker()));
    if done {
        (true, format!("The agent {} as the criteria require.", outcome.past()))
    } else {
        let reason = match turns.iter().rev().find(|(r, _)| *r == Role::Agent) {
            Some((_, t)) if t.starts_with("I'm sorry") => "the agent gave up before resolving the issue",
            Some((_, t)) => match outcome_in(t) {
                Some(other) if other != outcome => "the agent took a different action",
                _ => "the conversation ended without that action",
            },
            None => "the agent never replied",
        };
        (false, format!("The agent never {}; {reason}.", outcome.past()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Followed,
    NotApplicable,
    NotFollowed,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Followed => "followed",
            Verdict::NotApplicable => "not applicable",
            Verdict::NotFollowed => "not followed",
        }
    }
}

pub fn compliance(guidelines: &str, turns: &[Turn]) -> Vec<(Verdict, String)> {
    let facts = customer_facts(turns);
    let error = system_error(&[], turns);
    let agent_text: String = turns.iter().filter(|(r, _)| *r == Role::Agent).map(|(_, t)| t.to_lowercase()).collect::<Vec<_>>().join("\n");
    parse_rules(guidelines)
        .into_iter()
        .map(|rule| {
            if let Some(c) = &rule.cond {
                if cond_holds(c, &facts, error) != Some(true) {
                    return (Verdict::NotApplicable, "The condition of this rule does not arise in the conversation.".to_string());
                }
            }
            let followed = match &rule.action {
                Action::Nothing => true,
                Action::Check => agent_text.contains("system error"),
                Action::Outcome(o) => agent_text.contains(o.marker()),
                Action::Ask { slots, any } => {
                    let hit = |s: &Slot| agent_text.contains(s.keyword());
                    if *any { slots.iter().any(hit) } else { slots.iter().all(hit) }
                }
            };
            if followed {
                (Verdict::Followed, "The agent carried out this step.".to_string())
            } else {
                (Verdict::NotFollowed, "The rule applies but the agent did not carry it out.".to_string())
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(intent: Intent) -> String {
        intent.items().iter().enumerate().map(|(i, it)| format!("{}. {}", i + 1, it.sentence)).collect::<Vec<_>>().join("\n")
    }

    #[test]
    fn full_workflow_resolves_every_subflow() {
        for intent in [Intent::Refund, Intent::Shipping] {
            for sf in intent.subflows() {
                let facts = scenario_facts(intent, &sf, None);
                let turns = play_dialog(intent, &gt(intent), &facts, None, 30);
                let (ok, why) = judge(facts.outcome.unwrap().criteria(), &turns);
                assert!(ok, "{sf}: {why}\n{turns:?}");
                let verdicts = compliance(&gt(intent), &turns);
                assert!(verdicts.iter().all(|(v, _)| *v != Verdict::NotFollowed), "{sf}: {verdicts:?}");
            }
        }
    }

    #[test]
    fn account_only_identity_fails_full_name_customers() {
        let wf = gt(Intent::Refund).replace(REFUND_ITEMS[0].sentence, ACCOUNT_ONLY_SENTENCE);
        let results: Vec<bool> = Intent::Refund
            .subflows()
            .iter()
            .map(|sf| {
                let facts = scenario_facts(Intent::Refund, sf, None);
                judge(facts.outcome.unwrap().criteria(), &play_dialog(Intent::Refund, &wf, &facts, None, 30)).0
            })
            .collect();
        assert_eq!(results.iter().filter(|&&x| x).count(), 5);
    }

    #[test]
    fn facts_parse_back() {
        let turns = vec![(Role::Customer, "My username is ana12, my email address is ana@example.com and my order ID is ORD-12345.".to_string())];
        let f = customer_facts(&turns);
        assert_eq!(f[&Slot::Email], "ana@example.com");
        assert_eq!(f[&Slot::OrderId], "ORD-12345");
    }
}
