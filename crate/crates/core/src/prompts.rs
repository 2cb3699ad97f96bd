//! Prompt templates bundled as text assets.
//!
//! Placeholders use `{{name}}`; single braces are left alone so templates
//! can carry literal JSON examples.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template {template}: no value for placeholder {{{{{name}}}}}")]
    Missing { template: &'static str, name: String },
    #[error("template {template}: unknown placeholder {name:?}")]
    Unknown { template: &'static str, name: String },
}

macro_rules! templates {
    ($($variant:ident => $name:literal),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum Template { $($variant),* }

        impl Template {
            pub const ALL: &'static [Template] = &[$(Template::$variant),*];

            pub fn name(self) -> &'static str {
                match self { $(Template::$variant => $name),* }
            }

            pub fn text(self) -> &'static str {
                match self { $(Template::$variant => include_str!(concat!("../prompts/", $name, ".txt"))),* }
            }
        }
    };
}

templates! {
    Elements => "elements",
    Decompose => "decompose",
    Scenario => "scenario",
    Judge => "judge",
    CustomerBot => "customer_bot",
    AgentBot => "agent_bot",
    Compliance => "compliance",
    QaCot => "qa_cot",
    QaGuide => "qa_guide",
    QaImplementer => "qa_implementer",
    QaExtract => "qa_extract",
    QaReflect => "qa_reflect",
    Basic => "basic",
    Reflect => "reflect",
    ReflectGenerate => "reflect_generate",
    Plan => "plan",
    PlanGenerate => "plan_generate",
    Ensemble => "ensemble",
    AltEdit => "alt_edit",
    AltSteps => "alt_steps",
    AltLikert => "alt_likert",
    QaPairs => "qa_pairs",
    QaAnswer => "qa_answer",
    QaGrade => "qa_grade",
    SynthConversation => "synth_conversation",
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Template {
    /// The first line of the template, which identifies it uniquely.
    pub fn header(self) -> &'static str {
        self.text().lines().next().unwrap_or_default()
    }

    /// Identifies which template a rendered prompt came from.
    pub fn detect(prompt: &str) -> Option<Template> {
        let first = prompt.lines().next()?;
        Template::ALL.iter().copied().find(|t| t.header() == first)
    }

    pub fn placeholders(self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut rest = self.text();
        while let Some(start) = rest.find("{{") {
            let after = &rest[start + 2..];
            match after.find("}}") {
                Some(end) => {
                    out.insert(after[..end].to_string());
                    rest = &after[end + 2..];
                }
                None => break,
            }
        }
        out
    }

    /// Hex SHA-256 of the template text.
    pub fn hash(self) -> String {
        hex::encode(Sha256::digest(self.text().as_bytes()))
    }

    /// Substitutes every placeholder. Values are inserted verbatim and are
    /// not re-scanned, so a value may itself contain `{{...}}`.
    pub fn fill(self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let wanted = self.placeholders();
        for (name, _) in values {
            if !wanted.contains(*name) {
                return Err(TemplateError::Unknown { template: self.name(), name: name.to_string() });
            }
        }
        let text = self.text();
        let mut out = String::with_capacity(text.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
        let mut rest = text;
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find("}}").expect("placeholders are closed");
            let name = &after[..end];
            let value = values
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| TemplateError::Missing { template: self.name(), name: name.to_string() })?;
            out.push_str(value);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }

    /// Inverse of [`Template::fill`]: recovers placeholder values from a
    /// rendered prompt. Values must not contain the literal text that
    /// follows their placeholder.
    pub fn parse_filled(self, prompt: &str) -> Option<BTreeMap<String, String>> {
        let mut literals = Vec::new();
        let mut names = Vec::new();
        let mut rest = self.text();
        while let Some(start) = rest.find("{{") {
            literals.push(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find("}}")?;
            names.push(&after[..end]);
            rest = &after[end + 2..];
        }
        literals.push(rest);
        let mut body = prompt.strip_prefix(literals[0])?;
        let last = literals[literals.len() - 1];
        body = body.strip_suffix(last)?;
        let mut out = BTreeMap::new();
        for (i, name) in names.iter().enumerate() {
            let next = literals[i + 1];
            let value = if i + 1 == names.len() {
                std::mem::take(&mut body)
            } else {
                let at = body.find(next)?;
                let v = &body[..at];
                body = &body[at + next.len()..];
                v
            };
            out.entry(name.to_string()).or_insert_with(|| value.to_string());
        }
        Some(out)
    }
}

/// Template name to content hash, for provenance records.
pub fn template_hashes() -> BTreeMap<String, String> {
    Template::ALL.iter().map(|t| (t.name().to_string(), t.hash())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_filled_inverts_fill() {
        for t in Template::ALL {
            let values: Vec<(String, String)> =
                t.placeholders().into_iter().map(|p| (p.clone(), format!("value of {p}\nsecond line"))).collect();
            let refs: Vec<(&str, &str)> = values.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            let prompt = t.fill(&refs).unwrap();
            let back = t.parse_filled(&prompt).unwrap_or_else(|| panic!("{t}"));
            for (k, v) in &values {
                assert_eq!(&back[k], v, "{t}/{k}");
            }
        }
        assert!(Template::Basic.parse_filled("unrelated").is_none());
    }

    #[test]
    fn headers_are_unique() {
        let headers: BTreeSet<_> = Template::ALL.iter().map(|t| t.header()).collect();
        assert_eq!(headers.len(), Template::ALL.len());
        for t in Template::ALL {
            assert!(!t.header().contains("{{"), "{t} header has a placeholder");
            assert_eq!(Template::detect(t.text()), Some(*t));
        }
    }

    #[test]
    fn fill_replaces_all_and_keeps_json_braces() {
        let out = Template::Judge
            .fill(&[("policy", "1. Ask."), ("outcome", "refund"), ("conversation", "Customer: {{x}}")])
            .unwrap();
        assert!(out.contains("Customer: {{x}}"));
        assert!(out.contains("\"successful\""));
        assert!(!out.contains("{{policy}}"));
    }

    #[test]
    fn fill_rejects_missing_and_unknown() {
        assert!(matches!(Template::Basic.fill(&[]), Err(TemplateError::Missing { .. })));
        let err = Template::Basic.fill(&[("conversations", "x"), ("bogus", "y")]).unwrap_err();
        assert!(matches!(err, TemplateError::Unknown { .. }));
    }

    #[test]
    fn expected_placeholders() {
        let names = |t: Template| t.placeholders().into_iter().collect::<Vec<_>>();
        assert_eq!(names(Template::Elements), ["conversation"]);
        assert_eq!(names(Template::Ensemble), ["conversations", "workflow_count", "workflows"]);
        assert_eq!(names(Template::AgentBot), ["history", "info", "policy"]);
        assert_eq!(names(Template::QaGuide), ["conversations", "discussion"]);
    }

    #[test]
    fn operational_tokens_present() {
        assert!(Template::QaGuide.text().contains("NO FURTHER QUESTIONS"));
        assert!(Template::AgentBot.text().contains("\"DONE\""));
        for verdict in ["followed", "not applicable", "not followed"] {
            assert!(Template::Compliance.text().contains(verdict));
        }
        assert!(Template::Scenario.text().contains("\"user information\""));
    }

    #[test]
    fn hashes_are_stable_hex() {
        let hashes = template_hashes();
        assert_eq!(hashes.len(), Template::ALL.len());
        assert!(hashes.values().all(|h| h.len() == 64));
    }
}
