//! Small text helpers shared by the response parsers.

/// Returns the JSON payload of a model response: the trimmed text when it
/// already starts with `{` or `[`, otherwise the body of the first fenced
/// code block.
pub fn extract_json_payload(raw: &str) -> Option<&str> {
    let trimmed = raw.trim();
    if trimmed.starts_with('{') || trimmed.starts_with('[') {
        return Some(trimmed);
    }
    let open = trimmed.find("```")?;
    let after_fence = &trimmed[open + 3..];
    // Skip the info string (`json`, `JSON`, ...) up to the end of the line.
    let body_start = after_fence.find('\n').map(|i| i + 1)?;
    let body = &after_fence[body_start..];
    let close = body.find("```")?;
    Some(body[..close].trim())
}

/// Splits a numbered list (`1. ...`, `2) ...`) into its items.
///
/// Lines that do not start a new item are appended to the current one, so
/// indented sub-bullets stay attached to their step. Text before the first
/// numbered line is ignored.
pub fn parse_numbered_steps(text: &str) -> Vec<String> {
    let mut steps: Vec<String> = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match strip_item_number(trimmed) {
            Some(rest) => steps.push(rest.trim().to_string()),
            None => {
                if let Some(last) = steps.last_mut() {
                    last.push(' ');
                    last.push_str(trimmed);
                }
            }
        }
    }
    steps
}

fn strip_item_number(line: &str) -> Option<&str> {
    let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 || digits > 3 {
        return None;
    }
    let rest = &line[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    if rest.starts_with(char::is_whitespace) {
        Some(rest)
    } else {
        None
    }
}

/// Renders items as a `1. ...` numbered list.
pub fn numbered_list<S: AsRef<str>>(items: &[S]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// English word for small counts, falling back to digits.
pub fn count_word(n: usize) -> String {
    const WORDS: [&str; 11] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];
    WORDS.get(n).map(|w| w.to_string()).unwrap_or_else(|| n.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bare_json_is_returned_as_is() {
        assert_eq!(extract_json_payload("  {\"a\": 1}\n"), Some("{\"a\": 1}"));
        assert_eq!(extract_json_payload("[1]"), Some("[1]"));
    }

    #[test]
    fn fenced_block_after_commentary() {
        let raw = "Sure! Here is the result:\n```json\n{\"a\": 1}\n```\nanything else?";
        assert_eq!(extract_json_payload(raw), Some("{\"a\": 1}"));
    }

    #[test]
    fn only_first_fence_is_used() {
        let raw = "x\n```\n{\"first\": true}\n```\n```\n{\"second\": true}\n```";
        assert_eq!(extract_json_payload(raw), Some("{\"first\": true}"));
    }

    #[test]
    fn prose_without_json() {
        assert_eq!(extract_json_payload("no json here"), None);
        assert_eq!(extract_json_payload("```json\n{ unterminated"), None);
    }

    #[test]
    fn numbered_steps_with_continuations() {
        let text = "Workflow:\n1. Ask name.\n   - include surname\n2) Check system.\n\n10. Done.";
        assert_eq!(
            parse_numbered_steps(text),
            vec!["Ask name. - include surname", "Check system.", "Done."]
        );
    }

    #[test]
    fn decimals_are_not_items() {
        assert!(parse_numbered_steps("3.5 days").is_empty());
        assert_eq!(parse_numbered_steps("1. Wait 3.5 days"), vec!["Wait 3.5 days"]);
    }

    #[test]
    fn count_words() {
        assert_eq!(count_word(4), "four");
        assert_eq!(count_word(12), "12");
        assert_eq!(numbered_list(&["a", "b"]), "1. a\n2. b");
    }
}
