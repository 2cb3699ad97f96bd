use std::sync::Arc;

use flowmine_core::alt_eval::{qa_evaluate, QaPair};
use flowmine_core::gateway::{ChatModel, FnTransport, Gateway};
use flowmine_core::prompts::Template;

const PAIRS: usize = 141;

fn pairs() -> Vec<QaPair> {
    (0..PAIRS).map(|i| QaPair::new(format!("What happens in case {i}?"), format!("outcome {i}"))).collect()
}

fn case_of(text: &str) -> usize {
    let tail = text.split("case ").nth(1).unwrap();
    tail.chars().take_while(char::is_ascii_digit).collect::<String>().parse().unwrap()
}

/// Grader replies keyed on the case number; `verdict(i)` is the fixture.
fn model(verdict: fn(usize) -> &'static str) -> ChatModel {
    let t = FnTransport::replying(move |prompt| match Template::detect(prompt) {
        Some(Template::QaAnswer) => format!("answer for case {}", case_of(prompt)),
        Some(Template::QaGrade) => verdict(case_of(prompt)).to_string(),
        other => panic!("unexpected prompt {other:?}"),
    });
    ChatModel::new(Arc::new(Gateway::live(Arc::new(t))), "grader")
}

fn fixture(i: usize) -> &'static str {
    if i % 3 == 0 || i % 7 == 0 {
        "correct"
    } else {
        "incorrect"
    }
}

#[test]
fn score_is_the_fraction_of_correct_verdicts() {
    let tally = (0..PAIRS).filter(|&i| fixture(i) == "correct").count();
    let s = qa_evaluate(&pairs(), "1. Do the thing.", &model(fixture), false).unwrap();
    assert_eq!(s.details["total"], PAIRS);
    assert_eq!(s.details["correct"], tally);
    assert_eq!(s.value, tally as f64 / PAIRS as f64);
}

#[test]
fn unparseable_grades_follow_the_flag() {
    fn shaky(i: usize) -> &'static str {
        if i == 40 {
            "maybe"
        } else {
            "Correct."
        }
    }
    let s = qa_evaluate(&pairs(), "1. Do the thing.", &model(shaky), true).unwrap();
    assert_eq!(s.details["unparseable"], 1);
    assert_eq!(s.value, 140.0 / 141.0);
    assert!(qa_evaluate(&pairs(), "1. Do the thing.", &model(shaky), false).is_err());
}
