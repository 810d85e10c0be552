//! Prompt rendering from the verbatim template files in `templates/`.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptTemplate {
    /// absolute, zero-shot
    A,
    /// absolute, few-shot
    B,
    /// pairwise, zero-shot
    C,
    /// pairwise, few-shot
    D,
}

impl PromptTemplate {
    pub fn needs_anchors(&self) -> bool {
        matches!(self, PromptTemplate::B | PromptTemplate::D)
    }

    pub fn is_pairwise(&self) -> bool {
        matches!(self, PromptTemplate::C | PromptTemplate::D)
    }

    /// Raw template sources (system, user). Shipped as external files so
    /// replication studies can diff them; hashed into the run manifest.
    pub fn source(&self) -> (&'static str, &'static str) {
        match self {
            PromptTemplate::A => (
                include_str!("../../templates/prompt_a_system.txt"),
                include_str!("../../templates/prompt_a_user.txt"),
            ),
            PromptTemplate::B => (
                include_str!("../../templates/prompt_b_system.txt"),
                include_str!("../../templates/prompt_b_user.txt"),
            ),
            PromptTemplate::C => (
                include_str!("../../templates/prompt_c_system.txt"),
                include_str!("../../templates/prompt_c_user.txt"),
            ),
            PromptTemplate::D => (
                include_str!("../../templates/prompt_d_system.txt"),
                include_str!("../../templates/prompt_d_user.txt"),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_message: String,
    pub user_message: String,
    pub placeholders_resolved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorInput {
    pub text: String,
    pub expected_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptInputs {
    pub grade: i32,
    pub domain_label: String,
    pub time_limit_seconds: u32,
    /// One task text for absolute templates, two (A then B) for pairwise.
    pub tasks: Vec<String>,
    pub anchors: Option<[AnchorInput; 2]>,
}

/// Integer percentage with the percent sign, rounding half up. The epsilon
/// keeps decimal halves like 0.345 from landing a hair under the threshold
/// after the binary conversion.
pub fn format_percent(p: f64) -> String {
    format!("{}%", (p * 100.0 + 0.5 + 1e-9).floor() as i64)
}

fn substitute(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = template.trim_end_matches('\n').to_string();
    for (marker, value) in pairs {
        out = out.replace(marker, value);
    }
    out
}

/// Any leftover upper-case angle-bracket marker means a placeholder went
/// unfilled. Task texts may contain lower-case HTML tags, which must pass.
fn has_unresolved_marker(s: &str) -> bool {
    let bytes = s.as_bytes();
    let mut i = 0;
    while let Some(open) = s[i..].find('<') {
        let start = i + open + 1;
        if let Some(close) = s[start..].find('>') {
            let inner = &s[start..start + close];
            if !inner.is_empty()
                && inner
                    .chars()
                    .all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_' || c == '%')
            {
                return true;
            }
            i = start + close + 1;
        } else {
            break;
        }
        if i >= bytes.len() {
            break;
        }
    }
    false
}

pub fn build_prompt(template: PromptTemplate, inputs: &PromptInputs) -> Result<PromptBundle> {
    let expected_tasks = if template.is_pairwise() { 2 } else { 1 };
    if inputs.tasks.len() != expected_tasks {
        return Err(Error::InvalidArgument(format!(
            "template {template:?} takes {expected_tasks} task(s), got {}",
            inputs.tasks.len()
        )));
    }
    if template.needs_anchors() && inputs.anchors.is_none() {
        return Err(Error::MissingAnchor(format!(
            "template {template:?} requires two anchor examples"
        )));
    }

    let (system_src, user_src) = template.source();
    let grade = inputs.grade.to_string();
    let time_limit = inputs.time_limit_seconds.to_string();
    let mut pairs: Vec<(&str, &str)> = vec![
        ("<GRADE>", grade.as_str()),
        ("<DOMAIN>", inputs.domain_label.as_str()),
        ("<TIME_LIMIT>", time_limit.as_str()),
    ];
    let anchor_percents: Vec<String>;
    if let Some(anchors) = &inputs.anchors {
        anchor_percents = anchors.iter().map(|a| format_percent(a.expected_p)).collect();
        pairs.push(("<EXAMPLE_TASK_1_TEXT>", anchors[0].text.as_str()));
        pairs.push(("<EXAMPLE_TASK_2_TEXT>", anchors[1].text.as_str()));
        pairs.push(("<EXAMPLE_1_DIFFICULTY_%>", anchor_percents[0].as_str()));
        pairs.push(("<EXAMPLE_2_DIFFICULTY_%>", anchor_percents[1].as_str()));
    }
    if template.is_pairwise() {
        pairs.push(("<TASK_A_TEXT>", inputs.tasks[0].as_str()));
        pairs.push(("<TASK_B_TEXT>", inputs.tasks[1].as_str()));
    } else {
        pairs.push(("<TASK_TEXT>", inputs.tasks[0].as_str()));
    }

    let system_message = substitute(system_src, &pairs);
    let user_message = substitute(user_src, &pairs);
    let resolved =
        !has_unresolved_marker(&system_message) && !has_unresolved_marker(&user_message);
    if !resolved {
        return Err(Error::Config(format!(
            "template {template:?} left unresolved placeholders"
        )));
    }
    Ok(PromptBundle {
        system_message,
        user_message,
        placeholders_resolved: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn absolute_inputs() -> PromptInputs {
        PromptInputs {
            grade: 3,
            domain_label: "addition".into(),
            time_limit_seconds: 30,
            tasks: vec!["0 + 18".into()],
            anchors: None,
        }
    }

    fn pairwise_inputs() -> PromptInputs {
        PromptInputs {
            grade: 7,
            domain_label: "division".into(),
            time_limit_seconds: 45,
            tasks: vec![
                "30 : 0,6<br><small>denk aan 30 : 6 = 5</small>".into(),
                "5400 - 4000".into(),
            ],
            anchors: None,
        }
    }

    fn anchors() -> [AnchorInput; 2] {
        [
            AnchorInput {
                text: "1 + 1".into(),
                expected_p: 0.87,
            },
            AnchorInput {
                text: "17 + 49".into(),
                expected_p: 0.345,
            },
        ]
    }

    #[test]
    fn absolute_zero_shot_renders_the_full_template() {
        let bundle = build_prompt(PromptTemplate::A, &absolute_inputs()).unwrap();
        assert_eq!(
            bundle.system_message,
            "You are an expert in primary education and educational assessment.\n\
             You help to evaluate the difficulty of the tasks for Dutch students in grade 3.\n\
             All tasks are about mathematics, in particular addition. You will receive one task and must estimate its difficulty.\n\
             Real students have at most 30 seconds to answer it.\n\
             Base your judgment on the syntax, logic, and required understanding."
        );
        assert_eq!(
            bundle.user_message,
            "Guess the proportion of students who solved this task correctly.\n\
             Provide the answer as a number between 0 and 1 with one decimal place.\n\
             Write it in brackets like this [[0.5]], don't provide any verbal explanations\n\
             \n\
             0 + 18"
        );
        assert!(bundle.placeholders_resolved);
    }

    #[test]
    fn pairwise_zero_shot_ends_with_the_instruction_line() {
        let bundle = build_prompt(PromptTemplate::C, &pairwise_inputs()).unwrap();
        assert!(bundle
            .system_message
            .starts_with("You are an expert in primary education"));
        assert!(bundle
            .system_message
            .contains("for Dutch students in the grade 7"));
        assert!(bundle
            .user_message
            .ends_with("Respond only with [[1]] or [[0]]. Make your best guess."));
        assert!(bundle.user_message.contains("--- Task A ---\n30 : 0,6<br><small>denk aan 30 : 6 = 5</small>"));
        assert!(bundle.user_message.contains("--- Task B ---\n5400 - 4000"));
    }

    #[test]
    fn few_shot_differs_only_by_the_example_block() {
        let mut inputs = absolute_inputs();
        let zero = build_prompt(PromptTemplate::A, &inputs).unwrap();
        inputs.anchors = Some(anchors());
        let few = build_prompt(PromptTemplate::B, &inputs).unwrap();
        assert!(few.system_message.starts_with(&zero.system_message));
        let block = &few.system_message[zero.system_message.len()..];
        assert_eq!(
            block,
            "\n\nHere are two example tasks with known difficulty rates:\n\
             \n\
             --- Example Task 1 ---\n\
             1 + 1\n\
             **Difficulty:** 87% of students solved this correctly on the first try.\n\
             \n\
             --- Example Task 2 ---\n\
             17 + 49\n\
             **Difficulty:** 35% of students solved this correctly on the first try."
        );
        // the user message differs only in the closing sentence
        assert!(few
            .user_message
            .contains("don't provide any verbal explanations. Here is the task."));
    }

    #[test]
    fn anchor_percentages_round_half_up() {
        assert_eq!(format_percent(0.87), "87%");
        assert_eq!(format_percent(0.345), "35%");
        assert_eq!(format_percent(0.875), "88%");
        assert_eq!(format_percent(0.0), "0%");
        assert_eq!(format_percent(1.0), "100%");
    }

    #[test]
    fn few_shot_without_anchors_is_a_configuration_error() {
        let result = build_prompt(PromptTemplate::B, &absolute_inputs());
        assert!(matches!(result, Err(crate::Error::MissingAnchor(_))));
    }

    #[test]
    fn html_in_task_text_is_not_flagged_as_a_placeholder() {
        let bundle = build_prompt(PromptTemplate::C, &pairwise_inputs()).unwrap();
        assert!(bundle.placeholders_resolved);
        assert!(bundle.user_message.contains("<br><small>"));
    }

    #[test]
    fn unresolved_marker_detection() {
        assert!(has_unresolved_marker("grade <GRADE> here"));
        assert!(has_unresolved_marker("x <EXAMPLE_1_DIFFICULTY_%> y"));
        assert!(!has_unresolved_marker("30 : 0,6<br><small>hint</small>"));
        assert!(!has_unresolved_marker("a < b and c > d"));
    }
}
