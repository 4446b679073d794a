//! Prompt texts shipped under `assets/prompts/` and the task markers that
//! prefix every system prompt.

pub const NER_PSEUDO_INPUTS: &str = include_str!("../assets/prompts/ner/pseudo_inputs.txt");
pub const NER_PSEUDO_LABELS: &str = include_str!("../assets/prompts/ner/pseudo_labels.txt");
pub const NER_ICL: &str = include_str!("../assets/prompts/ner/icl.txt");
pub const CLASSIFY: &str = include_str!("../assets/prompts/community/classify.txt");
pub const TEMPLATES: &str = include_str!("../assets/prompts/community/templates.txt");
pub const PERSONA: &str = include_str!("../assets/prompts/community/persona.txt");
pub const HYPO_QA: &str = include_str!("../assets/prompts/synthesis/hypo_qa.txt");
pub const AGENT_SYSTEM: &str = include_str!("../assets/prompts/synthesis/agent_system.txt");
pub const AGENT_USER: &str = include_str!("../assets/prompts/synthesis/agent_user.txt");
pub const QC_SYSTEM: &str = include_str!("../assets/prompts/synthesis/qc_system.txt");
pub const QC_USER: &str = include_str!("../assets/prompts/synthesis/qc_user.txt");
pub const JUDGE_CORRECTNESS: &str = include_str!("../assets/prompts/judge/correctness.txt");
pub const JUDGE_FAITHFULNESS: &str = include_str!("../assets/prompts/judge/faithfulness.txt");
pub const GENERATE_ANSWER: &str = include_str!("../assets/prompts/generation/answer.txt");
pub const ENTITY_TYPES: &str = include_str!("../assets/entity_types.txt");

pub const TASK_NER_PSEUDO_INPUTS: &str = "NER_PSEUDO_INPUTS";
pub const TASK_NER_PSEUDO_LABELS: &str = "NER_PSEUDO_LABELS";
pub const TASK_NER: &str = "NER";
pub const TASK_CLASSIFY: &str = "CLASSIFY";
pub const TASK_TEMPLATE: &str = "TEMPLATE";
pub const TASK_PERSONA: &str = "PERSONA";
pub const TASK_HYPO_QA: &str = "HYPO_QA";
pub const TASK_SYNTH: &str = "SYNTH";
pub const TASK_QC: &str = "QC";
pub const TASK_JUDGE: &str = "JUDGE";
pub const TASK_GENERATE: &str = "GENERATE";

/// System prompt carrying the task marker on its first line.
pub fn system(task: &str, body: &str) -> String {
    if body.is_empty() {
        format!("TASK:{task}")
    } else {
        format!("TASK:{task}\n{body}")
    }
}

/// Documents as `<document id="..">` blocks, the layout every prompt uses
/// for `[Documents]`.
pub fn render_documents<'a>(docs: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    docs.into_iter()
        .map(|(id, content)| format!("<document id=\"{id}\">\n{content}\n</document>"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Inverse of [`render_documents`]: the contents, in order.
pub fn parse_documents(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("<document") {
        let after = &rest[start..];
        let Some(open_end) = after.find(">\n") else {
            break;
        };
        let body = &after[open_end + 2..];
        let Some(close) = body.find("\n</document>") else {
            break;
        };
        out.push(body[..close].to_string());
        rest = &body[close + "\n</document>".len()..];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documents_round_trip() {
        let text = render_documents([("a", "first doc"), ("b", "second\nline")]);
        assert_eq!(parse_documents(&text), vec!["first doc", "second\nline"]);
    }
}
