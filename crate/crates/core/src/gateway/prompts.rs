//! Registry of every prompt the engine sends.
//!
//! Placeholders are written `{name}` with `name` in `[a-z_]`. Rendering is a
//! single pass, so bound values are never re-scanned for placeholders.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use super::{ChatMessage, ChatRequest};

pub mod names {
    pub const SUMMARIZE: &str = "summarize";
    pub const ATOMIZE: &str = "atomize";
    pub const TAG_EXTRACT: &str = "tag_extract";
    pub const TAG_PAIR: &str = "tag_pair";
    pub const DISTILL: &str = "distill";
    pub const PROPOSE: &str = "propose";
    pub const SELECT: &str = "select";
    pub const ANSWER: &str = "answer";
    pub const COT: &str = "cot";
    pub const SELF_ASK: &str = "self_ask";
    pub const SELF_ASK_FINAL: &str = "self_ask_final";
    pub const SELF_ASK_ANSWER: &str = "self_ask_answer";
    pub const SUB_ANSWER: &str = "sub_answer";
    pub const JUDGE: &str = "judge";
    pub const DECOMPOSE_X: &str = "decompose_x";
    pub const DECOMPOSE_Y_TRUE: &str = "decompose_y_true";
    pub const DECOMPOSE_Y_FALSE: &str = "decompose_y_false";
}

const BUILTIN: &[(&str, &str)] = &[
    (names::SUMMARIZE, include_str!("../../prompts/summarize.txt")),
    (names::ATOMIZE, include_str!("../../prompts/atomize.txt")),
    (names::TAG_EXTRACT, include_str!("../../prompts/tag_extract.txt")),
    (names::TAG_PAIR, include_str!("../../prompts/tag_pair.txt")),
    (names::DISTILL, include_str!("../../prompts/distill.txt")),
    (names::PROPOSE, include_str!("../../prompts/propose.txt")),
    (names::SELECT, include_str!("../../prompts/select.txt")),
    (names::ANSWER, include_str!("../../prompts/answer.txt")),
    (names::COT, include_str!("../../prompts/cot.txt")),
    (names::SELF_ASK, include_str!("../../prompts/self_ask.txt")),
    (names::SELF_ASK_FINAL, include_str!("../../prompts/self_ask_final.txt")),
    (names::SELF_ASK_ANSWER, include_str!("../../prompts/self_ask_answer.txt")),
    (names::SUB_ANSWER, include_str!("../../prompts/sub_answer.txt")),
    (names::JUDGE, include_str!("../../prompts/judge.txt")),
    (names::DECOMPOSE_X, include_str!("../../prompts/decompose_x.txt")),
    (names::DECOMPOSE_Y_TRUE, include_str!("../../prompts/decompose_y_true.txt")),
    (names::DECOMPOSE_Y_FALSE, include_str!("../../prompts/decompose_y_false.txt")),
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown prompt template {0:?}")]
    UnknownTemplate(String),
    #[error("template {template:?} is missing bindings for {missing:?}")]
    MissingPlaceholders {
        template: String,
        missing: Vec<String>,
    },
    #[error("template {template:?} has no placeholders named {unknown:?}")]
    UnknownBindings {
        template: String,
        unknown: Vec<String>,
    },
    #[error("template {template:?} declares {declared:?} but its body uses {used:?}")]
    Malformed {
        template: String,
        declared: Vec<String>,
        used: Vec<String>,
    },
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("valid regex"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    pub required_placeholders: Vec<String>,
}

impl PromptTemplate {
    /// Builds a template whose placeholders are exactly those found in `body`.
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let used: BTreeSet<String> = placeholder_re()
            .captures_iter(&body)
            .map(|c| c[1].to_string())
            .collect();
        Self {
            name: name.into(),
            body,
            required_placeholders: used.into_iter().collect(),
        }
    }

    /// Fails when the declared placeholder list and the body disagree.
    pub fn check(&self) -> Result<(), PromptError> {
        let used: BTreeSet<&str> = placeholder_re()
            .captures_iter(&self.body)
            .map(|c| c.get(1).unwrap().as_str())
            .collect();
        let declared: BTreeSet<&str> =
            self.required_placeholders.iter().map(String::as_str).collect();
        if used != declared {
            return Err(PromptError::Malformed {
                template: self.name.clone(),
                declared: declared.into_iter().map(String::from).collect(),
                used: used.into_iter().map(String::from).collect(),
            });
        }
        Ok(())
    }

    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        let bound: BTreeMap<&str, &str> = bindings.iter().copied().collect();
        let missing: Vec<String> = self
            .required_placeholders
            .iter()
            .filter(|p| !bound.contains_key(p.as_str()))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(PromptError::MissingPlaceholders {
                template: self.name.clone(),
                missing,
            });
        }
        let unknown: Vec<String> = bound
            .keys()
            .filter(|k| !self.required_placeholders.iter().any(|p| p == *k))
            .map(|k| k.to_string())
            .collect();
        if !unknown.is_empty() {
            return Err(PromptError::UnknownBindings {
                template: self.name.clone(),
                unknown,
            });
        }
        let mut out = String::with_capacity(self.body.len() + 64);
        let mut last = 0;
        for m in placeholder_re().captures_iter(&self.body) {
            let whole = m.get(0).unwrap();
            out.push_str(&self.body[last..whole.start()]);
            out.push_str(bound[&m[1]]);
            last = whole.end();
        }
        out.push_str(&self.body[last..]);
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct PromptRegistry {
    templates: BTreeMap<String, PromptTemplate>,
}

impl PromptRegistry {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(name, body)| {
                let body = body.strip_suffix('\n').unwrap_or(body);
                let t = PromptTemplate::new(*name, body);
                (name.to_string(), t)
            })
            .collect();
        Self { templates }
    }

    pub fn register(&mut self, template: PromptTemplate) -> Result<(), PromptError> {
        template.check()?;
        self.templates.insert(template.name.clone(), template);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(name)
            .ok_or_else(|| PromptError::UnknownTemplate(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn render(&self, name: &str, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        self.get(name)?.render(bindings)
    }

    /// Renders `name` into a single-user-message request tagged with `name`.
    pub fn request(
        &self,
        name: &str,
        bindings: &[(&str, &str)],
        temperature: f64,
    ) -> Result<ChatRequest, PromptError> {
        let content = self.render(name, bindings)?;
        Ok(ChatRequest {
            messages: vec![ChatMessage::user(content)],
            temperature,
            max_tokens: None,
            tag: name.to_string(),
        })
    }
}

/// The process-wide built-in registry.
pub fn registry() -> &'static PromptRegistry {
    static REG: OnceLock<PromptRegistry> = OnceLock::new();
    REG.get_or_init(PromptRegistry::builtin)
}

pub fn render(name: &str, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
    registry().render(name, bindings)
}

/// Renders the decomposer training prompt for a question and the sub-question
/// / answer pairs gathered so far.
pub fn prompt_x(question: &str, steps: &[(String, String)]) -> String {
    let context = format_qa_steps(steps);
    render(
        names::DECOMPOSE_X,
        &[("question", question), ("context", &context)],
    )
    .expect("decompose_x bindings are complete")
}

/// Renders the decomposer training target.
pub fn prompt_y(decompose: bool, sub_question: Option<&str>) -> String {
    match (decompose, sub_question) {
        (true, Some(q)) => render(names::DECOMPOSE_Y_TRUE, &[("sub_question", q)]),
        _ => render(names::DECOMPOSE_Y_FALSE, &[]),
    }
    .expect("decompose_y bindings are complete")
}

/// One `Q{i}: ... / A{i}: ...` block per step; `None` when there are none.
pub fn format_qa_steps(steps: &[(String, String)]) -> String {
    if steps.is_empty() {
        return "None".to_string();
    }
    steps
        .iter()
        .enumerate()
        .map(|(i, (q, a))| format!("Q{n}: {q}\nA{n}: {a}", n = i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Numbered passages, `[1] text`, separated by blank lines; `None` if empty.
pub fn format_passages<'a>(passages: impl IntoIterator<Item = &'a str>) -> String {
    let blocks: Vec<String> = passages
        .into_iter()
        .enumerate()
        .map(|(i, p)| format!("[{}] {}", i + 1, p))
        .collect();
    if blocks.is_empty() {
        "None".to_string()
    } else {
        blocks.join("\n\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builtin_template_is_consistent() {
        let reg = PromptRegistry::builtin();
        assert_eq!(reg.names().count(), BUILTIN.len());
        for name in reg.names() {
            reg.get(name).unwrap().check().unwrap();
        }
    }

    #[test]
    fn prompt_x_with_empty_context_keeps_format_instructions() {
        let x = prompt_x("Who founded X?", &[]);
        assert!(x.contains("<decompose>False</decompose>"));
        assert!(x.contains("**Original Question**\nWho founded X?\n"));
        assert!(!placeholder_re().is_match(&x));
    }

    #[test]
    fn prompt_y_renderings() {
        assert_eq!(
            prompt_y(true, Some("Who founded X?")),
            "<decompose>True</decompose>\n<sub-question>Who founded X?</sub-question>"
        );
        assert_eq!(prompt_y(false, None), "<decompose>False</decompose>");
    }

    #[test]
    fn missing_and_unknown_bindings_are_errors() {
        let err = render(names::ANSWER, &[("question", "q")]).unwrap_err();
        assert_eq!(
            err,
            PromptError::MissingPlaceholders {
                template: "answer".into(),
                missing: vec!["context".into()],
            }
        );
        let err = render(names::DECOMPOSE_Y_FALSE, &[("x", "y")]).unwrap_err();
        assert!(matches!(err, PromptError::UnknownBindings { .. }));
        assert!(matches!(
            render("nope", &[]),
            Err(PromptError::UnknownTemplate(_))
        ));
    }

    #[test]
    fn values_are_not_rescanned() {
        let t = PromptTemplate::new("t", "a {x} b");
        assert_eq!(t.render(&[("x", "{x}")]).unwrap(), "a {x} b");
    }

    #[test]
    fn malformed_template_is_rejected() {
        let mut reg = PromptRegistry::builtin();
        let t = PromptTemplate {
            name: "bad".into(),
            body: "{a} {b}".into(),
            required_placeholders: vec!["a".into()],
        };
        assert!(matches!(reg.register(t), Err(PromptError::Malformed { .. })));
    }
}
