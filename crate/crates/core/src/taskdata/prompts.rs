//! Alpaca-format prompt rendering for the SuperGLUE task family.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TaskDataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetKind {
    BoolQ,
    CB,
    COPA,
    MultiRC,
    RTE,
    WiC,
    WSC,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 7] = [
        DatasetKind::BoolQ,
        DatasetKind::CB,
        DatasetKind::COPA,
        DatasetKind::MultiRC,
        DatasetKind::RTE,
        DatasetKind::WiC,
        DatasetKind::WSC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::BoolQ => "BoolQ",
            DatasetKind::CB => "CB",
            DatasetKind::COPA => "COPA",
            DatasetKind::MultiRC => "MultiRC",
            DatasetKind::RTE => "RTE",
            DatasetKind::WiC => "WiC",
            DatasetKind::WSC => "WSC",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = TaskDataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| TaskDataError::UnknownDatasetKind(s.to_string()))
    }
}

/// Instruction and input patterns with `{field}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: DatasetKind,
    pub instruction: &'static str,
    /// Empty when the task carries no separate input.
    pub input: &'static str,
    /// Answer strings indexed by class label.
    pub answers: &'static [&'static str],
}

impl PromptTemplate {
    pub fn for_kind(kind: DatasetKind) -> Self {
        let (instruction, input, answers): (&str, &str, &[&str]) = match kind {
            DatasetKind::BoolQ => (
                "The following reading comprehension question requires you to understand the following passage and answer a question related to the passage. Please answer with only \"True\" or \"False\" to the question: {question}?",
                "{passage}",
                &["False", "True"],
            ),
            DatasetKind::CB => (
                "Please determine whether the hypothesis \"{hypothesis}\" entails, contradicts, or is unrelated to the following premise: \"{premise}\". Please respond with either \"Entailment\", \"Contradiction\", or \"Neutral\".",
                "",
                &["Entailment", "Contradiction", "Neutral"],
            ),
            DatasetKind::COPA => (
                "Given the following premise, please determine whether Choice One, {choice1}, or Choice Two, {choice2}, is the {question} of the premise. Please respond with either \"One\" or \"Two\".",
                "{premise}",
                &["One", "Two"],
            ),
            DatasetKind::MultiRC => (
                "Given the following paragraph, please determine whether \"{answer}\" is a correct answer to the question \"{question}\". Please respond with either \"Yes\" or \"No\".",
                "{paragraph}",
                &["No", "Yes"],
            ),
            DatasetKind::RTE => (
                "Please determine whether the sentence \"{premise}\" entails the hypothesis \"{hypothesis}\" or not. Please respond with either \"Yes\" or \"No\".",
                "",
                &["Yes", "No"],
            ),
            DatasetKind::WiC => (
                "Please determine whether the word \"{word}\" is used in the same way in the following two sentences: \"{sentence1}\" and \"{sentence2}\" Please respond with either \"Yes\" or \"No\".",
                "",
                &["No", "Yes"],
            ),
            DatasetKind::WSC => (
                "Please carefully read the following passages. For each passage, you must identify whether the pronoun marked in *bold* refers to the \"quoted\" noun.",
                "{text}. \n Question: In the passage above, does the pronoun {span2_text} refer to {span1_text}",
                &["No", "Yes"],
            ),
        };
        Self {
            kind,
            instruction,
            input,
            answers,
        }
    }

    /// Placeholder names used by the instruction and input patterns, in order
    /// of first appearance.
    pub fn fields(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for pattern in [self.instruction, self.input] {
            for name in placeholders(pattern) {
                if !out.contains(&name) {
                    out.push(name);
                }
            }
        }
        out
    }
}

fn placeholders(pattern: &'static str) -> impl Iterator<Item = &'static str> {
    let mut rest = pattern;
    std::iter::from_fn(move || {
        let start = rest.find('{')?;
        let end = start + rest[start..].find('}')?;
        let name = &rest[start + 1..end];
        rest = &rest[end + 1..];
        Some(name)
    })
}

fn render(pattern: &str, sample: &BTreeMap<String, String>) -> Result<String, TaskDataError> {
    let mut out = String::with_capacity(pattern.len());
    let mut rest = pattern;
    while let Some(start) = rest.find('{') {
        let end = start
            + rest[start..]
                .find('}')
                .expect("templates have balanced braces");
        let name = &rest[start + 1..end];
        let value = sample
            .get(name)
            .ok_or_else(|| TaskDataError::MissingField(name.to_string()))?;
        out.push_str(&rest[..start]);
        out.push_str(value);
        rest = &rest[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub instruction: String,
    pub input: String,
}

/// Substitutes sample fields verbatim into the kind's template.
pub fn format_prompt(kind: DatasetKind, sample: &BTreeMap<String, String>) -> Result<Prompt, TaskDataError> {
    let template = PromptTemplate::for_kind(kind);
    Ok(Prompt {
        instruction: render(template.instruction, sample)?,
        input: render(template.input, sample)?,
    })
}

/// Like [`format_prompt`] but resolves the kind from its name.
pub fn format_prompt_named(kind: &str, sample: &BTreeMap<String, String>) -> Result<Prompt, TaskDataError> {
    format_prompt(kind.parse()?, sample)
}

/// The Stanford Alpaca scaffold. Swap it to change the outer prompt text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlpacaScaffold {
    pub with_input: &'static str,
    pub without_input: &'static str,
}

pub const ALPACA: AlpacaScaffold = AlpacaScaffold {
    with_input: "Below is an instruction that describes a task, paired with an input that provides further context. Write a response that appropriately completes the request.\n\n### Instruction:\n{instruction}\n\n### Input:\n{input}\n\n### Response:\n",
    without_input: "Below is an instruction that describes a task. Write a response that appropriately completes the request.\n\n### Instruction:\n{instruction}\n\n### Response:\n",
};

impl AlpacaScaffold {
    pub fn wrap(&self, prompt: &Prompt) -> String {
        let pattern = if prompt.input.is_empty() {
            self.without_input
        } else {
            self.with_input
        };
        let fields = BTreeMap::from([
            ("instruction".to_string(), prompt.instruction.clone()),
            ("input".to_string(), prompt.input.clone()),
        ]);
        render(pattern, &fields).expect("scaffold placeholders are always supplied")
    }
}

/// Whitespace tokenization with prefix truncation.
pub fn truncate_tokens(text: &str, max_tokens: usize) -> Vec<&str> {
    text.split_whitespace().take(max_tokens).collect()
}
