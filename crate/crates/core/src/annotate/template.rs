use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AnnotateError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateRole {
    Rephrase,
    Match,
    MatchDirect,
    Answer,
}

impl TemplateRole {
    pub const ALL: [TemplateRole; 4] =
        [TemplateRole::Rephrase, TemplateRole::Match, TemplateRole::MatchDirect, TemplateRole::Answer];

    pub fn file_stem(&self) -> &'static str {
        match self {
            TemplateRole::Rephrase => "rephrase",
            TemplateRole::Match => "match",
            TemplateRole::MatchDirect => "match_direct",
            TemplateRole::Answer => "answer",
        }
    }

    pub fn required(&self) -> &'static [&'static str] {
        match self {
            TemplateRole::Rephrase | TemplateRole::MatchDirect => &["question", "answer"],
            TemplateRole::Match => &["caption"],
            TemplateRole::Answer => &["question"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub role: TemplateRole,
    pub text: String,
    /// Sent as a system message ahead of the rendered text.
    pub system: Option<String>,
}

const REPHRASE: &str = "Rewrite the question and its answer as one short image caption that states what a picture \
would show if it contained the answer. Mention every object and relation the answer depends on.\n\
Question: {question}\nAnswer: {answer}\nCaption:";

const MATCH_SYSTEM: &str = "You decide whether an image shows what a caption describes. Work step by step.\n\
Step 1: list the objects named in the caption.\n\
Step 2: check whether each object is visible in the image.\n\
Step 3: check the attributes the caption gives them, such as color, size or material.\n\
Step 4: check the spatial relations between them.\n\
Then pick one option and put its letter first in your reply.\n\n\
Example\n\
Caption: A lamp stands on the wooden desk.\n\
Reasoning: a desk is visible, a lamp is visible on top of it, the desk is wooden.\n\
Reply: A";

const MATCH: &str = "Caption: {caption}\n\
Does the image match the caption?\n\
A. Yes, the image shows what the caption describes.\n\
B. No, the image does not show it.\n\
C. I cannot tell from this image.\n\
Reply with A, B or C.";

const MATCH_DIRECT_SYSTEM: &str = "You decide whether an image contains the information needed to answer a question \
with the given answer. Work step by step.\n\
Step 1: list the objects named in the question-answer pair.\n\
Step 2: check whether each object is visible in the image.\n\
Step 3: check the attributes and spatial relations the pair relies on.\n\
Then pick one option and put its letter first in your reply.";

const MATCH_DIRECT: &str = "Question: {question}\nAnswer: {answer}\n\
Does the image match the question-answer pair?\n\
A. Yes, the image shows what the question-answer pair describes.\n\
B. No, the image does not show it.\n\
C. I cannot tell from this image.\n\
Reply with A, B or C.";

const ANSWER: &str = "The images are views of one indoor scene. Answer the question with a short phrase.\n\
Question: {question}\nAnswer:";

fn placeholders(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if after[..close].chars().all(|c| c.is_ascii_alphanumeric() || c == '_') && close > 0 => {
                out.push(&after[..close]);
                rest = &after[close + 1..];
            }
            _ => rest = after,
        }
    }
    out
}

impl PromptTemplate {
    pub fn new(role: TemplateRole, text: impl Into<String>, system: Option<String>) -> Result<Self, AnnotateError> {
        let t = PromptTemplate {
            role,
            text: text.into(),
            system,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn default_for(role: TemplateRole) -> Self {
        let (text, system) = match role {
            TemplateRole::Rephrase => (REPHRASE, None),
            TemplateRole::Match => (MATCH, Some(MATCH_SYSTEM)),
            TemplateRole::MatchDirect => (MATCH_DIRECT, Some(MATCH_DIRECT_SYSTEM)),
            TemplateRole::Answer => (ANSWER, None),
        };
        PromptTemplate::new(role, text, system.map(str::to_string)).expect("built-in templates are valid")
    }

    pub fn validate(&self) -> Result<(), AnnotateError> {
        if self.text.trim().is_empty() {
            return Err(AnnotateError::Template(format!("{} template is empty", self.role.file_stem())));
        }
        let found = placeholders(&self.text);
        for req in self.role.required() {
            if !found.contains(req) {
                return Err(AnnotateError::Template(format!(
                    "{} template lacks {{{req}}}",
                    self.role.file_stem()
                )));
            }
        }
        for f in &found {
            if !self.role.required().contains(f) {
                return Err(AnnotateError::Template(format!(
                    "{} template has unknown placeholder {{{f}}}",
                    self.role.file_stem()
                )));
            }
        }
        Ok(())
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, AnnotateError> {
        let mut out = self.text.clone();
        for name in self.role.required() {
            let v = values
                .iter()
                .find(|(k, _)| k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| AnnotateError::Template(format!("no value for {{{name}}}")))?;
            out = out.replace(&format!("{{{name}}}"), v);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub rephrase: PromptTemplate,
    pub match_caption: PromptTemplate,
    pub match_direct: PromptTemplate,
    pub answer: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            rephrase: PromptTemplate::default_for(TemplateRole::Rephrase),
            match_caption: PromptTemplate::default_for(TemplateRole::Match),
            match_direct: PromptTemplate::default_for(TemplateRole::MatchDirect),
            answer: PromptTemplate::default_for(TemplateRole::Answer),
        }
    }
}

impl TemplateSet {
    /// Defaults overridden by `<role>.txt` and `<role>.system.txt` files
    /// found in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, AnnotateError> {
        let mut set = TemplateSet::default();
        for role in TemplateRole::ALL {
            let slot = set.get_mut(role);
            let text_path = dir.join(format!("{}.txt", role.file_stem()));
            let system_path = dir.join(format!("{}.system.txt", role.file_stem()));
            let text = read_optional(&text_path)?;
            let system = read_optional(&system_path)?;
            if text.is_none() && system.is_none() {
                continue;
            }
            *slot = PromptTemplate::new(
                role,
                text.unwrap_or_else(|| slot.text.clone()),
                system.or_else(|| slot.system.clone()),
            )?;
        }
        Ok(set)
    }

    pub fn get(&self, role: TemplateRole) -> &PromptTemplate {
        match role {
            TemplateRole::Rephrase => &self.rephrase,
            TemplateRole::Match => &self.match_caption,
            TemplateRole::MatchDirect => &self.match_direct,
            TemplateRole::Answer => &self.answer,
        }
    }

    fn get_mut(&mut self, role: TemplateRole) -> &mut PromptTemplate {
        match role {
            TemplateRole::Rephrase => &mut self.rephrase,
            TemplateRole::Match => &mut self.match_caption,
            TemplateRole::MatchDirect => &mut self.match_direct,
            TemplateRole::Answer => &mut self.answer,
        }
    }
}

fn read_optional(path: &Path) -> Result<Option<String>, AnnotateError> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(AnnotateError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }),
    }
}
