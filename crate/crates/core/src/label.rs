use serde::{Deserialize, Serialize};

/// Three-way view label produced by the annotator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
    Uncertain,
}

impl Label {
    /// Training target, or `None` for labels that never enter the loss.
    pub fn target(self) -> Option<f64> {
        match self {
            Label::Positive => Some(1.0),
            Label::Negative => Some(0.0),
            Label::Uncertain => None,
        }
    }

    pub fn is_trainable(self) -> bool {
        self.target().is_some()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
            Label::Uncertain => "uncertain",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
