use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::SceneError;
use crate::fsutil::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAInstance {
    pub question_id: String,
    pub scene_id: String,
    pub question: String,
    pub answers: Vec<String>,
}

impl QAInstance {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.question.trim().is_empty() {
            return Err(SceneError::schema(
                format!("{}.question", self.question_id),
                "question is empty",
            ));
        }
        if self.answers.is_empty() || self.answers.iter().all(|a| a.trim().is_empty()) {
            return Err(SceneError::schema(
                format!("{}.answers", self.question_id),
                "at least one answer is required",
            ));
        }
        Ok(())
    }
}

/// Reads one JSON value per non-blank line. Errors carry the line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, SceneError> {
    let file = std::fs::File::open(path).map_err(|e| SceneError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SceneError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        let value = serde_path_to_error::deserialize(de).map_err(|e| {
            SceneError::schema(
                format!("{}:{}:{}", path.display(), n + 1, e.path()),
                e.inner().to_string(),
            )
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), SceneError> {
    let mut buf = String::new();
    for row in rows {
        buf.push_str(&serde_json::to_string(row).expect("row serializes"));
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes()).map_err(|e| SceneError::io(path, e))
}
