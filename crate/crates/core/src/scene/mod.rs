//! Scene manifests, QA files, embedding stores, and the synthetic scene
//! generator used for laptop-scale experiments.

mod embeddings;
mod manifest;
mod qa;
mod synth;

use std::path::PathBuf;

use thiserror::Error;

pub use embeddings::{
    embed_synthetic, concept_vector, nearest_concept_accuracy, read_vemb, write_vemb, EmbeddingStore,
    EmbeddingTable, VEMB_MAGIC, VEMB_VERSION,
};
pub use manifest::{load_manifest, save_manifest, manifest_to_json, parse_manifest, ExtrinsicConvention, SceneManifest, ViewRecord, MANIFEST_SCHEMA_VERSION};
pub use qa::{read_jsonl, write_jsonl, QAInstance};
pub use synth::{
    oracle_visibility, synth_scene, Aabb, SceneObject, SynthSpec, SyntheticQa, SyntheticScene, Trajectory,
    DEFAULT_FAR, DEFAULT_FOV_DEG, DEFAULT_NEAR,
};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("view {view_id}: extrinsic rotation is not orthonormal")]
    NonOrthonormalExtrinsic { view_id: String },
    #[error("unsupported embedding file: {0}")]
    FormatVersionMismatch(String),
    #[error("embedding file is truncated or corrupt")]
    CorruptChecksum,
    #[error("no embedding for `{0}`")]
    MissingEmbedding(String),
    #[error("embedding `{id}` has shape {found:?}, expected {expected:?}")]
    DimensionMismatch {
        id: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("infeasible synthetic scene: {0}")]
    InfeasibleSpec(String),
}

impl SceneError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SceneError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        SceneError::Schema {
            field: field.into(),
            message: message.into(),
        }
    }
}
