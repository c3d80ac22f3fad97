//! Command-line pipeline around `viewsel-core`: run configuration,
//! provenance, synthetic datasets, the pipeline stages and the
//! synthetic-world experiments.

pub mod config;
pub mod error;
pub mod experiment;
pub mod pipeline;
pub mod provenance;
pub mod synthdata;
pub mod tools;
