//! View selection for zero-shot question answering over multi-view scene
//! captures: pose geometry, pose-aware NMS, a trainable cross-attention view
//! scorer, selection strategies, LVLM-driven view annotation, a chat
//! completion gateway, QA metrics, and scene data handling.

pub mod annotate;
pub mod fsutil;
pub mod gateway;
pub mod geometry;
pub mod label;
pub mod nms;
pub mod metrics;
pub mod scene;
pub mod selector;
pub mod strategy;

pub use geometry::{d_ori, d_pos, quat_from_rotation, view_distance, CameraPose, DistanceWeights, UnitQuaternion};
pub use label::Label;
pub use nms::{suppression_witness, view_nms, NmsConfig, NmsResult, Witness};
