//! Greedy pose-aware non-maximum suppression over scored views.
//!
//! Views are ranked by score (descending, ties by ascending index). The top
//! view is always kept; every later candidate is kept only if its view
//! distance to each kept view is strictly greater than the threshold.
//! Selection stops once `max_views` views are kept. A threshold of exactly
//! zero disables suppression and returns the plain top-k.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{view_distance, CameraPose, DistanceWeights};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NmsError {
    #[error("{views} views but {scores} scores")]
    LengthMismatch { views: usize, scores: usize },
    #[error("no views to select from")]
    EmptyInput,
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error("invalid NMS config: {0}")]
    InvalidConfig(String),
    #[error("selection is inconsistent with its inputs: {0}")]
    InconsistentInputs(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub threshold: f64,
    pub max_views: usize,
    #[serde(default)]
    pub weights: DistanceWeights,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            threshold: 0.5,
            max_views: 9,
            weights: DistanceWeights::default(),
        }
    }
}

impl NmsConfig {
    pub fn new(threshold: f64, max_views: usize) -> Self {
        NmsConfig {
            threshold,
            max_views,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), NmsError> {
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return Err(NmsError::InvalidConfig(format!(
                "threshold must be finite and >= 0, got {}",
                self.threshold
            )));
        }
        if self.max_views == 0 {
            return Err(NmsError::InvalidConfig("max_views must be >= 1".into()));
        }
        Ok(())
    }

    pub fn is_bypass(&self) -> bool {
        self.threshold == 0.0
    }
}

/// Output of [`view_nms`]. Indices refer to positions in the input slices.
#[derive(Debug, Clone, PartialEq)]
pub struct NmsResult {
    /// Kept views in selection order.
    pub selected: Vec<usize>,
    /// Score of each kept view, parallel to `selected`.
    pub scores: Vec<f64>,
    /// Every input index in rank order.
    pub ranking: Vec<usize>,
    /// How many ranked candidates were examined before stopping.
    pub processed: usize,
}

/// Rank order: score descending, then index ascending.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn check_inputs(poses: &[CameraPose], scores: &[f64], config: &NmsConfig) -> Result<(), NmsError> {
    if poses.len() != scores.len() {
        return Err(NmsError::LengthMismatch {
            views: poses.len(),
            scores: scores.len(),
        });
    }
    if poses.is_empty() {
        return Err(NmsError::EmptyInput);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(NmsError::NonFiniteScore(i));
    }
    config.validate()
}

pub fn view_nms(poses: &[CameraPose], scores: &[f64], config: &NmsConfig) -> Result<NmsResult, NmsError> {
    check_inputs(poses, scores, config)?;
    let ranking = rank_by_score(scores);

    if config.is_bypass() {
        let take = config.max_views.min(ranking.len());
        let selected = ranking[..take].to_vec();
        return Ok(NmsResult {
            scores: selected.iter().map(|&i| scores[i]).collect(),
            selected,
            ranking,
            processed: take,
        });
    }

    let mut selected: Vec<usize> = Vec::with_capacity(config.max_views);
    let mut processed = 0;
    for &candidate in &ranking {
        if selected.len() == config.max_views {
            break;
        }
        processed += 1;
        let diverse = selected.iter().all(|&kept| {
            view_distance(&poses[candidate], &poses[kept], config.weights) > config.threshold
        });
        if diverse {
            selected.push(candidate);
        }
    }

    Ok(NmsResult {
        scores: selected.iter().map(|&i| scores[i]).collect(),
        selected,
        ranking,
        processed,
    })
}

/// Why a view was not selected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Witness {
    /// Suppressed by an earlier-kept view lying within the threshold.
    Suppressed { by: usize, distance: f64 },
    /// Never examined because the view budget was already spent.
    BudgetExhausted,
}

/// Reconstructs, for every rejected view, the kept view responsible for
/// suppressing it. Fails if the result could not have come from the greedy
/// rule on these inputs.
pub fn suppression_witness(
    result: &NmsResult,
    poses: &[CameraPose],
    scores: &[f64],
    config: &NmsConfig,
) -> Result<BTreeMap<usize, Witness>, NmsError> {
    check_inputs(poses, scores, config)?;
    let ranking = rank_by_score(scores);
    if ranking != result.ranking {
        return Err(NmsError::InconsistentInputs("ranking differs".into()));
    }
    if result.processed > ranking.len() || result.selected.len() > config.max_views {
        return Err(NmsError::InconsistentInputs("selection exceeds its bounds".into()));
    }

    let mut witnesses = BTreeMap::new();
    let mut kept: Vec<usize> = Vec::new();
    let mut next_selected = result.selected.iter().peekable();

    for (position, &view) in ranking.iter().enumerate() {
        if position >= result.processed {
            if next_selected.peek().is_some() {
                return Err(NmsError::InconsistentInputs(format!(
                    "view {view} selected after processing stopped"
                )));
            }
            witnesses.insert(view, Witness::BudgetExhausted);
            continue;
        }
        if next_selected.peek() == Some(&&view) {
            next_selected.next();
            if !config.is_bypass() {
                if let Some(&close) = kept.iter().find(|&&k| {
                    view_distance(&poses[view], &poses[k], config.weights) <= config.threshold
                }) {
                    return Err(NmsError::InconsistentInputs(format!(
                        "selected views {close} and {view} are within the threshold"
                    )));
                }
            }
            kept.push(view);
            continue;
        }
        let by = kept.iter().copied().find_map(|k| {
            let distance = view_distance(&poses[view], &poses[k], config.weights);
            (distance <= config.threshold).then_some((k, distance))
        });
        match by {
            Some((by, distance)) if !config.is_bypass() => {
                witnesses.insert(view, Witness::Suppressed { by, distance });
            }
            _ => {
                return Err(NmsError::InconsistentInputs(format!(
                    "view {view} was rejected without a suppressing view"
                )))
            }
        }
    }
    if next_selected.next().is_some() {
        return Err(NmsError::InconsistentInputs(
            "selected views are not in rank order".into(),
        ));
    }
    Ok(witnesses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};

    fn at(x: f64) -> CameraPose {
        CameraPose::new(Vector3::new(x, 0.0, 0.0), Matrix3::identity()).unwrap()
    }

    #[test]
    fn identical_poses_collapse_to_top_view() {
        let poses = vec![CameraPose::identity(); 5];
        let scores = [0.1, 0.9, 0.3, 0.5, 0.2];
        let r = view_nms(&poses, &scores, &NmsConfig::new(0.5, 9)).unwrap();
        assert_eq!(r.selected, vec![1]);
        let w = suppression_witness(&r, &poses, &scores, &NmsConfig::new(0.5, 9)).unwrap();
        assert_eq!(w.len(), 4);
        for witness in w.values() {
            assert_eq!(*witness, Witness::Suppressed { by: 1, distance: 0.0 });
        }
    }

    #[test]
    fn zero_threshold_is_plain_top_k() {
        let poses = vec![CameraPose::identity(); 6];
        let scores = [0.1, 0.9, 0.3, 0.5, 0.2, 0.5];
        let cfg = NmsConfig::new(0.0, 3);
        let r = view_nms(&poses, &scores, &cfg).unwrap();
        assert_eq!(r.selected, vec![1, 3, 5]);
        let w = suppression_witness(&r, &poses, &scores, &cfg).unwrap();
        assert!(w.values().all(|w| *w == Witness::BudgetExhausted));
        assert_eq!(w.len(), 3);
    }

    #[test]
    fn boundary_distance_is_suppressed() {
        let poses = [at(0.0), at(0.5), at(0.75)];
        let scores = [3.0, 2.0, 1.0];
        let r = view_nms(&poses, &scores, &NmsConfig::new(0.5, 9)).unwrap();
        assert_eq!(r.selected, vec![0, 2]);
    }

    #[test]
    fn stops_at_budget() {
        let poses: Vec<_> = (0..6).map(|i| at(i as f64)).collect();
        let scores = [6.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        let cfg = NmsConfig::new(0.5, 2);
        let r = view_nms(&poses, &scores, &cfg).unwrap();
        assert_eq!(r.selected, vec![0, 1]);
        assert_eq!(r.processed, 2);
        let w = suppression_witness(&r, &poses, &scores, &cfg).unwrap();
        assert_eq!(w.len(), 4);
    }

    #[test]
    fn ties_break_by_index() {
        let poses: Vec<_> = (0..4).map(|i| at(i as f64 * 10.0)).collect();
        let r = view_nms(&poses, &[1.0; 4], &NmsConfig::new(0.5, 2)).unwrap();
        assert_eq!(r.selected, vec![0, 1]);
    }

    #[test]
    fn input_errors() {
        let poses = vec![CameraPose::identity(); 2];
        assert_eq!(
            view_nms(&poses, &[1.0], &NmsConfig::default()),
            Err(NmsError::LengthMismatch { views: 2, scores: 1 })
        );
        assert_eq!(view_nms(&[], &[], &NmsConfig::default()), Err(NmsError::EmptyInput));
        assert!(view_nms(&poses, &[1.0, f64::NAN], &NmsConfig::default()).is_err());
        assert!(view_nms(&poses, &[1.0, 2.0], &NmsConfig::new(-1.0, 3)).is_err());
        assert!(view_nms(&poses, &[1.0, 2.0], &NmsConfig::new(0.5, 0)).is_err());
    }

    #[test]
    fn tampered_result_is_rejected() {
        let poses = vec![CameraPose::identity(); 3];
        let scores = [0.3, 0.2, 0.1];
        let cfg = NmsConfig::new(0.5, 9);
        let mut r = view_nms(&poses, &scores, &cfg).unwrap();
        r.selected.push(1);
        r.scores.push(0.2);
        assert!(matches!(
            suppression_witness(&r, &poses, &scores, &cfg),
            Err(NmsError::InconsistentInputs(_))
        ));
    }
}
