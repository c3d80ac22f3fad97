//! Procedural indoor scenes with known answers.
//!
//! Boxes are scattered over the floor of a rectangular room, cameras follow
//! an orbit or a walking loop, and visibility is decided by a cone test on
//! each box center. Every question asks what is next to an object; the
//! answer is the nearest other object and the answer-bearing views are those
//! that see both.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{SceneManifest, ViewRecord};
use super::qa::QAInstance;
use super::SceneError;
use crate::geometry::CameraPose;

pub const DEFAULT_FOV_DEG: f64 = 60.0;
pub const DEFAULT_NEAR: f64 = 0.1;
pub const DEFAULT_FAR: f64 = 10.0;

const CAMERA_HEIGHT: f64 = 1.5;
const LOOK_HEIGHT: f64 = 0.5;
const PLACEMENT_ATTEMPTS: usize = 1000;

pub(crate) const OBJECT_LABELS: [&str; 24] = [
    "chair", "table", "sofa", "bed", "cabinet", "desk", "lamp", "bookshelf", "television", "plant",
    "refrigerator", "sink", "toilet", "bathtub", "dresser", "nightstand", "ottoman", "piano", "trash can",
    "printer", "microwave", "armchair", "coffee table", "washing machine",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trajectory {
    /// Circle around the room center, always facing the center.
    Orbit,
    /// Loop along the walls, facing ahead and slightly inward.
    Walk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub scene_id: String,
    /// Width, depth, height in meters.
    pub room: [f64; 3],
    pub n_objects: usize,
    pub n_views: usize,
    pub trajectory: Trajectory,
    pub seed: u64,
    /// Radius of the disc holding object centers, as a fraction of half the
    /// smaller room side.
    pub object_spread: f64,
}

impl SynthSpec {
    pub fn new(scene_id: impl Into<String>, seed: u64) -> Self {
        SynthSpec {
            scene_id: scene_id.into(),
            room: [8.0, 6.0, 3.0],
            n_objects: 8,
            n_views: 64,
            trajectory: Trajectory::Orbit,
            seed,
            object_spread: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub center: [f64; 3],
    pub half_extent: [f64; 3],
}

impl Aabb {
    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    fn overlaps_xy(&self, other: &Aabb, margin: f64) -> bool {
        (0..2).all(|i| {
            (self.center[i] - other.center[i]).abs() < self.half_extent[i] + other.half_extent[i] + margin
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub label: String,
    pub bounds: Aabb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQa {
    pub qa: QAInstance,
    /// Object the question mentions.
    pub anchor: usize,
    /// Object that answers it.
    pub answer: usize,
    /// Views seeing both objects, in manifest order.
    pub answer_views: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SynthSpec,
    pub manifest: SceneManifest,
    pub objects: Vec<SceneObject>,
    /// Objects visible from each view, ascending.
    pub visibility: Vec<Vec<usize>>,
    pub qa: Vec<SyntheticQa>,
}

impl SyntheticScene {
    pub fn answer_view_indices(&self, qa: &SyntheticQa) -> Vec<usize> {
        qa.answer_views
            .iter()
            .map(|id| self.manifest.view_index(id).expect("answer view exists"))
            .collect()
    }
}

/// True iff the box center lies in the camera's viewing cone: half-angle
/// `fov_deg / 2` about the optical axis, depth within `[near, far]`.
pub fn oracle_visibility(pose: &CameraPose, bounds: &Aabb, fov_deg: f64, near: f64, far: f64) -> bool {
    let p = pose.world_to_camera(&bounds.center());
    if p.z < near || p.z > far {
        return false;
    }
    let half = (fov_deg / 2.0).to_radians();
    p.z / p.norm() >= half.cos()
}

fn camera_poses(spec: &SynthSpec) -> Result<Vec<CameraPose>, SceneError> {
    let [w, d, _] = spec.room;
    let center = Vector3::new(w / 2.0, d / 2.0, 0.0);
    let up = Vector3::z();
    let n = spec.n_views;
    let mut poses = Vec::with_capacity(n);
    match spec.trajectory {
        Trajectory::Orbit => {
            let radius = 0.4 * w.min(d);
            for i in 0..n {
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                let eye = center + Vector3::new(radius * a.cos(), radius * a.sin(), CAMERA_HEIGHT);
                let target = center + Vector3::new(0.0, 0.0, LOOK_HEIGHT);
                poses.push(CameraPose::look_at(eye, target, up));
            }
        }
        Trajectory::Walk => {
            let inset = 0.6_f64.min(w / 4.0).min(d / 4.0);
            let (x0, x1, y0, y1) = (inset, w - inset, inset, d - inset);
            let perimeter = 2.0 * ((x1 - x0) + (y1 - y0));
            for i in 0..n {
                let s = perimeter * i as f64 / n as f64;
                let (pos, heading) = point_on_loop(s, x0, x1, y0, y1);
                let eye = Vector3::new(pos.0, pos.1, CAMERA_HEIGHT);
                // turn 30 degrees towards the room interior (loop runs counter-clockwise)
                let yaw = heading + 30f64.to_radians();
                let target = Vector3::new(pos.0 + 2.0 * yaw.cos(), pos.1 + 2.0 * yaw.sin(), LOOK_HEIGHT);
                poses.push(CameraPose::look_at(eye, target, up));
            }
        }
    }
    poses
        .into_iter()
        .map(|p| p.map_err(|e| SceneError::InfeasibleSpec(e.to_string())))
        .collect()
}

fn point_on_loop(mut s: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> ((f64, f64), f64) {
    use std::f64::consts::{FRAC_PI_2, PI};
    let legs = [
        ((x0, y0), (1.0, 0.0), x1 - x0, 0.0),
        ((x1, y0), (0.0, 1.0), y1 - y0, FRAC_PI_2),
        ((x1, y1), (-1.0, 0.0), x1 - x0, PI),
        ((x0, y1), (0.0, -1.0), y1 - y0, -FRAC_PI_2),
    ];
    for (start, dir, len, heading) in legs {
        if s < len {
            return ((start.0 + dir.0 * s, start.1 + dir.1 * s), heading);
        }
        s -= len;
    }
    ((x0, y0), 0.0)
}

fn place_objects(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<SceneObject>, SceneError> {
    let [w, d, _] = spec.room;
    let (cx, cy) = (w / 2.0, d / 2.0);
    let radius = spec.object_spread * 0.5 * w.min(d);
    let mut labels: Vec<&str> = OBJECT_LABELS.to_vec();
    let mut objects: Vec<SceneObject> = Vec::with_capacity(spec.n_objects);
    for k in 0..spec.n_objects {
        let label_idx = rng.gen_range(0..labels.len());
        let label = labels.swap_remove(label_idx).to_string();
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let half = [rng.gen_range(0.15..0.5), rng.gen_range(0.15..0.5), rng.gen_range(0.2..0.5)];
            let r = radius * rng.gen::<f64>().sqrt();
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            let c = [cx + r * a.cos(), cy + r * a.sin(), half[2]];
            let inside = c[0] - half[0] > 0.0 && c[0] + half[0] < w && c[1] - half[1] > 0.0 && c[1] + half[1] < d;
            let candidate = Aabb {
                center: c,
                half_extent: half,
            };
            if inside && objects.iter().all(|o| !o.bounds.overlaps_xy(&candidate, 0.1)) {
                placed = Some(candidate);
                break;
            }
        }
        let bounds = placed.ok_or_else(|| {
            SceneError::InfeasibleSpec(format!(
                "could not place object {k} without overlap in {PLACEMENT_ATTEMPTS} attempts"
            ))
        })?;
        objects.push(SceneObject { label, bounds });
    }
    Ok(objects)
}

/// Deterministic synthetic scene for `spec.seed`.
pub fn synth_scene(spec: &SynthSpec) -> Result<SyntheticScene, SceneError> {
    if spec.n_views < 4 {
        return Err(SceneError::InfeasibleSpec("at least 4 views are required".into()));
    }
    if spec.room.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(SceneError::InfeasibleSpec("room dimensions must be positive".into()));
    }
    if spec.n_objects > OBJECT_LABELS.len() {
        return Err(SceneError::InfeasibleSpec(format!(
            "at most {} objects (distinct labels)",
            OBJECT_LABELS.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let objects = place_objects(spec, &mut rng)?;
    let poses = camera_poses(spec)?;

    let views: Vec<ViewRecord> = poses
        .iter()
        .enumerate()
        .map(|(i, pose)| ViewRecord {
            view_id: format!("{i:04}"),
            frame_index: i as u64,
            image_path: None,
            pose: *pose,
        })
        .collect();
    let visibility: Vec<Vec<usize>> = poses
        .iter()
        .map(|pose| {
            (0..objects.len())
                .filter(|&o| oracle_visibility(pose, &objects[o].bounds, DEFAULT_FOV_DEG, DEFAULT_NEAR, DEFAULT_FAR))
                .collect()
        })
        .collect();

    let mut qa = Vec::new();
    for anchor in 0..objects.len() {
        let answer = (0..objects.len()).filter(|&o| o != anchor).min_by(|&a, &b| {
            let da = (objects[a].bounds.center() - objects[anchor].bounds.center()).norm();
            let db = (objects[b].bounds.center() - objects[anchor].bounds.center()).norm();
            da.total_cmp(&db).then(a.cmp(&b))
        });
        let Some(answer) = answer else { continue };
        let answer_views: Vec<String> = visibility
            .iter()
            .zip(&views)
            .filter(|(vis, _)| vis.contains(&anchor) && vis.contains(&answer))
            .map(|(_, v)| v.view_id.clone())
            .collect();
        if answer_views.is_empty() {
            continue;
        }
        qa.push(SyntheticQa {
            qa: QAInstance {
                question_id: format!("{}_q{anchor:02}", spec.scene_id),
                scene_id: spec.scene_id.clone(),
                question: format!("What is next to the {}?", objects[anchor].label),
                answers: vec![objects[answer].label.clone()],
            },
            anchor,
            answer,
            answer_views,
        });
    }

    Ok(SyntheticScene {
        spec: spec.clone(),
        manifest: SceneManifest {
            scene_id: spec.scene_id.clone(),
            views,
            base_dir: None,
        },
        objects,
        visibility,
        qa,
    })
}
