use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SceneError;
use crate::fsutil::write_atomic;
use crate::geometry::{CameraPose, GeometryError};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Which way the stored 4x4 extrinsics map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtrinsicConvention {
    #[default]
    CameraToWorld,
    /// ScanNet-style; inverted on load.
    WorldToCamera,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    schema_version: u32,
    scene_id: String,
    #[serde(default)]
    extrinsic_convention: ExtrinsicConvention,
    views: Vec<ViewFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewFile {
    view_id: String,
    frame_index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<String>,
    extrinsic: [[f64; 4]; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub view_id: String,
    pub frame_index: u64,
    pub image_path: Option<String>,
    /// Camera-to-world.
    pub pose: CameraPose,
}

/// Ordered views of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneManifest {
    pub scene_id: String,
    pub views: Vec<ViewRecord>,
    /// Directory relative image paths resolve against.
    pub base_dir: Option<PathBuf>,
}

impl SceneManifest {
    pub fn view_index(&self, view_id: &str) -> Option<usize> {
        self.views.iter().position(|v| v.view_id == view_id)
    }

    pub fn poses(&self) -> Vec<CameraPose> {
        self.views.iter().map(|v| v.pose).collect()
    }

    /// Absolute or base-relative image location for a view.
    pub fn image_path(&self, index: usize) -> Option<PathBuf> {
        let p = Path::new(self.views[index].image_path.as_ref()?);
        Some(match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        })
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.scene_id.is_empty() {
            return Err(SceneError::schema("scene_id", "must be non-empty"));
        }
        let mut seen = HashSet::new();
        for (i, v) in self.views.iter().enumerate() {
            if !seen.insert(v.view_id.as_str()) {
                return Err(SceneError::schema(
                    format!("views[{i}].view_id"),
                    format!("duplicate view id `{}`", v.view_id),
                ));
            }
            if i > 0 && v.frame_index <= self.views[i - 1].frame_index {
                return Err(SceneError::schema(
                    format!("views[{i}].frame_index"),
                    "frame indices must be strictly increasing",
                ));
            }
        }
        Ok(())
    }
}

fn invert_rigid(m: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
        out[i][3] = -(0..3).map(|k| m[k][i] * m[k][3]).sum::<f64>();
    }
    out[3][3] = 1.0;
    out
}

pub fn parse_manifest(text: &str) -> Result<SceneManifest, SceneError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ManifestFile = serde_path_to_error::deserialize(de)
        .map_err(|e| SceneError::schema(e.path().to_string(), e.inner().to_string()))?;
    if file.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(SceneError::schema(
            "schema_version",
            format!("unsupported version {}", file.schema_version),
        ));
    }
    let mut views = Vec::with_capacity(file.views.len());
    for (i, v) in file.views.into_iter().enumerate() {
        if v.extrinsic[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(SceneError::schema(
                format!("views[{i}].extrinsic"),
                "last row must be [0, 0, 0, 1]",
            ));
        }
        let extrinsic = match file.extrinsic_convention {
            ExtrinsicConvention::CameraToWorld => v.extrinsic,
            ExtrinsicConvention::WorldToCamera => {
                // validate before inverting so a bad matrix is reported as such
                CameraPose::from_extrinsic(&v.extrinsic).map_err(|e| pose_error(&v.view_id, i, e))?;
                invert_rigid(&v.extrinsic)
            }
        };
        let pose = CameraPose::from_extrinsic(&extrinsic).map_err(|e| pose_error(&v.view_id, i, e))?;
        views.push(ViewRecord {
            view_id: v.view_id,
            frame_index: v.frame_index,
            image_path: v.image_path,
            pose,
        });
    }
    let manifest = SceneManifest {
        scene_id: file.scene_id,
        views,
        base_dir: None,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn pose_error(view_id: &str, index: usize, e: GeometryError) -> SceneError {
    match e {
        GeometryError::NonOrthonormalRotation { .. } => SceneError::NonOrthonormalExtrinsic {
            view_id: view_id.to_string(),
        },
        GeometryError::NonFinitePosition => {
            SceneError::schema(format!("views[{index}].extrinsic"), "non-finite translation")
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<SceneManifest, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|e| SceneError::io(path, e))?;
    let mut m = parse_manifest(&text)?;
    m.base_dir = path.parent().map(Path::to_path_buf);
    Ok(m)
}

/// Serializes in the camera-to-world convention.
pub fn manifest_to_json(m: &SceneManifest) -> String {
    let file = ManifestFile {
        schema_version: MANIFEST_SCHEMA_VERSION,
        scene_id: m.scene_id.clone(),
        extrinsic_convention: ExtrinsicConvention::CameraToWorld,
        views: m
            .views
            .iter()
            .map(|v| ViewFile {
                view_id: v.view_id.clone(),
                frame_index: v.frame_index,
                image_path: v.image_path.clone(),
                extrinsic: v.pose.to_extrinsic(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("manifest serializes")
}

pub fn save_manifest(m: &SceneManifest, path: &Path) -> Result<(), SceneError> {
    write_atomic(path, manifest_to_json(m).as_bytes()).map_err(|e| SceneError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Vector3};

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "scene_id": "scene0000_00",
        "views": [
            {"view_id": "0", "frame_index": 0,
             "extrinsic": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}
        ]
    }"#;

    #[test]
    fn minimal_fixture() {
        let m = parse_manifest(MINIMAL).unwrap();
        assert_eq!(m.views.len(), 1);
        assert_eq!(m.views[0].pose, CameraPose::identity());
    }

    #[test]
    fn world_to_camera_is_inverted() {
        let c = 0.6_f64;
        let s = 0.8_f64;
        let w2c = [[c, -s, 0.0, 1.0], [s, c, 0.0, -2.0], [0.0, 0.0, 1.0, 0.5], [0.0, 0.0, 0.0, 1.0]];
        let text = serde_json::json!({
            "schema_version": 1,
            "scene_id": "s",
            "extrinsic_convention": "world_to_camera",
            "views": [{"view_id": "a", "frame_index": 3, "extrinsic": w2c}]
        })
        .to_string();
        let m = parse_manifest(&text).unwrap();
        // general 4x4 inverse as the oracle
        let inv = Matrix4::from_fn(|i, j| w2c[i][j]).try_inverse().unwrap();
        let got = m.views[0].pose.to_matrix4();
        assert!((got - inv).abs().max() < 1e-12);
        let p = m.views[0].pose.position();
        assert!((p - Vector3::new(inv[(0, 3)], inv[(1, 3)], inv[(2, 3)])).norm() < 1e-12);
    }

    #[test]
    fn duplicate_view_id_is_schema_error() {
        let text = MINIMAL.replace(
            r#"{"view_id": "0", "frame_index": 0,"#,
            r#"{"view_id": "0", "frame_index": 0, "extrinsic": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]},
               {"view_id": "0", "frame_index": 1,"#,
        );
        match parse_manifest(&text) {
            Err(SceneError::Schema { field, .. }) => assert_eq!(field, "views[1].view_id"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_error_names_the_field() {
        let text = MINIMAL.replace(r#""frame_index": 0"#, r#""frame_index": "zero""#);
        match parse_manifest(&text) {
            Err(SceneError::Schema { field, .. }) => assert_eq!(field, "views[0].frame_index"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_orthonormal_names_the_view() {
        let text = MINIMAL.replace("[1,0,0,0]", "[1.1,0,0,0]");
        match parse_manifest(&text) {
            Err(SceneError::NonOrthonormalExtrinsic { view_id }) => assert_eq!(view_id, "0"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_increasing_frames_rejected() {
        let text = MINIMAL.replace(
            r#"{"view_id": "0", "frame_index": 0,"#,
            r#"{"view_id": "1", "frame_index": 0, "extrinsic": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]},
               {"view_id": "0", "frame_index": 0,"#,
        );
        assert!(matches!(parse_manifest(&text), Err(SceneError::Schema { .. })));
    }
}
