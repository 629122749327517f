//! The map atlas: an ordered collection of submaps, each an ordered run of
//! camera frames with their keypoint representation and optional pose.
//!
//! On disk an atlas is a directory holding `atlas.json` (the manifest), one
//! `LNKP` keypoint file per frame under `keypoints/`, and PPM copies of any
//! in-memory rasters under `images/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::features::{
    encode_keypoint_file, parse_keypoint_file_with_dim, KeypointSet, DESCRIPTOR_DIM,
};
use crate::raster::Raster;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "atlas.json";
const POSE_TOLERANCE: f64 = 1e-6;

/// Rigid camera pose metadata (rotation row-major, translation in meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Build from 12 numbers: R row-major then t.
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::Validation(format!(
                "pose needs 12 values (9 rotation + 3 translation), got {}",
                v.len()
            )));
        }
        let pose = Pose {
            rotation: [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]],
            translation: [v[9], v[10], v[11]],
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.rotation.iter().flatten().copied().collect();
        v.extend_from_slice(&self.translation);
        v
    }

    /// `‖RᵀR − I‖∞`
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub fn determinant(&self) -> f64 {
        let r = &self.rotation;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn validate(&self) -> Result<()> {
        if !self.to_vec().iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("pose contains non-finite values".into()));
        }
        let ortho = self.orthonormality_error();
        if ortho >= POSE_TOLERANCE {
            return Err(Error::Validation(format!(
                "rotation is not orthonormal (max |RᵀR − I| = {ortho:e})"
            )));
        }
        let det = self.determinant();
        if (det - 1.0).abs() >= POSE_TOLERANCE {
            return Err(Error::Validation(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageRef {
    /// Pixels live in a file (PNG or PPM) outside the atlas.
    Path(PathBuf),
    Inline(Raster),
}

impl ImageRef {
    pub fn load(&self) -> Result<Raster> {
        match self {
            ImageRef::Inline(r) => Ok(r.clone()),
            ImageRef::Path(p) => Raster::load(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: usize,
    pub image: ImageRef,
    pub keypoints: KeypointSet,
    pub pose: Option<Pose>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Submap {
    pub id: usize,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AtlasStats {
    pub submaps: usize,
    pub total_frames: usize,
    pub total_keypoints: usize,
}

#[derive(Debug, Clone)]
pub struct AtlasConfig {
    pub root: PathBuf,
    pub descriptor_dim: usize,
    /// Fixed creation stamp; `None` uses the current UTC time.
    pub created_at: Option<String>,
}

impl AtlasConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        AtlasConfig {
            root: root.into(),
            descriptor_dim: DESCRIPTOR_DIM,
            created_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapAtlas {
    pub submaps: Vec<Submap>,
    pub manifest_version: u32,
    pub created_at: String,
    pub descriptor_dim: usize,
}

/// Create an empty atlas rooted at `config.root`, writing its manifest.
pub fn create_atlas(config: &AtlasConfig) -> Result<MapAtlas> {
    let creation = |reason: String| Error::Creation {
        path: config.root.clone(),
        reason,
    };
    fs::create_dir_all(&config.root).map_err(|e| creation(e.to_string()))?;
    let mut atlas = MapAtlas::new(config.descriptor_dim);
    if let Some(ts) = &config.created_at {
        atlas.created_at = ts.clone();
    }
    save_atlas(&atlas, &config.root).map_err(|e| creation(e.to_string()))?;
    Ok(atlas)
}

impl MapAtlas {
    /// In-memory atlas with no storage root.
    pub fn new(descriptor_dim: usize) -> Self {
        MapAtlas {
            submaps: Vec::new(),
            manifest_version: MANIFEST_VERSION,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            descriptor_dim,
        }
    }

    pub fn add_submap(&mut self) -> usize {
        let id = self.submaps.len();
        self.submaps.push(Submap {
            id,
            frames: Vec::new(),
        });
        id
    }

    pub fn add_frame(
        &mut self,
        submap_id: usize,
        image: ImageRef,
        keypoints: KeypointSet,
        pose: Option<Pose>,
    ) -> Result<usize> {
        let dim = self.descriptor_dim;
        let submap = self.submaps.get_mut(submap_id).ok_or(Error::NotFound {
            what: "submap",
            id: submap_id.to_string(),
        })?;
        if keypoints.dim != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: keypoints.dim,
            });
        }
        if let Some(bad) = keypoints.keypoints.iter().find(|k| k.descriptor.len() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                got: bad.descriptor.len(),
            });
        }
        if let Some(p) = &pose {
            p.validate()?;
        }
        if let ImageRef::Inline(r) = &image {
            if r.width == 0 || r.height == 0 {
                return Err(Error::Validation("image dimensions must be positive".into()));
            }
        }
        let id = submap.frames.len();
        submap.frames.push(Frame {
            id,
            image,
            keypoints,
            pose,
        });
        Ok(id)
    }

    pub fn submap(&self, id: usize) -> Result<&Submap> {
        self.submaps.get(id).ok_or(Error::NotFound {
            what: "submap",
            id: id.to_string(),
        })
    }

    pub fn frame(&self, submap_id: usize, frame_id: usize) -> Result<&Frame> {
        self.submap(submap_id)?
            .frames
            .get(frame_id)
            .ok_or(Error::NotFound {
                what: "frame",
                id: format!("{submap_id}/{frame_id}"),
            })
    }

    /// All frames in `(submap, frame)` order.
    pub fn frames(&self) -> impl Iterator<Item = (usize, &Frame)> {
        self.submaps
            .iter()
            .flat_map(|s| s.frames.iter().map(move |f| (s.id, f)))
    }

    pub fn stats(&self) -> AtlasStats {
        AtlasStats {
            submaps: self.submaps.len(),
            total_frames: self.submaps.iter().map(|s| s.frames.len()).sum(),
            total_keypoints: self.frames().map(|(_, f)| f.keypoints.len()).sum(),
        }
    }

    /// Check the dense-id and pose invariants.
    pub fn validate(&self) -> Result<()> {
        for (si, s) in self.submaps.iter().enumerate() {
            if s.id != si {
                return Err(Error::Validation(format!(
                    "submap at position {si} has id {}",
                    s.id
                )));
            }
            for (fi, f) in s.frames.iter().enumerate() {
                if f.id != fi {
                    return Err(Error::Validation(format!(
                        "frame at position {fi} of submap {si} has id {}",
                        f.id
                    )));
                }
                if let Some(p) = &f.pose {
                    p.validate()?;
                }
            }
        }
        Ok(())
    }
}

pub fn stats(atlas: &MapAtlas) -> AtlasStats {
    atlas.stats()
}

fn keypoint_rel_path(s: usize, f: usize) -> String {
    format!("keypoints/s{s:04}_f{f:04}.lnkp")
}

fn image_rel_path(s: usize, f: usize) -> String {
    format!("images/s{s:04}_f{f:04}.ppm")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Persist `atlas` into directory `dir`.
pub fn save_atlas(atlas: &MapAtlas, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut submaps = Vec::with_capacity(atlas.submaps.len());
    for s in &atlas.submaps {
        let mut frames = Vec::with_capacity(s.frames.len());
        for f in &s.frames {
            let kp_rel = keypoint_rel_path(s.id, f.id);
            write_file(&dir.join(&kp_rel), &encode_keypoint_file(&f.keypoints))?;
            let mut entry = Map::new();
            entry.insert("id".into(), json!(f.id));
            match &f.image {
                ImageRef::Inline(r) => {
                    let rel = image_rel_path(s.id, f.id);
                    let path = dir.join(&rel);
                    if let Some(parent) = path.parent() {
                        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                    }
                    r.save(&path)?;
                    entry.insert("image".into(), json!(rel));
                    entry.insert("embedded".into(), json!(true));
                }
                ImageRef::Path(p) => {
                    entry.insert("image".into(), json!(p.to_string_lossy()));
                }
            }
            entry.insert("keypoints".into(), json!(kp_rel));
            if let Some((w, h)) = f.keypoints.image_size {
                entry.insert("image_size".into(), json!([w, h]));
            }
            if let Some(p) = &f.pose {
                entry.insert(
                    "pose".into(),
                    json!({
                        "rotation": p.rotation.iter().flatten().collect::<Vec<_>>(),
                        "translation": p.translation,
                    }),
                );
            }
            frames.push(Value::Object(entry));
        }
        submaps.push(json!({ "id": s.id, "frames": frames }));
    }
    let manifest = json!({
        "version": atlas.manifest_version,
        "created_at": atlas.created_at,
        "descriptor_dim": atlas.descriptor_dim,
        "submaps": submaps,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
}

fn field_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Manifest {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn get<'a>(obj: &'a Value, key: &str, path: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| field_err(&format!("{path}{key}"), "missing"))
}

fn get_u64(obj: &Value, key: &str, path: &str) -> Result<u64> {
    get(obj, key, path)?
        .as_u64()
        .ok_or_else(|| field_err(&format!("{path}{key}"), "expected a non-negative integer"))
}

fn get_str<'a>(obj: &'a Value, key: &str, path: &str) -> Result<&'a str> {
    get(obj, key, path)?
        .as_str()
        .ok_or_else(|| field_err(&format!("{path}{key}"), "expected a string"))
}

fn get_array<'a>(obj: &'a Value, key: &str, path: &str) -> Result<&'a Vec<Value>> {
    get(obj, key, path)?
        .as_array()
        .ok_or_else(|| field_err(&format!("{path}{key}"), "expected an array"))
}

fn floats(values: &[Value], field: &str) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|v| v.as_f64().ok_or_else(|| field_err(field, "expected numbers")))
        .collect()
}

/// Resolve the manifest path for either a directory or a manifest file.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Load an atlas from its directory or its `atlas.json`.
pub fn load_atlas(path: &Path) -> Result<MapAtlas> {
    let manifest_file = manifest_path(path);
    let dir = manifest_file
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let text = fs::read_to_string(&manifest_file).map_err(|e| Error::io(&manifest_file, e))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| field_err("<root>", e.to_string()))?;

    let version = get_u64(&root, "version", "")?;
    if version != u64::from(MANIFEST_VERSION) {
        return Err(Error::UnsupportedVersion {
            what: "atlas manifest",
            found: version as u32,
            expected: MANIFEST_VERSION,
        });
    }
    let created_at = get_str(&root, "created_at", "")?.to_string();
    let descriptor_dim = match root.get("descriptor_dim") {
        None => DESCRIPTOR_DIM,
        Some(v) => v
            .as_u64()
            .ok_or_else(|| field_err("descriptor_dim", "expected a non-negative integer"))?
            as usize,
    };

    let mut atlas = MapAtlas {
        submaps: Vec::new(),
        manifest_version: MANIFEST_VERSION,
        created_at,
        descriptor_dim,
    };
    for (si, sv) in get_array(&root, "submaps", "")?.iter().enumerate() {
        let sp = format!("submaps[{si}].");
        let sid = get_u64(sv, "id", &sp)? as usize;
        if sid != si {
            return Err(field_err(
                &format!("{sp}id"),
                format!("expected dense id {si}, found {sid}"),
            ));
        }
        let mut frames = Vec::new();
        for (fi, fv) in get_array(sv, "frames", &sp)?.iter().enumerate() {
            let fp = format!("{sp}frames[{fi}].");
            let fid = get_u64(fv, "id", &fp)? as usize;
            if fid != fi {
                return Err(field_err(
                    &format!("{fp}id"),
                    format!("expected dense id {fi}, found {fid}"),
                ));
            }
            let image_str = get_str(fv, "image", &fp)?;
            let embedded = fv.get("embedded").and_then(Value::as_bool).unwrap_or(false);
            let image_path = dir.join(image_str);
            let image = if embedded {
                ImageRef::Inline(Raster::load(&image_path)?)
            } else {
                ImageRef::Path(image_path)
            };
            let kp_path = dir.join(get_str(fv, "keypoints", &fp)?);
            let bytes = fs::read(&kp_path).map_err(|e| Error::io(&kp_path, e))?;
            let mut keypoints = parse_keypoint_file_with_dim(&bytes, descriptor_dim)?;
            if let Some(sz) = fv.get("image_size") {
                let field = format!("{fp}image_size");
                let dims = sz
                    .as_array()
                    .filter(|a| a.len() == 2)
                    .ok_or_else(|| field_err(&field, "expected [width, height]"))?;
                let w = dims[0].as_u64().ok_or_else(|| field_err(&field, "bad width"))?;
                let h = dims[1].as_u64().ok_or_else(|| field_err(&field, "bad height"))?;
                keypoints.image_size = Some((w as u32, h as u32));
            }
            let pose = match fv.get("pose") {
                None | Some(Value::Null) => None,
                Some(pv) => {
                    let pp = format!("{fp}pose.");
                    let mut v = floats(get_array(pv, "rotation", &pp)?, &format!("{pp}rotation"))?;
                    v.extend(floats(
                        get_array(pv, "translation", &pp)?,
                        &format!("{pp}translation"),
                    )?);
                    Some(Pose::from_slice(&v).map_err(|e| field_err(&format!("{fp}pose"), e.to_string()))?)
                }
            };
            frames.push(Frame {
                id: fid,
                image,
                keypoints,
                pose,
            });
        }
        atlas.submaps.push(Submap { id: sid, frames });
    }
    Ok(atlas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Keypoint;

    fn keypoints(n: usize, dim: usize) -> KeypointSet {
        let kps = (0..n)
            .map(|i| Keypoint {
                x: i as f32,
                y: 1.0,
                score: 0.5,
                descriptor: vec![0.25; dim],
            })
            .collect();
        KeypointSet::from_keypoints(kps, dim).unwrap()
    }

    fn tiny_image() -> ImageRef {
        ImageRef::Inline(Raster::new(2, 2, vec![7; 12]).unwrap())
    }

    #[test]
    fn fresh_atlas_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let atlas = create_atlas(&AtlasConfig::new(dir.path().join("a"))).unwrap();
        assert_eq!(atlas.stats(), AtlasStats::default());
        assert!(dir.path().join("a").join(MANIFEST_FILE).exists());
    }

    #[test]
    fn unwritable_root_fails() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain-file");
        fs::write(&file, b"x").unwrap();
        let err = create_atlas(&AtlasConfig::new(file.join("atlas"))).unwrap_err();
        assert!(matches!(err, Error::Creation { .. }));
    }

    #[test]
    fn submap_and_frame_ids_are_dense() {
        let mut atlas = MapAtlas::new(128);
        assert_eq!(
            (0..3).map(|_| atlas.add_submap()).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        assert_eq!(
            atlas.stats(),
            AtlasStats {
                submaps: 3,
                total_frames: 0,
                total_keypoints: 0
            }
        );
        let f = atlas
            .add_frame(0, tiny_image(), keypoints(2, 128), None)
            .unwrap();
        assert_eq!(f, 0);
        assert_eq!(
            atlas.add_frame(0, tiny_image(), keypoints(2, 128), None).unwrap(),
            1
        );
        atlas.validate().unwrap();
    }

    #[test]
    fn add_frame_errors() {
        let mut atlas = MapAtlas::new(128);
        atlas.add_submap();
        assert!(matches!(
            atlas.add_frame(4, tiny_image(), keypoints(1, 128), None),
            Err(Error::NotFound { .. })
        ));
        assert!(matches!(
            atlas.add_frame(0, tiny_image(), keypoints(1, 64), None),
            Err(Error::Dimension {
                expected: 128,
                got: 64
            })
        ));
        let mut skew = Pose::identity();
        skew.rotation[0][1] = 0.1;
        assert!(matches!(
            atlas.add_frame(0, tiny_image(), keypoints(1, 128), Some(skew)),
            Err(Error::Validation(_))
        ));
        let mut reflect = Pose::identity();
        reflect.rotation[2][2] = -1.0;
        assert!(atlas
            .add_frame(0, tiny_image(), keypoints(1, 128), Some(reflect))
            .is_err());
    }

    #[test]
    fn stats_count_keypoints() {
        let mut atlas = MapAtlas::new(128);
        atlas.add_submap();
        atlas.add_frame(0, tiny_image(), keypoints(50, 128), None).unwrap();
        atlas.add_frame(0, tiny_image(), keypoints(70, 128), None).unwrap();
        assert_eq!(
            stats(&atlas),
            AtlasStats {
                submaps: 1,
                total_frames: 2,
                total_keypoints: 120
            }
        );
    }

    #[test]
    fn identity_pose_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut atlas = MapAtlas::new(128);
        atlas.add_submap();
        let t = [0.1, -2.5, 1.0 / 3.0];
        let pose = Pose {
            translation: t,
            ..Pose::identity()
        };
        atlas.add_frame(0, tiny_image(), keypoints(1, 128), Some(pose)).unwrap();
        save_atlas(&atlas, dir.path()).unwrap();
        let back = load_atlas(dir.path()).unwrap();
        assert_eq!(back.frame(0, 0).unwrap().pose, Some(pose));
        assert_eq!(back, atlas);
    }

    #[test]
    fn manifest_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let mut atlas = MapAtlas::new(128);
        atlas.add_submap();
        atlas.add_frame(0, tiny_image(), keypoints(1, 128), None).unwrap();
        save_atlas(&atlas, dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap();

        fs::write(&mpath, text.replace("\"keypoints\":", "\"kp\":")).unwrap();
        match load_atlas(dir.path()) {
            Err(Error::Manifest { field, .. }) => assert_eq!(field, "submaps[0].frames[0].keypoints"),
            other => panic!("unexpected {other:?}"),
        }

        fs::write(&mpath, text.replace("\"version\": 1", "\"version\": 7")).unwrap();
        assert!(matches!(
            load_atlas(dir.path()),
            Err(Error::UnsupportedVersion { found: 7, .. })
        ));
    }
}
