//! Keypoint ingestion and post-processing.
//!
//! Keypoints arrive from an external detector as `LNKP` files. Before they
//! are fused with the image embedding they are L2-normalized, thinned by
//! greedy non-maximum suppression and collapsed into one confidence-weighted
//! unit descriptor per image.
//!
//! `LNKP` layout (little-endian):
//!
//! ```text
//! "LNKP" | u32 version = 1 | u32 count | u32 dim |
//! count × { f32 x_px, f32 y_px, f32 score, dim × f32 descriptor }
//! ```

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DESCRIPTOR_DIM: usize = 128;
pub const KEYPOINT_MAGIC: &[u8; 4] = b"LNKP";
pub const KEYPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Descriptors whose norm is already this close to one are left untouched,
/// which makes normalization exactly idempotent on f32 storage.
const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub score: f32,
    pub descriptor: Vec<f32>,
}

impl Keypoint {
    pub fn descriptor_norm(&self) -> f64 {
        self.descriptor
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub keypoints: Vec<Keypoint>,
    /// Descriptor dimension. Kept explicitly so empty sets still carry it.
    pub dim: usize,
    /// `(width, height)` of the source image, when known.
    pub image_size: Option<(u32, u32)>,
}

impl KeypointSet {
    pub fn new(dim: usize) -> Self {
        KeypointSet {
            keypoints: Vec::new(),
            dim,
            image_size: None,
        }
    }

    pub fn from_keypoints(keypoints: Vec<Keypoint>, dim: usize) -> Result<Self> {
        if let Some(bad) = keypoints.iter().find(|k| k.descriptor.len() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                got: bad.descriptor.len(),
            });
        }
        Ok(KeypointSet {
            keypoints,
            dim,
            image_size: None,
        })
    }

    /// Attach the source image size, rejecting keypoints outside the raster.
    pub fn with_image_size(mut self, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        let (w, h) = (width as f32, height as f32);
        for (i, k) in self.keypoints.iter().enumerate() {
            if !(k.x >= 0.0 && k.x < w && k.y >= 0.0 && k.y < h) {
                return Err(Error::Validation(format!(
                    "keypoint {i} at ({}, {}) lies outside {width}x{height}",
                    k.x, k.y
                )));
            }
        }
        self.image_size = Some((width, height));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

pub fn encode_keypoint_file(set: &KeypointSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + set.len() * (3 + set.dim) * 4);
    out.extend_from_slice(KEYPOINT_MAGIC);
    out.extend_from_slice(&KEYPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    out.extend_from_slice(&(set.dim as u32).to_le_bytes());
    for k in &set.keypoints {
        out.extend_from_slice(&k.x.to_le_bytes());
        out.extend_from_slice(&k.y.to_le_bytes());
        out.extend_from_slice(&k.score.to_le_bytes());
        for v in &k.descriptor {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.pos,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse an `LNKP` buffer. Records are returned in file order, untouched.
pub fn parse_keypoint_file(bytes: &[u8]) -> Result<KeypointSet> {
    parse_inner(bytes, None)
}

/// Like [`parse_keypoint_file`] but also rejects a header dimension other
/// than `expected_dim`.
pub fn parse_keypoint_file_with_dim(bytes: &[u8], expected_dim: usize) -> Result<KeypointSet> {
    parse_inner(bytes, Some(expected_dim))
}

fn parse_inner(bytes: &[u8], expected_dim: Option<usize>) -> Result<KeypointSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != KEYPOINT_MAGIC {
        return Err(Error::parse(
            0,
            format!("bad magic {:?}, expected \"LNKP\"", String::from_utf8_lossy(magic)),
        ));
    }
    let version = cur.u32("version")?;
    if version != KEYPOINT_VERSION {
        return Err(Error::parse(
            4,
            format!("unsupported keypoint file version {version}"),
        ));
    }
    let count = cur.u32("count")? as usize;
    let dim_offset = cur.pos;
    let dim = cur.u32("dim")? as usize;
    if dim == 0 {
        return Err(Error::parse(dim_offset, "descriptor dimension is zero"));
    }
    if let Some(expected) = expected_dim {
        if dim != expected {
            return Err(Error::parse(
                dim_offset,
                format!("descriptor dimension {dim}, expected {expected}"),
            ));
        }
    }
    let record = (3 + dim) * 4;
    let body = bytes.len() - HEADER_LEN;
    let needed = count.checked_mul(record);
    if needed != Some(body) {
        let offset = HEADER_LEN + (body / record).min(count) * record;
        return Err(Error::parse(
            offset,
            format!("payload is {body} bytes, too short or long for {count} records of dim {dim}"),
        ));
    }
    let mut keypoints = Vec::with_capacity(count);
    for _ in 0..count {
        let x = cur.f32("x")?;
        let y = cur.f32("y")?;
        let score = cur.f32("score")?;
        let mut descriptor = Vec::with_capacity(dim);
        for _ in 0..dim {
            descriptor.push(cur.f32("descriptor")?);
        }
        keypoints.push(Keypoint {
            x,
            y,
            score,
            descriptor,
        });
    }
    Ok(KeypointSet {
        keypoints,
        dim,
        image_size: None,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizeReport {
    pub drop_count: usize,
}

/// Rescale every descriptor to unit L2 norm. Zero-norm (or non-finite)
/// descriptors cannot be normalized and are dropped.
pub fn l2_normalize(set: &KeypointSet) -> (KeypointSet, NormalizeReport) {
    let mut report = NormalizeReport::default();
    let mut keypoints = Vec::with_capacity(set.len());
    for k in &set.keypoints {
        let norm = k.descriptor_norm();
        if norm == 0.0 || !norm.is_finite() {
            report.drop_count += 1;
            continue;
        }
        if (norm - 1.0).abs() <= UNIT_TOLERANCE {
            keypoints.push(k.clone());
            continue;
        }
        let descriptor = k
            .descriptor
            .iter()
            .map(|&v| (f64::from(v) / norm) as f32)
            .collect();
        keypoints.push(Keypoint {
            descriptor,
            ..k.clone()
        });
    }
    if report.drop_count > 0 {
        warn!(
            "dropped {} keypoint(s) with degenerate descriptors",
            report.drop_count
        );
    }
    (
        KeypointSet {
            keypoints,
            dim: set.dim,
            image_size: set.image_size,
        },
        report,
    )
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmsWindow {
    /// `|dx| <= w && |dy| <= w`
    #[default]
    Square,
    /// `dx² + dy² <= w²`
    Circle,
}

impl NmsWindow {
    fn covers(self, a: &Keypoint, b: &Keypoint, window: f64) -> bool {
        let dx = (f64::from(a.x) - f64::from(b.x)).abs();
        let dy = (f64::from(a.y) - f64::from(b.y)).abs();
        match self {
            NmsWindow::Square => dx <= window && dy <= window,
            NmsWindow::Circle => dx * dx + dy * dy <= window * window,
        }
    }
}

/// Total order used by NMS: score desc, then x asc, y asc, input index asc.
pub(crate) fn nms_order(set: &KeypointSet) -> Vec<usize> {
    let mut order: Vec<usize> = (0..set.len()).collect();
    let kps = &set.keypoints;
    order.sort_by(|&a, &b| {
        let (ka, kb) = (&kps[a], &kps[b]);
        kb.score
            .total_cmp(&ka.score)
            .then(ka.x.total_cmp(&kb.x))
            .then(ka.y.total_cmp(&kb.y))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy non-maximum suppression with the default square window.
pub fn nms_keypoints(set: &KeypointSet, window_px: u32) -> KeypointSet {
    nms_keypoints_with(set, window_px, NmsWindow::Square)
}

pub fn nms_keypoints_with(set: &KeypointSet, window_px: u32, shape: NmsWindow) -> KeypointSet {
    let window = f64::from(window_px);
    let mut kept: Vec<Keypoint> = Vec::new();
    for idx in nms_order(set) {
        let cand = &set.keypoints[idx];
        if !kept.iter().any(|k| shape.covers(k, cand, window)) {
            kept.push(cand.clone());
        }
    }
    KeypointSet {
        keypoints: kept,
        dim: set.dim,
        image_size: set.image_size,
    }
}

/// Collapse a normalized keypoint set into one unit descriptor:
/// `normalize(Σ sₖ·dₖ / Σ sₖ)`, falling back to the plain mean when all
/// scores are zero.
pub fn aggregate_image_descriptor(set: &KeypointSet) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::EmptyInput(
            "cannot aggregate an empty keypoint set".into(),
        ));
    }
    let total: f64 = set
        .keypoints
        .iter()
        .map(|k| f64::from(k.score.max(0.0)))
        .sum();
    let unweighted = total <= 0.0;
    if unweighted {
        warn!("all keypoint scores are zero; aggregating with uniform weights");
    }
    let mut acc = vec![0.0f64; set.dim];
    for k in &set.keypoints {
        let w = if unweighted {
            1.0
        } else {
            f64::from(k.score.max(0.0))
        };
        for (a, &v) in acc.iter_mut().zip(&k.descriptor) {
            *a += w * f64::from(v);
        }
    }
    // Dividing by Σ s does not change the direction; only the final
    // normalization matters.
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Degenerate(
            "weighted descriptor sum is the zero vector".into(),
        ));
    }
    acc.iter_mut().for_each(|v| *v /= norm);
    Ok(acc)
}

/// Normalize then aggregate: the per-image descriptor fed to fusion.
pub fn frame_descriptor(set: &KeypointSet) -> Result<Vec<f64>> {
    aggregate_image_descriptor(&l2_normalize(set).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    pub window_px: u32,
    pub min_score: f32,
    pub window: NmsWindow,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            window_px: 5,
            min_score: 0.0,
            window: NmsWindow::Square,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub input: usize,
    pub below_min_score: usize,
    pub out_of_bounds: usize,
    pub degenerate: usize,
    pub suppressed: usize,
    pub kept: usize,
}

/// Full ingest pipeline: clamp scores to `[0, 1]`, drop low-score and
/// out-of-raster keypoints, L2-normalize, then NMS.
pub fn ingest(set: &KeypointSet, opts: &IngestOptions) -> (KeypointSet, IngestReport) {
    let mut report = IngestReport {
        input: set.len(),
        ..Default::default()
    };
    let mut filtered = Vec::with_capacity(set.len());
    for k in &set.keypoints {
        let score = if k.score.is_nan() {
            0.0
        } else {
            k.score.clamp(0.0, 1.0)
        };
        if score < opts.min_score {
            report.below_min_score += 1;
            continue;
        }
        if let Some((w, h)) = set.image_size {
            if !(k.x >= 0.0 && k.x < w as f32 && k.y >= 0.0 && k.y < h as f32) {
                report.out_of_bounds += 1;
                continue;
            }
        }
        filtered.push(Keypoint { score, ..k.clone() });
    }
    let clamped = KeypointSet {
        keypoints: filtered,
        dim: set.dim,
        image_size: set.image_size,
    };
    let (normalized, norm_report) = l2_normalize(&clamped);
    report.degenerate = norm_report.drop_count;
    let thinned = nms_keypoints_with(&normalized, opts.window_px, opts.window);
    report.suppressed = normalized.len() - thinned.len();
    report.kept = thinned.len();
    (thinned, report)
}
