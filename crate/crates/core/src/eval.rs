//! Dataset readers, the synthetic generator, accuracy metrics and the
//! latency benchmark.
//!
//! LoopDB-style directory layout read by [`read_loopdb_layout`]:
//!
//! ```text
//! root/
//!   <submap-dir>/            one per submap, dense ids in name order
//!     <stem>.png | <stem>.ppm
//!     <stem>.lnkp            required keypoint file
//!     <stem>.pose            optional: 9 floats of R row-major, then 3 of t
//!   queries.json             optional: [{"image", "keypoints", "submap", "frame"}]
//! ```

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::atlas::{ImageRef, MapAtlas, Pose};
use crate::error::{Error, Result};
use crate::features::{encode_keypoint_file, parse_keypoint_file_with_dim, Keypoint, KeypointSet, DESCRIPTOR_DIM};
use crate::net::Network;
use crate::par::Exec;
use crate::query::{EmbeddingIndex, LoopDetector};
use crate::raster::Raster;

pub const QUERY_MANIFEST: &str = "queries.json";
const WARMUP_QUERIES: usize = 10;
/// Fixed creation time so generated atlases are identical per seed.
pub const SYNTHETIC_TIMESTAMP: &str = "1970-01-01T00:00:00Z";

/// A query frame with its ground-truth location in the reference atlas.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledQuery {
    pub image: Raster,
    pub keypoints: KeypointSet,
    pub truth_submap: usize,
    pub truth_frame: usize,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn read_keypoints(path: &Path, what: &str) -> Result<KeypointSet> {
    let bytes = fs::read(path).map_err(|_| Error::NotFound {
        what: "keypoint file",
        id: format!("{what} ({})", path.display()),
    })?;
    parse_keypoint_file_with_dim(&bytes, DESCRIPTOR_DIM)
}

/// Parse the plain-text pose format: 12 whitespace-separated floats.
pub fn parse_pose(text: &str) -> Result<Pose> {
    let values = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Validation(format!("pose value {t:?} is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != 12 {
        return Err(Error::Validation(format!(
            "pose has {} values, expected 12",
            values.len()
        )));
    }
    let pose = Pose::from_slice(&values)?;
    pose.validate()?;
    Ok(pose)
}

/// Read a query manifest. Image and keypoint paths are relative to the
/// manifest's directory; every truth key must exist in `atlas`.
pub fn read_query_manifest(path: &Path, atlas: &MapAtlas) -> Result<Vec<LabeledQuery>> {
    let root = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        field: QUERY_MANIFEST.into(),
        reason: e.to_string(),
    })?;
    let list = doc.as_array().ok_or_else(|| Error::Manifest {
        field: QUERY_MANIFEST.into(),
        reason: "expected an array".into(),
    })?;
    list.iter()
        .enumerate()
        .map(|(i, q)| {
            let field = |k: &str| format!("queries[{i}].{k}");
            let text_of = |k: &str| {
                q.get(k).and_then(Value::as_str).ok_or_else(|| Error::Manifest {
                    field: field(k),
                    reason: "expected a string".into(),
                })
            };
            let index_of = |k: &str| {
                q.get(k).and_then(Value::as_u64).map(|v| v as usize).ok_or_else(|| Error::Manifest {
                    field: field(k),
                    reason: "expected a non-negative integer".into(),
                })
            };
            let truth_submap = index_of("submap")?;
            let truth_frame = index_of("frame")?;
            atlas.frame(truth_submap, truth_frame)?;
            Ok(LabeledQuery {
                image: Raster::load(&root.join(text_of("image")?))?,
                keypoints: read_keypoints(&root.join(text_of("keypoints")?), &format!("query {i}"))?,
                truth_submap,
                truth_frame,
            })
        })
        .collect()
}

/// Write `queries` as `dir/queries.json` with pixels and keypoints under
/// `dir/queries/`.
pub fn write_query_manifest(dir: &Path, queries: &[LabeledQuery]) -> Result<()> {
    let sub = dir.join("queries");
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let mut list = Vec::with_capacity(queries.len());
    for (i, q) in queries.iter().enumerate() {
        let image = format!("queries/q{i:04}.ppm");
        let keypoints = format!("queries/q{i:04}.lnkp");
        q.image.save(&dir.join(&image))?;
        let kp_path = dir.join(&keypoints);
        fs::write(&kp_path, encode_keypoint_file(&q.keypoints)).map_err(|e| Error::io(&kp_path, e))?;
        list.push(serde_json::json!({
            "image": image,
            "keypoints": keypoints,
            "submap": q.truth_submap,
            "frame": q.truth_frame,
        }));
    }
    let path = dir.join(QUERY_MANIFEST);
    let text = serde_json::to_string_pretty(&list).expect("json values serialize");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Read a LoopDB-style directory tree into an atlas and its query set.
pub fn read_loopdb_layout(path: &Path) -> Result<(MapAtlas, Vec<LabeledQuery>)> {
    let root = fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
    let mut atlas = MapAtlas::new(DESCRIPTOR_DIM);
    for dir in sorted_entries(&root)?.into_iter().filter(|p| p.is_dir()) {
        let sid = atlas.add_submap();
        for img in sorted_entries(&dir)?.into_iter().filter(|p| is_image(p)) {
            let name = format!("{}/{}", sid, img.file_stem().unwrap_or_default().to_string_lossy());
            let keypoints = read_keypoints(&img.with_extension("lnkp"), &format!("frame {name}"))?;
            let pose_path = img.with_extension("pose");
            let pose = if pose_path.exists() {
                let text = fs::read_to_string(&pose_path).map_err(|e| Error::io(&pose_path, e))?;
                Some(parse_pose(&text).map_err(|e| Error::Validation(format!("frame {name}: {e}")))?)
            } else {
                None
            };
            atlas.add_frame(sid, ImageRef::Path(img), keypoints, pose)?;
        }
    }
    let manifest = root.join(QUERY_MANIFEST);
    let queries = if manifest.exists() {
        read_query_manifest(&manifest, &atlas)?
    } else {
        Vec::new()
    };
    Ok((atlas, queries))
}

/// Knobs of the synthetic generator beyond the four core arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOptions {
    pub n_submaps: usize,
    pub frames_per_submap: usize,
    pub noise_level: f64,
    pub seed: u64,
    pub image_size: u32,
    pub keypoints_per_frame: usize,
    pub queries_per_submap: usize,
}

impl SyntheticOptions {
    pub fn new(n_submaps: usize, frames_per_submap: usize, noise_level: f64, seed: u64) -> Self {
        SyntheticOptions {
            n_submaps,
            frames_per_submap,
            noise_level,
            seed,
            image_size: 32,
            keypoints_per_frame: 32,
            queries_per_submap: 2,
        }
    }
}

/// `(amplitude, fx, fy, phase)` of one sinusoid.
type Wave = (f64, f64, f64, f64);

/// Seeded procedural appearance of one submap.
struct Prototype {
    /// Per channel: base level and three waves.
    channels: [(f64, [Wave; 3]); 3],
    anchor: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

impl Prototype {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let channels = std::array::from_fn(|_| {
            let base = rng.random_range(0.25..0.75);
            let waves = std::array::from_fn(|_| {
                (
                    rng.random_range(0.05..0.2),
                    rng.random_range(0.5..4.0),
                    rng.random_range(0.5..4.0),
                    rng.random_range(0.0..TAU),
                )
            });
            (base, waves)
        });
        Prototype {
            channels,
            anchor: unit_gaussian(rng, DESCRIPTOR_DIM),
        }
    }
}

/// Deterministic content of one stored frame, before noise.
struct FrameBase {
    shift: (f64, f64),
    gain: f64,
    anchor: Vec<f64>,
    keypoints: Vec<(f32, f32, f32)>,
}

fn frame_base(proto: &Prototype, opts: &SyntheticOptions, rng: &mut ChaCha8Rng) -> FrameBase {
    let shift = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let gain = rng.random_range(0.9..1.1);
    let offset = unit_gaussian(rng, DESCRIPTOR_DIM);
    let anchor: Vec<f64> = proto.anchor.iter().zip(&offset).map(|(a, o)| a + 0.5 * o).collect();
    let size = opts.image_size as f32;
    let keypoints = (0..opts.keypoints_per_frame)
        .map(|_| {
            (
                rng.random_range(0.0..size - 1.0),
                rng.random_range(0.0..size - 1.0),
                rng.random_range(0.2f32..1.0),
            )
        })
        .collect();
    FrameBase {
        shift,
        gain,
        anchor,
        keypoints,
    }
}

/// Render one observation of a frame; `noise_level` scales every random
/// perturbation so that zero noise reproduces the stored frame exactly.
fn render(
    proto: &Prototype,
    base: &FrameBase,
    opts: &SyntheticOptions,
    rng: &mut ChaCha8Rng,
) -> (Raster, KeypointSet) {
    let size = opts.image_size;
    let noise = opts.noise_level;
    let s = size as f64;
    let mut data = Vec::with_capacity((size * size * 3) as usize);
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / s + base.shift.0;
            let v = y as f64 / s + base.shift.1;
            for (level, waves) in &proto.channels {
                let mut c = *level;
                for &(amp, fx, fy, phase) in waves {
                    c += amp * (TAU * (fx * u + fy * v) + phase).sin();
                }
                let mut value = c * base.gain;
                if noise > 0.0 {
                    value += noise * gaussian(rng);
                }
                data.push((value.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let image = Raster::new(size, size, data).expect("synthetic raster has consistent size");

    let per_component = noise / (DESCRIPTOR_DIM as f64).sqrt();
    let limit = size as f32 - 1.0;
    let keypoints = base
        .keypoints
        .iter()
        .map(|&(x, y, score)| {
            let (x, y) = if noise > 0.0 {
                let jx = (noise * gaussian(rng)) as f32;
                let jy = (noise * gaussian(rng)) as f32;
                ((x + jx).clamp(0.0, limit), (y + jy).clamp(0.0, limit))
            } else {
                (x, y)
            };
            let descriptor = base
                .anchor
                .iter()
                .map(|&a| {
                    let d = if noise > 0.0 { a + per_component * gaussian(rng) } else { a };
                    d as f32
                })
                .collect();
            Keypoint {
                x,
                y,
                score,
                descriptor,
            }
        })
        .collect();
    let set = KeypointSet::from_keypoints(keypoints, DESCRIPTOR_DIM)
        .and_then(|s| s.with_image_size(size, size))
        .expect("synthetic keypoints are in bounds");
    (image, set)
}

/// Seeded synthetic atlas plus labelled queries.
pub fn generate_synthetic_dataset(
    n_submaps: usize,
    frames_per_submap: usize,
    noise_level: f64,
    seed: u64,
) -> Result<(MapAtlas, Vec<LabeledQuery>)> {
    generate_synthetic(&SyntheticOptions::new(n_submaps, frames_per_submap, noise_level, seed))
}

pub fn generate_synthetic(opts: &SyntheticOptions) -> Result<(MapAtlas, Vec<LabeledQuery>)> {
    if opts.n_submaps < 2 {
        return Err(Error::Argument("synthetic dataset needs at least 2 submaps".into()));
    }
    if opts.frames_per_submap == 0 || opts.image_size < 2 || opts.keypoints_per_frame == 0 {
        return Err(Error::Argument(
            "frames, image size and keypoint count must be positive".into(),
        ));
    }
    if !(opts.noise_level >= 0.0 && opts.noise_level.is_finite()) {
        return Err(Error::Argument(format!("noise level {} must be non-negative", opts.noise_level)));
    }
    // Structure and noise come from separate streams so the stored content
    // does not depend on the noise level.
    let mut structure = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut noise = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6e6f_6973_6521);
    let mut atlas = MapAtlas::new(DESCRIPTOR_DIM);
    atlas.created_at = SYNTHETIC_TIMESTAMP.into();
    let mut world = Vec::with_capacity(opts.n_submaps);
    for _ in 0..opts.n_submaps {
        let proto = Prototype::new(&mut structure);
        let bases: Vec<FrameBase> = (0..opts.frames_per_submap)
            .map(|_| frame_base(&proto, opts, &mut structure))
            .collect();
        let sid = atlas.add_submap();
        for base in &bases {
            let (image, keypoints) = render(&proto, base, opts, &mut noise);
            atlas.add_frame(sid, ImageRef::Inline(image), keypoints, Some(Pose::identity()))?;
        }
        world.push((proto, bases));
    }
    let mut queries = Vec::with_capacity(opts.n_submaps * opts.queries_per_submap);
    for (sid, (proto, bases)) in world.iter().enumerate() {
        for _ in 0..opts.queries_per_submap {
            let fid = structure.random_range(0..bases.len());
            let (image, keypoints) = render(proto, &bases[fid], opts, &mut noise);
            queries.push(LabeledQuery {
                image,
                keypoints,
                truth_submap: sid,
                truth_frame: fid,
            });
        }
    }
    Ok((atlas, queries))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    /// Top-1 submap accuracy.
    pub accuracy: f64,
    /// Top-1 `(submap, frame)` accuracy.
    pub frame_accuracy: f64,
    pub mean_similarity_pct: f64,
    /// Fraction of queries whose best score passes the threshold.
    pub detection_rate: f64,
    pub threshold: f64,
    /// `confusion[truth][predicted]` submap counts.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(
    net: &Network,
    index: &EmbeddingIndex,
    queries: &[LabeledQuery],
    threshold: f64,
) -> Result<EvalReport> {
    evaluate_with(net, index, queries, threshold, Exec::default())
}

pub fn evaluate_with(
    net: &Network,
    index: &EmbeddingIndex,
    queries: &[LabeledQuery],
    threshold: f64,
    exec: Exec,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("no queries to evaluate".into()));
    }
    let detector = LoopDetector::new(index, net)?.with_exec(Exec::Sequential);
    let results = exec.map(queries, |q| detector.detect(&q.image, &q.keypoints, threshold));
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let n_classes = index
        .keys()
        .map(|(s, _)| s + 1)
        .chain(queries.iter().map(|q| q.truth_submap + 1))
        .max()
        .unwrap_or(0);
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    let (mut hits, mut frame_hits, mut matched, mut sim) = (0usize, 0usize, 0usize, 0.0);
    for (q, r) in queries.iter().zip(&results) {
        confusion[q.truth_submap][r.submap_id] += 1;
        if r.submap_id == q.truth_submap {
            hits += 1;
            if r.frame_id == q.truth_frame {
                frame_hits += 1;
            }
        }
        matched += usize::from(r.matched);
        sim += r.similarity_pct;
    }
    let n = queries.len() as f64;
    Ok(EvalReport {
        queries: queries.len(),
        accuracy: hits as f64 / n,
        frame_accuracy: frame_hits as f64 / n,
        mean_similarity_pct: sim / n,
        detection_rate: matched as f64 / n,
        threshold,
        confusion,
    })
}

/// Fixed-width dataset × method accuracy grid.
pub fn render_accuracy_table(rows: &[(&str, &str, &EvalReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:<14} {:>9} {:>10} {:>11}",
        "Dataset", "Method", "Accuracy", "Frame acc", "Mean sim %"
    );
    let _ = writeln!(out, "{}", "-".repeat(64));
    for (dataset, method, r) in rows {
        let _ = writeln!(
            out,
            "{:<16} {:<14} {:>9.4} {:>10.4} {:>11.2}",
            dataset, method, r.accuracy, r.frame_accuracy, r.mean_similarity_pct
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub n_entries: usize,
    pub n_queries: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Random query frames sized for `net`.
fn random_queries(net: &Network, n: usize, seed: u64) -> Vec<(Raster, KeypointSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = net.config().input_size;
    let dim = net.config().descriptor_dim;
    (0..n)
        .map(|_| {
            let data = (0..h * w * 3).map(|_| rng.random()).collect();
            let image = Raster::new(w as u32, h as u32, data).expect("consistent raster size");
            let kps = (0..16)
                .map(|_| Keypoint {
                    x: rng.random_range(0.0..w as f32),
                    y: rng.random_range(0.0..h as f32),
                    score: rng.random_range(0.1..1.0),
                    descriptor: unit_gaussian(&mut rng, dim).into_iter().map(|v| v as f32).collect(),
                })
                .collect();
            (image, KeypointSet::from_keypoints(kps, dim).expect("consistent descriptor size"))
        })
        .collect()
}

/// Index of `n` random unit embeddings bound to `net`, for sizing latency
/// runs beyond the atlas at hand. Keys are `(i / 100, i % 100)`.
pub fn random_index(net: &Network, n: usize, seed: u64) -> Result<EmbeddingIndex> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = net.config().embed_dim;
    let entries: Vec<_> = (0..n)
        .map(|i| {
            let v = unit_gaussian(&mut rng, dim).into_iter().map(|x| x as f32).collect();
            ((i / 100, i % 100), v)
        })
        .collect();
    EmbeddingIndex::from_entries(dim, net.fingerprint(), entries)
}

/// Time `n_queries` complete query paths (embed, score, rank), one at a time.
pub fn latency_benchmark(
    index: &EmbeddingIndex,
    net: &Network,
    n_queries: usize,
    seed: u64,
) -> Result<LatencyReport> {
    if n_queries == 0 {
        return Err(Error::Argument("n_queries must be at least 1".into()));
    }
    let detector = LoopDetector::new(index, net)?;
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let queries = random_queries(net, WARMUP_QUERIES + n_queries, seed);
    for (image, kps) in &queries[..WARMUP_QUERIES] {
        detector.query_top_k(image, kps, 1)?;
    }
    let mut times = Vec::with_capacity(n_queries);
    for (image, kps) in &queries[WARMUP_QUERIES..] {
        let start = Instant::now();
        let ranked = detector.query_top_k(image, kps, 1)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(ranked);
    }
    times.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        n_entries: index.len(),
        n_queries,
        median_ms: percentile(&times, 0.5),
        p95_ms: percentile(&times, 0.95),
        max_ms: times[times.len() - 1],
    })
}
