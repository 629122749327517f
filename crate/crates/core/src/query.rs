//! Embedding index over the atlas and loop-closure queries.
//!
//! Retrieval is an exhaustive cosine scan over a contiguous `count × dim`
//! f32 matrix. Scores are accumulated in f64 so ranking is stable across
//! the sequential and parallel paths.
//!
//! `LNEM` index layout (little-endian):
//!
//! ```text
//! "LNEM" | u32 version | u32 dim | u32 count | 32-byte network fingerprint |
//! count × { u32 submap, u32 frame, dim × f32 }
//! ```

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atlas::MapAtlas;
use crate::error::{Error, Result};
use crate::features::{frame_descriptor, KeypointSet};
use crate::net::{ForwardOutput, Network};
use crate::par::Exec;
use crate::raster::Raster;

pub const INDEX_MAGIC: &[u8; 4] = b"LNEM";
const INDEX_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 32;
const UNIT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_THRESHOLD: f64 = 0.75;
/// Entries scored per parallel work item.
const SCORE_CHUNK: usize = 1024;

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[−1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine mapped onto the 0–100 scale, rounded to two decimals.
pub fn similarity_pct(cosine: f64) -> f64 {
    (cosine.max(0.0) * 100.0 * 100.0).round() / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub submap_id: usize,
    pub frame_id: usize,
    pub cosine: f64,
    pub similarity_pct: f64,
}

impl fmt::Display for Ranked {
    /// `[SSS/FFF]  NN.NN%`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{:03}/{:03}]  {:.2}%",
            self.submap_id, self.frame_id, self.similarity_pct
        )
    }
}

/// Immutable flat store of unit embeddings keyed by `(submap, frame)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    keys: Vec<(u32, u32)>,
    data: Vec<f32>,
    norms: Vec<f64>,
    fingerprint: [u8; 32],
}

impl EmbeddingIndex {
    /// Assemble an index from precomputed embeddings.
    pub fn from_entries(
        dim: usize,
        fingerprint: [u8; 32],
        entries: impl IntoIterator<Item = ((usize, usize), Vec<f32>)>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("embedding dimension must be positive".into()));
        }
        let mut keys = Vec::new();
        let mut data = Vec::new();
        let mut norms = Vec::new();
        let mut seen = HashSet::new();
        for ((s, f), emb) in entries {
            if emb.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: emb.len(),
                });
            }
            let key = (s as u32, f as u32);
            if !seen.insert(key) {
                return Err(Error::Validation(format!("duplicate index key {s}/{f}")));
            }
            let n = emb.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Validation(format!(
                    "embedding {s}/{f} has norm {n}, expected unit norm"
                )));
            }
            keys.push(key);
            data.extend_from_slice(&emb);
            norms.push(n);
        }
        Ok(EmbeddingIndex {
            dim,
            keys,
            data,
            norms,
            fingerprint,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn keys(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.keys.iter().map(|&(s, f)| (s as usize, f as usize))
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn check_network(&self, net: &Network) -> Result<()> {
        let fp = net.fingerprint();
        if fp != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                index: hex(&self.fingerprint[..8]),
                network: hex(&fp[..8]),
            });
        }
        Ok(())
    }

    /// Cosine of `query` against every entry, in index order.
    pub fn scores_with(&self, query: &[f64], exec: Exec) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: query.len(),
            });
        }
        // Quantize the query exactly like stored entries so a self-match
        // scores exactly one.
        let q: Vec<f64> = query.iter().map(|&v| f64::from(v as f32)).collect();
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if qn == 0.0 || !qn.is_finite() {
            return Err(Error::Degenerate("query embedding has zero norm".into()));
        }
        let mut scores = vec![0.0; self.len()];
        let dim = self.dim;
        exec.for_each_chunk_mut(&mut scores, SCORE_CHUNK, |ci, out| {
            let base = ci * SCORE_CHUNK;
            for (k, slot) in out.iter_mut().enumerate() {
                let i = base + k;
                let row = &self.data[i * dim..(i + 1) * dim];
                let dot: f64 = row.iter().zip(&q).map(|(&e, &qv)| f64::from(e) * qv).sum();
                *slot = (dot / (qn * self.norms[i])).clamp(-1.0, 1.0);
            }
        });
        Ok(scores)
    }

    /// Top-`k` entries by cosine; ties go to the lower `(submap, frame)`.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<Ranked>> {
        self.search_with(query, k, Exec::default())
    }

    pub fn search_with(&self, query: &[f64], k: usize, exec: Exec) -> Result<Vec<Ranked>> {
        if k == 0 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let scores = self.scores_with(query, exec)?;
        let cmp = |&a: &usize, &b: &usize| -> Ordering {
            scores[b]
                .total_cmp(&scores[a])
                .then(self.keys[a].cmp(&self.keys[b]))
        };
        let mut order: Vec<usize> = (0..self.len()).collect();
        let k = k.min(order.len());
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(order
            .into_iter()
            .map(|i| Ranked {
                submap_id: self.keys[i].0 as usize,
                frame_id: self.keys[i].1 as usize,
                cosine: scores[i],
                similarity_pct: similarity_pct(scores[i]),
            })
            .collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (8 + 4 * self.dim));
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        for (i, &(s, f)) in self.keys.iter().enumerate() {
            out.extend_from_slice(&s.to_le_bytes());
            out.extend_from_slice(&f.to_le_bytes());
            for v in self.embedding(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::parse(bytes.len(), "truncated index header"));
        }
        if &bytes[..4] != INDEX_MAGIC {
            return Err(Error::parse(0, "bad magic, expected \"LNEM\""));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != INDEX_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "embedding index",
                found: version,
                expected: INDEX_VERSION,
            });
        }
        let dim = u32_at(8) as usize;
        let count = u32_at(12) as usize;
        if dim == 0 {
            return Err(Error::parse(8, "embedding dimension is zero"));
        }
        let mut fingerprint = [0u8; 32];
        fingerprint.copy_from_slice(&bytes[16..48]);
        let record = 8 + 4 * dim;
        let body = bytes.len() - HEADER_LEN;
        if count.checked_mul(record) != Some(body) {
            let offset = HEADER_LEN + (body / record).min(count) * record;
            return Err(Error::parse(
                offset,
                format!("payload is {body} bytes, {count} records of dim {dim} do not fit"),
            ));
        }
        let entries = (0..count).map(|i| {
            let o = HEADER_LEN + i * record;
            let emb = bytes[o + 8..o + record]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ((u32_at(o) as usize, u32_at(o + 4) as usize), emb)
        });
        EmbeddingIndex::from_entries(dim, fingerprint, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        EmbeddingIndex::decode(&bytes)
    }
}

/// Run the network on a raw image and its keypoints.
pub fn embed(net: &Network, image: &Raster, keypoints: &KeypointSet) -> Result<ForwardOutput> {
    let (h, w) = net.config().input_size;
    let descriptor = frame_descriptor(keypoints)?;
    net.forward(&image.to_tensor(h, w), &descriptor)
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// One entry per frame in `(submap, frame)` order.
pub fn build_index(atlas: &MapAtlas, net: &Network) -> Result<EmbeddingIndex> {
    build_index_with(atlas, net, Exec::default())
}

pub fn build_index_with(atlas: &MapAtlas, net: &Network, exec: Exec) -> Result<EmbeddingIndex> {
    let frames: Vec<_> = atlas.frames().collect();
    let embedded = exec.map(&frames, |&(s, frame)| -> Result<((usize, usize), Vec<f32>)> {
        let fail = |reason: String| Error::Build {
            submap: s,
            frame: frame.id,
            reason,
        };
        let raster = frame.image.load().map_err(|e| fail(e.to_string()))?;
        let out = embed(net, &raster, &frame.keypoints).map_err(|e| fail(e.to_string()))?;
        Ok(((s, frame.id), to_f32(&out.embedding)))
    });
    let entries = embedded.into_iter().collect::<Result<Vec<_>>>()?;
    EmbeddingIndex::from_entries(net.config().embed_dim, net.fingerprint(), entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopDetection {
    pub matched: bool,
    pub submap_id: usize,
    pub frame_id: usize,
    pub similarity_pct: f64,
    pub cosine: f64,
    pub threshold: f64,
    /// Submap favoured by the classification head, for diagnostics.
    pub predicted_submap: usize,
}

/// An index bound to the network that built it.
#[derive(Debug, Clone, Copy)]
pub struct LoopDetector<'a> {
    index: &'a EmbeddingIndex,
    net: &'a Network,
    exec: Exec,
}

impl<'a> LoopDetector<'a> {
    pub fn new(index: &'a EmbeddingIndex, net: &'a Network) -> Result<Self> {
        index.check_network(net)?;
        Ok(LoopDetector {
            index,
            net,
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn index(&self) -> &EmbeddingIndex {
        self.index
    }

    pub fn network(&self) -> &Network {
        self.net
    }

    fn ranked(&self, image: &Raster, keypoints: &KeypointSet, k: usize) -> Result<(ForwardOutput, Vec<Ranked>)> {
        if self.index.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let out = embed(self.net, image, keypoints)?;
        let ranked = self.index.search_with(&out.embedding, k, self.exec)?;
        Ok((out, ranked))
    }

    pub fn query_top_k(&self, image: &Raster, keypoints: &KeypointSet, k: usize) -> Result<Vec<Ranked>> {
        Ok(self.ranked(image, keypoints, k)?.1)
    }

    pub fn detect(&self, image: &Raster, keypoints: &KeypointSet, threshold: f64) -> Result<LoopDetection> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Argument(format!("threshold {threshold} outside [0, 1]")));
        }
        let (out, ranked) = self.ranked(image, keypoints, 1)?;
        let best = ranked[0];
        Ok(LoopDetection {
            matched: best.cosine >= threshold,
            submap_id: best.submap_id,
            frame_id: best.frame_id,
            similarity_pct: best.similarity_pct,
            cosine: best.cosine,
            threshold,
            predicted_submap: out.predicted_class(),
        })
    }
}

pub fn query_top_k(
    index: &EmbeddingIndex,
    net: &Network,
    image: &Raster,
    keypoints: &KeypointSet,
    k: usize,
) -> Result<Vec<Ranked>> {
    LoopDetector::new(index, net)?.query_top_k(image, keypoints, k)
}

pub fn detect_loop(
    index: &EmbeddingIndex,
    net: &Network,
    image: &Raster,
    keypoints: &KeypointSet,
    threshold: f64,
) -> Result<LoopDetection> {
    LoopDetector::new(index, net)?.detect(image, keypoints, threshold)
}
