#![allow(dead_code)]

use std::cmp::Ordering;

use loopclose::features::{Keypoint, KeypointSet};
use loopclose::query::EmbeddingIndex;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Index of `n` random unit embeddings keyed `(i / 100, i % 100)`.
pub fn random_index(n: usize, dim: usize, seed: u64) -> EmbeddingIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..n).map(|i| {
        let e: Vec<f32> = random_unit(&mut rng, dim).into_iter().map(|v| v as f32).collect();
        ((i / 100, i % 100), e)
    });
    EmbeddingIndex::from_entries(dim, [0; 32], entries.collect::<Vec<_>>()).unwrap()
}

/// Exhaustive ranking: score every entry, sort everything, keep `k`.
pub fn brute_force(index: &EmbeddingIndex, query: &[f64], k: usize) -> Vec<(usize, usize, f64)> {
    let q: Vec<f64> = query.iter().map(|&v| f64::from(v as f32)).collect();
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut all: Vec<(usize, usize, f64)> = index
        .keys()
        .enumerate()
        .map(|(i, (s, f))| {
            let e = index.embedding(i);
            let dot: f64 = e.iter().zip(&q).map(|(&a, &b)| f64::from(a) * b).sum();
            let en = e.iter().map(|&a| f64::from(a) * f64::from(a)).sum::<f64>().sqrt();
            (s, f, (dot / (qn * en)).clamp(-1.0, 1.0))
        })
        .collect();
    all.sort_by(|a, b| match b.2.partial_cmp(&a.2).unwrap() {
        Ordering::Equal => (a.0, a.1).cmp(&(b.0, b.1)),
        o => o,
    });
    all.truncate(k);
    all
}

/// Scores drawn from a small grid so ties are common.
pub fn arb_keypoint(dim: usize) -> impl Strategy<Value = (f32, f32, f32, Vec<f32>)> {
    (
        0u8..40,
        0u8..40,
        prop_oneof![(0u8..5).prop_map(|s| f32::from(s) / 4.0), 0.0f32..1.0],
        prop::collection::vec(-1.0f32..1.0, dim),
    )
        .prop_map(|(x, y, s, d)| (f32::from(x), f32::from(y), s, d))
}

pub fn arb_set(dim: usize, max: usize) -> impl Strategy<Value = KeypointSet> {
    prop::collection::vec(arb_keypoint(dim), 0..max).prop_map(move |raw| {
        let kps = raw
            .into_iter()
            .map(|(x, y, score, descriptor)| Keypoint {
                x,
                y,
                score,
                descriptor,
            })
            .collect();
        KeypointSet::from_keypoints(kps, dim).unwrap()
    })
}

/// Tag each keypoint with its input position in the first descriptor slot.
pub fn tagged(set: &KeypointSet) -> KeypointSet {
    let mut out = set.clone();
    for (i, k) in out.keypoints.iter_mut().enumerate() {
        k.descriptor[0] = i as f32;
    }
    out
}

pub fn within(a: &Keypoint, b: &Keypoint, w: f32) -> bool {
    (a.x - b.x).abs() <= w && (a.y - b.y).abs() <= w
}

/// Reference NMS: repeatedly take the best remaining candidate and strike
/// out everything in its window.
pub fn nms_oracle(set: &KeypointSet, w: f32) -> Vec<usize> {
    let better = |a: usize, b: usize| {
        let (ka, kb) = (&set.keypoints[a], &set.keypoints[b]);
        (ka.score > kb.score)
            || (ka.score == kb.score
                && (ka.x < kb.x || (ka.x == kb.x && (ka.y < kb.y || (ka.y == kb.y && a < b)))))
    };
    let mut alive: Vec<usize> = (0..set.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &c in &alive {
            if better(c, best) {
                best = c;
            }
        }
        kept.push(best);
        alive.retain(|&c| !within(&set.keypoints[c], &set.keypoints[best], w));
    }
    kept
}
