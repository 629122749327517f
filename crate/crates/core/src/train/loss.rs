//! Submap cross-entropy and pairwise contrastive loss.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LOG_CLAMP: f64 = 1e-12;

/// `y` of the contrastive loss: 0 for a same-submap pair, 1 otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairLabel {
    Similar,
    Dissimilar,
}

impl PairLabel {
    pub fn y(self) -> f64 {
        match self {
            PairLabel::Similar => 0.0,
            PairLabel::Dissimilar => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub label: PairLabel,
}

/// `−(1/N) Σᵢ Σⱼ yᵢⱼ log(max(ŷᵢⱼ, 1e-12))`
pub fn cross_entropy_loss(probs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::Shape(format!(
            "{} prediction rows vs {} target rows",
            probs.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (r, (p, y)) in probs.iter().zip(targets).enumerate() {
        if p.len() != y.len() {
            return Err(Error::Shape(format!(
                "row {r}: {} probabilities vs {} targets",
                p.len(),
                y.len()
            )));
        }
        total -= p
            .iter()
            .zip(y)
            .map(|(&pj, &yj)| yj * pj.max(LOG_CLAMP).ln())
            .sum::<f64>();
    }
    Ok(total / probs.len() as f64)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `(1−y)·½d² + y·½·max(0, m−d)²` with `d = ‖xᵢ − xⱼ‖₂`.
pub fn contrastive_loss(xi: &[f64], xj: &[f64], label: PairLabel, margin: f64) -> f64 {
    let d = distance(xi, xj);
    match label {
        PairLabel::Similar => 0.5 * d * d,
        PairLabel::Dissimilar => {
            let gap = (margin - d).max(0.0);
            0.5 * gap * gap
        }
    }
}

/// Gradient of [`contrastive_loss`] with respect to `xi` (the gradient with
/// respect to `xj` is its negation).
pub fn contrastive_grad(xi: &[f64], xj: &[f64], label: PairLabel, margin: f64) -> Vec<f64> {
    let diff: Vec<f64> = xi.iter().zip(xj).map(|(a, b)| a - b).collect();
    match label {
        PairLabel::Similar => diff,
        PairLabel::Dissimilar => {
            let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            if d >= margin || d == 0.0 {
                vec![0.0; diff.len()]
            } else {
                let s = -(margin - d) / d;
                diff.into_iter().map(|v| s * v).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub pairs: Vec<Pair>,
    pub missing_positives: bool,
    pub missing_negatives: bool,
}

/// For every item draw one same-label partner and one different-label
/// partner when such partners exist.
pub fn sample_pairs<R: Rng + ?Sized>(labels: &[usize], rng: &mut R) -> PairSample {
    let mut pairs = Vec::with_capacity(labels.len() * 2);
    let mut any_pos = false;
    let mut any_neg = false;
    let mut same = Vec::new();
    let mut other = Vec::new();
    for (i, &li) in labels.iter().enumerate() {
        same.clear();
        other.clear();
        for (j, &lj) in labels.iter().enumerate() {
            if j == i {
                continue;
            }
            if lj == li {
                same.push(j);
            } else {
                other.push(j);
            }
        }
        if let Some(&j) = same.choose(rng) {
            any_pos = true;
            pairs.push(Pair {
                i,
                j,
                label: PairLabel::Similar,
            });
        }
        if let Some(&j) = other.choose(rng) {
            any_neg = true;
            pairs.push(Pair {
                i,
                j,
                label: PairLabel::Dissimilar,
            });
        }
    }
    PairSample {
        pairs,
        missing_positives: !any_pos,
        missing_negatives: !any_neg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_hot(c: usize, k: usize) -> Vec<f64> {
        (0..c).map(|j| if j == k { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn cross_entropy_examples() {
        let perfect = cross_entropy_loss(&[one_hot(3, 1)], &[one_hot(3, 1)]).unwrap();
        assert_eq!(perfect, 0.0);
        let uniform = cross_entropy_loss(&[vec![0.25; 4]], &[one_hot(4, 2)]).unwrap();
        assert!((uniform - 4f64.ln()).abs() < 1e-12);
        let mixed = cross_entropy_loss(
            &[vec![0.5, 0.5], vec![0.2, 0.8]],
            &[one_hot(2, 0), one_hot(2, 1)],
        )
        .unwrap();
        assert!((mixed - (-(0.5f64.ln()) - 0.8f64.ln()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_and_checks_shapes() {
        let wrong = cross_entropy_loss(&[vec![1.0, 0.0]], &[one_hot(2, 1)]).unwrap();
        assert!((wrong - (-(1e-12f64).ln())).abs() < 1e-9);
        assert!(cross_entropy_loss(&[vec![1.0]], &[one_hot(2, 1)]).is_err());
        assert!(cross_entropy_loss(&[vec![1.0]], &[]).is_err());
    }

    #[test]
    fn contrastive_examples() {
        let a = [0.3, -0.2, 0.5];
        assert_eq!(contrastive_loss(&a, &a, PairLabel::Similar, 1.0), 0.0);
        assert_eq!(
            contrastive_loss(&[0.0, 0.0], &[1.5, 0.0], PairLabel::Dissimilar, 1.0),
            0.0
        );
        let l = contrastive_loss(&[0.0, 0.0], &[0.0, 0.4], PairLabel::Dissimilar, 1.0);
        assert!((l - 0.18).abs() < 1e-12);
    }

    #[test]
    fn contrastive_grad_matches_differences() {
        let xi = [0.1, 0.4, -0.3];
        let xj = [0.2, 0.1, -0.1];
        for label in [PairLabel::Similar, PairLabel::Dissimilar] {
            let g = contrastive_grad(&xi, &xj, label, 1.0);
            for k in 0..3 {
                let h = 1e-6;
                let mut p = xi;
                p[k] += h;
                let mut m = xi;
                m[k] -= h;
                let num = (contrastive_loss(&p, &xj, label, 1.0)
                    - contrastive_loss(&m, &xj, label, 1.0))
                    / (2.0 * h);
                assert!((num - g[k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pair_sampling_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_pairs(&[0, 0, 1, 1], &mut rng);
        let pos = s.pairs.iter().filter(|p| p.label == PairLabel::Similar).count();
        let neg = s.pairs.len() - pos;
        assert!(pos >= 2 && neg >= 2);
        assert!(s.pairs.iter().all(|p| p.i != p.j));

        let s = sample_pairs(&[4, 4, 4, 4], &mut rng);
        assert!(s.missing_negatives && !s.missing_positives);
        assert!(s.pairs.iter().all(|p| p.label == PairLabel::Similar));

        let a = sample_pairs(&[0, 1, 2, 0, 1, 2], &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_pairs(&[0, 1, 2, 0, 1, 2], &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
