mod common;

use std::sync::OnceLock;

use loopclose::eval::generate_synthetic_dataset;
use loopclose::query::*;
use loopclose::{Error, Exec, MapAtlas, Network, NetworkConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{brute_force, random_index, random_unit};

#[test]
fn top_k_matches_exhaustive_oracle() {
    for (n, seed) in [(10, 1), (1000, 2)] {
        let index = random_index(n, 128, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for _ in 0..100 {
            let q = random_unit(&mut rng, 128);
            for k in [1, 5, n + 3] {
                let expected = brute_force(&index, &q, k);
                for exec in [Exec::Sequential, Exec::Parallel] {
                    let got: Vec<_> = index
                        .search_with(&q, k, exec)
                        .unwrap()
                        .iter()
                        .map(|r| (r.submap_id, r.frame_id, r.cosine))
                        .collect();
                    assert_eq!(got, expected);
                }
            }
        }
    }
}

#[test]
fn duplicated_embeddings_tie_break_on_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let e: Vec<f32> = random_unit(&mut rng, 8).into_iter().map(|v| v as f32).collect();
    let entries: Vec<_> = [(3, 1), (0, 4), (3, 0), (1, 9)].map(|k| (k, e.clone())).into();
    let index = EmbeddingIndex::from_entries(8, [0; 32], entries).unwrap();
    let q: Vec<f64> = e.iter().map(|&v| f64::from(v)).collect();
    let keys: Vec<_> = index.search(&q, 3).unwrap().iter().map(|r| (r.submap_id, r.frame_id)).collect();
    assert_eq!(keys, vec![(0, 4), (1, 9), (3, 0)]);
}

fn trained_free_setup() -> (MapAtlas, Network) {
    let (atlas, _) = generate_synthetic_dataset(3, 2, 0.1, 7).unwrap();
    (atlas, Network::new(NetworkConfig::desk(3, 7)).unwrap())
}

#[test]
fn index_build_examples() {
    let (atlas, net) = trained_free_setup();
    let index = build_index(&atlas, &net).unwrap();
    assert_eq!(index.len(), 6);
    let keys: Vec<_> = index.keys().collect();
    assert_eq!(keys, vec![(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)]);
    assert_eq!(build_index_with(&atlas, &net, Exec::Sequential).unwrap(), index);
    assert!(build_index(&MapAtlas::new(128), &net).unwrap().is_empty());
}

#[test]
fn missing_image_names_the_frame() {
    let (mut atlas, net) = trained_free_setup();
    atlas.submaps[1].frames[1].image = loopclose::ImageRef::Path("/nonexistent/x.png".into());
    match build_index(&atlas, &net).unwrap_err() {
        Error::Build { submap: 1, frame: 1, .. } => {}
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn self_match_and_detection() {
    let (atlas, net) = trained_free_setup();
    let index = build_index(&atlas, &net).unwrap();
    let frame = atlas.frame(2, 1).unwrap();
    let image = frame.image.load().unwrap();

    let ranked = query_top_k(&index, &net, &image, &frame.keypoints, 10).unwrap();
    assert_eq!(ranked.len(), 6);
    assert_eq!((ranked[0].submap_id, ranked[0].frame_id), (2, 1));
    assert_eq!(ranked[0].similarity_pct, 100.0);
    assert_eq!(ranked[0].to_string(), "[002/001]  100.00%");
    assert!(ranked.windows(2).all(|w| w[0].cosine >= w[1].cosine));
    assert!(ranked.iter().all(|r| (0.0..=100.0).contains(&r.similarity_pct)));

    let d = detect_loop(&index, &net, &image, &frame.keypoints, 0.9).unwrap();
    assert!(d.matched);
    assert_eq!((d.submap_id, d.frame_id, d.similarity_pct), (2, 1, 100.0));

    let other = atlas.frame(0, 0).unwrap();
    let mut shifted = other.keypoints.clone();
    shifted.keypoints.truncate(3);
    let d = detect_loop(&index, &net, &other.image.load().unwrap(), &shifted, 1.0).unwrap();
    assert!(!d.matched);
    let d = detect_loop(&index, &net, &other.image.load().unwrap(), &shifted, 0.0).unwrap();
    assert!(d.matched);
    assert!(detect_loop(&index, &net, &image, &frame.keypoints, 1.5).is_err());
}

#[test]
fn index_is_bound_to_its_network() {
    let (atlas, net) = trained_free_setup();
    let index = build_index(&atlas, &net).unwrap();
    let other = Network::new(NetworkConfig::desk(3, 8)).unwrap();
    assert!(matches!(LoopDetector::new(&index, &other), Err(Error::FingerprintMismatch { .. })));
    let frame = atlas.frame(0, 0).unwrap();
    let err = query_top_k(&index, &other, &frame.image.load().unwrap(), &frame.keypoints, 1);
    assert!(matches!(err, Err(Error::FingerprintMismatch { .. })));
}

#[test]
fn empty_index_is_rejected() {
    let (atlas, net) = trained_free_setup();
    let index = build_index(&MapAtlas::new(128), &net).unwrap();
    let frame = atlas.frame(0, 0).unwrap();
    let err = query_top_k(&index, &net, &frame.image.load().unwrap(), &frame.keypoints, 1);
    assert!(matches!(err, Err(Error::EmptyIndex)));
}

fn toy_setup() -> &'static (MapAtlas, Network, EmbeddingIndex) {
    static SETUP: OnceLock<(MapAtlas, Network, EmbeddingIndex)> = OnceLock::new();
    SETUP.get_or_init(|| {
        let (atlas, _) = generate_synthetic_dataset(4, 3, 0.2, 3).unwrap();
        let net = Network::new(NetworkConfig::toy(4, 3)).unwrap();
        let index = build_index(&atlas, &net).unwrap();
        (atlas, net, index)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_the_threshold_never_creates_a_match(seed in 0u64..1000, t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let (_, net, index) = toy_setup();
        let (_, queries) = generate_synthetic_dataset(4, 3, 0.5, seed).unwrap();
        let q = &queries[(seed % queries.len() as u64) as usize];
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let detector = LoopDetector::new(index, net).unwrap();
        let at_lo = detector.detect(&q.image, &q.keypoints, lo).unwrap();
        let at_hi = detector.detect(&q.image, &q.keypoints, hi).unwrap();
        prop_assert!(at_lo.matched || !at_hi.matched);
        prop_assert_eq!((at_lo.submap_id, at_lo.frame_id), (at_hi.submap_id, at_hi.frame_id));
        prop_assert!((0.0..=100.0).contains(&at_lo.similarity_pct));
        prop_assert_eq!(at_lo.similarity_pct, similarity_pct(at_lo.cosine));
    }
}
