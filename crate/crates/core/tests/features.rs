mod common;

use common::{arb_set, nms_oracle, tagged, within};
use loopclose::features::*;
use loopclose::Error;
use proptest::prelude::*;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn nms_is_sound(set in arb_set(4, 40), w in 0u32..8) {
        let input = tagged(&set);
        let out = nms_keypoints(&input, w);
        let wf = w as f32;
        for (i, a) in out.keypoints.iter().enumerate() {
            for b in &out.keypoints[i + 1..] {
                prop_assert!(!within(a, b, wf));
            }
        }
        for pair in out.keypoints.windows(2) {
            prop_assert!(pair[0].score >= pair[1].score);
        }
        let kept: Vec<usize> = out.keypoints.iter().map(|k| k.descriptor[0] as usize).collect();
        for (i, k) in input.keypoints.iter().enumerate() {
            if !kept.contains(&i) {
                prop_assert!(out.keypoints.iter().any(|o| within(o, k, wf) && o.score >= k.score));
            }
        }
    }

    #[test]
    fn nms_matches_reference_and_is_deterministic(set in arb_set(4, 40), w in 0u32..8) {
        let input = tagged(&set);
        let a = nms_keypoints(&input, w);
        prop_assert_eq!(&a, &nms_keypoints(&input, w));
        let got: Vec<usize> = a.keypoints.iter().map(|k| k.descriptor[0] as usize).collect();
        prop_assert_eq!(got, nms_oracle(&input, w as f32));
    }

    #[test]
    fn aggregation_is_permutation_invariant(set in arb_set(16, 30), seed in any::<u64>()) {
        let (norm, _) = l2_normalize(&set);
        prop_assume!(!norm.is_empty());
        let Ok(d) = aggregate_image_descriptor(&norm) else { return Ok(()) };
        let mut shuffled = norm.clone();
        let n = shuffled.keypoints.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.keypoints.swap(i, (s >> 33) as usize % (i + 1));
        }
        let e = aggregate_image_descriptor(&shuffled).unwrap();
        prop_assert!(dist(&d, &e) < 1e-9);
        let n2 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((n2 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn aggregation_is_scale_invariant(set in arb_set(16, 30), exp in -6i32..7, c in 0.01f32..50.0) {
        let (norm, _) = l2_normalize(&set);
        let Ok(d) = aggregate_image_descriptor(&norm) else { return Ok(()) };
        let scaled = |f: f32| {
            let mut s = norm.clone();
            s.keypoints.iter_mut().for_each(|k| k.score *= f);
            aggregate_image_descriptor(&s).unwrap()
        };
        // Power-of-two factors scale f32 scores exactly.
        prop_assert!(dist(&d, &scaled(2f32.powi(exp))) < 1e-9);
        // Other factors perturb each f32 score by up to half an ulp.
        prop_assert!(dist(&d, &scaled(c)) < 1e-6);
    }

    #[test]
    fn normalization_is_idempotent(set in arb_set(16, 30)) {
        let (once, r1) = l2_normalize(&set);
        let (twice, r2) = l2_normalize(&once);
        prop_assert_eq!(r2.drop_count, 0);
        prop_assert_eq!(once.len() + r1.drop_count, set.len());
        for (a, b) in once.keypoints.iter().zip(&twice.keypoints) {
            prop_assert!((a.descriptor_norm() - 1.0).abs() < 1e-6);
            for (x, y) in a.descriptor.iter().zip(&b.descriptor) {
                prop_assert!((f64::from(*x) - f64::from(*y)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn keypoint_files_round_trip(set in arb_set(8, 20)) {
        let bytes = encode_keypoint_file(&set);
        prop_assert_eq!(parse_keypoint_file(&bytes).unwrap(), set);
    }
}

/// Independent little-endian LNKP writer.
fn scripted_lnkp(records: &[(f32, f32, f32, [f32; 4])]) -> Vec<u8> {
    let mut b = b"LNKP".to_vec();
    for v in [1u32, records.len() as u32, 4] {
        b.extend(v.to_le_bytes());
    }
    for (x, y, s, d) in records {
        for v in [*x, *y, *s].iter().chain(d) {
            b.extend(v.to_le_bytes());
        }
    }
    b
}

#[test]
fn parses_independently_encoded_file() {
    let recs = [
        (1.5, 2.25, 0.75, [0.5, -0.5, 0.25, 0.0]),
        (10.0, 0.0, 0.125, [1.0, 2.0, 3.0, -4.0]),
    ];
    let bytes = scripted_lnkp(&recs);
    let set = parse_keypoint_file(&bytes).unwrap();
    assert_eq!(set.len(), 2);
    for (k, (x, y, s, d)) in set.keypoints.iter().zip(&recs) {
        assert_eq!((k.x, k.y, k.score), (*x, *y, *s));
        assert_eq!(k.descriptor, d.to_vec());
    }
    assert_eq!(encode_keypoint_file(&set), bytes);
    assert!(parse_keypoint_file(&scripted_lnkp(&[])).unwrap().is_empty());
}

#[test]
fn rejects_bad_files() {
    let mut bytes = scripted_lnkp(&[(0.0, 0.0, 1.0, [1.0, 0.0, 0.0, 0.0])]);
    assert!(matches!(
        parse_keypoint_file(&bytes[..bytes.len() - 2]),
        Err(Error::Parse { .. })
    ));
    assert!(matches!(
        parse_keypoint_file_with_dim(&bytes, 128),
        Err(Error::Parse { offset: 12, .. })
    ));
    bytes[..4].copy_from_slice(b"XXXX");
    assert!(matches!(parse_keypoint_file(&bytes), Err(Error::Parse { offset: 0, .. })));
}

#[test]
fn nms_chain_example() {
    let kp = |x: f32, score: f32| Keypoint {
        x,
        y: 5.0,
        score,
        descriptor: vec![1.0],
    };
    let set = KeypointSet::from_keypoints(vec![kp(4.0, 0.8), kp(8.0, 0.7), kp(0.0, 0.9)], 1).unwrap();
    let xs: Vec<f32> = nms_keypoints(&set, 5).keypoints.iter().map(|k| k.x).collect();
    assert_eq!(xs, vec![0.0, 8.0]);
}
