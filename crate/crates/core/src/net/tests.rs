use super::*;
use crate::train::loss::PairLabel;

fn unit_descriptor(dim: usize, seed: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim)
        .map(|i| (((i + 1) * (seed + 3) * 7919) % 97) as f64 - 48.0)
        .collect();
    let n = layers::norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn image(h: usize, w: usize, seed: usize) -> ImageTensor {
    let mut t = ImageTensor::zeros(h, w);
    for (i, v) in t.data.iter_mut().enumerate() {
        *v = (((i + 5) * (seed + 11) * 131) % 255) as f64 / 255.0;
    }
    t
}

fn batch(cfg: &NetworkConfig, n: usize) -> Batch {
    let (h, w) = cfg.input_size;
    let items: Vec<BatchItem> = (0..n)
        .map(|i| BatchItem {
            image: image(h, w, i),
            descriptor: unit_descriptor(cfg.descriptor_dim, i),
            label: i % cfg.num_classes,
        })
        .collect();
    let pairs = vec![
        Pair { i: 0, j: 1, label: PairLabel::Dissimilar },
        Pair { i: 0, j: 2, label: PairLabel::Similar },
        Pair { i: 1, j: 3, label: PairLabel::Similar },
    ];
    Batch { items, pairs }
}

#[test]
fn init_is_seeded() {
    let a = Network::new(NetworkConfig::desk(4, 7)).unwrap();
    let b = Network::new(NetworkConfig::desk(4, 7)).unwrap();
    let c = Network::new(NetworkConfig::desk(4, 8)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.params().iter().flat_map(|p| &p.data).all(|&v| v == v as f32 as f64));
}

#[test]
fn rejects_bad_configs() {
    assert!(matches!(Network::new(NetworkConfig::desk(0, 0)), Err(Error::Config(_))));
    let mut cfg = NetworkConfig::desk(3, 0);
    cfg.alpha = 1.5;
    assert!(Network::new(cfg).is_err());
    let mut cfg = NetworkConfig::desk(3, 0);
    cfg.embed_dim = 64;
    assert!(Network::new(cfg).is_err());
}

#[test]
fn fusion_examples() {
    let e1: Vec<f64> = (0..4).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
    let e2: Vec<f64> = (0..4).map(|i| if i == 1 { 1.0 } else { 0.0 }).collect();
    let r = vec![0.0, 3.0, 0.0, 0.0];
    assert_eq!(fuse(&e1, &r, 1.0).unwrap(), e1);
    assert_eq!(fuse(&e1, &r, 0.0).unwrap(), e2);
    let f = fuse(&e1, &e2, 0.7).unwrap();
    let n = (0.49f64 + 0.09).sqrt();
    assert!((f[0] - 0.7 / n).abs() < 1e-12 && (f[1] - 0.3 / n).abs() < 1e-12);
    assert!((f[0] - 0.9191).abs() < 1e-4 && (f[1] - 0.3939).abs() < 1e-4);
    assert!((layers::norm(&f) - 1.0).abs() < 1e-12);

    let neg: Vec<f64> = e1.iter().map(|v| -v).collect();
    assert!(matches!(fuse(&e1, &neg, 0.5), Err(Error::Degenerate(_))));
    assert!(matches!(fuse(&e1, &[0.0; 4], 0.5), Err(Error::Degenerate(_))));
}

#[test]
fn forward_outputs_are_normalized_and_deterministic() {
    let cfg = NetworkConfig::desk(5, 1);
    let net = Network::new(cfg.clone()).unwrap();
    let img = image(32, 32, 2);
    let d = unit_descriptor(128, 2);
    let a = net.forward(&img, &d).unwrap();
    let b = net.forward(&img, &d).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.class_probs.len(), 5);
    assert!((a.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(a.class_probs.iter().all(|&p| p >= 0.0));
    assert!((layers::norm(&a.embedding) - 1.0).abs() < 1e-9);
    assert!((layers::norm(&a.fused) - 1.0).abs() < 1e-9);
}

#[test]
fn forward_rejects_bad_inputs() {
    let net = Network::new(NetworkConfig::toy(2, 0)).unwrap();
    let d = unit_descriptor(128, 0);
    assert!(matches!(net.forward(&image(5, 4, 0), &d), Err(Error::Shape(_))));
    let scaled: Vec<f64> = d.iter().map(|v| v * 2.0).collect();
    assert!(net.forward(&image(4, 4, 0), &scaled).is_err());
}

#[test]
fn alpha_one_ignores_the_image() {
    let mut cfg = NetworkConfig::desk(3, 4);
    cfg.alpha = 1.0;
    let net = Network::new(cfg).unwrap();
    let d = unit_descriptor(128, 5);
    let a = net.forward(&image(32, 32, 1), &d).unwrap();
    let b = net.forward(&image(32, 32, 9), &d).unwrap();
    assert_eq!(a.class_probs, b.class_probs);
    assert_eq!(a.embedding, b.embedding);
}

#[test]
fn zero_weights_give_zero_loss_and_gradients() {
    let cfg = NetworkConfig::toy(2, 3);
    let net = Network::new(cfg.clone()).unwrap();
    let lc = LossConfig {
        lambda_cls: 0.0,
        lambda_sim: 0.0,
        margin: 1.0,
    };
    let (l, g) = net.loss_and_gradients(&batch(&cfg, 4), &lc).unwrap();
    assert_eq!(l.total, 0.0);
    assert_eq!(g.max_abs(), 0.0);
}

#[test]
fn sequential_and_parallel_agree() {
    let cfg = NetworkConfig::toy(3, 5);
    let net = Network::new(cfg.clone()).unwrap();
    let b = batch(&cfg, 6);
    let s = net.loss_and_gradients_with(&b, &LossConfig::default(), Exec::Sequential).unwrap();
    let p = net.loss_and_gradients_with(&b, &LossConfig::default(), Exec::Parallel).unwrap();
    assert_eq!(s, p);
}

#[test]
fn toy_gradients_match_central_differences() {
    let cfg = NetworkConfig::toy(3, 11);
    let net = Network::new(cfg.clone()).unwrap();
    let r = gradient_check(&net, &batch(&cfg, 4), &LossConfig::default(), &GradCheckOptions::default()).unwrap();
    assert_eq!(r.checked, net.num_parameters());
    assert!(r.max_relative_error < 1e-7, "{r:?}");
}

#[test]
fn gradient_check_rejects_bad_step() {
    let cfg = NetworkConfig::toy(2, 0);
    let net = Network::new(cfg.clone()).unwrap();
    let opts = GradCheckOptions {
        step: 0.0,
        max_per_tensor: None,
    };
    assert!(matches!(
        gradient_check(&net, &batch(&cfg, 2), &LossConfig::default(), &opts),
        Err(Error::Argument(_))
    ));
}

#[test]
fn checkpoint_round_trip() {
    let net = Network::new(NetworkConfig::desk(6, 2)).unwrap();
    let bytes = encode_checkpoint(&net);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, net);
    assert_eq!(encode_checkpoint(&back), bytes);
    assert_eq!(back.fingerprint(), net.fingerprint());

    let mut bad = bytes.clone();
    bad[0] = b'Z';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Parse { offset: 0, .. })));
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Parse { .. })));
}

#[test]
fn extend_classes_preserves_old_outputs_ordering() {
    let mut net = Network::new(NetworkConfig::toy(2, 1)).unwrap();
    let d = unit_descriptor(128, 1);
    let before = net.forward(&image(4, 4, 1), &d).unwrap();
    net.extend_classes(1);
    let after = net.forward(&image(4, 4, 1), &d).unwrap();
    assert_eq!(after.class_probs.len(), 3);
    assert_eq!(after.embedding, before.embedding);
    let ratio_before = before.class_probs[0] / before.class_probs[1];
    let ratio_after = after.class_probs[0] / after.class_probs[1];
    assert!((ratio_before - ratio_after).abs() < 1e-12);
}

