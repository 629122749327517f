use loopclose::eval::generate_synthetic_dataset;
use loopclose::net::{Network, NetworkConfig};
use loopclose::train::*;
use loopclose::{Error, MapAtlas};

fn small_atlas() -> MapAtlas {
    generate_synthetic_dataset(3, 5, 0.1, 11).unwrap().0
}

fn hyper(seed: u64) -> Hyperparams {
    Hyperparams {
        seed,
        epochs: 2,
        batch_size: 4,
        ..Default::default()
    }
}

#[test]
fn holdout_takes_the_tail_of_each_submap() {
    let split = holdout_split(&small_atlas(), 0.2);
    assert_eq!(split.val, vec![(0, 4), (1, 4), (2, 4)]);
    assert_eq!(split.train.len(), 12);
    let one = generate_synthetic_dataset(2, 1, 0.0, 0).unwrap().0;
    assert!(holdout_split(&one, 0.5).val.is_empty());
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let atlas = small_atlas();
    let net = Network::new(NetworkConfig::toy(3, 1)).unwrap();
    let mut t = Trainer::from_atlas(net.clone(), &atlas, Hyperparams { learning_rate: 0.0, ..hyper(1) }).unwrap();
    let a = t.train_epoch().unwrap();
    let b = t.train_epoch().unwrap();
    assert_eq!(t.network(), &net);
    assert_eq!((a.train_loss, a.val_loss), (b.train_loss, b.val_loss));
}

#[test]
fn training_is_reproducible_and_reports_are_bounded() {
    let atlas = small_atlas();
    let run = |augment| {
        let net = Network::new(NetworkConfig::toy(3, 2)).unwrap();
        let mut t = Trainer::from_atlas(net, &atlas, Hyperparams { augment, ..hyper(5) }).unwrap();
        let reports = t.fit().unwrap();
        (reports, t.into_network())
    };
    for augment in [false, true] {
        let (ra, na) = run(augment);
        let (rb, nb) = run(augment);
        assert_eq!(ra, rb);
        assert_eq!(na, nb);
        for r in &ra {
            assert!(r.train_loss >= 0.0 && r.val_loss >= 0.0);
            assert!((0.0..=1.0).contains(&r.train_acc) && (0.0..=1.0).contains(&r.val_acc));
        }
        assert!(na.params().iter().flat_map(|p| &p.data).all(|v| v.is_finite()));
    }
}

#[test]
fn divergence_rolls_back_to_last_good() {
    let atlas = small_atlas();
    let net = Network::new(NetworkConfig::toy(3, 3)).unwrap();
    let mut t = Trainer::from_atlas(net.clone(), &atlas, Hyperparams { learning_rate: 1e300, ..hyper(3) }).unwrap();
    assert!(matches!(t.train_epoch(), Err(Error::Numerical { .. })));
    assert_eq!(t.network(), &net);
}

#[test]
fn rejects_invalid_hyperparameters_and_labels() {
    let atlas = small_atlas();
    let net = Network::new(NetworkConfig::toy(3, 0)).unwrap();
    for bad in [
        Hyperparams { margin: 0.0, ..hyper(0) },
        Hyperparams { batch_size: 1, ..hyper(0) },
        Hyperparams { learning_rate: -1.0, ..hyper(0) },
        Hyperparams { momentum: 1.0, ..hyper(0) },
    ] {
        assert!(matches!(Trainer::from_atlas(net.clone(), &atlas, bad), Err(Error::Config(_))));
    }
    let too_small = Network::new(NetworkConfig::toy(2, 0)).unwrap();
    assert!(Trainer::from_atlas(too_small, &atlas, hyper(0)).is_err());
}

fn adapt_data(atlas: &MapAtlas, k: usize) -> AdaptData {
    let size = (4, 4);
    let old: Vec<_> = (0..2).flat_map(|s| (0..4).map(move |f| (s, f))).collect();
    let probe: Vec<_> = (0..2).map(|s| (s, 4)).collect();
    let support: Vec<_> = (0..k).map(|f| (2, f)).collect();
    AdaptData {
        support: prepare_samples(atlas, &support, size).unwrap(),
        replay: prepare_samples(atlas, &old, size).unwrap(),
        new_holdout: prepare_samples(atlas, &[(2, 4)], size).unwrap(),
        old_probe: prepare_samples(atlas, &probe, size).unwrap(),
    }
}

#[test]
fn few_shot_without_steps_only_grows_the_head() {
    let atlas = small_atlas();
    let net = Network::new(NetworkConfig::toy(2, 4)).unwrap();
    let (adapted, report) = few_shot_adapt(&net, &adapt_data(&atlas, 3), 0, &hyper(0)).unwrap();
    assert!(report.untrained);
    assert_eq!(report.shots, 3);
    assert_eq!(adapted.num_classes(), 3);
    for (a, b) in net.params().iter().zip(adapted.params()) {
        if Network::is_class_head(&a.name) {
            assert_eq!(a.data[..], b.data[..a.data.len()]);
            assert!(b.data[a.data.len()..].iter().all(|&v| v == 0.0));
        } else {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn few_shot_validates_inputs() {
    let atlas = small_atlas();
    let net = Network::new(NetworkConfig::toy(2, 4)).unwrap();
    let empty = AdaptData {
        support: vec![],
        ..adapt_data(&atlas, 1)
    };
    assert!(matches!(few_shot_adapt(&net, &empty, 5, &hyper(0)), Err(Error::Argument(_))));
    let mut wrong = adapt_data(&atlas, 2);
    wrong.support[0].label = 0;
    assert!(matches!(few_shot_adapt(&net, &wrong, 5, &hyper(0)), Err(Error::Argument(_))));
}

#[test]
fn few_shot_steps_train_the_new_class() {
    let atlas = small_atlas();
    let net = Network::new(NetworkConfig::toy(2, 4)).unwrap();
    let data = adapt_data(&atlas, 3);
    let (a, ra) = few_shot_adapt(&net, &data, 5, &hyper(9)).unwrap();
    let (b, rb) = few_shot_adapt(&net, &data, 5, &hyper(9)).unwrap();
    assert_eq!((a, ra.clone()), (b, rb));
    assert!(!ra.untrained);
    assert_eq!(ra.steps, 5);
}
