//! Multitask training: SGD with momentum over the combined submap
//! cross-entropy and contrastive objective, plus few-shot head growth for
//! newly visited submaps.

pub mod augment;
pub mod loss;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, maybe_augment};
pub use loss::{contrastive_loss, cross_entropy_loss, sample_pairs, Pair, PairLabel, PairSample};

use crate::atlas::MapAtlas;
use crate::error::{Error, Result};
use crate::features::frame_descriptor;
use crate::net::{Batch, BatchItem, Gradients, LossBreakdown, LossConfig, Network};
use crate::par::Exec;
use crate::raster::ImageTensor;

/// Seed offset for the fixed pairing used when scoring whole splits.
const EVAL_PAIR_SEED: u64 = 0x5eed_e7a1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub lambda_cls: f64,
    pub lambda_sim: f64,
    pub augment: bool,
    pub seed: u64,
    /// Fraction of each submap's frames (taken from the end) held out.
    pub val_split: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 50,
            batch_size: 16,
            margin: 1.0,
            lambda_cls: 1.0,
            lambda_sim: 1.0,
            augment: false,
            seed: 0,
            val_split: 0.2,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if self.batch_size == 0 || (self.lambda_sim > 0.0 && self.batch_size < 2) {
            return Err(Error::Config(
                "batch size must be at least 2 when the contrastive term is active".into(),
            ));
        }
        if self.lambda_cls < 0.0 || self.lambda_sim < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.val_split) {
            return Err(Error::Config(format!("val_split {} outside [0, 1)", self.val_split)));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_cls: self.lambda_cls,
            lambda_sim: self.lambda_sim,
            margin: self.margin,
        }
    }
}

/// `(submap, frame)` keys of the train and validation frames.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<(usize, usize)>,
    pub val: Vec<(usize, usize)>,
}

/// Hold out the last `fraction` of each submap's frames, always keeping at
/// least one training frame per submap.
pub fn holdout_split(atlas: &MapAtlas, fraction: f64) -> Split {
    let mut split = Split::default();
    for s in &atlas.submaps {
        let n = s.frames.len();
        let n_val = ((n as f64 * fraction).floor() as usize).min(n.saturating_sub(1));
        for f in &s.frames {
            if f.id < n - n_val {
                split.train.push((s.id, f.id));
            } else {
                split.val.push((s.id, f.id));
            }
        }
    }
    split
}

/// A frame decoded into network inputs.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: ImageTensor,
    pub descriptor: Vec<f64>,
    pub label: usize,
    pub key: (usize, usize),
}

impl Sample {
    fn item(&self) -> BatchItem {
        BatchItem {
            image: self.image.clone(),
            descriptor: self.descriptor.clone(),
            label: self.label,
        }
    }
}

/// Load pixels and aggregate keypoints for the given frames. The label is
/// the submap id.
pub fn prepare_samples(
    atlas: &MapAtlas,
    keys: &[(usize, usize)],
    input_size: (usize, usize),
) -> Result<Vec<Sample>> {
    let out = Exec::default().map(keys, |&(s, f)| -> Result<Sample> {
        let frame = atlas.frame(s, f)?;
        let raster = frame.image.load().map_err(|e| Error::Build {
            submap: s,
            frame: f,
            reason: e.to_string(),
        })?;
        let descriptor = frame_descriptor(&frame.keypoints).map_err(|e| Error::Build {
            submap: s,
            frame: f,
            reason: e.to_string(),
        })?;
        Ok(Sample {
            image: raster.to_tensor(input_size.0, input_size.1),
            descriptor,
            label: s,
            key: (s, f),
        })
    });
    out.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Loss and classification accuracy over a whole sample set, using a fixed
/// pairing so repeated calls on the same network agree exactly.
pub fn evaluate_samples(net: &Network, samples: &[Sample], cfg: &LossConfig, seed: u64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_PAIR_SEED);
    let batch = Batch {
        items: samples.iter().map(Sample::item).collect(),
        pairs: sample_pairs(&labels, &mut rng).pairs,
    };
    let LossBreakdown { total, correct, .. } = net.loss(&batch, cfg)?;
    Ok((total, correct as f64 / samples.len() as f64))
}

/// Classification accuracy only.
pub fn classification_accuracy(net: &Network, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let hits = Exec::default().map(samples, |s| -> Result<bool> {
        Ok(net.forward(&s.image, &s.descriptor)?.predicted_class() == s.label)
    });
    let mut correct = 0;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// SGD with momentum: `v ← μv + g`, `θ ← θ − ηv`.
#[derive(Debug, Clone)]
struct Momentum {
    velocity: Vec<Vec<f64>>,
}

impl Momentum {
    fn new(net: &Network) -> Self {
        Momentum {
            velocity: Gradients::zeros_like(net).0,
        }
    }

    fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64, mu: f64, mask: impl Fn(&str) -> bool) -> Result<()> {
        for (v, g) in self.velocity.iter_mut().zip(&grads.0) {
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = mu * *vi + gi;
            }
        }
        if lr == 0.0 {
            return Ok(());
        }
        let updates: Vec<Vec<f64>> = self
            .velocity
            .iter()
            .map(|v| v.iter().map(|x| lr * x).collect())
            .collect();
        net.apply_update(&updates, mask)
    }
}

/// Owns the network and optimizer state across epochs.
pub struct Trainer {
    net: Network,
    last_good: Network,
    optimizer: Momentum,
    hyper: Hyperparams,
    rng: ChaCha8Rng,
    train: Vec<Sample>,
    val: Vec<Sample>,
    epoch: usize,
}

impl Trainer {
    pub fn new(net: Network, train: Vec<Sample>, val: Vec<Sample>, hyper: Hyperparams) -> Result<Self> {
        hyper.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyInput("training split has no frames".into()));
        }
        if let Some(s) = train.iter().chain(&val).find(|s| s.label >= net.num_classes()) {
            return Err(Error::Config(format!(
                "submap {} has no class in a {}-class network",
                s.label,
                net.num_classes()
            )));
        }
        Ok(Trainer {
            optimizer: Momentum::new(&net),
            last_good: net.clone(),
            net,
            rng: ChaCha8Rng::seed_from_u64(hyper.seed),
            hyper,
            train,
            val,
            epoch: 0,
        })
    }

    /// Build samples from an atlas and its hold-out split.
    pub fn from_atlas(net: Network, atlas: &MapAtlas, hyper: Hyperparams) -> Result<Self> {
        let split = holdout_split(atlas, hyper.val_split);
        let size = net.config().input_size;
        let train = prepare_samples(atlas, &split.train, size)?;
        let val = prepare_samples(atlas, &split.val, size)?;
        Trainer::new(net, train, val, hyper)
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn train_samples(&self) -> &[Sample] {
        &self.train
    }

    pub fn val_samples(&self) -> &[Sample] {
        &self.val
    }

    /// Loss and accuracy of the current network on `(train, val)`.
    pub fn evaluate(&self) -> Result<((f64, f64), (f64, f64))> {
        let cfg = self.hyper.loss_config();
        Ok((
            evaluate_samples(&self.net, &self.train, &cfg, self.hyper.seed)?,
            evaluate_samples(&self.net, &self.val, &cfg, self.hyper.seed)?,
        ))
    }

    /// One shuffled pass of SGD over the training frames. On a numerical
    /// failure the network is rolled back to its state before the epoch.
    pub fn train_epoch(&mut self) -> Result<EpochReport> {
        self.last_good = self.net.clone();
        let backup_opt = self.optimizer.clone();
        match self.run_epoch() {
            Ok(r) => Ok(r),
            Err(e) => {
                warn!("epoch {} aborted: {e}; restoring last good parameters", self.epoch + 1);
                self.net = self.last_good.clone();
                self.optimizer = backup_opt;
                Err(e)
            }
        }
    }

    fn run_epoch(&mut self) -> Result<EpochReport> {
        let cfg = self.hyper.loss_config();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(self.hyper.batch_size) {
            let items: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| {
                    let s = &self.train[i];
                    BatchItem {
                        image: maybe_augment(&s.image, &mut self.rng, self.hyper.augment),
                        descriptor: s.descriptor.clone(),
                        label: s.label,
                    }
                })
                .collect();
            let labels: Vec<usize> = items.iter().map(|it| it.label).collect();
            let pairs = sample_pairs(&labels, &mut self.rng).pairs;
            let batch = Batch { items, pairs };
            let (loss, grads) = self.net.loss_and_gradients(&batch, &cfg)?;
            debug!("epoch {} batch loss {:.6}", self.epoch + 1, loss.total);
            self.optimizer.step(
                &mut self.net,
                &grads,
                self.hyper.learning_rate,
                self.hyper.momentum,
                |_| true,
            )?;
        }
        self.epoch += 1;
        let ((train_loss, train_acc), (val_loss, val_acc)) = self.evaluate()?;
        Ok(EpochReport {
            epoch: self.epoch,
            train_loss,
            val_loss,
            train_acc,
            val_acc,
        })
    }

    /// Run `hyper.epochs` epochs, returning one report per epoch.
    pub fn fit(&mut self) -> Result<Vec<EpochReport>> {
        (0..self.hyper.epochs).map(|_| self.train_epoch()).collect()
    }
}

/// Inputs to [`few_shot_adapt`].
#[derive(Debug, Clone, Default)]
pub struct AdaptData {
    /// The K labelled frames of the new submap (label = current class count).
    pub support: Vec<Sample>,
    /// Frames of previously known submaps, replayed 1:1 with the support set.
    pub replay: Vec<Sample>,
    /// Held-out frames of the new submap.
    pub new_holdout: Vec<Sample>,
    /// Held-out frames of old submaps.
    pub old_probe: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub shots: usize,
    pub steps: usize,
    pub untrained: bool,
    pub new_acc_before: f64,
    pub new_acc_after: f64,
    pub old_acc_before: f64,
    pub old_acc_after: f64,
}

/// Grow the classification head by one class and fine-tune on the support
/// frames mixed 1:1 with replayed old frames.
pub fn few_shot_adapt(
    net: &Network,
    data: &AdaptData,
    steps: usize,
    hyper: &Hyperparams,
) -> Result<(Network, AdaptReport)> {
    let k = data.support.len();
    if k == 0 {
        return Err(Error::Argument("few-shot adaptation needs at least one frame".into()));
    }
    let new_class = net.num_classes();
    if let Some(s) = data.support.iter().chain(&data.new_holdout).find(|s| s.label != new_class) {
        return Err(Error::Argument(format!(
            "new-submap frame {:?} carries label {}, expected {new_class}",
            s.key, s.label
        )));
    }
    if let Some(s) = data.replay.iter().chain(&data.old_probe).find(|s| s.label >= new_class) {
        return Err(Error::Argument(format!(
            "replay frame {:?} has label {} outside the existing {new_class} classes",
            s.key, s.label
        )));
    }
    hyper.validate()?;

    let old_acc_before = classification_accuracy(net, &data.old_probe)?;
    let mut adapted = net.clone();
    adapted.extend_classes(1);
    let new_acc_before = classification_accuracy(&adapted, &data.new_holdout)?;

    let cfg = hyper.loss_config();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut optimizer = Momentum::new(&adapted);
    let mut replay_order: Vec<usize> = (0..data.replay.len()).collect();
    replay_order.shuffle(&mut rng);
    let mut cursor = 0;
    for _ in 0..steps {
        let mut items: Vec<BatchItem> = data
            .support
            .iter()
            .map(|s| BatchItem {
                image: maybe_augment(&s.image, &mut rng, hyper.augment),
                ..s.item()
            })
            .collect();
        for _ in 0..k.min(replay_order.len()) {
            if cursor == replay_order.len() {
                replay_order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &data.replay[replay_order[cursor]];
            cursor += 1;
            items.push(BatchItem {
                image: maybe_augment(&s.image, &mut rng, hyper.augment),
                ..s.item()
            });
        }
        let labels: Vec<usize> = items.iter().map(|it| it.label).collect();
        let pairs = sample_pairs(&labels, &mut rng).pairs;
        let (_, grads) = adapted.loss_and_gradients(&Batch { items, pairs }, &cfg)?;
        optimizer.step(&mut adapted, &grads, hyper.learning_rate, hyper.momentum, |_| true)?;
    }

    let report = AdaptReport {
        shots: k,
        steps,
        untrained: steps == 0,
        new_acc_before,
        new_acc_after: classification_accuracy(&adapted, &data.new_holdout)?,
        old_acc_before,
        old_acc_after: classification_accuracy(&adapted, &data.old_probe)?,
    };
    Ok((adapted, report))
}
