//! Classifier training: random crops, CE/WCE loss, Adam, early stopping.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{frames_for_seconds, LogMelSpectrogram};
use crate::error::{Error, Result};
use crate::eval::{classification_metrics, cosine_score, eer};
use crate::io::write_atomic;
use crate::model::{spectrogram_tensor, SpeakerNet};
use crate::tensor::{write_checkpoint, AdamConfig, AdamState, ParamStore, Real, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    /// Cross-entropy with inverse-frequency class weights from the training set.
    Weighted,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::Weighted => "wce",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ce" => Ok(LossKind::CrossEntropy),
            "wce" => Ok(LossKind::Weighted),
            other => Err(Error::Config(format!("unknown loss '{other}', expected ce or wce"))),
        }
    }
}

/// Model-selection criterion evaluated on full-length validation utterances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValMetric {
    /// Classification accuracy; higher is better.
    Accuracy,
    /// EER over every pair of validation utterances, scored by cosine
    /// similarity of embeddings; lower is better.
    Eer,
}

impl ValMetric {
    fn higher_is_better(self) -> bool {
        self == ValMetric::Accuracy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    /// Training crop length; `None` trains on whole utterances.
    pub crop_seconds: Option<f64>,
    pub loss: LossKind,
    pub seed: u64,
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-3,
            batch_size: 64,
            patience: 5,
            crop_seconds: Some(1.0),
            loss: LossKind::CrossEntropy,
            seed: 0,
            max_epochs: 200,
        }
    }
}

impl TrainConfig {
    /// A learning rate of exactly 0 is accepted and freezes the weights.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size, patience and max epochs must be >= 1".into()));
        }
        if let Some(s) = self.crop_seconds {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("crop seconds must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn crop_frames(&self) -> Result<Option<usize>> {
        self.crop_seconds.map(frames_for_seconds).transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    NoImprovement,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub best_metric: f64,
    /// Validation loss at the best epoch; the tie-breaker.
    pub best_loss: f64,
    pub epochs_since_best: usize,
    pub patience: usize,
    higher_is_better: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize, higher_is_better: bool) -> Self {
        EarlyStopper {
            best_metric: if higher_is_better {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            },
            best_loss: f64::INFINITY,
            epochs_since_best: 0,
            patience,
            higher_is_better,
        }
    }

    /// Records one epoch's metric and validation loss. An epoch improves on
    /// the best one if its metric is strictly better, or equal with a
    /// strictly lower loss; anything else counts toward `patience`, and
    /// `Stop` is returned when the count reaches it.
    pub fn observe(&mut self, metric: f64, loss: f64) -> StopSignal {
        let better = if self.higher_is_better {
            metric > self.best_metric
        } else {
            metric < self.best_metric
        } || (metric == self.best_metric && loss < self.best_loss);
        if better {
            self.best_metric = metric;
            self.best_loss = loss;
            self.epochs_since_best = 0;
            StopSignal::Improved
        } else {
            self.epochs_since_best += 1;
            if self.epochs_since_best >= self.patience {
                StopSignal::Stop
            } else {
                StopSignal::NoImprovement
            }
        }
    }
}

/// Fixed-length training window: a uniformly placed crop when the input is
/// longer, wrap-around padding (repeating from frame 0) when shorter.
pub fn crop_or_pad<R: Rng + ?Sized>(spec: &LogMelSpectrogram, crop_frames: usize, rng: &mut R) -> LogMelSpectrogram {
    let n = spec.n_frames();
    if n == crop_frames {
        return spec.clone();
    }
    if n > crop_frames {
        let start = rng.random_range(0..=n - crop_frames);
        spec.select_rows(start..start + crop_frames)
    } else {
        spec.select_rows((0..crop_frames).map(|i| i % n))
    }
}

/// Inverse-frequency class weights `total / (C · count_c)`.
pub fn wce_weights(class_counts: &[usize]) -> Result<Vec<f64>> {
    if class_counts.is_empty() {
        return Err(Error::Config("no classes".into()));
    }
    if let Some(c) = class_counts.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("class {c} has no training samples")));
    }
    let total: usize = class_counts.iter().sum();
    let k = class_counts.len() as f64;
    Ok(class_counts.iter().map(|&n| total as f64 / (k * n as f64)).collect())
}

/// A labelled, mean-normalized utterance.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub spec: LogMelSpectrogram,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stopped_early: bool,
    pub best: ParamStore<T>,
    pub last: ParamStore<T>,
}

impl<T: Real> TrainOutcome<T> {
    /// `epoch,train_loss,val_metric,val_loss,lr` CSV.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_metric,val_loss,lr\n");
        for r in &self.history {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{}",
                r.epoch, r.train_loss, r.val_metric, r.val_loss, r.lr
            )
            .unwrap();
        }
        out
    }

    /// Writes `best.ckpt`, `last.ckpt` and `history.csv` into `dir`.
    pub fn write(&self, dir: &Path, net: &SpeakerNet<T>) -> Result<()> {
        let meta = net.checkpoint_metadata();
        write_checkpoint(&dir.join("best.ckpt"), &self.best, &meta)?;
        write_checkpoint(&dir.join("last.ckpt"), &self.last, &meta)?;
        write_atomic(&dir.join("history.csv"), self.history_csv().as_bytes())
    }
}

fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Validation metric for an eval-mode network on full-length utterances.
pub fn validate<T: Real>(net: &SpeakerNet<T>, val: &[Utterance], metric: ValMetric) -> Result<f64> {
    Ok(validation_pass(net, val, metric)?.0)
}

/// The validation metric together with the mean unweighted cross-entropy,
/// which breaks ties between epochs with equal metrics.
pub fn validation_pass<T: Real>(net: &SpeakerNet<T>, val: &[Utterance], metric: ValMetric) -> Result<(f64, f64)> {
    let n_classes = net.config().n_classes;
    let mut preds = Vec::with_capacity(val.len());
    let mut embs = Vec::with_capacity(val.len());
    let mut loss = 0.0;
    for u in val {
        if u.label >= n_classes {
            return Err(Error::Index {
                index: u.label,
                len: n_classes,
            });
        }
        let (logits, emb) = net.infer(&u.spec)?;
        let logits: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - logits[u.label];
        preds.push(argmax(&logits));
        embs.push(emb);
    }
    loss /= val.len() as f64;
    let value = match metric {
        ValMetric::Accuracy => {
            let labels: Vec<usize> = val.iter().map(|u| u.label).collect();
            classification_metrics(&preds, &labels, n_classes)?.accuracy
        }
        ValMetric::Eer => {
            let mut scores = Vec::new();
            for i in 0..val.len() {
                for j in i + 1..val.len() {
                    scores.push((cosine_score(&embs[i], &embs[j])?, val[i].label == val[j].label));
                }
            }
            eer(&scores)?.0
        }
    };
    Ok((value, loss))
}

/// Mean (class-weighted) cross-entropy of one batch, with gradients left in
/// the parameter store.
pub fn train_step<T: Real, R: Rng + ?Sized>(
    net: &mut SpeakerNet<T>,
    batch: &[&Utterance],
    crop_frames: Option<usize>,
    class_weights: Option<&[T]>,
    rng: &mut R,
) -> Result<f64> {
    let mut inputs = Vec::with_capacity(batch.len());
    for u in batch {
        if !u.spec.cmn_applied() {
            return Err(Error::Usage(format!("utterance '{}' is not mean-normalized", u.id)));
        }
        let spec = match crop_frames {
            Some(c) => crop_or_pad(&u.spec, c, rng),
            None => u.spec.clone(),
        };
        inputs.push(spectrogram_tensor::<T>(&spec));
    }
    let targets: Vec<usize> = batch.iter().map(|u| u.label).collect();
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, &inputs, rng)?;
    let loss = tape.cross_entropy(out.logits, &targets, class_weights)?;
    let value = tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
    net.store_mut().zero_grad();
    tape.backward(loss, net.store_mut())?;
    Ok(value)
}

/// Consecutive mini-batches of `size`. The last partial batch is kept, but
/// a single leftover sample joins the batch before it, since batch
/// statistics need at least two.
fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    let n = order.len();
    let mut count = n.div_ceil(size);
    if count > 1 && n % size == 1 {
        count -= 1;
    }
    (0..count).map(move |b| {
        let end = if b + 1 == count { n } else { (b + 1) * size };
        &order[b * size..end]
    })
}

/// Trains `net` and leaves it in eval mode holding the best-validation
/// weights. Epoch `e` (0-based) shuffles, crops and draws head-drop masks
/// from a generator seeded with `seed + e`.
pub fn fit<T: Real>(
    net: &mut SpeakerNet<T>,
    train: &[Utterance],
    val: &[Utterance],
    cfg: &TrainConfig,
    metric: ValMetric,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let n_classes = net.config().n_classes;
    let mut counts = vec![0usize; n_classes];
    for u in train.iter().chain(val) {
        if u.label >= n_classes {
            return Err(Error::Index {
                index: u.label,
                len: n_classes,
            });
        }
    }
    for u in train {
        counts[u.label] += 1;
    }
    if metric == ValMetric::Eer {
        let mut val_counts = vec![0usize; n_classes];
        val.iter().for_each(|u| val_counts[u.label] += 1);
        if val_counts.iter().all(|&c| c < 2) || val_counts.iter().filter(|&&c| c > 0).count() < 2 {
            return Err(Error::Data(
                "EER validation needs two validation utterances of one speaker and utterances of two speakers".into(),
            ));
        }
    }
    let class_weights: Option<Vec<T>> = match cfg.loss {
        LossKind::CrossEntropy => None,
        LossKind::Weighted => Some(wce_weights(&counts)?.into_iter().map(T::c).collect()),
    };
    let crop_frames = cfg.crop_frames()?;
    if let Some(c) = crop_frames {
        net.config().vgg.time_steps(c)?;
    }

    let mut adam = AdamState::new(net.store(), AdamConfig::default());
    let mut stopper = EarlyStopper::new(cfg.patience, metric.higher_is_better());
    let mut best = net.store().clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.max_epochs {
        net.train();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, idx) in batches(&order, cfg.batch_size).enumerate() {
            let batch: Vec<&Utterance> = idx.iter().map(|&i| &train[i]).collect();
            let loss = train_step(net, &batch, crop_frames, class_weights.as_deref(), &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            if cfg.lr > 0.0 {
                adam.step(net.store_mut(), cfg.lr, cfg.weight_decay)?;
            }
            loss_sum += loss * batch.len() as f64;
            debug!("epoch {} step {step}: loss {loss:.5}", epoch + 1);
        }
        net.eval();
        let (val_metric, val_loss) = validation_pass(net, val, metric)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            val_metric,
            val_loss,
            lr: cfg.lr,
        };
        info!(
            "epoch {}: train loss {:.5}, val {:?} {:.4}, val loss {:.5}",
            record.epoch, record.train_loss, metric, val_metric, val_loss
        );
        history.push(record);
        match stopper.observe(val_metric, val_loss) {
            StopSignal::Improved => {
                best = net.store().clone();
                best_epoch = epoch + 1;
            }
            StopSignal::NoImprovement => {}
            StopSignal::Stop => {
                stopped_early = true;
                break;
            }
        }
    }

    let last = net.store().clone();
    net.store_mut().load_values(&best)?;
    net.store_mut().zero_grad();
    net.eval();
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_metric: stopper.best_metric,
        stopped_early,
        best,
        last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::N_MELS;

    fn ramp(n: usize) -> LogMelSpectrogram {
        let data = (0..n).flat_map(|t| std::iter::repeat(t as f32).take(N_MELS)).collect();
        LogMelSpectrogram::new(data, n, true).unwrap()
    }

    fn frame_ids(s: &LogMelSpectrogram) -> Vec<usize> {
        (0..s.n_frames()).map(|t| s.row(t)[0] as usize).collect()
    }

    #[test]
    fn crop_or_pad_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(frame_ids(&crop_or_pad(&ramp(98), 98, &mut rng)), (0..98).collect::<Vec<_>>());
        let padded: Vec<usize> = (0..50).chain(0..48).collect();
        assert_eq!(frame_ids(&crop_or_pad(&ramp(50), 98, &mut rng)), padded);
        let a = frame_ids(&crop_or_pad(&ramp(200), 98, &mut ChaCha8Rng::seed_from_u64(9)));
        let b = frame_ids(&crop_or_pad(&ramp(200), 98, &mut ChaCha8Rng::seed_from_u64(9)));
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn wce_weight_cases() {
        assert_eq!(wce_weights(&[7, 7, 7]).unwrap(), vec![1.0; 3]);
        let w = wce_weights(&[567, 158]).unwrap();
        assert!((w[0] - 725.0 / 1134.0).abs() < 1e-12 && (w[1] - 725.0 / 316.0).abs() < 1e-12);
        assert!((w[0] - 0.639).abs() < 5e-4 && (w[1] - 2.294).abs() < 5e-4);
        let w = wce_weights(&[30, 10]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 2.0).abs() < 1e-15);
        assert!(matches!(wce_weights(&[3, 0]), Err(Error::Config(_))));
    }

    #[test]
    fn stopper_stops_exactly_at_patience() {
        let mut s = EarlyStopper::new(5, true);
        assert_eq!(s.observe(0.5, 1.0), StopSignal::Improved);
        for _ in 0..4 {
            assert_eq!(s.observe(0.5, 1.0), StopSignal::NoImprovement);
        }
        assert_eq!(s.observe(0.4, 0.1), StopSignal::Stop);
        let mut s = EarlyStopper::new(2, false);
        assert_eq!(s.observe(0.3, 1.0), StopSignal::Improved);
        assert_eq!(s.observe(0.2, 1.0), StopSignal::Improved);
        assert_eq!(s.observe(0.2, 1.0), StopSignal::NoImprovement);
        assert_eq!(s.best_metric, 0.2);
    }

    #[test]
    fn a_single_leftover_sample_joins_the_previous_batch() {
        let order: Vec<usize> = (0..9).collect();
        let sizes = |n: usize, b: usize| batches(&order[..n], b).map(<[usize]>::len).collect::<Vec<_>>();
        assert_eq!(sizes(9, 4), [4, 5]);
        assert_eq!(sizes(8, 4), [4, 4]);
        assert_eq!(sizes(7, 4), [4, 3]);
        assert_eq!(sizes(1, 4), [1]);
        assert_eq!(sizes(5, 1), [1, 1, 1, 1, 1]);
        let all: Vec<usize> = batches(&order, 4).flatten().copied().collect();
        assert_eq!(all, order);
    }

    #[test]
    fn equal_metrics_are_ranked_by_loss() {
        let mut s = EarlyStopper::new(3, false);
        assert_eq!(s.observe(0.1, 0.5), StopSignal::Improved);
        assert_eq!(s.observe(0.1, 0.4), StopSignal::Improved);
        assert_eq!(s.observe(0.1, 0.45), StopSignal::NoImprovement);
        assert_eq!(s.observe(0.2, 0.01), StopSignal::NoImprovement);
        assert_eq!(s.observe(0.05, 0.9), StopSignal::Improved);
        assert_eq!((s.best_metric, s.best_loss, s.epochs_since_best), (0.05, 0.9, 0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            crop_seconds: Some(-1.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::default().crop_frames().unwrap(), Some(98));
    }
}
