//! Whole runs over a manifest: the steps behind each command-line verb.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use log::info;

use crate::data::{load_manifest, load_split, train_labels, EmbeddingRecord, Manifest, RunConfig, Split};
use crate::error::{Error, Result};
use crate::eval::{cosine_score, Prediction, ScoreLine, TrialPair};
use crate::io::write_atomic;
use crate::model::SpeakerNet;
use crate::tensor::Real;
use crate::train::{fit, TrainOutcome, Utterance};

/// Class names in index order, one per line, next to the checkpoints.
pub const LABELS_FILE: &str = "labels.txt";
/// The effective configuration of a training run.
pub const RUN_CONFIG_FILE: &str = "run.cfg";

pub struct TrainedRun {
    pub net: SpeakerNet<f32>,
    pub outcome: TrainOutcome<f32>,
    pub manifest: Manifest,
    pub labels: Vec<String>,
}

/// Loads the manifest, trains on its train split with early stopping on the
/// val split, and writes checkpoints, history, labels and the effective
/// config into `cfg.out_dir`. The returned network holds the best weights.
pub fn train_from_config(cfg: &RunConfig) -> Result<TrainedRun> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.manifest, cfg.min_duration)?;
    let label_map = train_labels(&manifest);
    if label_map.len() < 2 {
        return Err(Error::Data(format!("need at least 2 training labels, found {}", label_map.len())));
    }
    let model = cfg.model_config(label_map.len())?;
    let train = load_split(&manifest, Split::Train, &label_map)?;
    let val = load_split(&manifest, Split::Val, &label_map)?;
    info!(
        "{} training and {} validation utterances, {} classes",
        train.len(),
        val.len(),
        label_map.len()
    );
    let mut net = SpeakerNet::<f32>::new(model, cfg.train.seed)?;
    let outcome = fit(&mut net, &train, &val, &cfg.train, cfg.task.val_metric())?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    outcome.write(&cfg.out_dir, &net)?;
    let labels = labels_in_order(&label_map);
    write_labels(&cfg.out_dir.join(LABELS_FILE), &labels)?;
    write_atomic(&cfg.out_dir.join(RUN_CONFIG_FILE), cfg.to_text().as_bytes())?;
    Ok(TrainedRun {
        net,
        outcome,
        manifest,
        labels,
    })
}

pub fn labels_in_order(map: &BTreeMap<String, usize>) -> Vec<String> {
    let mut labels = vec![String::new(); map.len()];
    for (name, &i) in map {
        labels[i] = name.clone();
    }
    labels
}

pub fn label_map(labels: &[String]) -> BTreeMap<String, usize> {
    labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect()
}

pub fn write_labels(path: &Path, labels: &[String]) -> Result<()> {
    let mut text = labels.join("\n");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_labels(path: &Path) -> Result<Vec<String>> {
    let labels: Vec<String> = std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: no labels", path.display())));
    }
    Ok(labels)
}

fn to_f32<T: Real>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect()
}

/// Full-utterance embeddings in input order.
pub fn embed_all<T: Real>(net: &SpeakerNet<T>, utts: &[Utterance]) -> Result<Vec<EmbeddingRecord>> {
    utts.iter()
        .map(|u| {
            Ok(EmbeddingRecord {
                id: u.id.clone(),
                vector: to_f32(&net.extract_embedding(&u.spec)?),
            })
        })
        .collect()
}

/// Arg-max predictions with softmax class probabilities.
pub fn predict_all<T: Real>(net: &SpeakerNet<T>, utts: &[Utterance]) -> Result<Vec<Prediction>> {
    utts.iter()
        .map(|u| {
            let logits: Vec<f64> = net.infer(&u.spec)?.0.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exp.iter().sum();
            let probs: Vec<f64> = exp.iter().map(|e| e / total).collect();
            let predicted = (0..probs.len()).fold(0, |best, i| if probs[i] > probs[best] { i } else { best });
            Ok(Prediction {
                id: u.id.clone(),
                label: u.label,
                predicted,
                probs,
            })
        })
        .collect()
}

/// Cosine scores for every trial from precomputed embeddings.
pub fn score_embeddings(records: &[EmbeddingRecord], trials: &[TrialPair]) -> Result<Vec<ScoreLine>> {
    let by_id: HashMap<&str, &[f32]> = records.iter().map(|r| (r.id.as_str(), r.vector.as_slice())).collect();
    let lookup = |id: &str| {
        by_id
            .get(id)
            .copied()
            .ok_or_else(|| Error::Data(format!("no embedding for utterance '{id}'")))
    };
    trials
        .iter()
        .map(|t| {
            Ok(ScoreLine {
                enroll_id: t.enroll_id.clone(),
                test_id: t.test_id.clone(),
                score: cosine_score(lookup(&t.enroll_id)?, lookup(&t.test_id)?)?,
            })
        })
        .collect()
}
