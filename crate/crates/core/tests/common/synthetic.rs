//! The desk-scale verification run: synthetic corpus, reduced 3-block
//! network with eight-head DMHSA, evaluated on held-out utterances.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use dmhsa::audio::N_MELS;
use dmhsa::data::{load_split, synth_dataset, RunConfig, Split, SyntheticSpeakerSpec};
use dmhsa::eval::{evaluate_predictions, evaluate_verification};
use dmhsa::pipeline::{label_map, predict_all, train_from_config};

pub const RUN_SETTINGS: [(&str, &str); 8] = [
    ("task", "verification"),
    ("model.blocks", "3"),
    ("model.channels", "32,64,128"),
    ("model.heads", "8"),
    ("train.crop_seconds", "1.0"),
    ("train.batch_size", "16"),
    ("train.lr", "0.0001"),
    ("train.weight_decay", "0.001"),
];

pub struct SyntheticRun {
    pub centroid_accuracy: f64,
    pub accuracy: f64,
    pub eer: f64,
    pub n_trials: usize,
    pub best_epoch: usize,
    pub epochs: usize,
    /// Verification and classification metrics as `key=value` text.
    pub report: Vec<u8>,
    pub elapsed: Duration,
}

/// Test-split accuracy of a nearest-centroid classifier on utterance-mean
/// log-Mel vectors (without mean normalization, which would erase them).
fn nearest_centroid(dir: &Path) -> f64 {
    let manifest = dmhsa::data::load_manifest(&dir.join("manifest.csv"), None).unwrap();
    let mean_logmel = |row| {
        let w = dmhsa::audio::Waveform::read_wav(&manifest.audio_path(row)).unwrap();
        dmhsa::audio::log_mel(&w).unwrap().column_means()
    };
    let mut centroids: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for row in manifest.split(Split::Train) {
        let m = mean_logmel(row);
        let e = centroids.entry(row.label.as_str()).or_insert((vec![0.0; N_MELS], 0));
        e.0.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    let (mut right, mut total) = (0, 0);
    for row in manifest.split(Split::Test) {
        let m = mean_logmel(row);
        let dist = |c: &(Vec<f64>, usize)| c.0.iter().zip(&m).map(|(a, b)| (a / c.1 as f64 - b).powi(2)).sum::<f64>();
        let best = centroids.iter().min_by(|a, b| dist(a.1).total_cmp(&dist(b.1))).unwrap().0;
        right += (*best == row.label) as usize;
        total += 1;
    }
    right as f64 / total as f64
}

pub fn synthetic_run(dir: &Path) -> SyntheticRun {
    let start = Instant::now();
    let spec = SyntheticSpeakerSpec::default();
    let corpus = synth_dataset(&spec, dir).unwrap();
    let centroid_accuracy = nearest_centroid(dir);

    let mut cfg = RunConfig::default();
    for (k, v) in RUN_SETTINGS {
        cfg.set(k, v).unwrap();
    }
    cfg.manifest = dir.join("manifest.csv");
    cfg.out_dir = dir.join("run");
    let run = train_from_config(&cfg).unwrap();

    let test = load_split(&run.manifest, Split::Test, &label_map(&run.labels)).unwrap();
    let classification = evaluate_predictions(&predict_all(&run.net, &test).unwrap()).unwrap();
    let specs = test.iter().map(|u| (u.id.clone(), u.spec.clone())).collect();
    let verification = evaluate_verification(&run.net, &corpus.trials, &specs).unwrap().report;
    let report = format!("{}{}", verification.to_kv(), classification.to_kv()).into_bytes();
    SyntheticRun {
        centroid_accuracy,
        accuracy: classification.accuracy.unwrap(),
        eer: verification.eer.unwrap(),
        n_trials: corpus.trials.len(),
        best_epoch: run.outcome.best_epoch,
        epochs: run.outcome.history.len(),
        report,
        elapsed: start.elapsed(),
    }
}
