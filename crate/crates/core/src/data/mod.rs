//! Datasets on disk: manifests, the synthetic corpus, run configuration and
//! embedding files.

pub mod config;
pub mod embeddings;
pub mod manifest;
pub mod synth;

use std::collections::BTreeMap;

pub use config::{RunConfig, Task};
pub use embeddings::{read_embeddings, write_embeddings, EmbeddingRecord};
pub use manifest::{load_manifest, write_manifest, Manifest, ManifestRow, Split};
pub use synth::{make_trials, synth_dataset, SyntheticSpeakerSpec};

use crate::audio::{features, LogMelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::train::Utterance;

/// Mean-normalized log-Mel features for one manifest row.
pub fn row_features(manifest: &Manifest, row: &ManifestRow) -> Result<LogMelSpectrogram> {
    features(&Waveform::read_wav(&manifest.audio_path(row))?)
}

/// Labelled features for every row of `split`, in manifest order. Labels
/// missing from `labels` are a data error.
pub fn load_split(manifest: &Manifest, split: Split, labels: &BTreeMap<String, usize>) -> Result<Vec<Utterance>> {
    manifest
        .split(split)
        .map(|row| {
            let label = *labels
                .get(&row.label)
                .ok_or_else(|| Error::Data(format!("label '{}' not seen in training", row.label)))?;
            Ok(Utterance {
                id: row.utterance_id.clone(),
                spec: row_features(manifest, row)?,
                label,
            })
        })
        .collect()
}

/// Class indices for the training split's labels, sorted by name.
pub fn train_labels(manifest: &Manifest) -> BTreeMap<String, usize> {
    let mut labels: Vec<&str> = manifest.split(Split::Train).map(|r| r.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    labels.into_iter().enumerate().map(|(i, l)| (l.to_string(), i)).collect()
}
