//! Toy labelled spectrograms for training tests. Each class owns a random
//! spectral pattern that is switched on in even frames and off in odd ones,
//! so it survives mean normalization; frames also carry Gaussian noise.

use dmhsa::audio::{cmn, LogMelSpectrogram, N_MELS};
use dmhsa::model::{ModelConfig, PoolingKind, VggConfig};
use dmhsa::train::Utterance;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub fn class_patterns(n_classes: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut r = super::rng(seed);
    (0..n_classes)
        .map(|_| (0..N_MELS).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

/// `counts[c]` utterances of class `c`, each `frames` long. `signal` scales
/// the pattern against unit noise.
pub fn utterances(patterns: &[Vec<f32>], counts: &[usize], frames: usize, signal: f32, seed: u64) -> Vec<Utterance> {
    let mut r = super::rng(seed);
    let noise = Normal::new(0.0f32, 1.0).unwrap();
    let mut out = Vec::new();
    for (label, (&n, pattern)) in counts.iter().zip(patterns).enumerate() {
        for i in 0..n {
            let data = (0..frames)
                .flat_map(|t| pattern.iter().map(move |&p| if t % 2 == 0 { p * signal } else { 0.0 }))
                .map(|v| v + noise.sample(&mut r))
                .collect();
            let spec = cmn(LogMelSpectrogram::new(data, frames, false).unwrap()).unwrap();
            out.push(Utterance {
                id: format!("c{label}_{i:03}"),
                spec,
                label,
            });
        }
    }
    out
}

pub fn toy_model(n_classes: usize) -> ModelConfig {
    ModelConfig {
        vgg: VggConfig {
            channels: vec![4, 8, 16],
        },
        pooling: PoolingKind::Statistical,
        fc1: 32,
        embed_dim: 16,
        fc3: 16,
        n_classes,
    }
}
