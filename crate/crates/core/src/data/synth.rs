//! Deterministic synthetic speakers: a jittered glottal pulse train shaped by
//! a speaker-specific set of formant resonators, plus a little noise.

use std::f64::consts::PI;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{write_manifest, ManifestRow, Split};
use crate::audio::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::eval::{write_trials, TrialPair};

/// Formant search ranges (Hz), one per resonance.
const FORMANT_RANGES: [(f64, f64); 4] = [(250.0, 850.0), (850.0, 2400.0), (2400.0, 3400.0), (3400.0, 4800.0)];
const BANDWIDTH_RANGE: (f64, f64) = (60.0, 140.0);
const F0_RANGE: (f64, f64) = (85.0, 260.0);
/// Two speakers must differ by at least this relative amount in some formant.
const MIN_FORMANT_GAP: f64 = 0.08;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpeakerSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub target_trials: usize,
    pub nontarget_trials: usize,
}

impl Default for SyntheticSpeakerSpec {
    fn default() -> Self {
        SyntheticSpeakerSpec {
            n_speakers: 10,
            utts_per_speaker: 20,
            duration_s: 3.0,
            seed: 42,
            target_trials: 100,
            nontarget_trials: 100,
        }
    }
}

impl SyntheticSpeakerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.utts_per_speaker == 0 {
            return Err(Error::Config("need at least one speaker and one utterance".into()));
        }
        if !(self.duration_s >= 0.1 && self.duration_s.is_finite()) {
            return Err(Error::Config(format!("duration must be >= 0.1 s, got {}", self.duration_s)));
        }
        Ok(())
    }

    /// Per-speaker `(train, val, test)` utterance counts: roughly 60/10/30,
    /// with at least one training utterance.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let u = self.utts_per_speaker;
        let mut test = (3 * u + 5) / 10;
        let mut val = (u + 5) / 10;
        while val + test >= u && (val > 0 || test > 0) {
            if test >= val {
                test -= 1;
            } else {
                val -= 1;
            }
        }
        (u - val - test, val, test)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    /// `(center Hz, bandwidth Hz)` per resonance.
    pub formants: Vec<(f64, f64)>,
    pub f0_lo: f64,
    pub f0_hi: f64,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Speaker profiles as a pure function of the seed; resonance tuples are
/// redrawn until every pair differs by at least 8 % in some formant.
pub fn speaker_profiles(n: usize, seed: u64) -> Vec<SpeakerProfile> {
    let mut rng = stream(seed, 0);
    let mut out: Vec<SpeakerProfile> = Vec::with_capacity(n);
    while out.len() < n {
        let formants: Vec<(f64, f64)> = FORMANT_RANGES
            .iter()
            .map(|&(lo, hi)| (rng.random_range(lo..hi), rng.random_range(BANDWIDTH_RANGE.0..BANDWIDTH_RANGE.1)))
            .collect();
        let distinct = out.iter().all(|p| {
            p.formants
                .iter()
                .zip(&formants)
                .any(|(a, b)| (a.0 - b.0).abs() / a.0 >= MIN_FORMANT_GAP)
        });
        let f0 = rng.random_range(F0_RANGE.0..F0_RANGE.1);
        if distinct {
            out.push(SpeakerProfile {
                formants,
                f0_lo: 0.96 * f0,
                f0_hi: 1.04 * f0,
            });
        }
    }
    out
}

/// Two-pole resonator with unit gain at DC.
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64) -> Self {
        let fs = SAMPLE_RATE as f64;
        let r = (-PI * bandwidth / fs).exp();
        let b = 2.0 * r * (2.0 * PI * freq / fs).cos();
        let c = -r * r;
        Resonator {
            a: 1.0 - b - c,
            b,
            c,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// One utterance for `profile`, drawn from `rng`: per-utterance f0 within the
/// speaker's range with slow drift, 1 % period jitter, ±2 % formant
/// perturbation and a syllable-rate amplitude envelope. Peak level is 0.5.
pub fn synthesize<R: Rng + ?Sized>(profile: &SpeakerProfile, n_samples: usize, rng: &mut R) -> Vec<f32> {
    let fs = SAMPLE_RATE as f64;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let f0 = rng.random_range(profile.f0_lo..profile.f0_hi);
    let drift_rate = rng.random_range(0.5..2.0);
    let drift_phase = rng.random_range(0.0..2.0 * PI);
    let env_rate = rng.random_range(3.0..5.0);
    let env_phase = rng.random_range(0.0..2.0 * PI);
    let mut resonators: Vec<Resonator> = profile
        .formants
        .iter()
        .map(|&(f, bw)| Resonator::new(f * (1.0 + 0.02 * unit.sample(rng)), bw))
        .collect();

    let mut signal = Vec::with_capacity(n_samples);
    let mut next_pulse = 0.0;
    let mut tilt = 0.0;
    for n in 0..n_samples {
        let t = n as f64 / fs;
        let mut x = 0.0;
        if n as f64 >= next_pulse {
            let pitch = f0 * (1.0 + 0.05 * (2.0 * PI * drift_rate * t + drift_phase).sin());
            next_pulse += fs / pitch * (1.0 + 0.01 * unit.sample(rng));
            x = 1.0 + 0.05 * unit.sample(rng);
        }
        tilt = x + 0.9 * tilt;
        let mut y = tilt;
        for r in &mut resonators {
            y = r.tick(y);
        }
        let envelope = 0.35 + 0.65 * (0.5 + 0.5 * (2.0 * PI * env_rate * t + env_phase).sin());
        signal.push(y * envelope);
    }
    let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    signal
        .iter()
        .map(|v| (0.5 * v / peak + 0.003 * unit.sample(rng)) as f32)
        .collect()
}

/// Verification trials within one split: up to `n_target` same-label pairs
/// of distinct utterances and up to `n_nontarget` different-label pairs, each
/// sampled without replacement.
pub fn make_trials(rows: &[ManifestRow], split: Split, n_target: usize, n_nontarget: usize, seed: u64) -> Vec<TrialPair> {
    let pool: Vec<&ManifestRow> = rows.iter().filter(|r| r.split == split).collect();
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            let pair = TrialPair {
                enroll_id: pool[i].utterance_id.clone(),
                test_id: pool[j].utterance_id.clone(),
                target: pool[i].label == pool[j].label,
            };
            if pair.target {
                targets.push(pair);
            } else {
                nontargets.push(pair);
            }
        }
    }
    let mut rng = stream(seed, u64::MAX);
    targets.shuffle(&mut rng);
    nontargets.shuffle(&mut rng);
    targets.truncate(n_target);
    nontargets.truncate(n_nontarget);
    targets.extend(nontargets);
    targets
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub rows: Vec<ManifestRow>,
    pub trials: Vec<TrialPair>,
    pub warnings: Vec<String>,
}

/// Writes `wav/<id>.wav`, `manifest.csv` and `trials.txt` (test split) into
/// `out_dir`. The corpus is a pure function of `spec`.
pub fn synth_dataset(spec: &SyntheticSpeakerSpec, out_dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    let mut warnings = Vec::new();
    if spec.n_speakers == 1 {
        warnings.push("only one speaker: no non-target verification trials are possible".to_string());
    }
    let profiles = speaker_profiles(spec.n_speakers, spec.seed);
    let n_samples = (spec.duration_s * SAMPLE_RATE as f64).round() as usize;
    let (n_train, n_val, _) = spec.split_counts();
    let width = spec.n_speakers.saturating_sub(1).to_string().len().max(2);
    let uwidth = spec.utts_per_speaker.saturating_sub(1).to_string().len().max(2);
    let mut rows = Vec::new();
    for (s, profile) in profiles.iter().enumerate() {
        let label = format!("spk{s:0width$}");
        for u in 0..spec.utts_per_speaker {
            let id = format!("{label}_u{u:0uwidth$}");
            let mut rng = stream(spec.seed, 1 + (s as u64) * (1 << 32) + u as u64);
            let wave = Waveform::new(synthesize(profile, n_samples, &mut rng), SAMPLE_RATE)?;
            let rel = format!("wav/{id}.wav");
            wave.write_wav(&out_dir.join(&rel))?;
            let split = if u < n_train {
                Split::Train
            } else if u < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            rows.push(ManifestRow {
                utterance_id: id,
                audio_path: rel,
                label: label.clone(),
                split,
                duration_s: wave.duration_s(),
            });
        }
    }
    write_manifest(&out_dir.join("manifest.csv"), &rows)?;
    let trials = make_trials(&rows, Split::Test, spec.target_trials, spec.nontarget_trials, spec.seed);
    let n_target = trials.iter().filter(|t| t.target).count();
    if n_target < spec.target_trials || trials.len() - n_target < spec.nontarget_trials {
        warnings.push(format!(
            "test split supports only {n_target} target and {} non-target trials",
            trials.len() - n_target
        ));
    }
    write_trials(&out_dir.join("trials.txt"), &trials)?;
    for w in &warnings {
        warn!("{w}");
    }
    Ok(SynthOutput { rows, trials, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_seed_pure_and_distinct() {
        let a = speaker_profiles(20, 7);
        assert_eq!(a, speaker_profiles(20, 7));
        assert_ne!(a, speaker_profiles(20, 8));
        for i in 0..a.len() {
            for j in 0..i {
                assert_ne!(a[i].formants, a[j].formants);
            }
        }
    }

    #[test]
    fn split_counts() {
        let spec = |u| SyntheticSpeakerSpec {
            utts_per_speaker: u,
            ..Default::default()
        };
        assert_eq!(spec(20).split_counts(), (12, 2, 6));
        assert_eq!(spec(1).split_counts(), (1, 0, 0));
        assert_eq!(spec(2).split_counts(), (1, 0, 1));
        for u in 1..40 {
            let (a, b, c) = spec(u).split_counts();
            assert!(a >= 1 && a + b + c == u);
        }
    }

    #[test]
    fn synthesized_audio_is_bounded_and_nonsilent() {
        let p = &speaker_profiles(1, 3)[0];
        let x = synthesize(p, 16000, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(x.len(), 16000);
        let peak = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(peak > 0.4 && peak < 0.6);
    }

    #[test]
    fn trials_are_labelled_by_speaker() {
        let row = |id: &str, label: &str| ManifestRow {
            utterance_id: id.into(),
            audio_path: format!("{id}.wav"),
            label: label.into(),
            split: Split::Test,
            duration_s: 1.0,
        };
        let rows = vec![row("a1", "a"), row("a2", "a"), row("b1", "b"), row("b2", "b")];
        let trials = make_trials(&rows, Split::Test, 10, 10, 0);
        assert_eq!(trials.iter().filter(|t| t.target).count(), 2);
        assert_eq!(trials.len(), 6);
        for t in &trials {
            assert_eq!(t.target, t.enroll_id[..1] == t.test_id[..1]);
            assert_ne!(t.enroll_id, t.test_id);
        }
    }
}
