//! 16 kHz waveforms to CMN-normalized 80-band log-Mel spectrograms.
//!
//! Fixed conventions: 25 ms periodic Hamming windows (α = 0.54) every 10 ms,
//! no pre-emphasis, 512-point FFT of the zero-padded frame, power spectrum,
//! 80 HTK-mel triangular filters over 0–8000 Hz, natural log with a 1e-10
//! floor, then per-utterance mean subtraction per band.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WIN_LENGTH: usize = 400;
pub const HOP_LENGTH: usize = 160;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 80;
pub const LOG_FLOOR: f64 = 1e-10;
pub const F_MAX: f64 = 8000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("empty waveform".into()));
        }
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Data(format!(
                "sample rate must be {SAMPLE_RATE} Hz, got {sample_rate}"
            )));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a mono 16-bit PCM (or float) WAV file.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let wrap = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = hound::WavReader::open(path).map_err(wrap)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Data(format!(
                "{}: expected mono audio, got {} channels",
                path.display(),
                spec.channels
            )));
        }
        let samples = match spec.sample_format {
            hound::SampleFormat::Int => {
                let scale = 1.0 / (1u32 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 * scale))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(wrap)?
            }
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(wrap)?,
        };
        Waveform::new(samples, spec.sample_rate)
    }

    /// Writes 16-bit PCM mono; samples are clipped to [-1, 1].
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut cursor = std::io::Cursor::new(Vec::new());
        {
            let wrap = |source| Error::Wav {
                path: path.to_path_buf(),
                source,
            };
            let mut writer = hound::WavWriter::new(&mut cursor, spec).map_err(wrap)?;
            for &s in &self.samples {
                let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
                writer.write_sample(q).map_err(wrap)?;
            }
            writer.finalize().map_err(wrap)?;
        }
        write_atomic(path, &cursor.into_inner())
    }
}

/// `⌊(len − 400)/160⌋ + 1` for signals of at least one window.
pub fn frame_count(len: usize) -> Result<usize> {
    if len < WIN_LENGTH {
        return Err(Error::InputTooShort {
            needed: WIN_LENGTH,
            got: len,
            unit: "samples",
        });
    }
    Ok((len - WIN_LENGTH) / HOP_LENGTH + 1)
}

/// Number of frames produced by `seconds` of 16 kHz audio.
pub fn frames_for_seconds(seconds: f64) -> Result<usize> {
    frame_count((seconds * SAMPLE_RATE as f64).round() as usize)
}

/// Periodic Hamming window of length `n`.
pub fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Splits the signal into windowed 400-sample frames; the trailing partial
/// frame is dropped.
pub fn frame_signal(w: &Waveform) -> Result<Vec<Vec<f64>>> {
    let n = frame_count(w.samples.len())?;
    let window = hamming(WIN_LENGTH);
    Ok((0..n)
        .map(|f| {
            w.samples[f * HOP_LENGTH..f * HOP_LENGTH + WIN_LENGTH]
                .iter()
                .zip(&window)
                .map(|(&s, &h)| s as f64 * h)
                .collect()
        })
        .collect())
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters, `N_MELS × (N_FFT/2 + 1)`, row-major, unit peak.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Vec<f64>,
    /// Left edge, centre and right edge in Hz for each band.
    edges: Vec<[f64; 3]>,
}

impl MelFilterbank {
    pub fn new() -> Self {
        let n_bins = N_FFT / 2 + 1;
        let mel_max = hz_to_mel(F_MAX);
        let points: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let mut weights = vec![0.0; N_MELS * n_bins];
        let mut edges = Vec::with_capacity(N_MELS);
        for m in 0..N_MELS {
            let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
            edges.push([lo, mid, hi]);
            for k in 0..n_bins {
                let f = k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        MelFilterbank { weights, edges }
    }

    pub fn shared() -> &'static MelFilterbank {
        static BANK: OnceLock<MelFilterbank> = OnceLock::new();
        BANK.get_or_init(MelFilterbank::new)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn band_edges(&self) -> &[[f64; 3]] {
        &self.edges
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .chunks(power.len())
            .map(|row| row.iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new()
    }
}

/// An `N × 80` log-Mel matrix, row-major (one row per frame).
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    data: Vec<f32>,
    n_frames: usize,
    cmn_applied: bool,
}

impl LogMelSpectrogram {
    pub fn new(data: Vec<f32>, n_frames: usize, cmn_applied: bool) -> Result<Self> {
        if n_frames == 0 {
            return Err(Error::Data("spectrogram needs at least one frame".into()));
        }
        if data.len() != n_frames * N_MELS {
            return Err(Error::dim("spectrogram", &[n_frames, N_MELS], &[data.len()]));
        }
        Ok(LogMelSpectrogram {
            data,
            n_frames,
            cmn_applied,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        N_MELS
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cmn_applied(&self) -> bool {
        self.cmn_applied
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * N_MELS..(t + 1) * N_MELS]
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; N_MELS];
        for row in self.data.chunks(N_MELS) {
            for (m, &v) in means.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        means.iter_mut().for_each(|m| *m /= self.n_frames as f64);
        means
    }

    /// Rows `frames` in order, allowing repeats (used for crops and padding).
    pub fn select_rows(&self, frames: impl IntoIterator<Item = usize>) -> Self {
        let mut data = Vec::new();
        let mut n = 0;
        for t in frames {
            data.extend_from_slice(self.row(t));
            n += 1;
        }
        LogMelSpectrogram {
            data,
            n_frames: n,
            cmn_applied: self.cmn_applied,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.data.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.n_frames as u32).to_le_bytes());
        out.extend_from_slice(&(N_MELS as u32).to_le_bytes());
        out.extend_from_slice(&(self.cmn_applied as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Data("malformed feature cache".into());
        if bytes.len() < 20 || &bytes[..8] != FEATURE_MAGIC {
            return Err(bad());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (n, m, flags) = (word(8), word(12), word(16));
        if m != N_MELS || flags > 1 || bytes.len() != 20 + n * m * 4 {
            return Err(bad());
        }
        let data = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        LogMelSpectrogram::new(data, n, flags == 1)
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const FEATURE_MAGIC: &[u8; 8] = b"DMHSAFEA";

fn fft_plan() -> Arc<dyn Fft<f64>> {
    static PLAN: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(N_FFT)).clone()
}

/// Power spectrum (`N_FFT/2 + 1` bins) of one windowed frame.
pub fn power_spectrum(frame: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = frame
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(N_FFT)
        .collect();
    fft_plan().process(&mut buf);
    buf[..N_FFT / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

/// Log-Mel energies without mean normalization.
pub fn log_mel(w: &Waveform) -> Result<LogMelSpectrogram> {
    let frames = frame_signal(w)?;
    let bank = MelFilterbank::shared();
    let mut data = Vec::with_capacity(frames.len() * N_MELS);
    for frame in &frames {
        let energies = bank.apply(&power_spectrum(frame));
        data.extend(energies.iter().map(|&e| (e + LOG_FLOOR).ln() as f32));
    }
    LogMelSpectrogram::new(data, frames.len(), false)
}

/// Per-utterance, per-band mean subtraction.
pub fn cmn(spec: LogMelSpectrogram) -> Result<LogMelSpectrogram> {
    if spec.cmn_applied {
        return Err(Error::Usage("cepstral mean normalization already applied".into()));
    }
    let means = spec.column_means();
    let mut data = spec.data;
    for row in data.chunks_mut(N_MELS) {
        for (v, &m) in row.iter_mut().zip(&means) {
            *v = (*v as f64 - m) as f32;
        }
    }
    LogMelSpectrogram::new(data, spec.n_frames, true)
}

/// Model input: `cmn(log_mel(w))`.
pub fn features(w: &Waveform) -> Result<LogMelSpectrogram> {
    cmn(log_mel(w)?)
}
