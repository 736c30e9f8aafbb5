//! Audio I/O and the log-mel feature front end.
//!
//! The front end is deliberately plain: Hann-windowed STFT into a
//! sum-normalized triangular mel filterbank on the power spectrum, floored
//! log. Frame `t` covers samples `[t*shift, t*shift + length)`, so dropping
//! exactly one shift of leading samples drops exactly one feature frame.

use crate::tensor::Tensor;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("wav format error: {0}")]
    Format(String),
    #[error("front-end config error: {0}")]
    Config(String),
    #[error("signal of {samples} samples is shorter than one {needed}-sample frame")]
    TooShort { samples: usize, needed: usize },
}

pub type Result<T> = std::result::Result<T, SignalError>;

/// Time-domain signal. Samples are nominally in [-1, 1]; intermediate
/// synthesis results may exceed that before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        debug_assert!(sample_rate > 0);
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared sample value.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }
}

/// Feature frames plus the timing metadata needed to map frames back to
/// sample positions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Tensor,
    pub frame_shift: f64,
    pub frame_length: f64,
}

impl FeatureMatrix {
    pub fn t_len(&self) -> usize {
        self.frames.row_count()
    }

    pub fn dim(&self) -> usize {
        self.frames.last_dim()
    }
}

// ---- WAV ----

/// Reads a PCM 16-bit mono WAV file; samples are scaled by 1/32768.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_wav(&bytes)
}

fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    let need = |n: usize| -> Result<()> {
        if bytes.len() < n {
            Err(SignalError::Format(format!(
                "truncated file: {} bytes, need at least {n}",
                bytes.len()
            )))
        } else {
            Ok(())
        }
    };
    need(12)?;
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(SignalError::Format("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(SignalError::Format(format!(
                "truncated chunk {:?}: declares {size} bytes past end of file",
                String::from_utf8_lossy(id)
            )));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(SignalError::Format("fmt chunk shorter than 16 bytes".into()));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned; odd sizes carry one pad byte.
        pos = body_start + size + (size & 1);
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| SignalError::Format("missing fmt chunk".into()))?;
    if format != 1 {
        return Err(SignalError::Format(format!(
            "audio format {format} is not PCM"
        )));
    }
    if channels != 1 {
        return Err(SignalError::Format(format!(
            "{channels} channels, expected mono"
        )));
    }
    if bits != 16 {
        return Err(SignalError::Format(format!(
            "{bits} bits per sample, expected 16"
        )));
    }
    let data = data.ok_or_else(|| SignalError::Format("missing data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(SignalError::Format("odd data chunk length".into()));
    }
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Ok(Waveform::new(samples, rate))
}

/// Writes a PCM 16-bit mono WAV file. Samples are clamped to [-1, 1] and
/// quantized by 32768, the inverse of [`read_wav`]'s scaling.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let n = w.samples.len();
    let data_bytes = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_bytes).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_bytes.to_le_bytes());
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

// ---- STFT ----

#[derive(Debug, Clone)]
pub struct Spectrogram {
    /// T x n_bins complex bins, row-major.
    pub bins: Vec<Complex64>,
    pub t_len: usize,
    pub n_bins: usize,
    pub fft_size: usize,
    pub sample_rate: u32,
    pub frame_shift: f64,
    pub frame_length: f64,
}

impl Spectrogram {
    pub fn row(&self, t: usize) -> &[Complex64] {
        &self.bins[t * self.n_bins..(t + 1) * self.n_bins]
    }
}

/// Periodic Hann window of length `l`.
fn hann(l: usize) -> Vec<f64> {
    (0..l)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / l as f64).cos())
        .collect()
}

/// Hann-windowed STFT keeping the one-sided spectrum (fft_size/2 + 1 bins).
pub fn stft(
    w: &Waveform,
    frame_length_s: f64,
    frame_shift_s: f64,
    fft_size: usize,
) -> Result<Spectrogram> {
    if !fft_size.is_power_of_two() {
        return Err(SignalError::Config(format!(
            "fft size {fft_size} is not a power of two"
        )));
    }
    let sr = w.sample_rate as f64;
    let l = (frame_length_s * sr).round() as usize;
    let s = (frame_shift_s * sr).round() as usize;
    if l == 0 || s == 0 {
        return Err(SignalError::Config(format!(
            "frame length {frame_length_s}s / shift {frame_shift_s}s collapse to zero samples"
        )));
    }
    if fft_size < l {
        return Err(SignalError::Config(format!(
            "fft size {fft_size} smaller than frame of {l} samples"
        )));
    }
    let n = w.samples.len();
    if n < l {
        return Err(SignalError::TooShort {
            samples: n,
            needed: l,
        });
    }
    let t_len = (n - l) / s + 1;
    let n_bins = fft_size / 2 + 1;
    let window = hann(l);
    let fft = FftPlanner::new().plan_fft_forward(fft_size);
    let mut bins = Vec::with_capacity(t_len * n_bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_size];
    for t in 0..t_len {
        let start = t * s;
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = if i < l {
                w.samples[start + i] * window[i]
            } else {
                0.0
            };
            *slot = Complex64::new(v, 0.0);
        }
        fft.process(&mut buf);
        bins.extend_from_slice(&buf[..n_bins]);
    }
    Ok(Spectrogram {
        bins,
        t_len,
        n_bins,
        fft_size,
        sample_rate: w.sample_rate,
        frame_shift: frame_shift_s,
        frame_length: frame_length_s,
    })
}

// ---- mel ----

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters over FFT bins spanning [0, sr/2] on the mel scale,
/// each normalized to unit weight sum.
pub fn mel_filterbank(fft_size: usize, sample_rate: u32, n_mels: usize) -> Result<Vec<Vec<f64>>> {
    if n_mels == 0 {
        return Err(SignalError::Config("need at least one mel channel".into()));
    }
    let n_bins = fft_size / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * sample_rate as f64 / fft_size as f64;
    let mut filters = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
        let mut filt = vec![0.0; n_bins];
        for (k, w) in filt.iter_mut().enumerate() {
            let f = bin_hz(k);
            if f > lo && f < hi {
                *w = if f <= center {
                    (f - lo) / (center - lo)
                } else {
                    (hi - f) / (hi - center)
                };
            }
        }
        let sum: f64 = filt.iter().sum();
        if sum <= 0.0 {
            return Err(SignalError::Config(format!(
                "mel channel {m} covers no FFT bin; reduce n_mels or grow fft_size"
            )));
        }
        for w in filt.iter_mut() {
            *w /= sum;
        }
        filters.push(filt);
    }
    Ok(filters)
}

/// Hz center frequency of each mel channel, for diagnostics and tests.
pub fn mel_centers(sample_rate: u32, n_mels: usize) -> Vec<f64> {
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Floored log of mel-filtered power spectra: `log(max(energy, 1e-10))`.
pub fn log_mel(spec: &Spectrogram, n_mels: usize) -> Result<FeatureMatrix> {
    const FLOOR: f64 = 1e-10;
    let filters = mel_filterbank(spec.fft_size, spec.sample_rate, n_mels)?;
    let mut data = Vec::with_capacity(spec.t_len * n_mels);
    for t in 0..spec.t_len {
        let row = spec.row(t);
        for filt in &filters {
            let mut e = 0.0;
            for (k, w) in filt.iter().enumerate() {
                if *w != 0.0 {
                    e += w * row[k].norm_sqr();
                }
            }
            data.push(e.max(FLOOR).ln());
        }
    }
    Ok(FeatureMatrix {
        frames: Tensor::new(vec![spec.t_len, n_mels], data).expect("consistent dims"),
        frame_shift: spec.frame_shift,
        frame_length: spec.frame_length,
    })
}

/// Front-end defaults: 25 ms frames, 10 ms shift, 512-point FFT, 40 mels.
pub fn default_features(w: &Waveform) -> Result<FeatureMatrix> {
    let spec = stft(w, 0.025, 0.010, 512)?;
    log_mel(&spec, 40)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, n: usize, sr: u32) -> Waveform {
        let samples = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() * 0.5)
            .collect();
        Waveform::new(samples, sr)
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let w = sine(440.0, 16000, 16000);
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16000);
        assert_eq!(back.samples.len(), 16000);
        for (a, b) in w.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0, "{a} vs {b}");
        }
    }

    #[test]
    fn wav_zero_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.wav");
        write_wav(&path, &Waveform::new(vec![0.0; 1000], 16000)).unwrap();
        let back = read_wav(&path).unwrap();
        assert!(back.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn wav_stereo_rejected() {
        // Hand-build a 2-channel header.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&40u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes()); // stereo
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&64000u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        let e = parse_wav(&bytes).unwrap_err();
        assert!(e.to_string().contains("2 channels"), "{e}");
    }

    #[test]
    fn wav_truncated_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        write_wav(&path, &sine(100.0, 4000, 16000)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(2000);
        let e = parse_wav(&bytes).unwrap_err();
        assert!(e.to_string().contains("truncated"), "{e}");
    }

    #[test]
    fn stft_frame_count_and_coverage() {
        let w = Waveform::new(vec![0.1; 1000], 16000);
        // 400-sample frames, 160 shift: T = (1000 - 400)/160 + 1 = 4
        let s = stft(&w, 0.025, 0.010, 512).unwrap();
        assert_eq!(s.t_len, 4);
        assert_eq!(s.n_bins, 257);
    }

    #[test]
    fn stft_zero_signal() {
        let w = Waveform::new(vec![0.0; 1600], 16000);
        let s = stft(&w, 0.025, 0.010, 512).unwrap();
        assert!(s.bins.iter().all(|c| c.norm_sqr() == 0.0));
    }

    #[test]
    fn stft_dc_concentrates_in_bin_zero() {
        let w = Waveform::new(vec![0.5; 1600], 16000);
        let s = stft(&w, 0.025, 0.010, 512).unwrap();
        let row = s.row(0);
        let total: f64 = row.iter().map(|c| c.norm_sqr()).sum();
        let argmax = (0..s.n_bins)
            .max_by(|&a, &b| row[a].norm_sqr().partial_cmp(&row[b].norm_sqr()).unwrap())
            .unwrap();
        assert_eq!(argmax, 0);
        assert!(row[0].norm_sqr() / total > 0.5);
    }

    #[test]
    fn stft_sine_peaks_at_its_bin() {
        // f = k * sr / fft_size with k = 32 -> 1000 Hz
        let w = sine(32.0 * 16000.0 / 512.0, 1600, 16000);
        let s = stft(&w, 0.025, 0.010, 512).unwrap();
        let row = s.row(0);
        let argmax = (0..s.n_bins)
            .max_by(|&a, &b| row[a].norm_sqr().partial_cmp(&row[b].norm_sqr()).unwrap())
            .unwrap();
        assert_eq!(argmax, 32);
    }

    #[test]
    fn stft_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Waveform::new(samples.clone(), 16000);
        // One frame covering all 512 samples.
        let s = stft(&w, 512.0 / 16000.0, 0.010, 512).unwrap();
        let window = hann(512);
        let time_energy: f64 = samples
            .iter()
            .zip(&window)
            .map(|(x, w)| (x * w) * (x * w))
            .sum();
        let row = s.row(0);
        let mut freq_energy = row[0].norm_sqr() + row[256].norm_sqr();
        for k in 1..256 {
            freq_energy += 2.0 * row[k].norm_sqr();
        }
        freq_energy /= 512.0;
        let rel = (time_energy - freq_energy).abs() / time_energy;
        assert!(rel <= 1e-6, "relative error {rel}");
    }

    #[test]
    fn features_shift_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<f64> = (0..3200).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let full = default_features(&Waveform::new(samples.clone(), 16000)).unwrap();
        let shifted = default_features(&Waveform::new(samples[160..].to_vec(), 16000)).unwrap();
        assert_eq!(shifted.t_len(), full.t_len() - 1);
        for t in 0..shifted.t_len() {
            let (a, b) = (shifted.frames.row(t), full.frames.row(t + 1));
            assert_eq!(a, b, "frame {t} not bit-identical");
        }
    }

    #[test]
    fn log_mel_floor_on_silence() {
        let w = Waveform::new(vec![0.0; 1600], 16000);
        let s = stft(&w, 0.025, 0.010, 512).unwrap();
        let f = log_mel(&s, 40).unwrap();
        let expect = 1e-10f64.ln();
        assert!(f.frames.data().iter().all(|&v| v == expect));
    }

    #[test]
    fn log_mel_white_noise_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 160 * 101 + 400;
        let samples: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Waveform::new(samples, 16000);
        let s = stft(&w, 0.025, 0.010, 512).unwrap();
        let f = log_mel(&s, 40).unwrap();
        assert!(f.t_len() >= 100);
        let mut mean_db = vec![0.0f64; 40];
        for t in 0..100 {
            for (m, v) in f.frames.row(t).iter().enumerate() {
                mean_db[m] += 10.0 * v / std::f64::consts::LN_10;
            }
        }
        for v in mean_db.iter_mut() {
            *v /= 100.0;
        }
        let (lo, hi) = mean_db
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        assert!(hi - lo <= 6.0, "channel spread {} dB", hi - lo);
    }

    #[test]
    fn log_mel_tone_hits_nearest_channel() {
        let tone = 1500.0;
        let w = sine(tone, 3200, 16000);
        let s = stft(&w, 0.025, 0.010, 512).unwrap();
        let f = log_mel(&s, 40).unwrap();
        let centers = mel_centers(16000, 40);
        let want = (0..40)
            .min_by(|&a, &b| {
                (centers[a] - tone)
                    .abs()
                    .partial_cmp(&(centers[b] - tone).abs())
                    .unwrap()
            })
            .unwrap();
        let row = f.frames.row(0);
        let got = (0..40)
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
            .unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn bad_fft_size_rejected() {
        let w = Waveform::new(vec![0.0; 1600], 16000);
        assert!(matches!(
            stft(&w, 0.025, 0.010, 500),
            Err(SignalError::Config(_))
        ));
        assert!(matches!(
            stft(&w, 0.025, 0.010, 256),
            Err(SignalError::Config(_))
        ));
    }

    #[test]
    fn short_signal_rejected() {
        let w = Waveform::new(vec![0.0; 100], 16000);
        assert!(matches!(
            stft(&w, 0.025, 0.010, 512),
            Err(SignalError::TooShort { .. })
        ));
    }
}
