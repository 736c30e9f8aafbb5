//! Mixture synthesis: reverberate, split off the enrollment prefix, overlay
//! an interfering speaker at a target SIR, overlay noise at a target SNR.
//!
//! One gain scales the interferer across the enrollment and command
//! segments, and one gain scales the noise, so the achieved ratios measured
//! over the mixing region equal the requested ratios to floating-point
//! precision. Peak normalization happens last and is recorded, never baked
//! into the measured ratios.

pub mod toy;

use crate::seeds;
use crate::signal::{SignalError, Waveform};
use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MixtureError {
    #[error("degenerate input: {0} has zero power")]
    DegenerateInput(&'static str),
    #[error("cannot split enrollment: first word ends at {first_word_end}s, past the {limit}s limit")]
    Unsplittable { first_word_end: f64, limit: f64 },
    #[error("invalid mixture spec: {0}")]
    BadSpec(String),
    #[error("missing {kind} '{id}' in corpus")]
    MissingAsset { kind: &'static str, id: String },
    #[error("sample rate mismatch: {a} Hz vs {b} Hz")]
    RateMismatch { a: u32, b: u32 },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus record: {0}")]
    Record(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MixtureError>;

/// Recipe for one synthesized sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub target_utterance_id: String,
    pub interferer_utterance_id: String,
    /// Empty string disables noise (clean condition for tests).
    pub noise_id: String,
    pub sir_db: f64,
    pub snr_db: f64,
    pub rir_set_id: u64,
    /// Upper bound on the enrollment prefix, seconds.
    pub enrollment_cut: f64,
    /// When false the enrollment segment carries no interference.
    pub overlapping_enrollment: bool,
    pub rng_seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(-5.0..=5.0).contains(&self.sir_db) {
            return Err(MixtureError::BadSpec(format!(
                "sir {} dB outside [-5, 5]",
                self.sir_db
            )));
        }
        if !self.noise_id.is_empty() && !(0.0..=20.0).contains(&self.snr_db) {
            return Err(MixtureError::BadSpec(format!(
                "snr {} dB outside [0, 20]",
                self.snr_db
            )));
        }
        if !(self.enrollment_cut > 0.0 && self.enrollment_cut <= 1.5) {
            return Err(MixtureError::BadSpec(format!(
                "enrollment cut {}s outside (0, 1.5]",
                self.enrollment_cut
            )));
        }
        Ok(())
    }
}

/// One synthesized training/evaluation sample with its measurement stems.
#[derive(Debug, Clone)]
pub struct MixedSample {
    pub enrollment_mix: Waveform,
    pub command_mix: Waveform,
    /// Reverberated target prefix before any interference or noise.
    pub enrollment_clean: Waveform,
    /// Command-segment token sequence.
    pub transcript: Vec<usize>,
    /// Wake-word token sequence covered by the enrollment prefix.
    pub wake_text: Vec<usize>,
    pub achieved_sir_db: f64,
    pub achieved_snr_db: f64,
    pub overlapping_enrollment: bool,
    /// Joint scale applied to both mixtures so their shared peak is 0.9.
    pub peak_norm_factor: f64,
}

/// Room impulse response. The direct-path tap sits at the first sample.
#[derive(Debug, Clone)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub t60: f64,
}

impl Rir {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.taps.is_empty() {
            return Err(MixtureError::BadSpec("empty impulse response".into()));
        }
        if !self.taps.iter().all(|t| t.is_finite()) {
            return Err(MixtureError::BadSpec(
                "non-finite impulse response tap".into(),
            ));
        }
        let one_ms = (sample_rate as f64 / 1000.0).ceil() as usize;
        let first = self.taps.iter().position(|&t| t != 0.0).unwrap_or(0);
        if first > one_ms {
            return Err(MixtureError::BadSpec(format!(
                "direct path arrives {first} samples in, beyond the 1 ms bound"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordSpan {
    pub start: f64,
    pub end: f64,
    pub token: usize,
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub wave: Waveform,
    pub words: Vec<WordSpan>,
}

#[derive(Debug, Default)]
pub struct AudioCorpus {
    pub utterances: BTreeMap<String, Utterance>,
    pub noises: BTreeMap<String, Waveform>,
}

// ---- gains and measurement ----

fn power_over(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64
}

/// Gain for the interferer so that `10*log10(P_target / P_scaled)` equals
/// `sir_db`, powers taken over the leading overlap of the two signals.
pub fn gain_for_sir(target: &Waveform, interferer: &Waveform, sir_db: f64) -> Result<f64> {
    let overlap = target.samples.len().min(interferer.samples.len());
    let pt = power_over(&target.samples[..overlap]);
    let pi = power_over(&interferer.samples[..overlap]);
    if pt == 0.0 {
        return Err(MixtureError::DegenerateInput("target"));
    }
    if pi == 0.0 {
        return Err(MixtureError::DegenerateInput("interferer"));
    }
    Ok((pt / (pi * 10f64.powf(sir_db / 10.0))).sqrt())
}

/// Power ratio of two stems in dB: `10*log10(P_a / P_b)`.
pub fn measure_sir(target_component: &Waveform, interferer_component: &Waveform) -> Result<f64> {
    let pt = target_component.power();
    let pi = interferer_component.power();
    if pt == 0.0 {
        return Err(MixtureError::DegenerateInput("target component"));
    }
    if pi == 0.0 {
        return Err(MixtureError::DegenerateInput("interferer component"));
    }
    Ok(10.0 * (pt / pi).log10())
}

// ---- convolution ----

/// Direct kernels stay exact; longer ones go through the FFT for speed.
const DIRECT_CONV_MAX: usize = 64;

/// Full convolution: output length `input + taps - 1`.
pub fn apply_rir(w: &Waveform, rir: &Rir) -> Result<Waveform> {
    rir.validate(w.sample_rate)?;
    let out = if rir.taps.len() <= DIRECT_CONV_MAX {
        convolve_direct(&w.samples, &rir.taps)
    } else {
        convolve_fft(&w.samples, &rir.taps)
    };
    Ok(Waveform::new(out, w.sample_rate))
}

fn convolve_direct(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; x.len() + h.len() - 1];
    for (i, &xv) in x.iter().enumerate() {
        for (j, &hv) in h.iter().enumerate() {
            out[i + j] += xv * hv;
        }
    }
    out
}

fn convolve_fft(x: &[f64], h: &[f64]) -> Vec<f64> {
    let out_len = x.len() + h.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);
    let mut a = vec![Complex64::new(0.0, 0.0); n];
    let mut b = vec![Complex64::new(0.0, 0.0); n];
    for (slot, &v) in a.iter_mut().zip(x) {
        slot.re = v;
    }
    for (slot, &v) in b.iter_mut().zip(h) {
        slot.re = v;
    }
    fft.process(&mut a);
    fft.process(&mut b);
    for (av, bv) in a.iter_mut().zip(&b) {
        *av *= bv;
    }
    ifft.process(&mut a);
    let scale = 1.0 / n as f64;
    a[..out_len].iter().map(|c| c.re * scale).collect()
}

// ---- enrollment split ----

/// Sample index and word count of the enrollment cut: the end of the last
/// word finishing at or before `max_cut` seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitPoint {
    pub sample: usize,
    pub words: usize,
    pub seconds: f64,
}

pub fn find_enrollment_cut(
    words: &[WordSpan],
    max_cut: f64,
    sample_rate: u32,
) -> Result<SplitPoint> {
    let first_end = words
        .first()
        .map(|w| w.end)
        .ok_or(MixtureError::BadSpec("utterance has no words".into()))?;
    let mut cut = None;
    for (i, w) in words.iter().enumerate() {
        if w.end <= max_cut {
            cut = Some((i + 1, w.end));
        } else {
            break;
        }
    }
    let (count, seconds) = cut.ok_or(MixtureError::Unsplittable {
        first_word_end: first_end,
        limit: max_cut,
    })?;
    Ok(SplitPoint {
        sample: (seconds * sample_rate as f64).round() as usize,
        words: count,
        seconds,
    })
}

/// Splits a waveform at the enrollment cut derived from word boundaries.
pub fn split_enrollment(
    w: &Waveform,
    words: &[WordSpan],
    max_cut: f64,
) -> Result<(Waveform, Waveform, SplitPoint)> {
    let point = find_enrollment_cut(words, max_cut, w.sample_rate)?;
    let cut = point.sample.min(w.samples.len());
    Ok((
        Waveform::new(w.samples[..cut].to_vec(), w.sample_rate),
        Waveform::new(w.samples[cut..].to_vec(), w.sample_rate),
        point,
    ))
}

// ---- RIRs ----

/// Exponentially decaying white-noise tail behind a unit direct-path tap.
/// The envelope reaches -60 dB at `t60` seconds.
pub fn parametric_rir(rng: &mut impl Rng, sample_rate: u32, t60: f64) -> Rir {
    let len = ((t60 * sample_rate as f64).round() as usize).max(1);
    let decay = -3.0 * std::f64::consts::LN_10 / (t60 * sample_rate as f64);
    let mut taps = Vec::with_capacity(len);
    taps.push(1.0);
    for i in 1..len {
        let env = (decay * i as f64).exp();
        taps.push(0.3 * rng.gen_range(-1.0..1.0) * env);
    }
    Rir { taps, t60 }
}

/// The three per-room responses (target, interferer, noise source) derived
/// deterministically from a set id.
pub fn rir_set(rir_set_id: u64, sample_rate: u32) -> [Rir; 3] {
    let mut rng = seeds::rng_from(seeds::fork(rir_set_id, "rir-set"));
    std::array::from_fn(|_| {
        let t60 = rng.gen_range(0.2..0.6);
        parametric_rir(&mut rng, sample_rate, t60)
    })
}

// ---- looping ----

/// Repeats `src` to exactly `len` samples, crossfading `crossfade` samples
/// at each seam; truncates when `src` is already long enough.
pub fn tile_to(src: &[f64], len: usize, crossfade: usize) -> Vec<f64> {
    assert!(!src.is_empty(), "cannot tile an empty signal");
    if src.len() >= len {
        return src[..len].to_vec();
    }
    let cf = crossfade.min(src.len() / 2);
    let mut out = src.to_vec();
    while out.len() < len {
        let seam = out.len() - cf;
        for j in 0..cf {
            let w = (j + 1) as f64 / (cf + 1) as f64;
            out[seam + j] = out[seam + j] * (1.0 - w) + src[j] * w;
        }
        out.extend_from_slice(&src[cf..]);
    }
    out.truncate(len);
    out
}

// ---- synthesis ----

fn add_scaled(dst: &mut [f64], src: &[f64], gain: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += gain * s;
    }
}

const NOISE_CROSSFADE_S: f64 = 0.010;

/// Runs the full synthesis chain for one spec. Pure in (spec, corpus).
pub fn synthesize(spec: &MixtureSpec, corpus: &AudioCorpus) -> Result<MixedSample> {
    spec.validate()?;
    let target = corpus
        .utterances
        .get(&spec.target_utterance_id)
        .ok_or_else(|| MixtureError::MissingAsset {
            kind: "utterance",
            id: spec.target_utterance_id.clone(),
        })?;
    let interferer = corpus
        .utterances
        .get(&spec.interferer_utterance_id)
        .ok_or_else(|| MixtureError::MissingAsset {
            kind: "utterance",
            id: spec.interferer_utterance_id.clone(),
        })?;
    let sr = target.wave.sample_rate;
    if interferer.wave.sample_rate != sr {
        return Err(MixtureError::RateMismatch {
            a: sr,
            b: interferer.wave.sample_rate,
        });
    }

    let [rir_t, rir_i, rir_n] = rir_set(spec.rir_set_id, sr);
    let t_rev = apply_rir(&target.wave, &rir_t)?;
    let i_rev = apply_rir(&interferer.wave, &rir_i)?;

    let cut = find_enrollment_cut(&target.words, spec.enrollment_cut, sr)?;
    let total = t_rev.samples.len();
    let c = cut.sample.min(total);
    let crossfade = (NOISE_CROSSFADE_S * sr as f64).round() as usize;

    let mut enr = t_rev.samples[..c].to_vec();
    let mut cmd = t_rev.samples[c..].to_vec();
    let enrollment_clean = Waveform::new(enr.clone(), sr);

    // One interferer gain for both segments. In the overlapping condition
    // the gain comes from full-utterance powers; in the clean-enrollment
    // condition interference exists only over the command, so the ratio is
    // defined there.
    let achieved_sir_db = if spec.overlapping_enrollment {
        let i_full = tile_to(&i_rev.samples, total, crossfade);
        let i_w = Waveform::new(i_full.clone(), sr);
        let g = gain_for_sir(&t_rev, &i_w, spec.sir_db)?;
        add_scaled(&mut enr, &i_full[..c], g);
        add_scaled(&mut cmd, &i_full[c..], g);
        let scaled = Waveform::new(i_full.iter().map(|s| s * g).collect(), sr);
        measure_sir(&t_rev, &scaled)?
    } else {
        let i_cmd = tile_to(&i_rev.samples, total - c, crossfade);
        let i_w = Waveform::new(i_cmd.clone(), sr);
        let t_cmd = Waveform::new(t_rev.samples[c..].to_vec(), sr);
        let g = gain_for_sir(&t_cmd, &i_w, spec.sir_db)?;
        add_scaled(&mut cmd, &i_cmd, g);
        let scaled = Waveform::new(i_cmd.iter().map(|s| s * g).collect(), sr);
        measure_sir(&t_cmd, &scaled)?
    };

    // One noise gain from the full pre-noise speech mixture, stream split at
    // the enrollment boundary.
    let achieved_snr_db = if spec.noise_id.is_empty() {
        f64::INFINITY
    } else {
        let noise = corpus
            .noises
            .get(&spec.noise_id)
            .ok_or_else(|| MixtureError::MissingAsset {
                kind: "noise",
                id: spec.noise_id.clone(),
            })?;
        if noise.sample_rate != sr {
            return Err(MixtureError::RateMismatch {
                a: sr,
                b: noise.sample_rate,
            });
        }
        let n_rev = apply_rir(noise, &rir_n)?;
        // Deterministic per-sample rotation so different specs hit
        // different noise segments.
        let mut rng = seeds::rng_from(seeds::fork(spec.rng_seed, "noise-offset"));
        let offset = rng.gen_range(0..n_rev.samples.len());
        let rotated: Vec<f64> = n_rev.samples[offset..]
            .iter()
            .chain(&n_rev.samples[..offset])
            .copied()
            .collect();
        let n_full = tile_to(&rotated, total, crossfade);

        let mut speech = enr.clone();
        speech.extend_from_slice(&cmd);
        let speech_w = Waveform::new(speech, sr);
        let n_w = Waveform::new(n_full.clone(), sr);
        let gn = gain_for_sir(&speech_w, &n_w, spec.snr_db)?;
        add_scaled(&mut enr, &n_full[..c], gn);
        add_scaled(&mut cmd, &n_full[c..], gn);
        let scaled: Vec<f64> = n_full.iter().map(|s| s * gn).collect();
        measure_sir(&speech_w, &Waveform::new(scaled, sr))?
    };

    // Joint peak normalization, recorded rather than hidden.
    let peak = enr
        .iter()
        .chain(cmd.iter())
        .fold(0.0f64, |m, s| m.max(s.abs()));
    if peak == 0.0 {
        return Err(MixtureError::DegenerateInput("mixture"));
    }
    let factor = 0.9 / peak;
    for s in enr.iter_mut() {
        *s *= factor;
    }
    for s in cmd.iter_mut() {
        *s *= factor;
    }

    let wake_text = target.words[..cut.words].iter().map(|w| w.token).collect();
    let transcript = target.words[cut.words..].iter().map(|w| w.token).collect();
    Ok(MixedSample {
        enrollment_mix: Waveform::new(enr, sr),
        command_mix: Waveform::new(cmd, sr),
        enrollment_clean,
        transcript,
        wake_text,
        achieved_sir_db,
        achieved_snr_db,
        overlapping_enrollment: spec.overlapping_enrollment,
        peak_norm_factor: factor,
    })
}
