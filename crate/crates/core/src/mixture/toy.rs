//! Desk-scale synthetic corpus in the feature domain.
//!
//! Each synthetic speaker has a signed signature vector; token k renders as
//! a few frames lighting feature dimension k-1 at the speaker's signature
//! level (signed, so each speaker stamps every dimension with a
//! gain-invariant polarity), plus small noise. Utterances start with the
//! speaker's wake word (unique per speaker), followed by a random command.
//! Mixing is frame-wise feature addition with the same ratio-controlled
//! gain logic as the audio path, so the corpus is separable by
//! construction: a cheating argmax classifier recovers clean token
//! sequences exactly, and separating a two-speaker mixture is possible
//! precisely when the listener knows whose signature to trust.

use crate::mixture::{MixtureError, Result};
use crate::seeds;
use crate::tensor::Tensor;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Blank transducer label; content tokens are 1-based.
pub const TOY_BLANK: usize = 0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Content vocabulary size; transducer vocab is one larger (blank 0).
    pub n_tokens: usize,
    pub n_speakers: usize,
    pub frames_per_token: usize,
    /// Amplitude of the uniform per-element rendering noise.
    pub render_noise: f64,
    /// Inclusive wake-word length bounds.
    pub wake_len: [usize; 2],
    /// Inclusive command length bounds.
    pub command_len: [usize; 2],
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_tokens: 16,
            n_speakers: 8,
            frames_per_token: 4,
            render_noise: 0.02,
            wake_len: [1, 2],
            command_len: [3, 6],
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens < 2 {
            return Err(MixtureError::BadSpec(format!(
                "vocabulary of {} content tokens is below the minimum of 2",
                self.n_tokens
            )));
        }
        if self.n_speakers < 2 {
            return Err(MixtureError::BadSpec(format!(
                "{} speakers is below the minimum of 2",
                self.n_speakers
            )));
        }
        if self.frames_per_token == 0 {
            return Err(MixtureError::BadSpec("frames_per_token must be positive".into()));
        }
        if self.wake_len[0] == 0 || self.wake_len[0] > self.wake_len[1] {
            return Err(MixtureError::BadSpec(format!(
                "bad wake length bounds {:?}",
                self.wake_len
            )));
        }
        if self.command_len[0] == 0 || self.command_len[0] > self.command_len[1] {
            return Err(MixtureError::BadSpec(format!(
                "bad command length bounds {:?}",
                self.command_len
            )));
        }
        // Distinct wake words must exist for every speaker.
        let mut space = 0usize;
        for len in self.wake_len[0]..=self.wake_len[1] {
            space = space.saturating_add(self.n_tokens.saturating_pow(len as u32));
        }
        if space < self.n_speakers {
            return Err(MixtureError::BadSpec(format!(
                "only {space} possible wake words for {} speakers",
                self.n_speakers
            )));
        }
        Ok(())
    }

    /// Transducer vocabulary: content tokens plus blank.
    pub fn vocab_size(&self) -> usize {
        self.n_tokens + 1
    }

    pub fn feature_dim(&self) -> usize {
        self.n_tokens
    }
}

/// Fixed per-corpus state: speaker signatures and their wake words.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyWorld {
    pub config: ToyConfig,
    /// `signatures[s][d]` in ±[0.2, 1.5]: magnitude is the speaker's level
    /// for token d+1, and the sign gives each speaker a gain-invariant
    /// binary stamp per dimension. A mixture gain rescales a competing
    /// speaker's magnitudes but never their signs, so sign agreement stays
    /// informative at every mixing ratio. The wide magnitude range makes
    /// per-speaker level normalization pay off even on clean speech: quiet
    /// tokens read reliably only for a listener who knows the speaker's
    /// levels, so enrollment is useful from pretraining onward.
    pub signatures: Vec<Vec<f64>>,
    /// Pairwise-distinct token sequences, one per speaker.
    pub wake_words: Vec<Vec<usize>>,
}

impl ToyWorld {
    pub fn generate(config: &ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::rng_from(seeds::fork(seed, "speakers"));
        let signatures = (0..config.n_speakers)
            .map(|_| {
                (0..config.n_tokens)
                    .map(|_| {
                        let magnitude = rng.gen_range(0.2..1.5);
                        if rng.gen::<bool>() {
                            magnitude
                        } else {
                            -magnitude
                        }
                    })
                    .collect()
            })
            .collect();
        let mut wake_words: Vec<Vec<usize>> = Vec::with_capacity(config.n_speakers);
        for _ in 0..config.n_speakers {
            loop {
                let len = rng.gen_range(config.wake_len[0]..=config.wake_len[1]);
                let w: Vec<usize> =
                    (0..len).map(|_| rng.gen_range(1..=config.n_tokens)).collect();
                if !wake_words.contains(&w) {
                    wake_words.push(w);
                    break;
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            signatures: signatures,
            wake_words,
        })
    }

    /// Renders a token sequence as `len * frames_per_token` feature frames.
    pub fn render(&self, speaker: usize, tokens: &[usize], rng: &mut impl Rng) -> Tensor {
        let fpt = self.config.frames_per_token;
        let m = self.config.feature_dim();
        let noise = self.config.render_noise;
        let sig = &self.signatures[speaker];
        let mut data = Vec::with_capacity(tokens.len() * fpt * m);
        for &tok in tokens {
            debug_assert!((1..=self.config.n_tokens).contains(&tok));
            for _ in 0..fpt {
                for d in 0..m {
                    let base = if d == tok - 1 { sig[d] } else { 0.0 };
                    let n = if noise > 0.0 { rng.gen_range(-noise..noise) } else { 0.0 };
                    data.push(base + n);
                }
            }
        }
        Tensor::new(vec![tokens.len() * fpt, m], data).expect("rendered shape is consistent")
    }
}

/// How the interferer touches the sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingMode {
    /// Target only; used for donor pretraining.
    Clean,
    /// Interferer over the command segment, enrollment untouched.
    CleanEnrollment,
    /// Interferer over the whole utterance.
    OverlappingEnrollment,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToySample {
    pub id: String,
    pub speaker: usize,
    pub interferer_speaker: Option<usize>,
    pub wake_tokens: Vec<usize>,
    pub command_tokens: Vec<usize>,
    /// Wake-word segment as the model hears it (mode-dependent mixing).
    pub enrollment: Tensor,
    /// Command segment as the model hears it.
    pub command: Tensor,
    /// Target-only renders, kept for oracle checks and diagnostics.
    pub clean_enrollment: Tensor,
    pub clean_command: Tensor,
    pub mode: MixingMode,
    pub sir_db: Option<f64>,
    pub snr_db: f64,
    pub achieved_sir_db: Option<f64>,
    pub achieved_snr_db: f64,
    pub interferer_gain: f64,
    pub noise_gain: f64,
}

impl ToySample {
    /// Frames the acoustic front half of the model will process.
    pub fn total_frames(&self) -> usize {
        self.enrollment.shape()[0] + self.command.shape()[0]
    }
}

fn mean_square(rows: &[f64]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|v| v * v).sum::<f64>() / rows.len() as f64
}

fn draw_in(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}

/// Synthesizes one sample. Pure in (world, arguments): the per-sample seed
/// drives every draw, so generation parallelizes without ordering effects.
pub fn make_sample(
    world: &ToyWorld,
    id: &str,
    mode: MixingMode,
    sir_range: [f64; 2],
    snr_range: [f64; 2],
    seed: u64,
) -> ToySample {
    let cfg = &world.config;
    let mut rng = seeds::rng_from(seed);
    let m = cfg.feature_dim();
    let fpt = cfg.frames_per_token;

    let speaker = rng.gen_range(0..cfg.n_speakers);
    let wake = world.wake_words[speaker].clone();
    let cmd_len = rng.gen_range(cfg.command_len[0]..=cfg.command_len[1]);
    let command: Vec<usize> = (0..cmd_len).map(|_| rng.gen_range(1..=cfg.n_tokens)).collect();
    let full: Vec<usize> = wake.iter().chain(command.iter()).copied().collect();

    let clean = world.render(speaker, &full, &mut rng);
    let enr_rows = wake.len() * fpt;
    let total_rows = full.len() * fpt;
    let mut mix = clean.data().to_vec();
    let clean_enrollment =
        Tensor::new(vec![enr_rows, m], mix[..enr_rows * m].to_vec()).expect("prefix rows");
    let clean_command =
        Tensor::new(vec![total_rows - enr_rows, m], mix[enr_rows * m..].to_vec())
            .expect("suffix rows");

    let mut interferer_speaker = None;
    let mut sir_db = None;
    let mut achieved_sir_db = None;
    let mut interferer_gain = 0.0;
    if mode != MixingMode::Clean {
        let other = loop {
            let j = rng.gen_range(0..cfg.n_speakers);
            if j != speaker {
                break j;
            }
        };
        let i_len = rng.gen_range(cfg.command_len[0]..=cfg.command_len[1]);
        let i_tokens: Vec<usize> = world.wake_words[other]
            .iter()
            .copied()
            .chain((0..i_len).map(|_| rng.gen_range(1..=cfg.n_tokens)))
            .collect();
        let i_render = world.render(other, &i_tokens, &mut rng);
        // Cyclic row tiling to the target's length; features do not need
        // the audio path's seam crossfade.
        let i_rows = i_render.shape()[0];
        let mut tiled = Vec::with_capacity(total_rows * m);
        for r in 0..total_rows {
            tiled.extend_from_slice(&i_render.data()[(r % i_rows) * m..(r % i_rows + 1) * m]);
        }

        let sir = draw_in(&mut rng, sir_range);
        let region = if mode == MixingMode::OverlappingEnrollment {
            0..total_rows * m
        } else {
            enr_rows * m..total_rows * m
        };
        let pt = mean_square(&mix[region.clone()]);
        let pi = mean_square(&tiled[region.clone()]);
        let g = (pt / (pi * 10f64.powf(sir / 10.0))).sqrt();
        for idx in region.clone() {
            mix[idx] += g * tiled[idx];
        }
        let scaled: Vec<f64> = tiled[region].iter().map(|v| v * g).collect();
        achieved_sir_db = Some(10.0 * (pt / mean_square(&scaled)).log10());
        sir_db = Some(sir);
        interferer_speaker = Some(other);
        interferer_gain = g;
    }

    // Noise over the whole utterance, one gain from the speech-mix power.
    let snr = draw_in(&mut rng, snr_range);
    let noise: Vec<f64> = (0..total_rows * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ps = mean_square(&mix);
    let pn = mean_square(&noise);
    let gn = (ps / (pn * 10f64.powf(snr / 10.0))).sqrt();
    for (slot, n) in mix.iter_mut().zip(&noise) {
        *slot += gn * n;
    }
    let scaled_noise: Vec<f64> = noise.iter().map(|v| v * gn).collect();
    let achieved_snr_db = 10.0 * (ps / mean_square(&scaled_noise)).log10();

    let enrollment = Tensor::new(vec![enr_rows, m], mix[..enr_rows * m].to_vec())
        .expect("prefix rows");
    let command_feat = Tensor::new(vec![total_rows - enr_rows, m], mix[enr_rows * m..].to_vec())
        .expect("suffix rows");

    ToySample {
        id: id.to_string(),
        speaker,
        interferer_speaker,
        wake_tokens: wake,
        command_tokens: command,
        enrollment,
        command: command_feat,
        clean_enrollment,
        clean_command,
        mode,
        sir_db,
        snr_db: snr,
        achieved_sir_db,
        achieved_snr_db,
        interferer_gain,
        noise_gain: gn,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyCorpusConfig {
    pub toy: ToyConfig,
    pub n_pretrain: usize,
    pub n_main: usize,
    pub n_finetune: usize,
    pub sir_range: [f64; 2],
    pub snr_range: [f64; 2],
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            toy: ToyConfig::default(),
            n_pretrain: 600,
            n_main: 800,
            n_finetune: 800,
            sir_range: [-5.0, 5.0],
            snr_range: [0.0, 20.0],
        }
    }
}

/// In-memory corpus; the three splits feed the three training stages.
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub world: ToyWorld,
    pub pretrain: Vec<ToySample>,
    pub main: Vec<ToySample>,
    pub finetune: Vec<ToySample>,
}

fn generate_split(
    world: &ToyWorld,
    split: &str,
    n: usize,
    mode: MixingMode,
    sir_range: [f64; 2],
    snr_range: [f64; 2],
    seed: u64,
) -> Vec<ToySample> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let id = format!("{split}/{i}");
            let s = seeds::fork(seed, &format!("sample/{id}"));
            make_sample(world, &id, mode, sir_range, snr_range, s)
        })
        .collect()
}

/// Builds the full three-split corpus deterministically from one seed.
pub fn generate_toy_corpus(cfg: &ToyCorpusConfig, seed: u64) -> Result<ToyCorpus> {
    let world = ToyWorld::generate(&cfg.toy, seed)?;
    let pretrain = generate_split(
        &world,
        "pretrain",
        cfg.n_pretrain,
        MixingMode::Clean,
        cfg.sir_range,
        cfg.snr_range,
        seed,
    );
    let main = generate_split(
        &world,
        "main",
        cfg.n_main,
        MixingMode::CleanEnrollment,
        cfg.sir_range,
        cfg.snr_range,
        seed,
    );
    let finetune = generate_split(
        &world,
        "finetune",
        cfg.n_finetune,
        MixingMode::OverlappingEnrollment,
        cfg.sir_range,
        cfg.snr_range,
        seed,
    );
    Ok(ToyCorpus {
        world,
        pretrain,
        main,
        finetune,
    })
}

/// Evaluation cell: fixed SIR, fixed enrollment condition, per-utterance
/// SNR drawn from the range. Seeded per cell so every model variant sees
/// byte-identical inputs.
pub fn generate_eval_cell(
    world: &ToyWorld,
    n: usize,
    sir_db: f64,
    overlapping_enrollment: bool,
    snr_range: [f64; 2],
    cell_seed: u64,
) -> Vec<ToySample> {
    let mode = if overlapping_enrollment {
        MixingMode::OverlappingEnrollment
    } else {
        MixingMode::CleanEnrollment
    };
    (0..n)
        .into_par_iter()
        .map(|i| {
            let id = format!("eval/{i}");
            let s = seeds::fork(cell_seed, &format!("sample/{id}"));
            make_sample(world, &id, mode, [sir_db, sir_db], snr_range, s)
        })
        .collect()
}

/// Oracle classifier: averages each token-sized frame group and reads the
/// dimension with the largest magnitude. Exact on clean renders by
/// construction.
pub fn cheat_decode(features: &Tensor, frames_per_token: usize) -> Vec<usize> {
    let t = features.shape()[0];
    let m = features.shape()[1];
    let groups = t / frames_per_token;
    let mut out = Vec::with_capacity(groups);
    for g in 0..groups {
        let mut mean = vec![0.0; m];
        for f in 0..frames_per_token {
            let row = features.row(g * frames_per_token + f);
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let mut best = 0;
        for d in 1..m {
            if mean[d].abs() > mean[best].abs() {
                best = d;
            }
        }
        out.push(best + 1);
    }
    out
}

// ---- persistence ----

pub fn save_world(world: &ToyWorld, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, world)?;
    f.flush()?;
    Ok(())
}

pub fn load_world(path: &Path) -> Result<ToyWorld> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let world: ToyWorld = serde_json::from_reader(f)?;
    world.config.validate()?;
    Ok(world)
}

/// One sample per line.
pub fn save_manifest(samples: &[ToySample], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<ToySample>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ToyCorpusConfig {
        ToyCorpusConfig {
            n_pretrain: 6,
            n_main: 6,
            n_finetune: 6,
            ..Default::default()
        }
    }

    #[test]
    fn too_few_speakers_rejected() {
        let cfg = ToyConfig {
            n_speakers: 1,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(MixtureError::BadSpec(_))));
        let cfg = ToyConfig {
            n_tokens: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn wake_word_space_too_small_rejected() {
        // 2 tokens, wake length exactly 1 → only 2 distinct wake words.
        let cfg = ToyConfig {
            n_tokens: 2,
            n_speakers: 3,
            wake_len: [1, 1],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn wake_words_are_distinct_and_in_range() {
        let world = ToyWorld::generate(&ToyConfig::default(), 42).unwrap();
        for (i, a) in world.wake_words.iter().enumerate() {
            assert!((1..=2).contains(&a.len()));
            assert!(a.iter().all(|&t| (1..=16).contains(&t)));
            for b in &world.wake_words[..i] {
                assert_ne!(a, b, "speakers {i} shares a wake word");
            }
        }
        for sig in &world.signatures {
            assert!(sig.iter().all(|&v| (0.2..1.5).contains(&v.abs())));
        }
        let negatives = world
            .signatures
            .iter()
            .flatten()
            .filter(|&&v| v < 0.0)
            .count();
        assert!(negatives > 0, "sign channel missing from signatures");
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = generate_toy_corpus(&small_cfg(), 7).unwrap();
        let b = generate_toy_corpus(&small_cfg(), 7).unwrap();
        let dump = |c: &ToyCorpus| {
            let mut s = serde_json::to_string(&c.world).unwrap();
            for x in c.pretrain.iter().chain(&c.main).chain(&c.finetune) {
                s.push_str(&serde_json::to_string(x).unwrap());
            }
            s
        };
        assert_eq!(dump(&a), dump(&b));
        let c = generate_toy_corpus(&small_cfg(), 8).unwrap();
        assert_ne!(dump(&a), dump(&c));
    }

    #[test]
    fn cheat_decoder_recovers_clean_sequences() {
        let corpus = generate_toy_corpus(&small_cfg(), 11).unwrap();
        let fpt = corpus.world.config.frames_per_token;
        for s in corpus.pretrain.iter().chain(&corpus.main).chain(&corpus.finetune) {
            assert_eq!(cheat_decode(&s.clean_command, fpt), s.command_tokens, "{}", s.id);
            assert_eq!(cheat_decode(&s.clean_enrollment, fpt), s.wake_tokens, "{}", s.id);
        }
    }

    #[test]
    fn frame_counts_follow_token_counts() {
        let corpus = generate_toy_corpus(&small_cfg(), 3).unwrap();
        for s in &corpus.main {
            assert_eq!(s.enrollment.shape()[0], s.wake_tokens.len() * 4);
            assert_eq!(s.command.shape()[0], s.command_tokens.len() * 4);
            assert!((3..=6).contains(&s.command_tokens.len()));
            assert!((1..=2).contains(&s.wake_tokens.len()));
            assert_eq!(s.enrollment.shape()[1], 16);
        }
    }

    #[test]
    fn achieved_ratios_match_requests_exactly() {
        let corpus = generate_toy_corpus(&small_cfg(), 19).unwrap();
        for s in corpus.main.iter().chain(&corpus.finetune) {
            let sir = s.sir_db.unwrap();
            assert!((s.achieved_sir_db.unwrap() - sir).abs() < 1e-9, "{}", s.id);
            assert!((-5.0..=5.0).contains(&sir));
            assert!((s.achieved_snr_db - s.snr_db).abs() < 1e-9);
            assert!((0.0..=20.0).contains(&s.snr_db));
        }
        for s in &corpus.pretrain {
            assert!(s.sir_db.is_none() && s.achieved_sir_db.is_none());
            assert_eq!(s.interferer_gain, 0.0);
        }
    }

    #[test]
    fn clean_enrollment_mode_leaves_enrollment_noise_only() {
        let world = ToyWorld::generate(&ToyConfig::default(), 5).unwrap();
        // High SNR so noise cannot mask an interferer leak.
        let s = make_sample(&world, "t", MixingMode::CleanEnrollment, [-5.0, -5.0], [20.0, 20.0], 99);
        for (a, b) in s.enrollment.data().iter().zip(s.clean_enrollment.data()) {
            assert!((a - b).abs() <= s.noise_gain, "enrollment carries interference");
        }
        // The overlapping mode must leak: some element moves more than the
        // noise bound allows.
        let s = make_sample(
            &world,
            "t",
            MixingMode::OverlappingEnrollment,
            [-5.0, -5.0],
            [20.0, 20.0],
            99,
        );
        let leak = s
            .enrollment
            .data()
            .iter()
            .zip(s.clean_enrollment.data())
            .any(|(a, b)| (a - b).abs() > s.noise_gain + 1e-12);
        assert!(leak, "overlapping enrollment shows no interference");
    }

    #[test]
    fn interferer_is_a_different_speaker() {
        let corpus = generate_toy_corpus(&small_cfg(), 23).unwrap();
        for s in corpus.main.iter().chain(&corpus.finetune) {
            assert_ne!(s.interferer_speaker.unwrap(), s.speaker);
        }
    }

    #[test]
    fn eval_cells_are_paired_across_calls() {
        let world = ToyWorld::generate(&ToyConfig::default(), 31).unwrap();
        let a = generate_eval_cell(&world, 5, -3.0, true, [0.0, 20.0], 77);
        let b = generate_eval_cell(&world, 5, -3.0, true, [0.0, 20.0], 77);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.command.bits_hash(), y.command.bits_hash());
            assert_eq!(x.enrollment.bits_hash(), y.enrollment.bits_hash());
            assert_eq!(x.command_tokens, y.command_tokens);
        }
        for s in &a {
            assert_eq!(s.sir_db, Some(-3.0));
            assert_eq!(s.mode, MixingMode::OverlappingEnrollment);
        }
    }

    #[test]
    fn manifest_roundtrip_is_bit_exact() {
        let corpus = generate_toy_corpus(&small_cfg(), 47).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let wpath = dir.path().join("world.json");
        let mpath = dir.path().join("main.jsonl");
        save_world(&corpus.world, &wpath).unwrap();
        save_manifest(&corpus.main, &mpath).unwrap();
        let world = load_world(&wpath).unwrap();
        assert_eq!(
            serde_json::to_string(&world).unwrap(),
            serde_json::to_string(&corpus.world).unwrap()
        );
        let loaded = load_manifest(&mpath).unwrap();
        assert_eq!(loaded.len(), corpus.main.len());
        for (a, b) in loaded.iter().zip(&corpus.main) {
            assert_eq!(a.command.bits_hash(), b.command.bits_hash());
            assert_eq!(a.enrollment.bits_hash(), b.enrollment.bits_hash());
            assert_eq!(a.noise_gain.to_bits(), b.noise_gain.to_bits());
        }
    }
}
