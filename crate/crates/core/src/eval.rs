//! Evaluation: corpus-level token error rate and the paired SIR sweep.
//!
//! The sweep walks an SIR grid under both enrollment conditions (clean and
//! overlapped), decoding every model variant on the same per-cell test set.
//! Cell seeds depend only on the cell, never on the variant, so variant
//! comparisons are paired sample-for-sample.

use crate::checkpoint::{self, CheckpointError};
use crate::mixture::toy::{generate_eval_cell, ToySample, ToyWorld};
use crate::model::{
    build_bias, ModelConfig, ModelError, ModelParams, StreamingDecoder, Variant,
    MAX_SYMBOLS_PER_FRAME,
};
use crate::seeds;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("evaluation config: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Error counts from aligning hypotheses against references.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WerCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub matches: usize,
    pub ref_tokens: usize,
}

impl WerCounts {
    pub fn edits(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Error rate as a fraction of reference tokens.
    pub fn rate(&self) -> f64 {
        self.edits() as f64 / self.ref_tokens as f64
    }

    pub fn percent(&self) -> f64 {
        100.0 * self.rate()
    }

    fn add(&mut self, other: &WerCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.matches += other.matches;
        self.ref_tokens += other.ref_tokens;
    }
}

/// Minimum-edit alignment of one utterance with unit costs. Among
/// minimum-cost alignments the one with the most matches wins; with edits
/// and matches both fixed the substitution/insertion/deletion split is
/// fully determined, which settles the remaining ties.
pub fn align_counts(reference: &[usize], hypothesis: &[usize]) -> WerCounts {
    let r = reference.len();
    let h = hypothesis.len();
    // Cell = (edits asc, matches desc), compared lexicographically.
    let mut dp = vec![(0usize, 0i64); (r + 1) * (h + 1)];
    let idx = |i: usize, j: usize| i * (h + 1) + j;
    for i in 1..=r {
        dp[idx(i, 0)] = (i, 0);
    }
    for j in 1..=h {
        dp[idx(0, j)] = (j, 0);
    }
    for i in 1..=r {
        for j in 1..=h {
            let (de, dm) = dp[idx(i - 1, j - 1)];
            let diag = if reference[i - 1] == hypothesis[j - 1] {
                (de, dm - 1)
            } else {
                (de + 1, dm)
            };
            let (ue, um) = dp[idx(i - 1, j)];
            let del = (ue + 1, um);
            let (le, lm) = dp[idx(i, j - 1)];
            let ins = (le + 1, lm);
            dp[idx(i, j)] = diag.min(del).min(ins);
        }
    }
    let (edits, neg_matches) = dp[idx(r, h)];
    let matches = (-neg_matches) as usize;
    // With E and M fixed: S + D = r − M, S + I = h − M, S + I + D = E.
    let substitutions = (r + h).saturating_sub(2 * matches + edits);
    WerCounts {
        substitutions,
        insertions: h - matches - substitutions,
        deletions: r - matches - substitutions,
        matches,
        ref_tokens: r,
    }
}

/// Corpus-level error rate: per-utterance alignments pooled, total edits
/// over total reference tokens.
pub fn wer(refs: &[Vec<usize>], hyps: &[Vec<usize>]) -> Result<WerCounts> {
    if refs.len() != hyps.len() {
        return Err(EvalError::Config(format!(
            "{} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut total = WerCounts::default();
    for (r, h) in refs.iter().zip(hyps) {
        total.add(&align_counts(r, h));
    }
    if total.ref_tokens == 0 {
        return Err(EvalError::Degenerate(
            "every reference is empty; error rate is undefined".into(),
        ));
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// SIR values in report column order.
    pub sir_grid: Vec<f64>,
    /// Enrollment conditions to cover.
    pub overlap: Vec<bool>,
    pub samples_per_cell: usize,
    /// Per-utterance noise SNR draw range, dB.
    pub snr_range: [f64; 2],
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sir_grid: (-5..=5).rev().map(f64::from).collect(),
            overlap: vec![false, true],
            samples_per_cell: 40,
            snr_range: [0.0, 20.0],
            seed: 2024,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sir_grid.is_empty() || self.overlap.is_empty() {
            return Err(EvalError::Config("empty sweep grid".into()));
        }
        if self.samples_per_cell == 0 {
            return Err(EvalError::Config("samples_per_cell must be positive".into()));
        }
        if !(self.snr_range[0] <= self.snr_range[1]) {
            return Err(EvalError::Config(format!(
                "snr_range [{}, {}] is inverted",
                self.snr_range[0], self.snr_range[1]
            )));
        }
        Ok(())
    }
}

/// One report cell: a variant decoded over one (condition, SIR) test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variant: Variant,
    pub overlapping_enrollment: bool,
    pub sir_db: f64,
    pub wer_percent: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_tokens: usize,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Variant name → checkpoint file hash it was decoded with.
    pub checkpoint_hashes: BTreeMap<String, String>,
    /// Hash of the world the test sets derive from.
    pub manifest_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn get(&self, variant: Variant, overlapping: bool, sir_db: f64) -> Option<&EvalRow> {
        self.rows.iter().find(|r| {
            r.variant == variant && r.overlapping_enrollment == overlapping && r.sir_db == sir_db
        })
    }

    /// Every (variant, condition, SIR) cell present exactly once.
    pub fn check_complete(&self, variants: &[Variant], sweep: &SweepConfig) -> Result<()> {
        let want = variants.len() * sweep.overlap.len() * sweep.sir_grid.len();
        if self.rows.len() != want {
            return Err(EvalError::Config(format!(
                "report has {} rows, grid needs {}",
                self.rows.len(),
                want
            )));
        }
        for &v in variants {
            for &o in &sweep.overlap {
                for &s in &sweep.sir_grid {
                    if self.get(v, o, s).is_none() {
                        return Err(EvalError::Config(format!(
                            "missing cell ({v}, overlap={o}, SIR {s} dB)"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Monospace table: one line per (variant, condition), SIR columns.
    pub fn table(&self, sweep: &SweepConfig) -> String {
        let mut variants: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !variants.contains(&r.variant) {
                variants.push(r.variant);
            }
        }
        variants.sort_by_key(|v| v.to_string());
        let mut out = String::new();
        out.push_str(&format!("{:<10} {:<11}", "variant", "enrollment"));
        for s in &sweep.sir_grid {
            out.push_str(&format!(" {:>7}", format!("{s:+.0}dB")));
        }
        out.push('\n');
        let width = 22 + 8 * sweep.sir_grid.len();
        out.push_str(&"-".repeat(width));
        out.push('\n');
        for &v in &variants {
            for &o in &sweep.overlap {
                let cond = if o { "overlapped" } else { "clean" };
                out.push_str(&format!("{:<10} {:<11}", v.to_string(), cond));
                for &s in &sweep.sir_grid {
                    match self.get(v, o, s) {
                        Some(r) => out.push_str(&format!(" {:>7.2}", r.wer_percent)),
                        None => out.push_str(&format!(" {:>7}", "-")),
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    /// One JSON record per cell.
    pub fn rows_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("row serializes"));
            out.push('\n');
        }
        out
    }
}

/// The fixed test set for one cell. Seeded by the cell alone so every
/// variant decodes identical audio.
pub fn cell_samples(
    world: &ToyWorld,
    sweep: &SweepConfig,
    overlapping: bool,
    sir_db: f64,
) -> Vec<ToySample> {
    let tag = format!("eval-cell/overlap-{overlapping}/sir-{sir_db:.3}");
    let cell_seed = seeds::fork(sweep.seed, &tag);
    generate_eval_cell(
        world,
        sweep.samples_per_cell,
        sir_db,
        overlapping,
        sweep.snr_range,
        cell_seed,
    )
}

fn world_hash(world: &ToyWorld) -> String {
    let text = serde_json::to_string(world).expect("world serializes");
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    crate::model::hex(&h.finalize())
}

fn decode_sample(
    cfg: &ModelConfig,
    params: &ModelParams,
    sample: &ToySample,
) -> Result<Vec<usize>> {
    let bias = build_bias(cfg, params, &sample.enrollment, Some(&sample.wake_tokens))?;
    let mut dec = StreamingDecoder::new(cfg, params, &bias, MAX_SYMBOLS_PER_FRAME)?;
    for t in 0..sample.command.row_count() {
        dec.push_frame(sample.command.row(t))?;
    }
    Ok(dec.into_hypothesis().tokens)
}

/// Decodes every checkpoint over the full (condition, SIR) grid.
pub fn sir_sweep(
    world: &ToyWorld,
    checkpoint_paths: &[&Path],
    sweep: &SweepConfig,
) -> Result<EvalReport> {
    sweep.validate()?;
    if checkpoint_paths.is_empty() {
        return Err(EvalError::Config("no checkpoints to evaluate".into()));
    }
    let mut models: Vec<(ModelConfig, ModelParams)> = Vec::new();
    let mut checkpoint_hashes = BTreeMap::new();
    for path in checkpoint_paths {
        let (cfg, params) = checkpoint::load(path)?;
        if models.iter().any(|(c, _)| c.variant == cfg.variant) {
            return Err(EvalError::Config(format!(
                "two checkpoints for the {} variant",
                cfg.variant
            )));
        }
        if cfg.feature_dim != world.config.n_tokens
            || cfg.vocab_size != world.config.n_tokens + 1
        {
            return Err(EvalError::Config(format!(
                "checkpoint {} expects feature dim {} / vocab {}, world provides {} / {}",
                path.display(),
                cfg.feature_dim,
                cfg.vocab_size,
                world.config.n_tokens,
                world.config.n_tokens + 1
            )));
        }
        checkpoint_hashes.insert(cfg.variant.to_string(), checkpoint::file_hash_hex(path)?);
        models.push((cfg, params));
    }

    let cells: Vec<(bool, f64)> = sweep
        .overlap
        .iter()
        .flat_map(|&o| sweep.sir_grid.iter().map(move |&s| (o, s)))
        .collect();
    let mut rows: Vec<EvalRow> = cells
        .par_iter()
        .map(|&(overlapping, sir_db)| {
            let samples = cell_samples(world, sweep, overlapping, sir_db);
            let refs: Vec<Vec<usize>> =
                samples.iter().map(|s| s.command_tokens.clone()).collect();
            let mut cell_rows = Vec::with_capacity(models.len());
            for (cfg, params) in &models {
                let hyps: Vec<Vec<usize>> = samples
                    .iter()
                    .map(|s| decode_sample(cfg, params, s))
                    .collect::<Result<_>>()?;
                let counts = wer(&refs, &hyps)?;
                cell_rows.push(EvalRow {
                    variant: cfg.variant,
                    overlapping_enrollment: overlapping,
                    sir_db,
                    wer_percent: counts.percent(),
                    substitutions: counts.substitutions,
                    insertions: counts.insertions,
                    deletions: counts.deletions,
                    ref_tokens: counts.ref_tokens,
                    sample_count: samples.len(),
                });
            }
            Ok(cell_rows)
        })
        .collect::<Result<Vec<Vec<EvalRow>>>>()?
        .into_iter()
        .flatten()
        .collect();
    rows.sort_by(|a, b| {
        (a.variant.to_string(), a.overlapping_enrollment)
            .partial_cmp(&(b.variant.to_string(), b.overlapping_enrollment))
            .unwrap()
            .then(b.sir_db.partial_cmp(&a.sir_db).unwrap())
    });
    let report = EvalReport {
        rows,
        checkpoint_hashes,
        manifest_hash: world_hash(world),
        seed: sweep.seed,
    };
    let variants: Vec<Variant> = models.iter().map(|(c, _)| c.variant).collect();
    report.check_complete(&variants, sweep)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::toy::{cheat_decode, ToyConfig};
    use crate::model::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_sequences_score_zero() {
        let refs = vec![vec![1, 2, 3], vec![4]];
        let counts = wer(&refs, &refs.clone()).unwrap();
        assert_eq!(counts.edits(), 0);
        assert_eq!(counts.rate(), 0.0);
        assert_eq!(counts.matches, 4);
    }

    #[test]
    fn single_substitution_is_a_third() {
        let counts = wer(&[vec![1, 2, 3]], &[vec![1, 9, 3]]).unwrap();
        assert_eq!(counts.substitutions, 1);
        assert_eq!(counts.insertions, 0);
        assert_eq!(counts.deletions, 0);
        assert!((counts.rate() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let counts = wer(&[vec![1, 2]], &[vec![]]).unwrap();
        assert_eq!(counts.deletions, 2);
        assert_eq!(counts.rate(), 1.0);
    }

    #[test]
    fn degenerate_and_mismatched_inputs_refused() {
        assert!(matches!(
            wer(&[vec![], vec![]], &[vec![1], vec![]]),
            Err(EvalError::Degenerate(_))
        ));
        assert!(matches!(
            wer(&[vec![1]], &[vec![1], vec![2]]),
            Err(EvalError::Config(_))
        ));
    }

    #[test]
    fn ties_resolve_toward_matches() {
        // [1,2] vs [2,1]: two substitutions and del+match+ins both cost 2;
        // the match-preserving alignment must win.
        let c = align_counts(&[1, 2], &[2, 1]);
        assert_eq!(c.edits(), 2);
        assert_eq!(c.matches, 1);
        assert_eq!(c.substitutions, 0);
        assert_eq!(c.insertions, 1);
        assert_eq!(c.deletions, 1);
    }

    #[test]
    fn counts_pool_across_utterances() {
        let refs = vec![vec![1, 2, 3], vec![5, 6]];
        let hyps = vec![vec![1, 9, 3], vec![5, 6, 7]];
        let c = wer(&refs, &hyps).unwrap();
        assert_eq!(c.substitutions, 1);
        assert_eq!(c.insertions, 1);
        assert_eq!(c.ref_tokens, 5);
        assert!((c.rate() - 2.0 / 5.0).abs() < 1e-15);
    }

    /// Plain distance-only Levenshtein, written independently of the
    /// alignment code above.
    fn oracle_distance(a: &[usize], b: &[usize]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for i in 1..=a.len() {
            let mut cur = vec![i; b.len() + 1];
            for j in 1..=b.len() {
                let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
                cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
            }
            prev = cur;
        }
        prev[b.len()]
    }

    fn all_seqs(alphabet: usize, max_len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &frontier {
                for t in 1..=alphabet {
                    let mut e = s.clone();
                    e.push(t);
                    next.push(e);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn alignment_matches_distance_oracle_exhaustively_small() {
        // Full exhaustive check at lengths ≤ 4 over 2 tokens; the wider
        // ≤ 6 / 3-token sweep runs in the acceptance suite.
        let seqs = all_seqs(2, 4);
        for a in &seqs {
            for b in &seqs {
                let c = align_counts(a, b);
                assert_eq!(c.edits(), oracle_distance(a, b), "{a:?} vs {b:?}");
                assert_eq!(c.matches + c.substitutions + c.deletions, a.len());
                assert_eq!(c.matches + c.substitutions + c.insertions, b.len());
            }
        }
    }

    #[test]
    fn alignment_matches_distance_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..500 {
            let a: Vec<usize> = (0..rng.gen_range(0..=6)).map(|_| rng.gen_range(1..=3)).collect();
            let b: Vec<usize> = (0..rng.gen_range(0..=6)).map(|_| rng.gen_range(1..=3)).collect();
            assert_eq!(align_counts(&a, &b).edits(), oracle_distance(&a, &b));
        }
    }

    #[test]
    fn perfect_decoder_scores_zero_in_a_cell() {
        let world = ToyWorld::generate(&ToyConfig::default(), 5).unwrap();
        let sweep = SweepConfig {
            samples_per_cell: 6,
            ..Default::default()
        };
        let samples = cell_samples(&world, &sweep, false, 0.0);
        assert_eq!(samples.len(), 6);
        let refs: Vec<Vec<usize>> = samples.iter().map(|s| s.command_tokens.clone()).collect();
        let hyps: Vec<Vec<usize>> = samples
            .iter()
            .map(|s| cheat_decode(&s.clean_command, world.config.frames_per_token))
            .collect();
        let counts = wer(&refs, &hyps).unwrap();
        assert_eq!(counts.edits(), 0, "cheat decode on clean features");
    }

    #[test]
    fn cells_are_paired_and_deterministic() {
        let world = ToyWorld::generate(&ToyConfig::default(), 5).unwrap();
        let sweep = SweepConfig {
            samples_per_cell: 4,
            ..Default::default()
        };
        let a = cell_samples(&world, &sweep, true, -3.0);
        let b = cell_samples(&world, &sweep, true, -3.0);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.command.bits_hash(), y.command.bits_hash());
            assert_eq!(x.enrollment.bits_hash(), y.enrollment.bits_hash());
        }
        let c = cell_samples(&world, &sweep, false, -3.0);
        assert_ne!(a[0].enrollment.bits_hash(), c[0].enrollment.bits_hash());
    }

    #[test]
    fn completeness_check_rejects_missing_cells() {
        let sweep = SweepConfig {
            sir_grid: vec![1.0, 0.0],
            overlap: vec![false],
            samples_per_cell: 1,
            ..Default::default()
        };
        let row = |sir: f64| EvalRow {
            variant: Variant::Baseline,
            overlapping_enrollment: false,
            sir_db: sir,
            wer_percent: 0.0,
            substitutions: 0,
            insertions: 0,
            deletions: 0,
            ref_tokens: 1,
            sample_count: 1,
        };
        let full = EvalReport {
            rows: vec![row(1.0), row(0.0)],
            checkpoint_hashes: BTreeMap::new(),
            manifest_hash: String::new(),
            seed: 0,
        };
        full.check_complete(&[Variant::Baseline], &sweep).unwrap();
        let missing = EvalReport {
            rows: vec![row(1.0)],
            checkpoint_hashes: BTreeMap::new(),
            manifest_hash: String::new(),
            seed: 0,
        };
        assert!(missing.check_complete(&[Variant::Baseline], &sweep).is_err());
    }

    #[test]
    fn sweep_is_deterministic_and_renders() {
        let world = ToyWorld::generate(&ToyConfig::default(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for (i, variant) in [Variant::Baseline, Variant::Robust].iter().enumerate() {
            let cfg = ModelConfig::toy(*variant);
            // Decode quality is irrelevant here; fresh weights suffice.
            let params = init_params(&cfg, 50 + i as u64).unwrap();
            let p = dir.path().join(format!("{variant}.ckpt"));
            checkpoint::save(&p, &cfg, &params).unwrap();
            paths.push(p);
        }
        let path_refs: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
        let sweep = SweepConfig {
            sir_grid: vec![2.0, -2.0],
            overlap: vec![false, true],
            samples_per_cell: 3,
            ..Default::default()
        };
        let r1 = sir_sweep(&world, &path_refs, &sweep).unwrap();
        let r2 = sir_sweep(&world, &path_refs, &sweep).unwrap();
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
        assert_eq!(r1.rows.len(), 8);
        assert_eq!(r1.checkpoint_hashes.len(), 2);
        for line in r1.rows_jsonl().lines() {
            let _: EvalRow = serde_json::from_str(line).unwrap();
        }
        let table = r1.table(&sweep);
        assert!(table.contains("baseline") && table.contains("robust"));
        assert!(table.contains("overlapped") && table.contains("clean"));
        assert!(table.contains("+2dB") && table.contains("-2dB"));
    }

    #[test]
    fn sweep_rejects_bad_checkpoint_sets() {
        let world = ToyWorld::generate(&ToyConfig::default(), 5).unwrap();
        let sweep = SweepConfig {
            sir_grid: vec![0.0],
            overlap: vec![false],
            samples_per_cell: 1,
            ..Default::default()
        };
        assert!(matches!(
            sir_sweep(&world, &[], &sweep),
            Err(EvalError::Config(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::toy(Variant::Baseline);
        let params = init_params(&cfg, 1).unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        checkpoint::save(&a, &cfg, &params).unwrap();
        checkpoint::save(&b, &cfg, &params).unwrap();
        let err = sir_sweep(&world, &[&a, &b], &sweep).unwrap_err();
        assert!(err.to_string().contains("two checkpoints"), "{err}");
    }
}
