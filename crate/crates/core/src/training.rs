//! Staged training loop.
//!
//! Three stages share one mechanism: Adam with global-norm gradient
//! clipping, epochs batched under an acoustic-frame budget, a held-out
//! validation slice selected by a stable per-sample hash, and a state
//! record that serializes the optimizer, the batch plan, and the RNG
//! position so a resumed run is bit-identical to an uninterrupted one.
//!
//! The bias-fusion variants are warm-started rather than trained from
//! scratch: the streaming donor contributes the recognition trunk, the
//! offline donor contributes the enrollment side and seeds the wake-text
//! decoder from its label predictor, and whatever has no donor analogue
//! starts fresh.

use crate::checkpoint::{self, CheckpointError};
use crate::mixture::toy::ToySample;
use crate::model::{
    init_params, model_loss, ModelConfig, ModelError, ModelParams, ParamBinding,
};
use crate::seeds::{self, RngSnapshot};
use crate::tensor::{Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;
pub const GRAD_CLIP: f64 = 5.0;
/// One sample in this many goes to the validation slice.
pub const VAL_SPLIT_DENOM: u64 = 10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("training config: {0}")]
    Config(String),
    #[error("training state: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Donor models on clean, non-overlapped data.
    Pretrain,
    /// Warm-started variants on clean-enrollment mixtures.
    Main,
    /// Same models pushed into overlapped-enrollment mixtures.
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Pretrain => "pretrain",
            Stage::Main => "main",
            Stage::Finetune => "finetune",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    /// Per-batch budget in acoustic frames (enrollment plus command rows).
    pub max_batch_frames: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl StageConfig {
    /// Schedules sized for the synthetic corpus.
    pub fn toy(stage: Stage, seed: u64) -> Self {
        let (learning_rate, max_batch_frames, epochs) = match stage {
            Stage::Pretrain => (0.01, 900, 60),
            Stage::Main => (0.01, 900, 30),
            Stage::Finetune => (0.005, 1200, 40),
        };
        Self {
            stage,
            learning_rate,
            max_batch_frames,
            epochs,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!(
                "learning_rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.max_batch_frames == 0 {
            return Err(TrainError::Config(
                "max_batch_frames must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One supervised utterance: the enrollment cue, the command audio, the
/// wake-word transcript for text-guided biasing, and the target labels.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub enrollment: Tensor,
    pub command: Tensor,
    pub wake_tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl TrainSample {
    pub fn from_toy(s: &ToySample) -> Self {
        Self {
            id: s.id.clone(),
            enrollment: s.enrollment.clone(),
            command: s.command.clone(),
            wake_tokens: s.wake_tokens.clone(),
            labels: s.command_tokens.clone(),
        }
    }

    /// Cost of the sample against the batch frame budget.
    pub fn frames(&self) -> usize {
        self.enrollment.row_count() + self.command.row_count()
    }
}

/// Stable id-hash split so membership never depends on corpus order.
pub fn split_train_val<'a>(
    samples: &'a [TrainSample],
    seed: u64,
) -> (Vec<&'a TrainSample>, Vec<&'a TrainSample>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in samples {
        if seeds::fork(seed, &format!("val-split/{}", s.id)) % VAL_SPLIT_DENOM == 0 {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64 },
    /// A non-finite gradient arrived; nothing was touched except the
    /// skip counter.
    Skipped,
}

/// Adam with bias correction and global-norm clipping. Serializes whole so
/// resumed runs continue the same optimizer trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
    pub skip_count: u64,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = |p: &ModelParams| {
            p.iter()
                .map(|(path, t)| (path.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        Self {
            m: zeros(params),
            v: zeros(params),
            step: 0,
            skip_count: 0,
        }
    }

    /// Applies one update. `grads` must cover exactly the tracked
    /// parameters; any non-finite gradient skips the whole step without
    /// touching parameters, moments, or the step counter.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<StepOutcome> {
        if grads.len() != self.m.len() {
            return Err(TrainError::State(format!(
                "gradient set has {} entries, optimizer tracks {}",
                grads.len(),
                self.m.len()
            )));
        }
        let mut sq = 0.0;
        for (path, g) in grads {
            let m = self.m.get(path).ok_or_else(|| {
                TrainError::State(format!("gradient for untracked parameter '{path}'"))
            })?;
            if g.shape() != m.shape() {
                return Err(TrainError::State(format!(
                    "gradient shape {:?} for '{path}' does not match parameter {:?}",
                    g.shape(),
                    m.shape()
                )));
            }
            for &v in g.data() {
                if !v.is_finite() {
                    self.skip_count += 1;
                    return Ok(StepOutcome::Skipped);
                }
                sq += v * v;
            }
        }
        let grad_norm = sq.sqrt();
        let scale = if grad_norm > GRAD_CLIP {
            GRAD_CLIP / grad_norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (path, g) in grads {
            let m = self.m.get_mut(path).expect("checked above");
            let v = self.v.get_mut(path).expect("checked above");
            let w = params.get_mut(path)?;
            let (md, vd, wd) = (m.data_mut(), v.data_mut(), w.data_mut());
            for i in 0..wd.len() {
                let gi = g.data()[i] * scale;
                md[i] = BETA1 * md[i] + (1.0 - BETA1) * gi;
                vd[i] = BETA2 * vd[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                wd[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(StepOutcome::Applied { grad_norm })
    }
}

/// Where each warm-started parameter came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSource {
    DonorStreaming,
    DonorOffline,
    Fresh,
}

/// Builds initial parameters for `cfg` from two pretrained donors.
///
/// The streaming donor hands over the recognition trunk (acoustic encoder,
/// label predictor, joint network); the offline donor hands over the
/// enrollment encoder and its bias projection, and its label predictor
/// seeds the wake-text decoder. Everything without a donor analogue is
/// freshly initialized from `fresh_seed`: the fusion and text attentions,
/// the text-decoder output, the text bias projection, and the pooled gate,
/// which restarts at its unit-gate init because neither donor's gate pairs
/// with the other donor's enrollment encoder. Every parameter gets a
/// provenance tag; a donor missing a needed parameter, or offering the
/// wrong shape, is an error naming the path.
pub fn warm_start(
    cfg: &ModelConfig,
    streaming_donor: &ModelParams,
    offline_donor: &ModelParams,
    fresh_seed: u64,
) -> Result<(ModelParams, BTreeMap<String, ParamSource>)> {
    let mut params = init_params(cfg, fresh_seed)?;
    let mut sources = BTreeMap::new();
    let paths: Vec<String> = params.paths().cloned().collect();
    for path in paths {
        let (source, pick) = if path.starts_with("asr.")
            || path.starts_with("pred.")
            || path.starts_with("joint.")
        {
            (
                ParamSource::DonorStreaming,
                Some((streaming_donor, path.clone())),
            )
        } else if path.starts_with("enr.") || path.starts_with("fuse.enr_bias.") {
            (
                ParamSource::DonorOffline,
                Some((offline_donor, path.clone())),
            )
        } else if let Some(rest) = path.strip_prefix("txt.dec.") {
            if rest.starts_with("out.") {
                (ParamSource::Fresh, None)
            } else {
                (
                    ParamSource::DonorOffline,
                    Some((offline_donor, format!("pred.{rest}"))),
                )
            }
        } else {
            (ParamSource::Fresh, None)
        };
        if let Some((donor, donor_path)) = pick {
            let t = donor.get(&donor_path).map_err(|_| {
                TrainError::Config(format!(
                    "warm start: donor has no '{donor_path}' to seed '{path}'"
                ))
            })?;
            let dst = params.get_mut(&path)?;
            if t.shape() != dst.shape() {
                return Err(TrainError::Config(format!(
                    "warm start: donor '{donor_path}' shape {:?} does not fit '{path}' shape {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
        }
        sources.insert(path, source);
    }
    Ok((params, sources))
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    pub params: ModelParams,
    pub opt: Adam,
    pub epoch: usize,
    /// Planned batches (indices into the train split) for the current epoch.
    pub epoch_batches: Vec<Vec<usize>>,
    pub batch_cursor: usize,
    /// Running sums for the epoch in progress, so resumed metrics match.
    pub epoch_loss_sum: f64,
    pub epoch_grad_norm_sum: f64,
    pub epoch_steps: u64,
    pub rng: RngSnapshot,
    pub best_val: Option<f64>,
}

impl TrainState {
    pub fn fresh(stage_cfg: &StageConfig, params: ModelParams) -> Self {
        let opt = Adam::new(&params);
        let rng = seeds::rng_from(seeds::fork(stage_cfg.seed, "epochs"));
        Self {
            stage: stage_cfg.stage,
            params,
            opt,
            epoch: 0,
            epoch_batches: Vec::new(),
            batch_cursor: 0,
            epoch_loss_sum: 0.0,
            epoch_grad_norm_sum: 0.0,
            epoch_steps: 0,
            rng: seeds::snapshot(&rng),
            best_val: None,
        }
    }
}

/// JSON state files round-trip f64 exactly, so save/load never perturbs
/// a run.
pub fn save_state(path: &Path, state: &TrainState) -> Result<()> {
    let text = serde_json::to_string(state)
        .map_err(|e| TrainError::State(format!("serialize: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| TrainError::State(format!("parse: {e}")))
}

/// One line per epoch in the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub mean_grad_norm: f64,
    pub skip_count: u64,
}

/// Mean batch loss and per-parameter gradients at the current parameters.
/// A non-finite loss returns early with empty gradients; the caller counts
/// it as a skipped step.
pub fn batch_loss_and_grads(
    cfg: &ModelConfig,
    params: &ModelParams,
    batch: &[&TrainSample],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let mut tape = Tape::new();
    let pb = ParamBinding::trainable(&mut tape, params);
    let mut losses = Vec::with_capacity(batch.len());
    for s in batch {
        let l = model_loss(
            &mut tape,
            &pb,
            cfg,
            &s.enrollment,
            &s.command,
            Some(&s.wake_tokens),
            &s.labels,
        )?;
        losses.push(l);
    }
    let total = tape.sum_vars(&losses)?;
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    let loss = tape.value(mean).value();
    if !loss.is_finite() {
        return Ok((loss, BTreeMap::new()));
    }
    tape.backward(mean)?;
    let mut grads = BTreeMap::new();
    for (path, var) in pb.ordered() {
        let g = tape
            .grad(var)
            .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape().to_vec()));
        grads.insert(path.to_string(), g);
    }
    Ok((loss, grads))
}

/// Held-out loss at fixed parameters.
fn validation_loss(
    cfg: &ModelConfig,
    params: &ModelParams,
    val: &[&TrainSample],
) -> Result<f64> {
    let mut sum = 0.0;
    for s in val {
        let mut tape = Tape::new();
        let pb = ParamBinding::frozen(&mut tape, params);
        let l = model_loss(
            &mut tape,
            &pb,
            cfg,
            &s.enrollment,
            &s.command,
            Some(&s.wake_tokens),
            &s.labels,
        )?;
        sum += tape.value(l).value();
    }
    Ok(sum / val.len() as f64)
}

/// Shuffle, length-bucket, pack under the frame budget, then shuffle the
/// batch order; the plan lands in the state so a resume replays it.
fn plan_epoch(state: &mut TrainState, train: &[&TrainSample], max_batch_frames: usize) {
    let mut rng = seeds::restore(&state.rng);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut rng);
    // Stable sort: equal lengths keep their shuffled order.
    idx.sort_by_key(|&i| train[i].frames());
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut used = 0usize;
    for i in idx {
        let f = train[i].frames();
        if !cur.is_empty() && used + f > max_batch_frames {
            batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += f;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(&mut rng);
    state.epoch_batches = batches;
    state.batch_cursor = 0;
    state.epoch_loss_sum = 0.0;
    state.epoch_grad_norm_sum = 0.0;
    state.epoch_steps = 0;
    state.rng = seeds::snapshot(&rng);
}

#[derive(Debug)]
pub enum StageInit {
    Fresh(ModelParams),
    Resume(TrainState),
}

/// Optional artifacts a stage run writes as it goes.
#[derive(Debug, Default, Clone, Copy)]
pub struct StageOutput<'a> {
    /// Best-validation checkpoint.
    pub checkpoint_path: Option<&'a Path>,
    /// Resume state, rewritten at every epoch boundary.
    pub state_path: Option<&'a Path>,
    /// Metrics log, one JSON line appended per epoch.
    pub metrics_path: Option<&'a Path>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub stage: Stage,
    pub epochs_run: usize,
    pub steps: u64,
    pub skip_count: u64,
    /// Mean train loss of the first epoch this run executed.
    pub initial_train_loss: f64,
    /// Mean train loss of the last epoch.
    pub final_train_loss: f64,
    pub best_val_loss: Option<f64>,
    /// Parameters behind the best-validation checkpoint, on the f32 grid
    /// exactly as a reader of that checkpoint will see them.
    pub best_params: ModelParams,
}

/// Runs (or resumes) one training stage to its configured epoch count.
///
/// Resume contract: `samples` must be the identical list the original run
/// saw; the state carries indices into its train split.
pub fn run_stage(
    cfg: &ModelConfig,
    stage_cfg: &StageConfig,
    samples: &[TrainSample],
    init: StageInit,
    out: &StageOutput,
) -> Result<(TrainState, RunReport)> {
    cfg.validate()?;
    stage_cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Config(format!(
            "stage {} has no training samples",
            stage_cfg.stage
        )));
    }
    let (train, val) = split_train_val(samples, stage_cfg.seed);
    if train.is_empty() {
        return Err(TrainError::Config(
            "validation split consumed every sample".into(),
        ));
    }
    let mut state = match init {
        StageInit::Fresh(params) => {
            params.check_complete(cfg)?;
            TrainState::fresh(stage_cfg, params)
        }
        StageInit::Resume(s) => {
            if s.stage != stage_cfg.stage {
                return Err(TrainError::State(format!(
                    "state is for stage {}, run requests {}",
                    s.stage, stage_cfg.stage
                )));
            }
            s.params.check_complete(cfg)?;
            s
        }
    };
    let mut initial_train_loss = None;
    let mut final_train_loss = f64::NAN;
    let mut epochs_run = 0usize;
    let mut best_params = checkpoint::quantize(&state.params);

    while state.epoch < stage_cfg.epochs {
        if state.epoch_batches.is_empty() {
            plan_epoch(&mut state, &train, stage_cfg.max_batch_frames);
        }
        while state.batch_cursor < state.epoch_batches.len() {
            let batch: Vec<&TrainSample> = state.epoch_batches[state.batch_cursor]
                .iter()
                .map(|&i| train[i])
                .collect();
            let (loss, grads) = batch_loss_and_grads(cfg, &state.params, &batch)?;
            if grads.is_empty() {
                state.opt.skip_count += 1;
            } else {
                match state.opt.step(&mut state.params, &grads, stage_cfg.learning_rate)? {
                    StepOutcome::Applied { grad_norm } => {
                        state.epoch_loss_sum += loss;
                        state.epoch_grad_norm_sum += grad_norm;
                        state.epoch_steps += 1;
                    }
                    StepOutcome::Skipped => {}
                }
            }
            state.batch_cursor += 1;
        }
        let train_loss = if state.epoch_steps > 0 {
            state.epoch_loss_sum / state.epoch_steps as f64
        } else {
            f64::NAN
        };
        let mean_grad_norm = if state.epoch_steps > 0 {
            state.epoch_grad_norm_sum / state.epoch_steps as f64
        } else {
            f64::NAN
        };
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            validation_loss(cfg, &state.params, &val)?
        };
        if state.best_val.map_or(true, |b| val_loss < b) {
            state.best_val = Some(val_loss);
            best_params = checkpoint::quantize(&state.params);
            if let Some(p) = out.checkpoint_path {
                checkpoint::save(p, cfg, &state.params)?;
            }
        }
        if let Some(p) = out.metrics_path {
            let rec = MetricsRecord {
                stage: state.stage,
                epoch: state.epoch,
                step: state.opt.step,
                train_loss,
                val_loss,
                lr: stage_cfg.learning_rate,
                mean_grad_norm,
                skip_count: state.opt.skip_count,
            };
            let line = serde_json::to_string(&rec)
                .map_err(|e| TrainError::State(format!("metrics: {e}")))?;
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)?;
            writeln!(f, "{line}")?;
        }
        if initial_train_loss.is_none() {
            initial_train_loss = Some(train_loss);
        }
        final_train_loss = train_loss;
        epochs_run += 1;
        state.epoch += 1;
        state.epoch_batches.clear();
        state.batch_cursor = 0;
        state.epoch_loss_sum = 0.0;
        state.epoch_grad_norm_sum = 0.0;
        state.epoch_steps = 0;
        if let Some(p) = out.state_path {
            save_state(p, &state)?;
        }
    }

    let report = RunReport {
        stage: state.stage,
        epochs_run,
        steps: state.opt.step,
        skip_count: state.opt.skip_count,
        initial_train_loss: initial_train_loss.unwrap_or(f64::NAN),
        final_train_loss,
        best_val_loss: state.best_val,
        best_params,
    };
    Ok((state, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::toy::{generate_toy_corpus, ToyCorpusConfig};
    use crate::model::Variant;

    fn single_param(v: f64) -> ModelParams {
        let mut p = ModelParams::default();
        p.insert("w".into(), Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    fn grad_map(vals: &[f64]) -> BTreeMap<String, Tensor> {
        let mut g = BTreeMap::new();
        g.insert(
            "w".into(),
            Tensor::new(vec![vals.len()], vals.to_vec()).unwrap(),
        );
        g
    }

    #[test]
    fn first_adam_step_matches_closed_form() {
        // m̂ = g, v̂ = g² on step one, so the update is lr·g/(|g|+ε).
        let mut params = single_param(0.0);
        let mut opt = Adam::new(&params);
        let out = opt.step(&mut params, &grad_map(&[1.0]), 0.1).unwrap();
        assert!(matches!(out, StepOutcome::Applied { grad_norm } if (grad_norm - 1.0).abs() < 1e-12));
        let w = params.get("w").unwrap().data()[0];
        assert!((w + 0.1).abs() < 1e-6, "w = {w}");
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradients_leave_fresh_params_unchanged() {
        let mut params = single_param(0.5);
        let mut opt = Adam::new(&params);
        opt.step(&mut params, &grad_map(&[0.0]), 0.1).unwrap();
        assert_eq!(params.get("w").unwrap().data()[0], 0.5);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn non_finite_gradient_skips_without_touching_anything() {
        let mut params = single_param(0.5);
        let mut opt = Adam::new(&params);
        opt.step(&mut params, &grad_map(&[1.0]), 0.1).unwrap();
        let before_w = params.get("w").unwrap().clone();
        let before_m = opt.m.clone();
        let before_v = opt.v.clone();
        let out = opt.step(&mut params, &grad_map(&[f64::NAN]), 0.1).unwrap();
        assert_eq!(out, StepOutcome::Skipped);
        assert_eq!(params.get("w").unwrap(), &before_w);
        assert_eq!(opt.m, before_m);
        assert_eq!(opt.v, before_v);
        assert_eq!(opt.step, 1);
        assert_eq!(opt.skip_count, 1);
    }

    #[test]
    fn oversized_gradients_are_clipped_to_global_norm() {
        let mut p1 = ModelParams::default();
        p1.insert("w".into(), Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let mut o1 = Adam::new(&p1);
        let mut g = BTreeMap::new();
        g.insert("w".into(), Tensor::new(vec![2], vec![60.0, 80.0]).unwrap());
        let out = o1.step(&mut p1, &g, 0.1).unwrap();
        // Reported norm is pre-clip; the applied step matches a gradient
        // rescaled onto the clip sphere.
        assert!(matches!(out, StepOutcome::Applied { grad_norm } if (grad_norm - 100.0).abs() < 1e-9));
        let mut p2 = ModelParams::default();
        p2.insert("w".into(), Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let mut o2 = Adam::new(&p2);
        let mut g2 = BTreeMap::new();
        g2.insert("w".into(), Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        o2.step(&mut p2, &g2, 0.1).unwrap();
        assert_eq!(
            p1.get("w").unwrap().bits_hash(),
            p2.get("w").unwrap().bits_hash()
        );
    }

    #[test]
    fn mismatched_gradient_set_is_refused() {
        let mut params = single_param(0.0);
        let mut opt = Adam::new(&params);
        let empty: BTreeMap<String, Tensor> = BTreeMap::new();
        assert!(opt.step(&mut params, &empty, 0.1).is_err());
        let mut wrong_shape = BTreeMap::new();
        wrong_shape.insert("w".into(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(opt.step(&mut params, &wrong_shape, 0.1).is_err());
    }

    #[test]
    fn warm_start_tags_every_parameter_and_copies_bits() {
        let cfg = ModelConfig::toy(Variant::Robust);
        let donor_cfg = ModelConfig::toy(Variant::Baseline);
        let streaming = init_params(&donor_cfg, 100).unwrap();
        let offline = init_params(&donor_cfg, 200).unwrap();
        let (params, sources) = warm_start(&cfg, &streaming, &offline, 300).unwrap();
        assert_eq!(sources.len(), params.len());
        for path in params.paths() {
            assert!(sources.contains_key(path), "untagged {path}");
        }
        // Trunk from the streaming donor, enrollment side from the offline
        // donor, wake-text decoder from the offline predictor.
        for path in ["asr.l0.att.q.w", "pred.embed", "joint.out.w"] {
            assert_eq!(sources[path], ParamSource::DonorStreaming);
            assert_eq!(
                params.get(path).unwrap().bits_hash(),
                streaming.get(path).unwrap().bits_hash()
            );
        }
        assert_eq!(sources["enr.out.w"], ParamSource::DonorOffline);
        assert_eq!(
            params.get("enr.out.w").unwrap().bits_hash(),
            offline.get("enr.out.w").unwrap().bits_hash()
        );
        assert_eq!(sources["txt.dec.embed"], ParamSource::DonorOffline);
        assert_eq!(
            params.get("txt.dec.embed").unwrap().bits_hash(),
            offline.get("pred.embed").unwrap().bits_hash()
        );
        // Fresh pieces come from the fresh seed; the fusion output
        // projection stays zero so fusion starts as the identity.
        for path in ["txt.dec.out.w", "txt.att.q.w", "fuse.txt_bias.w", "fuse.att.q.w"] {
            assert_eq!(sources[path], ParamSource::Fresh, "{path}");
        }
        let fresh = init_params(&cfg, 300).unwrap();
        assert_eq!(
            params.get("txt.att.q.w").unwrap().bits_hash(),
            fresh.get("txt.att.q.w").unwrap().bits_hash()
        );
        assert!(params
            .get("fuse.att.o.w")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn warm_start_covers_every_variant_without_fresh_trunk() {
        let donor_cfg = ModelConfig::toy(Variant::Baseline);
        let streaming = init_params(&donor_cfg, 100).unwrap();
        let offline = init_params(&donor_cfg, 200).unwrap();
        let (_, src_b) = warm_start(
            &ModelConfig::toy(Variant::Baseline),
            &streaming,
            &offline,
            300,
        )
        .unwrap();
        // Only the pooled gate restarts; it cannot pair a donor's gate with
        // the other donor's enrollment encoder.
        for (path, s) in &src_b {
            if *s == ParamSource::Fresh {
                assert!(path.starts_with("fuse.pool."), "{path}");
            }
        }
        let (_, src_a) = warm_start(
            &ModelConfig::toy(Variant::Attentive),
            &streaming,
            &offline,
            300,
        )
        .unwrap();
        for (path, s) in &src_a {
            if *s == ParamSource::Fresh {
                assert!(path.starts_with("fuse.att."), "{path}");
            }
        }
    }

    #[test]
    fn warm_start_names_the_missing_donor_parameter() {
        let cfg = ModelConfig::toy(Variant::Baseline);
        let donor_cfg = ModelConfig::toy(Variant::Baseline);
        let streaming = init_params(&donor_cfg, 100).unwrap();
        let offline = init_params(&donor_cfg, 200).unwrap();
        let mut gutted = ModelParams::default();
        for (path, t) in streaming.iter() {
            if path != "joint.out.w" {
                gutted.insert(path.clone(), t.clone());
            }
        }
        let err = warm_start(&cfg, &gutted, &offline, 300).unwrap_err();
        assert!(err.to_string().contains("joint.out.w"), "{err}");
    }

    fn toy_split(n: usize) -> (ModelConfig, Vec<TrainSample>) {
        let cc = ToyCorpusConfig {
            n_pretrain: n,
            n_main: 0,
            n_finetune: 0,
            ..Default::default()
        };
        let corpus = generate_toy_corpus(&cc, 4242).unwrap();
        let samples = corpus.pretrain.iter().map(TrainSample::from_toy).collect();
        (ModelConfig::toy(Variant::Baseline), samples)
    }

    #[test]
    fn one_batch_overfits_with_strictly_decreasing_loss() {
        for variant in [Variant::Baseline, Variant::Attentive, Variant::Robust] {
            let (_, samples) = toy_split(3);
            let cfg = ModelConfig::toy(variant);
            let mut params = init_params(&cfg, 7).unwrap();
            let mut opt = Adam::new(&params);
            let batch: Vec<&TrainSample> = samples.iter().collect();
            let mut losses = Vec::new();
            for _ in 0..5 {
                let (loss, grads) = batch_loss_and_grads(&cfg, &params, &batch).unwrap();
                losses.push(loss);
                opt.step(&mut params, &grads, 0.01).unwrap();
            }
            for w in losses.windows(2) {
                assert!(w[1] < w[0], "{variant}: not decreasing: {losses:?}");
            }
        }
    }

    #[test]
    fn interrupted_run_resumes_bit_exactly() {
        let (cfg, samples) = toy_split(14);
        let seed = 11;
        let full = StageConfig {
            stage: Stage::Pretrain,
            learning_rate: 0.01,
            max_batch_frames: 120,
            epochs: 4,
            seed,
        };
        let params = init_params(&cfg, 7).unwrap();
        let (straight, _) = run_stage(
            &cfg,
            &full,
            &samples,
            StageInit::Fresh(params.clone()),
            &StageOutput::default(),
        )
        .unwrap();
        let half = StageConfig { epochs: 2, ..full };
        let dir = tempfile::tempdir().unwrap();
        let state_path = dir.path().join("state.json");
        run_stage(
            &cfg,
            &half,
            &samples,
            StageInit::Fresh(params),
            &StageOutput {
                state_path: Some(&state_path),
                ..Default::default()
            },
        )
        .unwrap();
        // Resume through the serialized state file, not the in-memory one.
        let loaded = load_state(&state_path).unwrap();
        let (resumed, _) = run_stage(
            &cfg,
            &full,
            &samples,
            StageInit::Resume(loaded),
            &StageOutput::default(),
        )
        .unwrap();
        assert_eq!(straight.opt.step, resumed.opt.step);
        for (path, t) in straight.params.iter() {
            assert_eq!(
                t.bits_hash(),
                resumed.params.get(path).unwrap().bits_hash(),
                "{path}"
            );
        }
        assert_eq!(straight.rng, resumed.rng);
    }

    #[test]
    fn identical_seeds_give_identical_checkpoints() {
        let (cfg, samples) = toy_split(10);
        let stage = StageConfig {
            stage: Stage::Pretrain,
            learning_rate: 0.01,
            max_batch_frames: 150,
            epochs: 2,
            seed: 5,
        };
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for name in ["a.ckpt", "b.ckpt"] {
            let p = dir.path().join(name);
            run_stage(
                &cfg,
                &stage,
                &samples,
                StageInit::Fresh(init_params(&cfg, 7).unwrap()),
                &StageOutput {
                    checkpoint_path: Some(&p),
                    ..Default::default()
                },
            )
            .unwrap();
            bytes.push(std::fs::read(p).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn stage_run_writes_metrics_checkpoint_and_state() {
        let (cfg, samples) = toy_split(12);
        let stage = StageConfig {
            stage: Stage::Pretrain,
            learning_rate: 0.01,
            max_batch_frames: 150,
            epochs: 1,
            seed: 5,
        };
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("best.ckpt");
        let state_p = dir.path().join("state.json");
        let metrics = dir.path().join("metrics.jsonl");
        let (state, report) = run_stage(
            &cfg,
            &stage,
            &samples,
            StageInit::Fresh(init_params(&cfg, 7).unwrap()),
            &StageOutput {
                checkpoint_path: Some(&ckpt),
                state_path: Some(&state_p),
                metrics_path: Some(&metrics),
            },
        )
        .unwrap();
        assert_eq!(report.epochs_run, 1);
        assert!(report.steps > 0);
        assert!(report.final_train_loss.is_finite());
        let text = std::fs::read_to_string(&metrics).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1);
        let rec: MetricsRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(rec.epoch, 0);
        assert_eq!(rec.step, state.opt.step);
        assert!(rec.val_loss.is_finite());
        let (loaded_cfg, loaded) = checkpoint::load(&ckpt).unwrap();
        assert_eq!(loaded_cfg, cfg);
        // The written checkpoint is exactly the reported best params.
        for (path, t) in report.best_params.iter() {
            assert_eq!(t.bits_hash(), loaded.get(path).unwrap().bits_hash());
        }
        let st = load_state(&state_p).unwrap();
        assert_eq!(st.epoch, 1);
    }

    #[test]
    fn empty_sample_list_is_a_config_error() {
        let cfg = ModelConfig::toy(Variant::Baseline);
        let stage = StageConfig::toy(Stage::Main, 1);
        let err = run_stage(
            &cfg,
            &stage,
            &[],
            StageInit::Fresh(init_params(&cfg, 7).unwrap()),
            &StageOutput::default(),
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::Config(_)));
    }

    #[test]
    fn val_split_is_stable_and_roughly_a_tenth() {
        let (_, samples) = toy_split(60);
        let (train, val) = split_train_val(&samples, 3);
        assert_eq!(train.len() + val.len(), samples.len());
        assert!(!val.is_empty() && val.len() < samples.len() / 4);
        let (train2, val2) = split_train_val(&samples, 3);
        assert_eq!(train.len(), train2.len());
        assert_eq!(val.len(), val2.len());
        // Membership keyed by id: shuffling the corpus cannot move samples
        // across the split.
        let mut rev: Vec<TrainSample> = samples.clone();
        rev.reverse();
        let (_, val_rev) = split_train_val(&rev, 3);
        let mut a: Vec<&str> = val.iter().map(|s| s.id.as_str()).collect();
        let mut b: Vec<&str> = val_rev.iter().map(|s| s.id.as_str()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn train_state_json_round_trip_is_bit_exact() {
        let (cfg, samples) = toy_split(8);
        let stage = StageConfig {
            stage: Stage::Pretrain,
            learning_rate: 0.01,
            max_batch_frames: 150,
            epochs: 1,
            seed: 9,
        };
        let (state, _) = run_stage(
            &cfg,
            &stage,
            &samples,
            StageInit::Fresh(init_params(&cfg, 7).unwrap()),
            &StageOutput::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        save_state(&p, &state).unwrap();
        let loaded = load_state(&p).unwrap();
        for (path, t) in state.params.iter() {
            assert_eq!(t.bits_hash(), loaded.params.get(path).unwrap().bits_hash());
        }
        for (path, t) in &state.opt.m {
            assert_eq!(t.bits_hash(), loaded.opt.m[path].bits_hash());
        }
        for (path, t) in &state.opt.v {
            assert_eq!(t.bits_hash(), loaded.opt.v[path].bits_hash());
        }
        assert_eq!(state.rng, loaded.rng);
        assert_eq!(state.best_val.map(f64::to_bits), loaded.best_val.map(f64::to_bits));
    }
}
