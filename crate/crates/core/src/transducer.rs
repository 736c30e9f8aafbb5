//! Transducer alignment loss and greedy decoding.
//!
//! The loss marginalizes over every monotone blank/label alignment of a
//! label sequence to the frame axis with a log-domain forward recursion:
//!
//! `alpha[t][u] = logaddexp(alpha[t-1][u] + blank(t-1,u), alpha[t][u-1] + label(t,u-1))`
//!
//! and the negative log likelihood is `-(alpha[T-1][U] + blank(T-1,U))`.
//! The same quantity computed by brute-force path enumeration (all
//! `C(T-1+U, U)` alignments) serves as the correctness oracle.

use crate::tensor::{Tape, Tensor, TensorError, Var};
use thiserror::Error;

/// Output id reserved for the blank transition.
pub const BLANK: usize = 0;

#[derive(Debug, Error)]
pub enum TransducerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("lattice shape {shape:?} does not hold {t_len} frames x {u_rows} label rows x {vocab} symbols")]
    LatticeShape {
        shape: Vec<usize>,
        t_len: usize,
        u_rows: usize,
        vocab: usize,
    },
    #[error("lattice row {row} is not normalized: logsumexp = {lse:e}")]
    Unnormalized { row: usize, lse: f64 },
    #[error("label {label} at position {pos} is not a content symbol in 1..{vocab}")]
    BadLabel {
        pos: usize,
        label: usize,
        vocab: usize,
    },
    #[error("lattice needs at least one frame")]
    EmptyTime,
}

pub type Result<T> = std::result::Result<T, TransducerError>;

/// Dimensions of a joint-output lattice: `t_len` frames, `u_len` reference
/// labels (the lattice has `u_len + 1` label rows), `vocab` output symbols
/// including blank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatticeDims {
    pub t_len: usize,
    pub u_len: usize,
    pub vocab: usize,
}

impl LatticeDims {
    pub fn rows(&self) -> usize {
        self.t_len * (self.u_len + 1)
    }

    /// Flat element index of `log P(symbol k | frame t, emitted u labels)`.
    pub fn index(&self, t: usize, u: usize, k: usize) -> usize {
        debug_assert!(t < self.t_len && u <= self.u_len && k < self.vocab);
        (t * (self.u_len + 1) + u) * self.vocab + k
    }
}

fn check_labels(dims: LatticeDims, labels: &[usize]) -> Result<()> {
    if dims.t_len == 0 {
        return Err(TransducerError::EmptyTime);
    }
    for (pos, &label) in labels.iter().enumerate() {
        if label == BLANK || label >= dims.vocab {
            return Err(TransducerError::BadLabel {
                pos,
                label,
                vocab: dims.vocab,
            });
        }
    }
    Ok(())
}

/// Checks that the tensor is `rows x vocab` of per-row normalized
/// log-probabilities (each row's logsumexp within 1e-9 of zero).
pub fn validate_lattice(log_probs: &Tensor, dims: LatticeDims) -> Result<()> {
    let want_rows = dims.rows();
    if log_probs.row_count() != want_rows || log_probs.last_dim() != dims.vocab {
        return Err(TransducerError::LatticeShape {
            shape: log_probs.shape().to_vec(),
            t_len: dims.t_len,
            u_rows: dims.u_len + 1,
            vocab: dims.vocab,
        });
    }
    for row in 0..want_rows {
        let r = log_probs.row(row);
        let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + r.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        if lse.abs() > 1e-9 {
            return Err(TransducerError::Unnormalized { row, lse });
        }
    }
    Ok(())
}

/// Differentiable alignment loss. `lattice` must be a tape variable of
/// normalized log-probabilities laid out as [`LatticeDims`] describes;
/// `labels` must match `dims.u_len`.
pub fn transducer_loss(
    tape: &mut Tape,
    lattice: Var,
    dims: LatticeDims,
    labels: &[usize],
) -> Result<Var> {
    check_labels(dims, labels)?;
    assert_eq!(labels.len(), dims.u_len, "labels must match lattice dims");
    validate_lattice(tape.value(lattice), dims)?;

    let (t_len, u_len) = (dims.t_len, dims.u_len);
    let mut alpha: Vec<Vec<Option<Var>>> = vec![vec![None; u_len + 1]; t_len];
    alpha[0][0] = Some(tape.scalar(0.0));
    for t in 0..t_len {
        for u in 0..=u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 {
                let a = alpha[t - 1][u].unwrap();
                let p = tape.get(lattice, dims.index(t - 1, u, BLANK))?;
                Some(tape.add(a, p)?)
            } else {
                None
            };
            let from_label = if u > 0 {
                let a = alpha[t][u - 1].unwrap();
                let p = tape.get(lattice, dims.index(t, u - 1, labels[u - 1]))?;
                Some(tape.add(a, p)?)
            } else {
                None
            };
            alpha[t][u] = Some(match (from_blank, from_label) {
                (Some(a), Some(b)) => tape.logaddexp(a, b)?,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!(),
            });
        }
    }
    let last = alpha[t_len - 1][u_len].unwrap();
    let final_blank = tape.get(lattice, dims.index(t_len - 1, u_len, BLANK))?;
    let total = tape.add(last, final_blank)?;
    Ok(tape.scale(total, -1.0))
}

/// Same recursion on plain values, for callers that only need the number.
pub fn transducer_loss_value(log_probs: &Tensor, dims: LatticeDims, labels: &[usize]) -> Result<f64> {
    check_labels(dims, labels)?;
    assert_eq!(labels.len(), dims.u_len, "labels must match lattice dims");
    validate_lattice(log_probs, dims)?;
    let d = log_probs.data();
    let (t_len, u_len) = (dims.t_len, dims.u_len);
    let mut alpha = vec![vec![f64::NEG_INFINITY; u_len + 1]; t_len];
    alpha[0][0] = 0.0;
    for t in 0..t_len {
        for u in 0..=u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            if t > 0 {
                best = alpha[t - 1][u] + d[dims.index(t - 1, u, BLANK)];
            }
            if u > 0 {
                let via = alpha[t][u - 1] + d[dims.index(t, u - 1, labels[u - 1])];
                best = crate::tensor::kernels::logaddexp(best, via);
            }
            alpha[t][u] = best;
        }
    }
    Ok(-(alpha[t_len - 1][u_len] + d[dims.index(t_len - 1, u_len, BLANK)]))
}

/// Brute-force oracle: enumerates every alignment path, returns the negative
/// logsumexp of path scores and the number of paths visited. Exponential in
/// `t_len + u_len`; intended for small test instances only.
pub fn path_enumeration_loss(
    log_probs: &Tensor,
    dims: LatticeDims,
    labels: &[usize],
) -> Result<(f64, u64)> {
    check_labels(dims, labels)?;
    assert_eq!(labels.len(), dims.u_len, "labels must match lattice dims");
    validate_lattice(log_probs, dims)?;
    let d = log_probs.data();
    let mut scores = Vec::new();
    let mut stack = vec![(0usize, 0usize, 0.0f64)];
    while let Some((t, u, acc)) = stack.pop() {
        if t == dims.t_len - 1 && u == dims.u_len {
            scores.push(acc + d[dims.index(t, u, BLANK)]);
            continue;
        }
        if t + 1 < dims.t_len {
            stack.push((t + 1, u, acc + d[dims.index(t, u, BLANK)]));
        }
        if u < dims.u_len {
            stack.push((t, u + 1, acc + d[dims.index(t, u, labels[u])]));
        }
    }
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + scores.iter().map(|s| (s - mx).exp()).sum::<f64>().ln();
    Ok((-lse, scores.len() as u64))
}

/// Greedy decoding result: emitted labels, the frame each was emitted on,
/// and the cumulative log-probability of every greedy decision (labels and
/// blanks alike).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub frame_indices: Vec<usize>,
    pub log_score: f64,
}

impl Hypothesis {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Runs the per-frame greedy emission loop for frame `t`, appending to
/// `hyp` in place. Shared by batch and streaming decoding so the two paths
/// cannot diverge. `joint_logits(t, emitted)` returns unnormalized joint
/// logits given the labels emitted so far.
pub fn decode_frame<F>(t: usize, max_symbols_per_frame: usize, hyp: &mut Hypothesis, joint_logits: &mut F)
where
    F: FnMut(usize, &[usize]) -> Vec<f64>,
{
    let mut emitted = 0;
    loop {
        let mut logits = joint_logits(t, &hyp.tokens);
        let k = argmax_lowest(&logits);
        crate::tensor::kernels::log_softmax_row(&mut logits);
        hyp.log_score += logits[k];
        if k == BLANK {
            break;
        }
        hyp.tokens.push(k);
        hyp.frame_indices.push(t);
        emitted += 1;
        if emitted >= max_symbols_per_frame {
            break;
        }
    }
}

/// Greedy decoding over a joint-output callback.
///
/// At each frame the argmax symbol is emitted until blank wins or
/// `max_symbols_per_frame` labels have been produced; ties resolve to the
/// lowest symbol id. Because the callback never sees future frames, the
/// output for a prefix of frames is a prefix of the full output.
pub fn greedy_decode<F>(t_len: usize, max_symbols_per_frame: usize, mut joint_logits: F) -> Hypothesis
where
    F: FnMut(usize, &[usize]) -> Vec<f64>,
{
    let mut hyp = Hypothesis::new();
    for t in 0..t_len {
        decode_frame(t, max_symbols_per_frame, &mut hyp, &mut joint_logits);
    }
    hyp
}

/// Index of the maximum value; equal values resolve to the smallest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
