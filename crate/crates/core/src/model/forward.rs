//! Differentiable forward passes for every sub-network, on the tape.
//!
//! The streaming inference path re-implements the causal trunk frame by
//! frame using the same row kernels; both paths must stay bit-identical,
//! which the prefix-invariance and streaming-equivalence tests enforce.
//! Keep any numeric reordering out of this file unless the mirrored code in
//! `infer` changes in lockstep.

use super::{ModelConfig, ModelError, ModelParams, Provenance, Result, Variant};
use crate::tensor::{Tape, Tensor, Var};
use crate::transducer::{transducer_loss, LatticeDims};
use std::collections::BTreeMap;

pub(crate) const LN_EPS: f64 = 1e-5;
/// Additive mask for invisible attention positions. Large enough that
/// exp(masked − rowmax) underflows to exactly 0.0, so masked columns leave
/// no trace in the softmax bits; that is what makes prefix invariance exact
/// rather than approximate.
pub(crate) const MASK_OFF: f64 = -1e30;

/// Tape handles for a parameter set, keyed by path.
pub struct ParamBinding {
    vars: BTreeMap<String, Var>,
}

impl ParamBinding {
    /// Binds every parameter as a gradient-carrying tape input.
    pub fn trainable(tape: &mut Tape, params: &ModelParams) -> Self {
        let vars = params
            .iter()
            .map(|(path, t)| (path.clone(), tape.param(t.clone())))
            .collect();
        Self { vars }
    }

    /// Binds every parameter as a constant; used for inference-time tape
    /// evaluation where no gradients are wanted.
    pub fn frozen(tape: &mut Tape, params: &ModelParams) -> Self {
        let vars = params
            .iter()
            .map(|(path, t)| (path.clone(), tape.leaf(t.clone())))
            .collect();
        Self { vars }
    }

    /// Binding over caller-supplied vars; lets tests wire hand-built
    /// tensors into any sub-network.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(path.to_string()))
    }

    /// Vars in canonical (path-sorted) order, aligned with
    /// `ModelParams::iter`.
    pub fn ordered(&self) -> Vec<(&str, Var)> {
        self.vars.iter().map(|(p, v)| (p.as_str(), *v)).collect()
    }
}

fn lin(tape: &mut Tape, pb: &ParamBinding, path: &str, x: Var) -> Result<Var> {
    let w = pb.get(&format!("{path}.w"))?;
    let b = pb.get(&format!("{path}.b"))?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}

fn norm(tape: &mut Tape, pb: &ParamBinding, path: &str, x: Var) -> Result<Var> {
    let g = pb.get(&format!("{path}.g"))?;
    let b = pb.get(&format!("{path}.b"))?;
    Ok(tape.layer_norm_rows(x, g, b, LN_EPS)?)
}

/// 0 where row i may see column j, MASK_OFF elsewhere. Row i sees itself
/// and the `window - 1` preceding positions.
fn causal_mask(tape: &mut Tape, t_len: usize, window: usize) -> Var {
    let mut data = vec![MASK_OFF; t_len * t_len];
    for i in 0..t_len {
        for j in i.saturating_sub(window - 1)..=i {
            data[i * t_len + j] = 0.0;
        }
    }
    tape.leaf(Tensor::new(vec![t_len, t_len], data).expect("mask shape"))
}

/// Multi-head scaled dot-product attention with per-head scale 1/√head_dim,
/// projections under `{path}.{q,k,v,o}`. Returns the projected output; any
/// residual is the caller's business.
fn multi_head(
    tape: &mut Tape,
    pb: &ParamBinding,
    cfg: &ModelConfig,
    path: &str,
    queries: Var,
    keys_values: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let q = lin(tape, pb, &format!("{path}.q"), queries)?;
    let k = lin(tape, pb, &format!("{path}.k"), keys_values)?;
    let v = lin(tape, pb, &format!("{path}.v"), keys_values)?;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.attention_heads);
    for h in 0..cfg.attention_heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let mut s = tape.scale(s, scale);
        if let Some(m) = mask {
            s = tape.add(s, m)?;
        }
        let w = tape.softmax_rows(s)?;
        heads.push(tape.matmul(w, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    lin(tape, pb, &format!("{path}.o"), cat)
}

/// Pre-norm self-attention block with feed-forward, both residual.
fn encoder_block(
    tape: &mut Tape,
    pb: &ParamBinding,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let xn = norm(tape, pb, &format!("{prefix}.ln1"), x)?;
    let att = multi_head(tape, pb, cfg, &format!("{prefix}.att"), xn, xn, mask)?;
    let r = tape.add(x, att)?;
    let rn = norm(tape, pb, &format!("{prefix}.ln2"), r)?;
    let a = lin(tape, pb, &format!("{prefix}.ffn.a"), rn)?;
    let h = tape.tanh(a);
    let f = lin(tape, pb, &format!("{prefix}.ffn.b"), h)?;
    Ok(tape.add(r, f)?)
}

fn check_features(cfg: &ModelConfig, features: &Tensor, what: &'static str) -> Result<()> {
    if features.shape().len() != 2 || features.shape()[0] == 0 {
        return Err(ModelError::EmptyInput(what));
    }
    if features.shape()[1] != cfg.feature_dim {
        return Err(ModelError::Config(format!(
            "{what} have dimension {}, model expects {}",
            features.shape()[1],
            cfg.feature_dim
        )));
    }
    Ok(())
}

fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    for &t in tokens {
        if t >= cfg.vocab_size {
            return Err(ModelError::Oov {
                token: t,
                vocab: cfg.vocab_size,
            });
        }
    }
    Ok(())
}

/// Offline (bidirectional) encoding of the enrollment audio: `T'×d_a`.
pub fn enroll_encode(
    tape: &mut Tape,
    pb: &ParamBinding,
    cfg: &ModelConfig,
    features: &Tensor,
) -> Result<Var> {
    check_features(cfg, features, "enrollment features")?;
    let x = tape.leaf(features.clone());
    let mut x = lin(tape, pb, "enr.in", x)?;
    for l in 0..cfg.encoder_layers {
        x = encoder_block(tape, pb, cfg, &format!("enr.l{l}"), x, None)?;
    }
    let x = norm(tape, pb, "enr.out_ln", x)?;
    lin(tape, pb, "enr.out", x)
}

/// Shared bigram body: row i = tanh(W1·emb(cur[i]) + W2·emb(prev[i]) + b).
fn bigram(
    tape: &mut Tape,
    pb: &ParamBinding,
    prefix: &str,
    cur: &[usize],
    prev: &[usize],
) -> Result<Var> {
    let table = pb.get(&format!("{prefix}.embed"))?;
    let e1 = tape.embed_rows(table, cur)?;
    let e2 = tape.embed_rows(table, prev)?;
    let w1 = pb.get(&format!("{prefix}.w1"))?;
    let w2 = pb.get(&format!("{prefix}.w2"))?;
    let x1 = tape.matmul(e1, w1)?;
    let x2 = tape.matmul(e2, w2)?;
    let s = tape.add(x1, x2)?;
    let s = tape.add_row(s, pb.get(&format!("{prefix}.b"))?)?;
    Ok(tape.tanh(s))
}

/// Wake-word text encoding: `N×d_l`. Same architecture as the prediction
/// network, read over the text itself, plus an output projection.
pub fn text_decode(
    tape: &mut Tape,
    pb: &ParamBinding,
    cfg: &ModelConfig,
    wake_tokens: &[usize],
) -> Result<Var> {
    if wake_tokens.is_empty() {
        return Err(ModelError::EmptyInput("wake-word text"));
    }
    check_tokens(cfg, wake_tokens)?;
    let prev: Vec<usize> = std::iter::once(cfg.blank_id)
        .chain(wake_tokens[..wake_tokens.len() - 1].iter().copied())
        .collect();
    let h = bigram(tape, pb, "txt.dec", wake_tokens, &prev)?;
    lin(tape, pb, "txt.dec.out", h)
}

/// Attention from enrollment-audio queries into wake-text keys/values:
/// `T'×d_l`, no residual. The output rows live in the span of the text
/// encoding, which is what keeps this bias robust to corrupted audio.
pub fn text_guided_attention(
    tape: &mut Tape,
    pb: &ParamBinding,
    cfg: &ModelConfig,
    h_aco: Var,
    h_ling: Var,
) -> Result<Var> {
    if tape.value(h_ling).row_count() == 0 {
        return Err(ModelError::EmptyInput("text encoding"));
    }
    multi_head(tape, pb, cfg, "txt.att", h_aco, h_ling, None)
}

/// Residual cross-attention from encoder frames into the bias sequence:
/// `a = z1 + OutProj(MHA(q=z1, k=v=h_target))`.
pub fn contextual_bias_attention(
    tape: &mut Tape,
    pb: &ParamBinding,
    cfg: &ModelConfig,
    z1: Var,
    h_target: Var,
) -> Result<Var> {
    if tape.value(h_target).row_count() == 0 {
        return Err(ModelError::EmptyInput("speaker-bias sequence"));
    }
    let att = multi_head(tape, pb, cfg, "fuse.att", z1, h_target, None)?;
    Ok(tape.add(z1, att)?)
}

/// Pooled Hadamard fusion: `z1 ⊙ Linear(mean(h_target_seq))`.
pub fn baseline_fuse(
    tape: &mut Tape,
    pb: &ParamBinding,
    cfg: &ModelConfig,
    z1: Var,
    h_target_seq: Var,
) -> Result<Var> {
    let _ = cfg;
    let pooled = tape.mean_rows(h_target_seq)?;
    fuse_pooled(tape, pb, z1, pooled)
}

fn fuse_pooled(tape: &mut Tape, pb: &ParamBinding, z1: Var, pooled: Var) -> Result<Var> {
    let d_h = tape.value(pooled).numel();
    let p2 = tape.reshape(pooled, vec![1, d_h])?;
    let gate = lin(tape, pb, "fuse.pool", p2)?;
    Ok(tape.mul_row(z1, gate)?)
}

/// Speaker bias on the tape: the pooled vector or bias sequence, with its
/// provenance.
#[derive(Debug, Clone, Copy)]
pub enum TapeBias {
    Pooled(Var),
    Sequence(Var),
}

/// Builds the variant's speaker bias from enrollment audio (and, for the
/// text-guided variant, the wake-word text).
pub fn speaker_bias(
    tape: &mut Tape,
    pb: &ParamBinding,
    cfg: &ModelConfig,
    enrollment: &Tensor,
    wake_tokens: Option<&[usize]>,
) -> Result<(TapeBias, Provenance)> {
    let h_aco = enroll_encode(tape, pb, cfg, enrollment)?;
    match cfg.variant {
        Variant::Baseline => {
            let seq = lin(tape, pb, "fuse.enr_bias", h_aco)?;
            let pooled = tape.mean_rows(seq)?;
            Ok((TapeBias::Pooled(pooled), Provenance::AcousticOnly))
        }
        Variant::Attentive => {
            let seq = lin(tape, pb, "fuse.enr_bias", h_aco)?;
            Ok((TapeBias::Sequence(seq), Provenance::AcousticOnly))
        }
        Variant::Robust => {
            let wake = wake_tokens.ok_or(ModelError::EmptyInput(
                "wake-word text (required by the text-guided variant)",
            ))?;
            let h_ling = text_decode(tape, pb, cfg, wake)?;
            let h_tg = text_guided_attention(tape, pb, cfg, h_aco, h_ling)?;
            let seq = lin(tape, pb, "fuse.txt_bias", h_tg)?;
            Ok((TapeBias::Sequence(seq), Provenance::TextGuided))
        }
    }
}

/// Causal encoding of the command audio with the speaker bias fused in
/// after `fusion_layer_index` layers. `T×d_model`.
pub fn asr_encode(
    tape: &mut Tape,
    pb: &ParamBinding,
    cfg: &ModelConfig,
    features: &Tensor,
    bias: &TapeBias,
    provenance: Provenance,
) -> Result<Var> {
    let ok = matches!(
        (cfg.variant, bias, provenance),
        (Variant::Baseline, TapeBias::Pooled(_), Provenance::AcousticOnly)
            | (Variant::Attentive, TapeBias::Sequence(_), Provenance::AcousticOnly)
            | (Variant::Robust, TapeBias::Sequence(_), Provenance::TextGuided)
    );
    if !ok {
        return Err(ModelError::BiasMismatch {
            variant: cfg.variant,
            provenance,
            form: match bias {
                TapeBias::Pooled(_) => "pooled",
                TapeBias::Sequence(_) => "sequence",
            },
        });
    }
    check_features(cfg, features, "acoustic features")?;
    let t_len = features.shape()[0];
    let mask = causal_mask(tape, t_len, cfg.causal_context);
    let x = tape.leaf(features.clone());
    let mut x = lin(tape, pb, "asr.in", x)?;
    for l in 0..cfg.encoder_layers {
        x = encoder_block(tape, pb, cfg, &format!("asr.l{l}"), x, Some(mask))?;
        if l + 1 == cfg.fusion_layer_index {
            x = match bias {
                TapeBias::Pooled(p) => fuse_pooled(tape, pb, x, *p)?,
                TapeBias::Sequence(s) => contextual_bias_attention(tape, pb, cfg, x, *s)?,
            };
        }
    }
    norm(tape, pb, "asr.out_ln", x)
}

/// Prediction-network rows for blank context plus each label prefix:
/// `(U+1)×d_model`; row u sees only tokens before u.
pub fn predict(
    tape: &mut Tape,
    pb: &ParamBinding,
    cfg: &ModelConfig,
    labels: &[usize],
) -> Result<Var> {
    check_tokens(cfg, labels)?;
    let u1 = labels.len() + 1;
    let mut last = Vec::with_capacity(u1);
    let mut prior = Vec::with_capacity(u1);
    for u in 0..u1 {
        last.push(if u >= 1 { labels[u - 1] } else { cfg.blank_id });
        prior.push(if u >= 2 { labels[u - 2] } else { cfg.blank_id });
    }
    bigram(tape, pb, "pred", &last, &prior)
}

/// Joint network on one (encoder row, prediction row) pair: raw logits.
pub fn joint(
    tape: &mut Tape,
    pb: &ParamBinding,
    cfg: &ModelConfig,
    z_row: Var,
    g_row: Var,
) -> Result<Var> {
    let _ = cfg;
    let zw = tape.matmul(z_row, pb.get("joint.z.w")?)?;
    let gw = tape.matmul(g_row, pb.get("joint.g.w")?)?;
    let s = tape.add(zw, gw)?;
    let s = tape.add_row(s, pb.get("joint.b")?)?;
    let h = tape.tanh(s);
    lin(tape, pb, "joint.out", h)
}

/// Full log-softmaxed joint lattice for a label sequence, flattened to
/// `[T·(U+1), vocab]` with row (t,u) at index t·(U+1)+u.
pub fn build_lattice(
    tape: &mut Tape,
    pb: &ParamBinding,
    cfg: &ModelConfig,
    z: Var,
    labels: &[usize],
) -> Result<(Var, LatticeDims)> {
    let g = predict(tape, pb, cfg, labels)?;
    let zw = tape.matmul(z, pb.get("joint.z.w")?)?;
    let gw = tape.matmul(g, pb.get("joint.g.w")?)?;
    let s = tape.pairwise_sum_rows(zw, gw)?;
    let s = tape.add_row(s, pb.get("joint.b")?)?;
    let h = tape.tanh(s);
    let logits = lin(tape, pb, "joint.out", h)?;
    let lattice = tape.log_softmax_rows(logits)?;
    let dims = LatticeDims {
        t_len: tape.value(z).row_count(),
        u_len: labels.len(),
        vocab: cfg.vocab_size,
    };
    Ok((lattice, dims))
}

/// Transducer loss of one sample, end to end: enrollment (and wake text)
/// to bias, command features to encoding, lattice to loss.
pub fn model_loss(
    tape: &mut Tape,
    pb: &ParamBinding,
    cfg: &ModelConfig,
    enrollment: &Tensor,
    command: &Tensor,
    wake_tokens: Option<&[usize]>,
    labels: &[usize],
) -> Result<Var> {
    check_tokens(cfg, labels)?;
    let (bias, provenance) = speaker_bias(tape, pb, cfg, enrollment, wake_tokens)?;
    let z = asr_encode(tape, pb, cfg, command, &bias, provenance)?;
    let (lattice, dims) = build_lattice(tape, pb, cfg, z, labels)?;
    Ok(transducer_loss(tape, lattice, dims, labels)?)
}
