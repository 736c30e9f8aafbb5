//! Inference: bias extraction, batch decoding, and the streaming decoder.
//!
//! The streaming encoder re-runs the causal trunk one frame at a time with
//! the same kernels and the same accumulation orders as the tape forward in
//! `forward`, so a frame's encoding is bit-identical whether it was decoded
//! in a batch or pushed through a stream. The only machinery this needs is
//! a per-layer ring buffer of key/value rows covering the causal window;
//! everything else in the trunk is row-local.

use super::forward::{self, LN_EPS};
use super::{BiasForm, ModelConfig, ModelError, ModelParams, Result, SpeakerBias, TapeBias};
use crate::tensor::{kernels, Tape, Tensor};
use crate::transducer::{decode_frame, greedy_decode, Hypothesis};

/// Default cap on label emissions per frame during greedy decoding.
pub const MAX_SYMBOLS_PER_FRAME: usize = 8;

/// Runs the enrollment (and, for the text-guided variant, wake-text)
/// encoders and returns the speaker bias as plain tensors.
pub fn build_bias(
    cfg: &ModelConfig,
    params: &ModelParams,
    enrollment: &Tensor,
    wake_tokens: Option<&[usize]>,
) -> Result<SpeakerBias> {
    let mut tape = Tape::new();
    let pb = forward::ParamBinding::frozen(&mut tape, params);
    let (bias, provenance) = forward::speaker_bias(&mut tape, &pb, cfg, enrollment, wake_tokens)?;
    let form = match bias {
        TapeBias::Pooled(v) => BiasForm::Pooled(tape.value(v).clone()),
        TapeBias::Sequence(v) => BiasForm::Sequence(tape.value(v).clone()),
    };
    Ok(SpeakerBias { form, provenance })
}

fn check_bias(cfg: &ModelConfig, bias: &SpeakerBias) -> Result<()> {
    if !bias.matches(cfg.variant) {
        return Err(ModelError::BiasMismatch {
            variant: cfg.variant,
            provenance: bias.provenance,
            form: bias.form_name(),
        });
    }
    match &bias.form {
        BiasForm::Pooled(t) => {
            if t.numel() != cfg.d_h {
                return Err(ModelError::Config(format!(
                    "pooled bias has {} elements, expected d_h = {}",
                    t.numel(),
                    cfg.d_h
                )));
            }
        }
        BiasForm::Sequence(t) => {
            if t.row_count() == 0 || t.last_dim() != cfg.d_h {
                return Err(ModelError::Config(format!(
                    "bias sequence has shape {:?}, expected nonempty rows of width d_h = {}",
                    t.shape(),
                    cfg.d_h
                )));
            }
        }
    }
    Ok(())
}

// ---- raw row math, mirroring the tape ops bit for bit ----

fn matmul_row(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.len(), k);
    let mut out = vec![0.0; n];
    kernels::matmul(x, w.data(), 1, k, n, &mut out);
    out
}

fn lin_row(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = matmul_row(x, w);
    for (o, &bv) in out.iter_mut().zip(b.data()) {
        *o += bv;
    }
    out
}

fn ln_row(x: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    kernels::layer_norm_row(x, g.data(), b.data(), LN_EPS, &mut out);
    out
}

fn add_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn tanh_vec(a: &mut [f64]) {
    for v in a.iter_mut() {
        *v = v.tanh();
    }
}

/// One query row attending over key/value rows (ascending time order).
/// `masked` mirrors the additive causal mask: visible scores pick up an
/// explicit `+ 0.0`, exactly as the tape's mask addition does.
fn attend_row(
    cfg: &ModelConfig,
    q: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    masked: bool,
) -> Vec<f64> {
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; cfg.attention_heads * hd];
    for h in 0..cfg.attention_heads {
        let qs = &q[h * hd..(h + 1) * hd];
        let mut scores: Vec<f64> = keys
            .iter()
            .map(|krow| {
                let s = kernels::dot(qs, &krow[h * hd..(h + 1) * hd]) * scale;
                if masked {
                    s + 0.0
                } else {
                    s
                }
            })
            .collect();
        kernels::softmax_row(&mut scores);
        let oh = &mut out[h * hd..(h + 1) * hd];
        for (w, vrow) in scores.iter().zip(values) {
            for (o, &vv) in oh.iter_mut().zip(&vrow[h * hd..(h + 1) * hd]) {
                *o += w * vv;
            }
        }
    }
    out
}

struct LayerRing {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

enum Fusion {
    /// Pooled bias, precomputed into the Hadamard gate vector.
    Gate(Vec<f64>),
    /// Bias sequence, precomputed into fusion-attention key/value rows.
    Attend {
        keys: Vec<Vec<f64>>,
        values: Vec<Vec<f64>>,
    },
}

struct StreamingEncoder {
    cfg: ModelConfig,
    params: ModelParams,
    rings: Vec<LayerRing>,
    fusion: Fusion,
}

impl StreamingEncoder {
    fn new(cfg: &ModelConfig, params: &ModelParams, bias: &SpeakerBias) -> Result<Self> {
        cfg.validate()?;
        params.check_complete(cfg)?;
        check_bias(cfg, bias)?;
        let fusion = match &bias.form {
            BiasForm::Pooled(p) => Fusion::Gate(lin_row(
                p.data(),
                params.get("fuse.pool.w")?,
                params.get("fuse.pool.b")?,
            )),
            BiasForm::Sequence(s) => {
                let kw = params.get("fuse.att.k.w")?;
                let kb = params.get("fuse.att.k.b")?;
                let vw = params.get("fuse.att.v.w")?;
                let vb = params.get("fuse.att.v.b")?;
                let keys = (0..s.row_count()).map(|r| lin_row(s.row(r), kw, kb)).collect();
                let values = (0..s.row_count()).map(|r| lin_row(s.row(r), vw, vb)).collect();
                Fusion::Attend { keys, values }
            }
        };
        let rings = (0..cfg.encoder_layers)
            .map(|_| LayerRing {
                keys: Vec::new(),
                values: Vec::new(),
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            params: params.clone(),
            rings,
            fusion,
        })
    }

    /// Encodes the next frame; returns its `d_model` encoder row.
    fn push(&mut self, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.len() != self.cfg.feature_dim {
            return Err(ModelError::Config(format!(
                "frame has {} features, model expects {}",
                frame.len(),
                self.cfg.feature_dim
            )));
        }
        let p = &self.params;
        let cfg = &self.cfg;
        let mut x = lin_row(frame, p.get("asr.in.w")?, p.get("asr.in.b")?);
        for l in 0..cfg.encoder_layers {
            let pre = format!("asr.l{l}");
            let xn = ln_row(
                &x,
                p.get(&format!("{pre}.ln1.g"))?,
                p.get(&format!("{pre}.ln1.b"))?,
            );
            let q = lin_row(
                &xn,
                p.get(&format!("{pre}.att.q.w"))?,
                p.get(&format!("{pre}.att.q.b"))?,
            );
            let k = lin_row(
                &xn,
                p.get(&format!("{pre}.att.k.w"))?,
                p.get(&format!("{pre}.att.k.b"))?,
            );
            let v = lin_row(
                &xn,
                p.get(&format!("{pre}.att.v.w"))?,
                p.get(&format!("{pre}.att.v.b"))?,
            );
            let ring = &mut self.rings[l];
            ring.keys.push(k);
            ring.values.push(v);
            if ring.keys.len() > cfg.causal_context {
                ring.keys.remove(0);
                ring.values.remove(0);
            }
            let cat = attend_row(cfg, &q, &ring.keys, &ring.values, true);
            let att = lin_row(
                &cat,
                p.get(&format!("{pre}.att.o.w"))?,
                p.get(&format!("{pre}.att.o.b"))?,
            );
            let r = add_vec(&x, &att);
            let rn = ln_row(
                &r,
                p.get(&format!("{pre}.ln2.g"))?,
                p.get(&format!("{pre}.ln2.b"))?,
            );
            let mut a = lin_row(
                &rn,
                p.get(&format!("{pre}.ffn.a.w"))?,
                p.get(&format!("{pre}.ffn.a.b"))?,
            );
            tanh_vec(&mut a);
            let f = lin_row(
                &a,
                p.get(&format!("{pre}.ffn.b.w"))?,
                p.get(&format!("{pre}.ffn.b.b"))?,
            );
            x = add_vec(&r, &f);
            if l + 1 == cfg.fusion_layer_index {
                x = match &self.fusion {
                    Fusion::Gate(gate) => x.iter().zip(gate).map(|(a, g)| a * g).collect(),
                    Fusion::Attend { keys, values } => {
                        let q = lin_row(&x, p.get("fuse.att.q.w")?, p.get("fuse.att.q.b")?);
                        let cat = attend_row(cfg, &q, keys, values, false);
                        let att =
                            lin_row(&cat, p.get("fuse.att.o.w")?, p.get("fuse.att.o.b")?);
                        add_vec(&x, &att)
                    }
                };
            }
        }
        Ok(ln_row(
            &x,
            p.get("asr.out_ln.g")?,
            p.get("asr.out_ln.b")?,
        ))
    }
}

/// Prediction and joint networks evaluated on raw rows; the exact op and
/// accumulation order of the tape path.
struct RawJoint<'a> {
    blank: usize,
    embed: &'a Tensor,
    w1: &'a Tensor,
    w2: &'a Tensor,
    pred_b: &'a Tensor,
    z_w: &'a Tensor,
    g_w: &'a Tensor,
    joint_b: &'a Tensor,
    out_w: &'a Tensor,
    out_b: &'a Tensor,
}

impl<'a> RawJoint<'a> {
    fn new(cfg: &ModelConfig, params: &'a ModelParams) -> Result<Self> {
        Ok(Self {
            blank: cfg.blank_id,
            embed: params.get("pred.embed")?,
            w1: params.get("pred.w1")?,
            w2: params.get("pred.w2")?,
            pred_b: params.get("pred.b")?,
            z_w: params.get("joint.z.w")?,
            g_w: params.get("joint.g.w")?,
            joint_b: params.get("joint.b")?,
            out_w: params.get("joint.out.w")?,
            out_b: params.get("joint.out.b")?,
        })
    }

    /// Prediction-network row for the next emission after `emitted`.
    fn pred_row(&self, emitted: &[usize]) -> Vec<f64> {
        let n = emitted.len();
        let last = if n >= 1 { emitted[n - 1] } else { self.blank };
        let prior = if n >= 2 { emitted[n - 2] } else { self.blank };
        let x1 = matmul_row(self.embed.row(last), self.w1);
        let x2 = matmul_row(self.embed.row(prior), self.w2);
        let mut s = add_vec(&x1, &x2);
        for (o, &bv) in s.iter_mut().zip(self.pred_b.data()) {
            *o += bv;
        }
        tanh_vec(&mut s);
        s
    }

    /// Unnormalized joint logits for one encoder row and label history.
    fn logits(&self, z_row: &[f64], emitted: &[usize]) -> Vec<f64> {
        let g = self.pred_row(emitted);
        let zw = matmul_row(z_row, self.z_w);
        let gw = matmul_row(&g, self.g_w);
        let mut s = add_vec(&zw, &gw);
        for (o, &bv) in s.iter_mut().zip(self.joint_b.data()) {
            *o += bv;
        }
        tanh_vec(&mut s);
        lin_row(&s, self.out_w, self.out_b)
    }
}

/// Greedy decoding of a whole utterance: tape encoder forward, then the
/// shared per-frame emission loop over raw joint evaluations.
pub fn batch_decode(
    cfg: &ModelConfig,
    params: &ModelParams,
    features: &Tensor,
    bias: &SpeakerBias,
    max_symbols_per_frame: usize,
) -> Result<Hypothesis> {
    cfg.validate()?;
    params.check_complete(cfg)?;
    check_bias(cfg, bias)?;
    let mut tape = Tape::new();
    let pb = forward::ParamBinding::frozen(&mut tape, params);
    let tb = match &bias.form {
        BiasForm::Pooled(t) => TapeBias::Pooled(tape.leaf(t.clone())),
        BiasForm::Sequence(t) => TapeBias::Sequence(tape.leaf(t.clone())),
    };
    let z = forward::asr_encode(&mut tape, &pb, cfg, features, &tb, bias.provenance)?;
    let zt = tape.value(z).clone();
    let rj = RawJoint::new(cfg, params)?;
    Ok(greedy_decode(zt.row_count(), max_symbols_per_frame, |t, emitted| {
        rj.logits(zt.row(t), emitted)
    }))
}

/// Token emitted at a frame, in push order.
pub type TokenEvent = (usize, usize);

/// Frame-by-frame decoder. Each pushed frame is encoded incrementally and
/// fed through the same greedy emission loop as [`batch_decode`]; the
/// running hypothesis after `n` pushed frames is bit-identical to batch
/// decoding the first `n` frames.
pub struct StreamingDecoder {
    enc: StreamingEncoder,
    hyp: Hypothesis,
    frames: usize,
    max_symbols_per_frame: usize,
}

impl StreamingDecoder {
    pub fn new(
        cfg: &ModelConfig,
        params: &ModelParams,
        bias: &SpeakerBias,
        max_symbols_per_frame: usize,
    ) -> Result<Self> {
        Ok(Self {
            enc: StreamingEncoder::new(cfg, params, bias)?,
            hyp: Hypothesis::new(),
            frames: 0,
            max_symbols_per_frame,
        })
    }

    /// Encodes one frame and emits greedily; returns the `(token, frame)`
    /// events this frame produced.
    pub fn push_frame(&mut self, frame: &[f64]) -> Result<Vec<TokenEvent>> {
        let z = self.enc.push(frame)?;
        let rj = RawJoint::new(&self.enc.cfg, &self.enc.params)?;
        let before = self.hyp.tokens.len();
        decode_frame(
            self.frames,
            self.max_symbols_per_frame,
            &mut self.hyp,
            &mut |_, emitted| rj.logits(&z, emitted),
        );
        self.frames += 1;
        Ok(self.hyp.tokens[before..]
            .iter()
            .copied()
            .zip(self.hyp.frame_indices[before..].iter().copied())
            .collect())
    }

    pub fn frames_seen(&self) -> usize {
        self.frames
    }

    pub fn hypothesis(&self) -> &Hypothesis {
        &self.hyp
    }

    pub fn into_hypothesis(self) -> Hypothesis {
        self.hyp
    }
}
