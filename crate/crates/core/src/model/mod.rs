//! The three target-speaker transducer variants and their parameters.
//!
//! `baseline` pools the enrollment encoding into one vector and gates the
//! ASR encoder with a Hadamard product. `attentive` replaces the pooled
//! vector with cross-attention from encoder frames into the enrollment
//! sequence. `robust` additionally decodes the wake-word text and uses
//! text-guided attention to build the speaker bias, so a corrupted
//! enrollment recording degrades it far less.
//!
//! Parameter tensors live in a flat path-keyed map; `param_shapes` is the
//! single source of truth for which paths exist per variant, with which
//! shapes, and how each is initialized.

mod forward;
mod infer;

pub use forward::{
    asr_encode, baseline_fuse, build_lattice, contextual_bias_attention, enroll_encode, joint,
    model_loss, predict, speaker_bias, text_decode, text_guided_attention, ParamBinding, TapeBias,
};
pub use infer::{batch_decode, build_bias, StreamingDecoder, TokenEvent, MAX_SYMBOLS_PER_FRAME};

use crate::seeds;
use crate::tensor::{Tensor, TensorError};
use crate::transducer::TransducerError;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Transducer(#[from] TransducerError),
    #[error("model config: {0}")]
    Config(String),
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error("speaker bias {provenance:?}/{form} does not fit the {variant:?} variant")]
    BiasMismatch {
        variant: Variant,
        provenance: Provenance,
        form: &'static str,
    },
    #[error("token {token} out of vocabulary of size {vocab}")]
    Oov { token: usize, vocab: usize },
    #[error("empty {0}")]
    EmptyInput(&'static str),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Attentive,
    Robust,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Baseline => "baseline",
            Variant::Attentive => "attentive",
            Variant::Robust => "robust",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Acoustic feature dimension the encoders consume.
    pub feature_dim: usize,
    pub d_model: usize,
    /// Speaker-bias dimension (the key/value side of the fusion attention).
    pub d_h: usize,
    /// Enrollment-encoder output dimension.
    pub d_a: usize,
    /// Text-decoder output dimension.
    pub d_l: usize,
    pub attention_heads: usize,
    pub attention_dim: usize,
    pub encoder_layers: usize,
    /// Fusion runs after this many encoder layers (1-based position).
    pub fusion_layer_index: usize,
    pub vocab_size: usize,
    pub blank_id: usize,
    /// Frames each causal self-attention row may see, current frame included.
    pub causal_context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Baseline,
            feature_dim: 40,
            d_model: 128,
            d_h: 128,
            d_a: 128,
            d_l: 128,
            attention_heads: 8,
            attention_dim: 256,
            encoder_layers: 4,
            fusion_layer_index: 1,
            vocab_size: 500,
            blank_id: 0,
            causal_context: 16,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration matched to the synthetic feature corpus.
    pub fn toy(variant: Variant) -> Self {
        Self {
            variant,
            feature_dim: 16,
            d_model: 32,
            d_h: 32,
            d_a: 32,
            d_l: 32,
            attention_heads: 2,
            attention_dim: 32,
            encoder_layers: 2,
            fusion_layer_index: 1,
            vocab_size: 17,
            blank_id: 0,
            causal_context: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("d_model", self.d_model),
            ("d_h", self.d_h),
            ("d_a", self.d_a),
            ("d_l", self.d_l),
            ("attention_dim", self.attention_dim),
            ("causal_context", self.causal_context),
            ("attention_heads", self.attention_heads),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.attention_dim % self.attention_heads != 0 {
            return Err(ModelError::Config(format!(
                "attention_dim {} not divisible by {} heads",
                self.attention_dim, self.attention_heads
            )));
        }
        if self.fusion_layer_index < 1 || self.fusion_layer_index >= self.encoder_layers {
            return Err(ModelError::Config(format!(
                "fusion_layer_index {} must satisfy 1 <= index < {} encoder layers",
                self.fusion_layer_index, self.encoder_layers
            )));
        }
        if self.vocab_size < 2 {
            return Err(ModelError::Config("vocab_size must be at least 2".into()));
        }
        if self.blank_id >= self.vocab_size {
            return Err(ModelError::Config(format!(
                "blank_id {} outside vocabulary of {}",
                self.blank_id, self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| ModelError::Config(format!("parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of the canonical serialized form; embedded in checkpoints so a
    /// checkpoint can never silently load under a different architecture.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        hex(&h.finalize())
    }

    pub fn head_dim(&self) -> usize {
        self.attention_dim / self.attention_heads
    }

    fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").expect("write to string");
    }
    s
}

/// Which bias pathway produced a speaker embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    AcousticOnly,
    TextGuided,
}

/// The target-speaker conditioning signal handed to the ASR encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum BiasForm {
    /// One d_h vector, time-mean of the bias sequence.
    Pooled(Tensor),
    /// T'×d_h sequence attended into by the fusion attention.
    Sequence(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerBias {
    pub form: BiasForm,
    pub provenance: Provenance,
}

impl SpeakerBias {
    pub fn form_name(&self) -> &'static str {
        match self.form {
            BiasForm::Pooled(_) => "pooled",
            BiasForm::Sequence(_) => "sequence",
        }
    }

    /// The (form, provenance) pair each variant requires.
    pub fn matches(&self, variant: Variant) -> bool {
        match (variant, &self.form, self.provenance) {
            (Variant::Baseline, BiasForm::Pooled(_), Provenance::AcousticOnly) => true,
            (Variant::Attentive, BiasForm::Sequence(_), Provenance::AcousticOnly) => true,
            (Variant::Robust, BiasForm::Sequence(_), Provenance::TextGuided) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// uniform(−1/√fan_in, 1/√fan_in), values snapped to the f32 grid.
    Uniform { fan_in: usize },
    Zero,
    One,
}

pub(crate) struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    init: Init,
}

fn linear(specs: &mut Vec<ParamSpec>, path: &str, d_in: usize, d_out: usize, zero: bool) {
    let init = if zero {
        Init::Zero
    } else {
        Init::Uniform { fan_in: d_in }
    };
    specs.push(ParamSpec {
        path: format!("{path}.w"),
        shape: vec![d_in, d_out],
        init,
    });
    specs.push(ParamSpec {
        path: format!("{path}.b"),
        shape: vec![d_out],
        init,
    });
}

fn layer_norm(specs: &mut Vec<ParamSpec>, path: &str, d: usize) {
    specs.push(ParamSpec {
        path: format!("{path}.g"),
        shape: vec![d],
        init: Init::One,
    });
    specs.push(ParamSpec {
        path: format!("{path}.b"),
        shape: vec![d],
        init: Init::Zero,
    });
}

/// Cross- or self-attention unit: q from `q_in`, keys/values from `kv_in`,
/// output projection to `d_out`. `zero_out` zeroes the output projection.
fn attention(
    specs: &mut Vec<ParamSpec>,
    path: &str,
    q_in: usize,
    kv_in: usize,
    attn: usize,
    d_out: usize,
    zero_out: bool,
) {
    linear(specs, &format!("{path}.q"), q_in, attn, false);
    linear(specs, &format!("{path}.k"), kv_in, attn, false);
    linear(specs, &format!("{path}.v"), kv_in, attn, false);
    linear(specs, &format!("{path}.o"), attn, d_out, zero_out);
}

fn encoder_stack(specs: &mut Vec<ParamSpec>, prefix: &str, cfg: &ModelConfig) {
    let d = cfg.d_model;
    linear(specs, &format!("{prefix}.in"), cfg.feature_dim, d, false);
    for l in 0..cfg.encoder_layers {
        let p = format!("{prefix}.l{l}");
        layer_norm(specs, &format!("{p}.ln1"), d);
        attention(specs, &format!("{p}.att"), d, d, cfg.attention_dim, d, false);
        layer_norm(specs, &format!("{p}.ln2"), d);
        linear(specs, &format!("{p}.ffn.a"), d, cfg.ffn_dim(), false);
        linear(specs, &format!("{p}.ffn.b"), cfg.ffn_dim(), d, false);
    }
    layer_norm(specs, &format!("{prefix}.out_ln"), d);
}

fn bigram_decoder(specs: &mut Vec<ParamSpec>, prefix: &str, cfg: &ModelConfig) {
    let d = cfg.d_model;
    specs.push(ParamSpec {
        path: format!("{prefix}.embed"),
        shape: vec![cfg.vocab_size, d],
        init: Init::Uniform { fan_in: d },
    });
    specs.push(ParamSpec {
        path: format!("{prefix}.w1"),
        shape: vec![d, d],
        init: Init::Uniform { fan_in: d },
    });
    specs.push(ParamSpec {
        path: format!("{prefix}.w2"),
        shape: vec![d, d],
        init: Init::Uniform { fan_in: d },
    });
    specs.push(ParamSpec {
        path: format!("{prefix}.b"),
        shape: vec![d],
        init: Init::Uniform { fan_in: d },
    });
}

pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    let d = cfg.d_model;
    encoder_stack(&mut s, "asr", cfg);
    encoder_stack(&mut s, "enr", cfg);
    linear(&mut s, "enr.out", d, cfg.d_a, false);
    bigram_decoder(&mut s, "pred", cfg);
    // tanh(W_z z + W_g g + b): two projections share one bias.
    s.push(ParamSpec {
        path: "joint.z.w".into(),
        shape: vec![d, d],
        init: Init::Uniform { fan_in: d },
    });
    s.push(ParamSpec {
        path: "joint.g.w".into(),
        shape: vec![d, d],
        init: Init::Uniform { fan_in: d },
    });
    s.push(ParamSpec {
        path: "joint.b".into(),
        shape: vec![d],
        init: Init::Uniform { fan_in: d },
    });
    linear(&mut s, "joint.out", d, cfg.vocab_size, false);
    match cfg.variant {
        Variant::Baseline => {
            linear(&mut s, "fuse.enr_bias", cfg.d_a, cfg.d_h, false);
            // Unit-gate start (w = 0, b = 1): multiplicative fusion begins
            // as the identity, the pooled analogue of the zero-initialized
            // attention output projections, so speaker dependence grows
            // from a working bias-free encoder instead of a deranged gate.
            s.push(ParamSpec {
                path: "fuse.pool.w".into(),
                shape: vec![cfg.d_h, d],
                init: Init::Zero,
            });
            s.push(ParamSpec {
                path: "fuse.pool.b".into(),
                shape: vec![d],
                init: Init::One,
            });
        }
        Variant::Attentive => {
            linear(&mut s, "fuse.enr_bias", cfg.d_a, cfg.d_h, false);
            attention(&mut s, "fuse.att", d, cfg.d_h, cfg.attention_dim, d, true);
        }
        Variant::Robust => {
            bigram_decoder(&mut s, "txt.dec", cfg);
            linear(&mut s, "txt.dec.out", d, cfg.d_l, false);
            attention(&mut s, "txt.att", cfg.d_a, cfg.d_l, cfg.attention_dim, cfg.d_l, false);
            linear(&mut s, "fuse.txt_bias", cfg.d_l, cfg.d_h, false);
            attention(&mut s, "fuse.att", d, cfg.d_h, cfg.attention_dim, d, true);
        }
    }
    s
}

/// Expected parameter paths and shapes for a configuration.
pub fn param_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    param_specs(cfg)
        .into_iter()
        .map(|p| (p.path, p.shape))
        .collect()
}

/// Flat path-keyed parameter container.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelParams {
    map: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.map
            .get(path)
            .ok_or_else(|| ModelError::MissingParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(path)
            .ok_or_else(|| ModelError::MissingParam(path.to_string()))
    }

    pub fn insert(&mut self, path: String, t: Tensor) {
        self.map.insert(path, t);
    }

    /// Path-sorted iteration; the canonical parameter order everywhere
    /// (optimizer state, checkpoints, gradient checks).
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Checks the container against the shapes the config demands: no
    /// missing paths, no extras, no shape drift, all values finite.
    pub fn check_complete(&self, cfg: &ModelConfig) -> Result<()> {
        let want = param_shapes(cfg);
        for (path, shape) in &want {
            let t = self.get(path)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter '{path}' has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(ModelError::Config(format!(
                    "parameter '{path}' contains non-finite values"
                )));
            }
        }
        for path in self.map.keys() {
            if !want.contains_key(path) {
                return Err(ModelError::Config(format!(
                    "unexpected parameter '{path}' for this configuration"
                )));
            }
        }
        Ok(())
    }
}

/// Fresh initialization. Every value is drawn on the f32 grid so inference
/// checkpoints (stored as f32) round-trip untouched parameters bit-exactly.
/// Each path gets its own forked rng: initialization is order-independent.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut params = ModelParams::default();
    for spec in param_specs(cfg) {
        let numel: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Zero => vec![0.0; numel],
            Init::One => vec![1.0; numel],
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut rng = seeds::rng_from(seeds::fork(seed, &format!("init/{}", spec.path)));
                (0..numel)
                    .map(|_| rng.gen_range(-bound..bound) as f32 as f64)
                    .collect()
            }
        };
        params.insert(spec.path, Tensor::new(spec.shape, data)?);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_validates() {
        for v in [Variant::Baseline, Variant::Attentive, Variant::Robust] {
            ModelConfig::toy(v).validate().unwrap();
        }
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = ModelConfig::toy(Variant::Baseline);
        c.fusion_layer_index = 2; // == encoder_layers
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(Variant::Baseline);
        c.fusion_layer_index = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(Variant::Baseline);
        c.attention_dim = 33;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(Variant::Baseline);
        c.blank_id = 17;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_roundtrip_preserves_hash() {
        let c = ModelConfig::toy(Variant::Robust);
        let back = ModelConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
        let mut other = c.clone();
        other.d_model = 64;
        assert_ne!(c.hash(), other.hash());
    }

    #[test]
    fn init_is_complete_and_deterministic() {
        for v in [Variant::Baseline, Variant::Attentive, Variant::Robust] {
            let cfg = ModelConfig::toy(v);
            let p = init_params(&cfg, 1).unwrap();
            p.check_complete(&cfg).unwrap();
            let q = init_params(&cfg, 1).unwrap();
            assert_eq!(p, q);
            let r = init_params(&cfg, 2).unwrap();
            assert_ne!(p, r);
        }
    }

    #[test]
    fn fusion_attention_output_projection_starts_at_zero() {
        for v in [Variant::Attentive, Variant::Robust] {
            let cfg = ModelConfig::toy(v);
            let p = init_params(&cfg, 3).unwrap();
            assert!(p.get("fuse.att.o.w").unwrap().data().iter().all(|&x| x == 0.0));
            assert!(p.get("fuse.att.o.b").unwrap().data().iter().all(|&x| x == 0.0));
            // Every other attention projection is live.
            let live = p.get(if v == Variant::Robust { "txt.att.o.w" } else { "fuse.att.q.w" });
            assert!(live.unwrap().data().iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn init_values_sit_on_f32_grid_and_in_bounds() {
        let cfg = ModelConfig::toy(Variant::Robust);
        let p = init_params(&cfg, 9).unwrap();
        for (path, t) in p.iter() {
            for &v in t.data() {
                assert_eq!(v, v as f32 as f64, "{path} off the f32 grid");
                assert!(v.abs() <= 1.0, "{path} out of bounds");
            }
        }
    }

    #[test]
    fn variant_param_sets_differ_where_expected() {
        let b = param_shapes(&ModelConfig::toy(Variant::Baseline));
        let a = param_shapes(&ModelConfig::toy(Variant::Attentive));
        let r = param_shapes(&ModelConfig::toy(Variant::Robust));
        assert!(b.contains_key("fuse.pool.w") && !a.contains_key("fuse.pool.w"));
        assert!(a.contains_key("fuse.att.q.w") && !b.contains_key("fuse.att.q.w"));
        assert!(r.contains_key("txt.att.q.w") && !a.contains_key("txt.att.q.w"));
        assert!(r.contains_key("txt.dec.embed"));
        // Shared trunk is identical across variants.
        for k in ["asr.l0.att.q.w", "pred.embed", "joint.out.w", "enr.out.w"] {
            assert_eq!(b.get(k), a.get(k));
            assert_eq!(a.get(k), r.get(k));
        }
    }

    #[test]
    fn bias_matching_matrix() {
        let pooled = SpeakerBias {
            form: BiasForm::Pooled(Tensor::zeros(vec![4])),
            provenance: Provenance::AcousticOnly,
        };
        let seq_aco = SpeakerBias {
            form: BiasForm::Sequence(Tensor::zeros(vec![2, 4])),
            provenance: Provenance::AcousticOnly,
        };
        let seq_txt = SpeakerBias {
            form: BiasForm::Sequence(Tensor::zeros(vec![2, 4])),
            provenance: Provenance::TextGuided,
        };
        assert!(pooled.matches(Variant::Baseline));
        assert!(!pooled.matches(Variant::Attentive));
        assert!(seq_aco.matches(Variant::Attentive));
        assert!(!seq_aco.matches(Variant::Robust));
        assert!(seq_txt.matches(Variant::Robust));
        assert!(!seq_txt.matches(Variant::Baseline));
    }

    #[test]
    fn missing_param_is_named() {
        let p = ModelParams::default();
        match p.get("asr.in.w") {
            Err(ModelError::MissingParam(path)) => assert_eq!(path, "asr.in.w"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
