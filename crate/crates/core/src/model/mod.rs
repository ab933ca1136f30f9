//! Deterministic decoder-only transformer with post-norm blocks.
//!
//! Each block computes
//!
//! ```text
//! a_l = MultiHeadAttn(h_{l-1})
//! z_l = LN1(h_{l-1} + a_l)
//! x_l = MLP(z_l)
//! h_l = LN2(x_l + z_l)
//! ```
//!
//! and the unembedding reads `h_{L-1}` directly. Weights are `f32`;
//! activations are carried in `f64`.

pub(crate) mod forward;
mod generate;
pub(crate) mod io;
mod planted;
pub mod vocab;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use forward::{
    apply_head_mask, forward_full, forward_with_hook, logits_from, reproject_without_head, DecodeState, ForwardHook,
    ForwardTrace, LayerRecord, NoHook,
};
pub use generate::{continue_greedy, generate};
pub use io::{load_weights, read_weights, save_weights, write_weights, WEIGHT_MAGIC_PREFIX};
pub use planted::{
    build_planted, build_planted_with_gains, build_planted_with_retry, random_model, spurious_logit_drop, CircuitGains,
};
pub use vocab::WorldLayout;

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            n_heads: 4,
            d_model: 64,
            d_mlp: 128,
            vocab_size: 32,
            max_seq_len: 48,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
            if v > u32::MAX as usize {
                return Err(Error::Config(format!("{name} does not fit in u32")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be >= 2".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Ground truth for a planted hallucination circuit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub hallucination_layers: Vec<usize>,
    pub trigger_token: TokenId,
    pub spurious_token: TokenId,
    pub strength: f64,
    pub task_layers: Vec<usize>,
}

impl PlantedSpec {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let l = config.n_layers;
        for &x in self.hallucination_layers.iter().chain(&self.task_layers) {
            if x >= l {
                return Err(Error::Config(format!("layer index {x} out of range for {l} layers")));
            }
        }
        if let Some(x) = self.hallucination_layers.iter().find(|x| self.task_layers.contains(x)) {
            return Err(Error::Config(format!(
                "layer {x} is both a hallucination layer and a task layer"
            )));
        }
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::Config(format!(
                "strength must be finite and >= 0, got {}",
                self.strength
            )));
        }
        let v = config.vocab_size as u32;
        if self.trigger_token >= v || self.spurious_token >= v {
            return Err(Error::Config("trigger/spurious token out of vocabulary".into()));
        }
        if self.trigger_token == self.spurious_token {
            return Err(Error::Config("trigger and spurious token must differ".into()));
        }
        Ok(())
    }
}

/// Attention-head mask `M^h`: zeroes the output of one head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HeadMask {
    pub layer: usize,
    pub head: usize,
}

impl HeadMask {
    pub fn new(layer: usize, head: usize) -> Self {
        HeadMask { layer, head }
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers || self.head >= config.n_heads {
            return Err(Error::Input(format!(
                "head mask ({}, {}) out of range for {} layers x {} heads",
                self.layer, self.head, config.n_layers, config.n_heads
            )));
        }
        Ok(())
    }
}

/// Weights of one transformer block. Matrices are row-major `out x in`.
///
/// Rows `[h * d_head, (h + 1) * d_head)` of `wq`/`wk`/`wv` belong to head `h`;
/// so do columns `[h * d_head, (h + 1) * d_head)` of `wo`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub ln1_g: Vec<f32>,
    pub ln1_b: Vec<f32>,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
    pub ln2_g: Vec<f32>,
    pub ln2_b: Vec<f32>,
}

impl LayerWeights {
    pub(crate) fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let m = cfg.d_mlp;
        LayerWeights {
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            ln1_g: vec![1.0; d],
            ln1_b: vec![0.0; d],
            w1: vec![0.0; m * d],
            b1: vec![0.0; m],
            w2: vec![0.0; d * m],
            b2: vec![0.0; d],
            ln2_g: vec![1.0; d],
            ln2_b: vec![0.0; d],
        }
    }

    /// `(name, dims, data)` for every tensor, in file order.
    pub(crate) fn tensors(&self, cfg: &ModelConfig) -> [(&'static str, Vec<usize>, &Vec<f32>); 12] {
        let d = cfg.d_model;
        let m = cfg.d_mlp;
        [
            ("wq", vec![d, d], &self.wq),
            ("wk", vec![d, d], &self.wk),
            ("wv", vec![d, d], &self.wv),
            ("wo", vec![d, d], &self.wo),
            ("ln1_g", vec![d], &self.ln1_g),
            ("ln1_b", vec![d], &self.ln1_b),
            ("w1", vec![m, d], &self.w1),
            ("b1", vec![m], &self.b1),
            ("w2", vec![d, m], &self.w2),
            ("b2", vec![d], &self.b2),
            ("ln2_g", vec![d], &self.ln2_g),
            ("ln2_b", vec![d], &self.ln2_b),
        ]
    }
}

/// An immutable transformer. Construct with [`random_model`], [`build_planted`]
/// or [`load_weights`]; derive modified copies with the surgery helpers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    tok_embed: Vec<f32>,
    pos_embed: Vec<f32>,
    layers: Vec<LayerWeights>,
    /// `d_model x vocab`, row-major.
    unembed: Vec<f32>,
    planted: Option<PlantedSpec>,
}

impl Model {
    pub(crate) fn from_parts(
        config: ModelConfig,
        tok_embed: Vec<f32>,
        pos_embed: Vec<f32>,
        layers: Vec<LayerWeights>,
        unembed: Vec<f32>,
        planted: Option<PlantedSpec>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let bad = |what: &str| Err(Error::Format(format!("tensor {what} has the wrong shape")));
        if tok_embed.len() != config.vocab_size * d {
            return bad("tok_embed");
        }
        if pos_embed.len() != config.max_seq_len * d {
            return bad("pos_embed");
        }
        if unembed.len() != d * config.vocab_size {
            return bad("unembed");
        }
        if layers.len() != config.n_layers {
            return bad("layers");
        }
        let z = LayerWeights::zeros(&config);
        for lw in &layers {
            for ((name, _, want), (_, _, got)) in z.tensors(&config).iter().zip(lw.tensors(&config).iter()) {
                if want.len() != got.len() {
                    return bad(name);
                }
            }
        }
        if let Some(p) = &planted {
            p.validate(&config)?;
        }
        Ok(Model {
            config,
            tok_embed,
            pos_embed,
            layers,
            unembed,
            planted,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn planted(&self) -> Option<&PlantedSpec> {
        self.planted.as_ref()
    }

    pub fn layer(&self, l: usize) -> &LayerWeights {
        &self.layers[l]
    }

    pub fn tok_embed(&self) -> &[f32] {
        &self.tok_embed
    }

    pub fn pos_embed(&self) -> &[f32] {
        &self.pos_embed
    }

    pub fn unembed(&self) -> &[f32] {
        &self.unembed
    }

    /// Column `token` of the unembedding matrix.
    pub fn unembed_column(&self, token: TokenId) -> Vec<f64> {
        let v = self.config.vocab_size;
        (0..self.config.d_model)
            .map(|i| f64::from(self.unembed[i * v + token as usize]))
            .collect()
    }

    /// SHA-256 of the serialized weight file, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        write_weights(self, &mut buf).expect("writing to a Vec cannot fail");
        hex::encode(Sha256::digest(&buf))
    }

    /// True when every tensor matches `other` bit for bit (the planted spec is ignored).
    pub fn same_weights(&self, other: &Model) -> bool {
        self.config == other.config
            && self.tok_embed == other.tok_embed
            && self.pos_embed == other.pos_embed
            && self.layers == other.layers
            && self.unembed == other.unembed
    }

    /// Copy of the model with head `head` of `layer` removed from the output
    /// projection (its `wo` columns zeroed).
    pub fn with_head_zeroed(&self, layer: usize, head: usize) -> Model {
        let mut m = self.clone();
        let d = m.config.d_model;
        let dh = m.config.d_head();
        let wo = &mut m.layers[layer].wo;
        for o in 0..d {
            for c in head * dh..(head + 1) * dh {
                wo[o * d + c] = 0.0;
            }
        }
        m
    }

    /// Copy of the model with every attention output projection zeroed.
    pub fn with_attention_zeroed(&self) -> Model {
        let mut m = self.clone();
        for lw in &mut m.layers {
            lw.wo.iter_mut().for_each(|w| *w = 0.0);
        }
        m
    }

    /// Copy of the model with every element of `layers`' weights passed through `f`.
    pub fn map_layer_weights(&self, mut f: impl FnMut(usize, &mut LayerWeights)) -> Model {
        let mut m = self.clone();
        for (l, lw) in m.layers.iter_mut().enumerate() {
            f(l, lw);
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let c = ModelConfig {
            n_heads: 5,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig {
            max_seq_len: 1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            d_mlp: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn planted_spec_validation() {
        let cfg = ModelConfig::default();
        let mut p = PlantedSpec {
            hallucination_layers: vec![3],
            trigger_token: 8,
            spurious_token: 9,
            strength: 4.0,
            task_layers: vec![1, 6],
        };
        assert!(p.validate(&cfg).is_ok());
        p.task_layers.push(3);
        assert!(p.validate(&cfg).is_err());
        p.task_layers = vec![1, 6];
        p.strength = -1.0;
        assert!(p.validate(&cfg).is_err());
        p.strength = 1.0;
        p.hallucination_layers = vec![8];
        assert!(p.validate(&cfg).is_err());
    }

    #[test]
    fn head_mask_range() {
        let cfg = ModelConfig::default();
        assert!(HeadMask::new(7, 3).check(&cfg).is_ok());
        assert!(HeadMask::new(8, 0).check(&cfg).is_err());
        assert!(HeadMask::new(0, 4).check(&cfg).is_err());
    }
}
