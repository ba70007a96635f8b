//! Toy LLaMA-style decoder: configuration, presets, weights, synthetic
//! generation, reference forward pass and on-disk container.

mod forward;
mod io;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use forward::forward_logits;
pub use io::{load_model, save_model};
pub(crate) use io::{push_layer, push_mlp_and_norms, read_layer};
pub(crate) use forward::swiglu;
pub use synthetic::{generate_synthetic, SpectrumSpec};

use crate::densemat::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub mlp_hidden: usize,
    pub rope_base: f64,
    pub rope_enabled: bool,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_layers == 0
            || self.num_heads == 0
            || self.num_kv_heads == 0
            || self.head_dim == 0
            || self.vocab_size == 0
            || self.mlp_hidden == 0
            || self.max_seq_len == 0
        {
            return bad("all counts must be positive".into());
        }
        if self.model_dim != self.num_heads * self.head_dim {
            return bad(format!(
                "model_dim {} != num_heads {} x head_dim {}",
                self.model_dim, self.num_heads, self.head_dim
            ));
        }
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return bad(format!(
                "num_heads {} not divisible by num_kv_heads {}",
                self.num_heads, self.num_kv_heads
            ));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return bad(format!("rope_base must be positive, got {}", self.rope_base));
        }
        if self.rope_enabled && !self.head_dim.is_multiple_of(2) {
            return bad(format!("rotary embedding needs even head_dim, got {}", self.head_dim));
        }
        Ok(())
    }

    /// `h_kv · d`: width of one layer's key (or value) projection.
    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    pub fn q_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Query heads per kv head.
    pub fn group_size(&self) -> usize {
        self.num_heads / self.num_kv_heads
    }

    /// kv head serving query head `j`: `⌊j · h_kv / h⌋`.
    pub fn kv_head_of(&self, j: usize) -> usize {
        j * self.num_kv_heads / self.num_heads
    }

    pub fn is_mha(&self) -> bool {
        self.num_heads == self.num_kv_heads
    }

    /// Approximate parameter count, used by the desk-scale guard.
    pub fn parameter_count(&self) -> u64 {
        let d = self.model_dim as u64;
        let per_layer = d * self.q_dim() as u64 * 2
            + d * self.kv_dim() as u64 * 2
            + 3 * d * self.mlp_hidden as u64
            + 2 * d;
        per_layer * self.num_layers as u64 + 2 * d * self.vocab_size as u64 + d
    }
}

pub const PRESET_NAMES: [&str; 5] = ["llama2-13b", "llama3-8b", "llama3-70b", "toy-small", "toy-deep"];

/// Named architectures. The llama presets carry published dimensions; the toy
/// presets are desk-scale with a byte-level vocabulary.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let cfg = match name {
        "llama2-13b" => ModelConfig {
            num_layers: 40,
            num_heads: 40,
            num_kv_heads: 40,
            head_dim: 128,
            model_dim: 5120,
            vocab_size: 32000,
            mlp_hidden: 13824,
            rope_base: 10_000.0,
            rope_enabled: true,
            max_seq_len: 4096,
        },
        "llama3-8b" => ModelConfig {
            num_layers: 32,
            num_heads: 32,
            num_kv_heads: 8,
            head_dim: 128,
            model_dim: 4096,
            vocab_size: 128_256,
            mlp_hidden: 14336,
            rope_base: 500_000.0,
            rope_enabled: true,
            max_seq_len: 8192,
        },
        "llama3-70b" => ModelConfig {
            num_layers: 80,
            num_heads: 64,
            num_kv_heads: 8,
            head_dim: 128,
            model_dim: 8192,
            vocab_size: 128_256,
            mlp_hidden: 28672,
            rope_base: 500_000.0,
            rope_enabled: true,
            max_seq_len: 8192,
        },
        "toy-small" => ModelConfig {
            num_layers: 8,
            num_heads: 4,
            num_kv_heads: 2,
            head_dim: 16,
            model_dim: 64,
            vocab_size: 256,
            mlp_hidden: 128,
            rope_base: 10_000.0,
            rope_enabled: true,
            max_seq_len: 256,
        },
        "toy-deep" => ModelConfig {
            num_layers: 16,
            num_heads: 4,
            num_kv_heads: 2,
            head_dim: 16,
            model_dim: 64,
            vocab_size: 256,
            mlp_hidden: 128,
            rope_base: 10_000.0,
            rope_enabled: true,
            max_seq_len: 256,
        },
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    Ok(cfg)
}

/// Default skip threshold on the cumulative condition number for the
/// full-size presets; toy presets have none and need an explicit value.
pub fn preset_threshold(name: &str) -> Option<f64> {
    match name {
        "llama3-8b" => Some(30.0),
        "llama2-13b" | "llama3-70b" => Some(90.0),
        _ => None,
    }
}

/// One decoder block. Activations are row vectors multiplied on the right.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T: Scalar> {
    /// D × (h·d)
    pub w_q: Matrix<T>,
    /// D × (h_kv·d)
    pub w_k: Matrix<T>,
    /// D × (h_kv·d)
    pub w_v: Matrix<T>,
    /// (h·d) × D
    pub w_o: Matrix<T>,
    pub attn_norm: Vec<T>,
    pub mlp_norm: Vec<T>,
    /// D × hidden
    pub w_gate: Matrix<T>,
    /// D × hidden
    pub w_up: Matrix<T>,
    /// hidden × D
    pub w_down: Matrix<T>,
}

impl<T: Scalar> LayerWeights<T> {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.model_dim;
        let checks = [
            ("w_q", &self.w_q, (d, cfg.q_dim())),
            ("w_k", &self.w_k, (d, cfg.kv_dim())),
            ("w_v", &self.w_v, (d, cfg.kv_dim())),
            ("w_o", &self.w_o, (cfg.q_dim(), d)),
            ("w_gate", &self.w_gate, (d, cfg.mlp_hidden)),
            ("w_up", &self.w_up, (d, cfg.mlp_hidden)),
            ("w_down", &self.w_down, (cfg.mlp_hidden, d)),
        ];
        for (name, m, expected) in checks {
            if m.shape() != expected {
                return Err(Error::TensorShape {
                    name: name.into(),
                    expected,
                    found: m.shape(),
                });
            }
        }
        for (name, v) in [("attn_norm", &self.attn_norm), ("mlp_norm", &self.mlp_norm)] {
            if v.len() != d {
                return Err(Error::TensorShape {
                    name: name.into(),
                    expected: (1, d),
                    found: (1, v.len()),
                });
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> LayerWeights<U> {
        LayerWeights {
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            w_o: self.w_o.cast(),
            attn_norm: cast_vec(&self.attn_norm),
            mlp_norm: cast_vec(&self.mlp_norm),
            w_gate: self.w_gate.cast(),
            w_up: self.w_up.cast(),
            w_down: self.w_down.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T: Scalar> {
    pub config: ModelConfig,
    /// vocab × D
    pub embedding: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    /// D × vocab
    pub lm_head: Matrix<T>,
}

impl<T: Scalar> ModelWeights<T> {
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.layers.len() != cfg.num_layers {
            return Err(Error::InvalidConfig(format!(
                "{} layers present, config says {}",
                self.layers.len(),
                cfg.num_layers
            )));
        }
        if self.embedding.shape() != (cfg.vocab_size, cfg.model_dim) {
            return Err(Error::TensorShape {
                name: "embedding".into(),
                expected: (cfg.vocab_size, cfg.model_dim),
                found: self.embedding.shape(),
            });
        }
        if self.lm_head.shape() != (cfg.model_dim, cfg.vocab_size) {
            return Err(Error::TensorShape {
                name: "lm_head".into(),
                expected: (cfg.model_dim, cfg.vocab_size),
                found: self.lm_head.shape(),
            });
        }
        if self.final_norm.len() != cfg.model_dim {
            return Err(Error::TensorShape {
                name: "final_norm".into(),
                expected: (1, cfg.model_dim),
                found: (1, self.final_norm.len()),
            });
        }
        self.layers.iter().try_for_each(|l| l.validate(cfg))
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            layers: self.layers.iter().map(LayerWeights::cast).collect(),
            final_norm: cast_vec(&self.final_norm),
            lm_head: self.lm_head.cast(),
        }
    }

    /// Equivalent MHA model obtained by materializing each kv head once per
    /// query head in its group.
    pub fn duplicate_kv_heads(&self) -> ModelWeights<T> {
        let cfg = &self.config;
        let d = cfg.head_dim;
        let expand = |m: &Matrix<T>| {
            let blocks: Vec<Matrix<T>> = (0..cfg.num_heads)
                .map(|j| {
                    let g = cfg.kv_head_of(j);
                    m.col_block(g * d, (g + 1) * d)
                })
                .collect();
            Matrix::hstack(&blocks).expect("blocks share row count")
        };
        let layers = self
            .layers
            .iter()
            .map(|l| LayerWeights {
                w_k: expand(&l.w_k),
                w_v: expand(&l.w_v),
                ..l.clone()
            })
            .collect();
        ModelWeights {
            config: ModelConfig {
                num_kv_heads: cfg.num_heads,
                ..cfg.clone()
            },
            layers,
            ..self.clone()
        }
    }

    /// Multiplies every projection matrix (attention and MLP) by `s`.
    pub fn scale_projections(&self, s: T) -> ModelWeights<T> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerWeights {
                w_q: l.w_q.scale(s),
                w_k: l.w_k.scale(s),
                w_v: l.w_v.scale(s),
                w_o: l.w_o.scale(s),
                w_gate: l.w_gate.scale(s),
                w_up: l.w_up.scale(s),
                w_down: l.w_down.scale(s),
                ..l.clone()
            })
            .collect();
        ModelWeights {
            layers,
            ..self.clone()
        }
    }
}

pub(crate) fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    v.iter().map(|&x| U::lit(x.as_f64())).collect()
}

/// Checks a token sequence against vocabulary and context limits.
pub fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn llama_presets_carry_published_dimensions() {
        let c = preset("llama3-8b").unwrap();
        assert_eq!(
            (c.num_layers, c.num_heads, c.num_kv_heads, c.head_dim, c.model_dim),
            (32, 32, 8, 128, 4096)
        );
        let c = preset("llama2-13b").unwrap();
        assert_eq!(
            (c.num_layers, c.num_heads, c.num_kv_heads, c.head_dim, c.model_dim),
            (40, 40, 40, 128, 5120)
        );
        let c = preset("llama3-70b").unwrap();
        assert_eq!(
            (c.num_layers, c.num_heads, c.num_kv_heads, c.head_dim, c.model_dim),
            (80, 64, 8, 128, 8192)
        );
    }

    #[test]
    fn toy_small_preset() {
        let c = preset("toy-small").unwrap();
        assert_eq!(
            (c.num_layers, c.num_heads, c.num_kv_heads, c.head_dim, c.model_dim, c.vocab_size),
            (8, 4, 2, 16, 64, 256)
        );
    }

    #[test]
    fn every_preset_validates() {
        for name in PRESET_NAMES {
            preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(preset("gpt-5"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn thresholds() {
        assert_eq!(preset_threshold("llama3-8b"), Some(30.0));
        assert_eq!(preset_threshold("llama2-13b"), Some(90.0));
        assert_eq!(preset_threshold("llama3-70b"), Some(90.0));
        assert_eq!(preset_threshold("toy-small"), None);
    }

    #[test]
    fn config_invariants_enforced() {
        let mut c = preset("toy-small").unwrap();
        c.model_dim = 65;
        assert!(c.validate().is_err());
        let mut c = preset("toy-small").unwrap();
        c.num_kv_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn group_map() {
        let c = preset("llama3-8b").unwrap();
        assert_eq!(c.kv_head_of(0), 0);
        assert_eq!(c.kv_head_of(3), 0);
        assert_eq!(c.kv_head_of(4), 1);
        assert_eq!(c.kv_head_of(31), 7);
    }
}
