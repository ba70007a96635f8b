use serde::{Deserialize, Serialize};

use super::{LayerWeights, ModelConfig, ModelWeights};
use crate::densemat::{with_spectrum, Matrix};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};

/// RMS of a logit under a unit-RMS final hidden state.
const LOGIT_RMS: f64 = 2.0;

/// Singular spectrum prescription for synthetic layer weights: matrix `i`-th
/// singular value is `sigma_max · decay^i`, with an optional per-layer decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSpec {
    pub sigma_max: f64,
    pub decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_decays: Option<Vec<f64>>,
    /// Leading singular values held at `sigma_max` before the decay starts.
    #[serde(default)]
    pub plateau: usize,
}

impl Default for SpectrumSpec {
    fn default() -> Self {
        SpectrumSpec {
            sigma_max: 1.0,
            decay: 1.0,
            layer_decays: None,
            plateau: 0,
        }
    }
}

impl SpectrumSpec {
    pub fn uniform(sigma_max: f64, decay: f64) -> Self {
        SpectrumSpec {
            sigma_max,
            decay,
            layer_decays: None,
            plateau: 0,
        }
    }

    /// Decay interpolated geometrically from `shallow` (layer 0) to `deep`
    /// (last layer). With `shallow < deep` the shallow layers are the more
    /// ill-conditioned ones.
    pub fn graded(sigma_max: f64, shallow: f64, deep: f64, num_layers: usize) -> Self {
        let decays = (0..num_layers)
            .map(|l| {
                let t = if num_layers > 1 {
                    l as f64 / (num_layers - 1) as f64
                } else {
                    0.0
                };
                shallow * (deep / shallow).powf(t)
            })
            .collect();
        SpectrumSpec {
            sigma_max,
            decay: shallow,
            layer_decays: Some(decays),
            plateau: 0,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let ok = |g: f64| g > 0.0 && g <= 1.0;
        if !(self.sigma_max.is_finite() && self.sigma_max > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma_max must be positive, got {}",
                self.sigma_max
            )));
        }
        if !ok(self.decay) {
            return Err(Error::InvalidArgument(format!(
                "decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        if let Some(ds) = &self.layer_decays {
            if ds.len() != num_layers {
                return Err(Error::InvalidArgument(format!(
                    "{} layer decays for {} layers",
                    ds.len(),
                    num_layers
                )));
            }
            if let Some(g) = ds.iter().find(|&&g| !ok(g)) {
                return Err(Error::InvalidArgument(format!(
                    "layer decay must lie in (0, 1], got {g}"
                )));
            }
        }
        Ok(())
    }

    pub fn decay_for(&self, layer: usize) -> f64 {
        self.layer_decays
            .as_ref()
            .map_or(self.decay, |ds| ds[layer])
    }

    /// Prescribed singular values for a `rows × cols` weight in `layer`.
    pub fn with_plateau(mut self, plateau: usize) -> Self {
        self.plateau = plateau;
        self
    }

    /// `σ_i = sigma_max · γ_l^max(0, i − plateau)` for `i` in `0..min(rows, cols)`.
    pub fn sigma_for(&self, layer: usize, rows: usize, cols: usize) -> Vec<f64> {
        let g = self.decay_for(layer);
        (0..rows.min(cols))
            .map(|i| self.sigma_max * g.powi(i.saturating_sub(self.plateau) as i32))
            .collect()
    }
}

/// Builds a model whose layer weights are `Q₁ · diag(σ) · Q₂ᵀ` with Haar
/// orthonormal factors and `σ` from `spectrum`. Embedding and LM head use
/// flat spectra scaled for unit-RMS embeddings and logits of RMS 2.
/// Norm gains are all one. Each tensor draws from its own substream of `seed`.
pub fn generate_synthetic(
    config: &ModelConfig,
    spectrum: &SpectrumSpec,
    seed: u64,
) -> Result<ModelWeights<f64>> {
    config.validate()?;
    spectrum.validate(config.num_layers)?;
    let d = config.model_dim;

    let gen = |stream: u64, rows: usize, cols: usize, sigma: &[f64]| {
        let mut rng = Rng::new(derive_seed(seed, stream));
        with_spectrum(rows, cols, sigma, &mut rng)
    };
    let layer_matrix = |layer: usize, slot: u64, rows: usize, cols: usize| {
        gen(
            (layer as u64 + 1) * 16 + slot,
            rows,
            cols,
            &spectrum.sigma_for(layer, rows, cols),
        )
    };

    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        layers.push(LayerWeights {
            w_q: layer_matrix(l, 0, d, config.q_dim())?,
            w_k: layer_matrix(l, 1, d, config.kv_dim())?,
            w_v: layer_matrix(l, 2, d, config.kv_dim())?,
            w_o: layer_matrix(l, 3, config.q_dim(), d)?,
            attn_norm: vec![1.0; d],
            mlp_norm: vec![1.0; d],
            w_gate: layer_matrix(l, 4, d, config.mlp_hidden)?,
            w_up: layer_matrix(l, 5, d, config.mlp_hidden)?,
            w_down: layer_matrix(l, 6, config.mlp_hidden, d)?,
        });
    }

    let v = config.vocab_size;
    let r = v.min(d);
    let embed_gain = (v as f64).sqrt() * (d as f64 / r as f64).sqrt();
    let embedding: Matrix<f64> = gen(1, v, d, &vec![embed_gain; r])?;
    let head_gain = LOGIT_RMS * (v as f64 / d as f64).sqrt();
    let lm_head = gen(2, d, v, &vec![head_gain; r])?;

    let w = ModelWeights {
        config: config.clone(),
        embedding,
        layers,
        final_norm: vec![1.0; d],
        lm_head,
    };
    w.validate()?;
    Ok(w)
}
