//! Truncated-SVD factorization of key/value projections with the residual
//! factors folded into the query and output projections.
//!
//! For `W_k = U Σ Vᵀ` truncated to `d_c`, the cache holds the latent
//! `c = x · U_c` (D → d_c) and the up-factor `Σ_c V_cᵀ` is split into one
//! `d_c × d` block `A^i` per kv head. Query head `j` reads kv head
//! `g(j) = ⌊j·h_kv/h⌋`, so its score against a cached latent is
//! `(x W_q^(j)) · (c A^g)ᵀ = (x · W_q^(j) A^gᵀ) · cᵀ`; the fused query
//! `W_q^(j) A^gᵀ` is only usable when no rotary embedding sits between the
//! two products. Values follow the same scheme with `B^i`, and
//! `M^j = B^g · W_o^(j)` maps head `j`'s attended latent straight back to the
//! residual stream.

use std::path::Path;

use crate::container::{Container, ContainerWriter};
use crate::densemat::{svd, truncate, Matrix};
use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelConfig, ModelWeights};
use crate::scalar::Scalar;
use crate::sensitivity::CompressionPlan;

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer<T: Scalar> {
    pub key_rank: usize,
    pub value_rank: usize,
    /// `P_k = U_c` of the key projection, D × key_rank.
    pub key_down: Matrix<T>,
    /// `A^i`, key_rank × d, one per kv head.
    pub key_up: Vec<Matrix<T>>,
    /// `W_q^(j) A^{g(j)ᵀ}`, D × key_rank, one per query head. Empty when the
    /// model uses rotary embeddings.
    pub fused_query: Vec<Matrix<T>>,
    /// Original query projection, needed by the rotary path.
    pub w_q: Matrix<T>,
    /// `P_v = U_c` of the value projection, D × value_rank.
    pub value_down: Matrix<T>,
    /// `B^i`, value_rank × d, one per kv head.
    pub value_up: Vec<Matrix<T>>,
    /// `M^j = B^{g(j)} W_o^(j)`, value_rank × D, one per query head.
    pub fused_output: Vec<Matrix<T>>,
    pub attn_norm: Vec<T>,
    pub mlp_norm: Vec<T>,
    pub w_gate: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

impl<T: Scalar> CompressedLayer<T> {
    /// Rank-`key_rank` reconstruction of the key projection, `P_k · [A^0 … A^{h_kv-1}]`.
    pub fn key_approx(&self) -> Result<Matrix<T>> {
        self.key_down.matmul(&Matrix::hstack(&self.key_up)?)
    }

    pub fn value_approx(&self) -> Result<Matrix<T>> {
        self.value_down.matmul(&Matrix::hstack(&self.value_up)?)
    }

    pub fn cast<U: Scalar>(&self) -> CompressedLayer<U> {
        let cast_all = |v: &[Matrix<T>]| v.iter().map(Matrix::cast).collect();
        CompressedLayer {
            key_rank: self.key_rank,
            value_rank: self.value_rank,
            key_down: self.key_down.cast(),
            key_up: cast_all(&self.key_up),
            fused_query: cast_all(&self.fused_query),
            w_q: self.w_q.cast(),
            value_down: self.value_down.cast(),
            value_up: cast_all(&self.value_up),
            fused_output: cast_all(&self.fused_output),
            attn_norm: crate::model::cast_vec(&self.attn_norm),
            mlp_norm: crate::model::cast_vec(&self.mlp_norm),
            w_gate: self.w_gate.cast(),
            w_up: self.w_up.cast(),
            w_down: self.w_down.cast(),
        }
    }
}

/// A layer either kept as-is or replaced by its factors.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind<T: Scalar> {
    Full(LayerWeights<T>),
    Compressed(CompressedLayer<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel<T: Scalar> {
    pub config: ModelConfig,
    pub plan: CompressionPlan,
    pub embedding: Matrix<T>,
    pub layers: Vec<LayerKind<T>>,
    pub final_norm: Vec<T>,
    pub lm_head: Matrix<T>,
}

impl<T: Scalar> CompressedModel<T> {
    pub fn retained_ratio(&self) -> f64 {
        self.plan.retained_ratio()
    }

    /// `ρ_l = d_c^l / (h_kv·d)` per layer.
    pub fn layer_ratios(&self) -> Vec<f64> {
        self.plan.layer_ratios()
    }

    pub fn cast<U: Scalar>(&self) -> CompressedModel<U> {
        CompressedModel {
            config: self.config.clone(),
            plan: self.plan.clone(),
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    LayerKind::Full(w) => LayerKind::Full(w.cast()),
                    LayerKind::Compressed(c) => LayerKind::Compressed(c.cast()),
                })
                .collect(),
            final_norm: crate::model::cast_vec(&self.final_norm),
            lm_head: self.lm_head.cast(),
        }
    }
}

/// Factors one layer with the same width for keys and values.
pub fn compress_layer<T: Scalar>(
    lw: &LayerWeights<T>,
    d_c: usize,
    cfg: &ModelConfig,
) -> Result<CompressedLayer<T>> {
    compress_layer_split(lw, d_c, d_c, cfg)
}

/// Factors one layer with separate key and value widths.
pub fn compress_layer_split<T: Scalar>(
    lw: &LayerWeights<T>,
    key_rank: usize,
    value_rank: usize,
    cfg: &ModelConfig,
) -> Result<CompressedLayer<T>> {
    let full = cfg.kv_dim();
    for r in [key_rank, value_rank] {
        if r == 0 || r > full {
            return Err(Error::RankOutOfRange { k: r, max: full });
        }
    }
    lw.validate(cfg)?;
    let d = cfg.head_dim;

    let (key_down, key_sv) = truncate(&svd(&lw.w_k)?, key_rank)?;
    let key_up: Vec<Matrix<T>> = (0..cfg.num_kv_heads)
        .map(|i| key_sv.col_block(i * d, (i + 1) * d))
        .collect();
    let fused_query = if cfg.rope_enabled {
        Vec::new()
    } else {
        (0..cfg.num_heads)
            .map(|j| {
                let wq_j = lw.w_q.col_block(j * d, (j + 1) * d);
                wq_j.matmul(&key_up[cfg.kv_head_of(j)].transpose())
            })
            .collect::<Result<_>>()?
    };

    let (value_down, value_sv) = truncate(&svd(&lw.w_v)?, value_rank)?;
    let value_up: Vec<Matrix<T>> = (0..cfg.num_kv_heads)
        .map(|i| value_sv.col_block(i * d, (i + 1) * d))
        .collect();
    let fused_output = (0..cfg.num_heads)
        .map(|j| {
            let wo_j = lw.w_o.row_block(j * d, (j + 1) * d);
            value_up[cfg.kv_head_of(j)].matmul(&wo_j)
        })
        .collect::<Result<_>>()?;

    Ok(CompressedLayer {
        key_rank,
        value_rank,
        key_down,
        key_up,
        fused_query,
        w_q: lw.w_q.clone(),
        value_down,
        value_up,
        fused_output,
        attn_norm: lw.attn_norm.clone(),
        mlp_norm: lw.mlp_norm.clone(),
        w_gate: lw.w_gate.clone(),
        w_up: lw.w_up.clone(),
        w_down: lw.w_down.clone(),
    })
}

/// Applies a plan: skipped layers are carried through untouched, the rest are
/// factored at their planned width.
pub fn compress_model<T: Scalar>(
    w: &ModelWeights<T>,
    plan: &CompressionPlan,
) -> Result<CompressedModel<T>> {
    w.validate()?;
    plan.validate_for(&w.config)?;
    let layers = w
        .layers
        .iter()
        .zip(&plan.layers)
        .map(|(lw, p)| {
            if p.skip {
                Ok(LayerKind::Full(lw.clone()))
            } else {
                compress_layer(lw, p.d_c, &w.config).map(LayerKind::Compressed)
            }
        })
        .collect::<Result<_>>()?;
    Ok(CompressedModel {
        config: w.config.clone(),
        plan: plan.clone(),
        embedding: w.embedding.clone(),
        layers,
        final_norm: w.final_norm.clone(),
        lm_head: w.lm_head.clone(),
    })
}

/// Wraps an uncompressed model as a compressed model with the identity plan.
pub fn uncompressed<T: Scalar>(w: &ModelWeights<T>) -> CompressedModel<T> {
    CompressedModel {
        config: w.config.clone(),
        plan: CompressionPlan::identity(&w.config),
        embedding: w.embedding.clone(),
        layers: w.layers.iter().cloned().map(LayerKind::Full).collect(),
        final_norm: w.final_norm.clone(),
        lm_head: w.lm_head.clone(),
    }
}

fn name(l: usize, field: &str) -> String {
    format!("layers.{l}.{field}")
}

/// Saves a compressed model; `config.json` carries `"compressed": true` and the plan.
pub fn save_compressed(cm: &CompressedModel<f64>, dir: &Path) -> Result<()> {
    let cfg = &cm.config;
    cm.plan.validate_for(cfg)?;
    let mut out = ContainerWriter::new();
    out.push("embedding", &cm.embedding);
    for (l, layer) in cm.layers.iter().enumerate() {
        match layer {
            LayerKind::Full(lw) => crate::model::push_layer(&mut out, l, lw),
            LayerKind::Compressed(c) => {
                if c.key_rank != c.value_rank || c.key_rank != cm.plan.layers[l].d_c {
                    return Err(Error::InvalidConfig(format!(
                        "layer {l}: ranks ({}, {}) do not match plan width {}",
                        c.key_rank, c.value_rank, cm.plan.layers[l].d_c
                    )));
                }
                out.push(name(l, "w_q"), &c.w_q);
                out.push(name(l, "P_k"), &c.key_down);
                for (i, a) in c.key_up.iter().enumerate() {
                    out.push(name(l, &format!("A.{i}")), a);
                }
                for (j, q) in c.fused_query.iter().enumerate() {
                    out.push(name(l, &format!("Wq_fused.{j}")), q);
                }
                out.push(name(l, "P_v"), &c.value_down);
                for (i, b) in c.value_up.iter().enumerate() {
                    out.push(name(l, &format!("B.{i}")), b);
                }
                for (j, m) in c.fused_output.iter().enumerate() {
                    out.push(name(l, &format!("M.{j}")), m);
                }
                crate::model::push_mlp_and_norms(
                    &mut out,
                    l,
                    &c.attn_norm,
                    &c.mlp_norm,
                    &c.w_gate,
                    &c.w_up,
                    &c.w_down,
                );
            }
        }
    }
    out.push_vector("final_norm", &cm.final_norm);
    out.push("lm_head", &cm.lm_head);
    out.write(dir, cfg, Some(&cm.plan))
}

/// Loads a compressed container, checking every factor against the embedded plan.
pub fn load_compressed(dir: &Path) -> Result<CompressedModel<f64>> {
    let c = Container::open(dir)?;
    if !c.header.compressed {
        return Err(Error::Format(
            "container holds a plain model; load it with load_model".into(),
        ));
    }
    let cfg = c.header.config.clone();
    let plan = c
        .header
        .plan
        .clone()
        .ok_or_else(|| Error::Format("compressed container without plan".into()))?;
    plan.validate_for(&cfg)?;
    let dm = cfg.model_dim;
    let d = cfg.head_dim;

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (l, p) in plan.layers.iter().enumerate() {
        if p.skip {
            layers.push(LayerKind::Full(crate::model::read_layer(&c, &cfg, l)?));
            continue;
        }
        let r = p.d_c;
        let fused_query = if cfg.rope_enabled {
            Vec::new()
        } else {
            (0..cfg.num_heads)
                .map(|j| c.tensor_shaped(&name(l, &format!("Wq_fused.{j}")), dm, r))
                .collect::<Result<_>>()?
        };
        layers.push(LayerKind::Compressed(CompressedLayer {
            key_rank: r,
            value_rank: r,
            key_down: c.tensor_shaped(&name(l, "P_k"), dm, r)?,
            key_up: (0..cfg.num_kv_heads)
                .map(|i| c.tensor_shaped(&name(l, &format!("A.{i}")), r, d))
                .collect::<Result<_>>()?,
            fused_query,
            w_q: c.tensor_shaped(&name(l, "w_q"), dm, cfg.q_dim())?,
            value_down: c.tensor_shaped(&name(l, "P_v"), dm, r)?,
            value_up: (0..cfg.num_kv_heads)
                .map(|i| c.tensor_shaped(&name(l, &format!("B.{i}")), r, d))
                .collect::<Result<_>>()?,
            fused_output: (0..cfg.num_heads)
                .map(|j| c.tensor_shaped(&name(l, &format!("M.{j}")), r, dm))
                .collect::<Result<_>>()?,
            attn_norm: c.vector(&name(l, "attn_norm"), dm)?,
            mlp_norm: c.vector(&name(l, "mlp_norm"), dm)?,
            w_gate: c.tensor_shaped(&name(l, "w_gate"), dm, cfg.mlp_hidden)?,
            w_up: c.tensor_shaped(&name(l, "w_up"), dm, cfg.mlp_hidden)?,
            w_down: c.tensor_shaped(&name(l, "w_down"), cfg.mlp_hidden, dm)?,
        }));
    }
    Ok(CompressedModel {
        embedding: c.tensor_shaped("embedding", cfg.vocab_size, dm)?,
        final_norm: c.vector("final_norm", dm)?,
        lm_head: c.tensor_shaped("lm_head", dm, cfg.vocab_size)?,
        layers,
        plan,
        config: cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densemat::{frobenius_rel_error, norm2};
    use crate::model::{generate_synthetic, preset, save_model, SpectrumSpec};
    use crate::rng::Rng;
    use crate::sensitivity::{layer_sensitivities, plan_progressive, plan_uniform};

    fn cfg(rope: bool) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            rope_enabled: rope,
            ..preset("toy-small").unwrap()
        }
    }

    fn model(rope: bool, seed: u64) -> ModelWeights<f64> {
        generate_synthetic(&cfg(rope), &SpectrumSpec::uniform(1.0, 0.9), seed).unwrap()
    }

    fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
        rng.gaussian_vec(n)
    }

    #[test]
    fn full_rank_factors_reproduce_projections() {
        let c = cfg(false);
        let w = model(false, 1);
        let cl = compress_layer(&w.layers[0], c.kv_dim(), &c).unwrap();
        assert!(frobenius_rel_error(&w.layers[0].w_k, &cl.key_approx().unwrap()).unwrap() < 1e-12);
        assert!(frobenius_rel_error(&w.layers[0].w_v, &cl.value_approx().unwrap()).unwrap() < 1e-12);
        // Value path through M^j equals x W_v^(g) W_o^(j).
        let mut rng = Rng::new(3);
        let x = rand_vec(&mut rng, c.model_dim);
        let d = c.head_dim;
        for j in 0..c.num_heads {
            let g = c.kv_head_of(j);
            let via_m = cl.fused_output[j].vecmul(&cl.value_down.vecmul(&x).unwrap()).unwrap();
            let v = w.layers[0].w_v.col_block(g * d, (g + 1) * d).vecmul(&x).unwrap();
            let direct = w.layers[0].w_o.row_block(j * d, (j + 1) * d).vecmul(&v).unwrap();
            let diff: f64 = via_m.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10, "{diff}");
        }
    }

    #[test]
    fn truncation_at_true_rank_is_exact() {
        let c = cfg(false);
        let mut w = model(false, 2);
        let mut rng = Rng::new(4);
        let sigma: Vec<f64> = (0..32).map(|i| if i < 12 { 2.0 - 0.1 * i as f64 } else { 0.0 }).collect();
        w.layers[0].w_k = crate::densemat::with_spectrum(64, 32, &sigma, &mut rng).unwrap();
        let cl = compress_layer(&w.layers[0], 12, &c).unwrap();
        assert!(w.layers[0].w_k.max_abs_diff(&cl.key_approx().unwrap()).unwrap() < 1e-9);
    }

    #[test]
    fn fusion_is_exact_for_same_factors() {
        let c = cfg(false);
        let w = model(false, 5);
        let cl = compress_layer(&w.layers[1], 13, &c).unwrap();
        let d = c.head_dim;
        let mut rng = Rng::new(6);
        for _ in 0..20 {
            let x = rand_vec(&mut rng, c.model_dim);
            let lat = rand_vec(&mut rng, 13);
            for j in 0..c.num_heads {
                let g = c.kv_head_of(j);
                let fused = crate::densemat::dot(&cl.fused_query[j].vecmul(&x).unwrap(), &lat);
                let q = cl.w_q.col_block(j * d, (j + 1) * d).vecmul(&x).unwrap();
                let k = cl.key_up[g].vecmul(&lat).unwrap();
                let explicit = crate::densemat::dot(&q, &k);
                assert!((fused - explicit).abs() < 1e-10 * (1.0 + explicit.abs()));

                let via_m = cl.fused_output[j].vecmul(&lat).unwrap();
                let v = cl.value_up[g].vecmul(&lat).unwrap();
                let via_wo = w.layers[1].w_o.row_block(j * d, (j + 1) * d).vecmul(&v).unwrap();
                for (a, b) in via_m.iter().zip(&via_wo) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn per_token_key_error_respects_singular_value_bound() {
        let c = cfg(true);
        let w = generate_synthetic(&c, &SpectrumSpec::uniform(1.0, 0.93), 8).unwrap();
        let lw = &w.layers[0];
        let d_c = c.kv_dim() / 2;
        let cl = compress_layer(lw, d_c, &c).unwrap();
        let s = svd(&lw.w_k).unwrap();
        let bound = s.sigma[d_c];
        let approx = cl.key_approx().unwrap();
        let mut rng = Rng::new(9);
        for _ in 0..1000 {
            let x = rand_vec(&mut rng, c.model_dim);
            let e: Vec<f64> = lw.w_k.vecmul(&x).unwrap().iter()
                .zip(approx.vecmul(&x).unwrap())
                .map(|(a, b)| a - b)
                .collect();
            assert!(norm2(&e) <= bound * norm2(&x) + 1e-9);
        }
        // Equality along the first discarded left singular direction.
        let u = s.left_vector(d_c);
        let e: Vec<f64> = lw.w_k.vecmul(&u).unwrap().iter()
            .zip(approx.vecmul(&u).unwrap())
            .map(|(a, b)| a - b)
            .collect();
        assert!((norm2(&e) - bound).abs() < 1e-6 * bound);
    }

    #[test]
    fn key_error_nonincreasing_in_rank() {
        let c = cfg(true);
        let w = model(true, 10);
        let mut prev = f64::INFINITY;
        for d_c in 1..=c.kv_dim() {
            let cl = compress_layer(&w.layers[0], d_c, &c).unwrap();
            let e = frobenius_rel_error(&w.layers[0].w_k, &cl.key_approx().unwrap()).unwrap();
            assert!(e <= prev + 1e-12);
            prev = e;
        }
    }

    #[test]
    fn rope_layers_skip_fused_queries() {
        let c = cfg(true);
        let cl = compress_layer(&model(true, 1).layers[0], 8, &c).unwrap();
        assert!(cl.fused_query.is_empty());
    }

    #[test]
    fn rank_out_of_range() {
        let c = cfg(true);
        let w = model(true, 1);
        assert!(matches!(compress_layer(&w.layers[0], 0, &c), Err(Error::RankOutOfRange { .. })));
        assert!(matches!(compress_layer(&w.layers[0], 33, &c), Err(Error::RankOutOfRange { .. })));
    }

    #[test]
    fn retained_ratio_recount() {
        let c = ModelConfig {
            num_layers: 6,
            ..preset("toy-deep").unwrap()
        };
        let spec = SpectrumSpec::graded(1.0, 0.85, 0.97, 6);
        let w = generate_synthetic(&c, &spec, 3).unwrap();
        let s = layer_sensitivities(&w).unwrap();
        let plan = plan_progressive(&s, 32, 32, 6, f64::INFINITY).unwrap();
        let cm = compress_model(&w, &plan).unwrap();
        let dims: usize = cm
            .layers
            .iter()
            .map(|l| match l {
                LayerKind::Full(_) => 32,
                LayerKind::Compressed(c) => c.key_rank,
            })
            .sum();
        assert_eq!(dims as f64 / (6.0 * 32.0), cm.retained_ratio());
        assert_eq!(cm.layer_ratios().len(), 6);
    }

    #[test]
    fn compressed_container_round_trip() {
        for rope in [true, false] {
            let w = model(rope, 12);
            let s = layer_sensitivities(&w).unwrap();
            let plan = plan_uniform(&s, 32, 20, f64::INFINITY).unwrap();
            let mut cm = compress_model(&w, &plan).unwrap();
            // Mix in a skipped layer.
            cm.layers[1] = LayerKind::Full(w.layers[1].clone());
            cm.plan.layers[1].skip = true;
            cm.plan.layers[1].d_c = 32;
            let dir = tempfile::tempdir().unwrap();
            save_compressed(&cm, dir.path()).unwrap();
            assert_eq!(load_compressed(dir.path()).unwrap(), cm);
        }
    }

    #[test]
    fn plan_width_mismatch_is_a_validation_error() {
        let w = model(true, 13);
        let s = layer_sensitivities(&w).unwrap();
        let plan = plan_uniform(&s, 32, 20, f64::INFINITY).unwrap();
        let cm = compress_model(&w, &plan).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_compressed(&cm, dir.path()).unwrap();
        let p = dir.path().join(crate::container::CONFIG_FILE);
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, text.replacen("\"d_c\": 20", "\"d_c\": 19", 1)).unwrap();
        let err = load_compressed(dir.path()).unwrap_err();
        assert!(matches!(err, Error::TensorShape { .. }), "{err:?}");
        assert_eq!(err.class(), crate::error::ErrorClass::Validation);
    }

    #[test]
    fn kinds_are_not_interchangeable() {
        let w = model(true, 14);
        let plain = tempfile::tempdir().unwrap();
        save_model(&w, plain.path()).unwrap();
        assert!(matches!(load_compressed(plain.path()), Err(Error::Format(_))));

        let s = layer_sensitivities(&w).unwrap();
        let cm = compress_model(&w, &plan_uniform(&s, 32, 16, f64::INFINITY).unwrap()).unwrap();
        let comp = tempfile::tempdir().unwrap();
        save_compressed(&cm, comp.path()).unwrap();
        assert!(matches!(crate::model::load_model(comp.path()), Err(Error::Format(_))));
    }
}
