use super::{check_tokens, LayerWeights, ModelConfig, ModelWeights};
use crate::densemat::{dot, Matrix};
use crate::error::Result;
use crate::ops::{rms_norm, rope_in_place, silu, softmax_in_place};
use crate::scalar::Scalar;

/// Full-sequence causal forward pass without any cache. Row `t` of the result
/// holds the next-token logits after reading `tokens[..=t]`.
pub fn forward_logits<T: Scalar>(w: &ModelWeights<T>, tokens: &[usize]) -> Result<Matrix<T>> {
    let cfg = &w.config;
    check_tokens(cfg, tokens)?;
    if tokens.is_empty() {
        return Err(crate::error::Error::InvalidArgument("empty token sequence".into()));
    }
    let mut xs: Vec<Vec<T>> = tokens.iter().map(|&t| w.embedding.row(t).to_vec()).collect();
    for layer in &w.layers {
        attention_block(cfg, layer, &mut xs)?;
        for x in xs.iter_mut() {
            let h = rms_norm(x, &layer.mlp_norm);
            let y = swiglu(&layer.w_gate, &layer.w_up, &layer.w_down, &h)?;
            for (a, b) in x.iter_mut().zip(y) {
                *a += b;
            }
        }
    }
    let mut out = Vec::with_capacity(tokens.len() * cfg.vocab_size);
    for x in &xs {
        let h = rms_norm(x, &w.final_norm);
        out.extend(w.lm_head.vecmul(&h)?);
    }
    Matrix::new(tokens.len(), cfg.vocab_size, out)
}

fn attention_block<T: Scalar>(
    cfg: &ModelConfig,
    layer: &LayerWeights<T>,
    xs: &mut [Vec<T>],
) -> Result<()> {
    let d = cfg.head_dim;
    let scale = T::one() / T::lit(d as f64).sqrt();
    let n = xs.len();
    let mut qs = Vec::with_capacity(n);
    let mut ks = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    for (pos, x) in xs.iter().enumerate() {
        let h = rms_norm(x, &layer.attn_norm);
        let mut q = layer.w_q.vecmul(&h)?;
        let mut k = layer.w_k.vecmul(&h)?;
        if cfg.rope_enabled {
            for head in q.chunks_mut(d) {
                rope_in_place(head, pos, cfg.rope_base)?;
            }
            for head in k.chunks_mut(d) {
                rope_in_place(head, pos, cfg.rope_base)?;
            }
        }
        qs.push(q);
        ks.push(k);
        vs.push(layer.w_v.vecmul(&h)?);
    }
    for (m, x) in xs.iter_mut().enumerate() {
        let mut concat = vec![T::zero(); cfg.q_dim()];
        for j in 0..cfg.num_heads {
            let g = cfg.kv_head_of(j);
            let q = &qs[m][j * d..(j + 1) * d];
            let mut scores: Vec<T> = (0..=m)
                .map(|p| dot(q, &ks[p][g * d..(g + 1) * d]) * scale)
                .collect();
            softmax_in_place(&mut scores);
            let out = &mut concat[j * d..(j + 1) * d];
            for (p, &a) in scores.iter().enumerate() {
                for (o, &v) in out.iter_mut().zip(&vs[p][g * d..(g + 1) * d]) {
                    *o += a * v;
                }
            }
        }
        let y = layer.w_o.vecmul(&concat)?;
        for (a, b) in x.iter_mut().zip(y) {
            *a += b;
        }
    }
    Ok(())
}

/// `(silu(h·W_gate) ⊙ (h·W_up)) · W_down`.
pub(crate) fn swiglu<T: Scalar>(
    w_gate: &Matrix<T>,
    w_up: &Matrix<T>,
    w_down: &Matrix<T>,
    h: &[T],
) -> Result<Vec<T>> {
    let gate = w_gate.vecmul(h)?;
    let up = w_up.vecmul(h)?;
    let act: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
    w_down.vecmul(&act)
}
