//! Cached autoregressive decoding for plain and compressed models, and cache
//! memory accounting.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::compressor::{CompressedLayer, CompressedModel, LayerKind};
use crate::densemat::{dot, Matrix};
use crate::error::{Error, Result};
use crate::model::{check_tokens, swiglu, LayerWeights, ModelConfig, ModelWeights};
use crate::ops::{argmax, kl_from_logits, rms_norm, rope_in_place, softmax_in_place};
use crate::rng::{derive_seed, Rng};
use crate::scalar::Scalar;
use crate::sensitivity::CompressionPlan;

/// Rotary embedding of one head vector at position `pos`.
pub fn rope_rotate<T: Scalar>(v: &[T], pos: usize, base: f64) -> Result<Vec<T>> {
    let mut out = v.to_vec();
    rope_in_place(&mut out, pos, base)?;
    Ok(out)
}

/// Bytes held by a KV cache of `b` sequences of length `n`.
///
/// Each layer stores `width` elements per token for keys and the same for
/// values, where `width` is `h_kv·d` for full layers and `d_c` for compressed
/// ones. With `count_kv_jointly` the pair is counted once.
pub fn cache_bytes(
    cfg: &ModelConfig,
    plan: Option<&CompressionPlan>,
    b: u64,
    n: u64,
    bytes_per_elem: u64,
    count_kv_jointly: bool,
) -> u64 {
    let factor = if count_kv_jointly { 1 } else { 2 };
    let full = cfg.kv_dim() as u64;
    (0..cfg.num_layers)
        .map(|l| {
            let width = match plan {
                Some(p) if !p.layers[l].skip => p.layers[l].d_c as u64,
                _ => full,
            };
            b * n * width * bytes_per_elem * factor
        })
        .sum()
}

/// Borrowed view of one decoder layer.
pub enum LayerView<'a, T: Scalar> {
    Full(&'a LayerWeights<T>),
    Compressed(&'a CompressedLayer<T>),
}

/// Anything the decode loop can run.
pub trait DecodeModel<T: Scalar> {
    fn config(&self) -> &ModelConfig;
    fn plan(&self) -> Option<&CompressionPlan>;
    fn embedding(&self) -> &Matrix<T>;
    fn layer(&self, l: usize) -> LayerView<'_, T>;
    fn final_norm(&self) -> &[T];
    fn lm_head(&self) -> &Matrix<T>;
}

impl<T: Scalar> DecodeModel<T> for ModelWeights<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn plan(&self) -> Option<&CompressionPlan> {
        None
    }
    fn embedding(&self) -> &Matrix<T> {
        &self.embedding
    }
    fn layer(&self, l: usize) -> LayerView<'_, T> {
        LayerView::Full(&self.layers[l])
    }
    fn final_norm(&self) -> &[T] {
        &self.final_norm
    }
    fn lm_head(&self) -> &Matrix<T> {
        &self.lm_head
    }
}

impl<T: Scalar> DecodeModel<T> for CompressedModel<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn plan(&self) -> Option<&CompressionPlan> {
        Some(&self.plan)
    }
    fn embedding(&self) -> &Matrix<T> {
        &self.embedding
    }
    fn layer(&self, l: usize) -> LayerView<'_, T> {
        match &self.layers[l] {
            LayerKind::Full(w) => LayerView::Full(w),
            LayerKind::Compressed(c) => LayerView::Compressed(c),
        }
    }
    fn final_norm(&self) -> &[T] {
        &self.final_norm
    }
    fn lm_head(&self) -> &Matrix<T> {
        &self.lm_head
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheKind {
    Full,
    Compressed,
}

/// Per-layer key and value rows, `width` elements each.
#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    pub width: usize,
    keys: Vec<T>,
    values: Vec<T>,
}

impl<T: Scalar> LayerCache<T> {
    fn new(width: usize) -> Self {
        LayerCache {
            width,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, p: usize) -> &[T] {
        &self.keys[p * self.width..(p + 1) * self.width]
    }

    pub fn value(&self, p: usize) -> &[T] {
        &self.values[p * self.width..(p + 1) * self.width]
    }

    fn push(&mut self, k: &[T], v: &[T]) {
        debug_assert_eq!(k.len(), self.width);
        debug_assert_eq!(v.len(), self.width);
        self.keys.extend_from_slice(k);
        self.values.extend_from_slice(v);
    }
}

#[derive(Debug, Clone)]
pub struct KvCache<T> {
    pub kind: CacheKind,
    pub layers: Vec<LayerCache<T>>,
}

impl<T: Scalar> KvCache<T> {
    pub fn for_model<M: DecodeModel<T>>(model: &M) -> Self {
        let cfg = model.config();
        let mut kind = CacheKind::Full;
        let layers = (0..cfg.num_layers)
            .map(|l| match model.layer(l) {
                LayerView::Full(_) => LayerCache::new(cfg.kv_dim()),
                LayerView::Compressed(c) => {
                    kind = CacheKind::Compressed;
                    LayerCache::new(c.key_rank)
                }
            })
            .collect();
        KvCache { kind, layers }
    }

    /// Tokens processed so far.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn element_bytes(&self) -> usize {
        T::BYTES
    }

    pub fn bytes(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| ((l.keys.len() + l.values.len()) * T::BYTES) as u64)
            .sum()
    }
}

/// How a compressed layer forms attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyPath {
    /// `(x·W̃_q^j)·cᵀ` on the cached latents. Needs a model without rotary embeddings.
    Fused,
    /// Up-project each cached latent with `A^g`, rotate it to its position, then score.
    Reconstruct,
}

/// One decode session owning its cache.
pub struct Session<'m, T: Scalar, M: DecodeModel<T>> {
    model: &'m M,
    cache: KvCache<T>,
    key_path: KeyPath,
}

impl<'m, T: Scalar, M: DecodeModel<T>> Session<'m, T, M> {
    /// Uses the fused path whenever the model allows it.
    pub fn new(model: &'m M) -> Self {
        let key_path = if model.config().rope_enabled {
            KeyPath::Reconstruct
        } else {
            KeyPath::Fused
        };
        Session {
            model,
            cache: KvCache::for_model(model),
            key_path,
        }
    }

    pub fn with_key_path(model: &'m M, key_path: KeyPath) -> Result<Self> {
        if key_path == KeyPath::Fused && model.config().rope_enabled {
            return Err(Error::InvalidArgument(
                "fused query path is unavailable with rotary embeddings".into(),
            ));
        }
        let mut s = Self::new(model);
        s.key_path = key_path;
        Ok(s)
    }

    pub fn cache(&self) -> &KvCache<T> {
        &self.cache
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<T>> {
        let x = self.step_hidden(token)?;
        let h = rms_norm(&x, self.model.final_norm());
        self.model.lm_head().vecmul(&h)
    }

    /// Feeds one token and returns the residual stream after the last layer.
    pub fn step_hidden(&mut self, token: usize) -> Result<Vec<T>> {
        let cfg = self.model.config();
        let pos = self.cache.len();
        if pos >= cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: pos + 1,
                max: cfg.max_seq_len,
            });
        }
        check_tokens(cfg, &[token])?;
        let mut x = self.model.embedding().row(token).to_vec();
        for l in 0..cfg.num_layers {
            let lc = &mut self.cache.layers[l];
            let (y, mlp) = match self.model.layer(l) {
                LayerView::Full(w) => (
                    full_attention(cfg, w, &x, pos, lc)?,
                    (&w.mlp_norm, &w.w_gate, &w.w_up, &w.w_down),
                ),
                LayerView::Compressed(c) => (
                    compressed_attention(cfg, c, &x, pos, lc, self.key_path)?,
                    (&c.mlp_norm, &c.w_gate, &c.w_up, &c.w_down),
                ),
            };
            add_into(&mut x, &y);
            let h = rms_norm(&x, mlp.0);
            let y = swiglu(mlp.1, mlp.2, mlp.3, &h)?;
            add_into(&mut x, &y);
        }
        Ok(x)
    }
}

fn add_into<T: Scalar>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn scale_for<T: Scalar>(cfg: &ModelConfig) -> T {
    T::one() / T::lit(cfg.head_dim as f64).sqrt()
}

fn full_attention<T: Scalar>(
    cfg: &ModelConfig,
    w: &LayerWeights<T>,
    x: &[T],
    pos: usize,
    lc: &mut LayerCache<T>,
) -> Result<Vec<T>> {
    let d = cfg.head_dim;
    let h = rms_norm(x, &w.attn_norm);
    let mut q = w.w_q.vecmul(&h)?;
    let mut k = w.w_k.vecmul(&h)?;
    if cfg.rope_enabled {
        for head in q.chunks_mut(d).chain(k.chunks_mut(d)) {
            rope_in_place(head, pos, cfg.rope_base)?;
        }
    }
    lc.push(&k, &w.w_v.vecmul(&h)?);
    let scale = scale_for::<T>(cfg);
    let n = lc.len();
    let mut concat = vec![T::zero(); cfg.q_dim()];
    for j in 0..cfg.num_heads {
        let g = cfg.kv_head_of(j);
        let qj = &q[j * d..(j + 1) * d];
        let mut scores: Vec<T> = (0..n)
            .map(|p| dot(qj, &lc.key(p)[g * d..(g + 1) * d]) * scale)
            .collect();
        softmax_in_place(&mut scores);
        let out = &mut concat[j * d..(j + 1) * d];
        for (p, &a) in scores.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(&lc.value(p)[g * d..(g + 1) * d]) {
                *o += a * v;
            }
        }
    }
    w.w_o.vecmul(&concat)
}

fn compressed_attention<T: Scalar>(
    cfg: &ModelConfig,
    c: &CompressedLayer<T>,
    x: &[T],
    pos: usize,
    lc: &mut LayerCache<T>,
    key_path: KeyPath,
) -> Result<Vec<T>> {
    let d = cfg.head_dim;
    let h = rms_norm(x, &c.attn_norm);
    lc.push(&c.key_down.vecmul(&h)?, &c.value_down.vecmul(&h)?);
    let scale = scale_for::<T>(cfg);
    let n = lc.len();

    let scores_per_head: Vec<Vec<T>> = match key_path {
        KeyPath::Fused => {
            if c.fused_query.len() != cfg.num_heads {
                return Err(Error::InvalidArgument(
                    "compressed layer carries no fused query projections".into(),
                ));
            }
            (0..cfg.num_heads)
                .map(|j| {
                    let qf = c.fused_query[j].vecmul(&h)?;
                    Ok((0..n).map(|p| dot(&qf, lc.key(p)) * scale).collect())
                })
                .collect::<Result<_>>()?
        }
        KeyPath::Reconstruct => {
            let mut q = c.w_q.vecmul(&h)?;
            if cfg.rope_enabled {
                for head in q.chunks_mut(d) {
                    rope_in_place(head, pos, cfg.rope_base)?;
                }
            }
            let keys: Vec<Vec<Vec<T>>> = (0..cfg.num_kv_heads)
                .map(|g| {
                    (0..n)
                        .map(|p| {
                            let mut k = c.key_up[g].vecmul(lc.key(p))?;
                            if cfg.rope_enabled {
                                rope_in_place(&mut k, p, cfg.rope_base)?;
                            }
                            Ok(k)
                        })
                        .collect::<Result<_>>()
                })
                .collect::<Result<_>>()?;
            (0..cfg.num_heads)
                .map(|j| {
                    let qj = &q[j * d..(j + 1) * d];
                    let g = cfg.kv_head_of(j);
                    Ok(keys[g].iter().map(|k| dot(qj, k) * scale).collect())
                })
                .collect::<Result<_>>()?
        }
    };

    let mut y = vec![T::zero(); cfg.model_dim];
    for (j, mut scores) in scores_per_head.into_iter().enumerate() {
        softmax_in_place(&mut scores);
        let mut lat = vec![T::zero(); lc.width];
        for (p, &a) in scores.iter().enumerate() {
            for (o, &v) in lat.iter_mut().zip(lc.value(p)) {
                *o += a * v;
            }
        }
        add_into(&mut y, &c.fused_output[j].vecmul(&lat)?);
    }
    Ok(y)
}

/// Logits and tokens of one greedy run.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    /// `logits[i]` predicts `tokens[i]`.
    pub logits: Vec<Vec<f64>>,
    pub tokens: Vec<usize>,
    pub cache_bytes: u64,
}

fn check_lengths(cfg: &ModelConfig, prompt: &[usize], steps: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be positive".into()));
    }
    let len = prompt.len() + steps - 1;
    if len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len,
            max: cfg.max_seq_len,
        });
    }
    check_tokens(cfg, prompt)
}

/// Greedy decoding: reads the prompt, then emits `steps` tokens.
pub fn decode<T: Scalar, M: DecodeModel<T>>(
    model: &M,
    prompt: &[usize],
    steps: usize,
) -> Result<DecodeTrace> {
    run(Session::new(model), prompt, steps, None)
}

/// Greedy decoding with an explicit key path.
pub fn decode_with<T: Scalar, M: DecodeModel<T>>(
    model: &M,
    prompt: &[usize],
    steps: usize,
    key_path: KeyPath,
) -> Result<DecodeTrace> {
    run(Session::with_key_path(model, key_path)?, prompt, steps, None)
}

/// Feeds `prompt` then the given continuation regardless of the model's own choices.
pub fn teacher_forced<T: Scalar, M: DecodeModel<T>>(
    model: &M,
    prompt: &[usize],
    continuation: &[usize],
) -> Result<DecodeTrace> {
    run(Session::new(model), prompt, continuation.len(), Some(continuation))
}

fn run<T: Scalar, M: DecodeModel<T>>(
    mut s: Session<'_, T, M>,
    prompt: &[usize],
    steps: usize,
    forced: Option<&[usize]>,
) -> Result<DecodeTrace> {
    check_lengths(s.model.config(), prompt, steps)?;
    let mut last = Vec::new();
    for &t in prompt {
        last = s.step(t)?;
    }
    let mut logits = Vec::with_capacity(steps);
    let mut tokens = Vec::with_capacity(steps);
    for i in 0..steps {
        let next = argmax(&last);
        logits.push(last.iter().map(|x| x.as_f64()).collect());
        tokens.push(next);
        if i + 1 < steps {
            let feed = forced.map_or(next, |f| f[i]);
            last = s.step(feed)?;
        }
    }
    Ok(DecodeTrace {
        logits,
        tokens,
        cache_bytes: s.cache.bytes(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub kl: f64,
    pub max_abs_logit_diff: f64,
    pub top1_match: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheBytes {
    pub reference: u64,
    pub candidate: u64,
    pub bytes_per_elem: u64,
    pub batch: u64,
    pub seq_len: u64,
    pub count_kv_jointly: bool,
}

/// Candidate model measured against a reference on the reference's own greedy continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub prompt: Vec<usize>,
    pub steps: Vec<StepRecord>,
    pub mean_kl: f64,
    pub max_abs_logit_diff: f64,
    pub top1_agreement: f64,
    pub reference_tokens: Vec<usize>,
    pub candidate_tokens: Vec<usize>,
    pub retained_ratio: f64,
    pub cache_bytes: CacheBytes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_per_sec: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reference_logits: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidate_logits: Vec<Vec<f64>>,
}

impl DecodeReport {
    pub const CSV_HEADER: &'static str = "step,kl,max_abs_logit_diff,top1_match";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.steps {
            s.push_str(&format!(
                "{},{:e},{:e},{}\n",
                r.step, r.kl, r.max_abs_logit_diff, r.top1_match as u8
            ));
        }
        s
    }

    pub fn drop_logits(&mut self) {
        self.reference_logits.clear();
        self.candidate_logits.clear();
    }
}

/// Options for [`compare`].
#[derive(Debug, Clone, Copy, Default)]
pub struct CompareOptions {
    pub keep_logits: bool,
    pub timing: bool,
}

/// Decodes the reference greedily and teacher-forces the candidate on the
/// same tokens, so per-step divergences compare identical contexts.
pub fn compare<T, R, C>(
    reference: &R,
    candidate: &C,
    prompt: &[usize],
    steps: usize,
    opts: CompareOptions,
) -> Result<DecodeReport>
where
    T: Scalar,
    R: DecodeModel<T>,
    C: DecodeModel<T>,
{
    if reference.config() != candidate.config() {
        return Err(Error::InvalidConfig(
            "reference and candidate configurations differ".into(),
        ));
    }
    let reference_trace = decode(reference, prompt, steps)?;
    let start = Instant::now();
    let cand = teacher_forced(candidate, prompt, &reference_trace.tokens)?;
    let elapsed = start.elapsed().as_secs_f64();

    let records: Vec<StepRecord> = reference_trace
        .logits
        .iter()
        .zip(&cand.logits)
        .enumerate()
        .map(|(step, (p, q))| StepRecord {
            step,
            kl: kl_from_logits(p, q),
            max_abs_logit_diff: p
                .iter()
                .zip(q)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
            top1_match: argmax(p) == argmax(q),
        })
        .collect();
    let n = records.len() as f64;
    let cfg = reference.config();
    let seq = (prompt.len() + steps - 1) as u64;
    let elem = T::BYTES as u64;
    let retained = candidate.plan().map_or(1.0, CompressionPlan::retained_ratio);
    Ok(DecodeReport {
        prompt: prompt.to_vec(),
        mean_kl: records.iter().map(|r| r.kl).sum::<f64>() / n,
        max_abs_logit_diff: records.iter().map(|r| r.max_abs_logit_diff).fold(0.0, f64::max),
        top1_agreement: records.iter().filter(|r| r.top1_match).count() as f64 / n,
        steps: records,
        reference_tokens: reference_trace.tokens,
        candidate_tokens: cand.tokens,
        retained_ratio: retained,
        cache_bytes: CacheBytes {
            reference: cache_bytes(cfg, reference.plan(), 1, seq, elem, false),
            candidate: cache_bytes(cfg, candidate.plan(), 1, seq, elem, false),
            bytes_per_elem: elem,
            batch: 1,
            seq_len: seq,
            count_kv_jointly: false,
        },
        tokens_per_sec: opts
            .timing
            .then(|| (prompt.len() + steps - 1) as f64 / elapsed.max(1e-12)),
        reference_logits: if opts.keep_logits { reference_trace.logits } else { Vec::new() },
        candidate_logits: if opts.keep_logits { cand.logits } else { Vec::new() },
    })
}

/// Uniform random token ids in `0..vocab`.
pub fn seeded_prompt(seed: u64, len: usize, vocab: usize) -> Vec<usize> {
    let mut rng = Rng::new(seed);
    (0..len).map(|_| rng.below(vocab as u64) as usize).collect()
}

/// `count` prompts drawn from independent substreams of `seed`.
pub fn seeded_prompts(seed: u64, count: usize, len: usize, vocab: usize) -> Vec<Vec<usize>> {
    (0..count)
        .map(|i| seeded_prompt(derive_seed(seed, i as u64), len, vocab))
        .collect()
}

/// Prompt set and decode length for KL scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub prompts: Vec<Vec<usize>>,
    pub steps: usize,
}

impl EvalSet {
    pub fn seeded(seed: u64, count: usize, prompt_len: usize, steps: usize, vocab: usize) -> Self {
        EvalSet {
            prompts: seeded_prompts(seed, count, prompt_len, vocab),
            steps,
        }
    }

    /// Mean per-step KL of `candidate` against `reference` over all prompts.
    pub fn mean_kl<T, R, C>(&self, reference: &R, candidate: &C) -> Result<f64>
    where
        T: Scalar,
        R: DecodeModel<T>,
        C: DecodeModel<T>,
    {
        let mut total = 0.0;
        for p in &self.prompts {
            total += compare(reference, candidate, p, self.steps, CompareOptions::default())?.mean_kl;
        }
        Ok(total / self.prompts.len() as f64)
    }
}

/// Compresses only layer `l` at width `d_c` and scores the result with `eval`.
pub fn profile_single_layer<F>(
    model: &ModelWeights<f64>,
    l: usize,
    d_c: usize,
    eval: F,
) -> Result<f64>
where
    F: Fn(&CompressedModel<f64>) -> Result<f64>,
{
    let plan = CompressionPlan::custom(&model.config, &[(l, d_c)])?;
    let cm = crate::compressor::compress_model(model, &plan)?;
    eval(&cm)
}

/// Score grid `scores[l][i]` for every layer and every width in `widths`.
pub fn profile_grid(
    model: &ModelWeights<f64>,
    widths: &[usize],
    eval_set: &EvalSet,
) -> Result<Vec<Vec<f64>>> {
    (0..model.config.num_layers)
        .map(|l| {
            widths
                .iter()
                .map(|&d_c| profile_single_layer(model, l, d_c, |cm| eval_set.mean_kl(model, cm)))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::{compress_model, uncompressed};
    use crate::model::{forward_logits, generate_synthetic, preset, SpectrumSpec};
    use crate::sensitivity::{layer_sensitivities, plan_uniform};

    fn toy(rope: bool, layers: usize, seed: u64) -> ModelWeights<f64> {
        let cfg = ModelConfig {
            num_layers: layers,
            rope_enabled: rope,
            ..preset("toy-small").unwrap()
        };
        generate_synthetic(&cfg, &SpectrumSpec::uniform(1.0, 0.9), seed).unwrap()
    }

    #[test]
    fn rope_rotate_examples() {
        let v = [0.3, -1.2, 0.5, 2.0];
        assert_eq!(rope_rotate(&v, 0, 1e4).unwrap(), v.to_vec());
        let r = rope_rotate(&[1.0, 0.0], 1, 1e4).unwrap();
        assert!((r[0] - 1f64.cos()).abs() < 1e-15 && (r[1] - 1f64.sin()).abs() < 1e-15);
        assert!(rope_rotate(&[1.0, 2.0, 3.0], 1, 1e4).is_err());
        let mut rng = Rng::new(1);
        for p in [1, 7, 100, 4000] {
            let v = rng.gaussian_vec(16);
            let n0 = crate::densemat::norm2(&v);
            let n1 = crate::densemat::norm2(&rope_rotate(&v, p, 1e4).unwrap());
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_depend_on_relative_position_only() {
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let q = rng.gaussian_vec(16);
            let k = rng.gaussian_vec(16);
            let m = rng.below(200) as usize;
            let n = rng.below(200) as usize;
            let s = rng.below(500) as usize;
            let a = dot(&rope_rotate(&q, m, 1e4).unwrap(), &rope_rotate(&k, n, 1e4).unwrap());
            let b = dot(
                &rope_rotate(&q, m + s, 1e4).unwrap(),
                &rope_rotate(&k, n + s, 1e4).unwrap(),
            );
            assert!((a - b).abs() < 1e-9, "{a} {b}");
        }
    }

    #[test]
    fn cached_decode_matches_uncached_forward() {
        for rope in [true, false] {
            let w = toy(rope, 3, 4);
            let prompt = seeded_prompt(5, 6, 256);
            let t = decode(&w, &prompt, 10).unwrap();
            let mut all = prompt.clone();
            all.extend_from_slice(&t.tokens[..9]);
            let f = forward_logits(&w, &all).unwrap();
            for (i, l) in t.logits.iter().enumerate() {
                let row = f.row(prompt.len() - 1 + i);
                let d = row.iter().zip(l).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(d < 1e-8, "step {i}: {d}");
            }
        }
    }

    #[test]
    fn gqa_matches_duplicated_mha() {
        let w = toy(true, 3, 6);
        assert!(!w.config.is_mha());
        let mha = w.duplicate_kv_heads();
        let prompt = seeded_prompt(7, 5, 256);
        let a = decode(&w, &prompt, 12).unwrap();
        let b = decode(&mha, &prompt, 12).unwrap();
        assert_eq!(a.tokens, b.tokens);
        for (x, y) in a.logits.iter().zip(&b.logits) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn full_rank_compression_is_lossless() {
        for rope in [true, false] {
            let w = toy(rope, 3, 8);
            let s = layer_sensitivities(&w).unwrap();
            let plan = plan_uniform(&s, 32, 32, f64::INFINITY).unwrap();
            let cm = compress_model(&w, &plan).unwrap();
            let r = compare(&w, &cm, &seeded_prompt(9, 6, 256), 16, CompareOptions::default()).unwrap();
            assert!(r.max_abs_logit_diff < 1e-8, "{}", r.max_abs_logit_diff);
            assert_eq!(r.top1_agreement, 1.0);
            assert_eq!(r.reference_tokens, decode(&cm, &r.prompt, 16).unwrap().tokens);
        }
    }

    #[test]
    fn fused_and_reconstruct_paths_agree() {
        let w = toy(false, 3, 10);
        let s = layer_sensitivities(&w).unwrap();
        let cm = compress_model(&w, &plan_uniform(&s, 32, 12, f64::INFINITY).unwrap()).unwrap();
        let prompt = seeded_prompt(11, 6, 256);
        let a = decode_with(&cm, &prompt, 12, KeyPath::Fused).unwrap();
        let b = decode_with(&cm, &prompt, 12, KeyPath::Reconstruct).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-10);
            }
        }
        let rope = toy(true, 2, 1);
        let cm = uncompressed(&rope);
        assert!(decode_with(&cm, &prompt, 2, KeyPath::Fused).is_err());
    }

    #[test]
    fn identical_models_have_zero_divergence() {
        let w = toy(true, 2, 12);
        let r = compare(&w, &w, &[1, 2, 3], 8, CompareOptions::default()).unwrap();
        assert_eq!(r.mean_kl, 0.0);
        assert_eq!(r.max_abs_logit_diff, 0.0);
        assert_eq!(r.top1_agreement, 1.0);
        assert!(r.to_csv().starts_with("step,kl,max_abs_logit_diff,top1_match\n0,0e0,0e0,1\n"));
    }

    #[test]
    fn cache_accounting_matches_formula() {
        let w = toy(true, 3, 13);
        let s = layer_sensitivities(&w).unwrap();
        let mut plan = plan_uniform(&s, 32, 16, f64::INFINITY).unwrap();
        plan.layers[2].skip = true;
        plan.layers[2].d_c = 32;
        let cm = compress_model(&w, &plan).unwrap();
        let prompt = [4, 5, 6];
        let t = decode(&cm, &prompt, 5).unwrap();
        assert_eq!(t.cache_bytes, cache_bytes(&w.config, Some(&plan), 1, 7, 8, false));
        assert_eq!(t.cache_bytes, 7 * (16 + 16 + 32) * 2 * 8);
        let t32 = decode(&cm.cast::<f32>(), &prompt, 5).unwrap();
        assert_eq!(t32.cache_bytes * 2, t.cache_bytes);
        let full = decode(&w, &prompt, 5).unwrap();
        assert!(t.cache_bytes < full.cache_bytes);
        assert_eq!(full.cache_bytes, cache_bytes(&w.config, None, 1, 7, 8, false));
    }

    #[test]
    fn cache_bytes_examples() {
        let cfg = ModelConfig {
            num_layers: 1,
            num_heads: 1,
            num_kv_heads: 1,
            head_dim: 2,
            model_dim: 2,
            vocab_size: 4,
            mlp_hidden: 2,
            rope_base: 1e4,
            rope_enabled: false,
            max_seq_len: 4,
        };
        let one = ModelConfig { head_dim: 1, model_dim: 1, ..cfg };
        assert_eq!(cache_bytes(&one, None, 1, 1, 1, true), 1);
        assert_eq!(cache_bytes(&one, None, 1, 1, 1, false), 2);
        let l8 = preset("llama3-8b").unwrap();
        assert_eq!(cache_bytes(&l8, None, 64, 2048, 2, true), 8_589_934_592);
        let plan = CompressionPlan::custom(&l8, &(0..32).map(|l| (l, 512)).collect::<Vec<_>>()).unwrap();
        assert_eq!(cache_bytes(&l8, Some(&plan), 64, 2048, 2, true) * 2, 8_589_934_592);
        let l13 = preset("llama2-13b").unwrap();
        assert_eq!(cache_bytes(&l13, None, 64, 2048, 2, true), 53_687_091_200);
    }

    #[test]
    fn f32_decode_tracks_f64() {
        let w = toy(true, 2, 14);
        let a = decode(&w, &[1, 2], 6).unwrap();
        let b = decode(&w.cast::<f32>(), &[1, 2], 6).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn length_and_token_errors() {
        let w = toy(true, 1, 15);
        assert!(matches!(decode(&w, &[], 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(decode(&w, &[300], 3), Err(Error::TokenOutOfRange { .. })));
        assert!(matches!(decode(&w, &[1; 200], 100), Err(Error::SequenceTooLong { .. })));
        let other = toy(false, 1, 15);
        assert!(matches!(
            compare(&w, &other, &[1], 2, CompareOptions::default()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn full_width_single_layer_profile_is_zero() {
        let w = toy(true, 2, 16);
        let set = EvalSet::seeded(1, 2, 4, 6, 256);
        let s = profile_single_layer(&w, 1, 32, |cm| set.mean_kl(&w, cm)).unwrap();
        assert!(s < 1e-9);
        let grid = profile_grid(&w, &[8, 12, 16], &set).unwrap();
        assert_eq!((grid.len(), grid[0].len()), (2, 3));
    }
}
