//! Seeded paired comparisons between allocation plans.
//!
//! Every comparison scores plans by mean per-step KL against the uncompressed
//! model on a fixed seeded prompt set, and pairs plans on the same model so a
//! sign test across seeds decides the direction.

use serde::{Deserialize, Serialize};

use crate::compressor::compress_model;
use crate::error::{Error, Result};
use crate::model::{generate_synthetic, ModelConfig, ModelWeights, SpectrumSpec};
use crate::runtime::EvalSet;
use crate::sensitivity::{
    layer_sensitivities, plan_progressive, plan_uniform, solve_dmin, CompressionPlan,
    LayerSensitivity,
};

pub const GRADED_SIGMA_MAX: f64 = 2.0;
pub const GRADED_SHALLOW_DECAY: f64 = 0.5;
pub const GRADED_DEEP_DECAY: f64 = 0.9;
/// Share of the singular values held flat before the decay starts.
pub const GRADED_PLATEAU_FRACTION: f64 = 0.75;

/// Spectra whose decay runs from fast in the first layer to slow in the last,
/// on top of a flat leading block, so shallow layers are the ill-conditioned
/// ones while every layer keeps the same amount of energy in its leading
/// `plateau` directions.
pub fn graded_substrate(cfg: &ModelConfig) -> SpectrumSpec {
    let plateau = (GRADED_PLATEAU_FRACTION * cfg.kv_dim() as f64).round() as usize;
    SpectrumSpec::graded(
        GRADED_SIGMA_MAX,
        GRADED_SHALLOW_DECAY,
        GRADED_DEEP_DECAY,
        cfg.num_layers,
    )
    .with_plateau(plateau)
}

/// Prompt set used to score a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub seed: u64,
    pub prompts: usize,
    pub prompt_len: usize,
    pub steps: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            seed: 1000,
            prompts: 4,
            prompt_len: 8,
            steps: 32,
        }
    }
}

impl EvalProtocol {
    pub fn eval_set(&self, vocab: usize) -> EvalSet {
        EvalSet::seeded(self.seed, self.prompts, self.prompt_len, self.steps, vocab)
    }
}

/// One-sided sign-test p-value `P(X ≥ wins)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test(wins: usize, n: usize) -> f64 {
    if wins == 0 {
        return 1.0;
    }
    // Work in log space so large n stays finite.
    let ln_choose = |k: usize| -> f64 {
        (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
    };
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    (wins..=n).map(|k| (ln_choose(k) + ln_half_n).exp()).sum::<f64>().min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub seed: u64,
    /// KL of the plan expected to do better.
    pub kl_a: f64,
    pub kl_b: f64,
    pub ratio_a: f64,
    pub ratio_b: f64,
}

/// Sign test of "a ≤ b" over seeds; exact ties are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub label_a: String,
    pub label_b: String,
    pub rows: Vec<PairedRow>,
    pub mean_a: f64,
    pub mean_b: f64,
    pub wins: usize,
    pub ties: usize,
    pub n: usize,
    pub p_value: f64,
}

impl PairedSummary {
    pub fn new(label_a: &str, label_b: &str, rows: Vec<PairedRow>) -> Self {
        let m = rows.len().max(1) as f64;
        let wins = rows.iter().filter(|r| r.kl_a < r.kl_b).count();
        let ties = rows.iter().filter(|r| r.kl_a == r.kl_b).count();
        let n = rows.len() - ties;
        PairedSummary {
            label_a: label_a.into(),
            label_b: label_b.into(),
            mean_a: rows.iter().map(|r| r.kl_a).sum::<f64>() / m,
            mean_b: rows.iter().map(|r| r.kl_b).sum::<f64>() / m,
            wins,
            ties,
            n,
            p_value: sign_test(wins, n),
            rows,
        }
    }
}

/// Progressive plan at most `target` of the cache, `d_max` as large as
/// possible: the full width when feasible, otherwise the largest `d_max`
/// for which some `d_min` meets the target.
pub fn progressive_for_ratio(
    s: &[LayerSensitivity],
    full_dim: usize,
    threshold: f64,
    target: f64,
) -> Result<CompressionPlan> {
    let mut last_err = None;
    for d_max in (1..=full_dim).rev() {
        match solve_dmin(s, full_dim, d_max, threshold, target) {
            Ok(d_min) => return plan_progressive(s, full_dim, d_max, d_min, threshold),
            Err(e @ Error::Infeasible { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or(Error::Infeasible { target, floor: 1.0 }))
}

/// Uniform plan at `floor(ratio · full)` and a progressive plan whose budget
/// does not exceed the uniform one.
pub fn matched_plans(
    s: &[LayerSensitivity],
    full_dim: usize,
    ratio: f64,
    threshold: f64,
) -> Result<(CompressionPlan, CompressionPlan)> {
    let d = ((ratio * full_dim as f64).floor() as usize).max(1);
    let uniform = plan_uniform(s, full_dim, d, threshold)?;
    let progressive = progressive_for_ratio(s, full_dim, threshold, uniform.retained_ratio())?;
    Ok((uniform, progressive))
}

/// First `max(1, round(L · fraction))` layers at `round(layer_ratio · h_kv·d)`, rest untouched.
pub fn shallow_plan(cfg: &ModelConfig, fraction: f64, layer_ratio: f64) -> Result<CompressionPlan> {
    if !(fraction > 0.0 && fraction <= 1.0 && layer_ratio > 0.0 && layer_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} and layer ratio {layer_ratio} must lie in (0, 1]"
        )));
    }
    let count = ((cfg.num_layers as f64 * fraction).round() as usize).clamp(1, cfg.num_layers);
    let d = ((layer_ratio * cfg.kv_dim() as f64).round() as usize).max(1);
    let list: Vec<(usize, usize)> = (0..count).map(|l| (l, d)).collect();
    CompressionPlan::custom(cfg, &list)
}

fn score(w: &ModelWeights<f64>, plan: &CompressionPlan, set: &EvalSet) -> Result<f64> {
    set.mean_kl(w, &compress_model(w, plan)?)
}

/// Shallow-only compression against progressive compression of the same budget on one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShallowComparison {
    pub seed: u64,
    pub shallow_layers: usize,
    pub shallow_kl: f64,
    pub shallow_ratio: f64,
    pub layer0_kl: f64,
    pub layer0_ratio: f64,
    pub progressive_kl: f64,
    pub progressive_ratio: f64,
    pub progressive_d_min: usize,
    pub progressive_d_max: usize,
}

pub fn shallow_vs_progressive(
    w: &ModelWeights<f64>,
    seed: u64,
    fraction: f64,
    layer_ratio: f64,
    protocol: &EvalProtocol,
) -> Result<ShallowComparison> {
    let cfg = &w.config;
    let set = protocol.eval_set(cfg.vocab_size);
    let s = layer_sensitivities(w)?;
    let shallow = shallow_plan(cfg, fraction, layer_ratio)?;
    let layer0 = shallow_plan(cfg, 1.0 / cfg.num_layers as f64, layer_ratio)?;
    let prog = progressive_for_ratio(&s, cfg.kv_dim(), f64::INFINITY, shallow.retained_ratio())?;
    Ok(ShallowComparison {
        seed,
        shallow_layers: shallow.layers.iter().filter(|p| !p.skip).count(),
        shallow_kl: score(w, &shallow, &set)?,
        shallow_ratio: shallow.retained_ratio(),
        layer0_kl: score(w, &layer0, &set)?,
        layer0_ratio: layer0.retained_ratio(),
        progressive_kl: score(w, &prog, &set)?,
        progressive_ratio: prog.retained_ratio(),
        progressive_d_min: prog.d_min,
        progressive_d_max: prog.d_max,
    })
}

/// Progressive vs uniform at a matched retained ratio, one model per seed.
pub fn progressive_vs_uniform(
    cfg: &ModelConfig,
    spectrum: &SpectrumSpec,
    seeds: &[u64],
    ratio: f64,
    protocol: &EvalProtocol,
) -> Result<PairedSummary> {
    let set = protocol.eval_set(cfg.vocab_size);
    let rows = seeds
        .iter()
        .map(|&seed| {
            let w = generate_synthetic(cfg, spectrum, seed)?;
            let s = layer_sensitivities(&w)?;
            let (uniform, progressive) = matched_plans(&s, cfg.kv_dim(), ratio, f64::INFINITY)?;
            Ok(PairedRow {
                seed,
                kl_a: score(&w, &progressive, &set)?,
                kl_b: score(&w, &uniform, &set)?,
                ratio_a: progressive.retained_ratio(),
                ratio_b: uniform.retained_ratio(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(PairedSummary::new("progressive", "uniform", rows))
}

/// Shallow-only vs equal-budget progressive across seeds; "a" is progressive.
pub fn shallow_vs_progressive_seeds(
    cfg: &ModelConfig,
    spectrum: &SpectrumSpec,
    seeds: &[u64],
    fraction: f64,
    layer_ratio: f64,
    protocol: &EvalProtocol,
) -> Result<(Vec<ShallowComparison>, PairedSummary)> {
    let details = seeds
        .iter()
        .map(|&seed| {
            let w = generate_synthetic(cfg, spectrum, seed)?;
            shallow_vs_progressive(&w, seed, fraction, layer_ratio, protocol)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = details
        .iter()
        .map(|d| PairedRow {
            seed: d.seed,
            kl_a: d.progressive_kl,
            kl_b: d.shallow_kl,
            ratio_a: d.progressive_ratio,
            ratio_b: d.shallow_ratio,
        })
        .collect();
    Ok((details, PairedSummary::new("progressive", "shallow", rows)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub target: f64,
    pub mean_ratio: f64,
    pub mean_kl: f64,
    pub per_seed_kl: Vec<f64>,
}

/// Mean KL of the progressive plan at each target ratio.
pub fn ratio_sweep(
    cfg: &ModelConfig,
    spectrum: &SpectrumSpec,
    seeds: &[u64],
    targets: &[f64],
    protocol: &EvalProtocol,
) -> Result<Vec<SweepRow>> {
    let set = protocol.eval_set(cfg.vocab_size);
    let models = seeds
        .iter()
        .map(|&seed| {
            let w = generate_synthetic(cfg, spectrum, seed)?;
            let s = layer_sensitivities(&w)?;
            Ok((w, s))
        })
        .collect::<Result<Vec<_>>>()?;
    targets
        .iter()
        .map(|&target| {
            let mut kls = Vec::with_capacity(models.len());
            let mut ratios = 0.0;
            for (w, s) in &models {
                let plan = progressive_for_ratio(s, cfg.kv_dim(), f64::INFINITY, target)?;
                ratios += plan.retained_ratio();
                kls.push(score(w, &plan, &set)?);
            }
            let n = models.len() as f64;
            Ok(SweepRow {
                target,
                mean_ratio: ratios / n,
                mean_kl: kls.iter().sum::<f64>() / n,
                per_seed_kl: kls,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset;

    #[test]
    fn sign_test_values() {
        // Binomial(20, 1/2) tail sums.
        assert!((sign_test(15, 20) - 21700.0 / 1048576.0).abs() < 1e-15);
        assert!((sign_test(14, 20) - 60460.0 / 1048576.0).abs() < 1e-15);
        assert_eq!(sign_test(0, 20), 1.0);
        assert!((sign_test(20, 20) - 0.5f64.powi(20)).abs() < 1e-18);
        assert!((sign_test(1, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn matched_plans_share_budget() {
        let cfg = ModelConfig {
            num_layers: 6,
            ..preset("toy-deep").unwrap()
        };
        let w = generate_synthetic(&cfg, &graded_substrate(&cfg), 1).unwrap();
        let s = layer_sensitivities(&w).unwrap();
        let (u, p) = matched_plans(&s, 32, 0.6, f64::INFINITY).unwrap();
        assert_eq!(u.layers[0].d_c, 19);
        assert!(p.retained_ratio() <= u.retained_ratio());
        // Shallow layers keep at least as much as deep ones.
        assert!(p.layers.windows(2).all(|w| w[0].d_c >= w[1].d_c));
    }

    #[test]
    fn shallow_plan_counts() {
        let cfg = preset("toy-deep").unwrap();
        let p = shallow_plan(&cfg, 0.125, 0.5).unwrap();
        let active: Vec<_> = p.layers.iter().filter(|l| !l.skip).map(|l| (l.l, l.d_c)).collect();
        assert_eq!(active, vec![(0, 16), (1, 16)]);
        assert_eq!(p.retained_ratio(), 1.0 - 32.0 / (16.0 * 32.0));
        assert!(shallow_plan(&cfg, 0.0, 0.5).is_err());
    }

    #[test]
    fn low_targets_fall_back_to_smaller_dmax() {
        let cfg = ModelConfig {
            num_layers: 4,
            ..preset("toy-small").unwrap()
        };
        let w = generate_synthetic(&cfg, &graded_substrate(&cfg), 2).unwrap();
        let s = layer_sensitivities(&w).unwrap();
        let p = progressive_for_ratio(&s, 32, f64::INFINITY, 0.2).unwrap();
        assert!(p.retained_ratio() <= 0.2);
        assert!(p.d_max < 32);
    }
}
