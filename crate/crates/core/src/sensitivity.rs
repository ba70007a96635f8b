//! Layer sensitivity and rank allocation.
//!
//! The cumulative condition number of layer `l` is
//! `κ̃_l = Π_{j ≥ l} κ(W_k^j) · κ(W_v^j)`. The progressive allocator maps
//! `log κ̃` linearly onto `[d_min, d_max]`: the most sensitive layer keeps
//! `d_max`, the least sensitive gets `d_min`. Layers whose `κ̃` exceeds the
//! threshold are left uncompressed.

use serde::{Deserialize, Serialize};

use crate::densemat::{condition_from_sigma, svd, Matrix};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::scalar::Scalar;

/// `log κ̃` spans narrower than this are treated as "all layers equal".
pub const DEGENERATE_LOG_RANGE: f64 = 1e-9;

/// Cumulative-energy comparisons in the variance-fraction allocator tolerate
/// this much rounding below the requested fraction.
pub const VARIANCE_FRACTION_SLACK: f64 = 1e-12;

/// Serde helpers writing non-finite reals as the strings `"inf"` / `"-inf"`,
/// since JSON has no infinity literal.
pub mod serde_real {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else if *x < 0.0 {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    struct RealVisitor;

    impl Visitor<'_> for RealVisitor {
        type Value = f64;
        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a number or \"inf\"")
        }
        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }
        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }
        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }
        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            match v {
                "inf" | "infinity" | "Infinity" => Ok(f64::INFINITY),
                "-inf" | "-infinity" | "-Infinity" => Ok(f64::NEG_INFINITY),
                "nan" | "NaN" => Ok(f64::NAN),
                _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(RealVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub layer: usize,
    #[serde(with = "serde_real")]
    pub kappa_k: f64,
    #[serde(with = "serde_real")]
    pub kappa_v: f64,
    /// `κ̃_l`; may overflow to infinity for very deep stacks even when
    /// `log_kappa_tilde` is finite.
    #[serde(with = "serde_real")]
    pub kappa_tilde: f64,
    /// `Σ_{j ≥ l} ln κ(W_k^j) + ln κ(W_v^j)`; infinite iff some factor is.
    #[serde(with = "serde_real")]
    pub log_kappa_tilde: f64,
}

/// Builds the cumulative sensitivities from per-layer `(κ_k, κ_v)` pairs,
/// accumulating back to front.
pub fn sensitivities_from_conditions(conds: &[(f64, f64)]) -> Vec<LayerSensitivity> {
    let mut out = vec![];
    let mut prod = 1.0;
    let mut log = 0.0;
    for (l, &(kk, kv)) in conds.iter().enumerate().rev() {
        prod *= kk * kv;
        log += kk.ln() + kv.ln();
        out.push(LayerSensitivity {
            layer: l,
            kappa_k: kk,
            kappa_v: kv,
            kappa_tilde: prod,
            log_kappa_tilde: log,
        });
    }
    out.reverse();
    out
}

/// Condition numbers of every layer's key and value projections and their
/// cumulative products. Always computed on the weights as given.
pub fn layer_sensitivities<T: Scalar>(w: &ModelWeights<T>) -> Result<Vec<LayerSensitivity>> {
    let kappa = |m: &Matrix<T>| -> Result<f64> {
        let m64: Matrix<f64> = m.cast();
        Ok(condition_from_sigma(&svd(&m64)?.sigma))
    };
    let conds = w
        .layers
        .iter()
        .map(|l| Ok((kappa(&l.w_k)?, kappa(&l.w_v)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(sensitivities_from_conditions(&conds))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Progressive,
    Uniform,
    VarianceFraction,
    OptimalRatio,
    /// Hand-built plans such as single-layer or shallow-block experiments.
    Custom,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::Progressive => "progressive",
            Strategy::Uniform => "uniform",
            Strategy::VarianceFraction => "variance-fraction",
            Strategy::OptimalRatio => "optimal-ratio",
            Strategy::Custom => "custom",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub l: usize,
    pub skip: bool,
    pub d_c: usize,
    #[serde(with = "serde_real")]
    pub kappa_tilde: f64,
}

/// Per-layer compression decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub strategy: Strategy,
    pub d_max: usize,
    pub d_min: usize,
    #[serde(with = "serde_real")]
    pub threshold: f64,
    /// `h_kv · d`, the uncompressed width a skipped layer keeps.
    pub full_dim: usize,
    pub layers: Vec<LayerPlan>,
}

impl CompressionPlan {
    /// Plan that compresses nothing. `kappa_tilde` is 0 (not computed).
    pub fn identity(cfg: &ModelConfig) -> Self {
        let full = cfg.kv_dim();
        CompressionPlan {
            strategy: Strategy::Custom,
            d_max: full,
            d_min: full,
            threshold: 0.0,
            full_dim: full,
            layers: (0..cfg.num_layers)
                .map(|l| LayerPlan {
                    l,
                    skip: true,
                    d_c: full,
                    kappa_tilde: 0.0,
                })
                .collect(),
        }
    }

    /// Plan compressing the listed layers to the given widths, everything else skipped.
    pub fn custom(cfg: &ModelConfig, compressed: &[(usize, usize)]) -> Result<Self> {
        let mut plan = Self::identity(cfg);
        for &(l, d_c) in compressed {
            if l >= cfg.num_layers {
                return Err(Error::InvalidArgument(format!("layer {l} out of range")));
            }
            check_dim(d_c, cfg.kv_dim())?;
            plan.layers[l].skip = false;
            plan.layers[l].d_c = d_c;
        }
        let active = plan.layers.iter().filter(|p| !p.skip).map(|p| p.d_c);
        plan.d_min = active.clone().min().unwrap_or(plan.full_dim);
        plan.d_max = active.max().unwrap_or(plan.full_dim);
        plan.threshold = f64::INFINITY;
        Ok(plan)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `Σ_l d_c^l / (L · h_kv·d)`, counting skipped layers at full width.
    pub fn retained_ratio(&self) -> f64 {
        let total: usize = self.layers.iter().map(|p| p.d_c).sum();
        total as f64 / (self.layers.len() * self.full_dim) as f64
    }

    /// Per-layer `ρ_l = d_c^l / (h_kv·d)`.
    pub fn layer_ratios(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|p| p.d_c as f64 / self.full_dim as f64)
            .collect()
    }

    pub fn skip_set(&self) -> Vec<usize> {
        self.layers.iter().filter(|p| p.skip).map(|p| p.l).collect()
    }

    pub fn validate_for(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layers.len() != cfg.num_layers || self.full_dim != cfg.kv_dim() {
            return Err(Error::InvalidConfig(format!(
                "plan for {} layers of width {} does not fit model with {} layers of width {}",
                self.layers.len(),
                self.full_dim,
                cfg.num_layers,
                cfg.kv_dim()
            )));
        }
        for (i, p) in self.layers.iter().enumerate() {
            if p.l != i {
                return Err(Error::InvalidConfig(format!("plan entry {i} names layer {}", p.l)));
            }
            if p.skip && p.d_c != self.full_dim {
                return Err(Error::InvalidConfig(format!(
                    "skipped layer {i} must keep full width {}, has {}",
                    self.full_dim, p.d_c
                )));
            }
            check_dim(p.d_c, self.full_dim)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn check_dim(d_c: usize, full: usize) -> Result<()> {
    if d_c == 0 || d_c > full {
        return Err(Error::RankOutOfRange { k: d_c, max: full });
    }
    Ok(())
}

fn is_skipped(s: &LayerSensitivity, threshold: f64) -> bool {
    // Compared in log space so overflowed products still order correctly.
    if s.log_kappa_tilde.is_infinite() {
        return threshold.is_finite();
    }
    s.log_kappa_tilde > threshold.ln()
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    Ok(())
}

/// Progressive allocation with optional rounding of `d_c` to a multiple of `align`.
pub fn plan_progressive_aligned(
    s: &[LayerSensitivity],
    full_dim: usize,
    d_max: usize,
    d_min: usize,
    threshold: f64,
    align: usize,
) -> Result<CompressionPlan> {
    if d_min == 0 || d_min > d_max || d_max > full_dim {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= d_min ({d_min}) <= d_max ({d_max}) <= h_kv*d ({full_dim})"
        )));
    }
    if align == 0 {
        return Err(Error::InvalidArgument("alignment must be positive".into()));
    }
    check_threshold(threshold)?;
    let terms = normalized_terms(s);
    let span = (d_max - d_min) as f64;
    let layers = s
        .iter()
        .zip(&terms)
        .map(|(ls, &t)| {
            let skip = is_skipped(ls, threshold);
            let d_c = if skip {
                full_dim
            } else {
                let raw = d_max as f64 - t * span;
                let rounded = ((raw / align as f64).round() as usize) * align;
                rounded.clamp(d_min, d_max)
            };
            LayerPlan {
                l: ls.layer,
                skip,
                d_c,
                kappa_tilde: ls.kappa_tilde,
            }
        })
        .collect();
    Ok(CompressionPlan {
        strategy: Strategy::Progressive,
        d_max,
        d_min,
        threshold,
        full_dim,
        layers,
    })
}

/// `(max log κ̃ − log κ̃_l) / (max log κ̃ − min log κ̃)` per layer, with min and
/// max over every layer whose `κ̃` is finite. Zero for all layers when the span
/// is degenerate; zero for layers with infinite `κ̃`.
pub fn normalized_terms(s: &[LayerSensitivity]) -> Vec<f64> {
    let finite = s.iter().map(|l| l.log_kappa_tilde).filter(|x| x.is_finite());
    let max = finite.clone().fold(f64::NEG_INFINITY, f64::max);
    let min = finite.fold(f64::INFINITY, f64::min);
    let range = max - min;
    s.iter()
        .map(|l| {
            if !l.log_kappa_tilde.is_finite() || !(range >= DEGENERATE_LOG_RANGE) {
                0.0
            } else {
                (max - l.log_kappa_tilde) / range
            }
        })
        .collect()
}

/// Progressive allocation: skipped iff `κ̃_l > threshold`; otherwise
/// `d_c^l = d_max · [1 − t_l · (1 − d_min/d_max)]` rounded to nearest and
/// clamped to `[d_min, d_max]`.
pub fn plan_progressive(
    s: &[LayerSensitivity],
    full_dim: usize,
    d_max: usize,
    d_min: usize,
    threshold: f64,
) -> Result<CompressionPlan> {
    plan_progressive_aligned(s, full_dim, d_max, d_min, threshold, 1)
}

/// Same skip rule as the progressive plan, constant `d_c` elsewhere.
pub fn plan_uniform(
    s: &[LayerSensitivity],
    full_dim: usize,
    d_c: usize,
    threshold: f64,
) -> Result<CompressionPlan> {
    check_dim(d_c, full_dim)?;
    check_threshold(threshold)?;
    let layers = s
        .iter()
        .map(|ls| {
            let skip = is_skipped(ls, threshold);
            LayerPlan {
                l: ls.layer,
                skip,
                d_c: if skip { full_dim } else { d_c },
                kappa_tilde: ls.kappa_tilde,
            }
        })
        .collect();
    Ok(CompressionPlan {
        strategy: Strategy::Uniform,
        d_max: d_c,
        d_min: d_c,
        threshold,
        full_dim,
        layers,
    })
}

/// Largest `d_min` whose progressive plan keeps at most `target` of the full
/// cache. Since the retained ratio is nondecreasing in `d_min`, the answer
/// brackets the target: `ratio(d_min) ≤ target < ratio(d_min + 1)`.
pub fn solve_dmin(
    s: &[LayerSensitivity],
    full_dim: usize,
    d_max: usize,
    threshold: f64,
    target: f64,
) -> Result<usize> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target ratio must lie in (0, 1], got {target}"
        )));
    }
    let ratio = |d_min: usize| -> Result<f64> {
        Ok(plan_progressive(s, full_dim, d_max, d_min, threshold)?.retained_ratio())
    };
    let floor = ratio(1)?;
    if floor > target {
        return Err(Error::Infeasible { target, floor });
    }
    // Binary search for the last d_min with ratio <= target.
    let (mut lo, mut hi) = (1, d_max);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if ratio(mid)? <= target {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(lo)
}

/// Smallest `k` whose leading singular values hold at least `alpha` of the
/// total energy `Σσ²`.
pub fn variance_rank(sigma: &[f64], alpha: f64) -> usize {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 1;
    }
    let mut cum = 0.0;
    for (i, s) in sigma.iter().enumerate() {
        cum += s * s;
        if cum / total >= alpha - VARIANCE_FRACTION_SLACK {
            return i + 1;
        }
    }
    sigma.len()
}

/// Per layer `d_c = max(k*_key, k*_value)` with `k*` the variance rank at `alpha`.
/// No layer is skipped.
pub fn plan_variance_fraction<T: Scalar>(w: &ModelWeights<T>, alpha: f64) -> Result<CompressionPlan> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "variance fraction must lie in (0, 1), got {alpha}"
        )));
    }
    let full = w.config.kv_dim();
    let mut conds = Vec::with_capacity(w.layers.len());
    let mut dims = Vec::with_capacity(w.layers.len());
    for l in &w.layers {
        let sk = svd(&l.w_k.cast::<f64>())?.sigma;
        let sv = svd(&l.w_v.cast::<f64>())?.sigma;
        dims.push(variance_rank(&sk, alpha).max(variance_rank(&sv, alpha)));
        conds.push((condition_from_sigma(&sk), condition_from_sigma(&sv)));
    }
    let sens = sensitivities_from_conditions(&conds);
    let layers: Vec<LayerPlan> = sens
        .iter()
        .zip(&dims)
        .map(|(ls, &d_c)| LayerPlan {
            l: ls.layer,
            skip: false,
            d_c,
            kappa_tilde: ls.kappa_tilde,
        })
        .collect();
    Ok(CompressionPlan {
        strategy: Strategy::VarianceFraction,
        d_max: full,
        d_min: dims.iter().copied().min().unwrap_or(full),
        threshold: f64::INFINITY,
        full_dim: full,
        layers,
    })
}

/// Unrounded layer ratios `r_i = R^(log κ̃_i / Σ_j log κ̃_j)`; their product is `R`.
pub fn optimal_ratios(s: &[LayerSensitivity], target: f64) -> Result<Vec<f64>> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "overall ratio must lie in (0, 1), got {target}"
        )));
    }
    if let Some(bad) = s
        .iter()
        .find(|l| !(l.log_kappa_tilde.is_finite() && l.log_kappa_tilde > 0.0))
    {
        return Err(Error::InapplicableAllocator(format!(
            "layer {} has cumulative condition number {} (needs finite and > 1)",
            bad.layer, bad.kappa_tilde
        )));
    }
    let total: f64 = s.iter().map(|l| l.log_kappa_tilde).sum();
    Ok(s
        .iter()
        .map(|l| target.powf(l.log_kappa_tilde / total))
        .collect())
}

/// Closed-form layer ratios minimizing `Σ κ̃_i (1 − r_i)` subject to `Π r_i = R`,
/// turned into widths by `round(r_i · h_kv·d)` clamped to `[1, h_kv·d]`.
pub fn plan_optimal_ratio(s: &[LayerSensitivity], full_dim: usize, target: f64) -> Result<CompressionPlan> {
    let ratios = optimal_ratios(s, target)?;
    let layers: Vec<LayerPlan> = s
        .iter()
        .zip(&ratios)
        .map(|(ls, &r)| LayerPlan {
            l: ls.layer,
            skip: false,
            d_c: ((r * full_dim as f64).round() as usize).clamp(1, full_dim),
            kappa_tilde: ls.kappa_tilde,
        })
        .collect();
    Ok(CompressionPlan {
        strategy: Strategy::OptimalRatio,
        d_max: layers.iter().map(|p| p.d_c).max().unwrap_or(full_dim),
        d_min: layers.iter().map(|p| p.d_c).min().unwrap_or(full_dim),
        threshold: f64::INFINITY,
        full_dim,
        layers,
    })
}
