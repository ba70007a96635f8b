//! Small vector kernels shared by the reference forward pass and the cached runtime.

use crate::densemat::dot;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const NORM_EPS: f64 = 1e-6;

/// `x / sqrt(mean(x²) + eps) ⊙ gain`.
pub fn rms_norm<T: Scalar>(x: &[T], gain: &[T]) -> Vec<T> {
    let n = T::lit(x.len() as f64);
    let ms = dot(x, x) / n;
    let inv = T::one() / (ms + T::lit(NORM_EPS)).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// Numerically stable softmax in place.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Rotates consecutive pairs `(v[2i], v[2i+1])` by angle `pos · base^(-2i/d)`.
pub fn rope_in_place<T: Scalar>(v: &mut [T], pos: usize, base: f64) -> Result<()> {
    let d = v.len();
    if !d.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "rotary embedding needs an even dimension, got {d}"
        )));
    }
    for i in 0..d / 2 {
        let freq = base.powf(-(2.0 * i as f64) / d as f64);
        let angle = pos as f64 * freq;
        let (s, c) = angle.sin_cos();
        let (s, c) = (T::lit(s), T::lit(c));
        let a = v[2 * i];
        let b = v[2 * i + 1];
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Log-softmax in f64.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// `KL(softmax(p) ‖ softmax(q))`, clamped at zero against rounding.
pub fn kl_from_logits(p: &[f64], q: &[f64]) -> f64 {
    let lp = log_softmax(p);
    let lq = log_softmax(q);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(&a, &b)| a.exp() * (a - b))
        .sum();
    kl.max(0.0)
}
