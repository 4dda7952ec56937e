//! Scalar and vector functions shared by the differentiable blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{argmax, softmax_in_place};
use crate::tensor::Tensor;

/// Huber-style loss with unit transition point.
pub fn smooth_l1(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::invalid(format!("smooth_l1 of non-finite value {x}")));
    }
    Ok(smooth_l1_unchecked(x))
}

#[inline]
pub(crate) fn smooth_l1_unchecked(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("softmax temperature must be positive, got {temperature}")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("softmax of non-finite logits"));
    }
    let mut out: Vec<f64> = v.iter().map(|x| x / temperature).collect();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Sinusoidal position table: even columns sine, odd columns cosine.
pub fn positional_encoding(t: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::invalid(format!("positional encoding width must be even and positive, got {d}")));
    }
    let mut pe = Tensor::zeros(t, d);
    for pos in 0..t {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe.set(pos, 2 * i, angle.sin());
            pe.set(pos, 2 * i + 1, angle.cos());
        }
    }
    Ok(pe)
}

const GUMBEL_U_MIN: f64 = 1e-10;

/// Standard Gumbel draws `-ln(-ln u)` with `u` clamped away from 0 and 1.
pub fn gumbel_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(GUMBEL_U_MIN, 1.0 - GUMBEL_U_MIN);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Gumbel-softmax relaxation over `scores`.
///
/// `noise` of `None` disables the perturbation (deterministic selection).
/// In hard mode the result is the one-hot argmax of the relaxed vector.
pub fn gumbel_softmax(scores: &[f64], tau: f64, hard: bool, noise: Option<&[f64]>) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("gumbel temperature must be positive, got {tau}")));
    }
    let perturbed: Vec<f64> = match noise {
        Some(g) => {
            if g.len() != scores.len() {
                return Err(Error::invalid("gumbel noise length does not match scores"));
            }
            scores.iter().zip(g).map(|(s, g)| s + g).collect()
        }
        None => scores.to_vec(),
    };
    let soft = softmax(&perturbed, tau)?;
    if hard {
        let mut one_hot = vec![0.0; soft.len()];
        one_hot[argmax(&soft)] = 1.0;
        Ok(one_hot)
    } else {
        Ok(soft)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
