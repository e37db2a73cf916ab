//! Gradient steps: Adam and plain SGD updates, per-record clipping and the
//! noisy sum used by DP-SGD.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::models::{Block, ParamVector};
use crate::{Error, Result, Scalar};

/// DP-SGD settings for one training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpConfig<T> {
    /// Per-record L2 clipping threshold S.
    pub clip_norm: T,
    /// Noise standard deviation as a multiple of `clip_norm`.
    pub noise_multiplier: T,
    /// Poisson inclusion probability q of each record in a batch.
    pub sampling_ratio: T,
    pub delta: T,
}

impl<T: Scalar> DpConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > T::zero()) {
            return Err(Error::InvalidParam("clip_norm must be > 0".into()));
        }
        if !(self.noise_multiplier >= T::zero()) {
            return Err(Error::InvalidParam("noise_multiplier must be >= 0".into()));
        }
        if !(self.sampling_ratio > T::zero() && self.sampling_ratio <= T::one()) {
            return Err(Error::InvalidParam("sampling_ratio must lie in (0, 1]".into()));
        }
        if !(self.delta > T::zero() && self.delta < T::one()) {
            return Err(Error::InvalidParam("delta must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Scale `g` down to L2 norm `clip` if it is longer; otherwise return it as is.
pub fn clip_to_norm<T: Scalar>(g: &ParamVector<T>, clip: T) -> ParamVector<T> {
    let norm = g.l2_norm();
    let mut out = g.clone();
    if norm > clip && norm > T::zero() {
        for v in out.values_mut() {
            *v = *v * clip / norm;
        }
    }
    out
}

/// Sum of the clipped gradients plus `Normal(0, (z*S)^2)` noise per
/// coordinate, divided by the expected batch size.
///
/// With `noise_multiplier == 0` no randomness is drawn.
pub fn dp_aggregate<T: Scalar, R: Rng + ?Sized>(
    grads: &[ParamVector<T>],
    clip: T,
    noise_multiplier: T,
    expected_batch: T,
    rng: &mut R,
) -> Result<ParamVector<T>> {
    let first = grads
        .first()
        .ok_or_else(|| Error::Empty("no gradients to aggregate".into()))?;
    if !(expected_batch > T::zero()) {
        return Err(Error::InvalidParam("expected batch size must be > 0".into()));
    }
    let mut sum = first.zeros_like();
    for g in grads {
        sum.add_assign(&clip_to_norm(g, clip))?;
    }
    let std = noise_multiplier * clip;
    if std > T::zero() {
        for v in sum.values_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v = *v + std * T::of(n);
        }
    }
    for v in sum.values_mut() {
        *v = *v / expected_batch;
    }
    Ok(sum)
}

/// Adam moments and hyperparameters. Steps return a new state rather than
/// mutating this one.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamVector<T>,
    pub v: ParamVector<T>,
    pub t: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(layout: Vec<Block>, lr: T) -> Self {
        Self {
            m: ParamVector::zeros(layout.clone()),
            v: ParamVector::zeros(layout),
            t: 0,
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
        }
    }

    /// Bias-corrected Adam update of `params` along gradient `g`.
    pub fn step(
        &self,
        params: &ParamVector<T>,
        g: &ParamVector<T>,
    ) -> Result<(ParamVector<T>, AdamState<T>)> {
        params.check_layout(g)?;
        params.check_layout(&self.m)?;
        let mut next = self.clone();
        next.t += 1;
        let t = i32::try_from(next.t).unwrap_or(i32::MAX);
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        let mut out = params.clone();
        let gs = g.values();
        let ms = next.m.values_mut();
        for (m, &gi) in ms.iter_mut().zip(gs) {
            *m = self.beta1 * *m + (T::one() - self.beta1) * gi;
        }
        let vs = next.v.values_mut();
        for (v, &gi) in vs.iter_mut().zip(gs) {
            *v = self.beta2 * *v + (T::one() - self.beta2) * gi * gi;
        }
        for ((p, &m), &v) in out
            .values_mut()
            .iter_mut()
            .zip(next.m.values())
            .zip(next.v.values())
        {
            let m_hat = m / c1;
            let v_hat = v / c2;
            *p = *p - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok((out, next))
    }
}

pub fn sgd_step<T: Scalar>(params: &ParamVector<T>, g: &ParamVector<T>, lr: T) -> Result<ParamVector<T>> {
    let mut out = params.clone();
    out.add_scaled(-lr, g)?;
    Ok(out)
}
