//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here calls the routine it checks: the Rényi divergence is
//! integrated numerically rather than expanded binomially, gradients come from
//! finite differences of the loss, and AUC from counting every pair.

#![allow(dead_code)]

use clinfed::models::{Batch, ModelKind, ModelSpec};
use clinfed::ParamVec;
use rand::Rng;

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Rényi divergence of order `alpha` between the Poisson-subsampled Gaussian
/// mixture (1−q)·N(0, z²) + q·N(1, z²) and N(0, z²), by trapezoidal
/// integration of E_{x~N(0,z²)}[(1 − q + q·exp((2x − 1)/(2z²)))^α] in log
/// space.
///
/// The integrand's mass sits within a few z of 0..α, so the grid spans
/// [−1 − 40z, α + 1 + 40z] at spacing z/4000.
pub fn sampled_gaussian_rdp_quadrature(q: f64, z: f64, alpha: u32) -> f64 {
    let a = f64::from(alpha);
    let lo = -1.0 - 40.0 * z;
    let hi = a + 1.0 + 40.0 * z;
    let h = z / 4000.0;
    let n = ((hi - lo) / h).ceil() as usize;
    let h = (hi - lo) / n as f64;
    let ln_norm = -(z * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let (ln_1mq, ln_q) = ((-q).ln_1p(), q.ln());
    let log_f = |x: f64| {
        let ratio = log_add_exp(ln_1mq, ln_q + (2.0 * x - 1.0) / (2.0 * z * z));
        a * ratio - x * x / (2.0 * z * z) + ln_norm
    };
    let values: Vec<f64> = (0..=n)
        .map(|i| {
            let w = if i == 0 || i == n { 0.5f64.ln() } else { 0.0 };
            log_f(lo + i as f64 * h) + w
        })
        .collect();
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_integral = h.ln() + m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    log_integral / (a - 1.0)
}

/// Central finite-difference gradient of the mean loss.
pub fn fd_grad(model: &ModelSpec, params: &ParamVec, batch: &Batch, h: f64) -> Vec<f64> {
    let mut p = params.clone();
    (0..params.len())
        .map(|i| {
            let orig = p.values()[i];
            p.values_mut()[i] = orig + h;
            let up: f64 = model.batch_loss(&p, batch).unwrap();
            p.values_mut()[i] = orig - h;
            let down: f64 = model.batch_loss(&p, batch).unwrap();
            p.values_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, 1e-12).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

/// Smallest |hidden pre-activation| over the batch; a finite-difference step
/// across a ReLU kink is not a derivative, so callers redraw when this is
/// close to zero.
pub fn min_abs_preactivation(model: &ModelSpec, params: &ParamVec, batch: &Batch) -> f64 {
    let ModelKind::Mlp { hidden } = model.kind else {
        return f64::INFINITY;
    };
    let w1 = params.block("W1").unwrap();
    let b1 = params.block("b1").unwrap();
    let d = model.input_dim;
    let mut min = f64::INFINITY;
    for i in 0..batch.len() {
        let x = batch.row(i);
        for k in 0..hidden {
            let s: f64 = b1[k] + (0..d).filter(|&j| x[j] == 1).map(|j| w1[k * d + j]).sum::<f64>();
            min = min.min(s.abs());
        }
    }
    min
}

/// Parameters with every coordinate drawn from N(0, scale²)-ish uniform noise.
pub fn random_params<R: Rng>(model: &ModelSpec, rng: &mut R, scale: f64) -> ParamVec {
    let mut p = ParamVec::zeros(model.layout());
    for v in p.values_mut() {
        *v = scale * (2.0 * rng.random::<f64>() - 1.0);
    }
    p
}

pub fn random_batch<R: Rng>(rng: &mut R, rows: usize, width: usize) -> Batch {
    let features = (0..rows * width).map(|_| u8::from(rng.random_bool(0.4))).collect();
    let labels = (0..rows).map(|_| u8::from(rng.random_bool(0.5))).collect();
    Batch::new(features, labels, width).unwrap()
}

/// AUC by comparing every positive with every negative (ties count ½).
pub fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut twice = 0u64;
    let (mut m, mut n) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        m += 1;
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] == 0 {
                twice += match si.partial_cmp(&sj).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    n += labels.iter().filter(|&&y| y == 0).count() as u64;
    twice as f64 / (2 * m * n) as f64
}
