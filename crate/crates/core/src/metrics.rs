//! AUC-ROC with DeLong variance estimates, for a single model and for the
//! difference between two models scored on the same records.

use std::cmp::Ordering;

use crate::{Error, Result, Scalar};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.95996;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet<T> {
    scores: Vec<T>,
    labels: Vec<u8>,
}

impl<T: Scalar> ScoredSet<T> {
    pub fn new(scores: Vec<T>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::InvalidParam("labels must be 0 or 1".into()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidParam("scores must not be NaN".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    fn split(&self) -> (Vec<T>, Vec<T>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (&s, &y) in self.scores.iter().zip(&self.labels) {
            if y == 1 {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        (pos, neg)
    }
}

/// Per-record DeLong placement values, twice-scaled as integer counts so the
/// AUC itself can be formed with a single rounding.
#[derive(Debug, Clone)]
struct Placements<T> {
    /// Per positive: fraction of negatives scored below it (ties count half).
    v10: Vec<T>,
    /// Per negative: fraction of positives scored above it (ties count half).
    v01: Vec<T>,
    auc: T,
}

fn cmp<T: Scalar>(a: &T, b: &T) -> Ordering {
    a.partial_cmp(b).expect("scores are not NaN")
}

/// (#strictly below, #equal) of `x` in sorted `v`.
fn rank_counts<T: Scalar>(sorted: &[T], x: T) -> (usize, usize) {
    let lo = sorted.partition_point(|v| *v < x);
    let hi = sorted.partition_point(|v| *v <= x);
    (lo, hi - lo)
}

fn placements<T: Scalar>(set: &ScoredSet<T>) -> Result<Placements<T>> {
    let (pos, neg) = set.split();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::DegenerateLabels(format!(
            "{} positives and {} negatives; AUC needs at least one of each",
            pos.len(),
            neg.len()
        )));
    }
    let (m, n) = (pos.len(), neg.len());
    let mut neg_sorted = neg.clone();
    neg_sorted.sort_by(cmp);
    let mut pos_sorted = pos.clone();
    pos_sorted.sort_by(cmp);

    let mut twice_total: u64 = 0;
    let two_n = T::of_usize(2 * n);
    let v10 = pos
        .iter()
        .map(|&s| {
            let (below, tied) = rank_counts(&neg_sorted, s);
            let twice = (2 * below + tied) as u64;
            twice_total += twice;
            T::from_u64(twice).unwrap() / two_n
        })
        .collect();
    let two_m = T::of_usize(2 * m);
    let v01 = neg
        .iter()
        .map(|&s| {
            let (below, tied) = rank_counts(&pos_sorted, s);
            let above = m - below - tied;
            T::from_u64((2 * above + tied) as u64).unwrap() / two_m
        })
        .collect();
    let auc = T::from_u64(twice_total).unwrap() / T::from_u64(2 * (m as u64) * (n as u64)).unwrap();
    Ok(Placements { v10, v01, auc })
}

/// Mann-Whitney AUC with ties counted as one half.
pub fn auc<T: Scalar>(set: &ScoredSet<T>) -> Result<T> {
    Ok(placements(set)?.auc)
}

/// Sample covariance of two equally long placement vectors.
fn sample_cov<T: Scalar>(a: &[T], mean_a: T, b: &[T], mean_b: T) -> T {
    let s: T = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - mean_a) * (y - mean_b))
        .sum();
    s / T::of_usize(a.len() - 1)
}

/// DeLong covariance between two placement sets over the same records.
fn delong_cov<T: Scalar>(a: &Placements<T>, b: &Placements<T>) -> T {
    let m = T::of_usize(a.v10.len());
    let n = T::of_usize(a.v01.len());
    sample_cov(&a.v10, a.auc, &b.v10, b.auc) / m + sample_cov(&a.v01, a.auc, &b.v01, b.auc) / n
}

fn check_variance_support<T>(p: &Placements<T>) -> Result<()> {
    if p.v10.len() < 2 || p.v01.len() < 2 {
        return Err(Error::DegenerateLabels(format!(
            "{} positives and {} negatives; DeLong variance needs at least two of each",
            p.v10.len(),
            p.v01.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AucEstimate<T> {
    pub auc: T,
    pub variance: T,
    /// Lower 95% bound, clamped to [0, 1].
    pub ci_low: T,
    /// Upper 95% bound, clamped to [0, 1].
    pub ci_high: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AucDiff<T> {
    /// AUC of the first model minus AUC of the second.
    pub delta: T,
    pub variance: T,
    pub ci_low: T,
    pub ci_high: T,
    /// Zero lies outside `[ci_low, ci_high]`.
    pub significant: bool,
}

pub fn significant<T: Scalar>(ci_low: T, ci_high: T) -> bool {
    !(ci_low <= T::zero() && T::zero() <= ci_high)
}

/// AUC with its DeLong variance and 95% normal-approximation interval.
pub fn delong_estimate<T: Scalar>(set: &ScoredSet<T>) -> Result<AucEstimate<T>> {
    let p = placements(set)?;
    check_variance_support(&p)?;
    let variance = delong_cov(&p, &p).max(T::zero());
    let half = T::of(Z_95) * variance.sqrt();
    Ok(AucEstimate {
        auc: p.auc,
        variance,
        ci_low: (p.auc - half).max(T::zero()),
        ci_high: (p.auc + half).min(T::one()),
    })
}

/// Paired DeLong comparison of two models scored on the same records.
pub fn delong_diff<T: Scalar>(a: &ScoredSet<T>, b: &ScoredSet<T>) -> Result<AucDiff<T>> {
    if a.labels != b.labels {
        return Err(Error::InvalidParam(
            "paired sets must share labels and record order".into(),
        ));
    }
    let pa = placements(a)?;
    let pb = placements(b)?;
    check_variance_support(&pa)?;
    let var_a = delong_cov(&pa, &pa);
    let var_b = delong_cov(&pb, &pb);
    let cov = delong_cov(&pa, &pb);
    let two = T::of(2.0);
    let variance = (var_a + var_b - two * cov).max(T::zero());
    let delta = pa.auc - pb.auc;
    let half = T::of(Z_95) * variance.sqrt();
    let (ci_low, ci_high) = (delta - half, delta + half);
    Ok(AucDiff {
        delta,
        variance,
        ci_low,
        ci_high,
        significant: significant(ci_low, ci_high),
    })
}
