//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Per-step RDP is evaluated at integer orders with the exact binomial
//! expansion, composed additively over steps and converted to (ε, δ).

use crate::{Error, Result, Scalar};

pub const DEFAULT_MAX_ORDER: u32 = 64;

pub fn default_orders() -> Vec<u32> {
    (2..=DEFAULT_MAX_ORDER).collect()
}

/// Inputs that fully determine the privacy cost of a DP-SGD run.
#[derive(Debug, Clone, PartialEq)]
pub struct AccountantParams<T> {
    pub sampling_ratio: T,
    pub noise_multiplier: T,
    pub steps: u64,
    pub delta: T,
    pub orders: Vec<u32>,
}

impl<T: Scalar> AccountantParams<T> {
    pub fn new(sampling_ratio: T, noise_multiplier: T, steps: u64, delta: T) -> Self {
        Self {
            sampling_ratio,
            noise_multiplier,
            steps,
            delta,
            orders: default_orders(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.sampling_ratio;
        if !(q >= T::zero() && q <= T::one()) {
            return Err(Error::InvalidParam(format!("sampling ratio {q} outside [0, 1]")));
        }
        if self.steps > 0 && !(self.noise_multiplier > T::zero()) {
            return Err(Error::InvalidParam(
                "noise multiplier must be > 0 for accounted steps".into(),
            ));
        }
        if !(self.delta > T::zero() && self.delta < T::one()) {
            return Err(Error::InvalidParam(format!("delta {} outside (0, 1)", self.delta)));
        }
        check_orders(&self.orders)
    }
}

fn check_orders(orders: &[u32]) -> Result<()> {
    if orders.is_empty() {
        return Err(Error::InvalidParam("no Rényi orders".into()));
    }
    if orders.iter().any(|&a| a < 2) {
        return Err(Error::InvalidParam("Rényi orders must be >= 2".into()));
    }
    if orders.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParam(
            "Rényi orders must be strictly ascending".into(),
        ));
    }
    Ok(())
}

/// Accumulated ε(α) at each tracked order.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpCurve<T> {
    orders: Vec<u32>,
    eps: Vec<T>,
}

impl<T: Scalar> RdpCurve<T> {
    pub fn zero(orders: Vec<u32>) -> Self {
        let eps = vec![T::zero(); orders.len()];
        Self { orders, eps }
    }

    /// Single-step curve of the subsampled Gaussian at the given orders.
    pub fn subsampled_gaussian(q: T, z: T, orders: Vec<u32>) -> Result<Self> {
        check_orders(&orders)?;
        let eps = orders
            .iter()
            .map(|&a| rdp_step(q, z, a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { orders, eps })
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn values(&self) -> &[T] {
        &self.eps
    }

    pub fn get(&self, order: u32) -> Option<T> {
        self.orders
            .iter()
            .position(|&a| a == order)
            .map(|i| self.eps[i])
    }

    /// Pointwise scaling, i.e. `steps`-fold composition of this curve.
    pub fn compose(&self, steps: u64) -> Self {
        let k = T::from_u64(steps).expect("step count representable");
        Self {
            orders: self.orders.clone(),
            eps: self.eps.iter().map(|&e| e * k).collect(),
        }
    }

    /// Best (ε, δ) guarantee over the tracked orders: returns ε and the
    /// minimizing order, the smallest one on ties.
    pub fn to_eps_delta(&self, delta: T) -> Result<(T, u32)> {
        if !(delta > T::zero() && delta < T::one()) {
            return Err(Error::InvalidParam(format!("delta {delta} outside (0, 1)")));
        }
        if self.orders.is_empty() {
            return Err(Error::Empty("RDP curve has no orders".into()));
        }
        let log_inv_delta = -delta.ln();
        let mut best: Option<(T, u32)> = None;
        for (&a, &e) in self.orders.iter().zip(&self.eps) {
            let eps = e + log_inv_delta / T::from_u32(a - 1).expect("order representable");
            if best.is_none_or(|(b, _)| eps < b) {
                best = Some((eps, a));
            }
        }
        Ok(best.expect("nonempty"))
    }
}

/// Natural log of C(n, k), by a running product of ratios.
fn ln_binomial<T: Scalar>(n: u32, k: u32) -> T {
    let k = k.min(n - k);
    (1..=k)
        .map(|i| T::from_u32(n - k + i).unwrap().ln() - T::from_u32(i).unwrap().ln())
        .sum()
}

fn log_sum_exp<T: Scalar>(terms: &[T]) -> T {
    let max = terms
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| a.max(b));
    if max == T::neg_infinity() {
        return max;
    }
    max + terms.iter().map(|&t| (t - max).exp()).sum::<T>().ln()
}

/// RDP of one step of the Poisson-subsampled Gaussian mechanism at integer
/// order `alpha`, with sampling ratio `q` and noise multiplier `z`.
pub fn rdp_step<T: Scalar>(q: T, z: T, alpha: u32) -> Result<T> {
    if alpha < 2 {
        return Err(Error::InvalidParam(format!("Rényi order {alpha} < 2")));
    }
    if !(q >= T::zero() && q <= T::one()) {
        return Err(Error::InvalidParam(format!("sampling ratio {q} outside [0, 1]")));
    }
    if !(z > T::zero()) {
        return Err(Error::InvalidParam("noise multiplier must be > 0".into()));
    }
    let a = T::from_u32(alpha).unwrap();
    let two = T::of(2.0);
    if q == T::zero() {
        return Ok(T::zero());
    }
    if q == T::one() {
        return Ok(a / (two * z * z));
    }
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let terms: Vec<T> = (0..=alpha)
        .map(|k| {
            let kf = T::from_u32(k).unwrap();
            ln_binomial::<T>(alpha, k)
                + T::from_u32(alpha - k).unwrap() * ln_1mq
                + kf * ln_q
                + kf * (kf - T::one()) / (two * z * z)
        })
        .collect();
    Ok((log_sum_exp(&terms) / (a - T::one())).max(T::zero()))
}

/// Run the accountant for a whole training procedure.
pub fn epsilon_for_training<T: Scalar>(params: &AccountantParams<T>) -> Result<PrivacyLedger<T>> {
    params.validate()?;
    let curve = if params.steps == 0 {
        RdpCurve::zero(params.orders.clone())
    } else {
        RdpCurve::subsampled_gaussian(
            params.sampling_ratio,
            params.noise_multiplier,
            params.orders.clone(),
        )?
        .compose(params.steps)
    };
    let (epsilon, order) = curve.to_eps_delta(params.delta)?;
    Ok(PrivacyLedger {
        site_id: String::new(),
        params: params.clone(),
        curve,
        epsilon,
        order,
    })
}

/// Privacy budget spent by one site.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLedger<T> {
    pub site_id: String,
    pub params: AccountantParams<T>,
    pub curve: RdpCurve<T>,
    pub epsilon: T,
    /// Order attaining `epsilon`.
    pub order: u32,
}

impl<T: Scalar> PrivacyLedger<T> {
    pub fn open(site_id: impl Into<String>, params: AccountantParams<T>) -> Result<Self> {
        let mut ledger = epsilon_for_training(&params)?;
        ledger.site_id = site_id.into();
        Ok(ledger)
    }

    /// Record `steps` more DP-SGD steps and re-resolve ε.
    pub fn advance(&mut self, steps: u64) -> Result<()> {
        let mut params = self.params.clone();
        params.steps += steps;
        let site = std::mem::take(&mut self.site_id);
        *self = Self::open(site, params)?;
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.params.steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_closed_form() {
        assert_eq!(rdp_step(1.0f64, 1.0, 2).unwrap(), 1.0);
        assert_eq!(rdp_step(1.0f64, 2.0, 8).unwrap(), 1.0);
    }

    #[test]
    fn empty_sampling_is_free() {
        for a in [2, 10, 64] {
            assert_eq!(rdp_step(0.0f64, 1.0, a).unwrap(), 0.0);
        }
        assert!(rdp_step(1e-12f64, 1.0, 32).unwrap() < 1e-20);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(rdp_step(0.5f64, 1.0, 1).is_err());
        assert!(rdp_step(0.5f64, 0.0, 2).is_err());
        assert!(rdp_step(1.5f64, 1.0, 2).is_err());
        assert!(RdpCurve::<f64>::subsampled_gaussian(0.1, 1.0, vec![3, 2]).is_err());
        assert!(RdpCurve::<f64>::zero(vec![]).to_eps_delta(1e-5).is_err());
    }

    #[test]
    fn small_order_matches_expansion() {
        // alpha = 2: E[L^2] = 1 + q^2 (e^{1/z^2} - 1)
        let (q, z) = (0.05f64, 1.5f64);
        let want = (q * q * ((1.0 / (z * z)).exp() - 1.0)).ln_1p();
        let got = rdp_step(q, z, 2).unwrap();
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn compose_examples() {
        let c = RdpCurve::subsampled_gaussian(1.0f64, 1.0, vec![2]).unwrap();
        assert_eq!(c.compose(0).values(), &[0.0]);
        assert_eq!(c.compose(1), c);
        assert_eq!(c.compose(10).get(2), Some(10.0));
    }

    #[test]
    fn conversion_example() {
        let c = RdpCurve::subsampled_gaussian(1.0f64, 1.0, default_orders()).unwrap();
        let (eps, order) = c.to_eps_delta(1e-5).unwrap();
        assert_eq!(order, 6);
        assert!((eps - (3.0 + 1e5f64.ln() / 5.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_curve_uses_largest_order() {
        let (eps, order) = RdpCurve::<f64>::zero(default_orders()).to_eps_delta(1e-5).unwrap();
        assert_eq!(order, 64);
        assert_eq!(eps, 1e5f64.ln() / 63.0);
    }

    #[test]
    fn ties_pick_smallest_order() {
        // penalties L and L/2 with L = ln 4; totals tie at L
        let l = 4f64.ln();
        let c = RdpCurve { orders: vec![2, 3], eps: vec![0.0, l / 2.0] };
        let (eps, order) = c.to_eps_delta(0.25).unwrap();
        assert_eq!((eps, order), (l, 2));
    }

    #[test]
    fn training_pipeline_and_ledger() {
        let p = AccountantParams::new(1.0f64, 1.0, 1, 1e-5);
        let l = epsilon_for_training(&p).unwrap();
        assert!((l.epsilon - 5.302_585_092_994_046).abs() < 1e-9);

        let zero = epsilon_for_training(&AccountantParams::new(0.3f64, 1.0, 0, 1e-5)).unwrap();
        assert_eq!(zero.epsilon, 1e5f64.ln() / 63.0);

        let mut ledger = PrivacyLedger::open("a", AccountantParams::new(0.05f64, 1.0, 0, 1e-5)).unwrap();
        ledger.advance(20).unwrap();
        ledger.advance(20).unwrap();
        let direct = epsilon_for_training(&AccountantParams::new(0.05f64, 1.0, 40, 1e-5)).unwrap();
        assert_eq!(ledger.epsilon, direct.epsilon);
        assert_eq!(ledger.site_id, "a");
        assert_eq!(ledger.steps(), 40);
    }

    #[test]
    fn no_overflow_at_extreme_orders() {
        for a in [64u32, 128, 256] {
            let e = rdp_step(0.5f64, 0.1, a).unwrap();
            assert!(e.is_finite() && e > 0.0);
        }
    }

    #[test]
    fn f32_agrees_with_f64() {
        let a = rdp_step(0.05f64, 1.0, 16).unwrap();
        let b = rdp_step(0.05f32, 1.0, 16).unwrap();
        assert!(((a - b as f64) / a).abs() < 1e-4);
    }
}
