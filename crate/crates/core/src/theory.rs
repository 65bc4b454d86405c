//! Closed-form predictions for random chains and random deep networks.
//!
//! Everything here is deterministic. Products of per-layer factors are built
//! in log-space where they can overflow; the Q-matrix recursion is applied by
//! explicit steps so that composing runs reproduces a single run bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Result};

// ---------------------------------------------------------------------------
// Scalar chains with uniform weights on [-tau, tau]

fn check_chain(tau: f64, depth: usize) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return domain(format!("tau must be positive, got {tau}"));
    }
    if depth == 0 {
        return domain("depth must be at least 1");
    }
    Ok(())
}

/// `ln E[v^m]` for `v = |w_1 ... w_L|`, `w ~ U[-tau, tau]`, `m` in 1..=3.
pub fn chain_log_moment(tau: f64, depth: usize, order: u32) -> Result<f64> {
    check_chain(tau, depth)?;
    if !(1..=3).contains(&order) {
        return domain(format!("moment order must be 1, 2 or 3, got {order}"));
    }
    let m = order as f64;
    Ok(depth as f64 * (m * tau.ln() - (m + 1.0).ln()))
}

/// `E[v^m] = (tau^m / (m + 1))^L`.
pub fn chain_moment(tau: f64, depth: usize, order: u32) -> Result<f64> {
    chain_log_moment(tau, depth, order).map(f64::exp)
}

/// CDF of the Erlang(`shape`, 1) distribution at `xi`.
///
/// Uses the Poisson-sum form with a term recurrence; for `xi > 700` the terms
/// are accumulated as a log-sum-exp to avoid underflow of `exp(-xi)`.
pub fn erlang_cdf(shape: usize, xi: f64) -> f64 {
    if shape == 0 {
        return 1.0;
    }
    if xi.is_nan() {
        return f64::NAN;
    }
    if xi <= 0.0 {
        return 0.0;
    }
    if xi.is_infinite() {
        return 1.0;
    }
    let tail = if xi <= 700.0 {
        let mut term = (-xi).exp();
        let mut sum = term;
        for k in 1..shape {
            term *= xi / k as f64;
            sum += term;
        }
        sum
    } else {
        let lx = xi.ln();
        let mut log_fact = 0.0;
        let mut logs = Vec::with_capacity(shape);
        for k in 0..shape {
            if k > 0 {
                log_fact += (k as f64).ln();
            }
            logs.push(k as f64 * lx - xi - log_fact);
        }
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = logs.iter().map(|l| (l - mx).exp()).sum();
        (mx + s.ln()).exp()
    };
    (1.0 - tail).clamp(0.0, 1.0)
}

/// Median of Erlang(`shape`, 1), by bisection on [`erlang_cdf`].
pub fn erlang_median(shape: usize) -> Result<f64> {
    if shape == 0 {
        return domain("shape must be at least 1");
    }
    let (mut lo, mut hi) = ((shape as f64 - 1.0).max(0.0), shape as f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if erlang_cdf(shape, mid) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `P(-ln v <= zeta)`; the variable `-ln v + L ln tau` is Erlang(L, 1).
pub fn chain_log_cdf(tau: f64, depth: usize, zeta: f64) -> Result<f64> {
    check_chain(tau, depth)?;
    Ok(erlang_cdf(depth, zeta + depth as f64 * tau.ln()))
}

/// Bracket `[lo, hi]` for the median of `v`.
pub fn chain_median_bounds(tau: f64, depth: usize) -> Result<(f64, f64)> {
    check_chain(tau, depth)?;
    let l = depth as f64;
    let s = l * tau.ln();
    let lo = (s - (l - 1.0 + std::f64::consts::LN_2)).exp();
    let hi = (s - (l - 1.0 / 3.0)).exp();
    Ok((lo, hi))
}

/// Which derivative of the chain loss a rate refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeKind {
    Gradient,
    HessianDiag,
    HessianOffDiag,
}

/// Expected log-magnitude rate of a chain derivative entry:
/// `-(L-1)(1 - ln tau)`, doubled for diagonal Hessian entries.
pub fn chain_derivative_rate(tau: f64, depth: usize, kind: DerivativeKind) -> Result<f64> {
    check_chain(tau, depth)?;
    let base = -((depth as f64) - 1.0) * (1.0 - tau.ln());
    Ok(match kind {
        DerivativeKind::Gradient | DerivativeKind::HessianOffDiag => base,
        DerivativeKind::HessianDiag => 2.0 * base,
    })
}

// ---------------------------------------------------------------------------
// Forward moments of products of random matrices

/// `(E||x||^2, E||x||_2^4, E||x||_4^4)` of a random vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub m2: f64,
    pub m4_2: f64,
    pub m4_4: f64,
}

impl MomentState {
    pub fn new(m2: f64, m4_2: f64, m4_4: f64) -> Result<Self> {
        let s = MomentState { m2, m4_2, m4_4 };
        s.validate()?;
        Ok(s)
    }

    /// Moments of `N(0, I_d)`.
    pub fn gaussian_input(d: usize) -> Self {
        let d = d as f64;
        MomentState { m2: d, m4_2: d * (d + 2.0), m4_4: 3.0 * d }
    }

    /// Moments of a fixed unit coordinate vector.
    pub fn unit_vector() -> Self {
        MomentState { m2: 1.0, m4_2: 1.0, m4_4: 1.0 }
    }

    /// Moments of a deterministic vector.
    pub fn of_vector(x: &[f64]) -> Self {
        let n2: f64 = x.iter().map(|v| v * v).sum();
        let n4: f64 = x.iter().map(|v| v.powi(4)).sum();
        MomentState { m2: n2, m4_2: n2 * n2, m4_4: n4 }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.m2) && ok(self.m4_2) && ok(self.m4_4)) {
            return domain("moments must be finite and non-negative");
        }
        if self.m4_4 > self.m4_2 * (1.0 + 1e-12) {
            return domain("fourth moment in 4-norm cannot exceed the squared 2-norm moment");
        }
        Ok(())
    }
}

fn check_layer(d: usize, sigma2: f64, kappa: f64) -> Result<()> {
    if d == 0 {
        return domain("width must be at least 1");
    }
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return domain(format!("variance must be positive, got {sigma2}"));
    }
    if !(kappa >= 1.0) || !kappa.is_finite() {
        return domain(format!("kurtosis must be at least 1, got {kappa}"));
    }
    Ok(())
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return domain(format!("gate probability must lie in (0, 1], got {p}"));
    }
    Ok(())
}

/// The 2x2 matrix driving `(E||.||_2^4, E||.||_4^4)` through one gate+layer step,
/// up to the factor `p^2 d sigma^4`.
pub fn q_matrix(d: usize, kappa: f64, p: f64) -> Result<[[f64; 2]; 2]> {
    check_p(p)?;
    if d == 0 {
        return domain("width must be at least 1");
    }
    let d = d as f64;
    Ok([
        [d + 2.0, (kappa - 3.0 + (1.0 - p) * (d + 2.0)) / p],
        [3.0, (kappa - 3.0 * p) / p],
    ])
}

/// Moments after `k` layers of `x -> W D x` with iid `W` entries and Bernoulli(`p`) gates.
pub fn forward_moments(state: MomentState, d: usize, sigma2: f64, kappa: f64, p: f64, k: usize) -> Result<MomentState> {
    state.validate()?;
    check_layer(d, sigma2, kappa)?;
    let q = q_matrix(d, kappa, p)?;
    let df = d as f64;
    let b2 = df * sigma2 * p;
    let b4 = p * p * df * sigma2 * sigma2;
    let mut s = state;
    for _ in 0..k {
        let a = q[0][0] * s.m4_2 + q[0][1] * s.m4_4;
        let b = q[1][0] * s.m4_2 + q[1][1] * s.m4_4;
        s = MomentState { m2: b2 * s.m2, m4_2: b4 * a, m4_4: b4 * b };
    }
    Ok(s)
}

/// Moments after multiplying by a diagonal matrix of Bernoulli(`p`) gates.
pub fn one_layer_activation_step(state: MomentState, p: f64) -> Result<MomentState> {
    state.validate()?;
    check_p(p)?;
    Ok(MomentState {
        m2: p * state.m2,
        m4_2: p * p * state.m4_2 + (p - p * p) * state.m4_4,
        m4_4: p * state.m4_4,
    })
}

/// Moments after multiplying by a `d x d` matrix with iid entries.
pub fn one_layer_matrix_step(state: MomentState, d: usize, sigma2: f64, kappa: f64) -> Result<MomentState> {
    state.validate()?;
    check_layer(d, sigma2, kappa)?;
    let df = d as f64;
    let s4 = sigma2 * sigma2;
    Ok(MomentState {
        m2: df * sigma2 * state.m2,
        m4_2: df * (df + 2.0) * s4 * state.m4_2 + (kappa - 3.0) * df * s4 * state.m4_4,
        m4_4: 3.0 * df * s4 * state.m4_2 + (kappa - 3.0) * df * s4 * state.m4_4,
    })
}

/// Frobenius moment of a gated product spanning `span` layers.
///
/// Order 2 is exact: `d (d sigma^2 p)^span`. Order 4 returns `d^2` times the
/// fourth moment of a propagated unit vector, which bounds `E||.||_F^4` from
/// above (column norms are identically distributed but not independent).
pub fn frobenius_propagation(d: usize, sigma2: f64, kappa: f64, p: f64, span: usize, moment: u32) -> Result<f64> {
    check_layer(d, sigma2, kappa)?;
    check_p(p)?;
    let df = d as f64;
    match moment {
        2 => {
            let b = df * sigma2 * p;
            let mut v = df;
            for _ in 0..span {
                v *= b;
            }
            Ok(v)
        }
        4 => {
            let s = forward_moments(MomentState::unit_vector(), d, sigma2, kappa, p, span)?;
            Ok(df * df * s.m4_2)
        }
        m => invalid(format!("moment must be 2 or 4, got {m}")),
    }
}

/// Smallest width whose median squared-norm ratio after `L` Gaussian layers
/// stays within `(1 + alpha^2)`: `ceil(2 / ((alpha^2 + 1)^(1/L) - 1))`.
pub fn min_width_for_median(alpha: f64, depth: usize) -> Result<u64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return domain(format!("alpha must lie in (0, 1], got {alpha}"));
    }
    if depth == 0 {
        return domain("depth must be at least 1");
    }
    let x = 2.0 / ((alpha * alpha).ln_1p() / depth as f64).exp_m1();
    if !x.is_finite() || x > u64::MAX as f64 {
        return domain("required width overflows");
    }
    let r = x.round();
    let w = if (x - r).abs() <= 1e-9 * r.max(1.0) { r } else { x.ceil() };
    Ok(w as u64)
}

/// Log-scaling exponents of gradient and Hessian entries in a deep network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    /// `d sigma^2 p`
    pub base: f64,
    pub grad_exponent: f64,
    pub diag_exponent: f64,
    pub offdiag_exponent: f64,
    /// `L d C base^(L/2)`
    pub eig_bound: f64,
}

/// Exponents `(L/2) ln b` for gradients and off-diagonal Hessian blocks and
/// `L ln b` for diagonal blocks, with `b = d sigma^2 p`.
pub fn grad_hessian_scaling(d: usize, sigma2: f64, p: f64, depth: usize, prefactor: f64) -> Result<ScalingReport> {
    check_layer(d, sigma2, 3.0)?;
    check_p(p)?;
    if depth == 0 {
        return domain("depth must be at least 1");
    }
    if !(prefactor > 0.0) {
        return domain("prefactor must be positive");
    }
    let b = d as f64 * sigma2 * p;
    let l = depth as f64;
    let lb = b.ln();
    Ok(ScalingReport {
        base: b,
        grad_exponent: 0.5 * l * lb,
        diag_exponent: l * lb,
        offdiag_exponent: 0.5 * l * lb,
        eig_bound: l * d as f64 * prefactor * (0.5 * l * lb).exp(),
    })
}

// ---------------------------------------------------------------------------
// Gradient flow on a symmetric chain

/// Blow-up data of the flow upper bound for a symmetric chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowBound {
    pub w0: f64,
    pub depth: usize,
    pub y: f64,
    /// `w0^(2-L) / (L-2)`; the bound blows up at `t_e / y`.
    pub t_e: f64,
    /// Time at which the bound reaches 1.
    pub t_star: f64,
}

impl FlowBound {
    /// Value of the bound at time `t`.
    pub fn at(&self, t: f64) -> Result<f64> {
        gradient_flow_bound(self.w0, self.depth, self.y, t)
    }
}

fn check_flow(w0: f64, depth: usize, y: f64) -> Result<()> {
    if depth < 3 {
        return domain(format!("flow bound needs depth >= 3, got {depth}"));
    }
    if !(w0 > 0.0) || !w0.is_finite() {
        return domain(format!("w0 must be positive, got {w0}"));
    }
    if !(y > 0.0) || !y.is_finite() {
        return domain(format!("y must be positive, got {y}"));
    }
    Ok(())
}

/// Blow-up and crossing times of the flow bound.
pub fn blowup(w0: f64, depth: usize, y: f64) -> Result<FlowBound> {
    check_flow(w0, depth, y)?;
    let k = depth as f64 - 2.0;
    let t_e = w0.powf(2.0 - depth as f64) / k;
    Ok(FlowBound { w0, depth, y, t_e, t_star: (t_e - 1.0 / k) / y })
}

/// `[(L-2)(t_e - y t)]^(-1/(L-2))`, valid for `0 <= y t < t_e`.
pub fn gradient_flow_bound(w0: f64, depth: usize, y: f64, t: f64) -> Result<f64> {
    let b = blowup(w0, depth, y)?;
    if !(t >= 0.0) {
        return domain(format!("time must be non-negative, got {t}"));
    }
    if y * t >= b.t_e {
        return domain(format!("time {t} is past the blow-up time {}", b.t_e / y));
    }
    let k = depth as f64 - 2.0;
    Ok((k * (b.t_e - y * t)).powf(-1.0 / k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_chain_moment_at_unit_range() {
        assert!((chain_moment(1.0, 4, 1).unwrap() - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn second_chain_moment_is_one_at_sqrt3() {
        for l in [1, 7, 100, 10_000] {
            assert!((chain_moment(3f64.sqrt(), l, 2).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn chain_moment_domain() {
        assert!(chain_moment(1.0, 0, 1).is_err());
        assert!(chain_moment(-1.0, 3, 1).is_err());
        assert!(chain_moment(1.0, 3, 4).is_err());
    }

    #[test]
    fn erlang_cdf_shape_one_is_exponential() {
        for x in [0.1, 0.5, 2.0, 10.0] {
            assert!((erlang_cdf(1, x) - (1.0 - (-x as f64).exp())).abs() < 1e-15);
        }
        assert_eq!(erlang_cdf(5, -1.0), 0.0);
        assert_eq!(erlang_cdf(5, 0.0), 0.0);
    }

    #[test]
    fn erlang_cdf_branches_agree_near_switch() {
        let a = erlang_cdf(700, 699.999);
        let b = erlang_cdf(700, 700.001);
        assert!((a - b).abs() < 1e-4);
        assert!(a > 0.45 && a < 0.55);
    }

    #[test]
    fn median_bracket_at_unit_range_depth_one() {
        let (lo, hi) = chain_median_bounds(1.0, 1).unwrap();
        assert!(lo <= 0.5 + 1e-15 && 0.5 <= hi);
        assert!((lo - 0.5).abs() < 1e-15);
    }

    #[test]
    fn median_bracket_at_e_is_constant() {
        let e = std::f64::consts::E;
        let (lo, hi) = chain_median_bounds(e, 1000).unwrap();
        assert!((lo - e / 2.0).abs() < 1e-9);
        assert!((hi - (1.0f64 / 3.0).exp()).abs() < 1e-9);
    }

    #[test]
    fn derivative_rate_values() {
        let r = chain_derivative_rate(3f64.sqrt(), 10, DerivativeKind::Gradient).unwrap();
        assert!((r - (-9.0 * (1.0 - 3f64.sqrt().ln()))).abs() < 1e-12);
        assert!((r / 9.0 + 0.450694).abs() < 1e-5);
        let h = chain_derivative_rate(3f64.sqrt(), 10, DerivativeKind::HessianDiag).unwrap();
        assert!((h - 2.0 * r).abs() < 1e-12);
    }

    #[test]
    fn q_matrix_relu_gaussian() {
        let q = q_matrix(10, 3.0, 0.5).unwrap();
        assert_eq!(q, [[12.0, 12.0], [3.0, 3.0]]);
        let q = q_matrix(10, 3.0, 1.0).unwrap();
        assert_eq!(q, [[12.0, 0.0], [3.0, 0.0]]);
    }

    #[test]
    fn xavier_linear_gaussian_growth() {
        let s = MomentState::new(1.0, 1.0, 1.0).unwrap();
        let out = forward_moments(s, 10, 0.1, 3.0, 1.0, 12).unwrap();
        assert!((out.m4_2 - 1.2f64.powi(12)).abs() < 1e-10);
        assert!((out.m2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn moment_state_validation() {
        assert!(MomentState::new(1.0, 1.0, 2.0).is_err());
        assert!(MomentState::new(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn min_width_examples() {
        assert_eq!(min_width_for_median(1.0, 1).unwrap(), 2);
        assert!(min_width_for_median(0.0, 4).is_err());
        assert!(min_width_for_median(1.5, 4).is_err());
        let a = 0.5;
        let x = 2.0 / ((1.0f64 + a * a).powf(1.0 / 10.0) - 1.0);
        assert_eq!(min_width_for_median(a, 10).unwrap(), x.ceil() as u64);
    }

    #[test]
    fn scaling_diag_twice_offdiag() {
        let r = grad_hessian_scaling(10, 1.0 / 30.0, 1.0, 7, 1.0).unwrap();
        assert!((r.base - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.diag_exponent - 2.0 * r.offdiag_exponent).abs() < 1e-15);
        assert!((r.grad_exponent - 3.5 * (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn flow_bound_basics() {
        let b = blowup(0.5, 4, 1.0).unwrap();
        assert_eq!(b.t_e, 0.5f64.powf(-2.0) / 2.0);
        assert!((gradient_flow_bound(0.5, 4, 1.0, 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((b.at(b.t_star).unwrap() - 1.0).abs() < 1e-12);
        assert!(gradient_flow_bound(0.5, 2, 1.0, 0.1).is_err());
        assert!(gradient_flow_bound(0.5, 4, 1.0, b.t_e).is_err());
    }
}
