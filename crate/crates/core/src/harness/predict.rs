//! Closed-form evaluation for the `predict` kind.

use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::init::{ActivationKind, InitScheme};
use crate::theory::{self, DerivativeKind, MomentState};

#[derive(Debug, Clone, Deserialize)]
struct PredictParams {
    depth: usize,
    tau: Option<f64>,
    d: Option<usize>,
    init: Option<InitScheme>,
    #[serde(default = "linear")]
    activation: ActivationKind,
    alpha: Option<f64>,
    w0: Option<f64>,
    #[serde(default = "one")]
    y: f64,
    t: Option<f64>,
    #[serde(default = "one")]
    prefactor: f64,
}

fn linear() -> ActivationKind {
    ActivationKind::Linear
}

fn one() -> f64 {
    1.0
}

fn wrap(r: Result<Value>) -> Value {
    r.unwrap_or_else(|e| json!({ "error": e.code(), "message": e.to_string() }))
}

fn state(s: MomentState) -> Value {
    json!({ "m2": s.m2, "m4_2": s.m4_2, "m4_4": s.m4_4 })
}

fn chain_part(tau: f64, l: usize) -> Result<Value> {
    let moments: Vec<f64> = (1..=3).map(|m| theory::chain_moment(tau, l, m)).collect::<Result<_>>()?;
    let (lo, hi) = theory::chain_median_bounds(tau, l)?;
    let rates = if l >= 2 {
        json!({
            "gradient": theory::chain_derivative_rate(tau, l, DerivativeKind::Gradient)?,
            "hessian_offdiag": theory::chain_derivative_rate(tau, l, DerivativeKind::HessianOffDiag)?,
            "hessian_diag": theory::chain_derivative_rate(tau, l, DerivativeKind::HessianDiag)?,
        })
    } else {
        Value::Null
    };
    let erlang_median = theory::erlang_median(l)?;
    Ok(json!({
        "moments": moments,
        "median_bounds": [lo, hi],
        "median": (l as f64 * tau.ln() - erlang_median).exp(),
        "erlang_median": erlang_median,
        "derivative_log_rates": rates,
    }))
}

fn network_part(d: usize, init: &InitScheme, act: ActivationKind, l: usize, prefactor: f64) -> Result<Value> {
    let prof = init.profile(d)?;
    let p = act.p();
    let q = theory::q_matrix(d, prof.kappa, p)?;
    let fwd = theory::forward_moments(MomentState::gaussian_input(d), d, prof.sigma2, prof.kappa, p, l)?;
    let fwd_unit = theory::forward_moments(MomentState::unit_vector(), d, prof.sigma2, prof.kappa, p, l)?;
    let frob2 = theory::frobenius_propagation(d, prof.sigma2, prof.kappa, p, l, 2)?;
    let frob4 = theory::frobenius_propagation(d, prof.sigma2, prof.kappa, p, l, 4)?;
    let scaling = if l >= 2 { serde_json::to_value(theory::grad_hessian_scaling(d, prof.sigma2, p, l, prefactor)?).map_err(|e| Error::Config(e.to_string()))? } else { Value::Null };
    Ok(json!({
        "sigma2": prof.sigma2,
        "mu4": prof.mu4,
        "kappa": prof.kappa,
        "p": p,
        "q_matrix": q,
        "forward_moments_gaussian_input": state(fwd),
        "forward_moments_unit_input": state(fwd_unit),
        "frobenius_moment2": frob2,
        "frobenius_moment4": frob4,
        "scaling": scaling,
    }))
}

fn flow_part(w0: f64, l: usize, y: f64, t: Option<f64>) -> Result<Value> {
    let b = theory::blowup(w0, l, y)?;
    let at = t.map(|t| wrap(b.at(t).map(Value::from)));
    Ok(json!({ "t_e": b.t_e, "t_star": b.t_star, "bound_at_t": at }))
}

/// Evaluate every closed-form quantity the given parameters determine.
pub fn predict(params: &Map<String, Value>) -> Result<Value> {
    let p: PredictParams = serde_json::from_value(Value::Object(params.clone())).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Map::new();
    out.insert("depth".into(), p.depth.into());
    if let Some(tau) = p.tau {
        out.insert("chain".into(), wrap(chain_part(tau, p.depth)));
    }
    if let (Some(d), Some(init)) = (p.d, p.init.as_ref()) {
        out.insert("network".into(), wrap(network_part(d, init, p.activation, p.depth, p.prefactor)));
    }
    if let Some(alpha) = p.alpha {
        out.insert("min_width_for_median".into(), wrap(theory::min_width_for_median(alpha, p.depth).map(Value::from)));
    }
    if let Some(w0) = p.w0 {
        out.insert("flow".into(), wrap(flow_part(w0, p.depth, p.y, p.t)));
    }
    Ok(Value::Object(out))
}
