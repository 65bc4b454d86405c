//! Theory-versus-simulation agreement suite.
//!
//! Every check draws from streams derived from one seed, runs its trials in
//! parallel with results gathered in index order, and reduces sequentially,
//! so metrics are identical for every thread count.

use std::f64::consts::E;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::chain::{self, ChainParams, FlowMethod, OptimizerSpec};
use crate::conv::{self, ConvConfig, ConvNet, Padding, Spatial};
use crate::error::{Error, Result};
use crate::harness::{self, ExperimentSpec, Kind, Row};
use crate::init::{ActivationKind, InitScheme};
use crate::linalg;
use crate::mlp::{self, DataModel, Dataset, GradientStats, HessianMethod, MlpState};
use crate::rng::{stream, sub_seed, trial_stream, Rng};
use crate::stats;
use crate::theory::{self, MomentState};

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// Acceptance criterion number, if the check is one.
    pub criterion: Option<u8>,
    pub passed: bool,
    pub detail: String,
    pub metrics: Vec<(String, f64)>,
    /// Wall-clock time; not part of any CSV row.
    pub seconds: f64,
}

impl CheckResult {
    fn new(name: &str, criterion: Option<u8>) -> Self {
        CheckResult { name: name.into(), criterion, passed: true, detail: String::new(), metrics: Vec::new(), seconds: 0.0 }
    }

    fn metric(&mut self, key: impl Into<String>, v: f64) {
        self.metrics.push((key.into(), v));
    }

    /// Record a sub-condition; the check passes only if all do.
    fn require(&mut self, ok: bool, what: impl AsRef<str>) {
        if !self.detail.is_empty() {
            self.detail.push_str("; ");
        }
        self.detail.push_str(if ok { "ok " } else { "FAIL " });
        self.detail.push_str(what.as_ref());
        self.passed &= ok;
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    /// One line: `PASS|FAIL name (criterion) seconds detail`.
    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        let c = self.criterion.map(|c| format!(" [criterion {c}]")).unwrap_or_default();
        format!("{tag} {}{c} ({:.1}s): {}", self.name, self.seconds, self.detail)
    }
}

type CheckFn = fn(u64) -> Result<CheckResult>;

const CHECKS: &[(&str, CheckFn)] = &[
    ("forward_moments", forward_moments),
    ("erlang_law", erlang_law),
    ("median_bracket", median_bracket),
    ("chain_slopes", chain_slopes),
    ("derivative_oracles", derivative_oracles),
    ("hessian_scaling", hessian_scaling),
    ("spectrum", spectrum),
    ("width_effect", width_effect),
    ("chain_optimizers", chain_optimizers),
    ("flow_bound", flow_bound),
    ("conv_properties", conv_properties),
    ("determinism", determinism),
    ("init_moments", init_moments),
    ("matrix_step", matrix_step),
    ("frobenius_propagation", frobenius_propagation),
    ("preactivation_statistics", preactivation_statistics),
    ("min_width_median", min_width_median),
    ("chain_mean", chain_mean),
    ("chain_hollowness", chain_hollowness),
    ("relu_hessian", relu_hessian),
    ("conv_dense_equivalence", conv_dense_equivalence),
    ("gd_tracks_flow", gd_tracks_flow),
    ("orthogonal_flat", orthogonal_flat),
    ("bootstrap_coverage", bootstrap_coverage),
];

/// Names accepted by [`run_checks`], in execution order.
pub const CHECK_NAMES: &[&str] = &[
    "forward_moments",
    "erlang_law",
    "median_bracket",
    "chain_slopes",
    "derivative_oracles",
    "hessian_scaling",
    "spectrum",
    "width_effect",
    "chain_optimizers",
    "flow_bound",
    "conv_properties",
    "determinism",
    "init_moments",
    "matrix_step",
    "frobenius_propagation",
    "preactivation_statistics",
    "min_width_median",
    "chain_mean",
    "chain_hollowness",
    "relu_hessian",
    "conv_dense_equivalence",
    "gd_tracks_flow",
    "orthogonal_flat",
    "bootstrap_coverage",
];

/// Seed handed to check `name` under `master`.
pub fn check_seed(master: u64, name: &str) -> u64 {
    let i = CHECK_NAMES.iter().position(|n| *n == name).unwrap_or(usize::MAX);
    sub_seed(master, 1_000_000 + i as u64)
}

/// Run one named check, timing it.
pub fn run_check(name: &str, master: u64) -> Result<CheckResult> {
    let f = CHECKS.iter().find(|(n, _)| *n == name).map(|(_, f)| *f).ok_or_else(|| Error::Config(format!("unknown check {name:?}")))?;
    let t0 = Instant::now();
    let mut r = f(check_seed(master, name))?;
    r.seconds = t0.elapsed().as_secs_f64();
    Ok(r)
}

/// Run the selected checks (all by default). A check that errors is reported
/// as failed with the error in its detail.
pub fn run_checks(master: u64, names: Option<&[String]>) -> Result<Vec<CheckResult>> {
    let selected: Vec<&str> = match names {
        Some(ns) => ns.iter().map(String::as_str).collect(),
        None => CHECK_NAMES.to_vec(),
    };
    let mut out = Vec::new();
    for name in selected {
        let r = match run_check(name, master) {
            Ok(r) => r,
            Err(Error::Config(m)) => return Err(Error::Config(m)),
            Err(e) => {
                let mut r = CheckResult::new(name, None);
                r.require(false, format!("error {}: {e}", e.code()));
                r
            }
        };
        out.push(r);
    }
    Ok(out)
}

/// CSV rows for check outcomes: `check:<name>` is 1 or 0, followed by every
/// metric as `metric:<name>:<key>`.
pub fn check_rows(checks: &[CheckResult], master: u64) -> Vec<Row> {
    let mut rows = Vec::new();
    for c in checks {
        let mk = |obs: String, v: f64| Row {
            kind: Kind::Verify.name().into(),
            observable: obs,
            depth: 0,
            width: 0,
            init: String::new(),
            activation: String::new(),
            trial: 0,
            sub_seed: check_seed(master, &c.name),
            value: v,
        };
        rows.push(mk(format!("check:{}", c.name), if c.passed { 1.0 } else { 0.0 }));
        for (k, v) in &c.metrics {
            rows.push(mk(format!("metric:{}:{k}", c.name), *v));
        }
    }
    rows
}

// ---------------------------------------------------------------------------
// Helpers

/// Streaming mean and variance (Welford), mergeable.
#[derive(Debug, Clone, Copy, Default)]
struct Acc {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Acc {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, o: Acc) -> Acc {
        if self.n == 0.0 {
            return o;
        }
        if o.n == 0.0 {
            return self;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Acc { n, mean: self.mean + d * o.n / n, m2: self.m2 + o.m2 + d * d * self.n * o.n / n }
    }

    fn var(&self) -> f64 {
        self.m2 / (self.n - 1.0)
    }

    fn se(&self) -> f64 {
        (self.var() / self.n).sqrt()
    }

    /// `|mean - target|` in standard errors.
    fn z(&self, target: f64) -> f64 {
        (self.mean - target).abs() / self.se()
    }
}

/// Ordered parallel map over `0..n`.
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).into_par_iter().map(f).collect()
}

/// Monte Carlo trials are split into this many trials per stream.
const CHUNK: usize = 2_000;

fn chunks(total: usize) -> Vec<(usize, usize)> {
    (0..total.div_ceil(CHUNK)).map(|i| (i, CHUNK.min(total - i * CHUNK))).collect()
}

fn gaussian_vec(d: usize, rng: &mut Rng) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn matvec(w: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    w.chunks(d).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn relative_slack(value: f64, target: f64) -> f64 {
    (value - target).abs() / target.abs()
}

fn scheme(s: &str) -> InitScheme {
    s.parse().expect("valid scheme")
}

fn median_of(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    stats::quantile_sorted(xs, 0.5)
}

// ---------------------------------------------------------------------------
// Criterion 1

/// Per-depth accumulators of `||x||^2`, `||x||^4`, `||x||_4^4` after `k`
/// layers of `x <- W phi(x)` from a standard Gaussian input.
fn forward_chain_moments(init: &InitScheme, act: ActivationKind, d: usize, depth: usize, trials: usize, seed: u64) -> Result<Vec<[Acc; 3]>> {
    let parts = par_map(chunks(trials).len(), |c| -> Result<Vec<[Acc; 3]>> {
        let (_, n) = chunks(trials)[c];
        let mut rng = trial_stream(seed, c as u64);
        let mut acc = vec![[Acc::default(); 3]; depth];
        for _ in 0..n {
            let mut x = gaussian_vec(d, &mut rng);
            for a in acc.iter_mut() {
                for v in x.iter_mut() {
                    *v *= act.gate(*v);
                }
                let w = init.sample_entries(d, d * d, &mut rng)?;
                x = matvec(&w, &x);
                let s = MomentState::of_vector(&x);
                a[0].push(s.m2);
                a[1].push(s.m4_2);
                a[2].push(s.m4_4);
            }
        }
        Ok(acc)
    });
    let mut total = vec![[Acc::default(); 3]; depth];
    for p in parts {
        for (t, a) in total.iter_mut().zip(p?) {
            for j in 0..3 {
                t[j] = t[j].merge(a[j]);
            }
        }
    }
    Ok(total)
}

/// Forward moments of random networks against the closed-form recursion.
pub fn forward_moments(seed: u64) -> Result<CheckResult> {
    forward_moments_sized(seed, 100_000)
}

pub fn forward_moments_sized(seed: u64, trials: usize) -> Result<CheckResult> {
    let mut r = CheckResult::new("forward_moments", Some(1));
    let depth = 12;
    let mut worst: f64 = 0.0;
    let mut case = 0u64;
    for act in [ActivationKind::Linear, ActivationKind::Relu] {
        for d in [3usize, 10] {
            let mut preds = Vec::new();
            for fam in ["uniform", "gaussian"] {
                let rule = if act == ActivationKind::Linear { "xavier" } else { "he" };
                let init = scheme(&format!("{fam}:{rule}"));
                let prof = init.profile(d)?;
                let acc = forward_chain_moments(&init, act, d, depth, trials, sub_seed(seed, case))?;
                case += 1;
                let mut zmax: f64 = 0.0;
                for (k, a) in acc.iter().enumerate() {
                    let th = theory::forward_moments(MomentState::gaussian_input(d), d, prof.sigma2, prof.kappa, act.p(), k + 1)?;
                    for (j, t) in [th.m2, th.m4_2, th.m4_4].into_iter().enumerate() {
                        zmax = zmax.max(a[j].z(t));
                    }
                }
                let th12 = theory::forward_moments(MomentState::gaussian_input(d), d, prof.sigma2, prof.kappa, act.p(), depth)?;
                preds.push(th12.m4_4);
                r.metric(format!("{fam}_{}_d{d}_max_z", act.name()), zmax);
                r.require(zmax <= 5.0, format!("{fam} {} d={d}: max |z| {zmax:.2} <= 5", act.name()));
                worst = worst.max(zmax);
            }
            let shift = relative_slack(preds[0], preds[1]);
            r.metric(format!("kurtosis_shift_{}_d{d}", act.name()), shift);
            r.require(shift > 1e-3, format!("{} d={d}: uniform and Gaussian predictions differ by {:.1}%", act.name(), 100.0 * shift));
        }
    }
    r.metric("worst_z", worst);
    Ok(r)
}

// ---------------------------------------------------------------------------
// Criteria 2 and 3

/// Empirical law of `-ln v` for products of scaled uniforms.
pub fn erlang_law(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("erlang_law", Some(2));
    let n = 100_000;
    let mut case = 0;
    for tau in [3f64.sqrt(), 2.0] {
        for l in [1usize, 8, 64] {
            let parts = par_map(chunks(n).len(), |c| -> Result<Vec<f64>> {
                let mut rng = trial_stream(sub_seed(seed, case), c as u64);
                (0..chunks(n)[c].1).map(|_| chain::sample_forward(l, tau, &mut rng).map(|p| -p.log_abs)).collect()
            });
            case += 1;
            let xs: Vec<f64> = parts.into_iter().collect::<Result<Vec<_>>>()?.concat();
            let ks = stats::ks_distance(&xs, |z| theory::chain_log_cdf(tau, l, z).unwrap_or(f64::NAN));
            r.metric(format!("ks_tau{tau:.4}_L{l}"), ks);
            r.require(ks < 0.01, format!("tau={tau:.3} L={l}: KS {ks:.4} < 0.01"));
        }
    }
    Ok(r)
}

/// `ln v` for `v = prod_k tau u_k`, `u_k ~ U(0,1]`, multiplying up to 64
/// uniforms before each logarithm.
fn log_uniform_product(depth: usize, tau: f64, rng: &mut Rng) -> f64 {
    let mut s = depth as f64 * tau.ln();
    let mut prod = 1.0;
    for i in 0..depth {
        prod *= 1.0 - rng.random::<f64>();
        if i % 64 == 63 {
            s += prod.ln();
            prod = 1.0;
        }
    }
    s + prod.ln()
}

/// Empirical medians of chain products against the closed-form bracket.
pub fn median_bracket(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("median_bracket", Some(3));
    let n = 100_000;
    let taus = [3f64.sqrt(), 2.0, E];
    let cases: Vec<(usize, f64)> = taus.iter().flat_map(|&t| (1..=128).map(move |l| (l, t))).collect();
    let medians = par_map(cases.len(), |i| {
        let (l, tau) = cases[i];
        let mut rng = trial_stream(seed, i as u64);
        let mut xs: Vec<f64> = (0..n).map(|_| log_uniform_product(l, tau, &mut rng)).collect();
        median_of(&mut xs)
    });
    let mut outside = Vec::new();
    let mut band_ok = true;
    let (mut band_lo, mut band_hi) = (f64::INFINITY, 0.0f64);
    for (&(l, tau), &lm) in cases.iter().zip(&medians) {
        let (lo, hi) = theory::chain_median_bounds(tau, l)?;
        if !(lm >= lo.ln() && lm <= hi.ln()) {
            outside.push((l, tau, lm - hi.ln()));
        }
        if tau == E {
            let m = lm.exp();
            band_lo = band_lo.min(m);
            band_hi = band_hi.max(m);
            band_ok &= (0.3..=1.5).contains(&m);
        }
    }
    // Sampling check against the exact Erlang median, in standard errors
    // of a sample median (`1 / (2 f(m) sqrt(n))`).
    let mut zmax: f64 = 0.0;
    for (&(l, tau), &lm) in cases.iter().zip(&medians) {
        let m = theory::erlang_median(l)?;
        let ln_fact: f64 = (1..l).map(|k| (k as f64).ln()).sum();
        let density = ((l as f64 - 1.0) * m.ln() - m - ln_fact).exp();
        let se = 1.0 / (2.0 * density * (n as f64).sqrt());
        zmax = zmax.max(((l as f64 * tau.ln() - lm) - m).abs() / se);
    }
    r.metric("max_z_vs_erlang_median", zmax);
    r.metric("outside_above", outside.iter().filter(|o| o.2 > 0.0).count() as f64);
    let smallest = outside.iter().map(|o| o.0).min().unwrap_or(0);
    r.metric("cases", cases.len() as f64);
    r.metric("outside_bracket", outside.len() as f64);
    r.metric("smallest_depth_outside", smallest as f64);
    r.metric("tau_e_median_min", band_lo);
    r.metric("tau_e_median_max", band_hi);
    r.require(outside.is_empty(), format!("{} of {} medians inside the bracket (first miss at L={smallest})", cases.len() - outside.len(), cases.len()));
    r.require(band_ok, format!("tau=e medians within [{band_lo:.3}, {band_hi:.3}] inside [0.3, 1.5]"));
    Ok(r)
}

// ---------------------------------------------------------------------------
// Criterion 4 and chain hollowness

struct ChainLogStats {
    depths: Vec<f64>,
    grad: Vec<f64>,
    diag: Vec<f64>,
    offdiag: Vec<f64>,
}

/// Medians over seeds of the log-derivatives of random chains.
fn chain_log_medians(tau: f64, depths: &[usize], seeds: usize, seed: u64) -> Result<ChainLogStats> {
    let mut out = ChainLogStats { depths: Vec::new(), grad: Vec::new(), diag: Vec::new(), offdiag: Vec::new() };
    for (i, &l) in depths.iter().enumerate() {
        let s = sub_seed(seed, i as u64);
        let lds = par_map(seeds, |t| -> Result<chain::LogDerivatives> {
            let mut rng = trial_stream(s, t as u64);
            ChainParams::sample(l, tau, vec![(1.0, 1.0)], &mut rng)?.log_derivatives(0, 1)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        out.depths.push(l as f64);
        out.grad.push(median_of(&mut lds.iter().map(|d| d.grad).collect::<Vec<_>>()));
        out.diag.push(median_of(&mut lds.iter().map(|d| d.hess_diag).collect::<Vec<_>>()));
        out.offdiag.push(median_of(&mut lds.iter().map(|d| d.hess_offdiag).collect::<Vec<_>>()));
    }
    Ok(out)
}

/// Depth slopes of chain gradient and diagonal Hessian log-magnitudes.
pub fn chain_slopes(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("chain_slopes", Some(4));
    let tau = 3f64.sqrt();
    let s = chain_log_medians(tau, &[8, 16, 32, 64], 10_000, seed)?;
    let g = stats::fit_line(&s.depths, &s.grad)?.0;
    let h = stats::fit_line(&s.depths, &s.diag)?.0;
    let target = -(1.0 - tau.ln());
    r.metric("grad_slope", g);
    r.metric("grad_slope_target", target);
    r.metric("diag_slope", h);
    r.require(relative_slack(g, target) <= 0.10, format!("gradient slope {g:.4} vs {target:.4} within 10%"));
    r.require(relative_slack(h, 2.0 * g) <= 0.15, format!("diagonal slope {h:.4} vs 2x{g:.4} within 15%"));
    Ok(r)
}

/// Diagonal versus off-diagonal chain Hessian slopes, and the gradient slope
/// at a second range.
pub fn chain_hollowness(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("chain_hollowness", None);
    let tau = 3f64.sqrt();
    let s = chain_log_medians(tau, &[8, 16, 32, 64], 10_000, sub_seed(seed, 0))?;
    let hd = stats::fit_line(&s.depths, &s.diag)?.0;
    let ho = stats::fit_line(&s.depths, &s.offdiag)?.0;
    r.metric("diag_slope", hd);
    r.metric("offdiag_slope", ho);
    r.require(relative_slack(hd, 2.0 * ho) <= 0.15, format!("diagonal slope {hd:.4} vs 2x off-diagonal {ho:.4} within 15%"));
    let ratio: Vec<f64> = s.diag.iter().zip(&s.offdiag).map(|(a, b)| a - b).collect();
    let decays = ratio.windows(2).all(|w| w[1] < w[0]);
    r.require(decays, "median diagonal/off-diagonal ratio decays with depth");
    let s2 = chain_log_medians(2.0, &[8, 16, 32, 64], 10_000, sub_seed(seed, 1))?;
    let g2 = stats::fit_line(&s2.depths, &s2.grad)?.0;
    let t2 = -(1.0 - 2f64.ln());
    r.metric("grad_slope_tau2", g2);
    r.require(relative_slack(g2, t2) <= 0.10, format!("tau=2 gradient slope {g2:.4} vs {t2:.4} within 10%"));
    Ok(r)
}

// ---------------------------------------------------------------------------
// Criterion 5 and ReLU Hessians

fn fd_chain_gradient(c: &ChainParams) -> Vec<f64> {
    let mut probe = c.clone();
    (0..c.depth())
        .map(|k| {
            let h = 1e-6 * c.weights[k].abs().max(1.0);
            probe.weights[k] = c.weights[k] + h;
            let lp = probe.loss();
            probe.weights[k] = c.weights[k] - h;
            let lm = probe.loss();
            probe.weights[k] = c.weights[k];
            (lp - lm) / (2.0 * h)
        })
        .collect()
}

fn fd_chain_hessian(c: &ChainParams) -> DMatrix<f64> {
    let l = c.depth();
    let mut probe = c.clone();
    let mut h = DMatrix::zeros(l, l);
    for k in 0..l {
        let s = 1e-5 * c.weights[k].abs().max(1.0);
        probe.weights[k] = c.weights[k] + s;
        let gp = probe.gradient();
        probe.weights[k] = c.weights[k] - s;
        let gm = probe.gradient();
        probe.weights[k] = c.weights[k];
        for i in 0..l {
            h[(i, k)] = (gp[i] - gm[i]) / (2.0 * s);
        }
    }
    h
}

fn inf_rel(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let den = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    num / den
}

/// Generic chain point: weights of magnitude in `[0.5, 1.5]`, random signs,
/// three random data pairs.
fn generic_chain(l: usize, rng: &mut Rng) -> Result<ChainParams> {
    let w = (0..l).map(|_| rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let data = (0..3).map(|_| (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect();
    ChainParams::new(w, data)
}

/// Random MLP problem whose ReLU preactivations all stay away from zero.
fn generic_mlp(depth: usize, width: usize, act: ActivationKind, init: InitScheme, seed: u64) -> Result<(MlpState, Dataset)> {
    for attempt in 0..1000 {
        let mut rng = trial_stream(seed, attempt);
        let (st, ds) = mlp::random_problem(depth, width, act, init, DataModel { n: 4, d_in: Some(2), d_out: Some(2) }, &mut rng)?;
        let alive = st.gradient(&ds)?.iter().any(|g| g.amax() > 0.0);
        if act == ActivationKind::Linear || (st.min_abs_preactivation(&ds)? > 1e-4 && alive) {
            return Ok((st, ds));
        }
    }
    Err(Error::Domain("no generic point found".into()))
}

/// Central differences of the loss on `count` random entries against the
/// analytic gradient; returns `max |fd - g| / max |g|` over those entries.
fn mlp_gradient_fd_error(st: &MlpState, ds: &Dataset, count: usize, rng: &mut Rng) -> Result<f64> {
    let g = st.gradient_flat(ds)?;
    let p0 = st.params();
    let mut probe = st.clone();
    let mut fd = Vec::new();
    let mut an = Vec::new();
    for j in rand::seq::index::sample(rng, p0.len(), count.min(p0.len())).into_iter() {
        let h = 1e-6 * p0[j].abs().max(1.0);
        let mut p = p0.clone();
        p[j] = p0[j] + h;
        probe.set_params(&p)?;
        let lp = probe.loss(ds)?;
        p[j] = p0[j] - h;
        probe.set_params(&p)?;
        let lm = probe.loss(ds)?;
        fd.push((lp - lm) / (2.0 * h));
        an.push(g[j]);
    }
    Ok(inf_rel(&fd, &an))
}

/// Analytic derivatives against central finite differences.
pub fn derivative_oracles(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("derivative_oracles", Some(5));
    let mut rng = stream(sub_seed(seed, 0));
    let (mut g_err, mut h_err): (f64, f64) = (0.0, 0.0);
    for l in 2..=12 {
        for _ in 0..100 {
            let c = generic_chain(l, &mut rng)?;
            g_err = g_err.max(inf_rel(&fd_chain_gradient(&c), &c.gradient()));
            let ha = c.hessian();
            let hf = fd_chain_hessian(&c);
            h_err = h_err.max((&hf - &ha).amax() / ha.amax());
        }
    }
    r.metric("chain_gradient_rel_err", g_err);
    r.metric("chain_hessian_rel_err", h_err);
    r.require(g_err < 1e-6, format!("chain gradient rel err {g_err:.2e} < 1e-6"));
    r.require(h_err < 1e-5, format!("chain Hessian rel err {h_err:.2e} < 1e-5"));

    for (act, init, tol) in [(ActivationKind::Linear, "gaussian:xavier", 1e-6), (ActivationKind::Relu, "gaussian:he", 1e-5)] {
        let mut worst: f64 = 0.0;
        for (i, (l, d)) in [(3usize, 3usize), (4, 3), (6, 3), (4, 4), (5, 5)].into_iter().enumerate() {
            let (st, ds) = generic_mlp(l, d, act, scheme(init), sub_seed(seed, 10 + i as u64))?;
            let mut rr = stream(sub_seed(seed, 20 + i as u64));
            worst = worst.max(mlp_gradient_fd_error(&st, &ds, 50, &mut rr)?);
        }
        r.metric(format!("mlp_gradient_rel_err_{}", act.name()), worst);
        r.require(worst < tol, format!("{} MLP gradient rel err {worst:.2e} < {tol:e}", act.name()));
    }

    for (i, (l, d)) in [(4usize, 3usize), (6, 3), (4, 4)].into_iter().enumerate() {
        let (mut st, ds) = generic_mlp(l, d, ActivationKind::Linear, scheme("gaussian:xavier"), sub_seed(seed, 30 + i as u64))?;
        let ha = st.hessian(&ds, HessianMethod::Analytic)?;
        let hf = st.hessian(&ds, HessianMethod::FiniteDifference { h: 1e-5 })?;
        let err = (&ha - &hf).amax();
        let tol = 1e-6 * (1.0 + ha.amax());
        r.metric(format!("mlp_hessian_err_L{l}_d{d}"), err);
        r.require(err < tol, format!("linear MLP Hessian (L={l}, d={d}) max err {err:.2e} < {tol:.2e}"));
    }
    Ok(r)
}

/// Frozen-gate ReLU Hessian against finite differences at generic points.
pub fn relu_hessian(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("relu_hessian", None);
    for (i, (l, d)) in [(3usize, 3usize), (4, 3), (3, 4)].into_iter().enumerate() {
        let (mut st, ds) = generic_mlp(l, d, ActivationKind::Relu, scheme("gaussian:he"), sub_seed(seed, i as u64))?;
        let ha = st.hessian(&ds, HessianMethod::Analytic)?;
        let hf = st.hessian(&ds, HessianMethod::FiniteDifference { h: 1e-6 })?;
        let err = (&ha - &hf).amax();
        let tol = 1e-6 * (1.0 + ha.amax());
        r.metric(format!("relu_hessian_err_L{l}_d{d}"), err);
        r.require(err < tol, format!("ReLU Hessian (L={l}, d={d}) max err {err:.2e} < {tol:.2e}"));
        let asym = (&ha - ha.transpose()).amax();
        r.require(asym < 1e-10, format!("symmetric to {asym:.1e}"));
    }
    Ok(r)
}

// ---------------------------------------------------------------------------
// Criteria 6 and 7

/// Data model of the Hessian scans: scalar input and output.
pub const SCAN_DATA: DataModel = DataModel { n: 16, d_in: Some(1), d_out: Some(1) };

struct BlockStats {
    diag: f64,
    offdiag: f64,
    hollowness: f64,
}

fn block_stats(l: usize, d: usize, init: InitScheme, seed: u64) -> Result<BlockStats> {
    let (st, ds) = mlp::random_problem(l, d, ActivationKind::Linear, init, SCAN_DATA, &mut stream(seed))?;
    let hb = st.hessian_blocks(&ds)?;
    Ok(BlockStats { diag: harness_mean_log(&hb.diag_norms()), offdiag: harness_mean_log(&hb.offdiag_norms()), hollowness: hb.hollowness() })
}

fn harness_mean_log(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64
}

/// Depth slopes of Hessian block norms for LeCun linear networks with `d = L`.
pub fn hessian_scaling(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("hessian_scaling", Some(6));
    let init = scheme("uniform:lecun");
    let depths: Vec<usize> = (4..=12).collect();
    let seeds = 20;
    let (mut xs, mut dm, mut om, mut hm) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, &l) in depths.iter().enumerate() {
        let s = sub_seed(seed, i as u64);
        let bs = par_map(seeds, |t| block_stats(l, l, init, sub_seed(s, t as u64))).into_iter().collect::<Result<Vec<_>>>()?;
        xs.push(l as f64);
        dm.push(stats::mean(&bs.iter().map(|b| b.diag).collect::<Vec<_>>()));
        om.push(stats::mean(&bs.iter().map(|b| b.offdiag).collect::<Vec<_>>()));
        hm.push(median_of(&mut bs.iter().map(|b| b.hollowness).collect::<Vec<_>>()));
    }
    let sd = stats::fit_line(&xs, &dm)?.0;
    let so = stats::fit_line(&xs, &om)?.0;
    let td = (1.0f64 / 3.0).ln();
    r.metric("diag_slope", sd);
    r.metric("offdiag_slope", so);
    for (l, h) in depths.iter().zip(&hm) {
        r.metric(format!("median_hollowness_L{l}"), *h);
    }
    r.require(relative_slack(sd, td) <= 0.2, format!("diagonal slope {sd:.4} vs {td:.4} within 20%"));
    r.require(relative_slack(so, 0.5 * td) <= 0.2, format!("off-diagonal slope {so:.4} vs {:.4} within 20%", 0.5 * td));
    let dec = hm.windows(2).all(|w| w[1] < w[0]);
    r.require(dec, "median hollowness strictly decreasing in L");
    Ok(r)
}

struct SpectrumStats {
    both_signs: bool,
    trace_ratio: f64,
    gershgorin: bool,
}

fn spectrum_stats(l: usize, d: usize, seed: u64) -> Result<SpectrumStats> {
    let (st, ds) = mlp::random_problem(l, d, ActivationKind::Linear, scheme("uniform:lecun"), SCAN_DATA, &mut stream(seed))?;
    let hb = st.hessian_blocks(&ds)?;
    let h = hb.assemble();
    let eig = mlp::eigenspectrum(&h)?;
    let (max, min) = (eig[0], eig[eig.len() - 1]);
    let discs = linalg::gershgorin_discs(&h);
    Ok(SpectrumStats {
        both_signs: max > 0.0 && min < 0.0,
        trace_ratio: hb.trace().abs() / max,
        gershgorin: linalg::within_gershgorin(&eig, &discs, 1e-9 * (1.0 + h.amax())),
    })
}

/// Sign structure, trace ratio and Gershgorin containment of Hessian spectra.
pub fn spectrum(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("spectrum", Some(7));
    let seeds = 10;
    let mut all = Vec::new();
    let mut medians = Vec::new();
    for (i, l) in [8usize, 4, 12].into_iter().enumerate() {
        let s = sub_seed(seed, i as u64);
        let ss = par_map(seeds, |t| spectrum_stats(l, l, sub_seed(s, t as u64))).into_iter().collect::<Result<Vec<_>>>()?;
        if l == 8 {
            let both = ss.iter().filter(|x| x.both_signs).count();
            r.metric("both_signs_L8", both as f64);
            r.require(both >= 9, format!("both signs in {both}/10 spectra at d=L=8"));
        } else {
            let m = median_of(&mut ss.iter().map(|x| x.trace_ratio).collect::<Vec<_>>());
            r.metric(format!("median_trace_ratio_L{l}"), m);
            medians.push(m);
        }
        all.extend(ss);
    }
    r.require(medians[1] < medians[0], format!("median |trace|/lambda_max {:.3e} (L=12) < {:.3e} (L=4)", medians[1], medians[0]));
    let g = all.iter().all(|x| x.gershgorin);
    r.require(g, format!("all {} spectra inside their Gershgorin discs", all.len()));
    Ok(r)
}

// ---------------------------------------------------------------------------
// Criterion 8 and orthogonal init

/// Mean over seeds of `ln ||grad||` (networks with zero gradient excluded)
/// per depth, and the number of excluded networks.
fn gradient_log_norms(depths: &[usize], width: impl Fn(usize) -> usize, act: ActivationKind, init: InitScheme, seeds: usize, seed: u64) -> Result<(Vec<f64>, usize)> {
    let mut out = Vec::new();
    let mut dead = 0;
    for (i, &l) in depths.iter().enumerate() {
        let d = width(l);
        let s = sub_seed(seed, i as u64);
        let norms = par_map(seeds, |t| -> Result<f64> {
            let (st, ds) = mlp::random_problem(l, d, act, init, SCAN_DATA, &mut trial_stream(s, t as u64))?;
            Ok(GradientStats::from_layers(&st.gradient(&ds)?).total_norm)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let alive: Vec<f64> = norms.iter().filter(|&&n| n > 0.0).map(|n| n.ln()).collect();
        dead += norms.len() - alive.len();
        out.push(stats::mean(&alive));
    }
    Ok((out, dead))
}

fn ceil_sqrt(l: usize) -> usize {
    (l as f64).sqrt().ceil() as usize
}

/// Gradient-norm depth slopes of He ReLU networks at two width rules.
pub fn width_effect(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("width_effect", Some(8));
    let depths = [16usize, 36, 64];
    let xs: Vec<f64> = depths.iter().map(|&l| l as f64).collect();
    let init = scheme("gaussian:he");
    let (wide, dead_w) = gradient_log_norms(&depths, |l| l, ActivationKind::Relu, init, 200, sub_seed(seed, 0))?;
    let (narrow, dead_n) = gradient_log_norms(&depths, ceil_sqrt, ActivationKind::Relu, init, 200, sub_seed(seed, 1))?;
    let sw = stats::fit_line(&xs, &wide)?.0;
    let sn = stats::fit_line(&xs, &narrow)?.0;
    r.metric("slope_d_eq_L", sw);
    r.metric("slope_d_eq_sqrtL", sn);
    r.metric("dead_d_eq_L", dead_w as f64);
    r.metric("dead_d_eq_sqrtL", dead_n as f64);
    r.require(sw.abs() <= 0.05, format!("d=L slope {sw:.4} within +-0.05"));
    r.require(sn < -0.05, format!("d=ceil(sqrt L) slope {sn:.4} < -0.05"));
    Ok(r)
}

/// Orthogonal linear networks keep gradient norms flat at `d = ceil(sqrt L)`.
pub fn orthogonal_flat(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("orthogonal_flat", None);
    let depths = [16usize, 36, 64];
    let xs: Vec<f64> = depths.iter().map(|&l| l as f64).collect();
    let (ys, _) = gradient_log_norms(&depths, ceil_sqrt, ActivationKind::Linear, scheme("orthogonal"), 50, seed)?;
    let s = stats::fit_line(&xs, &ys)?.0;
    r.metric("slope", s);
    r.require(s.abs() <= 0.05, format!("orthogonal d=ceil(sqrt L) slope {s:.4} within +-0.05"));
    Ok(r)
}

// ---------------------------------------------------------------------------
// Criterion 9

/// Escape steps over seeds; `None` when the threshold was never crossed.
fn escapes(starts: &[ChainParams], spec: &OptimizerSpec, max_steps: usize, threshold: f64, seed: u64) -> Result<Vec<Option<usize>>> {
    par_map(starts.len(), |i| chain::escape_steps(&starts[i], spec, max_steps, threshold, &mut trial_stream(seed, i as u64))).into_iter().collect()
}

/// Median with non-escaping runs counted as infinitely slow.
fn median_steps(xs: &[Option<usize>]) -> f64 {
    median_of(&mut xs.iter().map(|x| x.map_or(f64::INFINITY, |v| v as f64)).collect::<Vec<_>>())
}

fn max_steps_of(xs: &[Option<usize>]) -> f64 {
    xs.iter().map(|x| x.map_or(f64::INFINITY, |v| v as f64)).fold(0.0, f64::max)
}

/// RMSprop, GD and perturbed GD on deep scalar chains.
pub fn chain_optimizers(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("chain_optimizers", Some(9));
    let (depth, seeds, max_steps, thr) = (10, 20, 100_000, 0.1);
    let starts: Vec<ChainParams> = (0..seeds)
        .map(|t| ChainParams::sample(depth, 0.2, vec![(1.0, 1.0)], &mut trial_stream(sub_seed(seed, 0), t as u64)))
        .collect::<Result<_>>()?;
    let g0: Vec<f64> = starts.iter().map(|c| c.gradient().iter().fold(0.0f64, |a, b| a.max(b.abs()))).collect();
    let g0m = median_of(&mut g0.clone());
    r.metric("initial_grad_inf_median", g0m);
    r.require((1e-10..=1e-6).contains(&g0m), format!("median initial gradient inf-norm {g0m:.2e} in [1e-10, 1e-6]"));

    let grid = chain::chain_lr_grid();
    // RMSprop: pick the rate with the fewest failures, then the smallest worst case.
    let mut best: Option<(f64, Vec<Option<usize>>)> = None;
    for (i, &lr) in grid.iter().enumerate() {
        let e = escapes(&starts, &OptimizerSpec::rmsprop(lr, 0.9), max_steps, thr, sub_seed(seed, 100 + i as u64))?;
        let key = (e.iter().filter(|x| x.is_none()).count(), max_steps_of(&e));
        let better = match &best {
            None => true,
            Some((_, b)) => key < (b.iter().filter(|x| x.is_none()).count(), max_steps_of(b)),
        };
        if better {
            best = Some((lr, e));
        }
    }
    let (rms_lr, rms) = best.expect("non-empty grid");
    let rms_med = median_steps(&rms);
    let rms_max = max_steps_of(&rms);
    r.metric("rmsprop_lr", rms_lr);
    r.metric("rmsprop_median_steps", rms_med);
    r.metric("rmsprop_max_steps", rms_max);
    r.require(rms_max <= 2000.0, format!("RMSprop (lr={rms_lr:e}) escapes on all seeds within {rms_max} <= 2000 steps"));

    let mut gd_escapes = 0;
    for (i, &lr) in grid.iter().enumerate() {
        let e = escapes(&starts, &OptimizerSpec::gd(lr), max_steps, thr, sub_seed(seed, 200 + i as u64))?;
        gd_escapes += e.iter().filter(|x| x.is_some()).count();
    }
    r.metric("gd_escapes", gd_escapes as f64);
    r.require(gd_escapes == 0, format!("GD escapes in {gd_escapes} of {} runs within 1e5 steps", grid.len() * seeds));

    for (j, noise) in [0.05, 0.1, 0.5].into_iter().enumerate() {
        let mut best_med = f64::INFINITY;
        let mut best_lr = f64::NAN;
        for (i, &lr) in grid.iter().enumerate() {
            let e = escapes(&starts, &OptimizerSpec::perturbed_gd(lr, noise), max_steps, thr, sub_seed(seed, 300 + 100 * j as u64 + i as u64))?;
            let m = median_steps(&e);
            if m < best_med || best_lr.is_nan() {
                best_med = m;
                best_lr = lr;
            }
        }
        r.metric(format!("perturbed_gd_noise{noise}_lr"), best_lr);
        r.metric(format!("perturbed_gd_noise{noise}_median_steps"), best_med);
        r.require(best_med >= 10.0 * rms_med, format!("perturbed GD noise {noise}: best median {best_med} >= 10 x {rms_med}"));
    }

    let sym_depths = [5usize, 10, 20];
    let mut rms_sym = Vec::new();
    let mut gd_sym = Vec::new();
    for &l in &sym_depths {
        let c = ChainParams::symmetric(l, 0.5, vec![(1.0, 1.0)])?;
        let a = chain::escape_steps(&c, &OptimizerSpec::rmsprop(1e-3, 0.9), max_steps, thr, &mut stream(0))?;
        let b = chain::escape_steps(&c, &OptimizerSpec::gd(0.1), 1_000_000, thr, &mut stream(0))?;
        rms_sym.push(a.map_or(f64::INFINITY, |v| v as f64));
        gd_sym.push(b.map_or(f64::INFINITY, |v| v as f64));
        r.metric(format!("symmetric_rmsprop_steps_L{l}"), rms_sym[rms_sym.len() - 1]);
        r.metric(format!("symmetric_gd_steps_L{l}"), gd_sym[gd_sym.len() - 1]);
    }
    let ratio = rms_sym.iter().cloned().fold(0.0, f64::max) / rms_sym.iter().cloned().fold(f64::INFINITY, f64::min);
    r.metric("symmetric_rmsprop_ratio", ratio);
    r.require(ratio < 3.0, format!("RMSprop escape max/min over L=5,10,20 is {ratio:.3} < 3"));
    let xs: Vec<f64> = sym_depths.iter().map(|&l| l as f64).collect();
    let ys: Vec<f64> = gd_sym.iter().map(|s| s.ln()).collect();
    let slope = if ys.iter().all(|y| y.is_finite()) { stats::fit_line(&xs, &ys)?.0 } else { f64::NAN };
    r.metric("symmetric_gd_log_slope", slope);
    r.require(slope > 0.0, format!("GD log escape steps slope {slope:.3} > 0"));
    Ok(r)
}

// ---------------------------------------------------------------------------
// Criterion 10 and discretisation

/// The Euler flow stays below the blow-up envelope before `t_e`.
pub fn flow_bound(_seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("flow_bound", Some(10));
    for w0 in [0.3, 0.5] {
        for l in [4usize, 6, 10] {
            let b = theory::blowup(w0, l, 1.0)?;
            let expect = w0.powf(2.0 - l as f64) / (l as f64 - 2.0);
            r.require(b.t_e == expect, format!("w0={w0} L={l}: t_e {} == {expect}", b.t_e));
            let steps = 100_000;
            let dt = b.t_e / steps as f64;
            let path = chain::integrate_flow(w0, l, 1.0, 1.0, b.t_e - 0.5 * dt, dt, FlowMethod::Euler)?;
            let mut worst = f64::NEG_INFINITY;
            for (&t, &w) in path.times.iter().zip(&path.values) {
                if t < b.t_e {
                    worst = worst.max(w - b.at(t)?);
                }
            }
            r.metric(format!("w0{w0}_L{l}_max_excess"), worst);
            r.require(worst <= 0.0 && !path.blew_up, format!("w0={w0} L={l}: flow minus bound <= {worst:.2e}"));
        }
    }
    Ok(r)
}

/// GD on a symmetric chain follows the flow to first order in the step.
pub fn gd_tracks_flow(_seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("gd_tracks_flow", None);
    let (w0, l, horizon) = (0.5, 4usize, 4.0);
    let deviation = |eta: f64| -> Result<f64> {
        let steps = (horizon / eta).round() as usize;
        let c = ChainParams::symmetric(l, w0, vec![(1.0, 1.0)])?;
        let tr = chain::run_optimizer(&c, &OptimizerSpec::gd(eta), steps, true, &mut stream(0))?;
        let fine = 1e-4 * eta;
        let flow = chain::integrate_flow(w0, l, 1.0, 1.0, horizon, fine, FlowMethod::Rk4)?;
        let stride = (eta / fine).round() as usize;
        let ws = tr.weights.expect("recorded");
        Ok(ws.iter().enumerate().map(|(k, w)| (w[0] - flow.values[(k * stride).min(flow.values.len() - 1)]).abs()).fold(0.0, f64::max))
    };
    let d1 = deviation(0.02)?;
    let d2 = deviation(0.01)?;
    let ratio = d1 / d2;
    r.metric("deviation_eta", d1);
    r.metric("deviation_half_eta", d2);
    r.metric("ratio", ratio);
    r.require((2.0 / 1.5..=2.0 * 1.5).contains(&ratio), format!("halving the step scales the deviation by 1/{ratio:.3}"));
    Ok(r)
}

// ---------------------------------------------------------------------------
// Criterion 11 and conv/dense equivalence

fn conv_grad_norm(cfg: &ConvConfig, images: usize, seed: u64) -> Result<f64> {
    let mut rng = stream(seed);
    let net = ConvNet::sample(cfg, &mut rng)?;
    let x = conv::gaussian_images(cfg, images, &mut rng);
    Ok(net.gradient(&x)?.total_norm())
}

/// Linear MLP with identity boundary maps trained to reproduce its input.
fn identity_mlp_grad_norm(d: usize, l: usize, init: InitScheme, images: usize, seed: u64) -> Result<f64> {
    let mut rng = stream(seed);
    let w = (0..l).map(|_| init.sample_matrix(d, d, &mut rng)).collect::<Result<Vec<_>>>()?;
    let mut st = MlpState::from_matrices(DMatrix::identity(d, d), DMatrix::identity(d, d), w, ActivationKind::Linear)?;
    let xs: Vec<DVector<f64>> = (0..images).map(|_| DVector::from_vec(gaussian_vec(d, &mut rng))).collect();
    let ds = Dataset::new(xs.clone(), xs)?;
    st.prepare(&ds)?;
    Ok(GradientStats::from_layers(&st.gradient(&ds)?).total_norm)
}

/// Circulant equivalence, effective width, padding and path-sharing effects.
pub fn conv_properties(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("conv_properties", Some(11));
    let mut rng = stream(sub_seed(seed, 0));
    let mut worst: f64 = 0.0;
    for n in [3usize, 5, 8] {
        let cfg = ConvConfig {
            spatial: Spatial::Line { n },
            channels: 1,
            in_channels: 1,
            kernel: 3,
            padding: Padding::Circular,
            depth: 1,
            activation: ActivationKind::Linear,
            init: scheme("gaussian:xavier"),
        };
        let net = ConvNet::sample(&cfg, &mut rng)?;
        let k = conv::circulant_matrix(&net.kernels[0], n)?;
        let x = gaussian_vec(n, &mut rng);
        let y = net.forward(&x)?;
        let yk = &k * DVector::from_vec(x);
        worst = worst.max(y.iter().zip(yk.iter()).fold(0.0, |m, (a, b)| m.max((a - b).abs())));
    }
    r.metric("circulant_max_err", worst);
    r.require(worst <= 1e-12, format!("1-layer circular conv equals circulant product to {worst:.1e}"));

    let mut ew_ok = true;
    for c in 1..=16 {
        let cfg = ConvConfig {
            spatial: Spatial::Grid { r: 7 },
            channels: c,
            in_channels: 1,
            kernel: 3,
            padding: Padding::Zero,
            depth: 2,
            activation: ActivationKind::Relu,
            init: scheme("gaussian:he"),
        };
        ew_ok &= conv::effective_width(&cfg)? == 9 * c;
    }
    r.require(ew_ok, "effective width of 3x3 grid layers is 9c");

    let l = 32;
    let c = mlp::WidthRule::Linear { factor: 0.25 }.width(l)?;
    let mut med = Vec::new();
    for (j, padding) in [Padding::Zero, Padding::Circular].into_iter().enumerate() {
        let cfg = ConvConfig { spatial: Spatial::Grid { r: 7 }, channels: c, in_channels: 1, kernel: 3, padding, depth: l, activation: ActivationKind::Relu, init: scheme("gaussian:he") };
        let s = sub_seed(seed, 1 + j as u64);
        let mut norms = par_map(20, |t| conv_grad_norm(&cfg, 4, sub_seed(s, t as u64))).into_iter().collect::<Result<Vec<_>>>()?;
        med.push(median_of(&mut norms));
    }
    r.metric("median_grad_zero_padding", med[0]);
    r.metric("median_grad_circular_padding", med[1]);
    r.require(med[1] > med[0], format!("7x7, L=32, c={c}: circular median {:.3e} > zero median {:.3e}", med[1], med[0]));

    let init = scheme("uniform:xavier");
    let cnn = ConvConfig { spatial: Spatial::Line { n: 3 }, channels: 1, in_channels: 1, kernel: 3, padding: Padding::Circular, depth: 16, activation: ActivationKind::Linear, init };
    let s = sub_seed(seed, 3);
    let mut cn = par_map(20, |t| conv_grad_norm(&cnn, 4, sub_seed(s, t as u64))).into_iter().collect::<Result<Vec<_>>>()?;
    let s = sub_seed(seed, 4);
    let mut mn = par_map(20, |t| identity_mlp_grad_norm(3, 16, init, 4, sub_seed(s, t as u64))).into_iter().collect::<Result<Vec<_>>>()?;
    let (cm, mm) = (median_of(&mut cn), median_of(&mut mn));
    r.metric("median_grad_cnn_d3_L16", cm);
    r.metric("median_grad_mlp_d3_L16", mm);
    r.require(cm < mm, format!("d=3, L=16: CNN median {cm:.3e} < MLP median {mm:.3e}"));
    Ok(r)
}

/// Conv forward and gradient match the dense engine on block-circulant layers.
pub fn conv_dense_equivalence(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("conv_dense_equivalence", None);
    let mut rng = stream(seed);
    let mut worst: f64 = 0.0;
    for n in [3usize, 5, 8] {
        for depth in 1..=4 {
            let cfg = ConvConfig {
                spatial: Spatial::Line { n },
                channels: 2,
                in_channels: 2,
                kernel: 3,
                padding: Padding::Circular,
                depth,
                activation: ActivationKind::Linear,
                init: scheme("gaussian:xavier"),
            };
            let net = ConvNet::sample(&cfg, &mut rng)?;
            let images = conv::gaussian_images(&cfg, 3, &mut rng);
            let dim = 2 * n;
            let w: Vec<DMatrix<f64>> = (0..depth).map(|l| net.dense_layer(l)).collect();
            let mut st = MlpState::from_matrices(DMatrix::identity(dim, dim), DMatrix::identity(dim, dim), w, ActivationKind::Linear)?;
            let xs: Vec<DVector<f64>> = images.iter().map(|x| DVector::from_column_slice(x)).collect();
            let ds = Dataset::new(xs.clone(), xs)?;
            st.prepare(&ds)?;
            for (x, xv) in images.iter().zip(&ds.inputs) {
                let a = net.forward(x)?;
                let b = st.output(xv)?;
                worst = worst.max(a.iter().zip(b.iter()).fold(0.0, |m, (p, q)| m.max((p - q).abs())));
            }
            let gc = net.gradient(&images)?;
            let gm = st.gradient(&ds)?;
            for l in 0..depth {
                let gk = net.kernel_grad_from_dense(l, &gm[l]);
                let scale = gc.kernels[l].iter().fold(1.0f64, |m, v| m.max(v.abs()));
                worst = worst.max(gk.iter().zip(&gc.kernels[l]).fold(0.0, |m, (p, q)| m.max((p - q).abs() / scale)));
            }
        }
    }
    r.metric("max_err", worst);
    r.require(worst <= 1e-12, format!("forward and gradient agree to {worst:.1e}"));
    Ok(r)
}

// ---------------------------------------------------------------------------
// Criterion 12

fn small_specs() -> Vec<ExperimentSpec> {
    let mk = |kind: Kind, params: serde_json::Value, trials: usize| {
        let mut s = ExperimentSpec::new(kind, params).expect("object params");
        s.trials = trials;
        s.master_seed = 7;
        s
    };
    vec![
        mk(Kind::ChainScan, json!({"depths": [4, 16], "tau": 1.7320508075688772}), 16),
        mk(Kind::ChainTrain, json!({"depths": [4], "optimizers": [{"method": "rmsprop", "lr": 0.01, "beta2": 0.9}, {"method": "perturbed_gd", "lr": 0.1, "noise_std": 0.1}], "max_steps": 2000}), 4),
        mk(Kind::MlpScan, json!({"depths": [2, 3], "width_rule": {"rule": "constant", "width": 3}, "init": "uniform:lecun", "activation": "relu", "hessian": true}), 4),
        mk(Kind::MlpHessian, json!({"depths": [2, 3], "width_rule": {"rule": "constant", "width": 3}, "init": "gaussian:xavier", "activation": "linear"}), 3),
        mk(Kind::ConvScan, json!({"depths": [2, 3], "spatial": {"shape": "grid", "r": 4}, "padding": "zero", "channels": {"rule": "constant", "width": 2}, "hessian_samples": 4}), 3),
        mk(Kind::Verify, json!({"checks": ["flow_bound", "erlang_law"]}), 1),
    ]
}

/// Repeated runs with the same seed give byte-identical CSV for every kind,
/// across thread counts.
pub fn determinism(_seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("determinism", Some(12));
    for spec in small_specs() {
        let a = harness::csv_string(&harness::run(&spec, Some(1))?.rows)?;
        let b = harness::csv_string(&harness::run(&spec, Some(1))?.rows)?;
        let c = harness::csv_string(&harness::run(&spec, Some(3))?.rows)?;
        let errors = a.lines().filter(|l| l.contains(",error:")).count();
        r.require(a == b && a == c && errors == 0, format!("{}: identical across repeats and thread counts ({} bytes)", spec.kind.name(), a.len()));
    }
    Ok(r)
}

// ---------------------------------------------------------------------------
// Module-level Monte Carlo checks

/// Empirical moments of iid initialisation draws.
pub fn init_moments(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("init_moments", None);
    let n = 1_000_000;
    let d = 4;
    for (i, name) in ["uniform:xavier", "gaussian:he", "uniform:range=1.5", "gaussian:var=0.25", "uniform:lecun"].into_iter().enumerate() {
        let s = scheme(name);
        let prof = s.profile(d)?;
        let parts = par_map(chunks(n).len(), |c| -> Result<[Acc; 4]> {
            let mut rng = trial_stream(sub_seed(seed, i as u64), c as u64);
            let mut a = [Acc::default(); 4];
            for x in s.sample_entries(d, chunks(n)[c].1, &mut rng)? {
                a[0].push(x);
                a[1].push(x * x);
                a[2].push(x * x * x);
                a[3].push(x * x * x * x);
            }
            Ok(a)
        });
        let mut tot = [Acc::default(); 4];
        for p in parts {
            let p = p?;
            for j in 0..4 {
                tot[j] = tot[j].merge(p[j]);
            }
        }
        let z = [tot[0].z(0.0), tot[1].z(prof.sigma2), tot[2].z(0.0), tot[3].z(prof.mu4)];
        let zmax = z.iter().cloned().fold(0.0, f64::max);
        r.metric(format!("{name}_max_z"), zmax);
        r.require(zmax <= 5.0, format!("{name}: mean, variance, third and fourth moments within {zmax:.2} SE"));
    }
    Ok(r)
}

/// One random-matrix step from a fixed vector against the closed form.
pub fn matrix_step(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("matrix_step", None);
    let n = 1_000_000;
    let xi = [1.0, 1.0, 1.0];
    for (i, name) in ["uniform:xavier", "gaussian:xavier"].into_iter().enumerate() {
        let s = scheme(name);
        let prof = s.profile(3)?;
        let th = theory::one_layer_matrix_step(MomentState::of_vector(&xi), 3, prof.sigma2, prof.kappa)?;
        let parts = par_map(chunks(n).len(), |c| -> Result<[Acc; 3]> {
            let mut rng = trial_stream(sub_seed(seed, i as u64), c as u64);
            let mut a = [Acc::default(); 3];
            for _ in 0..chunks(n)[c].1 {
                let w = s.sample_entries(3, 9, &mut rng)?;
                let m = MomentState::of_vector(&matvec(&w, &xi));
                a[0].push(m.m2);
                a[1].push(m.m4_2);
                a[2].push(m.m4_4);
            }
            Ok(a)
        });
        let mut tot = [Acc::default(); 3];
        for p in parts {
            let p = p?;
            for j in 0..3 {
                tot[j] = tot[j].merge(p[j]);
            }
        }
        let zmax = [tot[0].z(th.m2), tot[1].z(th.m4_2), tot[2].z(th.m4_4)].into_iter().fold(0.0, f64::max);
        r.metric(format!("{name}_max_z"), zmax);
        r.require(zmax <= 5.0, format!("{name} d=3: moments of W xi within {zmax:.2} SE"));
    }
    Ok(r)
}

/// Frobenius norms of random matrix products against the closed form, and
/// against `d` times the image of a canonical vector.
pub fn frobenius_propagation(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("frobenius_propagation", None);
    let (d, span, n) = (3usize, 4usize, 100_000);
    let s = scheme("uniform:xavier");
    let prof = s.profile(d)?;
    let th = theory::frobenius_propagation(d, prof.sigma2, prof.kappa, 1.0, span, 2)?;
    let parts = par_map(chunks(n).len(), |c| -> Result<[Acc; 2]> {
        let mut rng = trial_stream(seed, c as u64);
        let mut a = [Acc::default(); 2];
        for _ in 0..chunks(n)[c].1 {
            let mut p = DMatrix::<f64>::identity(d, d);
            for _ in 0..span {
                p = s.sample_matrix(d, d, &mut rng)? * p;
            }
            let f = p.norm_squared();
            a[0].push(f);
            a[1].push(f - d as f64 * p.column(0).norm_squared());
        }
        Ok(a)
    });
    let tot = parts.into_iter().collect::<Result<Vec<_>>>()?.into_iter().fold([Acc::default(); 2], |t, p| [t[0].merge(p[0]), t[1].merge(p[1])]);
    let z1 = tot[0].z(th);
    let z2 = tot[1].z(0.0);
    r.metric("frobenius_z", z1);
    r.metric("canonical_z", z2);
    r.require(z1 <= 5.0, format!("mean ||W||_F^2 = {:.4} vs {th:.4} within {z1:.2} SE", tot[0].mean));
    r.require(z2 <= 5.0, format!("||W||_F^2 - d ||W e_1||^2 has mean within {z2:.2} SE of 0"));
    Ok(r)
}

fn sq_cov(pairs: &[(f64, f64)]) -> Acc {
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
    let mut a = Acc::default();
    for (x, y) in pairs {
        a.push((x - mx) * (y - my));
    }
    a
}

/// Preactivation statistics: symmetric odd moments, ReLU gates open half the
/// time once nonzero, and squared entries uncorrelated given the previous layer.
pub fn preactivation_statistics(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("preactivation_statistics", None);
    let (d, depth, n) = (10usize, 12usize, 100_000usize);
    for (i, (name, act)) in [("gaussian:he", ActivationKind::Relu), ("uniform:he", ActivationKind::Relu), ("gaussian:xavier", ActivationKind::Linear)].into_iter().enumerate() {
        let s = scheme(name);
        let parts = par_map(chunks(n).len(), |c| -> Result<Vec<[Acc; 3]>> {
            let mut rng = trial_stream(sub_seed(seed, i as u64), c as u64);
            let mut acc = vec![[Acc::default(); 3]; depth];
            for _ in 0..chunks(n)[c].1 {
                let mut x = gaussian_vec(d, &mut rng);
                for a in acc.iter_mut() {
                    for v in x.iter_mut() {
                        *v *= act.gate(*v);
                    }
                    x = matvec(&s.sample_entries(d, d * d, &mut rng)?, &x);
                    a[0].push(x[0]);
                    a[1].push(x[0].powi(3));
                    if x[0] != 0.0 {
                        a[2].push(if x[0] > 0.0 { 1.0 } else { 0.0 });
                    }
                }
            }
            Ok(acc)
        });
        let mut tot = vec![[Acc::default(); 3]; depth];
        for p in parts {
            for (t, a) in tot.iter_mut().zip(p?) {
                for j in 0..3 {
                    t[j] = t[j].merge(a[j]);
                }
            }
        }
        let odd = tot.iter().map(|a| a[0].z(0.0).max(a[1].z(0.0))).fold(0.0, f64::max);
        let gate = tot.iter().map(|a| (a[2].mean - 0.5).abs() / (0.5 / a[2].n.sqrt())).fold(0.0, f64::max);
        r.metric(format!("{name}_odd_max_z"), odd);
        r.metric(format!("{name}_gate_max_z"), gate);
        r.require(odd <= 5.0, format!("{name}: odd moments within {odd:.2} SE of 0 at every layer"));
        r.require(gate <= 5.0, format!("{name}: positive-preactivation frequency within {gate:.2} SE of 1/2"));
    }

    // Given the previous layer, coordinates of W h are independent.
    let mut rng = stream(sub_seed(seed, 10));
    let s = scheme("gaussian:he");
    let mut h = gaussian_vec(d, &mut rng);
    for _ in 0..5 {
        h = h.iter().map(|v| v.max(0.0)).collect();
        h = matvec(&s.sample_entries(d, d * d, &mut rng)?, &h);
    }
    let hin: Vec<f64> = h.iter().map(|v| v.max(0.0)).collect();
    let pairs: Vec<(f64, f64)> = par_map(chunks(n).len(), |c| -> Result<Vec<(f64, f64)>> {
        let mut rng = trial_stream(sub_seed(seed, 11), c as u64);
        (0..chunks(n)[c].1)
            .map(|_| {
                let a = matvec(&s.sample_entries(d, 2 * d, &mut rng)?, &hin);
                Ok((a[0] * a[0], a[1] * a[1]))
            })
            .collect()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?
    .concat();
    let cond = sq_cov(&pairs);
    let zc = cond.z(0.0);
    r.metric("conditional_sq_cov_z", zc);
    r.require(zc <= 5.0, format!("squared entries given the previous layer: covariance within {zc:.2} SE of 0"));

    // Unconditionally, after one Gaussian layer the covariance is 2 d sigma^4.
    let sx = scheme("gaussian:xavier");
    let sigma2 = sx.variance(d)?;
    let pairs: Vec<(f64, f64)> = par_map(chunks(n).len(), |c| -> Result<Vec<(f64, f64)>> {
        let mut rng = trial_stream(sub_seed(seed, 12), c as u64);
        (0..chunks(n)[c].1)
            .map(|_| {
                let z = gaussian_vec(d, &mut rng);
                let a = matvec(&sx.sample_entries(d, 2 * d, &mut rng)?, &z);
                Ok((a[0] * a[0], a[1] * a[1]))
            })
            .collect()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?
    .concat();
    let unc = sq_cov(&pairs);
    let target = 2.0 * d as f64 * sigma2 * sigma2;
    let zu = unc.z(target);
    r.metric("layer1_sq_cov", unc.mean);
    r.metric("layer1_sq_cov_target", target);
    r.require(zu <= 5.0, format!("layer-1 squared-entry covariance {:.4} vs 2 d sigma^4 = {target:.4} within {zu:.2} SE", unc.mean));
    Ok(r)
}

/// At the minimal width the median squared gain stays within `1 +- alpha`.
pub fn min_width_median(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("min_width_median", None);
    let n = 10_000;
    let s = scheme("gaussian:xavier");
    for (i, (alpha, l)) in [(1.0, 4usize), (0.5, 4), (0.5, 2)].into_iter().enumerate() {
        let d = theory::min_width_for_median(alpha, l)? as usize;
        let mut g = par_map(n, |t| -> Result<f64> {
            let mut rng = trial_stream(sub_seed(seed, i as u64), t as u64);
            let mut x = vec![0.0; d];
            x[0] = 1.0;
            for _ in 0..l {
                x = matvec(&s.sample_entries(d, d * d, &mut rng)?, &x);
            }
            Ok(x.iter().map(|v| v * v).sum())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let m = median_of(&mut g);
        r.metric(format!("alpha{alpha}_L{l}_width"), d as f64);
        r.metric(format!("alpha{alpha}_L{l}_median"), m);
        r.require((1.0 - alpha..=1.0 + alpha).contains(&m), format!("alpha={alpha} L={l} d={d}: median gain {m:.4} in [{}, {}]", 1.0 - alpha, 1.0 + alpha));
    }
    Ok(r)
}

/// The mean chain product at `tau = 2` is one, by bootstrap CI and by
/// median of means.
pub fn chain_mean(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("chain_mean", None);
    let (l, n, groups) = (10usize, 100_000usize, 20usize);
    let xs: Vec<f64> = par_map(chunks(n).len(), |c| -> Result<Vec<f64>> {
        let mut rng = trial_stream(seed, c as u64);
        (0..chunks(n)[c].1).map(|_| chain::sample_forward(l, 2.0, &mut rng).map(|p| p.log_abs.exp())).collect()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?
    .concat();
    let s = stats::summarize(&xs)?;
    let (_, se) = stats::mean_se(&xs);
    let mut gm: Vec<f64> = xs.chunks(n / groups).map(stats::mean).collect();
    let mom = median_of(&mut gm);
    let tol = 5.0 * se * (groups as f64).sqrt() * (std::f64::consts::PI / 2.0).sqrt() / (groups as f64).sqrt();
    r.metric("mean", s.mean);
    r.metric("ci95_low", s.ci95_low);
    r.metric("ci95_high", s.ci95_high);
    r.metric("median_of_means", mom);
    r.require(s.ci95_low <= 1.0 && 1.0 <= s.ci95_high, format!("bootstrap CI [{:.4}, {:.4}] covers 1", s.ci95_low, s.ci95_high));
    r.require((mom - 1.0).abs() <= tol, format!("median of {groups} group means {mom:.4} within {tol:.4} of 1"));
    Ok(r)
}

/// Percentile-bootstrap intervals for standard normal samples cover zero at
/// the nominal rate.
pub fn bootstrap_coverage(seed: u64) -> Result<CheckResult> {
    let mut r = CheckResult::new("bootstrap_coverage", None);
    let (reps, n) = (1000usize, 1000usize);
    let hits = par_map(reps, |i| -> Result<bool> {
        let mut rng = trial_stream(seed, i as u64);
        let xs = gaussian_vec(n, &mut rng);
        let s = stats::summarize_seeded(&xs, sub_seed(seed ^ 0xB007, i as u64))?;
        Ok(s.ci95_low <= 0.0 && 0.0 <= s.ci95_high)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?
    .into_iter()
    .filter(|&h| h)
    .count();
    r.metric("covered", hits as f64);
    r.require((925..=975).contains(&hits), format!("{hits}/1000 intervals cover 0 (950 +- 25)"));
    Ok(r)
}

