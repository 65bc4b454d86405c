//! Scalar neural chains `f(x) = w_L ... w_1 x` and optimizers on them.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Result};
use crate::rng::Rng;

/// Chain weights plus a regression dataset of `(x, y)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    pub weights: Vec<f64>,
    pub data: Vec<(f64, f64)>,
}

impl ChainParams {
    pub fn new(weights: Vec<f64>, data: Vec<(f64, f64)>) -> Result<Self> {
        if weights.is_empty() {
            return domain("chain depth must be at least 1");
        }
        if data.is_empty() {
            return invalid("chain dataset is empty");
        }
        Ok(ChainParams { weights, data })
    }

    /// Weights iid uniform on `[-tau, tau]`.
    pub fn sample(depth: usize, tau: f64, data: Vec<(f64, f64)>, rng: &mut Rng) -> Result<Self> {
        if !(tau > 0.0) {
            return domain("tau must be positive");
        }
        let w = (0..depth).map(|_| rng.random_range(-tau..tau)).collect();
        Self::new(w, data)
    }

    /// All weights equal to `w0`.
    pub fn symmetric(depth: usize, w0: f64, data: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(vec![w0; depth], data)
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn product(&self) -> f64 {
        self.weights.iter().product()
    }

    /// `(1/2n) sum (y - P x)^2`
    pub fn loss(&self) -> f64 {
        let p = self.product();
        let n = self.data.len() as f64;
        self.data.iter().map(|(x, y)| (y - p * x).powi(2)).sum::<f64>() / (2.0 * n)
    }

    /// `(1/n) sum (P x - y) x`
    fn residual_moment(&self, p: f64) -> f64 {
        let n = self.data.len() as f64;
        self.data.iter().map(|(x, y)| (p * x - y) * x).sum::<f64>() / n
    }

    fn mean_x2(&self) -> f64 {
        self.data.iter().map(|(x, _)| x * x).sum::<f64>() / self.data.len() as f64
    }

    /// Products of all weights but one, via prefix and suffix products.
    fn skip_products(&self) -> Vec<f64> {
        let l = self.depth();
        let mut suffix = vec![1.0; l + 1];
        for k in (0..l).rev() {
            suffix[k] = suffix[k + 1] * self.weights[k];
        }
        let mut out = Vec::with_capacity(l);
        let mut prefix = 1.0;
        for k in 0..l {
            out.push(prefix * suffix[k + 1]);
            prefix *= self.weights[k];
        }
        out
    }

    pub fn gradient(&self) -> Vec<f64> {
        let r = self.residual_moment(self.product());
        self.skip_products().into_iter().map(|pk| r * pk).collect()
    }

    /// Full Hessian of the loss.
    pub fn hessian(&self) -> DMatrix<f64> {
        let l = self.depth();
        let p = self.product();
        let r = self.residual_moment(p);
        let x2 = self.mean_x2();
        let pk = self.skip_products();
        let mut prefix = vec![1.0; l + 1];
        let mut suffix = vec![1.0; l + 1];
        for k in 0..l {
            prefix[k + 1] = prefix[k] * self.weights[k];
        }
        for k in (0..l).rev() {
            suffix[k] = suffix[k + 1] * self.weights[k];
        }
        let mut h = DMatrix::zeros(l, l);
        for k in 0..l {
            h[(k, k)] = x2 * pk[k] * pk[k];
            let mut mid = 1.0;
            for m in k + 1..l {
                let pkm = prefix[k] * mid * suffix[m + 1];
                let v = x2 * pk[k] * pk[m] + r * pkm;
                h[(k, m)] = v;
                h[(m, k)] = v;
                mid *= self.weights[m];
            }
        }
        h
    }

    /// `ln|.|` of gradient entry `k`, diagonal Hessian entry `(k,k)` and
    /// off-diagonal entry `(k,m)`, computed without forming the products.
    pub fn log_derivatives(&self, k: usize, m: usize) -> Result<LogDerivatives> {
        let l = self.depth();
        if k >= l || m >= l || k == m {
            return invalid("need two distinct weight indices");
        }
        let logs: Vec<f64> = self.weights.iter().map(|w| w.abs().ln()).collect();
        let total: f64 = logs.iter().sum();
        let sign: f64 = self.weights.iter().map(|w| w.signum()).product();
        let p = sign * total.exp();
        let r = self.residual_moment(p);
        let x2 = self.mean_x2();
        let lk = total - logs[k];
        let lkm = lk - logs[m];
        Ok(LogDerivatives {
            grad: lk + r.abs().ln(),
            hess_diag: 2.0 * lk + x2.ln(),
            hess_offdiag: lkm + (p * x2 + r).abs().ln(),
        })
    }
}

/// Log-magnitudes of selected chain derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogDerivatives {
    pub grad: f64,
    pub hess_diag: f64,
    pub hess_offdiag: f64,
}

/// `ln|w_L ... w_1|` and its sign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogProduct {
    pub log_abs: f64,
    pub sign: f64,
}

/// One forward draw of a chain with weights uniform on `[-tau, tau]`.
pub fn sample_forward(depth: usize, tau: f64, rng: &mut Rng) -> Result<LogProduct> {
    if depth == 0 {
        return domain("chain depth must be at least 1");
    }
    if !(tau > 0.0) {
        return domain("tau must be positive");
    }
    let mut la = 0.0;
    let mut sign = 1.0;
    for _ in 0..depth {
        let w: f64 = rng.random_range(-tau..tau);
        la += w.abs().ln();
        if w < 0.0 {
            sign = -sign;
        }
    }
    Ok(LogProduct { log_abs: la, sign })
}

// ---------------------------------------------------------------------------
// Optimizers

/// Learning rates of the network-training grid.
pub const LR_GRID: [f64; 11] = [1e-3, 5e-4, 1e-4, 5e-5, 1e-5, 5e-6, 1e-6, 5e-7, 1e-7, 5e-8, 1e-8];

/// Larger rates added for chains, whose gradients start many orders smaller.
pub const CHAIN_LR_EXTENSION: [f64; 4] = [1e-1, 5e-2, 1e-2, 5e-3];

/// [`CHAIN_LR_EXTENSION`] followed by [`LR_GRID`].
pub fn chain_lr_grid() -> Vec<f64> {
    CHAIN_LR_EXTENSION.iter().chain(LR_GRID.iter()).copied().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gd,
    PerturbedGd,
    Sgd,
    Rmsprop,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    None,
    /// `lr / sqrt(step + 1)`
    InvSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSpec {
    pub method: Method,
    pub lr: f64,
    /// Standard deviation of the Gaussian perturbation (perturbed GD only).
    pub noise_std: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: Decay,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec { method: Method::Gd, lr: 1e-3, noise_std: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay: Decay::None }
    }
}

impl OptimizerSpec {
    pub fn gd(lr: f64) -> Self {
        OptimizerSpec { method: Method::Gd, lr, ..Default::default() }
    }

    pub fn perturbed_gd(lr: f64, noise_std: f64) -> Self {
        OptimizerSpec { method: Method::PerturbedGd, lr, noise_std, ..Default::default() }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerSpec { method: Method::Sgd, lr, ..Default::default() }
    }

    pub fn rmsprop(lr: f64, beta2: f64) -> Self {
        OptimizerSpec { method: Method::Rmsprop, lr, beta2, ..Default::default() }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerSpec { method: Method::Adam, lr, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return domain(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.noise_std >= 0.0) {
            return domain("noise_std must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return domain("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return domain("eps must be positive");
        }
        Ok(())
    }
}

/// Stepping state of one optimizer run.
pub struct Optimizer {
    spec: OptimizerSpec,
    params: ChainParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Optimizer {
    pub fn new(params: ChainParams, spec: OptimizerSpec) -> Result<Self> {
        spec.validate()?;
        let l = params.depth();
        Ok(Optimizer { spec, params, m: vec![0.0; l], v: vec![0.0; l], t: 0 })
    }

    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    fn lr(&self) -> f64 {
        match self.spec.decay {
            Decay::None => self.spec.lr,
            Decay::InvSqrt => self.spec.lr / ((self.t + 1) as f64).sqrt(),
        }
    }

    /// One update. Returns false if the weights left the finite range.
    pub fn step(&mut self, rng: &mut Rng) -> bool {
        let lr = self.lr();
        let s = self.spec;
        let g = match s.method {
            Method::Sgd => {
                let i = rng.random_range(0..self.params.data.len());
                let one = ChainParams { weights: self.params.weights.clone(), data: vec![self.params.data[i]] };
                one.gradient()
            }
            _ => self.params.gradient(),
        };
        let w = &mut self.params.weights;
        match s.method {
            Method::Gd | Method::Sgd => {
                for (wi, gi) in w.iter_mut().zip(&g) {
                    *wi -= lr * gi;
                }
            }
            Method::PerturbedGd => {
                for (wi, gi) in w.iter_mut().zip(&g) {
                    let xi: f64 = StandardNormal.sample(rng);
                    *wi -= lr * (gi + s.noise_std * xi);
                }
            }
            Method::Rmsprop => {
                for k in 0..w.len() {
                    self.v[k] = s.beta2 * self.v[k] + (1.0 - s.beta2) * g[k] * g[k];
                    w[k] -= lr * g[k] / (self.v[k].sqrt() + s.eps);
                }
            }
            Method::Adam => {
                let t = (self.t + 1) as i32;
                let c1 = 1.0 - s.beta1.powi(t);
                let c2 = 1.0 - s.beta2.powi(t);
                for k in 0..w.len() {
                    self.m[k] = s.beta1 * self.m[k] + (1.0 - s.beta1) * g[k];
                    self.v[k] = s.beta2 * self.v[k] + (1.0 - s.beta2) * g[k] * g[k];
                    w[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + s.eps);
                }
            }
        }
        self.t += 1;
        w.iter().all(|x| x.is_finite())
    }
}

/// Loss and gradient history of an optimizer run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub losses: Vec<f64>,
    pub grad_inf: Vec<f64>,
    pub weights: Option<Vec<Vec<f64>>>,
    /// Set when the run stopped early on a non-finite value.
    pub diverged: bool,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

/// Run `steps` updates, recording the state before the first and after every step.
pub fn run_optimizer(params0: &ChainParams, spec: &OptimizerSpec, steps: usize, record_weights: bool, rng: &mut Rng) -> Result<Trajectory> {
    let mut opt = Optimizer::new(params0.clone(), *spec)?;
    let mut tr = Trajectory {
        losses: Vec::with_capacity(steps + 1),
        grad_inf: Vec::with_capacity(steps + 1),
        weights: record_weights.then(Vec::new),
        diverged: false,
    };
    let record = |p: &ChainParams, tr: &mut Trajectory| -> bool {
        let loss = p.loss();
        tr.losses.push(loss);
        tr.grad_inf.push(inf_norm(&p.gradient()));
        if let Some(ws) = tr.weights.as_mut() {
            ws.push(p.weights.clone());
        }
        loss.is_finite()
    };
    if !record(opt.params(), &mut tr) {
        tr.diverged = true;
        return Ok(tr);
    }
    for _ in 0..steps {
        let ok = opt.step(rng);
        if !ok || !record(opt.params(), &mut tr) {
            tr.diverged = true;
            break;
        }
    }
    Ok(tr)
}

/// First recorded step whose loss is below `threshold`.
pub fn escape_time(tr: &Trajectory, threshold: f64) -> Option<usize> {
    tr.losses.iter().position(|&l| l < threshold)
}

/// `0.1` times the initial loss.
pub fn default_escape_threshold(params: &ChainParams) -> f64 {
    0.1 * params.loss()
}

/// Like [`run_optimizer`] + [`escape_time`] without storing the history.
/// Returns `None` if the loss never drops below `threshold` within `max_steps`
/// or the run diverges.
pub fn escape_steps(params0: &ChainParams, spec: &OptimizerSpec, max_steps: usize, threshold: f64, rng: &mut Rng) -> Result<Option<usize>> {
    let mut opt = Optimizer::new(params0.clone(), *spec)?;
    if opt.params().loss() < threshold {
        return Ok(Some(0));
    }
    for t in 1..=max_steps {
        if !opt.step(rng) {
            return Ok(None);
        }
        let l = opt.params().loss();
        if !l.is_finite() {
            return Ok(None);
        }
        if l < threshold {
            return Ok(Some(t));
        }
    }
    Ok(None)
}

// ---------------------------------------------------------------------------
// Gradient flow of a symmetric chain

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMethod {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub blew_up: bool,
}

/// Right-hand side of the flow of a chain with all weights equal and a single
/// data point: `x w^(L-1) (y - x w^L)`.
pub fn flow_rhs(w: f64, depth: usize, x: f64, y: f64) -> f64 {
    let wl1 = w.powi(depth as i32 - 1);
    x * wl1 * (y - x * wl1 * w)
}

/// Integrate the symmetric-chain gradient flow on `[0, t_end]` with step `dt`.
pub fn integrate_flow(w0: f64, depth: usize, x: f64, y: f64, t_end: f64, dt: f64, method: FlowMethod) -> Result<FlowPath> {
    if depth == 0 {
        return domain("depth must be at least 1");
    }
    if !(dt > 0.0) || !(t_end >= 0.0) {
        return domain("need dt > 0 and t_end >= 0");
    }
    let n = (t_end / dt).ceil() as usize;
    let f = |w: f64| flow_rhs(w, depth, x, y);
    let mut path = FlowPath { times: vec![0.0], values: vec![w0], blew_up: false };
    let mut w = w0;
    for i in 0..n {
        w = match method {
            FlowMethod::Euler => w + dt * f(w),
            FlowMethod::Rk4 => {
                let k1 = f(w);
                let k2 = f(w + 0.5 * dt * k1);
                let k3 = f(w + 0.5 * dt * k2);
                let k4 = f(w + dt * k3);
                w + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            }
        };
        if !w.is_finite() {
            path.blew_up = true;
            break;
        }
        path.times.push((i + 1) as f64 * dt);
        path.values.push(w);
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn gradient_at_zero_weights_vanishes() {
        let p = ChainParams::new(vec![0.0, 0.0, 0.0, 0.0], vec![(1.0, 1.0)]).unwrap();
        assert!(p.gradient().iter().all(|g| *g == 0.0));
        assert_eq!(p.loss(), 0.5);
    }

    #[test]
    fn hessian_symmetric() {
        let p = ChainParams::sample(6, 1.5, vec![(1.0, 1.0), (-0.5, 2.0)], &mut stream(2)).unwrap();
        let h = p.hessian();
        assert_eq!(h, h.transpose());
    }

    #[test]
    fn log_derivatives_match_direct() {
        let p = ChainParams::sample(7, 1.7, vec![(1.0, 1.0)], &mut stream(5)).unwrap();
        let g = p.gradient();
        let h = p.hessian();
        let ld = p.log_derivatives(2, 5).unwrap();
        assert!((ld.grad - g[2].abs().ln()).abs() < 1e-10);
        assert!((ld.hess_diag - h[(2, 2)].abs().ln()).abs() < 1e-10);
        assert!((ld.hess_offdiag - h[(2, 5)].abs().ln()).abs() < 1e-10);
    }

    #[test]
    fn record_count() {
        let p = ChainParams::symmetric(4, 0.5, vec![(1.0, 1.0)]).unwrap();
        let tr = run_optimizer(&p, &OptimizerSpec::gd(0.1), 25, true, &mut stream(0)).unwrap();
        assert_eq!(tr.losses.len(), 26);
        assert_eq!(tr.weights.unwrap().len(), 26);
    }

    #[test]
    fn bad_spec_rejected() {
        assert!(OptimizerSpec::gd(0.0).validate().is_err());
        assert!(OptimizerSpec::rmsprop(0.1, 1.0).validate().is_err());
    }
}
