//! Work units of the scan kinds.

use std::path::PathBuf;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use super::{fan_out, ExperimentSpec, Row, Unit};
use crate::chain::{self, ChainParams, Method, OptimizerSpec};
use crate::conv::{self, ConvConfig, ConvNet, Padding, RawTensor, Spatial};
use crate::error::{domain, Error, Result};
use crate::init::{ActivationKind, InitScheme};
use crate::linalg;
use crate::mlp::{self, DataModel, GradientStats, MlpState, WidthRule, MAX_DENSE_PARAMS};
use crate::rng::stream;
use crate::theory::MomentState;

fn check_depths(depths: &[usize], min: usize) -> Result<()> {
    if depths.is_empty() {
        return domain("depths: must not be empty");
    }
    if let Some(d) = depths.iter().find(|&&d| d < min) {
        return domain(format!("depths: {d} is below the minimum {min}"));
    }
    Ok(())
}

fn check_data(data: &[(f64, f64)]) -> Result<()> {
    if data.is_empty() || data.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return domain("data: must be a non-empty list of finite pairs");
    }
    Ok(())
}

fn default_data() -> Vec<(f64, f64)> {
    vec![(1.0, 1.0)]
}

// ---------------------------------------------------------------------------
// chain_scan

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainScanParams {
    pub depths: Vec<usize>,
    pub tau: f64,
    #[serde(default = "default_data")]
    pub data: Vec<(f64, f64)>,
}

impl ChainScanParams {
    pub fn check(&self) -> Result<()> {
        check_depths(&self.depths, 2)?;
        check_data(&self.data)?;
        if !(self.tau > 0.0) {
            return domain("tau: must be positive");
        }
        Ok(())
    }
}

/// Log-magnitudes of the forward product and of the first gradient entry,
/// first diagonal and first off-diagonal Hessian entries.
pub(crate) fn chain_scan(spec: &ExperimentSpec, p: &ChainScanParams) -> Vec<Row> {
    let init = format!("uniform:range={}", p.tau);
    fan_out(spec, &p.depths, |_| Ok((1, init.clone(), "linear".into())), |u: &Unit| {
        let mut rng = stream(u.sub_seed);
        let c = ChainParams::sample(u.depth, p.tau, p.data.clone(), &mut rng)?;
        let ld = c.log_derivatives(0, 1)?;
        let ln_v: f64 = c.weights.iter().map(|w| w.abs().ln()).sum();
        Ok(vec![
            u.row("ln_abs_v", ln_v),
            u.row("ln_abs_grad", ld.grad),
            u.row("ln_abs_hess_diag", ld.hess_diag),
            u.row("ln_abs_hess_offdiag", ld.hess_offdiag),
        ])
    })
}

// ---------------------------------------------------------------------------
// chain_train

fn default_init_range() -> f64 {
    0.2
}

fn default_max_steps() -> usize {
    100_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainTrainParams {
    pub depths: Vec<usize>,
    pub optimizers: Vec<OptimizerSpec>,
    /// Half-width of the uniform initialisation.
    #[serde(default = "default_init_range")]
    pub init_range: f64,
    /// Symmetric start `w = w0 * 1` instead of a random one.
    #[serde(default)]
    pub w0: Option<f64>,
    #[serde(default = "default_data")]
    pub data: Vec<(f64, f64)>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Absolute loss threshold; defaults to a tenth of the initial loss.
    #[serde(default)]
    pub threshold: Option<f64>,
}

impl ChainTrainParams {
    pub fn check(&self) -> Result<()> {
        check_depths(&self.depths, 1)?;
        check_data(&self.data)?;
        if self.optimizers.is_empty() {
            return domain("optimizers: must not be empty");
        }
        for o in &self.optimizers {
            o.validate()?;
        }
        if !(self.init_range > 0.0) {
            return domain("init_range: must be positive");
        }
        if self.threshold.is_some_and(|t| !(t > 0.0)) {
            return domain("threshold: must be positive");
        }
        Ok(())
    }
}

/// Short name of an optimizer setting used in observable names.
pub fn optimizer_label(o: &OptimizerSpec) -> String {
    let m = match o.method {
        Method::Gd => "gd",
        Method::PerturbedGd => "perturbed_gd",
        Method::Sgd => "sgd",
        Method::Rmsprop => "rmsprop",
        Method::Adam => "adam",
    };
    let mut s = format!("{m}:lr={:e}", o.lr);
    if o.method == Method::PerturbedGd {
        s.push_str(&format!(":noise={:e}", o.noise_std));
    }
    if o.method == Method::Rmsprop || o.method == Method::Adam {
        s.push_str(&format!(":beta2={}", o.beta2));
    }
    if o.decay == chain::Decay::InvSqrt {
        s.push_str(":inv_sqrt");
    }
    s
}

/// Escape steps of every optimizer from one shared start. Runs that never
/// cross the threshold are recorded as `inf`.
pub(crate) fn chain_train(spec: &ExperimentSpec, p: &ChainTrainParams) -> Vec<Row> {
    let init = match p.w0 {
        Some(w0) => format!("symmetric:w0={w0}"),
        None => format!("uniform:range={}", p.init_range),
    };
    fan_out(spec, &p.depths, |_| Ok((1, init.clone(), "linear".into())), |u: &Unit| {
        let mut rng = stream(u.sub_seed);
        let c = match p.w0 {
            Some(w0) => ChainParams::symmetric(u.depth, w0, p.data.clone())?,
            None => ChainParams::sample(u.depth, p.init_range, p.data.clone(), &mut rng)?,
        };
        let thr = p.threshold.unwrap_or_else(|| chain::default_escape_threshold(&c));
        let g0 = c.gradient().iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let mut rows = vec![u.row("initial_loss", c.loss()), u.row("initial_grad_inf", g0)];
        for (j, o) in p.optimizers.iter().enumerate() {
            let mut r = stream(crate::rng::sub_seed(u.sub_seed, j as u64 + 1));
            let steps = chain::escape_steps(&c, o, p.max_steps, thr, &mut r)?;
            rows.push(u.row(format!("escape_steps:{}", optimizer_label(o)), steps.map_or(f64::INFINITY, |s| s as f64)));
        }
        Ok(rows)
    })
}

// ---------------------------------------------------------------------------
// mlp_scan / mlp_hessian

fn default_hessian_samples() -> usize {
    256
}

fn default_fd_step() -> f64 {
    1e-5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpScanParams {
    pub depths: Vec<usize>,
    pub width_rule: WidthRule,
    pub init: InitScheme,
    pub activation: ActivationKind,
    #[serde(default)]
    pub data: DataModel,
    /// Also measure Hessian blocks (or sampled entries above the dense cap).
    #[serde(default)]
    pub hessian: bool,
    #[serde(default = "default_hessian_samples")]
    pub hessian_samples: usize,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
}

fn check_net(depths: &[usize], rule: &WidthRule, data: &DataModel) -> Result<()> {
    check_depths(depths, 1)?;
    for &l in depths {
        rule.width(l)?;
    }
    if data.n == 0 || data.d_in == Some(0) || data.d_out == Some(0) {
        return domain("data: sizes must be positive");
    }
    Ok(())
}

impl MlpScanParams {
    pub fn check(&self) -> Result<()> {
        check_net(&self.depths, &self.width_rule, &self.data)?;
        if !(self.fd_step > 0.0) {
            return domain("fd_step: must be positive");
        }
        Ok(())
    }
}

fn mlp_label<'a>(rule: &'a WidthRule, init: &InitScheme, act: ActivationKind) -> impl Fn(usize) -> Result<(usize, String, String)> + Sync + 'a {
    let init = init.to_string();
    move |l| Ok((rule.width(l)?, init.clone(), act.name().to_string()))
}

/// Central-difference Hessian entries `(i, j)` for `samples` random columns,
/// one random row each.
fn mlp_fd_entries(st: &MlpState, data: &mlp::Dataset, samples: usize, h: f64, rng: &mut crate::rng::Rng) -> Result<Vec<(usize, usize, f64)>> {
    let np = st.num_params();
    let p0 = st.params();
    let mut probe = st.clone();
    let mut out = Vec::with_capacity(samples);
    for j in sample_indices(rng, np, samples.min(np)).into_iter() {
        let i = rand::Rng::random_range(rng, 0..np);
        let step = h * p0[j].abs().max(1.0);
        let mut p = p0.clone();
        p[j] += step;
        probe.set_params(&p)?;
        probe.prepare(data)?;
        let gp = probe.gradient_flat(data)?;
        p[j] = p0[j] - step;
        probe.set_params(&p)?;
        probe.prepare(data)?;
        let gm = probe.gradient_flat(data)?;
        out.push((i, j, (gp[i] - gm[i]) / (2.0 * step)));
    }
    Ok(out)
}

/// Forward moments of the last hidden layer, gradient norms and, on request,
/// Hessian block norms.
pub(crate) fn mlp_scan(spec: &ExperimentSpec, p: &MlpScanParams) -> Vec<Row> {
    fan_out(spec, &p.depths, mlp_label(&p.width_rule, &p.init, p.activation), |u: &Unit| {
        let mut rng = stream(u.sub_seed);
        let (st, ds) = mlp::random_problem(u.depth, u.width, p.activation, p.init, p.data, &mut rng)?;
        let mut rows = Vec::new();
        let n = ds.len() as f64;
        let mut m = [0.0; 3];
        for x in &ds.inputs {
            let h = st.last_hidden(x)?;
            let s = MomentState::of_vector(h.as_slice());
            m[0] += s.m2 / n;
            m[1] += s.m4_2 / n;
            m[2] += s.m4_4 / n;
        }
        rows.push(u.row("forward_m2", m[0]));
        rows.push(u.row("forward_m4_2", m[1]));
        rows.push(u.row("forward_m4_4", m[2]));
        rows.push(u.row("loss", st.loss(&ds)?));
        let g = GradientStats::from_layers(&st.gradient(&ds)?);
        rows.push(u.row("grad_norm_total", g.total_norm));
        rows.push(u.row("grad_norm_layer_mean_log", g.mean_log_layer_norm));
        for (k, v) in g.layer_norms.iter().enumerate() {
            rows.push(u.row(format!("grad_norm_layer:{}", k + 1), *v));
        }
        if p.hessian {
            if st.num_params() <= MAX_DENSE_PARAMS {
                let hb = st.hessian_blocks(&ds)?;
                let dn = hb.diag_norms();
                let on = hb.offdiag_norms();
                for (k, v) in dn.iter().enumerate() {
                    rows.push(u.row(format!("hess_diag_fro:{}", k + 1), *v));
                }
                rows.push(u.row("hess_diag_fro_mean_log", mean_log(&dn)));
                if !on.is_empty() {
                    rows.push(u.row("hess_offdiag_fro_mean_log", mean_log(&on)));
                }
                rows.push(u.row("hollowness", hb.hollowness()));
            } else {
                for (_, _, v) in mlp_fd_entries(&st, &ds, p.hessian_samples, p.fd_step, &mut rng)? {
                    rows.push(u.row("hess_entry_fd_abs", v.abs()));
                }
            }
        }
        Ok(rows)
    })
}

/// Mean of `ln x` over the entries.
pub fn mean_log(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpHessianParams {
    pub depths: Vec<usize>,
    pub width_rule: WidthRule,
    pub init: InitScheme,
    pub activation: ActivationKind,
    #[serde(default)]
    pub data: DataModel,
}

impl MlpHessianParams {
    pub fn check(&self) -> Result<()> {
        check_net(&self.depths, &self.width_rule, &self.data)?;
        for &l in &self.depths {
            let w = self.width_rule.width(l)?;
            if l * w * w > MAX_DENSE_PARAMS {
                return Err(Error::SizeLimit(format!("depth {l} width {w} exceeds the dense cap of {MAX_DENSE_PARAMS}")));
            }
        }
        Ok(())
    }
}

/// Spectrum statistics of the full analytic Hessian.
pub(crate) fn mlp_hessian(spec: &ExperimentSpec, p: &MlpHessianParams) -> Vec<Row> {
    fan_out(spec, &p.depths, mlp_label(&p.width_rule, &p.init, p.activation), |u: &Unit| {
        let mut rng = stream(u.sub_seed);
        let (st, ds) = mlp::random_problem(u.depth, u.width, p.activation, p.init, p.data, &mut rng)?;
        let hb = st.hessian_blocks(&ds)?;
        let h = hb.assemble();
        let eig = mlp::eigenspectrum(&h)?;
        let max = eig[0];
        let min = *eig.last().expect("non-empty spectrum");
        let trace = hb.trace();
        let discs = linalg::gershgorin_discs(&h);
        let ok = linalg::within_gershgorin(&eig, &discs, 1e-9 * (1.0 + h.amax()));
        Ok(vec![
            u.row("eig_max", max),
            u.row("eig_min", min),
            u.row("trace", trace),
            u.row("abs_trace_over_eig_max", trace.abs() / max),
            u.row("positive_eigs", eig.iter().filter(|&&e| e > 0.0).count() as f64),
            u.row("negative_eigs", eig.iter().filter(|&&e| e < 0.0).count() as f64),
            u.row("both_signs", f64::from(u8::from(max > 0.0 && min < 0.0))),
            u.row("gershgorin_ok", f64::from(u8::from(ok))),
            u.row("hollowness", hb.hollowness()),
        ])
    })
}

// ---------------------------------------------------------------------------
// conv_scan

fn default_channels() -> WidthRule {
    WidthRule::Linear { factor: 0.25 }
}

fn default_one() -> usize {
    1
}

fn default_kernel() -> usize {
    3
}

fn default_relu() -> ActivationKind {
    ActivationKind::Relu
}

fn default_he() -> InitScheme {
    "gaussian:he".parse().expect("valid scheme")
}

fn default_images() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvScanParams {
    pub depths: Vec<usize>,
    pub spatial: Spatial,
    pub padding: Padding,
    /// Hidden channels as a function of depth.
    #[serde(default = "default_channels")]
    pub channels: WidthRule,
    #[serde(default = "default_one")]
    pub in_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_relu")]
    pub activation: ActivationKind,
    #[serde(default = "default_he")]
    pub init: InitScheme,
    /// Number of synthetic Gaussian images when no input file is given.
    #[serde(default = "default_images")]
    pub images: usize,
    /// Finite-difference Hessian entries sampled per network.
    #[serde(default)]
    pub hessian_samples: usize,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    /// Raw tensor file with the images to use.
    #[serde(default)]
    pub input: Option<PathBuf>,
}

impl ConvScanParams {
    pub fn config(&self, depth: usize) -> Result<ConvConfig> {
        let cfg = ConvConfig {
            spatial: self.spatial,
            channels: self.channels.width(depth)?,
            in_channels: self.in_channels,
            kernel: self.kernel,
            padding: self.padding,
            depth,
            activation: self.activation,
            init: self.init,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        check_depths(&self.depths, 1)?;
        for &l in &self.depths {
            self.config(l)?;
        }
        if self.images == 0 {
            return domain("images: must be positive");
        }
        if !(self.fd_step > 0.0) {
            return domain("fd_step: must be positive");
        }
        Ok(())
    }
}

/// Per-layer kernel-gradient norms and sampled Hessian entries.
pub(crate) fn conv_scan(spec: &ExperimentSpec, p: &ConvScanParams) -> Vec<Row> {
    let raw = p.input.as_ref().map(|path| RawTensor::read(path));
    let label = |l: usize| Ok((p.channels.width(l)?, p.init.to_string(), p.activation.name().to_string()));
    fan_out(spec, &p.depths, label, |u: &Unit| {
        let mut rng = stream(u.sub_seed);
        let cfg = p.config(u.depth)?;
        let net = ConvNet::sample(&cfg, &mut rng)?;
        let images = match &raw {
            Some(Ok(t)) => t.images(&cfg)?,
            Some(Err(e)) => return Err(e.clone()),
            None => conv::gaussian_images(&cfg, p.images, &mut rng),
        };
        let g = net.gradient(&images)?;
        let norms = g.layer_norms();
        let mut rows = vec![
            u.row("loss", g.loss),
            u.row("grad_norm_total", g.total_norm()),
            u.row("grad_norm_first_layer", norms[0]),
            u.row("grad_norm_layer_mean", norms.iter().sum::<f64>() / norms.len() as f64),
        ];
        for (l, v) in norms.iter().enumerate() {
            rows.push(u.row(format!("grad_norm_layer:{}", l + 1), *v));
        }
        if p.hessian_samples > 0 {
            for (_, _, v) in net.sample_hessian(&images, p.hessian_samples, 2, p.fd_step, &mut rng)? {
                rows.push(u.row("hess_entry_fd_abs", v.abs()));
            }
        }
        Ok(rows)
    })
}

// ---------------------------------------------------------------------------
// verify

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VerifyParams {
    /// Names of the checks to run; all when absent.
    #[serde(default)]
    pub checks: Option<Vec<String>>,
}

impl VerifyParams {
    pub fn check(&self) -> Result<()> {
        if let Some(names) = &self.checks {
            for n in names {
                if !crate::verify::CHECK_NAMES.contains(&n.as_str()) {
                    return domain(format!("checks: unknown check {n:?}"));
                }
            }
        }
        Ok(())
    }
}
