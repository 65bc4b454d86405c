//! Deep linear and ReLU perceptrons `x -> B D_L W_L D_{L-1} ... W_1 D_0 A x`.
//!
//! `A` and `B` are fixed boundary maps; only the `L` square hidden matrices
//! are trained. Gates `D_l` are diagonal 0/1 matrices read off the forward
//! pass. Parameters are flattened layer by layer, row-major within a layer.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Error, Result};
use crate::init::{ActivationKind, InitScheme};
use crate::linalg;
use crate::rng::Rng;

/// Dense Hessians are refused above this many parameters.
pub const MAX_DENSE_PARAMS: usize = 4096;

/// How hidden width follows depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum WidthRule {
    Constant { width: usize },
    /// `ceil(factor * sqrt(L))`
    SqrtDepth { factor: f64 },
    /// `ceil(factor * L)`
    Linear { factor: f64 },
}

impl WidthRule {
    pub fn width(&self, depth: usize) -> Result<usize> {
        let w = match *self {
            WidthRule::Constant { width } => width as f64,
            WidthRule::SqrtDepth { factor } => (factor * (depth as f64).sqrt()).ceil(),
            WidthRule::Linear { factor } => (factor * depth as f64).ceil(),
        };
        if !(w >= 1.0) || !w.is_finite() {
            return domain(format!("width rule gives no valid width at depth {depth}"));
        }
        Ok(w as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub depth: usize,
    pub width: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub activation: ActivationKind,
    pub init: InitScheme,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.d_in == 0 || self.d_out == 0 {
            return domain("depth and all dimensions must be at least 1");
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.depth * self.width * self.width
    }
}

/// Inputs paired with targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<DVector<f64>>,
    pub targets: Vec<DVector<f64>>,
}

impl Dataset {
    pub fn new(inputs: Vec<DVector<f64>>, targets: Vec<DVector<f64>>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return invalid("dataset needs as many targets as inputs, and at least one");
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// `x ~ N(0, I)`, `y = V phi(U x)` with a random one-hidden-layer teacher of width `hidden`.
    pub fn teacher(n: usize, d_in: usize, d_out: usize, hidden: usize, activation: ActivationKind, rng: &mut Rng) -> Result<Self> {
        if n == 0 || d_in == 0 || d_out == 0 || hidden == 0 {
            return domain("teacher dimensions must be positive");
        }
        let mut g = |r: usize, c: usize, var: f64| {
            let s = var.sqrt();
            DMatrix::from_fn(r, c, |_, _| { let z: f64 = StandardNormal.sample(&mut *rng); s * z })
        };
        let u = g(hidden, d_in, 1.0 / (activation.p() * d_in as f64));
        let v = g(d_out, hidden, 1.0 / hidden as f64);
        let inputs: Vec<DVector<f64>> = (0..n).map(|_| g(d_in, 1, 1.0).column(0).into_owned()).collect();
        let targets = inputs
            .iter()
            .map(|x| {
                let h = (&u * x).map(|t| t * activation.gate(t));
                &v * h
            })
            .collect();
        Dataset::new(inputs, targets)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SampleCache {
    /// `pre[0] = A x`, `pre[l+1] = W_l D_l pre[l]`.
    pre: Vec<DVector<f64>>,
    gates: Vec<DVector<f64>>,
}

impl SampleCache {
    fn hin(&self, l: usize) -> DVector<f64> {
        self.pre[l].component_mul(&self.gates[l])
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ForwardCache {
    generation: u64,
    inputs: Vec<DVector<f64>>,
    samples: Vec<SampleCache>,
}

/// Selects how [`MlpState::hessian`] is computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMethod {
    Analytic,
    /// Central differences of the analytic gradient with relative step `h`.
    FiniteDifference { h: f64 },
}

/// Network weights with a forward cache.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpState {
    pub activation: ActivationKind,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    w: Vec<DMatrix<f64>>,
    generation: u64,
    cache: Option<ForwardCache>,
}

impl MlpState {
    /// Random network; `A`, `B` and the hidden layers share the init scheme.
    pub fn sample(cfg: &MlpConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let a = cfg.init.sample_matrix(cfg.width, cfg.d_in, rng)?;
        let w = (0..cfg.depth)
            .map(|_| cfg.init.sample_matrix(cfg.width, cfg.width, rng))
            .collect::<Result<Vec<_>>>()?;
        let b = cfg.init.sample_matrix(cfg.d_out, cfg.width, rng)?;
        Self::from_matrices(a, b, w, cfg.activation)
    }

    pub fn from_matrices(a: DMatrix<f64>, b: DMatrix<f64>, w: Vec<DMatrix<f64>>, activation: ActivationKind) -> Result<Self> {
        if w.is_empty() {
            return domain("need at least one hidden layer");
        }
        let d = a.nrows();
        if w.iter().any(|m| m.nrows() != d || m.ncols() != d) || b.ncols() != d {
            return Err(Error::Shape(format!("hidden layers must be {d}x{d} and B must have {d} columns")));
        }
        Ok(MlpState { activation, a, b, w, generation: 0, cache: None })
    }

    pub fn depth(&self) -> usize {
        self.w.len()
    }

    pub fn width(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.depth() * self.width() * self.width()
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.w
    }

    pub fn boundary(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.a, &self.b)
    }

    /// Replace hidden weights; invalidates the cache.
    pub fn set_weights(&mut self, w: Vec<DMatrix<f64>>) -> Result<()> {
        let d = self.width();
        if w.len() != self.depth() || w.iter().any(|m| m.nrows() != d || m.ncols() != d) {
            return Err(Error::Shape("replacement weights have the wrong shape".into()));
        }
        self.w = w;
        self.generation += 1;
        Ok(())
    }

    pub fn params(&self) -> Vec<f64> {
        let d = self.width();
        let mut v = Vec::with_capacity(self.num_params());
        for m in &self.w {
            for i in 0..d {
                for j in 0..d {
                    v.push(m[(i, j)]);
                }
            }
        }
        v
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        let d = self.width();
        if p.len() != self.num_params() {
            return Err(Error::Shape("parameter vector has the wrong length".into()));
        }
        let w = p.chunks(d * d).map(|c| DMatrix::from_row_slice(d, d, c)).collect();
        self.set_weights(w)
    }

    fn run(&self, x: &DVector<f64>) -> Result<(SampleCache, DVector<f64>)> {
        if x.len() != self.a.ncols() {
            return Err(Error::Shape(format!("input has length {}, expected {}", x.len(), self.a.ncols())));
        }
        let l = self.depth();
        let mut pre = Vec::with_capacity(l + 1);
        let mut gates = Vec::with_capacity(l + 1);
        pre.push(&self.a * x);
        for k in 0..=l {
            let g = pre[k].map(|t| self.activation.gate(t));
            gates.push(g);
            if k < l {
                let h = pre[k].component_mul(&gates[k]);
                pre.push(&self.w[k] * h);
            }
        }
        let out = &self.b * pre[l].component_mul(&gates[l]);
        Ok((SampleCache { pre, gates }, out))
    }

    /// Output for `x`, without touching the cache.
    pub fn output(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.run(x).map(|r| r.1)
    }

    /// Last hidden preactivation `W_L D_{L-1} ... W_1 D_0 A x`.
    pub fn last_hidden(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (mut c, _) = self.run(x)?;
        Ok(c.pre.pop().expect("at least one layer"))
    }

    /// Output for `x`; the cache then holds this single input.
    pub fn forward(&mut self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (c, out) = self.run(x)?;
        self.cache = Some(ForwardCache { generation: self.generation, inputs: vec![x.clone()], samples: vec![c] });
        Ok(out)
    }

    /// Fill the cache for every input of `data`.
    pub fn prepare(&mut self, data: &Dataset) -> Result<()> {
        let samples = data.inputs.iter().map(|x| self.run(x).map(|r| r.0)).collect::<Result<Vec<_>>>()?;
        self.cache = Some(ForwardCache { generation: self.generation, inputs: data.inputs.clone(), samples });
        Ok(())
    }

    fn cached(&self, data: &Dataset) -> Result<&[SampleCache]> {
        let c = self.cache.as_ref().ok_or_else(|| Error::StaleCache("no forward pass has been run".into()))?;
        if c.generation != self.generation {
            return Err(Error::StaleCache("weights changed after the forward pass".into()));
        }
        if c.inputs != data.inputs {
            return Err(Error::StaleCache("cache was filled for different inputs".into()));
        }
        Ok(&c.samples)
    }

    /// `(1/2n) sum ||y - f(x)||^2`
    pub fn loss(&self, data: &Dataset) -> Result<f64> {
        let mut s = 0.0;
        for (x, y) in data.inputs.iter().zip(&data.targets) {
            s += (self.output(x)? - y).norm_squared();
        }
        Ok(s / (2.0 * data.len() as f64))
    }

    fn residual(&self, c: &SampleCache, y: &DVector<f64>) -> Result<DVector<f64>> {
        let l = self.depth();
        let out = &self.b * c.pre[l].component_mul(&c.gates[l]);
        if out.len() != y.len() {
            return Err(Error::Shape("target has the wrong length".into()));
        }
        Ok(out - y)
    }

    /// Backpropagated signals `s_l = L_l^T e`, where `f = L_l W_l hin_l`.
    fn back_signals(&self, c: &SampleCache, e: &DVector<f64>) -> Vec<DVector<f64>> {
        let l = self.depth();
        let mut s = vec![DVector::zeros(0); l];
        s[l - 1] = (self.b.tr_mul(e)).component_mul(&c.gates[l]);
        for k in (0..l - 1).rev() {
            s[k] = self.w[k + 1].tr_mul(&s[k + 1]).component_mul(&c.gates[k + 1]);
        }
        s
    }

    /// Per-layer gradients from the cached forward pass.
    pub fn gradient(&self, data: &Dataset) -> Result<Vec<DMatrix<f64>>> {
        let samples = self.cached(data)?;
        let d = self.width();
        let n = data.len() as f64;
        let mut g = vec![DMatrix::zeros(d, d); self.depth()];
        for (c, y) in samples.iter().zip(&data.targets) {
            let e = self.residual(c, y)?;
            let s = self.back_signals(c, &e);
            for (k, gk) in g.iter_mut().enumerate() {
                gk.ger(1.0 / n, &s[k], &c.hin(k), 1.0);
            }
        }
        Ok(g)
    }

    /// Flattened gradient.
    pub fn gradient_flat(&self, data: &Dataset) -> Result<Vec<f64>> {
        let g = self.gradient(data)?;
        let d = self.width();
        let mut v = Vec::with_capacity(self.num_params());
        for m in &g {
            for i in 0..d {
                for j in 0..d {
                    v.push(m[(i, j)]);
                }
            }
        }
        Ok(v)
    }

    /// Upper-triangular Hessian blocks `H^{km}`, `k <= m`, from the cached pass.
    pub fn hessian_blocks(&self, data: &Dataset) -> Result<HessianBlocks> {
        let samples = self.cached(data)?;
        let l = self.depth();
        let d = self.width();
        let n = data.len() as f64;
        let mut blocks = vec![DMatrix::zeros(d * d, d * d); l * (l + 1) / 2];

        // Linear nets have sample-independent left factors, so the data
        // enter only through averaged outer products.
        let groups: Vec<(Vec<usize>, f64)> = if self.activation == ActivationKind::Linear {
            vec![((0..samples.len()).collect(), 1.0 / n)]
        } else {
            (0..samples.len()).map(|i| (vec![i], 1.0 / n)).collect()
        };

        for (members, wgt) in groups {
            let c0 = &samples[members[0]];
            let lm = self.left_maps(c0);
            let mut hin_sum: Vec<Vec<DVector<f64>>> = Vec::new();
            let mut sig: Vec<Vec<DVector<f64>>> = Vec::new();
            for &i in &members {
                let c = &samples[i];
                let e = self.residual(c, &data.targets[i])?;
                hin_sum.push((0..l).map(|k| c.hin(k)).collect());
                sig.push(self.back_signals(c, &e));
            }
            for k in 0..l {
                let mut mmat = DMatrix::<f64>::zeros(0, 0);
                for m in k..l {
                    let g = lm[k].tr_mul(&lm[m]);
                    let mut cm = DMatrix::zeros(d, d);
                    let mut sm = DMatrix::zeros(d, d);
                    for (h, s) in hin_sum.iter().zip(&sig) {
                        cm.ger(1.0, &h[k], &h[m], 1.0);
                        if m > k {
                            sm.ger(1.0, &h[k], &s[m], 1.0);
                        }
                    }
                    if m > k {
                        // M_{m,k} = D_m W_{m-1} ... W_{k+1} D_{k+1}
                        mmat = if m == k + 1 {
                            DMatrix::from_diagonal(&c0.gates[k + 1])
                        } else {
                            let mut t = &self.w[m - 1] * &mmat;
                            for (r, gr) in c0.gates[m].iter().enumerate() {
                                t.row_mut(r).scale_mut(*gr);
                            }
                            t
                        };
                    }
                    let blk = &mut blocks[block_index(l, k, m)];
                    fill_block(blk, d, &g, &cm, (m > k).then_some((&mmat, &sm)), wgt);
                }
            }
        }
        Ok(HessianBlocks { depth: l, width: d, blocks })
    }

    /// `L_l` maps with `f = L_l W_l hin_l`: `L_{L-1} = B D_L`, `L_k = L_{k+1} W_{k+1} D_{k+1}`.
    fn left_maps(&self, c: &SampleCache) -> Vec<DMatrix<f64>> {
        let l = self.depth();
        let mut lm = vec![DMatrix::zeros(0, 0); l];
        let mut cur = self.b.clone();
        for (j, gj) in c.gates[l].iter().enumerate() {
            cur.column_mut(j).scale_mut(*gj);
        }
        lm[l - 1] = cur;
        for k in (0..l - 1).rev() {
            let mut t = &lm[k + 1] * &self.w[k + 1];
            for (j, gj) in c.gates[k + 1].iter().enumerate() {
                t.column_mut(j).scale_mut(*gj);
            }
            lm[k] = t;
        }
        lm
    }

    /// Dense Hessian of the loss over all hidden weights.
    pub fn hessian(&mut self, data: &Dataset, method: HessianMethod) -> Result<DMatrix<f64>> {
        let np = self.num_params();
        if np > MAX_DENSE_PARAMS {
            return Err(Error::SizeLimit(format!("{np} parameters exceed the dense cap of {MAX_DENSE_PARAMS}")));
        }
        match method {
            HessianMethod::Analytic => {
                self.prepare(data)?;
                Ok(self.hessian_blocks(data)?.assemble())
            }
            HessianMethod::FiniteDifference { h } => {
                if !(h > 0.0) {
                    return domain("finite-difference step must be positive");
                }
                let p0 = self.params();
                let mut probe = self.clone();
                let mut hm = DMatrix::zeros(np, np);
                for j in 0..np {
                    let step = h * p0[j].abs().max(1.0);
                    let mut p = p0.clone();
                    p[j] = p0[j] + step;
                    probe.set_params(&p)?;
                    probe.prepare(data)?;
                    let gp = probe.gradient_flat(data)?;
                    p[j] = p0[j] - step;
                    probe.set_params(&p)?;
                    probe.prepare(data)?;
                    let gm = probe.gradient_flat(data)?;
                    for i in 0..np {
                        hm[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
                    }
                }
                Ok(hm)
            }
        }
    }

    /// Smallest `|preactivation|` over the cached pass; ReLU finite differences
    /// are only meaningful when it is well above the step size.
    pub fn min_abs_preactivation(&self, data: &Dataset) -> Result<f64> {
        let s = self.cached(data)?;
        Ok(s.iter().flat_map(|c| c.pre.iter()).flat_map(|v| v.iter()).fold(f64::INFINITY, |a, b| a.min(b.abs())))
    }
}

fn block_index(l: usize, k: usize, m: usize) -> usize {
    // row-major upper triangle
    k * l - k * (k + 1) / 2 + m
}

/// `blk[(a d + b, c d + e)] += wgt (G[a,c] C[b,e] + M[e,a] S[b,c])`.
fn fill_block(blk: &mut DMatrix<f64>, d: usize, g: &DMatrix<f64>, cm: &DMatrix<f64>, second: Option<(&DMatrix<f64>, &DMatrix<f64>)>, wgt: f64) {
    for cc in 0..d {
        for e in 0..d {
            let col = cc * d + e;
            for a in 0..d {
                let gac = g[(a, cc)];
                let mea = second.map(|(m, _)| m[(e, a)]).unwrap_or(0.0);
                for b in 0..d {
                    let mut v = gac * cm[(b, e)];
                    if let Some((_, s)) = second {
                        v += mea * s[(b, cc)];
                    }
                    blk[(a * d + b, col)] += wgt * v;
                }
            }
        }
    }
}

/// Hessian stored as `d^2 x d^2` blocks per layer pair.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianBlocks {
    pub depth: usize,
    pub width: usize,
    blocks: Vec<DMatrix<f64>>,
}

/// Location of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HessianBlockIndex {
    pub k: usize,
    pub m: usize,
}

impl HessianBlocks {
    /// Block `H^{km}`; lower blocks are transposes of upper ones.
    pub fn block(&self, idx: HessianBlockIndex) -> Result<DMatrix<f64>> {
        let (k, m) = (idx.k, idx.m);
        if k >= self.depth || m >= self.depth {
            return invalid("block index out of range");
        }
        Ok(if k <= m {
            self.blocks[block_index(self.depth, k, m)].clone()
        } else {
            self.blocks[block_index(self.depth, m, k)].transpose()
        })
    }

    fn upper(&self, k: usize, m: usize) -> &DMatrix<f64> {
        &self.blocks[block_index(self.depth, k, m)]
    }

    pub fn assemble(&self) -> DMatrix<f64> {
        let s = self.width * self.width;
        let n = self.depth * s;
        let mut h = DMatrix::zeros(n, n);
        for k in 0..self.depth {
            for m in k..self.depth {
                let b = self.upper(k, m);
                h.view_mut((k * s, m * s), (s, s)).copy_from(b);
                if m > k {
                    h.view_mut((m * s, k * s), (s, s)).copy_from(&b.transpose());
                }
            }
        }
        h
    }

    /// Frobenius norms of the diagonal blocks.
    pub fn diag_norms(&self) -> Vec<f64> {
        (0..self.depth).map(|k| self.upper(k, k).norm()).collect()
    }

    /// Frobenius norms of the strictly upper blocks.
    pub fn offdiag_norms(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for k in 0..self.depth {
            for m in k + 1..self.depth {
                v.push(self.upper(k, m).norm());
            }
        }
        v
    }

    /// Mean `|entry|` in diagonal blocks over mean `|entry|` in off-diagonal
    /// blocks; infinite when the off-diagonal blocks vanish or do not exist.
    pub fn hollowness(&self) -> f64 {
        let s = (self.width * self.width) as f64;
        let ent = |m: &DMatrix<f64>| m.iter().map(|v| v.abs()).sum::<f64>();
        let dsum: f64 = (0..self.depth).map(|k| ent(self.upper(k, k))).sum();
        let mut osum = 0.0;
        for k in 0..self.depth {
            for m in k + 1..self.depth {
                osum += 2.0 * ent(self.upper(k, m));
            }
        }
        let nd = self.depth as f64 * s * s;
        let no = (self.depth * self.depth - self.depth) as f64 * s * s;
        if no == 0.0 || osum == 0.0 {
            return f64::INFINITY;
        }
        (dsum / nd) / (osum / no)
    }

    pub fn trace(&self) -> f64 {
        (0..self.depth).map(|k| self.upper(k, k).trace()).sum()
    }
}

/// Eigenvalues of a Hessian, descending.
pub fn eigenspectrum(h: &DMatrix<f64>) -> Result<Vec<f64>> {
    linalg::symmetric_eigenvalues(h)
}

/// Hollowness of a dense matrix split into square blocks of side `block`;
/// same convention as [`HessianBlocks::hollowness`].
pub fn hollowness(h: &DMatrix<f64>, block: usize) -> Result<f64> {
    let n = h.nrows();
    if block == 0 || h.ncols() != n || n % block != 0 {
        return Err(Error::Shape(format!("{}x{} matrix does not split into blocks of side {block}", n, h.ncols())));
    }
    let (mut dsum, mut osum, mut nd, mut no) = (0.0, 0.0, 0.0, 0.0);
    for j in 0..n {
        for i in 0..n {
            if i / block == j / block {
                dsum += h[(i, j)].abs();
                nd += 1.0;
            } else {
                osum += h[(i, j)].abs();
                no += 1.0;
            }
        }
    }
    if no == 0.0 || osum == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((dsum / nd) / (osum / no))
}

/// Gradient statistics of one random network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientStats {
    pub layer_norms: Vec<f64>,
    /// Frobenius norm of the full gradient.
    pub total_norm: f64,
    /// Mean over layers of `ln ||dL/dW_l||_F`.
    pub mean_log_layer_norm: f64,
}

impl GradientStats {
    pub fn from_layers(g: &[DMatrix<f64>]) -> Self {
        let layer_norms: Vec<f64> = g.iter().map(|m| m.norm()).collect();
        let total_norm = layer_norms.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mean_log_layer_norm = layer_norms.iter().map(|v| v.ln()).sum::<f64>() / layer_norms.len() as f64;
        GradientStats { layer_norms, total_norm, mean_log_layer_norm }
    }
}

/// Data model used by scans. `None` boundary dimensions follow the width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataModel {
    pub n: usize,
    pub d_in: Option<usize>,
    pub d_out: Option<usize>,
}

impl Default for DataModel {
    fn default() -> Self {
        DataModel { n: 16, d_in: Some(1), d_out: Some(1) }
    }
}

/// One random network plus teacher data, ready for measurements.
pub fn random_problem(depth: usize, width: usize, activation: ActivationKind, init: InitScheme, data: DataModel, rng: &mut Rng) -> Result<(MlpState, Dataset)> {
    let d_in = data.d_in.unwrap_or(width);
    let d_out = data.d_out.unwrap_or(width);
    let cfg = MlpConfig { depth, width, d_in, d_out, activation, init };
    let mut st = MlpState::sample(&cfg, rng)?;
    let ds = Dataset::teacher(data.n, d_in, d_out, width, activation, rng)?;
    st.prepare(&ds)?;
    Ok((st, ds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small(act: ActivationKind) -> (MlpState, Dataset) {
        let init: InitScheme = "gaussian:xavier".parse().unwrap();
        random_problem(3, 3, act, init, DataModel { n: 4, d_in: Some(2), d_out: Some(2) }, &mut stream(9)).unwrap()
    }

    #[test]
    fn width_rules() {
        assert_eq!(WidthRule::SqrtDepth { factor: 1.0 }.width(16).unwrap(), 4);
        assert_eq!(WidthRule::SqrtDepth { factor: 1.0 }.width(17).unwrap(), 5);
        assert_eq!(WidthRule::Linear { factor: 0.5 }.width(7).unwrap(), 4);
        assert_eq!(WidthRule::Constant { width: 9 }.width(100).unwrap(), 9);
    }

    #[test]
    fn stale_cache_detected() {
        let (mut st, ds) = small(ActivationKind::Linear);
        assert!(st.gradient(&ds).is_ok());
        let w = st.weights().to_vec();
        st.set_weights(w).unwrap();
        assert!(matches!(st.gradient(&ds), Err(Error::StaleCache(_))));
    }

    #[test]
    fn blocks_assemble_symmetric() {
        let (st, ds) = small(ActivationKind::Relu);
        let h = st.hessian_blocks(&ds).unwrap().assemble();
        assert!((&h - h.transpose()).amax() < 1e-14);
    }

    #[test]
    fn depth_one_hollowness_saturates() {
        let init: InitScheme = "gaussian:xavier".parse().unwrap();
        let (st, ds) = random_problem(1, 3, ActivationKind::Linear, init, DataModel::default(), &mut stream(1)).unwrap();
        assert!(st.hessian_blocks(&ds).unwrap().hollowness().is_infinite());
    }

    #[test]
    fn dense_cap() {
        let init: InitScheme = "gaussian:xavier".parse().unwrap();
        let (mut st, ds) = random_problem(2, 46, ActivationKind::Linear, init, DataModel { n: 1, d_in: Some(1), d_out: Some(1) }, &mut stream(1)).unwrap();
        assert!(matches!(st.hessian(&ds, HessianMethod::Analytic), Err(Error::SizeLimit(_))));
    }
}
