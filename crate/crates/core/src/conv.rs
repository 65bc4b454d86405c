//! Fully convolutional networks on 1-D lines and 2-D grids.
//!
//! Layers are cross-correlations with `(k-1)/2` padding on each side, so the
//! spatial size is preserved. Activations are stored channel-major:
//! `v[c * positions + p]`. The last layer has no nonlinearity and maps back
//! to the input channels; the task is to reproduce the input.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Error, Result};
use crate::init::{ActivationKind, InitScheme};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Spatial {
    Line { n: usize },
    Grid { r: usize },
}

impl Spatial {
    pub fn positions(&self) -> usize {
        match *self {
            Spatial::Line { n } => n,
            Spatial::Grid { r } => r * r,
        }
    }

    /// Number of spatial dimensions.
    pub fn dims(&self) -> u32 {
        match self {
            Spatial::Line { .. } => 1,
            Spatial::Grid { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zero,
    Circular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvConfig {
    pub spatial: Spatial,
    pub channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub padding: Padding,
    pub depth: usize,
    pub activation: ActivationKind,
    pub init: InitScheme,
}

impl ConvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return domain(format!("kernel size must be odd, got {}", self.kernel));
        }
        if self.channels == 0 || self.in_channels == 0 || self.depth == 0 || self.spatial.positions() == 0 {
            return domain("channels, depth and spatial size must be positive");
        }
        Ok(())
    }

    pub fn taps(&self) -> usize {
        self.kernel.pow(self.spatial.dims())
    }

    /// `(out, in)` channels of layer `l`.
    pub fn layer_channels(&self, l: usize) -> (usize, usize) {
        let cin = if l == 0 { self.in_channels } else { self.channels };
        let cout = if l + 1 == self.depth { self.in_channels } else { self.channels };
        (cout, cin)
    }
}

/// Effective width `k^m c` of a convolution layer.
pub fn effective_width(cfg: &ConvConfig) -> Result<usize> {
    cfg.validate()?;
    Ok(cfg.taps() * cfg.channels)
}

/// Circulant matrix of a 1-D kernel under circular padding:
/// `(K x)_i = sum_t h_t x_{(i + t - (k-1)/2) mod n}`.
pub fn circulant_matrix(h: &[f64], n: usize) -> Result<DMatrix<f64>> {
    if h.is_empty() || h.len() % 2 == 0 {
        return domain("kernel length must be odd");
    }
    if n == 0 {
        return domain("size must be positive");
    }
    let c = (h.len() - 1) / 2;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for (t, ht) in h.iter().enumerate() {
            let j = (i as isize + t as isize - c as isize).rem_euclid(n as isize) as usize;
            k[(i, j)] += ht;
        }
    }
    Ok(k)
}

/// `neighbors[p * taps + t]`: input position read by tap `t` at output `p`.
fn neighbor_table(spatial: Spatial, kernel: usize, padding: Padding) -> Vec<Option<usize>> {
    let c = (kernel as isize - 1) / 2;
    let wrap = |i: isize, n: usize| -> Option<usize> {
        match padding {
            Padding::Circular => Some(i.rem_euclid(n as isize) as usize),
            Padding::Zero => (i >= 0 && i < n as isize).then_some(i as usize),
        }
    };
    let mut out = Vec::new();
    match spatial {
        Spatial::Line { n } => {
            for p in 0..n {
                for t in 0..kernel {
                    out.push(wrap(p as isize + t as isize - c, n));
                }
            }
        }
        Spatial::Grid { r } => {
            for i in 0..r {
                for j in 0..r {
                    for ti in 0..kernel {
                        for tj in 0..kernel {
                            let a = wrap(i as isize + ti as isize - c, r);
                            let b = wrap(j as isize + tj as isize - c, r);
                            out.push(a.zip(b).map(|(a, b)| a * r + b));
                        }
                    }
                }
            }
        }
    }
    out
}

/// A convolutional network with its kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub cfg: ConvConfig,
    /// `kernels[l][(co * cin + ci) * taps + t]`
    pub kernels: Vec<Vec<f64>>,
    nb: Vec<Option<usize>>,
}

/// Per-layer kernel gradients and the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGradient {
    pub loss: f64,
    pub kernels: Vec<Vec<f64>>,
}

impl ConvGradient {
    pub fn layer_norms(&self) -> Vec<f64> {
        self.kernels.iter().map(|k| k.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }

    pub fn total_norm(&self) -> f64 {
        self.kernels.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl ConvNet {
    /// Random kernels; the fan-in of layer `l` is `k^m` times its input channels.
    pub fn sample(cfg: &ConvConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let taps = cfg.taps();
        let kernels = (0..cfg.depth)
            .map(|l| {
                let (co, ci) = cfg.layer_channels(l);
                cfg.init.sample_entries(taps * ci, co * ci * taps, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_kernels(*cfg, kernels)
    }

    pub fn from_kernels(cfg: ConvConfig, kernels: Vec<Vec<f64>>) -> Result<Self> {
        cfg.validate()?;
        if kernels.len() != cfg.depth {
            return Err(Error::Shape("one kernel tensor per layer is required".into()));
        }
        for (l, k) in kernels.iter().enumerate() {
            let (co, ci) = cfg.layer_channels(l);
            if k.len() != co * ci * cfg.taps() {
                return Err(Error::Shape(format!("kernel {l} has {} entries, expected {}", k.len(), co * ci * cfg.taps())));
            }
        }
        let nb = neighbor_table(cfg.spatial, cfg.kernel, cfg.padding);
        Ok(ConvNet { cfg, kernels, nb })
    }

    pub fn num_params(&self) -> usize {
        self.kernels.iter().map(Vec::len).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.kernels.concat()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::Shape("parameter vector has the wrong length".into()));
        }
        let mut off = 0;
        for k in &mut self.kernels {
            let n = k.len();
            k.copy_from_slice(&p[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn conv(&self, l: usize, input: &[f64]) -> Vec<f64> {
        let (co, ci) = self.cfg.layer_channels(l);
        let pn = self.cfg.spatial.positions();
        let taps = self.cfg.taps();
        let k = &self.kernels[l];
        let mut out = vec![0.0; co * pn];
        for o in 0..co {
            for i in 0..ci {
                let kk = &k[(o * ci + i) * taps..(o * ci + i + 1) * taps];
                let inp = &input[i * pn..(i + 1) * pn];
                let dst = &mut out[o * pn..(o + 1) * pn];
                for (p, d) in dst.iter_mut().enumerate() {
                    let nbp = &self.nb[p * taps..(p + 1) * taps];
                    let mut s = 0.0;
                    for (t, q) in nbp.iter().enumerate() {
                        if let Some(q) = q {
                            s += kk[t] * inp[*q];
                        }
                    }
                    *d += s;
                }
            }
        }
        out
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        let want = self.cfg.in_channels * self.cfg.spatial.positions();
        if x.len() != want {
            return Err(Error::Shape(format!("input has {} values, expected {want}", x.len())));
        }
        Ok(())
    }

    /// Forward pass; returns the preactivations of every layer (last = output).
    fn forward_all(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let act = self.cfg.activation;
        let mut pres: Vec<Vec<f64>> = Vec::with_capacity(self.cfg.depth);
        for l in 0..self.cfg.depth {
            let inp: Vec<f64> = if l == 0 { x.to_vec() } else { pres[l - 1].iter().map(|v| v * act.gate(*v)).collect() };
            pres.push(self.conv(l, &inp));
        }
        pres
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_all(x).pop().unwrap())
    }

    /// `(1/2N) sum ||f(x) - x||^2` over the images.
    pub fn loss(&self, images: &[Vec<f64>]) -> Result<f64> {
        if images.is_empty() {
            return invalid("no images");
        }
        let mut s = 0.0;
        for x in images {
            let y = self.forward(x)?;
            s += y.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(s / (2.0 * images.len() as f64))
    }

    /// Exact kernel gradients of [`ConvNet::loss`].
    pub fn gradient(&self, images: &[Vec<f64>]) -> Result<ConvGradient> {
        if images.is_empty() {
            return invalid("no images");
        }
        let act = self.cfg.activation;
        let pn = self.cfg.spatial.positions();
        let taps = self.cfg.taps();
        let n = images.len() as f64;
        let mut grads: Vec<Vec<f64>> = self.kernels.iter().map(|k| vec![0.0; k.len()]).collect();
        let mut loss = 0.0;
        for x in images {
            self.check_input(x)?;
            let pres = self.forward_all(x);
            let out = pres.last().unwrap();
            let mut delta: Vec<f64> = out.iter().zip(x).map(|(a, b)| (a - b) / n).collect();
            loss += out.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * n);
            for l in (0..self.cfg.depth).rev() {
                let (co, ci) = self.cfg.layer_channels(l);
                let inp: Vec<f64> = if l == 0 { x.clone() } else { pres[l - 1].iter().map(|v| v * act.gate(*v)).collect() };
                let k = &self.kernels[l];
                let g = &mut grads[l];
                let mut back = vec![0.0; ci * pn];
                for o in 0..co {
                    let dl = &delta[o * pn..(o + 1) * pn];
                    for i in 0..ci {
                        let base = (o * ci + i) * taps;
                        for p in 0..pn {
                            let dp = dl[p];
                            if dp == 0.0 {
                                continue;
                            }
                            let nbp = &self.nb[p * taps..(p + 1) * taps];
                            for (t, q) in nbp.iter().enumerate() {
                                if let Some(q) = q {
                                    g[base + t] += dp * inp[i * pn + q];
                                    back[i * pn + q] += k[base + t] * dp;
                                }
                            }
                        }
                    }
                }
                if l > 0 {
                    for (b, v) in back.iter_mut().zip(&pres[l - 1]) {
                        *b *= act.gate(*v);
                    }
                    delta = back;
                }
            }
        }
        Ok(ConvGradient { loss, kernels: grads })
    }

    /// Dense matrix of layer `l`, indexed `(co * P + p, ci * P + q)`.
    pub fn dense_layer(&self, l: usize) -> DMatrix<f64> {
        let (co, ci) = self.cfg.layer_channels(l);
        let pn = self.cfg.spatial.positions();
        let taps = self.cfg.taps();
        let mut m = DMatrix::zeros(co * pn, ci * pn);
        for o in 0..co {
            for i in 0..ci {
                for p in 0..pn {
                    for t in 0..taps {
                        if let Some(q) = self.nb[p * taps + t] {
                            m[(o * pn + p, i * pn + q)] += self.kernels[l][(o * ci + i) * taps + t];
                        }
                    }
                }
            }
        }
        m
    }

    /// Kernel gradient implied by a gradient with respect to the dense layer matrix.
    pub fn kernel_grad_from_dense(&self, l: usize, dense: &DMatrix<f64>) -> Vec<f64> {
        let (co, ci) = self.cfg.layer_channels(l);
        let pn = self.cfg.spatial.positions();
        let taps = self.cfg.taps();
        let mut g = vec![0.0; co * ci * taps];
        for o in 0..co {
            for i in 0..ci {
                for p in 0..pn {
                    for t in 0..taps {
                        if let Some(q) = self.nb[p * taps + t] {
                            g[(o * ci + i) * taps + t] += dense[(o * pn + p, i * pn + q)];
                        }
                    }
                }
            }
        }
        g
    }

    /// Hessian entries `(i, j, H_ij)` from central differences of the analytic
    /// gradient: `cols` random columns, `rows_per_col` random rows each (the
    /// diagonal entry is always among them).
    pub fn sample_hessian(&self, images: &[Vec<f64>], cols: usize, rows_per_col: usize, h: f64, rng: &mut Rng) -> Result<Vec<(usize, usize, f64)>> {
        if !(h > 0.0) {
            return domain("finite-difference step must be positive");
        }
        let np = self.num_params();
        let p0 = self.params();
        let mut probe = self.clone();
        let mut out = Vec::new();
        let cols = cols.min(np);
        for j in sample_indices(rng, np, cols).into_iter() {
            let step = h * p0[j].abs().max(1.0);
            let mut p = p0.clone();
            p[j] += step;
            probe.set_params(&p)?;
            let gp = probe.gradient(images)?.kernels.concat();
            p[j] = p0[j] - step;
            probe.set_params(&p)?;
            let gm = probe.gradient(images)?.kernels.concat();
            let mut rows: Vec<usize> = sample_indices(rng, np, rows_per_col.min(np)).into_iter().filter(|&i| i != j).collect();
            rows.truncate(rows_per_col.saturating_sub(1));
            rows.push(j);
            for i in rows {
                out.push((i, j, (gp[i] - gm[i]) / (2.0 * step)));
            }
        }
        Ok(out)
    }
}

/// `count` images of iid standard normal pixels.
pub fn gaussian_images(cfg: &ConvConfig, count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = cfg.in_channels * cfg.spatial.positions();
    (0..count).map(|_| (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()).collect()
}

/// Raw image tensor: header of four little-endian `u32`
/// `(count, channels, height, width)` followed by little-endian `f32` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn read(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut hdr = [0u8; 16];
        f.read_exact(&mut hdr)?;
        let u = |i: usize| u32::from_le_bytes(hdr[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (count, channels, height, width) = (u(0), u(1), u(2), u(3));
        let n = count
            .checked_mul(channels)
            .and_then(|v| v.checked_mul(height))
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Error::InvalidArgument("tensor header overflows".into()))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        if bytes.len() != 4 * n {
            return invalid(format!("tensor file holds {} bytes of data, header promises {}", bytes.len(), 4 * n));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(RawTensor { count, channels, height, width, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if self.data.len() != self.count * self.channels * self.height * self.width {
            return Err(Error::Shape("tensor data does not match its header".into()));
        }
        let mut f = std::fs::File::create(path)?;
        for v in [self.count, self.channels, self.height, self.width] {
            f.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in &self.data {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Images in the channel-major layout used by [`ConvNet`].
    pub fn images(&self, cfg: &ConvConfig) -> Result<Vec<Vec<f64>>> {
        let ok = match cfg.spatial {
            Spatial::Grid { r } => self.height == r && self.width == r,
            Spatial::Line { n } => self.height == 1 && self.width == n,
        };
        if !ok || self.channels != cfg.in_channels {
            return Err(Error::Shape("tensor does not match the network input".into()));
        }
        let per = self.channels * self.height * self.width;
        Ok(self.data.chunks_exact(per).map(|c| c.iter().map(|v| *v as f64).collect()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circulant_of_ones() {
        let k = circulant_matrix(&[1.0, 1.0, 1.0], 3).unwrap();
        let x = nalgebra::DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert_eq!((&k * x).as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn circulant_layout() {
        let k = circulant_matrix(&[1.0, 2.0, 3.0], 3).unwrap();
        assert_eq!(k.row(0).iter().copied().collect::<Vec<_>>(), vec![2.0, 3.0, 1.0]);
        assert_eq!(k.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
        assert_eq!(k.row(2).iter().copied().collect::<Vec<_>>(), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(circulant_matrix(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn effective_widths() {
        let mut cfg = ConvConfig {
            spatial: Spatial::Grid { r: 7 },
            channels: 8,
            in_channels: 1,
            kernel: 3,
            padding: Padding::Zero,
            depth: 2,
            activation: ActivationKind::Relu,
            init: "gaussian:he".parse().unwrap(),
        };
        assert_eq!(effective_width(&cfg).unwrap(), 72);
        cfg.spatial = Spatial::Line { n: 7 };
        assert_eq!(effective_width(&cfg).unwrap(), 24);
    }
}
