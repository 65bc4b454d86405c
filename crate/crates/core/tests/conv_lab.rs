//! Convolutional networks: effective width, circulant equivalence, gradients,
//! equivariance and padding effects.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng as _;
use vanishlab::conv::{self, circulant_matrix, effective_width, ConvConfig, ConvNet, Padding, RawTensor, Spatial};
use vanishlab::init::{ActivationKind, InitScheme};
use vanishlab::mlp::{Dataset, MlpState};
use vanishlab::rng::{stream, sub_seed};
use vanishlab::stats;

fn scheme(s: &str) -> InitScheme {
    s.parse().unwrap()
}

fn config(spatial: Spatial, channels: usize, kernel: usize, padding: Padding, depth: usize, activation: ActivationKind) -> ConvConfig {
    let init = scheme(if activation == ActivationKind::Relu { "gaussian:he" } else { "gaussian:xavier" });
    ConvConfig { spatial, channels, in_channels: 1, kernel, padding, depth, activation, init }
}

#[test]
fn effective_width_vectors() {
    let grid = config(Spatial::Grid { r: 5 }, 4, 3, Padding::Zero, 2, ActivationKind::Relu);
    assert_eq!(effective_width(&grid).unwrap(), 36);
    let one = config(Spatial::Grid { r: 5 }, 1, 1, Padding::Zero, 2, ActivationKind::Relu);
    assert_eq!(effective_width(&one).unwrap(), 1);
    let line = config(Spatial::Line { n: 3 }, 1, 3, Padding::Circular, 2, ActivationKind::Linear);
    assert_eq!(effective_width(&line).unwrap(), 3);
    let even = config(Spatial::Line { n: 3 }, 1, 2, Padding::Circular, 2, ActivationKind::Linear);
    assert!(effective_width(&even).is_err());
}

#[test]
fn circulant_vectors() {
    assert_eq!(circulant_matrix(&[0.0, 1.0, 0.0], 3).unwrap(), DMatrix::identity(3, 3));
    let k = circulant_matrix(&[1.0, 1.0, 1.0], 3).unwrap();
    let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    assert_eq!(k * e1, DVector::from_vec(vec![1.0, 1.0, 1.0]));
    assert!(circulant_matrix(&[1.0, 1.0], 3).is_err());
    assert!(circulant_matrix(&[], 3).is_err());
}

#[test]
fn one_layer_conv_is_a_circulant_product() {
    let mut rng = stream(1);
    for n in [3, 4, 7, 12] {
        let cfg = config(Spatial::Line { n }, 1, 3, Padding::Circular, 1, ActivationKind::Linear);
        let net = ConvNet::sample(&cfg, &mut rng).unwrap();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = net.forward(&x).unwrap();
        let yk = circulant_matrix(&net.kernels[0], n).unwrap() * DVector::from_vec(x);
        for (a, b) in y.iter().zip(yk.iter()) {
            assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
        }
    }
}

#[test]
fn zero_kernels_give_zero_output() {
    let cfg = config(Spatial::Grid { r: 4 }, 3, 3, Padding::Zero, 3, ActivationKind::Relu);
    let net = ConvNet::sample(&cfg, &mut stream(0)).unwrap();
    let zeros: Vec<Vec<f64>> = net.kernels.iter().map(|k| vec![0.0; k.len()]).collect();
    let net = ConvNet::from_kernels(cfg, zeros).unwrap();
    let x = conv::gaussian_images(&cfg, 1, &mut stream(1)).pop().unwrap();
    assert!(net.forward(&x).unwrap().iter().all(|v| *v == 0.0));
}

fn fd_error(net: &ConvNet, images: &[Vec<f64>], count: usize, seed: u64) -> f64 {
    let g: Vec<f64> = net.gradient(images).unwrap().kernels.concat();
    let scale = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let p0 = net.params();
    let mut probe = net.clone();
    let mut rng = stream(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let j = rng.random_range(0..p0.len());
        let h = 1e-6 * p0[j].abs().max(1.0);
        let mut p = p0.clone();
        p[j] += h;
        probe.set_params(&p).unwrap();
        let up = probe.loss(images).unwrap();
        p[j] = p0[j] - h;
        probe.set_params(&p).unwrap();
        let down = probe.loss(images).unwrap();
        worst = worst.max(((up - down) / (2.0 * h) - g[j]).abs() / scale);
    }
    worst
}

#[test]
fn gradient_matches_finite_differences() {
    for (i, padding) in [Padding::Zero, Padding::Circular].into_iter().enumerate() {
        for act in [ActivationKind::Linear, ActivationKind::Relu] {
            let cfg = config(Spatial::Grid { r: 5 }, 3, 3, padding, 4, act);
            let mut rng = stream(sub_seed(10, i as u64));
            let net = ConvNet::sample(&cfg, &mut rng).unwrap();
            let images = conv::gaussian_images(&cfg, 2, &mut rng);
            let e = fd_error(&net, &images, 50, i as u64);
            assert!(e < 1e-5, "{padding:?} {}: {e:e}", act.name());
        }
    }
}

#[test]
fn gradient_loss_matches_loss() {
    let cfg = config(Spatial::Line { n: 6 }, 2, 3, Padding::Zero, 3, ActivationKind::Relu);
    let mut rng = stream(3);
    let net = ConvNet::sample(&cfg, &mut rng).unwrap();
    let images = conv::gaussian_images(&cfg, 3, &mut rng);
    let g = net.gradient(&images).unwrap();
    assert!((g.loss - net.loss(&images).unwrap()).abs() < 1e-14 * g.loss.max(1.0));
}

#[test]
fn circular_conv_matches_dense_engine() {
    let mut rng = stream(5);
    for n in [2, 5, 8] {
        for depth in 1..=4 {
            let cfg = ConvConfig { in_channels: 2, ..config(Spatial::Line { n }, 2, 3, Padding::Circular, depth, ActivationKind::Linear) };
            let net = ConvNet::sample(&cfg, &mut rng).unwrap();
            let images = conv::gaussian_images(&cfg, 2, &mut rng);
            let dim = 2 * n;
            let w = (0..depth).map(|l| net.dense_layer(l)).collect();
            let mut st = MlpState::from_matrices(DMatrix::identity(dim, dim), DMatrix::identity(dim, dim), w, ActivationKind::Linear).unwrap();
            let xs: Vec<DVector<f64>> = images.iter().map(|x| DVector::from_column_slice(x)).collect();
            let ds = Dataset::new(xs.clone(), xs).unwrap();
            st.prepare(&ds).unwrap();
            for (x, xv) in images.iter().zip(&ds.inputs) {
                let a = net.forward(x).unwrap();
                let b = st.output(xv).unwrap();
                assert!(a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() <= 1e-12));
            }
            let gc = net.gradient(&images).unwrap();
            let gm = st.gradient(&ds).unwrap();
            for l in 0..depth {
                let gk = net.kernel_grad_from_dense(l, &gm[l]);
                assert!(gk.iter().zip(&gc.kernels[l]).all(|(p, q)| (p - q).abs() <= 1e-12), "n={n} depth={depth} layer {l}");
            }
        }
    }
}

fn shift_line(x: &[f64], channels: usize, n: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        for p in 0..n {
            out[c * n + (p + s) % n] = x[c * n + p];
        }
    }
    out
}

fn shift_grid(x: &[f64], channels: usize, r: usize, si: usize, sj: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let pn = r * r;
    for c in 0..channels {
        for i in 0..r {
            for j in 0..r {
                out[c * pn + ((i + si) % r) * r + (j + sj) % r] = x[c * pn + i * r + j];
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn circular_padding_is_shift_equivariant(seed in 0u64..10_000, n in 3usize..10, s in 1usize..10, depth in 1usize..4, relu in any::<bool>()) {
        let act = if relu { ActivationKind::Relu } else { ActivationKind::Linear };
        let cfg = config(Spatial::Line { n }, 2, 3, Padding::Circular, depth, act);
        let mut rng = stream(seed);
        let net = ConvNet::sample(&cfg, &mut rng).unwrap();
        let x = conv::gaussian_images(&cfg, 1, &mut rng).pop().unwrap();
        let shifted_out = net.forward(&shift_line(&x, 1, n, s % n)).unwrap();
        let out_shifted = shift_line(&net.forward(&x).unwrap(), 1, n, s % n);
        prop_assert_eq!(shifted_out, out_shifted);
    }

    #[test]
    fn circular_grid_is_shift_equivariant(seed in 0u64..10_000, r in 3usize..7, si in 0usize..7, sj in 0usize..7) {
        let cfg = config(Spatial::Grid { r }, 2, 3, Padding::Circular, 2, ActivationKind::Relu);
        let mut rng = stream(seed);
        let net = ConvNet::sample(&cfg, &mut rng).unwrap();
        let x = conv::gaussian_images(&cfg, 1, &mut rng).pop().unwrap();
        let a = net.forward(&shift_grid(&x, 1, r, si % r, sj % r)).unwrap();
        let b = shift_grid(&net.forward(&x).unwrap(), 1, r, si % r, sj % r);
        prop_assert_eq!(a, b);
    }
}

#[test]
fn zero_padding_breaks_equivariance() {
    let n = 6;
    let cfg = config(Spatial::Line { n }, 2, 3, Padding::Zero, 2, ActivationKind::Linear);
    let mut rng = stream(9);
    let net = ConvNet::sample(&cfg, &mut rng).unwrap();
    let x = conv::gaussian_images(&cfg, 1, &mut rng).pop().unwrap();
    let a = net.forward(&shift_line(&x, 1, n, 1)).unwrap();
    let b = shift_line(&net.forward(&x).unwrap(), 1, n, 1);
    assert!(a.iter().zip(&b).any(|(p, q)| (p - q).abs() > 1e-9));
}

#[test]
fn unit_one_by_one_chain_has_depth_independent_gradient() {
    let mut norms = Vec::new();
    for depth in [1, 4, 16, 64] {
        let cfg = config(Spatial::Grid { r: 4 }, 1, 1, Padding::Zero, depth, ActivationKind::Linear);
        let net = ConvNet::from_kernels(cfg, vec![vec![1.0]; depth]).unwrap();
        let images = conv::gaussian_images(&cfg, 3, &mut stream(2));
        norms.push(net.gradient(&images).unwrap().layer_norms());
    }
    for n in &norms {
        assert!(n.iter().all(|v| *v == norms[0][0]));
    }
}

#[test]
fn zero_padding_gradients_shrink_with_depth() {
    let mut medians = Vec::new();
    for (i, l) in [8usize, 16, 32].into_iter().enumerate() {
        let cfg = config(Spatial::Grid { r: 7 }, l / 4, 3, Padding::Zero, l, ActivationKind::Relu);
        let norms: Vec<f64> = (0..20)
            .map(|t| {
                let mut rng = stream(sub_seed(i as u64, t));
                let net = ConvNet::sample(&cfg, &mut rng).unwrap();
                let x = conv::gaussian_images(&cfg, 4, &mut rng);
                net.gradient(&x).unwrap().total_norm()
            })
            .collect();
        medians.push(stats::median(&norms));
    }
    assert!(medians.windows(2).all(|w| w[1] < w[0]), "{medians:?}");
}

#[test]
fn raw_tensor_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("images.bin");
    let t = RawTensor { count: 2, channels: 1, height: 3, width: 3, data: (0..18).map(|v| v as f32 * 0.5).collect() };
    t.write(&path).unwrap();
    let back = RawTensor::read(&path).unwrap();
    assert_eq!(back, t);
    let cfg = config(Spatial::Grid { r: 3 }, 2, 3, Padding::Zero, 2, ActivationKind::Relu);
    let images = back.images(&cfg).unwrap();
    assert_eq!(images.len(), 2);
    assert_eq!(images[1][0], 4.5);
    let wrong = config(Spatial::Grid { r: 4 }, 2, 3, Padding::Zero, 2, ActivationKind::Relu);
    assert!(back.images(&wrong).is_err());
    std::fs::write(&path, [0u8; 7]).unwrap();
    assert!(RawTensor::read(&path).is_err());
}
