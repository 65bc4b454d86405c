//! Random MLPs: forward pass, loss, backprop gradients, Hessians and spectra.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use vanishlab::init::{ActivationKind, InitScheme};
use vanishlab::mlp::{self, random_problem, DataModel, Dataset, GradientStats, HessianMethod, MlpState};
use vanishlab::rng::{stream, sub_seed};
use vanishlab::stats;
use vanishlab::theory::{self, MomentState};
use vanishlab::Error;

fn scheme(s: &str) -> InitScheme {
    s.parse().unwrap()
}

fn small_data() -> DataModel {
    DataModel { n: 4, d_in: Some(2), d_out: Some(2) }
}

/// A problem whose preactivations all stay at least `1e-4` away from zero
/// and whose gradient is not identically zero.
fn generic(depth: usize, width: usize, act: ActivationKind, seed: u64) -> (MlpState, Dataset) {
    for t in 0..1000 {
        let (st, ds) = random_problem(depth, width, act, scheme("gaussian:he"), small_data(), &mut stream(sub_seed(seed, t))).unwrap();
        let alive = st.gradient(&ds).unwrap().iter().any(|g| g.amax() > 0.0);
        if act == ActivationKind::Linear || (alive && st.min_abs_preactivation(&ds).unwrap() > 1e-4) {
            return (st, ds);
        }
    }
    panic!("no generic point");
}

/// Straightforward loop evaluation of the network on plain vectors.
fn naive_output(st: &MlpState, x: &[f64]) -> Vec<f64> {
    let (a, b) = st.boundary();
    let gate = |v: f64| if st.activation == ActivationKind::Relu && v <= 0.0 { 0.0 } else { v };
    let apply = |m: &DMatrix<f64>, v: &[f64]| -> Vec<f64> {
        (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)] * v[j]).sum()).collect()
    };
    let mut h: Vec<f64> = apply(a, x).into_iter().map(gate).collect();
    for w in st.weights() {
        h = apply(w, &h).into_iter().map(gate).collect();
    }
    apply(b, &h)
}

#[test]
fn identity_network_is_the_identity() {
    let d = 4;
    let i = DMatrix::identity(d, d);
    let st = MlpState::from_matrices(i.clone(), i.clone(), vec![i.clone(); 3], ActivationKind::Linear).unwrap();
    let x = DVector::from_vec(vec![0.5, -1.0, 2.0, 3.5]);
    assert_eq!(st.output(&x).unwrap(), x);
}

#[test]
fn dead_relu_path_outputs_zero() {
    let d = 3;
    let i = DMatrix::identity(d, d);
    let st = MlpState::from_matrices(i.clone(), i.clone(), vec![i.clone(); 2], ActivationKind::Relu).unwrap();
    let x = DVector::from_vec(vec![-1.0, -2.0, -0.5]);
    assert!(st.output(&x).unwrap().iter().all(|v| *v == 0.0));
    let z = DVector::from_vec(vec![0.0, 0.0, 0.0]);
    assert!(st.output(&z).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn wrong_input_dimension_is_a_shape_error() {
    let (st, _) = random_problem(2, 3, ActivationKind::Linear, scheme("gaussian:xavier"), small_data(), &mut stream(0)).unwrap();
    assert!(matches!(st.output(&DVector::zeros(5)), Err(Error::Shape(_))));
}

#[test]
fn loss_vectors() {
    let (mut st, ds) = random_problem(3, 3, ActivationKind::Relu, scheme("gaussian:he"), small_data(), &mut stream(4)).unwrap();
    let targets = ds.inputs.iter().map(|x| st.output(x).unwrap()).collect();
    let fitted = Dataset::new(ds.inputs.clone(), targets).unwrap();
    assert_eq!(st.loss(&fitted).unwrap(), 0.0);
    st.prepare(&fitted).unwrap();
    assert!(st.gradient(&fitted).unwrap().iter().all(|g| g.amax() == 0.0));

    let d = 3;
    let i = DMatrix::identity(d, d);
    let zero_out = MlpState::from_matrices(DMatrix::identity(d, 2), DMatrix::zeros(2, d), vec![i; 2], ActivationKind::Linear).unwrap();
    let y = DVector::from_vec(vec![3.0, -4.0]);
    let one = Dataset::new(vec![DVector::from_vec(vec![1.0, 1.0])], vec![y]).unwrap();
    assert_eq!(zero_out.loss(&one).unwrap(), 12.5);
}

#[test]
fn loss_matches_naive_evaluation() {
    for (k, act) in [ActivationKind::Linear, ActivationKind::Relu].into_iter().enumerate() {
        let (st, ds) = random_problem(5, 4, act, scheme("uniform:he"), DataModel { n: 7, d_in: Some(3), d_out: Some(2) }, &mut stream(k as u64)).unwrap();
        let mut s = 0.0;
        for (x, y) in ds.inputs.iter().zip(&ds.targets) {
            let out = naive_output(&st, x.as_slice());
            s += out.iter().zip(y.iter()).map(|(o, t)| (t - o) * (t - o)).sum::<f64>();
        }
        let naive = s / (2.0 * ds.len() as f64);
        let fast = st.loss(&ds).unwrap();
        assert!((fast - naive).abs() <= 1e-15 * naive.max(1e-300) * 4.0, "{fast} vs {naive}");
    }
}

#[test]
fn stale_cache_is_reported() {
    let (mut st, ds) = random_problem(2, 3, ActivationKind::Linear, scheme("gaussian:xavier"), small_data(), &mut stream(2)).unwrap();
    let p = st.params();
    st.set_params(&p).unwrap();
    assert!(matches!(st.gradient(&ds), Err(Error::StaleCache(_))));
    st.prepare(&ds).unwrap();
    assert!(st.gradient(&ds).is_ok());
}

fn fd_gradient_error(st: &MlpState, ds: &Dataset, count: usize, seed: u64) -> f64 {
    let g = st.gradient_flat(ds).unwrap();
    let p0 = st.params();
    let mut probe = st.clone();
    let mut rng = stream(seed);
    let mut worst: f64 = 0.0;
    let scale = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    for _ in 0..count {
        let j = rng.random_range(0..p0.len());
        let h = 1e-6 * p0[j].abs().max(1.0);
        let mut p = p0.clone();
        p[j] += h;
        probe.set_params(&p).unwrap();
        let up = probe.loss(ds).unwrap();
        p[j] = p0[j] - h;
        probe.set_params(&p).unwrap();
        let down = probe.loss(ds).unwrap();
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - g[j]).abs() / scale);
    }
    worst
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..5 {
        let (st, ds) = generic(4, 3, ActivationKind::Linear, seed);
        let e = fd_gradient_error(&st, &ds, 50, seed);
        assert!(e < 1e-6, "linear: {e:e}");
        let (st, ds) = generic(4, 3, ActivationKind::Relu, 100 + seed);
        let e = fd_gradient_error(&st, &ds, 50, seed);
        assert!(e < 1e-5, "relu: {e:e}");
    }
}

#[test]
fn hessian_matches_finite_differences() {
    for (l, d, act) in [(4, 3, ActivationKind::Linear), (6, 3, ActivationKind::Linear), (4, 4, ActivationKind::Linear), (3, 3, ActivationKind::Relu)] {
        let (mut st, ds) = generic(l, d, act, 7);
        let ha = st.hessian(&ds, HessianMethod::Analytic).unwrap();
        let hf = st.hessian(&ds, HessianMethod::FiniteDifference { h: 1e-5 }).unwrap();
        let err = (&ha - &hf).amax();
        assert!(err < 1e-6 * (1.0 + ha.amax()), "L={l} d={d} {}: {err:e}", act.name());
    }
}

#[test]
fn analytic_hessian_is_symmetric() {
    let (mut st, ds) = generic(5, 3, ActivationKind::Linear, 3);
    let h = st.hessian(&ds, HessianMethod::Analytic).unwrap();
    assert!((&h - h.transpose()).amax() < 1e-10);
}

#[test]
fn zero_residual_hessian_is_positive_semidefinite() {
    for act in [ActivationKind::Linear, ActivationKind::Relu] {
        let (mut st, ds) = generic(3, 3, act, 11);
        let targets = ds.inputs.iter().map(|x| st.output(x).unwrap()).collect();
        let fitted = Dataset::new(ds.inputs.clone(), targets).unwrap();
        let h = st.hessian(&fitted, HessianMethod::Analytic).unwrap();
        let eig = mlp::eigenspectrum(&h).unwrap();
        assert!(*eig.last().unwrap() >= -1e-10, "{}", eig.last().unwrap());
    }
}

#[test]
fn dense_cap_is_enforced() {
    let (mut st, ds) = random_problem(3, 37, ActivationKind::Linear, scheme("gaussian:xavier"), DataModel { n: 1, d_in: Some(1), d_out: Some(1) }, &mut stream(0)).unwrap();
    assert!(matches!(st.hessian(&ds, HessianMethod::Analytic), Err(Error::SizeLimit(_))));
}

#[test]
fn eigenspectrum_vectors() {
    for l in [1, 3, 6] {
        let e = mlp::eigenspectrum(&DMatrix::from_element(l, l, 1.0)).unwrap();
        assert!((e[0] - l as f64).abs() < 1e-12);
        assert!(e[1..].iter().all(|v| v.abs() < 1e-12));
    }
    let e = mlp::eigenspectrum(&DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0])).unwrap();
    assert!((e[0] - 1.0).abs() < 1e-15 && (e[1] + 1.0).abs() < 1e-15);
    let mut bad = DMatrix::identity(2, 2);
    bad[(0, 1)] = f64::NAN;
    assert!(mlp::eigenspectrum(&bad).is_err());
}

#[test]
fn hollowness_vectors() {
    assert!(mlp::hollowness(&DMatrix::identity(5, 5), 1).unwrap().is_infinite());
    assert_eq!(mlp::hollowness(&DMatrix::from_element(6, 6, -2.0), 2).unwrap(), 1.0);
    assert!(mlp::hollowness(&DMatrix::identity(5, 5), 2).is_err());
    let (st, ds) = generic(4, 3, ActivationKind::Linear, 5);
    let hb = st.hessian_blocks(&ds).unwrap();
    let a = mlp::hollowness(&hb.assemble(), 9).unwrap();
    assert!((a - hb.hollowness()).abs() < 1e-12 * a);
}

#[test]
fn product_moments_match_theory() {
    let (d, k, trials) = (10, 12, 100_000);
    let init = scheme("gaussian:xavier");
    let mut rng = stream(77);
    let (mut s2, mut s2sq, mut s4, mut s4sq) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..trials {
        let mut z = DVector::zeros(d);
        z[0] = 1.0;
        for _ in 0..k {
            z = init.sample_matrix(d, d, &mut rng).unwrap() * z;
        }
        let n2 = z.norm_squared();
        s2 += n2;
        s2sq += n2 * n2;
        s4 += n2 * n2;
        s4sq += n2.powi(4);
    }
    let n = trials as f64;
    let se = |s: f64, sq: f64| ((sq / n - (s / n).powi(2)) / (n - 1.0)).sqrt();
    let th = theory::forward_moments(MomentState::unit_vector(), d, 0.1, 3.0, 1.0, k).unwrap();
    assert!((th.m4_2 - 8.916).abs() < 1e-3);
    let (m2, m4) = (s2 / n, s4 / n);
    assert!((m2 - 1.0).abs() < 3.0 * se(s2, s2sq), "{m2} vs 1");
    assert!((m4 - th.m4_2).abs() < 3.0 * se(s4, s4sq), "{m4} vs {}", th.m4_2);
}

#[test]
fn lecun_gradient_norms_shrink_with_depth() {
    let init = scheme("uniform:lecun");
    let seeds = 20;
    let data = DataModel { n: 16, d_in: Some(1), d_out: Some(1) };
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for l in [4usize, 8, 12, 16] {
        let mut per_seed = Vec::new();
        for s in 0..seeds {
            let (st, ds) = random_problem(l, l, ActivationKind::Linear, init, data, &mut stream(sub_seed(l as u64, s))).unwrap();
            per_seed.push(GradientStats::from_layers(&st.gradient(&ds).unwrap()).mean_log_layer_norm);
        }
        xs.push(l as f64);
        ys.push(stats::mean(&per_seed));
    }
    let slope = stats::fit_line(&xs, &ys).unwrap().0;
    let target = 0.5 * (1.0f64 / 3.0).ln();
    assert!(((slope - target) / target).abs() <= 0.15, "slope {slope:.4} vs {target:.4}");
}
