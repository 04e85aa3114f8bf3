use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{self, PRIMITIVES};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn tensor_rejects_mismatched_data() {
    assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    assert_eq!(Tensor::zeros(vec![2, 3]).len(), 6);
    assert_eq!(Tensor::scalar(4.0).item(), Some(4.0));
}

#[test]
fn relu_clamps_negatives() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn uniform_logits_cost_ln2() {
    let mut g = Graph::new();
    let z = g.constant(t(&[1, 2], &[0.0, 0.0]));
    let l = g.softmax_cross_entropy(z, &[0]).unwrap();
    assert!((g.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn cross_entropy_survives_huge_logits() {
    let mut g = Graph::new();
    let z = g.constant(t(&[1, 3], &[1000.0, 0.0, -1000.0]));
    let l = g.softmax_cross_entropy(z, &[1]).unwrap();
    assert!((g.value(l).item().unwrap() - 1000.0).abs() < 1e-9);
}

#[test]
fn identity_kernel_is_identity() {
    for algo in [ConvAlgo::Im2col, ConvAlgo::Direct] {
        let mut g = Graph::with_conv_algo(algo);
        let data: Vec<f64> = (0..18).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = g.constant(t(&[2, 1, 3, 3], &data));
        let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![3, 2]));
    let msg = g.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    assert!(g.matmul(a, a).is_err());
    let img = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros(vec![1, 3, 3, 3]));
    assert!(g.conv2d(img, k, 1, 1).is_err());
}

#[test]
fn square_sum_gradient() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let m = g.mean(sq).unwrap();
    let s = g.scale(m, 2.0);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    assert_eq!(g.tape_len(), 0);
}

#[test]
fn relu_gradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[0.0, -1.0, 1.0]));
    let y = g.relu(x);
    let m = g.mean(y).unwrap();
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0 / 3.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let y = g.relu(x);
    assert!(g.backward(y).is_err());
}

#[test]
fn constants_are_not_taped() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2], &[1.0, 2.0]));
    let b = g.relu(a);
    let _ = g.add(a, b).unwrap();
    assert_eq!(g.tape_len(), 0);
}

#[test]
fn conv_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let w = Tensor::new(vec![2, 1, 3, 3], (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let probe = Tensor::new(vec![1, 2, 4, 4], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let f = move |g: &mut Graph, v: &[Var]| {
        let y = g.conv2d(v[0], v[1], 1, 1)?;
        let p = g.constant(probe.clone());
        let yp = g.mul(y, p)?;
        g.mean(yp)
    };
    let report = gradcheck::check(&[x, w], f, 1e-5).unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn every_primitive_matches_finite_differences() {
    for &name in PRIMITIVES {
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let case = gradcheck::primitive_case(name, &mut rng).unwrap();
            assert!(case.inputs.iter().all(|t| t.len() <= 64), "{name}");
            let report = gradcheck::check(&case.inputs, case.f, 1e-5).unwrap();
            assert!(report.passes(1e-4), "{name} trial {trial}: {report:?}");
        }
    }
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::new(vec![2, 2, 3, 3], (0..36).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let w = Tensor::new(vec![3, 2, 3, 3], (0..54).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (a, b) = (0.7, -1.3);
    let run = |ca: f64, cb: f64| {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let wv = g.param(w.clone());
        let y = g.conv2d(xv, wv, 1, 1).unwrap();
        let f = g.relu(y);
        let f = g.mean(f).unwrap();
        let s = g.sigmoid(y);
        let gm = g.mean(s).unwrap();
        let fa = g.scale(f, ca);
        let gb = g.scale(gm, cb);
        let total = g.add(fa, gb).unwrap();
        g.backward(total).unwrap();
        (g.grad(xv).unwrap().clone(), g.grad(wv).unwrap().clone())
    };
    let (fx, fw) = run(1.0, 0.0);
    let (gx, gw) = run(0.0, 1.0);
    let (cx, cw) = run(a, b);
    for ((c, f), g) in cx.data().iter().zip(fx.data()).zip(gx.data()) {
        assert!((c - (a * f + b * g)).abs() < 1e-10);
    }
    for ((c, f), g) in cw.data().iter().zip(fw.data()).zip(gw.data()) {
        assert!((c - (a * f + b * g)).abs() < 1e-10);
    }
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let case = gradcheck::primitive_case("conv2d", &mut rng).unwrap();
        gradcheck::analytic(&case.inputs, &case.f).unwrap()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x), bits(y));
    }
}

#[test]
fn batch_norm_unit_variance_example() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 1], &[1.0, 3.0]));
    let gamma = g.constant(t(&[1], &[1.0]));
    let beta = g.constant(t(&[1], &[0.0]));
    let (y, m) = g.batch_norm(x, gamma, beta, BnStats::Batch, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
    let m = m.unwrap();
    assert_eq!((m.mean[0], m.var[0], m.count), (2.0, 1.0, 2));
}

#[test]
fn margin_loss_is_floored_at_minus_kappa() {
    let mut g = Graph::new();
    let z = g.constant(t(&[2, 3], &[5.0, 1.0, 0.0, 0.0, 4.0, 1.0]));
    let l = g.margin_loss(z, &[0, 0], 0.0).unwrap();
    // row 0: margin 4; row 1: margin -4 floored at 0.
    assert_eq!(g.value(l).item(), Some(2.0));
    let l = g.margin_loss(z, &[0, 0], 10.0).unwrap();
    assert_eq!(g.value(l).item(), Some(0.0));
}

#[test]
fn sigmoid_is_stable_at_extremes() {
    assert_eq!(sigmoid(0.0), 0.5);
    assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
    assert_eq!(sigmoid(800.0), 1.0);
}
