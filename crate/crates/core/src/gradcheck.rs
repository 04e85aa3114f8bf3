//! Central finite-difference oracle for gradients.
//!
//! Only forward values are used here, so the oracle stays independent of
//! the reverse-mode rules it is checking.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Errors below this absolute size count as exact.
pub const ABS_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error among elements whose absolute error exceeds
    /// [`ABS_FLOOR`]; zero when none does.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out)
        .item()
        .ok_or_else(|| Error::invalid("gradcheck function must return a scalar"))
}

/// Analytic gradients of `f` with respect to every input.
pub fn analytic<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect())
}

/// Central differences `(f(x + h) - f(x - h)) / 2h` for every input element.
pub fn numeric<F>(inputs: &[Tensor], f: &F, h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work, f)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work, f)?;
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Compares analytic against numeric gradients of a scalar function.
pub fn check<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let a = analytic(inputs, &f)?;
    let n = numeric(inputs, &f, h)?;
    Ok(compare(&a, &n))
}

pub fn compare(analytic: &[Tensor], numeric: &[Tensor]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            report.checked += 1;
            let abs = (x - y).abs();
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs.is_nan() {
                report.max_rel_err = f64::INFINITY;
                report.worst = Some((i, j));
                continue;
            }
            if abs < ABS_FLOOR {
                continue;
            }
            let rel = abs / x.abs().max(y.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, j));
            }
        }
    }
    report
}

/// Scalar-valued test function over a list of inputs.
pub type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// A random small instance of one primitive, reduced to a scalar.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: CaseFn,
}

/// Every primitive exercised by [`primitive_case`].
pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "affine",
    "matmul",
    "add_bias",
    "conv2d",
    "relu",
    "sigmoid",
    "global_avg_pool",
    "reshape",
    "scale_samples",
    "batch_norm_batch",
    "batch_norm_fixed",
    "softmax_cross_entropy",
    "softmax_kl",
    "binary_cross_entropy",
    "margin_loss",
    "mean",
];

mod cases {
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub(super) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
            .expect("shape matches data")
    }

    /// Values in `[-1, 1]` bounded away from zero (for kinks at the origin).
    pub(super) fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let mut t = uniform(rng, shape, -1.0, 1.0);
        for v in t.data_mut() {
            if v.abs() < 1e-2 {
                *v = if *v < 0.0 { -0.5 } else { 0.5 };
            }
        }
        t
    }

    /// Reduces `out` to a scalar through fixed random weights.
    pub(super) fn reduce(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w)?;
        g.mean(prod)
    }

    pub(super) fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
        vec![rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)]
    }
}

/// Builds a seeded random instance (at most 64 elements per input) of the
/// named primitive. Unknown names are rejected.
pub fn primitive_case(name: &str, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Case> {
    use cases::*;
    use rand::Rng;

    let case = |name: &'static str, inputs: Vec<Tensor>, f: CaseFn| Case { name, inputs, f };
    Ok(match name {
        "add" | "sub" | "mul" => {
            let s = small_shape(rng);
            let w = uniform(rng, &s, -1.0, 1.0);
            let inputs = vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)];
            let op: &'static str = match name {
                "add" => "add",
                "sub" => "sub",
                _ => "mul",
            };
            case(
                op,
                inputs,
                Box::new(move |g, v| {
                    let out = match op {
                        "add" => g.add(v[0], v[1])?,
                        "sub" => g.sub(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    reduce(g, out, &w)
                }),
            )
        }
        "affine" => {
            let s = small_shape(rng);
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
            let w = uniform(rng, &s, -1.0, 1.0);
            case(
                "affine",
                vec![uniform(rng, &s, -1.0, 1.0)],
                Box::new(move |g, v| {
                    let out = g.affine(v[0], a, b);
                    reduce(g, out, &w)
                }),
            )
        }
        "matmul" => {
            let (m, k, n) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=5));
            let w = uniform(rng, &[m, n], -1.0, 1.0);
            case(
                "matmul",
                vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)],
                Box::new(move |g, v| {
                    let out = g.matmul(v[0], v[1])?;
                    reduce(g, out, &w)
                }),
            )
        }
        "add_bias" => {
            let (n, f) = (rng.random_range(1..=6), rng.random_range(1..=6));
            let w = uniform(rng, &[n, f], -1.0, 1.0);
            case(
                "add_bias",
                vec![uniform(rng, &[n, f], -1.0, 1.0), uniform(rng, &[f], -1.0, 1.0)],
                Box::new(move |g, v| {
                    let out = g.add_bias(v[0], v[1])?;
                    reduce(g, out, &w)
                }),
            )
        }
        "conv2d" => {
            let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=2));
            let (h, wd) = (rng.random_range(3..=4), rng.random_range(3..=4));
            let oc = rng.random_range(1..=3);
            let k = if rng.random_bool(0.5) { 3 } else { 1 };
            let stride = rng.random_range(1..=2);
            let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
            let x = uniform(rng, &[n, c, h, wd], -1.0, 1.0);
            let kernel = uniform(rng, &[oc, c, k, k], -1.0, 1.0);
            let geom = crate::tensor::ConvGeom::new(x.shape(), kernel.shape(), stride, pad)
                .expect("valid geometry");
            let w = uniform(rng, &geom.out_shape(), -1.0, 1.0);
            case(
                "conv2d",
                vec![x, kernel],
                Box::new(move |g, v| {
                    let out = g.conv2d(v[0], v[1], stride, pad)?;
                    reduce(g, out, &w)
                }),
            )
        }
        "relu" | "sigmoid" => {
            let s = small_shape(rng);
            let w = uniform(rng, &s, -1.0, 1.0);
            let relu = name == "relu";
            let x = if relu {
                away_from_zero(rng, &s)
            } else {
                uniform(rng, &s, -4.0, 4.0)
            };
            case(
                if relu { "relu" } else { "sigmoid" },
                vec![x],
                Box::new(move |g, v| {
                    let out = if relu { g.relu(v[0]) } else { g.sigmoid(v[0]) };
                    reduce(g, out, &w)
                }),
            )
        }
        "global_avg_pool" => {
            let s = [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
            let w = uniform(rng, &[s[0], s[1]], -1.0, 1.0);
            case(
                "global_avg_pool",
                vec![uniform(rng, &s, -1.0, 1.0)],
                Box::new(move |g, v| {
                    let out = g.global_avg_pool(v[0])?;
                    reduce(g, out, &w)
                }),
            )
        }
        "reshape" => {
            let s = small_shape(rng);
            let flat = [s.iter().product::<usize>()];
            let w = uniform(rng, &flat, -1.0, 1.0);
            case(
                "reshape",
                vec![uniform(rng, &s, -1.0, 1.0)],
                Box::new(move |g, v| {
                    let out = g.reshape(v[0], &flat)?;
                    reduce(g, out, &w)
                }),
            )
        }
        "scale_samples" => {
            let s = small_shape(rng);
            let w = uniform(rng, &s, -1.0, 1.0);
            case(
                "scale_samples",
                vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &[s[0]], 0.0, 1.0)],
                Box::new(move |g, v| {
                    let out = g.scale_samples(v[0], v[1])?;
                    reduce(g, out, &w)
                }),
            )
        }
        "batch_norm_batch" | "batch_norm_fixed" => {
            let fixed = name == "batch_norm_fixed";
            let s = [rng.random_range(2..=3), rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(2..=3)];
            let c = s[1];
            let w = uniform(rng, &s, -1.0, 1.0);
            let mean = uniform(rng, &[c], -0.5, 0.5).into_data();
            let var = uniform(rng, &[c], 0.2, 1.5).into_data();
            case(
                if fixed { "batch_norm_fixed" } else { "batch_norm_batch" },
                vec![
                    uniform(rng, &s, -1.0, 1.0),
                    uniform(rng, &[c], 0.5, 1.5),
                    uniform(rng, &[c], -0.5, 0.5),
                ],
                Box::new(move |g, v| {
                    let stats = if fixed {
                        crate::tensor::BnStats::Fixed { mean: &mean, var: &var }
                    } else {
                        crate::tensor::BnStats::Batch
                    };
                    let (out, _) = g.batch_norm(v[0], v[1], v[2], stats, 1e-5)?;
                    reduce(g, out, &w)
                }),
            )
        }
        "softmax_cross_entropy" => {
            let (n, c) = (rng.random_range(1..=6), rng.random_range(2..=6));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            case(
                "softmax_cross_entropy",
                vec![uniform(rng, &[n, c], -3.0, 3.0)],
                Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
            )
        }
        "softmax_kl" => {
            let (n, c) = (rng.random_range(1..=6), rng.random_range(2..=6));
            case(
                "softmax_kl",
                vec![uniform(rng, &[n, c], -3.0, 3.0), uniform(rng, &[n, c], -3.0, 3.0)],
                Box::new(|g, v| g.softmax_kl(v[0], v[1])),
            )
        }
        "binary_cross_entropy" => {
            let n = rng.random_range(1..=8);
            let target: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            case(
                "binary_cross_entropy",
                vec![uniform(rng, &[n], 0.05, 0.95)],
                Box::new(move |g, v| g.binary_cross_entropy(v[0], &target)),
            )
        }
        "margin_loss" => {
            let (n, c) = (rng.random_range(1..=6), rng.random_range(2..=6));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let mut logits = uniform(rng, &[n, c], -3.0, 3.0);
            // Spread entries so no two in a row are within the FD step of a tie.
            for (i, v) in logits.data_mut().iter_mut().enumerate() {
                *v += 0.37 * (i % c) as f64;
            }
            let kappa = if rng.random_bool(0.5) { 0.0 } else { 10.0 };
            case(
                "margin_loss",
                vec![logits],
                Box::new(move |g, v| g.margin_loss(v[0], &labels, kappa)),
            )
        }
        "mean" => {
            let s = small_shape(rng);
            case("mean", vec![uniform(rng, &s, -1.0, 1.0)], Box::new(|g, v| g.mean(v[0])))
        }
        other => return Err(Error::invalid(format!("unknown primitive {other}"))),
    })
}
