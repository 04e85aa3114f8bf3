//! L-inf bounded gradient attacks: FGSM, iterative FGSM, PGD, a margin-loss
//! (C&W style) PGD and the adaptive attack that also pulls on the weight
//! generator's output.
//!
//! Budgets and step sizes are given in pixel units of 1/255.


use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{forward, ForwardOptions, Model, Path};
use crate::tensor::{Graph, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Fgsm,
    Ifgsm,
    Pgd,
    Cw,
    PgdAdaptive,
}

impl Method {
    pub const NAMES: [&'static str; 5] = ["fgsm", "ifgsm", "pgd", "cw", "pgd-adaptive"];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fgsm => "fgsm",
            Method::Ifgsm => "ifgsm",
            Method::Pgd => "pgd",
            Method::Cw => "cw",
            Method::PgdAdaptive => "pgd-adaptive",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::NAMES
            .iter()
            .position(|&n| n == s)
            .map(|i| {
                [
                    Method::Fgsm,
                    Method::Ifgsm,
                    Method::Pgd,
                    Method::Cw,
                    Method::PgdAdaptive,
                ][i]
            })
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown attack {s:?}; valid: {}",
                    Method::NAMES.join(", ")
                ))
            })
    }
}

/// CE:BCE weights tried by the adaptive sweep.
pub const ADAPTIVE_RATIOS: [(f64, f64); 7] = [
    (10.0, 1.0),
    (5.0, 1.0),
    (2.0, 1.0),
    (1.0, 1.0),
    (1.0, 2.0),
    (1.0, 5.0),
    (1.0, 10.0),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackSpec {
    pub method: Method,
    /// Budget in pixel units.
    pub epsilon: f64,
    pub steps: usize,
    /// Step size in pixel units.
    pub step_size: f64,
    pub random_start: bool,
    /// `(r_ce, r_bce)`, used by the adaptive attack only.
    pub adaptive_ratio: (f64, f64),
    /// W0 value the adaptive attack pulls the weight generator towards.
    pub bce_target: f64,
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> AttackSpec {
        AttackSpec {
            method: Method::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon,
            random_start: false,
            adaptive_ratio: (1.0, 0.0),
            bce_target: 1.0,
        }
    }

    /// `steps` iterations of size `epsilon / 4` from a random start.
    pub fn pgd(epsilon: f64, steps: usize) -> AttackSpec {
        AttackSpec {
            method: Method::Pgd,
            steps,
            step_size: epsilon / 4.0,
            random_start: true,
            ..AttackSpec::fgsm(epsilon)
        }
    }

    /// Defaults for `method`: PGD-style methods take `steps` iterations of
    /// `epsilon / 4`; iterative FGSM has no random start.
    pub fn for_method(method: Method, epsilon: f64, steps: usize) -> AttackSpec {
        match method {
            Method::Fgsm => AttackSpec::fgsm(epsilon),
            Method::Ifgsm => AttackSpec {
                method,
                random_start: false,
                ..AttackSpec::pgd(epsilon, steps)
            },
            _ => AttackSpec {
                method,
                ..AttackSpec::pgd(epsilon, steps)
            },
        }
    }

    pub fn with_epsilon(self, epsilon: f64) -> AttackSpec {
        let ratio = if self.epsilon > 0.0 {
            self.step_size / self.epsilon
        } else {
            match self.method {
                Method::Fgsm => 1.0,
                _ => 0.25,
            }
        };
        AttackSpec {
            epsilon,
            step_size: epsilon * ratio,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("attack spec: {m}")));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.epsilon > 0.0 && !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size must be positive, got {}", self.step_size));
        }
        if self.method == Method::Fgsm && (self.steps != 1 || self.random_start) {
            return bad("FGSM takes exactly one step without random start".into());
        }
        let (rc, rb) = self.adaptive_ratio;
        if self.method == Method::PgdAdaptive
            && (rc < 0.0 || rb < 0.0 || rc + rb == 0.0 || !(0.0..=1.0).contains(&self.bce_target))
        {
            return bad(format!(
                "adaptive ratio {rc}:{rb} / target {} invalid",
                self.bce_target
            ));
        }
        Ok(())
    }
}

/// Scalar the attacker ascends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Mean cross-entropy.
    CrossEntropy,
    /// Negated mean margin `max(z_y - max_{j != y} z_j, -kappa)`.
    Margin { kappa: f64 },
    /// `r_ce * CE - r_bce * BCE(W0, target)`: raises the classification
    /// loss while pulling W0 towards `target`.
    Adaptive { r_ce: f64, r_bce: f64, target: f64 },
}

/// Something an attacker can query for logits and input gradients.
pub trait Classifier {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;

    /// Objective value and its gradient with respect to `x`.
    fn input_gradient(
        &self,
        x: &Tensor,
        labels: &[usize],
        objective: Objective,
    ) -> Result<(f64, Tensor)>;
}

/// A model evaluated along a fixed path with eval-mode BN.
#[derive(Clone, Copy, Debug)]
pub struct Victim<'a> {
    pub model: &'a Model,
    pub path: Path,
    pub w0_override: Option<f64>,
}

impl<'a> Victim<'a> {
    pub fn new(model: &'a Model, path: Path) -> Victim<'a> {
        Victim {
            model,
            path,
            w0_override: None,
        }
    }

    fn options(&self) -> ForwardOptions {
        ForwardOptions {
            w0_override: self.w0_override,
            ..ForwardOptions::eval(self.path)
        }
    }

    /// Per-sample W0 on the fused path.
    pub fn w0(&self, x: &Tensor) -> Result<Vec<f64>> {
        if self.path != Path::Fused {
            return Err(Error::invalid("W0 exists only on the fused path"));
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = forward(self.model, &mut g, xv, self.options())?;
        Ok(g.value(f.w0.expect("fused path has W0")).data().to_vec())
    }
}

impl Classifier for Victim<'_> {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = forward(self.model, &mut g, xv, self.options())?;
        Ok(g.value(f.logits).clone())
    }

    fn input_gradient(
        &self,
        x: &Tensor,
        labels: &[usize],
        objective: Objective,
    ) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let f = forward(self.model, &mut g, xv, self.options())?;
        let loss = match objective {
            Objective::CrossEntropy => g.softmax_cross_entropy(f.logits, labels)?,
            Objective::Margin { kappa } => {
                let m = g.margin_loss(f.logits, labels, kappa)?;
                g.scale(m, -1.0)
            }
            Objective::Adaptive { r_ce, r_bce, target } => {
                let w0 = match (self.w0_override, f.w0) {
                    (None, Some(w0)) => w0,
                    _ => {
                        return Err(Error::invalid(
                            "adaptive attack needs a fused model with a weight generator",
                        ))
                    }
                };
                let ce = g.softmax_cross_entropy(f.logits, labels)?;
                let ce = g.scale(ce, r_ce);
                if r_bce == 0.0 {
                    ce
                } else {
                    let bce = g.binary_cross_entropy(w0, &vec![target; labels.len()])?;
                    let bce = g.scale(bce, r_bce);
                    g.sub(ce, bce)?
                }
            }
        };
        let value = g.value(loss).item().expect("losses are scalar");
        g.backward(loss)?;
        let grad = g
            .take_grad(xv)
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        Ok((value, grad))
    }
}

/// Clean and attacked copies of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvBatch {
    pub clean: Tensor,
    pub adversarial: Tensor,
    pub labels: Vec<usize>,
    pub spec: AttackSpec,
}

impl AdvBatch {
    /// Largest `|x_a - x|` over the batch.
    pub fn linf(&self) -> f64 {
        self.adversarial.max_abs_diff(&self.clean)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `x` onto the L-inf ball of radius `e` around `x0`, then onto
/// `[0, 1]`.
pub fn project(x: &mut [f64], x0: &[f64], e: f64) {
    for (v, &c) in x.iter_mut().zip(x0) {
        *v = v.clamp(c - e, c + e).clamp(0.0, 1.0);
    }
}

fn objective_for(spec: &AttackSpec) -> Objective {
    match spec.method {
        Method::Fgsm | Method::Ifgsm | Method::Pgd => Objective::CrossEntropy,
        Method::Cw => Objective::Margin { kappa: 0.0 },
        Method::PgdAdaptive => Objective::Adaptive {
            r_ce: spec.adaptive_ratio.0,
            r_bce: spec.adaptive_ratio.1,
            target: spec.bce_target,
        },
    }
}

/// `clip(x + (eps/255) sign(dCE/dx), 0, 1)`.
pub fn fgsm(target: &dyn Classifier, x: &Tensor, labels: &[usize], epsilon: f64) -> Result<AdvBatch> {
    let spec = AttackSpec::fgsm(epsilon);
    spec.validate()?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    run(target, x, labels, &spec, &mut rng)
}

pub fn pgd(
    target: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    rng: &mut ChaCha8Rng,
) -> Result<AdvBatch> {
    expect_method(spec, &[Method::Pgd, Method::Ifgsm])?;
    run(target, x, labels, spec, rng)
}

pub fn cw(
    target: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    rng: &mut ChaCha8Rng,
) -> Result<AdvBatch> {
    expect_method(spec, &[Method::Cw])?;
    run(target, x, labels, spec, rng)
}

pub fn pgd_adaptive(
    target: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    rng: &mut ChaCha8Rng,
) -> Result<AdvBatch> {
    expect_method(spec, &[Method::PgdAdaptive])?;
    run(target, x, labels, spec, rng)
}

fn expect_method(spec: &AttackSpec, allowed: &[Method]) -> Result<()> {
    if allowed.contains(&spec.method) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{} spec passed to a {} attack",
            spec.method.name(),
            allowed[0].name()
        )))
    }
}

/// Runs any method.
pub fn run(
    target: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    rng: &mut ChaCha8Rng,
) -> Result<AdvBatch> {
    run_traced(target, x, labels, spec, rng, &mut |_| {})
}

/// Like [`run`], calling `observe` on the starting point and every iterate.
pub fn run_traced(
    target: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    rng: &mut ChaCha8Rng,
    observe: &mut dyn FnMut(&Tensor),
) -> Result<AdvBatch> {
    spec.validate()?;
    if x.shape().first() != Some(&labels.len()) {
        return Err(Error::shape("attack", x.shape(), &[labels.len()]));
    }
    let done = |adversarial: Tensor| AdvBatch {
        clean: x.clone(),
        adversarial,
        labels: labels.to_vec(),
        spec: *spec,
    };
    if spec.epsilon == 0.0 {
        observe(x);
        return Ok(done(x.clone()));
    }
    let e = spec.epsilon / 255.0;
    let alpha = spec.step_size / 255.0;
    let objective = objective_for(spec);
    let x0 = x.data();
    let mut cur = x.clone();
    if spec.random_start {
        for v in cur.data_mut() {
            *v += rng.random_range(-e..e);
        }
        project(cur.data_mut(), x0, e);
    }
    observe(&cur);
    for _ in 0..spec.steps {
        let (_, grad) = target.input_gradient(&cur, labels, objective)?;
        for (v, gv) in cur.data_mut().iter_mut().zip(grad.data()) {
            *v += alpha * sign(*gv);
        }
        project(cur.data_mut(), x0, e);
        observe(&cur);
    }
    Ok(done(cur))
}

/// Row-wise argmax.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
