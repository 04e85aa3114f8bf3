//! Accuracy grids, feature-statistics probes, fusion curves, black-box
//! transfer and the K ablation.
//!
//! Every report is a function of the model parameters, the dataset, the
//! attack settings and the seed. Each batch draws its attack randomness from
//! a stream derived from `(seed, epsilon, batch index)`, so paired runs
//! (white-box against black-box, PGD against the adaptive sweep) see the same
//! random starts.

#[cfg(test)]
mod tests;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::{self, argmax_rows, AttackSpec, Classifier, Method, Victim, ADAPTIVE_RATIOS};
use crate::data::Dataset;
use crate::derive_seed;
use crate::nn::{attach_weight_generator, build_model, forward, Arch, ForwardOptions, Model, Path};
use crate::tensor::{Graph, Tensor};
use crate::train::{self, StageOneConfig, StageTwoConfig, TrainObserver};
use crate::{Error, Result};

/// Strength grid of the accuracy tables.
pub const EPS_GRID: [f64; 5] = [0.0, 1.0, 2.0, 4.0, 8.0];

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

pub fn predict(target: &dyn Classifier, x: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_rows(&target.logits(x)?))
}

fn batch_rng(seed: u64, eps: f64, batch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[eps.to_bits(), batch as u64]))
}

/// Attacks `source` and classifies the result with `judge`. With the same
/// classifier in both roles this is white-box accuracy.
pub fn transfer_accuracy(
    source: &dyn Classifier,
    judge: &dyn Classifier,
    data: &Dataset,
    spec: &AttackSpec,
    seed: u64,
    batch_size: usize,
) -> Result<f64> {
    spec.validate()?;
    let mut hits = 0usize;
    for (b, idx) in crate::data::batch_indices(data.len(), batch_size, 0, false).iter().enumerate() {
        let x = data.images(idx);
        let labels = data.labels_of(idx);
        let x = if spec.epsilon == 0.0 {
            x
        } else {
            let mut rng = batch_rng(seed, spec.epsilon, b);
            attack::run(source, &x, &labels, spec, &mut rng)?.adversarial
        };
        let pred = predict(judge, &x)?;
        hits += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// White-box accuracy of `target` under `spec`; clean accuracy at zero budget.
pub fn attacked_accuracy(
    target: &dyn Classifier,
    data: &Dataset,
    spec: &AttackSpec,
    seed: u64,
    batch_size: usize,
) -> Result<f64> {
    transfer_accuracy(target, target, data, spec, seed, batch_size)
}

/// Accuracy per strength.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model_id: String,
    pub method: String,
    pub seed: u64,
    pub eps: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub average: f64,
    pub seconds: f64,
}

impl EvalReport {
    fn new(model_id: String, method: String, seed: u64, rows: Vec<(f64, f64)>, start: Instant) -> EvalReport {
        let (eps, accuracy): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
        let average = accuracy.iter().sum::<f64>() / accuracy.len().max(1) as f64;
        EvalReport {
            model_id,
            method,
            seed,
            eps,
            accuracy,
            average,
            seconds: start.elapsed().as_secs_f64(),
        }
    }

    pub fn at(&self, eps: f64) -> Option<f64> {
        self.eps.iter().position(|&e| e == eps).map(|i| self.accuracy[i])
    }
}

/// Short identifier of a model's parameters.
pub fn model_id(model: &Model) -> String {
    model.digest(|_| true)[..16].to_string()
}

/// Accuracy of `victim` under `spec` at every strength of `eps_grid`.
pub fn eval_grid(
    victim: &Victim,
    data: &Dataset,
    spec: &AttackSpec,
    eps_grid: &[f64],
    seed: u64,
    batch_size: usize,
) -> Result<EvalReport> {
    let start = Instant::now();
    let rows = eps_grid
        .iter()
        .map(|&e| Ok((e, attacked_accuracy(victim, data, &spec.with_epsilon(e), seed, batch_size)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(model_id(victim.model), spec.method.name().into(), seed, rows, start))
}

/// Transfer attack from `surrogate` onto `defense`.
pub fn blackbox_eval(
    defense: &Victim,
    surrogate: &Victim,
    data: &Dataset,
    spec: &AttackSpec,
    eps_grid: &[f64],
    seed: u64,
    batch_size: usize,
) -> Result<EvalReport> {
    if defense.model.digest(|_| true) == surrogate.model.digest(|_| true) {
        return Err(Error::invalid(
            "surrogate and defense are the same model; that is a white-box attack",
        ));
    }
    let start = Instant::now();
    let rows = eps_grid
        .iter()
        .map(|&e| {
            let s = spec.with_epsilon(e);
            Ok((e, transfer_accuracy(surrogate, defense, data, &s, seed, batch_size)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(
        model_id(defense.model),
        format!("blackbox-{}", spec.method.name()),
        seed,
        rows,
        start,
    ))
}

/// Result of the adaptive attack over several CE:BCE ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveSweep {
    pub epsilon: f64,
    pub rows: Vec<((f64, f64), f64)>,
    pub min_accuracy: f64,
    pub worst_ratio: (f64, f64),
}

/// Adaptive attack at every ratio of `ratios`; the defense is credited with
/// its lowest accuracy.
pub fn adaptive_sweep_with(
    victim: &Victim,
    data: &Dataset,
    epsilon: f64,
    steps: usize,
    ratios: &[(f64, f64)],
    seed: u64,
    batch_size: usize,
) -> Result<AdaptiveSweep> {
    if ratios.is_empty() {
        return Err(Error::invalid("adaptive sweep needs at least one ratio"));
    }
    let mut rows = Vec::with_capacity(ratios.len());
    for &r in ratios {
        let spec = AttackSpec {
            adaptive_ratio: r,
            ..AttackSpec::for_method(Method::PgdAdaptive, epsilon, steps)
        };
        rows.push((r, attacked_accuracy(victim, data, &spec, seed, batch_size)?));
    }
    let &(worst_ratio, min_accuracy) = rows
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty");
    Ok(AdaptiveSweep {
        epsilon,
        rows,
        min_accuracy,
        worst_ratio,
    })
}

/// The seven standard ratios.
pub fn adaptive_sweep(
    victim: &Victim,
    data: &Dataset,
    epsilon: f64,
    steps: usize,
    seed: u64,
    batch_size: usize,
) -> Result<AdaptiveSweep> {
    adaptive_sweep_with(victim, data, epsilon, steps, &ADAPTIVE_RATIOS, seed, batch_size)
}

/// Per-channel statistics of one layer's pre-normalization activations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStatsProbe {
    pub layer: String,
    pub eps: Vec<f64>,
    /// `means[i][c]`: mean of channel `c` at `eps[i]`.
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
    pub samples: usize,
}

/// Channel-averaged mean shift between adjacent strengths.
#[derive(Clone, Debug, PartialEq)]
pub struct Continuity {
    pub jumps: Vec<f64>,
    /// Jump across the widest strength gap.
    pub widest_gap_jump: f64,
    pub continuous: bool,
}

impl FeatureStatsProbe {
    pub fn channels(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    /// Fraction of channels whose mean is monotone (either direction) in ε.
    pub fn monotonicity_score(&self) -> f64 {
        let c = self.channels();
        if c == 0 {
            return 0.0;
        }
        let monotone = (0..c)
            .filter(|&ch| {
                let m: Vec<f64> = self.means.iter().map(|row| row[ch]).collect();
                m.windows(2).all(|w| w[1] >= w[0]) || m.windows(2).all(|w| w[1] <= w[0])
            })
            .count();
        monotone as f64 / c as f64
    }

    /// No adjacent-strength jump may exceed the jump across the widest gap.
    pub fn continuity(&self) -> Continuity {
        let c = self.channels().max(1) as f64;
        let jumps: Vec<f64> = self
            .means
            .windows(2)
            .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (b - a).abs()).sum::<f64>() / c)
            .collect();
        let gaps: Vec<f64> = self.eps.windows(2).map(|w| w[1] - w[0]).collect();
        let widest = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let widest_gap_jump = gaps
            .iter()
            .zip(&jumps)
            .filter(|(g, _)| **g == widest)
            .map(|(_, &j)| j)
            .fold(0.0, f64::max);
        let continuous = jumps.iter().all(|&j| j <= widest_gap_jump);
        Continuity {
            jumps,
            widest_gap_jump,
            continuous,
        }
    }
}

/// Strength and the branch it is routed through.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbePoint {
    pub eps: f64,
    pub branch: usize,
}

/// Pairs each strength of `xi` with its own branch.
pub fn own_branches(xi: &[f64]) -> Vec<ProbePoint> {
    xi.iter()
        .enumerate()
        .map(|(branch, &eps)| ProbePoint { eps, branch })
        .collect()
}

/// Statistics of `layer` when inputs attacked at each strength are routed
/// through that strength's branch. Attacks are PGD with `steps` iterations
/// against the same branch.
pub fn probe_feature_stats(
    model: &Model,
    data: &Dataset,
    layer: &str,
    points: &[ProbePoint],
    steps: usize,
    seed: u64,
    batch_size: usize,
) -> Result<FeatureStatsProbe> {
    let valid = model.arch.probe_points();
    if !valid.iter().any(|p| p == layer) {
        return Err(Error::invalid(format!(
            "unknown layer {layer:?}; valid layers: {}",
            valid.join(", ")
        )));
    }
    if let Some(p) = points.iter().find(|p| p.branch >= model.arch.branches) {
        return Err(Error::invalid(format!(
            "branch {} does not exist; the model has {}",
            p.branch, model.arch.branches
        )));
    }
    let mut means = Vec::with_capacity(points.len());
    let mut vars = Vec::with_capacity(points.len());
    for p in points {
        let victim = Victim::new(model, Path::Branch(p.branch));
        let spec = AttackSpec::pgd(p.eps, steps.max(1));
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for (b, idx) in crate::data::batch_indices(data.len(), batch_size, 0, false).iter().enumerate() {
            let labels = data.labels_of(idx);
            let mut x = data.images(idx);
            if p.eps > 0.0 {
                x = attack::run(&victim, &x, &labels, &spec, &mut batch_rng(seed, p.eps, b))?.adversarial;
            }
            let mut g = Graph::new();
            let xv = g.constant(x);
            let f = forward(model, &mut g, xv, ForwardOptions::eval(Path::Branch(p.branch)))?;
            let (_, v) = f
                .probes
                .iter()
                .find(|(n, _)| n == layer)
                .expect("probe names come from the same layout");
            let t = g.value(*v);
            let (n, c) = (t.shape()[0], t.shape()[1]);
            let hw = t.len() / (n * c);
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            }
            for (i, chunk) in t.data().chunks(hw).enumerate() {
                let ch = i % c;
                for &a in chunk {
                    sum[ch] += a;
                    sq[ch] += a * a;
                }
            }
            count += n * hw;
        }
        let m: Vec<f64> = sum.iter().map(|s| s / count.max(1) as f64).collect();
        let var = sq
            .iter()
            .zip(&m)
            .map(|(s, mu)| (s / count.max(1) as f64 - mu * mu).max(0.0))
            .collect();
        means.push(m);
        vars.push(var);
    }
    Ok(FeatureStatsProbe {
        layer: layer.to_string(),
        eps: points.iter().map(|p| p.eps).collect(),
        means,
        vars,
        samples: data.len(),
    })
}

/// Mean and standard deviation of W1 per strength.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionCurve {
    pub eps: Vec<f64>,
    pub w1_mean: Vec<f64>,
    pub w1_std: Vec<f64>,
}

impl FusionCurve {
    pub fn spearman(&self) -> f64 {
        spearman(&self.eps, &self.w1_mean)
    }
}

/// W1 of the fused model on inputs attacked (PGD, fused path) at each
/// strength. `w0_override` replaces the weight generator by a constant.
pub fn fusion_curve(
    model: &Model,
    data: &Dataset,
    eps: &[f64],
    steps: usize,
    w0_override: Option<f64>,
    seed: u64,
    batch_size: usize,
) -> Result<FusionCurve> {
    if !model.has_weight_generator() {
        return Err(Error::invalid("fusion curve needs a model with a weight generator"));
    }
    let victim = Victim {
        w0_override,
        ..Victim::new(model, Path::Fused)
    };
    let mut w1_mean = Vec::with_capacity(eps.len());
    let mut w1_std = Vec::with_capacity(eps.len());
    for &e in eps {
        let spec = AttackSpec::pgd(e, steps.max(1));
        let mut w1 = Vec::with_capacity(data.len());
        for (b, idx) in crate::data::batch_indices(data.len(), batch_size, 0, false).iter().enumerate() {
            let labels = data.labels_of(idx);
            let mut x = data.images(idx);
            if e > 0.0 {
                x = attack::run(&victim, &x, &labels, &spec, &mut batch_rng(seed, e, b))?.adversarial;
            }
            w1.extend(victim.w0(&x)?.iter().map(|w| 1.0 - w));
        }
        let n = w1.len().max(1) as f64;
        let mean = w1.iter().sum::<f64>() / n;
        let var = w1.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n;
        w1_mean.push(mean);
        w1_std.push(var.sqrt());
    }
    Ok(FusionCurve {
        eps: eps.to_vec(),
        w1_mean,
        w1_std,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. Zero when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Shared settings of a K ablation.
#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub arch: Arch,
    pub stage1: StageOneConfig,
    pub stage2: StageTwoConfig,
    pub eval_steps: usize,
    pub eps_grid: Vec<f64>,
    pub seed: u64,
    pub batch_size: usize,
}

/// One ablation row: the K used and the fused model's grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub k: usize,
    pub report: EvalReport,
}

/// Runs both training stages for each K and evaluates the fused model.
pub fn k_ablation(
    train_data: &Dataset,
    test_data: &Dataset,
    ks: &[usize],
    cfg: &AblationConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<AblationRow>> {
    if let Some(k) = ks.iter().find(|k| ![2, 3, 5, 9].contains(*k)) {
        return Err(Error::Config(format!("K={k} is not one of 2, 3, 5, 9")));
    }
    ks.iter()
        .map(|&k| {
            let (model, _) = train_pipeline(train_data, k, cfg, observer)?;
            let victim = Victim::new(&model, Path::Fused);
            let spec = AttackSpec::pgd(0.0, cfg.eval_steps);
            let report = eval_grid(&victim, test_data, &spec, &cfg.eps_grid, cfg.seed, cfg.batch_size)?;
            Ok(AblationRow { k, report })
        })
        .collect()
}

/// Stage I with K branches, branch dropping, then stage II. Returns the
/// final model and the stage-I model.
pub fn train_pipeline(
    data: &Dataset,
    k: usize,
    cfg: &AblationConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(Model, Model)> {
    let arch = Arch {
        k,
        branches: k,
        ..cfg.arch.clone()
    };
    let mut model = build_model(&arch, cfg.seed)?;
    let s1 = StageOneConfig {
        k,
        xi: train::default_xi(k)?,
        seed: cfg.seed,
        ..cfg.stage1.clone()
    };
    let mut state = Default::default();
    train::train_stage1(&mut model, &mut state, data, &s1, &Default::default(), observer)?;
    let mut fused = train::drop_branches(&model);
    attach_weight_generator(&mut fused, derive_seed(cfg.seed, &[7]))?;
    let s2 = StageTwoConfig {
        seed: cfg.seed,
        ..cfg.stage2.clone()
    };
    let mut state = Default::default();
    train::train_stage2(&mut fused, &mut state, data, &s2, &Default::default(), observer)?;
    Ok((fused, model))
}
