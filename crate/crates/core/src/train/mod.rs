//! Two-stage optimization.
//!
//! Stage I trains the K-branch backbone: every iteration attacks the batch at
//! each nonzero strength of the schedule through the matching branch, adds
//! the clean loss through branch 0, and takes one SGD step. Stage II drops
//! the middle branches, freezes everything outside the weight generator and
//! trains it with cross-entropy on batches of randomly drawn strength.


use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{self, AttackSpec, Victim};
use crate::data::{augment_crop_flip, save_checkpoint, Checkpoint, Dataset, TrainState};
use crate::derive_seed;
use crate::eval;
use crate::nn::{forward_bound, is_wg_param, ForwardOptions, Model, Path, StatUpdate, Trainable};
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

pub use crate::nn::drop_branches;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvLoss {
    /// Cross-entropy on adversarial inputs.
    PgdAt,
    /// Clean cross-entropy plus `lambda * KL(clean || adversarial)`.
    Trades,
}

impl AdvLoss {
    pub fn name(self) -> &'static str {
        match self {
            AdvLoss::PgdAt => "pgd-at",
            AdvLoss::Trades => "trades",
        }
    }

    pub fn parse(s: &str) -> Result<AdvLoss> {
        match s {
            "pgd-at" => Ok(AdvLoss::PgdAt),
            "trades" => Ok(AdvLoss::Trades),
            _ => Err(Error::Config(format!(
                "unknown adversarial loss {s:?}; valid: pgd-at, trades"
            ))),
        }
    }
}

/// Strength schedule used when none is configured.
pub fn default_xi(k: usize) -> Result<Vec<f64>> {
    Ok(match k {
        2 => vec![0.0, 8.0],
        3 => vec![0.0, 2.0, 8.0],
        4 => vec![0.0, 2.0, 4.0, 8.0],
        5 => vec![0.0, 1.0, 2.0, 4.0, 8.0],
        9 => (0..9).map(|e| e as f64).collect(),
        _ => {
            return Err(Error::Config(format!(
                "no default strength schedule for K={k}; set xi explicitly"
            )))
        }
    })
}

/// `lr * factor^(number of decay epochs <= epoch)`, epochs counted from 0.
pub fn lr_at(lr: f64, factor: f64, decay_epochs: &[usize], epoch: usize) -> f64 {
    let n = decay_epochs.iter().filter(|&&d| d <= epoch).count();
    lr * factor.powi(n as i32)
}

fn check_schedule(epochs: usize, decay: &[usize], lr: f64, batch: usize) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) || batch == 0 || epochs == 0 {
        return Err(Error::Config(
            "learning rate, batch size and epochs must be positive".into(),
        ));
    }
    if decay.windows(2).any(|w| w[0] >= w[1]) || decay.iter().any(|&d| d >= epochs) {
        return Err(Error::Config(format!(
            "decay epochs {decay:?} must be strictly increasing and below {epochs}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOneConfig {
    pub k: usize,
    /// Strength per branch in pixel units; `xi[0] == 0`.
    pub xi: Vec<f64>,
    pub adv_loss: AdvLoss,
    pub trades_lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub lr_decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// PGD steps used to generate training batches.
    pub attack_steps: usize,
    /// PGD step size as a fraction of the strength.
    pub attack_step_ratio: f64,
    /// Include the clean loss through branch 0. Off for the single-branch
    /// adversarial-training baseline.
    pub clean_loss: bool,
    pub augment: bool,
}

impl StageOneConfig {
    pub fn new(k: usize) -> Result<StageOneConfig> {
        Ok(StageOneConfig {
            k,
            xi: default_xi(k)?,
            adv_loss: AdvLoss::PgdAt,
            trades_lambda: 6.0,
            lr: 0.1,
            epochs: 20,
            lr_decay_factor: 0.9,
            decay_epochs: vec![15, 18],
            batch_size: 64,
            seed: 0,
            momentum: 0.9,
            weight_decay: 5e-4,
            attack_steps: 10,
            attack_step_ratio: 0.25,
            clean_loss: true,
            augment: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_schedule(self.epochs, &self.decay_epochs, self.lr, self.batch_size)?;
        if self.xi.len() != self.k || self.k < 2 {
            return Err(Error::Config(format!(
                "strength schedule {:?} must have K={} >= 2 entries",
                self.xi, self.k
            )));
        }
        if self.xi[0] != 0.0 || self.xi.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "strength schedule {:?} must start at 0 and strictly increase",
                self.xi
            )));
        }
        if self.adv_loss == AdvLoss::Trades && !(self.trades_lambda > 0.0 && self.clean_loss) {
            return Err(Error::Config(
                "TRADES needs lambda > 0 and the clean branch".into(),
            ));
        }
        if self.attack_steps == 0 || !(self.attack_step_ratio > 0.0) {
            return Err(Error::Config("attack steps and step ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self.lr, self.lr_decay_factor, &self.decay_epochs, epoch)
    }

    fn attack(&self, eps: f64) -> AttackSpec {
        AttackSpec {
            step_size: eps * self.attack_step_ratio,
            ..AttackSpec::pgd(eps, self.attack_steps)
        }
    }
}

/// Draws one strength per stage-II batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StrengthSampler {
    pub grid: Vec<f64>,
    /// Probability of drawing uniformly from `[0, continuous_max]` instead.
    pub continuous_prob: f64,
    pub continuous_max: f64,
}

impl StrengthSampler {
    pub fn new(grid: Vec<f64>) -> StrengthSampler {
        let continuous_max = grid.iter().cloned().fold(0.0, f64::max);
        StrengthSampler {
            grid,
            continuous_prob: 0.25,
            continuous_max,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.continuous_prob > 0.0 && rng.random_bool(self.continuous_prob) {
            rng.random_range(0.0..=self.continuous_max)
        } else {
            self.grid[rng.random_range(0..self.grid.len())]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTwoConfig {
    pub lr: f64,
    pub epochs: usize,
    pub lr_decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
    pub sampler: StrengthSampler,
    /// Each batch is split into this many contiguous groups, each attacked
    /// at its own sampled strength.
    pub strengths_per_batch: usize,
    pub attack_steps: usize,
    pub attack_step_ratio: f64,
    pub augment: bool,
}

impl StageTwoConfig {
    pub fn new(grid: Vec<f64>) -> StageTwoConfig {
        StageTwoConfig {
            lr: 0.01,
            epochs: 5,
            lr_decay_factor: 0.9,
            decay_epochs: vec![3],
            batch_size: 64,
            seed: 0,
            momentum: 0.9,
            sampler: StrengthSampler::new(grid),
            strengths_per_batch: 4,
            attack_steps: 10,
            attack_step_ratio: 0.25,
            augment: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_schedule(self.epochs, &self.decay_epochs, self.lr, self.batch_size)?;
        let s = &self.sampler;
        if s.grid.is_empty() || s.grid.iter().any(|&e| !(e >= 0.0)) {
            return Err(Error::Config("strength sampler needs a grid of strengths >= 0".into()));
        }
        if !(0.0..=1.0).contains(&s.continuous_prob) || !(s.continuous_max >= 0.0) {
            return Err(Error::Config("strength sampler probability/range invalid".into()));
        }
        if self.attack_steps == 0 || !(self.attack_step_ratio > 0.0) {
            return Err(Error::Config("attack steps and step ratio must be positive".into()));
        }
        if self.strengths_per_batch == 0 {
            return Err(Error::Config("strengths_per_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self.lr, self.lr_decay_factor, &self.decay_epochs, epoch)
    }
}

/// Losses of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub epoch: usize,
    pub iteration: usize,
    /// Stage I: `losses[0]` is the clean loss (zero when disabled),
    /// `losses[k]` the loss of branch `k`. Stage II: the single
    /// cross-entropy term.
    pub losses: Vec<f64>,
    pub total: f64,
    /// Stage II: strength of each group of the batch.
    pub strengths: Vec<f64>,
    /// L2 norm of the gradient over the trained parameters.
    pub grad_norm: f64,
}

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of each loss term over the epoch's iterations.
    pub losses: Vec<f64>,
    pub total: f64,
    /// Validation accuracy per strength.
    pub val_acc: Vec<(f64, f64)>,
}

impl EpochMetrics {
    /// Sum of the adversarial terms.
    pub fn adversarial_sum(&self) -> f64 {
        self.losses.iter().skip(1).sum()
    }
}

/// Hooks called during training. Defaults do nothing.
pub trait TrainObserver {
    fn iteration(&mut self, _report: &LossReport, _model: &Model) {}

    fn epoch(&mut self, _metrics: &EpochMetrics, _model: &Model) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Where and how validation and last-good checkpoints happen.
#[derive(Clone, Debug, Default)]
pub struct RunOptions<'a> {
    pub val: Option<&'a Dataset>,
    /// PGD steps used for validation attacks.
    pub val_steps: usize,
    /// Checkpoint rewritten after every epoch.
    pub checkpoint: Option<PathBuf>,
}

fn sgd_step(
    model: &mut Model,
    g: &Graph,
    params: &BTreeMap<String, Var>,
    momentum: &mut BTreeMap<String, Tensor>,
    lr: f64,
    mu: f64,
    wd: f64,
) -> Result<f64> {
    let mut sq = 0.0;
    for (name, &v) in params {
        let Some(grad) = g.grad(v) else { continue };
        sq += grad.data().iter().map(|x| x * x).sum::<f64>();
        let theta = model.get_mut(name)?;
        let buf = momentum
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
        for ((t, b), gr) in theta.data_mut().iter_mut().zip(buf.data_mut()).zip(grad.data()) {
            let d = gr + wd * *t;
            *b = mu * *b + d;
            *t -= lr * *b;
        }
    }
    Ok(sq.sqrt())
}

fn checkpoint(model: &Model, state: &TrainState, opts: &RunOptions) -> Result<()> {
    if let Some(p) = &opts.checkpoint {
        save_checkpoint(
            &Checkpoint {
                model: model.clone(),
                state: state.clone(),
            },
            p,
        )?;
    }
    Ok(())
}

fn diverged(epoch: usize, iteration: usize, what: String, opts: &RunOptions) -> Error {
    Error::Diverged {
        epoch,
        iteration,
        reason: what,
        last_good: opts.checkpoint.clone(),
    }
}

/// Stage-I objective at one strength: clean cross-entropy through branch 0,
/// plus the adversarial term of `branch` when its strength is nonzero.
pub fn stage1_loss(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    cfg: &StageOneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let branch = cfg
        .xi
        .iter()
        .position(|&e| e == eps)
        .ok_or_else(|| Error::invalid(format!("strength {eps} is not in {:?}", cfg.xi)))?;
    let mut g = Graph::new();
    let mut bound = BTreeMap::new();
    let xv = g.constant(x.clone());
    let clean = forward_bound(model, &mut g, xv, train_opts(Path::Branch(0)), &mut bound)?;
    let ce = g.softmax_cross_entropy(clean.logits, labels)?;
    if branch == 0 {
        return Ok(g.value(ce).item().expect("scalar"));
    }
    let adv = attack::run(&Victim::new(model, Path::Branch(branch)), x, labels, &cfg.attack(eps), rng)?;
    let av = g.constant(adv.adversarial);
    let (l, _) = adversarial_term(&mut g, model, &mut bound, av, branch, clean.logits, labels, cfg)?;
    let total = g.add(ce, l)?;
    Ok(g.value(total).item().expect("scalar"))
}

fn train_opts(path: Path) -> ForwardOptions {
    ForwardOptions {
        backbone_training: true,
        trainable: Trainable::Backbone,
        ..ForwardOptions::eval(path)
    }
}

#[allow(clippy::too_many_arguments)]
fn adversarial_term(
    g: &mut Graph,
    model: &Model,
    bound: &mut BTreeMap<String, Var>,
    adv: Var,
    branch: usize,
    clean_logits: Var,
    labels: &[usize],
    cfg: &StageOneConfig,
) -> Result<(Var, Vec<StatUpdate>)> {
    let f = forward_bound(model, g, adv, train_opts(Path::Branch(branch)), bound)?;
    let l = match cfg.adv_loss {
        AdvLoss::PgdAt => g.softmax_cross_entropy(f.logits, labels)?,
        AdvLoss::Trades => {
            let ce = g.softmax_cross_entropy(clean_logits, labels)?;
            let kl = g.softmax_kl(clean_logits, f.logits)?;
            let kl = g.scale(kl, cfg.trades_lambda);
            g.add(ce, kl)?
        }
    };
    Ok((l, f.updates))
}

/// Generates the adversarial batches of every nonzero strength against the
/// current model (eval-mode BN of the matching branch).
fn stage1_adversaries(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &StageOneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Tensor>> {
    (1..cfg.k)
        .map(|k| {
            let v = Victim::new(model, Path::Branch(k));
            Ok(attack::run(&v, x, labels, &cfg.attack(cfg.xi[k]), rng)?.adversarial)
        })
        .collect()
}

/// One stage-I iteration. Returns the per-term losses and the gradient norm.
pub fn stage1_step(
    model: &mut Model,
    momentum: &mut BTreeMap<String, Tensor>,
    x: &Tensor,
    labels: &[usize],
    cfg: &StageOneConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, f64, f64)> {
    let advs = stage1_adversaries(model, x, labels, cfg, rng)?;
    let mut g = Graph::new();
    let mut bound = BTreeMap::new();
    let mut updates = Vec::new();
    let mut terms = Vec::with_capacity(cfg.k);
    let xv = g.constant(x.clone());
    let mut clean_logits = None;
    if cfg.clean_loss {
        let f = forward_bound(model, &mut g, xv, train_opts(Path::Branch(0)), &mut bound)?;
        terms.push(g.softmax_cross_entropy(f.logits, labels)?);
        updates.extend(f.updates);
        clean_logits = Some(f.logits);
    }
    for (i, adv) in advs.into_iter().enumerate() {
        let av = g.constant(adv);
        let cl = clean_logits.unwrap_or(av);
        let (l, u) = adversarial_term(&mut g, model, &mut bound, av, i + 1, cl, labels, cfg)?;
        terms.push(l);
        updates.extend(u);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let mut values: Vec<f64> = terms.iter().map(|&t| g.value(t).item().expect("scalar")).collect();
    if !cfg.clean_loss {
        values.insert(0, 0.0);
    }
    let total_v = g.value(total).item().expect("scalar");
    if !total_v.is_finite() {
        return Ok((values, total_v, f64::NAN));
    }
    g.backward(total)?;
    let params: BTreeMap<String, Var> = bound
        .into_iter()
        .filter(|&(_, v)| g.requires_grad(v))
        .collect();
    let norm = sgd_step(model, &g, &params, momentum, lr, cfg.momentum, cfg.weight_decay)?;
    model.apply_updates(&updates)?;
    Ok((values, total_v, norm))
}

fn mean_columns(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len().max(1) as f64;
    let w = rows.first().map_or(0, |r| r.len());
    (0..w).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Trains the multi-branch backbone from `state.epoch` to `cfg.epochs`.
pub fn train_stage1(
    model: &mut Model,
    state: &mut TrainState,
    data: &Dataset,
    cfg: &StageOneConfig,
    opts: &RunOptions,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if model.arch.branches != cfg.k {
        return Err(Error::Config(format!(
            "model has {} branches, stage I expects K={}",
            model.arch.branches, cfg.k
        )));
    }
    state.stage = 1;
    state.seed = cfg.seed;
    checkpoint(model, state, opts)?;
    let mut out = Vec::new();
    for epoch in state.epoch as usize..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, epoch as u64]));
        let mut rows = Vec::new();
        let mut totals = Vec::new();
        let batches = crate::data::batch_indices(
            data.len(),
            cfg.batch_size,
            derive_seed(cfg.seed, &[0, epoch as u64]),
            true,
        );
        for (it, idx) in batches.iter().enumerate() {
            let mut x = data.images(idx);
            if cfg.augment {
                augment_crop_flip(&mut x, &mut rng);
            }
            let labels = data.labels_of(idx);
            let (losses, total, norm) =
                stage1_step(model, &mut state.momentum, &x, &labels, cfg, lr, &mut rng)?;
            if !total.is_finite() {
                return Err(diverged(epoch, it, format!("loss is {total}"), opts));
            }
            let report = LossReport {
                epoch,
                iteration: it,
                losses: losses.clone(),
                total,
                strengths: Vec::new(),
                grad_norm: norm,
            };
            observer.iteration(&report, model);
            rows.push(losses);
            totals.push(total);
        }
        let val_acc = match opts.val {
            Some(val) => cfg
                .xi
                .iter()
                .enumerate()
                .map(|(k, &e)| {
                    let branch = if cfg.clean_loss { k } else { cfg.k - 1 };
                    let v = Victim::new(model, Path::Branch(branch));
                    let spec = AttackSpec::pgd(e, opts.val_steps.max(1));
                    let acc = eval::attacked_accuracy(&v, val, &spec, cfg.seed, 256)?;
                    Ok((e, acc))
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let metrics = EpochMetrics {
            epoch,
            lr,
            losses: mean_columns(&rows),
            total: totals.iter().sum::<f64>() / totals.len().max(1) as f64,
            val_acc,
        };
        state.epoch = epoch as u64 + 1;
        checkpoint(model, state, opts)?;
        observer.epoch(&metrics, model)?;
        out.push(metrics);
    }
    Ok(out)
}

/// One stage-II iteration. The batch is split into `eps.len()` contiguous
/// groups of near-equal size and group `i` is attacked at `eps[i]`.
pub fn stage2_step(
    model: &mut Model,
    momentum: &mut BTreeMap<String, Tensor>,
    x: &Tensor,
    labels: &[usize],
    eps: &[f64],
    cfg: &StageTwoConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let n = labels.len();
    if eps.is_empty() || eps.len() > n {
        return Err(Error::invalid(format!("{} strengths for a batch of {n}", eps.len())));
    }
    let per = x.len() / n;
    let victim = Victim::new(model, Path::Fused);
    let mut adv = Vec::with_capacity(x.len());
    for (i, &e) in eps.iter().enumerate() {
        let (lo, hi) = (i * n / eps.len(), (i + 1) * n / eps.len());
        let mut shape = x.shape().to_vec();
        shape[0] = hi - lo;
        let part = Tensor::new(shape, x.data()[lo * per..hi * per].to_vec())?;
        let spec = AttackSpec {
            step_size: e * cfg.attack_step_ratio,
            ..AttackSpec::pgd(e, cfg.attack_steps)
        };
        let a = attack::run(&victim, &part, &labels[lo..hi], &spec, rng)?;
        adv.extend_from_slice(a.adversarial.data());
    }
    let mut g = Graph::new();
    let mut bound = BTreeMap::new();
    let xv = g.constant(Tensor::new(x.shape().to_vec(), adv)?);
    let opts = ForwardOptions {
        wg_training: true,
        trainable: Trainable::WeightGenerator,
        ..ForwardOptions::eval(Path::Fused)
    };
    let f = forward_bound(model, &mut g, xv, opts, &mut bound)?;
    let loss = g.softmax_cross_entropy(f.logits, labels)?;
    let value = g.value(loss).item().expect("scalar");
    if !value.is_finite() {
        return Ok((value, f64::NAN));
    }
    g.backward(loss)?;
    let norm = sgd_step(model, &g, &f.params, momentum, lr, cfg.momentum, 0.0)?;
    let wg_updates: Vec<StatUpdate> = f
        .updates
        .into_iter()
        .filter(|u| is_wg_param(&u.prefix))
        .collect();
    model.apply_updates(&wg_updates)?;
    Ok((value, norm))
}

/// Trains the weight generator of a two-branch model with every other
/// parameter frozen. The backbone digest is checked after every step.
pub fn train_stage2(
    model: &mut Model,
    state: &mut TrainState,
    data: &Dataset,
    cfg: &StageTwoConfig,
    opts: &RunOptions,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if model.arch.branches != 2 {
        return Err(Error::invalid("stage II needs a model with its middle branches dropped"));
    }
    if !model.has_weight_generator() {
        return Err(Error::invalid("stage II needs a weight generator"));
    }
    if state.stage != 2 {
        state.stage = 2;
        state.epoch = 0;
        state.momentum.clear();
    }
    state.seed = cfg.seed;
    let frozen = model.backbone_digest();
    let snapshot: BTreeMap<String, Tensor> = model
        .params()
        .iter()
        .filter(|(n, _)| !is_wg_param(n))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    checkpoint(model, state, opts)?;
    let mut out = Vec::new();
    for epoch in state.epoch as usize..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[3, epoch as u64]));
        let batches = crate::data::batch_indices(
            data.len(),
            cfg.batch_size,
            derive_seed(cfg.seed, &[2, epoch as u64]),
            true,
        );
        let mut losses = Vec::new();
        for (it, idx) in batches.iter().enumerate() {
            let eps: Vec<f64> = (0..cfg.strengths_per_batch.min(idx.len()))
                .map(|_| cfg.sampler.sample(&mut rng))
                .collect();
            let mut x = data.images(idx);
            if cfg.augment {
                augment_crop_flip(&mut x, &mut rng);
            }
            let labels = data.labels_of(idx);
            let (loss, norm) =
                stage2_step(model, &mut state.momentum, &x, &labels, &eps, cfg, lr, &mut rng)?;
            if !loss.is_finite() {
                return Err(diverged(epoch, it, format!("loss is {loss}"), opts));
            }
            if model.backbone_digest() != frozen {
                let changed = snapshot
                    .iter()
                    .find(|(n, t)| model.get(n).map_or(true, |m| m != *t))
                    .map(|(n, _)| n.clone())
                    .unwrap_or_else(|| "backbone".into());
                return Err(Error::FreezeViolation(changed));
            }
            observer.iteration(
                &LossReport {
                    epoch,
                    iteration: it,
                    losses: vec![loss],
                    total: loss,
                    strengths: eps,
                    grad_norm: norm,
                },
                model,
            );
            losses.push(loss);
        }
        let val_acc = match opts.val {
            Some(val) => cfg
                .sampler
                .grid
                .iter()
                .map(|&e| {
                    let v = Victim::new(model, Path::Fused);
                    let spec = AttackSpec::pgd(e, opts.val_steps.max(1));
                    Ok((e, eval::attacked_accuracy(&v, val, &spec, cfg.seed, 256)?))
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        let metrics = EpochMetrics {
            epoch,
            lr,
            losses: vec![mean],
            total: mean,
            val_acc,
        };
        state.epoch = epoch as u64 + 1;
        checkpoint(model, state, opts)?;
        observer.epoch(&metrics, model)?;
        out.push(metrics);
    }
    Ok(out)
}
