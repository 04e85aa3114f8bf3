//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.
//!
//! Criteria 4 to 9 read MNIST and CIFAR-10 from `AFA_DATA_DIR` (default: the
//! workspace `data/` directory). `AFA_ACCEPTANCE=1,2,3` runs a subset.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path as FsPath, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use afa_core::attack::{self, AttackSpec, Method, Victim, ADAPTIVE_RATIOS};
use afa_core::data::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_cifar10, load_mnist, Dataset, Split,
    TrainState,
};
use afa_core::eval::{
    adaptive_sweep, adaptive_sweep_with, attacked_accuracy, blackbox_eval, eval_grid, fusion_curve,
    own_branches, probe_feature_stats, AblationConfig, EPS_GRID,
};
use afa_core::gradcheck::{self, PRIMITIVES};
use afa_core::nn::{
    afa_forward, attach_weight_generator, build_model, drop_branches, forward, forward_bound,
    multi_bn_forward, Arch, ForwardOptions, Model, Path, Trainable, WgInput,
};
use afa_core::tensor::{Graph, Tensor, Var};
use afa_core::train::{
    self, train_stage1, train_stage2, AdvLoss, EpochMetrics, RunOptions, StageOneConfig,
    StageTwoConfig, TrainObserver,
};
use afa_core::{derive_seed, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 2024;
const EVAL_STEPS: usize = 10;
const BS: usize = 250;

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn data_dir() -> PathBuf {
    std::env::var_os("AFA_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

struct Progress(&'static str);

impl TrainObserver for Progress {
    fn epoch(&mut self, m: &EpochMetrics, _: &Model) -> Result<()> {
        eprintln!("  [{}] epoch {} lr {:.4} loss {:.4}", self.0, m.epoch, m.lr, m.total);
        Ok(())
    }
}

fn tiny_arch(k: usize) -> Arch {
    Arch {
        in_channels: 1,
        image_size: 8,
        num_classes: 3,
        widths: vec![2, 3],
        blocks_per_stage: 1,
        stem_stride: 1,
        k,
        branches: k,
        wg_width: 2,
        wg_hidden: 3,
        wg_input: WgInput::Stem,
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Random model with distinct BN branches and a non-trivial weight generator.
fn random_model(k: usize, rng: &mut ChaCha8Rng) -> Model {
    let mut m = build_model(&tiny_arch(k), rng.random()).unwrap();
    attach_weight_generator(&mut m, rng.random()).unwrap();
    let names: Vec<String> = m
        .params()
        .keys()
        .filter(|n| n.contains("bn") || n.starts_with("wg.fc2"))
        .cloned()
        .collect();
    for name in names {
        let t = m.get_mut(&name).unwrap();
        for v in t.data_mut() {
            *v = if name.contains("bn") && (name.ends_with("running_var") || name.ends_with(".weight")) {
                rng.random_range(0.5..1.5)
            } else {
                rng.random_range(-1.0..1.0)
            };
        }
    }
    m
}

fn logits(model: &Model, x: &Tensor, opts: ForwardOptions) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let f = forward(model, &mut g, xv, opts).unwrap();
    g.value(f.logits).clone()
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn gradient_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut worst, mut worst_abs) = (0.0f64, 0.0f64);
    let mut checked = 0;
    for name in PRIMITIVES {
        for i in 0..100 {
            let case = e2s(gradcheck::primitive_case(name, &mut rng))?;
            let r = e2s(gradcheck::check(&case.inputs, case.f, 1e-5))?;
            ensure(r.passes(1e-4), format!("{name} instance {i}: {r:?}"))?;
            worst = worst.max(r.max_rel_err);
            worst_abs = worst_abs.max(r.max_abs_err);
            checked += 1;
        }
    }
    let bound = [
        "wg.fc2.weight",
        "wg.conv1.weight",
        "stage2.block1.bn2.branch1.weight",
        "stage1.block1.conv1.weight",
    ];
    let (mut composed, mut straddled) = (0, 0);
    while composed < 200 {
        let model = random_model(3, &mut rng);
        let x = random(&[2, 1, 8, 8], &mut rng);
        let r_bce = rng.random_range(0.0..5.0);
        let route = rng.random_range(0..3);
        let mut inputs = vec![x];
        inputs.extend(bound.iter().map(|n| model.get(n).unwrap().clone()));
        let bind = |v: &[Var]| -> BTreeMap<String, Var> {
            bound.iter().zip(&v[1..]).map(|(n, &var)| (n.to_string(), var)).collect()
        };
        let fused = |g: &mut Graph, v: &[Var]| {
            let opts = ForwardOptions {
                trainable: Trainable::Nothing,
                ..ForwardOptions::eval(Path::Fused)
            };
            let fw = forward_bound(&model, g, v[0], opts, &mut bind(v))?;
            let ce = g.softmax_cross_entropy(fw.logits, &[1, 2])?;
            let bce = g.binary_cross_entropy(fw.w0.expect("fused"), &[1.0, 1.0])?;
            let bce = g.scale(bce, r_bce);
            g.sub(ce, bce)
        };
        let branch = |g: &mut Graph, v: &[Var]| {
            let opts = ForwardOptions {
                path: Path::Branch(route),
                backbone_training: true,
                wg_training: false,
                w0_override: None,
                trainable: Trainable::Nothing,
            };
            let fw = forward_bound(&model, g, v[0], opts, &mut bind(v))?;
            g.softmax_cross_entropy(fw.logits, &[0, 2])
        };
        let cases: [(&str, &dyn Fn(&mut Graph, &[Var]) -> Result<Var>); 2] =
            [("fused", &fused), ("training-mode", &branch)];
        for (what, f) in cases {
            let a = e2s(gradcheck::analytic(&inputs, &f))?;
            let n = e2s(gradcheck::numeric(&inputs, &f, 1e-5))?;
            let r = gradcheck::compare(&a, &n);
            if !r.passes(1e-4) {
                let fine = e2s(gradcheck::numeric(&inputs, &f, 1e-6))?;
                if !gradcheck::compare(&n, &fine).passes(1e-4) {
                    straddled += 1;
                    continue;
                }
                return Err(format!("{what} model instance {composed}: {r:?}"));
            }
            worst = worst.max(r.max_rel_err);
            worst_abs = worst_abs.max(r.max_abs_err);
            composed += 1;
        }
    }
    ensure(straddled <= 20, format!("{straddled} instances straddled a ReLU kink"))?;
    checked += composed;
    Ok(format!(
        "{checked} instances, worst relative error {worst:.1e} (absolute {worst_abs:.1e}); {straddled} kink-straddling draws replaced"
    ))
}

fn attack_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let methods = [Method::Fgsm, Method::Ifgsm, Method::Pgd, Method::Cw, Method::PgdAdaptive];
    let mut runs = 0;
    for pair in 0..100 {
        let k = rng.random_range(2..=4);
        let model = random_model(k, &mut rng);
        let n = rng.random_range(1..=4);
        let x = random(&[n, 1, 8, 8], &mut rng);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let eps = [1.0, 2.0, 4.0, 8.0, 16.0][pair % 5];
        for m in methods {
            let path = match m {
                Method::PgdAdaptive => Path::Fused,
                _ if pair % 2 == 0 => Path::Fused,
                _ => Path::Branch(rng.random_range(0..k)),
            };
            let v = Victim::new(&model, path);
            let mut spec = AttackSpec::for_method(m, eps, 3);
            if m == Method::PgdAdaptive {
                spec.adaptive_ratio = ADAPTIVE_RATIOS[pair % 7];
            }
            let seed = rng.random();
            let a = e2s(attack::run(&v, &x, &y, &spec, &mut ChaCha8Rng::seed_from_u64(seed)))?;
            let linf = a.adversarial.max_abs_diff(&x);
            ensure(linf <= eps / 255.0 + 1e-9, format!("pair {pair} {}: linf {linf}", m.name()))?;
            ensure(
                a.adversarial.data().iter().all(|v| (0.0..=1.0).contains(v)),
                format!("pair {pair} {}: left [0,1]", m.name()),
            )?;
            let zero = e2s(attack::run(&v, &x, &y, &spec.with_epsilon(0.0), &mut ChaCha8Rng::seed_from_u64(seed)))?;
            ensure(bits(&zero.adversarial) == bits(&x), format!("pair {pair} {}: eps 0 moved", m.name()))?;
            runs += 2;
        }
        let v = Victim::new(&model, Path::Fused);
        let f = e2s(attack::fgsm(&v, &x, &y, eps))?;
        let one = AttackSpec {
            random_start: false,
            step_size: eps,
            ..AttackSpec::pgd(eps, 1)
        };
        let p = e2s(attack::pgd(&v, &x, &y, &one, &mut ChaCha8Rng::seed_from_u64(pair as u64)))?;
        ensure(bits(&f.adversarial) == bits(&p.adversarial), format!("pair {pair}: PGD-1 differs from FGSM"))?;
    }
    Ok(format!("100 pairs x {} methods, {runs} attacks in budget; PGD-1 == FGSM bit-exactly", methods.len()))
}

fn routing_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let mut model = random_model(4, &mut rng);
    for step in 0..100 {
        let route = rng.random_range(0..4);
        let before = model.clone();
        let mut g = Graph::new();
        let x = g.constant(random(&[3, 1, 8, 8], &mut rng));
        let opts = ForwardOptions {
            path: Path::Branch(route),
            backbone_training: true,
            wg_training: false,
            w0_override: None,
            trainable: Trainable::Backbone,
        };
        let f = e2s(forward(&model, &mut g, x, opts))?;
        let loss = e2s(g.softmax_cross_entropy(f.logits, &[0, 1, 2]))?;
        e2s(g.backward(loss))?;
        for (name, &v) in &f.params {
            if let Some(gr) = g.grad(v) {
                let t = model.get_mut(name).unwrap();
                for (p, d) in t.data_mut().iter_mut().zip(gr.data()) {
                    *p -= 0.1 * d;
                }
            }
        }
        e2s(model.apply_updates(&f.updates))?;
        let on = format!(".branch{route}.");
        for (name, t) in model.params() {
            if name.contains(".branch") && !name.contains(&on) {
                ensure(t == before.get(name).unwrap(), format!("step {step}: {name} changed off-route"))?;
            }
        }
    }

    let mut worst_w0 = 0.0f64;
    for _ in 0..100 {
        let m = random_model(rng.random_range(2..=5), &mut rng);
        let x = random(&[2, 1, 8, 8], &mut rng);
        let fused = logits(&m, &x, ForwardOptions { w0_override: Some(1.0), ..ForwardOptions::eval(Path::Fused) });
        let b0 = logits(&m, &x, ForwardOptions::eval(Path::Branch(0)));
        worst_w0 = worst_w0.max(fused.max_abs_diff(&b0));

        let site = "stage2.block1.bn2";
        let mut g = Graph::new();
        let xv = g.constant(random(&[4, 3, 2, 2], &mut rng));
        let w = g.constant(Tensor::new(vec![4], (0..4).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap());
        let out = e2s(afa_forward(&m, &mut g, site, xv, w))?;
        let (a, _) = e2s(multi_bn_forward(&m, &mut g, site, xv, 0, false))?;
        let (b, _) = e2s(multi_bn_forward(&m, &mut g, site, xv, m.arch.branches - 1, false))?;
        let (o, a, b) = (g.value(out).data(), g.value(a).data(), g.value(b).data());
        for i in 0..o.len() {
            let (lo, hi) = (a[i].min(b[i]), a[i].max(b[i]));
            ensure(o[i] >= lo - 1e-12 && o[i] <= hi + 1e-12, format!("fused output {} outside [{lo}, {hi}]", o[i]))?;
        }

        let d = drop_branches(&m);
        let same = logits(&d, &x, ForwardOptions::eval(Path::Branch(0)));
        ensure(bits(&same) == bits(&b0), "drop_branches changed branch-0 logits")?;
    }
    ensure(worst_w0 <= 1e-12, format!("W0=1 deviates from branch 0 by {worst_w0:e}"))?;
    Ok(format!("isolation over 100 steps; W0=1 max deviation {worst_w0:.1e}; convexity and drop hold on 100 models"))
}

struct MnistRun {
    test: Dataset,
    train: Dataset,
    stage1: Model,
    fused: Model,
    stage1_secs: f64,
    stage2_secs: f64,
}

fn mnist_stage1_cfg() -> StageOneConfig {
    StageOneConfig {
        xi: vec![0.0, 2.0, 4.0, 8.0],
        lr: 0.02,
        epochs: 3,
        decay_epochs: vec![2],
        batch_size: 64,
        seed: SEED,
        attack_steps: 3,
        attack_step_ratio: 0.5,
        ..StageOneConfig::new(4).unwrap()
    }
}

fn stage2_cfg(epochs: usize, decay_epochs: Vec<usize>) -> StageTwoConfig {
    StageTwoConfig {
        epochs,
        decay_epochs,
        seed: SEED,
        attack_steps: 3,
        attack_step_ratio: 0.5,
        ..StageTwoConfig::new(EPS_GRID.to_vec())
    }
}

fn mnist_run() -> std::result::Result<MnistRun, String> {
    let dir = data_dir().join("mnist");
    let train = e2s(load_mnist(&dir, Split::Train))?.first(10_000);
    let test = e2s(load_mnist(&dir, Split::Test))?.first(1000);
    let t = Instant::now();
    let mut stage1 = e2s(build_model(&Arch::compact(1, 28, 10, 4), SEED))?;
    let cfg = mnist_stage1_cfg();
    e2s(train_stage1(&mut stage1, &mut TrainState::default(), &train, &cfg, &RunOptions::default(), &mut Progress("mnist stage I")))?;
    let stage1_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let mut fused = drop_branches(&stage1);
    e2s(attach_weight_generator(&mut fused, derive_seed(SEED, &[7])))?;
    e2s(train_stage2(&mut fused, &mut TrainState::default(), &train, &stage2_cfg(5, vec![3]), &RunOptions::default(), &mut Progress("mnist stage II")))?;
    Ok(MnistRun {
        test,
        train,
        stage1,
        fused,
        stage1_secs,
        stage2_secs: t.elapsed().as_secs_f64(),
    })
}

fn observation(run: &MnistRun) -> Outcome {
    let t = Instant::now();
    let layer = run.stage1.arch.default_probe();
    let p = e2s(probe_feature_stats(&run.stage1, &run.test, &layer, &own_branches(&[0.0, 2.0, 4.0, 8.0]), EVAL_STEPS, SEED, BS))?;
    let score = p.monotonicity_score();
    let c = p.continuity();
    let secs = run.stage1_secs + t.elapsed().as_secs_f64();
    let detail = format!(
        "{layer}: monotonicity {score:.3} (floor 0.7), drift jumps {:?} vs widest-gap jump {:.4}, {secs:.0} s",
        c.jumps.iter().map(|j| format!("{j:.4}")).collect::<Vec<_>>(),
        c.widest_gap_jump
    );
    ensure(score >= 0.7 && c.continuous && secs < 900.0, detail.clone())?;
    Ok(detail)
}

fn fusion(run: &MnistRun) -> Outcome {
    let t = Instant::now();
    let f = e2s(fusion_curve(&run.fused, &run.test, &EPS_GRID, EVAL_STEPS, None, SEED, BS))?;
    let rho = f.spearman();
    let secs = run.stage2_secs + t.elapsed().as_secs_f64();
    let detail = format!(
        "W1 means {:?}, Spearman {rho:.3} (needs > 0.8), {secs:.0} s extra",
        f.w1_mean.iter().map(|w| format!("{w:.4}")).collect::<Vec<_>>()
    );
    ensure(rho > 0.8 && secs < 600.0, detail.clone())?;
    Ok(detail)
}

fn obfuscation(run: &MnistRun) -> Outcome {
    let mut surrogate_arch = Arch::compact(1, 28, 10, 2);
    surrogate_arch.widths = vec![12, 24, 48];
    let mut surrogate = e2s(build_model(&surrogate_arch, SEED + 100))?;
    let cfg = StageOneConfig {
        xi: vec![0.0, 8.0],
        lr: 0.05,
        epochs: 1,
        decay_epochs: vec![],
        seed: SEED + 100,
        attack_steps: 3,
        attack_step_ratio: 0.5,
        ..StageOneConfig::new(2).unwrap()
    };
    e2s(train_stage1(&mut surrogate, &mut TrainState::default(), &run.train, &cfg, &RunOptions::default(), &mut Progress("surrogate")))?;
    let t = Instant::now();
    let defense = Victim::new(&run.fused, Path::Fused);
    let fgsm = e2s(attacked_accuracy(&defense, &run.test, &AttackSpec::fgsm(8.0), SEED, BS))?;
    let pgd = AttackSpec::pgd(0.0, EVAL_STEPS);
    let white = e2s(eval_grid(&defense, &run.test, &pgd, &EPS_GRID, SEED, BS))?;
    let sv = Victim::new(&surrogate, Path::Branch(1));
    let black = e2s(blackbox_eval(&defense, &sv, &run.test, &pgd, &EPS_GRID, SEED, BS))?;
    let secs = t.elapsed().as_secs_f64();
    let detail = format!(
        "FGSM@8 {fgsm:.3} vs PGD@8 {:.3}; black-box {:?} vs white-box {:?}, {secs:.0} s",
        white.at(8.0).unwrap(),
        black.accuracy,
        white.accuracy
    );
    let ordered = (1..EPS_GRID.len()).all(|i| black.accuracy[i] >= white.accuracy[i]);
    ensure(fgsm >= white.at(8.0).unwrap() && ordered && secs < 600.0, detail.clone())?;
    Ok(detail)
}

fn adaptive(run: &MnistRun) -> Outcome {
    let t = Instant::now();
    let v = Victim::new(&run.fused, Path::Fused);
    let test = run.test.first(500);
    let sweep = e2s(adaptive_sweep(&v, &test, 8.0, EVAL_STEPS, SEED, BS))?;
    ensure(sweep.rows.len() == 7, "sweep must have seven ratios")?;
    let no_bce = e2s(adaptive_sweep_with(&v, &test, 8.0, EVAL_STEPS, &[(1.0, 0.0)], SEED, BS))?;
    let plain = e2s(attacked_accuracy(&v, &test, &AttackSpec::pgd(8.0, EVAL_STEPS), SEED, BS))?;
    ensure(no_bce.min_accuracy == plain, format!("r_bce=0 accuracy {} vs PGD {plain}", no_bce.min_accuracy))?;
    let idx: Vec<usize> = (0..50).collect();
    let (x, y) = (test.images(&idx), test.labels_of(&idx));
    let pgd = AttackSpec::pgd(8.0, EVAL_STEPS);
    let ada = AttackSpec {
        method: Method::PgdAdaptive,
        adaptive_ratio: (1.0, 0.0),
        ..pgd
    };
    let (mut ta, mut tb) = (Vec::new(), Vec::new());
    e2s(attack::run_traced(&v, &x, &y, &pgd, &mut ChaCha8Rng::seed_from_u64(SEED), &mut |t: &Tensor| ta.push(bits(t))))?;
    e2s(attack::run_traced(&v, &x, &y, &ada, &mut ChaCha8Rng::seed_from_u64(SEED), &mut |t: &Tensor| tb.push(bits(t))))?;
    ensure(ta == tb, "r_bce=0 trajectory differs from PGD")?;
    let secs = t.elapsed().as_secs_f64();
    let detail = format!(
        "min accuracy {:.3} at {:?} over {:?}; r_bce=0 matches PGD over {} iterates, {secs:.0} s",
        sweep.min_accuracy,
        sweep.worst_ratio,
        sweep.rows.iter().map(|r| format!("{:.3}", r.1)).collect::<Vec<_>>(),
        ta.len()
    );
    ensure(secs < 600.0, detail.clone())?;
    Ok(detail)
}

fn table_one() -> Outcome {
    let t = Instant::now();
    let dir = data_dir().join("cifar-10-batches-bin");
    let train = e2s(load_cifar10(&dir, Split::Train))?.first(10_000);
    let test = e2s(load_cifar10(&dir, Split::Test))?.first(1000);
    let s1 = StageOneConfig {
        lr: 0.05,
        epochs: 5,
        decay_epochs: vec![4],
        batch_size: 64,
        seed: SEED,
        attack_steps: 3,
        attack_step_ratio: 0.5,
        augment: true,
        ..StageOneConfig::new(4).unwrap()
    };
    let cfg = AblationConfig {
        arch: Arch::compact(3, 32, 10, 4),
        stage1: s1.clone(),
        stage2: StageTwoConfig { augment: true, ..stage2_cfg(2, vec![]) },
        eval_steps: EVAL_STEPS,
        eps_grid: EPS_GRID.to_vec(),
        seed: SEED,
        batch_size: BS,
    };
    let (afa, _) = e2s(afa_core::eval::train_pipeline(&train, 4, &cfg, &mut Progress("cifar afa")))?;
    let mut base = e2s(build_model(&Arch::compact(3, 32, 10, 2), SEED))?;
    let bcfg = StageOneConfig {
        k: 2,
        xi: vec![0.0, 8.0],
        clean_loss: false,
        adv_loss: AdvLoss::PgdAt,
        ..s1
    };
    e2s(train::train_stage1(&mut base, &mut TrainState::default(), &train, &bcfg, &RunOptions::default(), &mut Progress("cifar baseline")))?;
    let pgd = AttackSpec::pgd(0.0, EVAL_STEPS);
    let a = e2s(eval_grid(&Victim::new(&afa, Path::Fused), &test, &pgd, &EPS_GRID, SEED, BS))?;
    let b = e2s(eval_grid(&Victim::new(&base, Path::Branch(1)), &test, &pgd, &EPS_GRID, SEED, BS))?;
    let secs = t.elapsed().as_secs_f64();
    let curve = e2s(fusion_curve(&afa, &test, &EPS_GRID, EVAL_STEPS, None, SEED, BS))?;
    let detail = format!(
        "AFA {:?} avg {:.4}; baseline {:?} avg {:.4}; {secs:.0} s (AFA fusion curve W1 {:?}, Spearman {:.3})",
        a.accuracy,
        a.average,
        b.accuracy,
        b.average,
        curve.w1_mean.iter().map(|w| format!("{w:.4}")).collect::<Vec<_>>(),
        curve.spearman()
    );
    ensure(a.accuracy[0] >= b.accuracy[0] + 0.01 && a.average >= b.average && secs < 2700.0, detail.clone())?;
    Ok(detail)
}

struct Cli {
    root: PathBuf,
}

impl Cli {
    fn run(&self, args: &[&str]) -> std::process::Output {
        Command::new(env!("CARGO_BIN_EXE_afa"))
            .args(args)
            .output()
            .expect("afa binary runs")
    }

    fn ok(&self, args: &[&str]) -> std::result::Result<(), String> {
        let o = self.run(args);
        ensure(o.status.success(), format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    }

    /// stage I, stage II, eval and probe-stats under `name/`, each step
    /// configured by `config(step)`.
    fn pipeline(&self, name: &str, config: &dyn Fn(&str) -> PathBuf) -> std::result::Result<(), String> {
        let out = |s: &str| self.root.join(name).join(s).display().to_string();
        let s1 = format!("{}/stage1.ckpt", out("s1"));
        let s2 = format!("{}/stage2.ckpt", out("s2"));
        let cfg = |s: &str| config(s).display().to_string();
        self.ok(&["train-stage1", "--config", &cfg("s1"), "--out", &out("s1")])?;
        self.ok(&["train-stage2", "--config", &cfg("s2"), "--out", &out("s2"), "--ckpt", &s1])?;
        self.ok(&["eval", "--config", &cfg("ev"), "--out", &out("ev"), "--ckpt", &s2])?;
        self.ok(&["probe-stats", "--config", &cfg("pr"), "--out", &out("pr"), "--ckpt", &s1])?;
        self.ok(&["probe-stats", "--config", &cfg("pf"), "--out", &out("pf"), "--ckpt", &s2])
    }
}

fn files(dir: &FsPath) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = walk(dir)
        .into_iter()
        .filter(|p| p.file_name().unwrap() != "resolved_config.cfg")
        .map(|p| p.strip_prefix(dir).unwrap().to_path_buf())
        .collect();
    v.sort();
    v
}

fn walk(dir: &FsPath) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cli = Cli { root: tmp.path().to_path_buf() };
    let base = tmp.path().join("base.cfg");
    let text = format!(
        "data.dir = {}\ndata.train_size = 512\ndata.test_size = 200\nseed = 11\n\
         stage1.epochs = 2\nstage1.decay_epochs = 1\nstage1.attack_steps = 2\n\
         stage2.epochs = 1\nstage2.decay_epochs =\nstage2.attack_steps = 2\n\
         attack.steps = 3\nprobe.steps = 2\n",
        data_dir().display()
    );
    fs::write(&base, text).map_err(|e| e.to_string())?;
    cli.pipeline("a", &|_| base.clone())?;
    let a = tmp.path().join("a");
    cli.pipeline("b", &|step| a.join(step).join("resolved_config.cfg"))?;
    let b = tmp.path().join("b");
    let fa = files(&a);
    let expected = [
        "ev/eval_grid.csv",
        "pf/fusion_curve.csv",
        "pr/feature_stats.csv",
        "s1/stage1.ckpt",
        "s1/stage1_metrics.csv",
        "s2/stage2.ckpt",
        "s2/stage2_metrics.csv",
    ];
    ensure(fa.iter().cloned().eq(expected.iter().map(PathBuf::from)), format!("unexpected outputs: {fa:?}"))?;
    ensure(fa == files(&b), format!("output sets differ: {fa:?} vs {:?}", files(&b)))?;
    for f in &fa {
        let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        ensure(x == y, format!("{} differs on replay", f.display()))?;
    }

    let s2 = a.join("s2/stage2.ckpt");
    let bytes = fs::read(&s2).unwrap();
    let ck = e2s(load_checkpoint(&s2))?;
    ensure(encode_checkpoint(&ck) == bytes, "re-encoding a checkpoint changed its bytes")?;
    ensure(e2s(decode_checkpoint(&bytes))? == ck, "decode is not stable")?;

    let mut rejected = 0;
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x01;
    for (i, bad) in [flipped, bytes[..bytes.len() - 9].to_vec(), b"not a checkpoint".to_vec()].iter().enumerate() {
        let p = tmp.path().join(format!("bad{i}.ckpt"));
        fs::write(&p, bad).unwrap();
        ensure(decode_checkpoint(bad).is_err(), format!("corrupt checkpoint {i} decoded"))?;
        let out = tmp.path().join(format!("bad{i}"));
        let o = cli.run(&["eval", "--config", base.to_str().unwrap(), "--ckpt", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        ensure(o.status.code() == Some(1) && !out.exists(), format!("corrupt checkpoint {i} not rejected cleanly"))?;
        rejected += 1;
    }

    let src = data_dir().join("mnist");
    for (i, (file, damage)) in [
        ("t10k-labels-idx1-ubyte", 0usize),
        ("t10k-images-idx3-ubyte", 1),
        ("t10k-labels-idx1-ubyte", 2),
    ]
    .into_iter()
    .enumerate()
    {
        let root = tmp.path().join(format!("data{i}"));
        fs::create_dir_all(root.join("mnist")).unwrap();
        for f in ["t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"] {
            let mut b = fs::read(src.join(f)).map_err(|e| e.to_string())?;
            if f == file {
                match damage {
                    0 => b[2] = 9,
                    1 => b.truncate(b.len() - 100),
                    _ => b[20] = 77,
                }
            }
            fs::write(root.join("mnist").join(f), b).unwrap();
        }
        let out = tmp.path().join(format!("malformed{i}"));
        let o = cli.run(&[
            "eval",
            "--config",
            base.to_str().unwrap(),
            "--data-dir",
            root.to_str().unwrap(),
            "--ckpt",
            s2.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        ensure(o.status.code() == Some(2) && !out.exists(), format!("malformed dataset {i} not rejected cleanly"))?;
        rejected += 1;
    }
    Ok(format!("{} outputs identical on replay; round trip exact; {rejected} corrupt inputs rejected", fa.len()))
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("AFA_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    let mut mnist: Option<std::result::Result<MnistRun, String>> = None;
    let mut lines = Vec::new();
    let names = [
        "gradient oracle",
        "attack soundness",
        "routing and fusion algebra",
        "feature-statistics observation",
        "fusion curve",
        "AFA vs PGD-AT baseline on CIFAR-10 subset",
        "obfuscated-gradient evidence",
        "adaptive attack harness",
        "determinism and persistence",
    ];
    for (i, name) in names.iter().enumerate() {
        let id = i + 1;
        if !wanted(id) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            let shared = |mnist: &mut Option<std::result::Result<MnistRun, String>>, f: fn(&MnistRun) -> Outcome| {
                let run = mnist.get_or_insert_with(mnist_run);
                match run {
                    Ok(r) => f(r),
                    Err(e) => Err(format!("MNIST pipeline failed: {e}")),
                }
            };
            match id {
                1 => gradient_oracle(),
                2 => attack_soundness(),
                3 => routing_algebra(),
                4 => shared(&mut mnist, observation),
                5 => shared(&mut mnist, fusion),
                6 => table_one(),
                7 => shared(&mut mnist, obfuscation),
                8 => shared(&mut mnist, adaptive),
                _ => determinism(),
            }
        }))
        .unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        let line = match &outcome {
            Ok(d) => format!("PASS [{id}] {name}: {d} ({secs:.1} s)"),
            Err(d) => format!("FAIL [{id}] {name}: {d} ({secs:.1} s)"),
        };
        println!("{line}");
        lines.push((outcome.is_ok(), line));
    }
    println!("\nacceptance summary:");
    for (_, l) in &lines {
        println!("  {l}");
    }
    if lines.iter().all(|(ok, _)| *ok) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
