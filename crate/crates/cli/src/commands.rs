use std::fs::File;
use std::io::Write;
use std::path::{Path as FsPath, PathBuf};

use afa_core::attack::{self, AttackSpec, Method, Victim};
use afa_core::data::{
    load_checkpoint, load_cifar10, load_mnist, Checkpoint, Dataset, DatasetName, Split,
    TrainState,
};
use afa_core::eval::{self, AblationConfig, FeatureStatsProbe, FusionCurve, ProbePoint};
use afa_core::nn::{attach_weight_generator, build_model, Arch, Model, Path};
use afa_core::train::{self, EpochMetrics, RunOptions, TrainObserver};
use afa_core::{derive_seed, Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, RESOLVED_CONFIG};

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> Error {
    move |source| Error::Io { context, source }
}

fn csv_err(path: &FsPath) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Io {
        context: format!("writing {}", path.display()),
        source: std::io::Error::other(e),
    }
}

struct Csv {
    path: PathBuf,
    w: csv::Writer<File>,
}

impl Csv {
    fn create(path: PathBuf, header: &[String]) -> Result<Csv> {
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        w.write_record(header).map_err(csv_err(&path))?;
        Ok(Csv { path, w })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        self.w.write_record(fields).map_err(csv_err(&self.path))?;
        self.w.flush().map_err(io_err(format!("writing {}", self.path.display())))
    }
}

fn s(v: impl ToString) -> String {
    v.to_string()
}

/// Creates the output directory and records the resolved configuration.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out();
    std::fs::create_dir_all(&out).map_err(io_err(format!("creating {}", out.display())))?;
    let p = out.join(RESOLVED_CONFIG);
    std::fs::write(&p, cfg.to_text()).map_err(io_err(format!("writing {}", p.display())))?;
    Ok(out)
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let name = cfg.dataset()?;
    let dir = cfg.data_dir().join(name.subdir());
    let ds = match name {
        DatasetName::Mnist => load_mnist(&dir, split)?,
        _ => load_cifar10(&dir, split)?,
    };
    let n = match split {
        Split::Train => cfg.usize("data.train_size")?,
        Split::Test => cfg.usize("data.test_size")?,
    };
    Ok(if n == 0 { ds } else { ds.first(n) })
}

fn require_ckpt(cfg: &RunConfig) -> Result<Checkpoint> {
    let p = cfg
        .ckpt()
        .ok_or_else(|| Error::Config("this command needs --ckpt".into()))?;
    load_checkpoint(&p)
}

/// Architectures agree on everything except the branch count.
fn check_arch(found: &Arch, want: &Arch) -> Result<()> {
    let same = Arch {
        k: want.k,
        branches: want.branches,
        ..found.clone()
    } == *want;
    if same {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "checkpoint architecture does not match the configuration:\n{}\nvs\n{}",
            found.to_text(),
            want.to_text()
        )))
    }
}

fn victim_path(cfg: &RunConfig, model: &Model) -> Result<Path> {
    let p = cfg.get("eval.path");
    let last = model.arch.branches - 1;
    match p {
        "auto" if model.has_weight_generator() => Ok(Path::Fused),
        "auto" => Ok(Path::Branch(last)),
        "fused" => Ok(Path::Fused),
        _ => p
            .strip_prefix("branch:")
            .and_then(|k| k.parse().ok())
            .filter(|&k| k <= last)
            .map(Path::Branch)
            .ok_or_else(|| {
                Error::Config(format!(
                    "eval.path {p:?}; valid: auto, fused, branch:0..branch:{last}"
                ))
            }),
    }
}

fn sha256_file(p: &FsPath) -> Result<String> {
    use sha2::Digest;
    let bytes = std::fs::read(p).map_err(io_err(format!("reading {}", p.display())))?;
    Ok(sha2::Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

struct MetricsCsv {
    csv: Csv,
}

impl MetricsCsv {
    fn stage1(path: PathBuf, k: usize, xi: &[f64], val: bool) -> Result<MetricsCsv> {
        let mut h = vec![s("epoch"), s("lr")];
        h.extend((1..=k).map(|i| format!("l_{i}")));
        h.extend([s("sum_lk"), s("total")]);
        if val {
            h.extend(xi.iter().map(|e| format!("val_acc_eps{e}")));
        }
        Ok(MetricsCsv { csv: Csv::create(path, &h)? })
    }

    fn stage2(path: PathBuf, grid: &[f64], val: bool) -> Result<MetricsCsv> {
        let mut h = vec![s("epoch"), s("lr"), s("loss")];
        if val {
            h.extend(grid.iter().map(|e| format!("val_acc_eps{e}")));
        }
        Ok(MetricsCsv { csv: Csv::create(path, &h)? })
    }
}

impl TrainObserver for MetricsCsv {
    fn epoch(&mut self, m: &EpochMetrics, _model: &Model) -> Result<()> {
        let mut row = vec![s(m.epoch), s(m.lr)];
        row.extend(m.losses.iter().map(s));
        if m.losses.len() > 1 {
            row.extend([s(m.adversarial_sum()), s(m.total)]);
        }
        row.extend(m.val_acc.iter().map(|(_, a)| s(a)));
        self.csv.row(&row)?;
        eprintln!(
            "epoch {} lr {} loss {:.4}{}",
            m.epoch,
            m.lr,
            m.total,
            m.val_acc
                .iter()
                .map(|(e, a)| format!(" acc@{e}={a:.3}"))
                .collect::<String>()
        );
        Ok(())
    }
}

pub fn train_stage1(cfg: &RunConfig) -> Result<()> {
    let arch = cfg.arch()?;
    let s1 = cfg.stage1()?;
    let (mut model, mut state) = match cfg.ckpt() {
        Some(p) => {
            let ck = load_checkpoint(&p)?;
            if ck.model.arch != arch || ck.state.stage != 1 {
                return Err(Error::Config(format!(
                    "{} is not a stage-I checkpoint of the configured architecture",
                    p.display()
                )));
            }
            (ck.model, ck.state)
        }
        None => (build_model(&arch, cfg.seed())?, TrainState::default()),
    };
    let data = load_split(cfg, Split::Train)?;
    let val_steps = cfg.usize("eval.val_steps")?;
    let val = if val_steps > 0 { Some(load_split(cfg, Split::Test)?) } else { None };
    let out = prepare_out(cfg)?;
    let ckpt = out.join("stage1.ckpt");
    let opts = RunOptions {
        val: val.as_ref(),
        val_steps,
        checkpoint: Some(ckpt.clone()),
    };
    let mut metrics = MetricsCsv::stage1(out.join("stage1_metrics.csv"), s1.k, &s1.xi, val.is_some())?;
    train::train_stage1(&mut model, &mut state, &data, &s1, &opts, &mut metrics)?;
    println!("stage1 checkpoint {} sha256 {}", ckpt.display(), sha256_file(&ckpt)?);
    Ok(())
}

pub fn train_stage2(cfg: &RunConfig) -> Result<()> {
    let arch = cfg.arch()?;
    let s2 = cfg.stage2()?;
    let ck = require_ckpt(cfg)?;
    check_arch(&ck.model.arch, &arch)?;
    let mut model = train::drop_branches(&ck.model);
    let mut state = ck.state;
    if !model.has_weight_generator() {
        attach_weight_generator(&mut model, derive_seed(cfg.seed(), &[7]))?;
        state = TrainState::default();
    }
    let data = load_split(cfg, Split::Train)?;
    let val_steps = cfg.usize("eval.val_steps")?;
    let val = if val_steps > 0 { Some(load_split(cfg, Split::Test)?) } else { None };
    let out = prepare_out(cfg)?;
    let ckpt = out.join("stage2.ckpt");
    let opts = RunOptions {
        val: val.as_ref(),
        val_steps,
        checkpoint: Some(ckpt.clone()),
    };
    let mut metrics = MetricsCsv::stage2(out.join("stage2_metrics.csv"), &s2.sampler.grid, val.is_some())?;
    train::train_stage2(&mut model, &mut state, &data, &s2, &opts, &mut metrics)?;
    println!("backbone sha256 {}", model.backbone_digest());
    println!("stage2 checkpoint {} sha256 {}", ckpt.display(), sha256_file(&ckpt)?);
    Ok(())
}

fn write_f64(path: &FsPath, t: &afa_core::tensor::Tensor) -> Result<()> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(io_err(format!("writing {}", path.display())))
}

/// Attacks the test split and writes the images as little-endian f64 arrays
/// in N x C x H x W order.
pub fn attack(cfg: &RunConfig) -> Result<()> {
    let ck = require_ckpt(cfg)?;
    let model = ck.model;
    let path = victim_path(cfg, &model)?;
    let victim = Victim::new(&model, path);
    let eps = cfg.eps()?;
    let specs = eps.iter().map(|&e| cfg.attack_spec(e)).collect::<Result<Vec<_>>>()?;
    let data = load_split(cfg, Split::Test)?;
    let out = prepare_out(cfg)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let clean = data.images(&idx);
    let labels = data.labels_of(&idx);
    write_f64(&out.join("clean.f64"), &clean)?;
    let mut csv = Csv::create(out.join("attack.csv"), &[s("eps"), s("accuracy"), s("linf")])?;
    for (e, spec) in eps.iter().zip(&specs) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed(), &[e.to_bits()]));
        let bs = cfg.usize("eval.batch_size")?;
        let mut adv = Vec::with_capacity(clean.len());
        for chunk in idx.chunks(bs) {
            let x = data.images(chunk);
            let a = attack::run(&victim, &x, &data.labels_of(chunk), spec, &mut rng)?;
            adv.extend_from_slice(a.adversarial.data());
        }
        let adv = afa_core::tensor::Tensor::new(clean.shape().to_vec(), adv)?;
        let acc = eval::accuracy(&eval::predict(&victim, &adv)?, &labels);
        csv.row(&[s(e), s(acc), s(adv.max_abs_diff(&clean))])?;
        write_f64(&out.join(format!("adv_eps{e}.f64")), &adv)?;
        println!("{} eps {e}: accuracy {acc:.4}", spec.method.name());
    }
    Ok(())
}

fn grid_csv(path: PathBuf, rows: &[(f64, f64)], average: f64) -> Result<()> {
    let mut csv = Csv::create(path, &[s("eps"), s("accuracy")])?;
    for (e, a) in rows {
        csv.row(&[s(e), s(a)])?;
    }
    csv.row(&[s("avg"), s(average)])
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let ck = require_ckpt(cfg)?;
    let model = ck.model;
    let victim = Victim::new(&model, victim_path(cfg, &model)?);
    let eps = cfg.eps()?;
    let method = cfg.method()?;
    let seed = cfg.seed();
    let bs = cfg.usize("eval.batch_size")?;
    let surrogate = match cfg.get("eval.surrogate") {
        "" => None,
        p => Some(load_checkpoint(FsPath::new(p))?.model),
    };
    let data = load_split(cfg, Split::Test)?;
    let out = prepare_out(cfg)?;
    let rows: Vec<(f64, f64)> = if method == Method::PgdAdaptive {
        let steps = cfg.usize("attack.steps")?;
        let mut sweep = Csv::create(
            out.join("adaptive_sweep.csv"),
            &[s("eps"), s("r_ce"), s("r_bce"), s("accuracy")],
        )?;
        let mut rows = Vec::new();
        for &e in &eps {
            let r = eval::adaptive_sweep(&victim, &data, e, steps, seed, bs)?;
            for ((rc, rb), a) in &r.rows {
                sweep.row(&[s(e), s(rc), s(rb), s(a)])?;
            }
            println!(
                "pgd-adaptive eps {e}: min accuracy {:.4} at ratio {}:{}",
                r.min_accuracy, r.worst_ratio.0, r.worst_ratio.1
            );
            rows.push((e, r.min_accuracy));
        }
        rows
    } else {
        let r = eval::eval_grid(&victim, &data, &cfg.attack_spec(0.0)?, &eps, seed, bs)?;
        r.eps.iter().cloned().zip(r.accuracy.iter().cloned()).collect()
    };
    let average = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    for (e, a) in &rows {
        println!("{} eps {e}: accuracy {a:.4}", method.name());
    }
    println!("avg {average:.4}");
    grid_csv(out.join("eval_grid.csv"), &rows, average)?;
    if let Some(sm) = &surrogate {
        let sv = Victim::new(sm, victim_path(cfg, sm)?);
        let spec = cfg.attack_spec(0.0)?;
        let spec = if method == Method::PgdAdaptive {
            AttackSpec { method: Method::Pgd, ..spec }
        } else {
            spec
        };
        let r = eval::blackbox_eval(&victim, &sv, &data, &spec, &eps, seed, bs)?;
        let rows: Vec<(f64, f64)> = r.eps.iter().cloned().zip(r.accuracy.iter().cloned()).collect();
        grid_csv(out.join("blackbox_grid.csv"), &rows, r.average)?;
        println!("black-box avg {:.4}", r.average);
    }
    Ok(())
}

fn feature_csv(path: PathBuf, p: &FeatureStatsProbe) -> Result<()> {
    let mut csv = Csv::create(path, &[s("eps"), s("channel"), s("mean"), s("var")])?;
    for (i, e) in p.eps.iter().enumerate() {
        for (c, (m, v)) in p.means[i].iter().zip(&p.vars[i]).enumerate() {
            csv.row(&[s(e), s(c), s(m), s(v)])?;
        }
    }
    Ok(())
}

fn fusion_csv(path: PathBuf, f: &FusionCurve) -> Result<()> {
    let mut csv = Csv::create(path, &[s("eps"), s("w1_mean"), s("w1_std")])?;
    for i in 0..f.eps.len() {
        csv.row(&[s(f.eps[i]), s(f.w1_mean[i]), s(f.w1_std[i])])?;
    }
    Ok(())
}

/// Feature statistics when every probe strength has its own branch, and the
/// fusion curve when the model has a weight generator.
pub fn probe_stats(cfg: &RunConfig) -> Result<()> {
    let ck = require_ckpt(cfg)?;
    let model = ck.model;
    let probe_eps = cfg.f64_list("probe.eps")?;
    let steps = cfg.usize("probe.steps")?;
    let layer = cfg.get("probe.layer").to_string();
    let routed = probe_eps.len() == model.arch.branches;
    if !routed && !model.has_weight_generator() {
        return Err(Error::Config(format!(
            "probe.eps has {} strengths but the model has {} branches",
            probe_eps.len(),
            model.arch.branches
        )));
    }
    let data = load_split(cfg, Split::Test)?;
    let (seed, bs) = (cfg.seed(), cfg.usize("eval.batch_size")?);
    let out = prepare_out(cfg)?;
    if routed {
        let points: Vec<ProbePoint> = eval::own_branches(&probe_eps);
        let p = eval::probe_feature_stats(&model, &data, &layer, &points, steps, seed, bs)?;
        feature_csv(out.join("feature_stats.csv"), &p)?;
        let c = p.continuity();
        println!(
            "{layer}: monotonicity {:.4}, continuous {} (jumps {:?}, widest-gap jump {})",
            p.monotonicity_score(),
            c.continuous,
            c.jumps,
            c.widest_gap_jump
        );
    }
    if model.has_weight_generator() {
        let f = eval::fusion_curve(&model, &data, &cfg.eps()?, steps, None, seed, bs)?;
        fusion_csv(out.join("fusion_curve.csv"), &f)?;
        println!("fusion curve spearman {:.4}", f.spearman());
    }
    Ok(())
}

pub fn ablate_k(cfg: &RunConfig) -> Result<()> {
    let ks = cfg.usize_list("ablate.ks")?;
    let acfg = AblationConfig {
        arch: cfg.arch()?,
        stage1: cfg.stage1()?,
        stage2: cfg.stage2()?,
        eval_steps: cfg.usize("attack.steps")?,
        eps_grid: cfg.eps()?,
        seed: cfg.seed(),
        batch_size: cfg.usize("eval.batch_size")?,
    };
    let train_data = load_split(cfg, Split::Train)?;
    let test_data = load_split(cfg, Split::Test)?;
    let out = prepare_out(cfg)?;
    let rows = eval::k_ablation(&train_data, &test_data, &ks, &acfg, &mut ())?;
    let mut csv = Csv::create(out.join("k_ablation.csv"), &[s("k"), s("eps"), s("accuracy")])?;
    for r in &rows {
        for (e, a) in r.report.eps.iter().zip(&r.report.accuracy) {
            csv.row(&[s(r.k), s(e), s(a)])?;
        }
        csv.row(&[s(r.k), s("avg"), s(r.report.average)])?;
        println!("K={} avg {:.4}", r.k, r.report.average);
    }
    let _ = std::io::stdout().flush();
    Ok(())
}
