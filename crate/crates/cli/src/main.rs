//! `afa`: train, attack and evaluate adaptive feature alignment models.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 missing or
//! malformed data, 3 numeric divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use afa_core::Error;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "afa", version, about = "Adaptive feature alignment laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Multi-branch adversarial training; writes stage1.ckpt.
    TrainStage1(Common),
    /// Weight-generator training on a stage-I checkpoint; writes stage2.ckpt.
    TrainStage2(Common),
    /// Attacks the test split and writes the perturbed images.
    Attack(AttackArgs),
    /// Accuracy over a grid of strengths; writes eval_grid.csv.
    Eval(AttackArgs),
    /// Feature statistics and fusion curve; writes feature_stats.csv and
    /// fusion_curve.csv.
    ProbeStats(AttackArgs),
    /// Two-stage pipeline per branch count; writes k_ablation.csv.
    AblateK(AttackArgs),
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Data root holding `mnist/` and `cifar-10-batches-bin/`.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Sets any configuration key, e.g. `--set stage1.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    common: Common,
    /// fgsm, ifgsm, pgd, cw or pgd-adaptive.
    #[arg(long, visible_alias = "attack")]
    method: Option<String>,
    /// Comma-separated strengths in pixel units (of 255).
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Step size in pixel units.
    #[arg(long)]
    step_size: Option<f64>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>, Error> {
        let mut o = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            o.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        put("seed", self.seed.map(|s| s.to_string()));
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        put("data.dir", self.data_dir.as_ref().map(|p| p.display().to_string()));
        put("ckpt", self.ckpt.as_ref().map(|p| p.display().to_string()));
        Ok(o)
    }
}

impl AttackArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>, Error> {
        let mut o = self.common.overrides()?;
        if let Some(m) = &self.method {
            o.push(("attack.method".into(), m.clone()));
        }
        if let Some(e) = &self.eps {
            o.push(("attack.eps".into(), e.clone()));
        }
        if let Some(s) = self.steps {
            o.push(("attack.steps".into(), s.to_string()));
        }
        if let Some(s) = self.step_size {
            o.push(("attack.step_size".into(), s.to_string()));
        }
        Ok(o)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Data { .. } => 2,
        Error::Diverged { .. } => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let resolve = |c: &Common, o: Vec<(String, String)>| RunConfig::load(c.config.as_deref(), &o);
    match &cli.command {
        Command::TrainStage1(c) => commands::train_stage1(&resolve(c, c.overrides()?)?),
        Command::TrainStage2(c) => commands::train_stage2(&resolve(c, c.overrides()?)?),
        Command::Attack(a) => commands::attack(&resolve(&a.common, a.overrides()?)?),
        Command::Eval(a) => commands::evaluate(&resolve(&a.common, a.overrides()?)?),
        Command::ProbeStats(a) => commands::probe_stats(&resolve(&a.common, a.overrides()?)?),
        Command::AblateK(a) => commands::ablate_k(&resolve(&a.common, a.overrides()?)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
