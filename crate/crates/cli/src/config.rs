//! Flat `section.key = value` run configuration.
//!
//! Files hold one assignment per line; `#` starts a comment. Command-line
//! flags override file values, and every run writes the fully resolved
//! table next to its outputs so it can be replayed with `--config`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use afa_core::attack::{AttackSpec, Method};
use afa_core::data::{default_data_dir, DatasetName};
use afa_core::nn::{Arch, WgInput};
use afa_core::train::{default_xi, AdvLoss, StageOneConfig, StageTwoConfig, StrengthSampler};
use afa_core::{Error, Result};

pub const RESOLVED_CONFIG: &str = "resolved_config.cfg";

/// Every accepted key with its default. `auto` defers to a derived value.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out", "runs/default"),
    ("ckpt", ""),
    ("data.name", "mnist"),
    ("data.dir", "auto"),
    ("data.train_size", "auto"),
    ("data.test_size", "1000"),
    ("arch.preset", "compact"),
    ("arch.wg_input", "stem"),
    ("stage1.k", "4"),
    ("stage1.xi", "auto"),
    ("stage1.adv_loss", "pgd-at"),
    ("stage1.trades_lambda", "6"),
    ("stage1.lr", "0.1"),
    ("stage1.epochs", "20"),
    ("stage1.lr_decay_factor", "0.9"),
    ("stage1.decay_epochs", "15,18"),
    ("stage1.batch_size", "64"),
    ("stage1.momentum", "0.9"),
    ("stage1.weight_decay", "0.0005"),
    ("stage1.attack_steps", "10"),
    ("stage1.attack_step_ratio", "0.25"),
    ("stage1.clean_loss", "true"),
    ("stage1.augment", "auto"),
    ("stage2.lr", "0.01"),
    ("stage2.epochs", "5"),
    ("stage2.lr_decay_factor", "0.9"),
    ("stage2.decay_epochs", "3"),
    ("stage2.batch_size", "64"),
    ("stage2.momentum", "0.9"),
    ("stage2.grid", "0,1,2,4,8"),
    ("stage2.continuous_prob", "0.25"),
    ("stage2.continuous_max", "8"),
    ("stage2.strengths_per_batch", "4"),
    ("stage2.attack_steps", "10"),
    ("stage2.attack_step_ratio", "0.25"),
    ("stage2.augment", "auto"),
    ("attack.method", "pgd"),
    ("attack.eps", "0,1,2,4,8"),
    ("attack.steps", "20"),
    ("attack.step_size", "auto"),
    ("eval.path", "auto"),
    ("eval.batch_size", "250"),
    ("eval.val_steps", "0"),
    ("eval.surrogate", ""),
    ("probe.layer", "auto"),
    ("probe.eps", "auto"),
    ("probe.steps", "10"),
    ("ablate.ks", "2,3,5,9"),
];

fn known(key: &str) -> bool {
    DEFAULTS.iter().any(|(k, _)| *k == key)
}

/// Parses `key = value` lines.
pub fn parse_text(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{origin}:{}: expected `key = value`", i + 1))
        })?;
        let k = k.trim();
        if !known(k) {
            return Err(Error::Config(format!("{origin}:{}: unknown key {k:?}", i + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Defaults, then the file, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut values: BTreeMap<String, String> = DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            values.extend(parse_text(&text, &p.display().to_string())?);
        }
        for (k, v) in overrides {
            if !known(k) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
            values.insert(k.clone(), v.clone());
        }
        let mut cfg = RunConfig { values };
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Replaces every `auto` by its derived value and validates the result.
    fn resolve(&mut self) -> Result<()> {
        let data = self.dataset()?;
        let set = |c: &mut RunConfig, k: &str, v: String| {
            if c.get(k) == "auto" {
                c.values.insert(k.into(), v);
            }
        };
        set(self, "data.dir", default_data_dir().display().to_string());
        let train_size = if data == DatasetName::Cifar10Subset { "10000" } else { "0" };
        set(self, "data.train_size", train_size.into());
        set(self, "stage1.augment", data.augments().to_string());
        set(self, "stage2.augment", data.augments().to_string());
        let k = self.usize("stage1.k")?;
        set(self, "stage1.xi", join(&default_xi(k)?));
        let xi = self.get("stage1.xi").to_string();
        set(self, "probe.eps", xi);
        let arch = self.arch()?;
        set(self, "probe.layer", arch.default_probe());
        self.stage1()?.validate()?;
        self.stage2()?.validate()?;
        self.method()?;
        self.eps()?;
        self.usize("attack.steps")?;
        self.step_size()?;
        self.usize_list("ablate.ks")?;
        self.f64_list("probe.eps")?;
        self.usize("probe.steps")?;
        self.u64("seed")?;
        if self.usize("eval.batch_size")? == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        self.usize("eval.val_steps")?;
        self.usize("data.test_size")?;
        self.usize("data.train_size")?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("every key has a default")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("{key} = {v:?} is not a valid value")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parse(key)
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key);
        if v.trim().is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: {s:?} is not a valid entry")))
            })
            .collect()
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.list(key)
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.list(key)
    }

    pub fn seed(&self) -> u64 {
        self.u64("seed").expect("validated")
    }

    pub fn out(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    pub fn ckpt(&self) -> Option<PathBuf> {
        Some(self.get("ckpt")).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    pub fn dataset(&self) -> Result<DatasetName> {
        DatasetName::parse(self.get("data.name"))
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(self.get("data.dir"))
    }

    pub fn arch(&self) -> Result<Arch> {
        let (c, size) = match self.dataset()? {
            DatasetName::Mnist => (1, 28),
            _ => (3, 32),
        };
        let k = self.usize("stage1.k")?;
        let mut arch = match self.get("arch.preset") {
            "desk" => Arch::desk(c, size, 10, k),
            "compact" => Arch::compact(c, size, 10, k),
            p => {
                return Err(Error::Config(format!(
                    "unknown arch.preset {p:?}; valid: desk, compact"
                )))
            }
        };
        arch.wg_input = WgInput::parse(self.get("arch.wg_input"))?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn stage1(&self) -> Result<StageOneConfig> {
        let k = self.usize("stage1.k")?;
        Ok(StageOneConfig {
            k,
            xi: self.f64_list("stage1.xi")?,
            adv_loss: AdvLoss::parse(self.get("stage1.adv_loss"))?,
            trades_lambda: self.f64("stage1.trades_lambda")?,
            lr: self.f64("stage1.lr")?,
            epochs: self.usize("stage1.epochs")?,
            lr_decay_factor: self.f64("stage1.lr_decay_factor")?,
            decay_epochs: self.usize_list("stage1.decay_epochs")?,
            batch_size: self.usize("stage1.batch_size")?,
            seed: self.u64("seed")?,
            momentum: self.f64("stage1.momentum")?,
            weight_decay: self.f64("stage1.weight_decay")?,
            attack_steps: self.usize("stage1.attack_steps")?,
            attack_step_ratio: self.f64("stage1.attack_step_ratio")?,
            clean_loss: self.bool("stage1.clean_loss")?,
            augment: self.bool("stage1.augment")?,
        })
    }

    pub fn stage2(&self) -> Result<StageTwoConfig> {
        Ok(StageTwoConfig {
            lr: self.f64("stage2.lr")?,
            epochs: self.usize("stage2.epochs")?,
            lr_decay_factor: self.f64("stage2.lr_decay_factor")?,
            decay_epochs: self.usize_list("stage2.decay_epochs")?,
            batch_size: self.usize("stage2.batch_size")?,
            seed: self.u64("seed")?,
            momentum: self.f64("stage2.momentum")?,
            sampler: StrengthSampler {
                grid: self.f64_list("stage2.grid")?,
                continuous_prob: self.f64("stage2.continuous_prob")?,
                continuous_max: self.f64("stage2.continuous_max")?,
            },
            strengths_per_batch: self.usize("stage2.strengths_per_batch")?,
            attack_steps: self.usize("stage2.attack_steps")?,
            attack_step_ratio: self.f64("stage2.attack_step_ratio")?,
            augment: self.bool("stage2.augment")?,
        })
    }

    pub fn method(&self) -> Result<Method> {
        Method::parse(self.get("attack.method")).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn eps(&self) -> Result<Vec<f64>> {
        let eps = self.f64_list("attack.eps")?;
        if eps.is_empty() || eps.iter().any(|&e| !(e >= 0.0 && e.is_finite())) {
            return Err(Error::Config(format!("attack.eps {eps:?} must be nonempty and >= 0")));
        }
        Ok(eps)
    }

    fn step_size(&self) -> Result<Option<f64>> {
        match self.get("attack.step_size") {
            "auto" => Ok(None),
            _ => self.f64("attack.step_size").map(Some),
        }
    }

    /// Attack template at strength `eps`.
    pub fn attack_spec(&self, eps: f64) -> Result<AttackSpec> {
        let mut spec = AttackSpec::for_method(self.method()?, eps, self.usize("attack.steps")?);
        if let Some(s) = self.step_size()? {
            if spec.method != Method::Fgsm {
                spec.step_size = s;
            }
        }
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

pub fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}
