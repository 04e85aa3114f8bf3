//! Network building blocks: multi-branch batch normalization, the weight
//! generator, AFA fusion and the pre-activation residual CNN that hosts them.
//!
//! # Parameter layout
//!
//! Parameters live in a sorted map keyed by dot-separated paths. Stages and
//! blocks are numbered from 1, BN branches from 0 (branch 0 is the clean
//! branch).
//!
//! | path | shape |
//! |------|-------|
//! | `stem.conv.weight` | `w1 x C x 3 x 3` |
//! | `stem.bn.{weight,bias,running_mean,running_var}` | `w1` |
//! | `stage{s}.block{b}.bn1.branch{k}.*` | `c_in` |
//! | `stage{s}.block{b}.conv1.weight` | `w_s x c_in x 3 x 3` |
//! | `stage{s}.block{b}.bn2.branch{k}.*` | `w_s` |
//! | `stage{s}.block{b}.conv2.weight` | `w_s x w_s x 3 x 3` |
//! | `stage{s}.block{b}.shortcut.weight` | `w_s x c_in x 1 x 1` |
//! | `head.bn.branch{k}.*` | `w_S` |
//! | `head.fc.weight`, `head.fc.bias` | `w_S x M`, `M` |
//! | `wg.conv1.weight`, `wg.conv2.weight` | `g x c_g x 3 x 3`, `g x g x 3 x 3` |
//! | `wg.bn1.*`, `wg.bn2.*` | `g` |
//! | `wg.fc1.weight`, `wg.fc1.bias` | `g x h`, `h` |
//! | `wg.fc2.weight`, `wg.fc2.bias` | `h x 1`, `1` |
//!
//! The shortcut exists only when a block changes width or stride. The first
//! block of every stage after the first has stride 2.
//!
//! # Learnable parameter count
//!
//! With input channels `C`, widths `w_1..w_S`, `B` blocks per stage, `K`
//! stored branches and `M` classes, and `c(s, b)` the input width of block
//! `b` in stage `s` (`w_{s-1}` for `b = 1`, with `w_0 = w_1`; `w_s` after):
//!
//! ```text
//! P = 9 C w_1 + 2 w_1
//!   + sum_{s,b} [ 2K c(s,b) + 9 c(s,b) w_s + 2K w_s + 9 w_s^2 + [shortcut] c(s,b) w_s ]
//!   + 2K w_S + w_S M + M
//!   + [wg] (9 c_g g + 9 g^2 + 4 g + g h + h + h + 1)
//! ```
//!
//! Running statistics are stored alongside but are not learnable.

mod forward;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;
use crate::{Error, Result};

pub use forward::{
    afa_forward, forward, forward_bound, multi_bn_forward, wg_forward, Forward, ForwardOptions, Path, StatUpdate,
    Trainable,
};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
/// The weight generator maps its sigmoid into `[m, 1 - m]` with this `m`, so
/// W0 stays strictly inside (0, 1) even when the sigmoid saturates. It is a
/// power of two, which keeps `sigmoid(0)` mapping to exactly 0.5.
pub const W0_MARGIN: f64 = 1.0 / 1_048_576.0;

const BN_FIELDS: [&str; 4] = ["weight", "bias", "running_mean", "running_var"];

/// Which feature map the weight generator reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WgInput {
    /// Output of the stem (conv, shared BN, ReLU).
    #[default]
    Stem,
    /// The raw image.
    Input,
}

impl WgInput {
    pub const NAMES: [&'static str; 2] = ["stem", "input"];

    pub fn name(self) -> &'static str {
        match self {
            WgInput::Stem => "stem",
            WgInput::Input => "input",
        }
    }

    pub fn parse(s: &str) -> Result<WgInput> {
        match s {
            "stem" => Ok(WgInput::Stem),
            "input" => Ok(WgInput::Input),
            _ => Err(Error::Config(format!(
                "unknown weight-generator input {s:?}; valid: {}",
                WgInput::NAMES.join(", ")
            ))),
        }
    }
}

/// Architecture descriptor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arch {
    pub in_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub stem_stride: usize,
    /// Branch count used in stage I.
    pub k: usize,
    /// Branches currently stored at every multi-BN site (`k`, or 2 once the
    /// middle branches are dropped).
    pub branches: usize,
    pub wg_width: usize,
    pub wg_hidden: usize,
    pub wg_input: WgInput,
}

impl Arch {
    /// Three stages of widths 16/32/64 with two blocks each.
    pub fn desk(in_channels: usize, image_size: usize, num_classes: usize, k: usize) -> Arch {
        Arch {
            in_channels,
            image_size,
            num_classes,
            widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            stem_stride: 1,
            k,
            branches: k,
            wg_width: 16,
            wg_hidden: 32,
            wg_input: WgInput::Stem,
        }
    }

    /// Half-width, one block per stage, strided stem.
    pub fn compact(in_channels: usize, image_size: usize, num_classes: usize, k: usize) -> Arch {
        Arch {
            widths: vec![8, 16, 32],
            blocks_per_stage: 1,
            stem_stride: 2,
            wg_width: 8,
            wg_hidden: 16,
            ..Arch::desk(in_channels, image_size, num_classes, k)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("architecture: {m}")));
        if self.k < 2 {
            return bad(&format!("K must be at least 2, got {}", self.k));
        }
        if self.branches != self.k && self.branches != 2 {
            return bad(&format!(
                "{} stored branches is neither K={} nor 2",
                self.branches, self.k
            ));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("stage widths must be non-empty and positive");
        }
        if self.in_channels == 0 || self.image_size == 0 || self.num_classes < 2 {
            return bad("input channels, image size and class count must be positive");
        }
        if self.blocks_per_stage == 0 || self.stem_stride == 0 {
            return bad("blocks per stage and stem stride must be positive");
        }
        if self.wg_width == 0 || self.wg_hidden == 0 {
            return bad("weight-generator widths must be positive");
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Input width and stride of block `b` (1-based) of stage `s` (1-based).
    pub fn block_io(&self, s: usize, b: usize) -> (usize, usize) {
        let out = self.widths[s - 1];
        if b > 1 {
            return (out, 1);
        }
        if s == 1 {
            (self.widths[0], 1)
        } else {
            (self.widths[s - 2], 2)
        }
    }

    pub fn has_shortcut(&self, s: usize, b: usize) -> bool {
        let (c_in, stride) = self.block_io(s, b);
        c_in != self.widths[s - 1] || stride != 1
    }

    fn wg_in_channels(&self) -> usize {
        match self.wg_input {
            WgInput::Stem => self.widths[0],
            WgInput::Input => self.in_channels,
        }
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "in_channels={}", self.in_channels);
        let _ = writeln!(s, "image_size={}", self.image_size);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "widths={}", widths.join(","));
        let _ = writeln!(s, "blocks_per_stage={}", self.blocks_per_stage);
        let _ = writeln!(s, "stem_stride={}", self.stem_stride);
        let _ = writeln!(s, "k={}", self.k);
        let _ = writeln!(s, "branches={}", self.branches);
        let _ = writeln!(s, "wg_width={}", self.wg_width);
        let _ = writeln!(s, "wg_hidden={}", self.wg_hidden);
        let _ = writeln!(s, "wg_input={}", self.wg_input.name());
        s
    }

    pub fn from_text(text: &str) -> Result<Arch> {
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("architecture line without '=': {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &str| {
            kv.get(key)
                .ok_or_else(|| Error::Config(format!("architecture is missing {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Config(format!("architecture field {key} is not an integer")))
        };
        let widths = get("widths")?
            .split(',')
            .map(|w| {
                w.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad stage width {w:?}")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let arch = Arch {
            in_channels: num("in_channels")?,
            image_size: num("image_size")?,
            num_classes: num("num_classes")?,
            widths,
            blocks_per_stage: num("blocks_per_stage")?,
            stem_stride: num("stem_stride")?,
            k: num("k")?,
            branches: num("branches")?,
            wg_width: num("wg_width")?,
            wg_hidden: num("wg_hidden")?,
            wg_input: WgInput::parse(get("wg_input")?)?,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Prefixes of every multi-BN site, in forward order.
    pub fn sites(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in 1..=self.stages() {
            for b in 1..=self.blocks_per_stage {
                out.push(format!("stage{s}.block{b}.bn1"));
                out.push(format!("stage{s}.block{b}.bn2"));
            }
        }
        out.push("head.bn".to_string());
        out
    }

    /// Names of the convolution outputs the statistics probe can capture.
    pub fn probe_points(&self) -> Vec<String> {
        let mut out = vec!["stem.conv".to_string()];
        for s in 1..=self.stages() {
            for b in 1..=self.blocks_per_stage {
                out.push(format!("stage{s}.block{b}.conv1"));
                out.push(format!("stage{s}.block{b}.conv2"));
            }
        }
        out
    }

    /// Last convolution of stage 2 (or of the last stage for shallower nets).
    pub fn default_probe(&self) -> String {
        let s = self.stages().min(2);
        format!("stage{s}.block{}.conv2", self.blocks_per_stage)
    }

    fn layout(&self, with_wg: bool) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let c = self.in_channels;
        let w1 = self.widths[0];
        out.push(("stem.conv.weight".into(), vec![w1, c, 3, 3], Init::He(9 * c)));
        push_bn(&mut out, "stem.bn", w1);
        for s in 1..=self.stages() {
            let w = self.widths[s - 1];
            for b in 1..=self.blocks_per_stage {
                let (c_in, _) = self.block_io(s, b);
                let pre = format!("stage{s}.block{b}");
                for k in 0..self.branches {
                    push_bn(&mut out, &format!("{pre}.bn1.branch{k}"), c_in);
                }
                out.push((format!("{pre}.conv1.weight"), vec![w, c_in, 3, 3], Init::He(9 * c_in)));
                for k in 0..self.branches {
                    push_bn(&mut out, &format!("{pre}.bn2.branch{k}"), w);
                }
                out.push((format!("{pre}.conv2.weight"), vec![w, w, 3, 3], Init::He(9 * w)));
                if self.has_shortcut(s, b) {
                    out.push((format!("{pre}.shortcut.weight"), vec![w, c_in, 1, 1], Init::He(c_in)));
                }
            }
        }
        let last = *self.widths.last().expect("validated");
        for k in 0..self.branches {
            push_bn(&mut out, &format!("head.bn.branch{k}"), last);
        }
        let m = self.num_classes;
        out.push(("head.fc.weight".into(), vec![last, m], Init::Linear(last)));
        out.push(("head.fc.bias".into(), vec![m], Init::Zeros));
        if with_wg {
            out.extend(self.wg_layout());
        }
        out
    }

    fn wg_layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let (cg, g, h) = (self.wg_in_channels(), self.wg_width, self.wg_hidden);
        let mut out = vec![("wg.conv1.weight".into(), vec![g, cg, 3, 3], Init::He(9 * cg))];
        push_bn(&mut out, "wg.bn1", g);
        out.push(("wg.conv2.weight".into(), vec![g, g, 3, 3], Init::He(9 * g)));
        push_bn(&mut out, "wg.bn2", g);
        out.push(("wg.fc1.weight".into(), vec![g, h], Init::He(g)));
        out.push(("wg.fc1.bias".into(), vec![h], Init::Zeros));
        out.push(("wg.fc2.weight".into(), vec![h, 1], Init::Zeros));
        out.push(("wg.fc2.bias".into(), vec![1], Init::Zeros));
        out
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He(usize),
    /// Normal with std `sqrt(1 / fan_in)`.
    Linear(usize),
    Zeros,
    Ones,
}

fn push_bn(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, c: usize) {
    for (field, init) in BN_FIELDS.iter().zip([Init::Ones, Init::Zeros, Init::Zeros, Init::Ones]) {
        out.push((format!("{prefix}.{field}"), vec![c], init));
    }
}

fn init_tensor(shape: Vec<usize>, init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = |std: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect()
    };
    let data = match init {
        Init::He(fan) => normal((2.0 / fan as f64).sqrt(), rng),
        Init::Linear(fan) => normal((1.0 / fan as f64).sqrt(), rng),
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
    };
    Tensor::new(shape, data).expect("layout shapes are consistent")
}

pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

pub fn is_wg_param(name: &str) -> bool {
    name.starts_with("wg.")
}

/// Architecture plus named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Arch,
    params: BTreeMap<String, Tensor>,
}

/// Seeded initialization of the backbone (no weight generator).
pub fn build_model(arch: &Arch, seed: u64) -> Result<Model> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for (name, shape, init) in arch.layout(false) {
        params.insert(name, init_tensor(shape, init, &mut rng));
    }
    Ok(Model {
        arch: arch.clone(),
        params,
    })
}

/// Adds freshly initialized weight-generator parameters. The final linear
/// layer starts at zero, so W0 starts at exactly 0.5.
pub fn attach_weight_generator(model: &mut Model, seed: u64) -> Result<()> {
    if model.has_weight_generator() {
        return Err(Error::invalid("model already has a weight generator"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, shape, init) in model.arch.wg_layout() {
        model.params.insert(name, init_tensor(shape, init, &mut rng));
    }
    Ok(())
}

/// Keeps branches 0 and `K-1` at every multi-BN site, re-indexed to 0 and 1.
/// Models that already hold two branches are returned unchanged.
pub fn drop_branches(model: &Model) -> Model {
    let mut out = model.clone();
    let last = model.arch.branches - 1;
    if last == 1 {
        return out;
    }
    for site in model.arch.sites() {
        for field in BN_FIELDS {
            let keep = out
                .params
                .remove(&format!("{site}.branch{last}.{field}"))
                .expect("layout has every branch");
            for k in 1..last {
                out.params.remove(&format!("{site}.branch{k}.{field}"));
            }
            out.params.insert(format!("{site}.branch1.{field}"), keep);
        }
    }
    out.arch.branches = 2;
    out
}

impl Model {
    /// Assembles a model from loaded tensors, checking names and shapes
    /// against the layout the architecture implies.
    pub fn from_parts(arch: Arch, params: BTreeMap<String, Tensor>) -> Result<Model> {
        arch.validate()?;
        let with_wg = params.keys().any(|k| is_wg_param(k));
        let layout = arch.layout(with_wg);
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "architecture implies {} tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &layout {
            match params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Model { arch, params })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))
    }

    pub fn has_weight_generator(&self) -> bool {
        self.params.contains_key("wg.fc2.bias")
    }

    /// Learnable scalar count (running statistics excluded).
    pub fn num_learnable(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| !is_running_stat(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// SHA-256 over the names, shapes and bit patterns of every tensor whose
    /// name passes `filter`, in sorted order.
    pub fn digest(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().filter(|(n, _)| filter(n)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Digest of every tensor outside the weight generator.
    pub fn backbone_digest(&self) -> String {
        self.digest(|n| !is_wg_param(n))
    }

    /// Folds batch moments into the running statistics of the sites that
    /// produced them: `r <- (1 - m) r + m b`, with the unbiased batch
    /// variance.
    pub fn apply_updates(&mut self, updates: &[StatUpdate]) -> Result<()> {
        for u in updates {
            let n = u.moments.count as f64;
            let correction = if u.moments.count > 1 { n / (n - 1.0) } else { 1.0 };
            let rm = self.get_mut(&format!("{}.running_mean", u.prefix))?;
            for (r, b) in rm.data_mut().iter_mut().zip(&u.moments.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            let rv = self.get_mut(&format!("{}.running_var", u.prefix))?;
            for (r, b) in rv.data_mut().iter_mut().zip(&u.moments.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * correction;
            }
        }
        Ok(())
    }

    /// Overwrites a parameter tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }
}

/// Per-sample fusion weights, `w1[i] = 1 - w0[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    pub w0: Vec<f64>,
    pub w1: Vec<f64>,
}

impl FusionWeights {
    pub fn from_w0(w0: Vec<f64>) -> FusionWeights {
        let w1 = w0.iter().map(|w| 1.0 - w).collect();
        FusionWeights { w0, w1 }
    }
}
