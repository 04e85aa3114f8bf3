use std::collections::BTreeMap;

use super::{is_running_stat, is_wg_param, Model, WgInput, BN_EPS, W0_MARGIN};
use crate::tensor::{BatchMoments, BnStats, Graph, Tensor, Var};
use crate::{Error, Result};

/// How multi-BN sites are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Path {
    /// Every site uses branch `k`.
    Branch(usize),
    /// Every site fuses branch 0 and the last stored branch with W0.
    Fused,
}

/// Which parameters are bound as gradient-carrying leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Backbone,
    WeightGenerator,
}

impl Trainable {
    pub fn admits(self, name: &str) -> bool {
        if is_running_stat(name) {
            return false;
        }
        match self {
            Trainable::Nothing => false,
            Trainable::Backbone => !is_wg_param(name),
            Trainable::WeightGenerator => is_wg_param(name),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub path: Path,
    /// Batch statistics (and running-stat updates) for backbone BN sites.
    pub backbone_training: bool,
    /// Batch statistics (and running-stat updates) for the weight generator.
    pub wg_training: bool,
    /// Replaces the weight generator with a constant W0.
    pub w0_override: Option<f64>,
    pub trainable: Trainable,
}

impl ForwardOptions {
    /// Eval-mode forward through one branch, nothing trainable.
    pub fn eval(path: Path) -> ForwardOptions {
        ForwardOptions {
            path,
            backbone_training: false,
            wg_training: false,
            w0_override: None,
            trainable: Trainable::Nothing,
        }
    }
}

/// Batch moments produced at the BN whose running stats live under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate {
    pub prefix: String,
    pub moments: BatchMoments,
}

pub struct Forward {
    pub logits: Var,
    /// Per-sample W0 (shape `[N]`) on the fused path.
    pub w0: Option<Var>,
    pub updates: Vec<StatUpdate>,
    /// Convolution outputs keyed by probe name.
    pub probes: Vec<(String, Var)>,
    /// Parameters bound as gradient-carrying leaves.
    pub params: BTreeMap<String, Var>,
}

struct Binder<'m, 'b> {
    model: &'m Model,
    trainable: Trainable,
    bound: &'b mut BTreeMap<String, Var>,
}

impl<'m, 'b> Binder<'m, 'b> {
    fn new(model: &'m Model, trainable: Trainable, bound: &'b mut BTreeMap<String, Var>) -> Self {
        Binder {
            model,
            trainable,
            bound,
        }
    }

    fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.model.get(name)?.clone();
        let v = if self.trainable.admits(name) {
            g.param(t)
        } else {
            g.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn bn(
        &mut self,
        g: &mut Graph,
        prefix: &str,
        x: Var,
        training: bool,
        updates: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        let gamma = self.var(g, &format!("{prefix}.weight"))?;
        let beta = self.var(g, &format!("{prefix}.bias"))?;
        if training {
            let (y, m) = g.batch_norm(x, gamma, beta, BnStats::Batch, BN_EPS)?;
            updates.push(StatUpdate {
                prefix: prefix.to_string(),
                moments: m.expect("batch mode returns moments"),
            });
            Ok(y)
        } else {
            let mean = self.model.get(&format!("{prefix}.running_mean"))?;
            let var = self.model.get(&format!("{prefix}.running_var"))?;
            let (y, _) = g.batch_norm(
                x,
                gamma,
                beta,
                BnStats::Fixed {
                    mean: mean.data(),
                    var: var.data(),
                },
                BN_EPS,
            )?;
            Ok(y)
        }
    }

    fn routed(
        &mut self,
        g: &mut Graph,
        site: &str,
        x: Var,
        route: usize,
        training: bool,
        updates: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        let branches = self.model.arch.branches;
        if route >= branches {
            return Err(Error::invalid(format!(
                "route {route} out of range for {branches} branches at {site}"
            )));
        }
        self.bn(g, &format!("{site}.branch{route}"), x, training, updates)
    }

    fn fused(&mut self, g: &mut Graph, site: &str, x: Var, w0: Var) -> Result<Var> {
        let last = self.model.arch.branches - 1;
        let mut none = Vec::new();
        let a = self.bn(g, &format!("{site}.branch0"), x, false, &mut none)?;
        let b = self.bn(g, &format!("{site}.branch{last}"), x, false, &mut none)?;
        let w1 = g.affine(w0, -1.0, 1.0);
        let a = g.scale_samples(a, w0)?;
        let b = g.scale_samples(b, w1)?;
        g.add(a, b)
    }

    fn wg(
        &mut self,
        g: &mut Graph,
        x: Var,
        training: bool,
        updates: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        if !self.model.has_weight_generator() {
            return Err(Error::invalid("model has no weight generator"));
        }
        let expected = self.model.get("wg.conv1.weight")?.shape()[1];
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != expected {
            return Err(Error::shape("wg_forward", &xs, &[xs.first().copied().unwrap_or(0), expected]));
        }
        let n = xs[0];
        let w = self.var(g, "wg.conv1.weight")?;
        let h = g.conv2d(x, w, 1, 1)?;
        let h = self.bn(g, "wg.bn1", h, training, updates)?;
        let h = g.relu(h);
        let w = self.var(g, "wg.conv2.weight")?;
        let h = g.conv2d(h, w, 2, 1)?;
        let h = self.bn(g, "wg.bn2", h, training, updates)?;
        let h = g.relu(h);
        let h = g.global_avg_pool(h)?;
        let (w1, b1) = (self.var(g, "wg.fc1.weight")?, self.var(g, "wg.fc1.bias")?);
        let h = g.matmul(h, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.relu(h);
        let (w2, b2) = (self.var(g, "wg.fc2.weight")?, self.var(g, "wg.fc2.bias")?);
        let z = g.matmul(h, w2)?;
        let z = g.add_bias(z, b2)?;
        let s = g.sigmoid(z);
        let s = g.affine(s, 1.0 - 2.0 * W0_MARGIN, W0_MARGIN);
        g.reshape(s, &[n])
    }
}

struct Site {
    path: Path,
    w0: Option<Var>,
    train: bool,
}

impl Site {
    fn apply(
        &self,
        b: &mut Binder<'_, '_>,
        g: &mut Graph,
        name: &str,
        x: Var,
        updates: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        match (self.path, self.w0) {
            (Path::Branch(k), _) => b.routed(g, name, x, k, self.train, updates),
            (Path::Fused, Some(w0)) => b.fused(g, name, x, w0),
            (Path::Fused, None) => unreachable!("fused path always has W0"),
        }
    }
}

/// One multi-BN site routed to a single branch. Training mode uses batch
/// statistics and returns the moments destined for that branch only.
pub fn multi_bn_forward(
    model: &Model,
    g: &mut Graph,
    site: &str,
    x: Var,
    route: usize,
    training: bool,
) -> Result<(Var, Option<StatUpdate>)> {
    let mut updates = Vec::new();
    let y = Binder::new(model, Trainable::Nothing, &mut BTreeMap::new()).routed(g, site, x, route, training, &mut updates)?;
    Ok((y, updates.pop()))
}

/// `w0 * BN_0(x) + (1 - w0) * BN_last(x)` with running statistics.
pub fn afa_forward(model: &Model, g: &mut Graph, site: &str, x: Var, w0: Var) -> Result<Var> {
    Binder::new(model, Trainable::Nothing, &mut BTreeMap::new()).fused(g, site, x, w0)
}

/// Per-sample W0 of shape `[N]` from the weight generator's input feature.
pub fn wg_forward(model: &Model, g: &mut Graph, x: Var, training: bool) -> Result<(Var, Vec<StatUpdate>)> {
    let mut updates = Vec::new();
    let w0 = Binder::new(model, Trainable::Nothing, &mut BTreeMap::new()).wg(g, x, training, &mut updates)?;
    Ok((w0, updates))
}

/// Full network forward on an `N x C x H x W` batch in `[0, 1]`.
pub fn forward(model: &Model, g: &mut Graph, x: Var, opts: ForwardOptions) -> Result<Forward> {
    forward_bound(model, g, x, opts, &mut BTreeMap::new())
}

/// Like [`forward`], reusing (and extending) parameter bindings from earlier
/// forwards on the same graph, so gradients from several passes accumulate
/// on one leaf per parameter.
pub fn forward_bound(
    model: &Model,
    g: &mut Graph,
    x: Var,
    opts: ForwardOptions,
    bound: &mut BTreeMap<String, Var>,
) -> Result<Forward> {
    let arch = &model.arch;
    let xs = g.shape(x).to_vec();
    let want = [arch.in_channels, arch.image_size, arch.image_size];
    if xs.len() != 4 || xs[1..] != want {
        return Err(Error::shape("forward", &xs, &want));
    }
    if let Path::Branch(k) = opts.path {
        if k >= arch.branches {
            return Err(Error::invalid(format!(
                "branch {k} out of range for {} branches",
                arch.branches
            )));
        }
    }
    if opts.path == Path::Fused && opts.backbone_training {
        return Err(Error::invalid(
            "fused path cannot run with backbone batch statistics",
        ));
    }
    let n = xs[0];
    let mut b = Binder::new(model, opts.trainable, bound);
    let mut updates = Vec::new();
    let mut probes = Vec::new();
    let train = opts.backbone_training;

    let w = b.var(g, "stem.conv.weight")?;
    let h = g.conv2d(x, w, arch.stem_stride, 1)?;
    probes.push(("stem.conv".to_string(), h));
    let h = b.bn(g, "stem.bn", h, train, &mut updates)?;
    let mut h = g.relu(h);

    let w0 = match (opts.path, opts.w0_override) {
        (Path::Branch(_), _) => None,
        (Path::Fused, Some(v)) => Some(g.constant(Tensor::full(vec![n], v))),
        (Path::Fused, None) => {
            let src = match arch.wg_input {
                WgInput::Stem => h,
                WgInput::Input => x,
            };
            Some(b.wg(g, src, opts.wg_training, &mut updates)?)
        }
    };
    let site = Site {
        path: opts.path,
        w0,
        train,
    };

    for s in 1..=arch.stages() {
        for blk in 1..=arch.blocks_per_stage {
            let pre = format!("stage{s}.block{blk}");
            let (_, stride) = arch.block_io(s, blk);
            let a = site.apply(&mut b, g, &format!("{pre}.bn1"), h, &mut updates)?;
            let a = g.relu(a);
            let shortcut = if arch.has_shortcut(s, blk) {
                let w = b.var(g, &format!("{pre}.shortcut.weight"))?;
                g.conv2d(a, w, stride, 0)?
            } else {
                h
            };
            let w = b.var(g, &format!("{pre}.conv1.weight"))?;
            let c = g.conv2d(a, w, stride, 1)?;
            probes.push((format!("{pre}.conv1"), c));
            let c = site.apply(&mut b, g, &format!("{pre}.bn2"), c, &mut updates)?;
            let c = g.relu(c);
            let w = b.var(g, &format!("{pre}.conv2.weight"))?;
            let c = g.conv2d(c, w, 1, 1)?;
            probes.push((format!("{pre}.conv2"), c));
            h = g.add(c, shortcut)?;
        }
    }

    let h = site.apply(&mut b, g, "head.bn", h, &mut updates)?;
    let h = g.relu(h);
    let h = g.global_avg_pool(h)?;
    let w = b.var(g, "head.fc.weight")?;
    let bias = b.var(g, "head.fc.bias")?;
    let z = g.matmul(h, w)?;
    let logits = g.add_bias(z, bias)?;

    let params = b
        .bound
        .iter()
        .filter(|&(_, &v)| g.requires_grad(v))
        .map(|(n, &v)| (n.clone(), v))
        .collect();
    Ok(Forward {
        logits,
        w0,
        updates,
        probes,
        params,
    })
}
