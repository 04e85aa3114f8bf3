//! Dense f64 tensors and a tape-based reverse-mode differentiator.
//!
//! A [`Graph`] owns every value produced during a forward pass. Operations
//! whose operands require gradients are appended to the tape; [`Graph::backward`]
//! replays the tape in reverse and leaves a gradient on every reachable
//! tensor that requires one.

mod conv;

pub use conv::{ConvAlgo, ConvGeom};

use crate::error::{Error, Result};

/// Row-major dense array of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Tensor> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Tensor {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Handle to a value stored in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics source for [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with externally supplied (running) statistics.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel moments of a batch, as seen by a batch-statistics BN call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

struct Slot {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

enum Op {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d(Var, Var, ConvGeom),
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    ScaleSamples(Var, Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SoftmaxKl {
        p: Var,
        q: Var,
        probs_p: Vec<f64>,
        probs_q: Vec<f64>,
        kl_rows: Vec<f64>,
    },
    Bce {
        p: Var,
        target: Vec<f64>,
    },
    Margin {
        logits: Var,
        active: Vec<Option<(usize, usize)>>,
    },
    Mean(Var),
}

struct Node {
    out: Var,
    op: Op,
}

/// Lower/upper clamp applied to probabilities inside the BCE logarithms.
pub const BCE_CLAMP: f64 = 1e-15;

/// Value store plus tape. Single-threaded; build one per forward pass.
#[derive(Default)]
pub struct Graph {
    slots: Vec<Slot>,
    tape: Vec<Node>,
    conv_algo: ConvAlgo,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn with_conv_algo(conv_algo: ConvAlgo) -> Graph {
        Graph {
            conv_algo,
            ..Graph::default()
        }
    }

    pub fn conv_algo(&self) -> ConvAlgo {
        self.conv_algo
    }

    /// Number of operations currently recorded.
    pub fn tape_len(&self) -> usize {
        self.tape.len()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false)
    }

    /// A value that receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.slots[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.slots[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.slots[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.slots[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.slots[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.slots.push(Slot {
            value,
            requires_grad,
            grad: None,
        });
        Var(self.slots.len() - 1)
    }

    fn record(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.slots[v.0].requires_grad);
        let out = self.push(value, requires_grad);
        if requires_grad {
            self.tape.push(Node { out, op });
        }
        out
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.slots[v.0].value.data
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor {
            shape: self.shape(a).to_vec(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map("add", a, b, |x, y| x + y)?;
        Ok(self.record(t, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map("sub", a, b, |x, y| x - y)?;
        Ok(self.record(t, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map("mul", a, b, |x, y| x * y)?;
        Ok(self.record(t, &[a, b], Op::Mul(a, b)))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data: self.data(x).iter().map(|&v| scale * v + shift).collect(),
        };
        self.record(t, &[x], Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// `(m x k) . (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        conv::gemm(m, k, n, self.data(a), false, self.data(b), false, 0.0, &mut out);
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.record(t, &[a, b], Op::MatMul(a, b)))
    }

    /// Adds a length-`F` bias to every row of an `N x F` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let f = sb[0];
        let b = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % f])
            .collect();
        let t = Tensor {
            shape: sx.to_vec(),
            data,
        };
        Ok(self.record(t, &[x, bias], Op::AddBias(x, bias)))
    }

    /// NCHW convolution with an `O x C x KH x KW` kernel and no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)
            .ok_or_else(|| Error::shape("conv2d", self.shape(x), self.shape(w)))?;
        let out = conv::forward(self.conv_algo, &geom, self.data(x), self.data(w));
        let t = Tensor {
            shape: geom.out_shape(),
            data: out,
        };
        Ok(self.record(t, &[x, w], Op::Conv2d(x, w, geom)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data: self.data(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        };
        self.record(t, &[x], Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data: self.data(x).iter().map(|&v| sigmoid(v)).collect(),
        };
        self.record(t, &[x], Op::Sigmoid(x))
    }

    /// `N x C x H x W -> N x C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", s, &[0, 0, 0, 0]));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let data = self
            .data(x)
            .chunks(hw.max(1))
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor {
            shape: vec![n, c],
            data,
        };
        Ok(self.record(t, &[x], Op::GlobalAvgPool(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.record(t, &[x], Op::Reshape(x)))
    }

    /// Multiplies sample `n` of `x` (leading axis) by `w[n]`.
    pub fn scale_samples(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let n = sx.first().copied().unwrap_or(0);
        if sx.is_empty() || self.value(w).len() != n {
            return Err(Error::shape("scale_samples", sx, sw));
        }
        let per = self.value(x).len() / n.max(1);
        let wd = self.data(w);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * wd[i / per])
            .collect();
        let t = Tensor {
            shape: sx.to_vec(),
            data,
        };
        Ok(self.record(t, &[x, w], Op::ScaleSamples(x, w)))
    }

    /// Per-channel normalization of an `N x C (x H x W)` tensor followed by
    /// the affine map `gamma * x_hat + beta`. With [`BnStats::Batch`] the
    /// batch moments are returned so the caller can fold them into running
    /// statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 && s.len() != 4 {
            return Err(Error::shape("batch_norm", &s, self.shape(gamma)));
        }
        let (n, c) = (s[0], s[1]);
        let hw: usize = s[2..].iter().product();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm", &s, self.shape(p)));
            }
        }
        let count = n * hw;
        let xd = self.data(x);
        let (mean, var, moments) = match stats {
            BnStats::Batch => {
                if count == 0 {
                    return Err(Error::invalid("batch_norm on an empty batch"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let plane = &xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        mean[ci] += plane.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for ni in 0..n {
                    for ci in 0..c {
                        let plane = &xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        var[ci] += plane.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(moments))
            }
            BnStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", &s, &[mean.len(), var.len()]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut x_hat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    let h = (xd[i] - mean[ci]) * inv_std[ci];
                    x_hat[i] = h;
                    out[i] = gd[ci] * h + bd[ci];
                }
            }
        }
        let t = Tensor { shape: s, data: out };
        let var_out = self.record(
            t,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats: moments.is_some(),
            },
        );
        Ok((var_out, moments))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, with row-max
    /// subtraction inside the log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape("softmax_cross_entropy", s, &[labels.len()]));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let probs = softmax_rows(self.data(logits), c);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -log_softmax_at(&self.data(logits)[i * c..(i + 1) * c], y))
            .sum::<f64>()
            / n as f64;
        let op = Op::SoftmaxCe {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.record(Tensor::scalar(loss), &[logits], op))
    }

    /// Mean over rows of `KL(softmax(p) || softmax(q))`.
    pub fn softmax_kl(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape("softmax_kl", p, q)?;
        let s = self.shape(p);
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::shape("softmax_kl", s, self.shape(q)));
        }
        let (n, c) = (s[0], s[1]);
        let probs_p = softmax_rows(self.data(p), c);
        let probs_q = softmax_rows(self.data(q), c);
        let (pd, qd) = (self.data(p), self.data(q));
        let kl_rows: Vec<f64> = (0..n)
            .map(|i| {
                let (pr, qr) = (&pd[i * c..(i + 1) * c], &qd[i * c..(i + 1) * c]);
                let (lse_p, lse_q) = (log_sum_exp(pr), log_sum_exp(qr));
                (0..c)
                    .map(|j| probs_p[i * c + j] * ((pr[j] - lse_p) - (qr[j] - lse_q)))
                    .sum()
            })
            .collect();
        let loss = kl_rows.iter().sum::<f64>() / n as f64;
        let op = Op::SoftmaxKl {
            p,
            q,
            probs_p,
            probs_q,
            kl_rows,
        };
        Ok(self.record(Tensor::scalar(loss), &[p, q], op))
    }

    /// Mean binary cross-entropy of probabilities `p` against `target`.
    /// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the logs.
    pub fn binary_cross_entropy(&mut self, p: Var, target: &[f64]) -> Result<Var> {
        let n = self.value(p).len();
        if n != target.len() || n == 0 {
            return Err(Error::shape("binary_cross_entropy", self.shape(p), &[target.len()]));
        }
        let loss = self
            .data(p)
            .iter()
            .zip(target)
            .map(|(&pi, &t)| {
                let pc = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n as f64;
        let op = Op::Bce {
            p,
            target: target.to_vec(),
        };
        Ok(self.record(Tensor::scalar(loss), &[p], op))
    }

    /// Mean over rows of `max(z_y - max_{j != y} z_j, -kappa)`.
    pub fn margin_loss(&mut self, logits: Var, labels: &[usize], kappa: f64) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 || s[1] < 2 {
            return Err(Error::shape("margin_loss", s, &[labels.len()]));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let z = self.data(logits);
        let mut total = 0.0;
        let mut active = Vec::with_capacity(n);
        for (i, &y) in labels.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            let (j_best, z_best) = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .fold((usize::MAX, f64::NEG_INFINITY), |acc, (j, &v)| {
                    if v > acc.1 {
                        (j, v)
                    } else {
                        acc
                    }
                });
            let margin = row[y] - z_best;
            if margin > -kappa {
                total += margin;
                active.push(Some((y, j_best)));
            } else {
                total += -kappa;
                active.push(None);
            }
        }
        let op = Op::Margin { logits, active };
        Ok(self.record(Tensor::scalar(total / n as f64), &[logits], op))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let len = self.value(x).len();
        if len == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let m = self.data(x).iter().sum::<f64>() / len as f64;
        Ok(self.record(Tensor::scalar(m), &[x], Op::Mean(x)))
    }

    /// Populates gradients of everything `loss` depends on, then clears the tape.
    /// Gradients left over from an earlier backward pass are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::invalid(
                "backward on a value that does not depend on any gradient-requiring tensor",
            ));
        }
        for slot in &mut self.slots {
            slot.grad = None;
        }
        let shape = self.shape(loss).to_vec();
        self.slots[loss.0].grad = Some(Tensor {
            shape,
            data: vec![1.0],
        });
        let tape = std::mem::take(&mut self.tape);
        for node in tape.iter().rev() {
            let Some(dy) = self.slots[node.out.0].grad.take() else {
                continue;
            };
            self.backward_node(node, &dy.data);
            self.slots[node.out.0].grad = Some(dy);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        let slot = &mut self.slots[v.0];
        if !slot.requires_grad {
            return;
        }
        debug_assert_eq!(delta.len(), slot.value.data.len());
        match &mut slot.grad {
            Some(g) => g.data.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
            None => {
                slot.grad = Some(Tensor {
                    shape: slot.value.shape.clone(),
                    data: delta,
                })
            }
        }
    }

    fn backward_node(&mut self, node: &Node, dy: &[f64]) {
        match &node.op {
            &Op::Add(a, b) => {
                self.accumulate(a, dy.to_vec());
                self.accumulate(b, dy.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, dy.to_vec());
                self.accumulate(b, dy.iter().map(|d| -d).collect());
            }
            &Op::Mul(a, b) => {
                let da = dy.iter().zip(self.data(b)).map(|(d, y)| d * y).collect();
                let db = dy.iter().zip(self.data(a)).map(|(d, x)| d * x).collect();
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            &Op::Affine(x, scale) => {
                self.accumulate(x, dy.iter().map(|d| d * scale).collect());
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.requires_grad(a) {
                    let mut da = vec![0.0; m * k];
                    conv::gemm(m, n, k, dy, false, self.data(b), true, 0.0, &mut da);
                    self.accumulate(a, da);
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; k * n];
                    conv::gemm(k, m, n, self.data(a), true, dy, false, 0.0, &mut db);
                    self.accumulate(b, db);
                }
            }
            &Op::AddBias(x, bias) => {
                let f = self.shape(bias)[0];
                let mut db = vec![0.0; f];
                for (i, d) in dy.iter().enumerate() {
                    db[i % f] += d;
                }
                self.accumulate(x, dy.to_vec());
                self.accumulate(bias, db);
            }
            &Op::Conv2d(x, w, geom) => {
                let (want_dx, want_dw) = (self.requires_grad(x), self.requires_grad(w));
                let (dx, dw) = conv::backward(
                    self.conv_algo,
                    &geom,
                    self.data(x),
                    self.data(w),
                    dy,
                    want_dx,
                    want_dw,
                );
                if want_dx {
                    self.accumulate(x, dx);
                }
                if want_dw {
                    self.accumulate(w, dw);
                }
            }
            &Op::Relu(x) => {
                // Subgradient 0 at the kink.
                let dx = dy
                    .iter()
                    .zip(self.data(x))
                    .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accumulate(x, dx);
            }
            &Op::Sigmoid(x) => {
                let y = &self.slots[node.out.0].value.data;
                let dx = dy.iter().zip(y).map(|(d, s)| d * s * (1.0 - s)).collect();
                self.accumulate(x, dx);
            }
            &Op::GlobalAvgPool(x) => {
                let s = self.shape(x);
                let hw = s[2] * s[3];
                let mut dx = vec![0.0; self.value(x).len()];
                for (i, d) in dy.iter().enumerate() {
                    dx[i * hw..(i + 1) * hw].fill(d / hw as f64);
                }
                self.accumulate(x, dx);
            }
            &Op::Reshape(x) => self.accumulate(x, dy.to_vec()),
            &Op::ScaleSamples(x, w) => {
                let n = self.value(w).len();
                let per = self.value(x).len() / n.max(1);
                let (xd, wd) = (self.data(x), self.data(w));
                let dx = dy.iter().enumerate().map(|(i, d)| d * wd[i / per]).collect();
                let dw = (0..n)
                    .map(|s| {
                        let r = s * per..(s + 1) * per;
                        dy[r.clone()].iter().zip(&xd[r]).map(|(d, v)| d * v).sum()
                    })
                    .collect();
                self.accumulate(x, dx);
                self.accumulate(w, dw);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*x).to_vec();
                let (n, c) = (s[0], s[1]);
                let hw: usize = s[2..].iter().product();
                let count = (n * hw) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in base..base + hw {
                            dgamma[ci] += dy[i] * x_hat[i];
                            dbeta[ci] += dy[i];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let gd = self.data(*gamma);
                    let mut dx = vec![0.0; dy.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let k = gd[ci] * inv_std[ci];
                            for i in base..base + hw {
                                dx[i] = if *batch_stats {
                                    k * (dy[i] - dbeta[ci] / count - x_hat[i] * dgamma[ci] / count)
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                    self.accumulate(*x, dx);
                }
                self.accumulate(*gamma, dgamma);
                self.accumulate(*beta, dbeta);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let n = labels.len();
                let scale = dy[0] / n as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dx[i * c + y] -= scale;
                }
                self.accumulate(*logits, dx);
            }
            Op::SoftmaxKl {
                p,
                q,
                probs_p,
                probs_q,
                kl_rows,
            } => {
                let c = self.shape(*p)[1];
                let n = kl_rows.len();
                let scale = dy[0] / n as f64;
                let (pd, qd) = (self.data(*p), self.data(*q));
                let mut dp = vec![0.0; n * c];
                let mut dq = vec![0.0; n * c];
                for i in 0..n {
                    let (pr, qr) = (&pd[i * c..(i + 1) * c], &qd[i * c..(i + 1) * c]);
                    let (lse_p, lse_q) = (log_sum_exp(pr), log_sum_exp(qr));
                    for j in 0..c {
                        let k = i * c + j;
                        let log_ratio = (pr[j] - lse_p) - (qr[j] - lse_q);
                        dp[k] = scale * probs_p[k] * (log_ratio - kl_rows[i]);
                        dq[k] = scale * (probs_q[k] - probs_p[k]);
                    }
                }
                self.accumulate(*p, dp);
                self.accumulate(*q, dq);
            }
            Op::Bce { p, target } => {
                let n = target.len() as f64;
                let dx = self
                    .data(*p)
                    .iter()
                    .zip(target)
                    .map(|(&pi, &t)| {
                        let pc = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        dy[0] * (-(t / pc) + (1.0 - t) / (1.0 - pc)) / n
                    })
                    .collect();
                self.accumulate(*p, dx);
            }
            Op::Margin { logits, active } => {
                let c = self.shape(*logits)[1];
                let scale = dy[0] / active.len() as f64;
                let mut dx = vec![0.0; active.len() * c];
                for (i, a) in active.iter().enumerate() {
                    if let Some((y, j)) = *a {
                        dx[i * c + y] += scale;
                        dx[i * c + j] -= scale;
                    }
                }
                self.accumulate(*logits, dx);
            }
            &Op::Mean(x) => {
                let len = self.value(x).len();
                self.accumulate(x, vec![dy[0] / len as f64; len]);
            }
        }
    }
}

/// Logistic function in the branch form that never exponentiates a positive number.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn log_softmax_at(row: &[f64], j: usize) -> f64 {
    row[j] - log_sum_exp(row)
}

/// Row-wise softmax of a flat `rows x cols` buffer.
pub fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

#[cfg(test)]
mod tests;
