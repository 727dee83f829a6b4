//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each primitive appends a node
//! holding its output value and whatever it needs for the backward rule;
//! [`Tape::backward`] walks the nodes in reverse once and leaves gradients on
//! every node that requires them. Parameters enter the tape through
//! [`Tape::param`], which remembers their store name so that
//! [`crate::ParamStore::accumulate_grads`] can pull the gradients back out.

mod kernels;

use std::collections::{BTreeSet, HashMap};

pub use kernels::{ConvGeom, PoolMode};
use kernels::Dims5;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Conv3d {
        x: Var,
        weight: Var,
        kernel: usize,
        geom: ConvGeom,
    },
    Normalize3d {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Pool3d {
        x: Var,
        kernel: usize,
        mode: PoolMode,
        argmax: Vec<u32>,
    },
    ConcatChannels(Vec<Var>),
    GlobalAvgPool(Var),
    Softmax(Var),
    WeightedSum {
        weights: Var,
        terms: Vec<(usize, Var)>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    frozen: Vec<String>,
    frozen_names: BTreeSet<String>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn rank5(op: &'static str, s: &[usize]) -> Result<Dims5> {
    if s.len() != 5 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("{op} expects [B, C, D, H, W]"),
        });
    }
    Ok(Dims5::from_shape(s))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters whose name starts with `prefix` enter this tape as
    /// constants: no gradient is computed for them.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    /// Every parameter of `store` enters this tape as a constant.
    pub fn freeze_store(&mut self, store: &ParamStore) {
        self.frozen_names.extend(store.names().map(str::to_string));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient; used for inputs under test.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a named parameter. Repeated requests for the same name return
    /// the same leaf, so shared parameters accumulate their gradient once.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let trainable = t.requires_grad()
            && !self.frozen_names.contains(name)
            && !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(
            Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()),
            Op::Leaf,
            trainable,
        );
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    /// Like [`Tape::param`], additionally checking the stored shape.
    pub fn param_shaped(&mut self, store: &ParamStore, name: &str, shape: &[usize]) -> Result<Var> {
        let v = self.param(store, name)?;
        let found = self.shape(v);
        if found != shape {
            return Err(Error::ParameterShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: found.to_vec(),
            });
        }
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), *v))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok((
            Tensor::from_parts(ta.shape().to_vec(), data),
            self.rg(a) || self.rg(b),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect());
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|x| x.max(0.0)).collect());
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `y[b, o] = sum_i x[b, i] * weight[o, i] + bias[o]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(mismatch("linear", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(mismatch("linear bias", ws, bs));
        }
        let (batch, fin, fout) = (xs[0], xs[1], ws[0]);
        let (xd, wd, bd) = (self.value(x).data(), self.value(weight).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(batch * fout);
        for b in 0..batch {
            let row = &xd[b * fin..(b + 1) * fin];
            for o in 0..fout {
                let wrow = &wd[o * fin..(o + 1) * fin];
                out.push(row.iter().zip(wrow).map(|(p, q)| p * q).sum::<f64>() + bd[o]);
            }
        }
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(vec![batch, fout], out),
            Op::Linear { x, weight, bias },
            rg,
        ))
    }

    /// Bias-free 3D convolution. `weight` has shape
    /// `[C_out, C_in / groups, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, weight: Var, geom: ConvGeom) -> Result<Var> {
        let xd = rank5("conv3d", self.shape(x))?;
        let ws = self.shape(weight).to_vec();
        let bad = || mismatch("conv3d", &[xd.b, xd.c, xd.d, xd.h, xd.w], &ws);
        if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(bad());
        }
        if geom.groups == 0 || xd.c % geom.groups != 0 || !ws[0].is_multiple_of(geom.groups) || ws[1] * geom.groups != xd.c {
            return Err(bad());
        }
        let k = ws[2];
        let od = Dims5 {
            b: xd.b,
            c: ws[0],
            d: geom.out_len(xd.d, k).ok_or_else(bad)?,
            h: geom.out_len(xd.h, k).ok_or_else(bad)?,
            w: geom.out_len(xd.w, k).ok_or_else(bad)?,
        };
        let out = kernels::conv3d_forward(self.value(x).data(), xd, self.value(weight).data(), k, od, geom);
        let rg = self.rg(x) || self.rg(weight);
        Ok(self.push(
            Tensor::from_parts(vec![od.b, od.c, od.d, od.h, od.w], out),
            Op::Conv3d { x, weight, kernel: k, geom },
            rg,
        ))
    }

    /// Per-channel normalization with statistics over the batch and all
    /// spatial positions of the current pass.
    pub fn normalize3d(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xd = rank5("normalize3d", self.shape(x))?;
        if self.shape(gamma) != [xd.c] || self.shape(beta) != [xd.c] {
            return Err(mismatch("normalize3d", self.shape(x), self.shape(gamma)));
        }
        let s = xd.spatial();
        let n = (xd.b * s) as f64;
        let data = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        let mut inv_std = Vec::with_capacity(xd.c);
        for c in 0..xd.c {
            let planes = (0..xd.b).map(|b| (b * xd.c + c) * s);
            let mean = planes.clone().map(|p| data[p..p + s].iter().sum::<f64>()).sum::<f64>() / n;
            let var = planes
                .clone()
                .map(|p| data[p..p + s].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                .sum::<f64>()
                / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for p in planes {
                for i in p..p + s {
                    let h = (data[i] - mean) * is;
                    xhat[i] = h;
                    out[i] = g[c] * h + bt[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(self.shape(x).to_vec(), out),
            Op::Normalize3d {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Stride-1, shape-preserving pooling with an odd window.
    pub fn pool3d(&mut self, x: Var, kernel: usize, mode: PoolMode) -> Result<Var> {
        let xd = rank5("pool3d", self.shape(x))?;
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidShape {
                shape: vec![kernel],
                reason: "pooling window must be odd".into(),
            });
        }
        let (out, argmax) = kernels::pool3d_forward(self.value(x).data(), xd, kernel, mode);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(self.shape(x).to_vec(), out),
            Op::Pool3d {
                x,
                kernel,
                mode,
                argmax,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "concat of zero tensors".into(),
        })?;
        let fd = rank5("concat_channels", self.shape(first))?;
        let mut channels = 0;
        for &p in parts {
            let pd = rank5("concat_channels", self.shape(p))?;
            if (pd.b, pd.d, pd.h, pd.w) != (fd.b, fd.d, fd.h, fd.w) {
                return Err(mismatch("concat_channels", self.shape(first), self.shape(p)));
            }
            channels += pd.c;
        }
        let s = fd.spatial();
        let mut out = Vec::with_capacity(fd.b * channels * s);
        for b in 0..fd.b {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * s..(b + 1) * c * s]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![fd.b, channels, fd.d, fd.h, fd.w], out),
            Op::ConcatChannels(parts.to_vec()),
            rg,
        ))
    }

    /// `[B, C, D, H, W] -> [B, C]` by averaging over space.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xd = rank5("global_avg_pool", self.shape(x))?;
        let s = xd.spatial();
        let out = self
            .value(x)
            .data()
            .chunks(s)
            .map(|p| p.iter().sum::<f64>() / s as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![xd.b, xd.c], out), Op::GlobalAvgPool(x), rg))
    }

    /// Softmax over all elements of a vector, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let w = softmax(t.data());
        let rg = self.rg(x);
        self.push(Tensor::from_parts(t.shape().to_vec(), w), Op::Softmax(x), rg)
    }

    /// `sum_k weights[idx_k] * term_k` over same-shaped terms.
    pub fn weighted_sum(&mut self, weights: Var, terms: &[(usize, Var)]) -> Result<Var> {
        let (_, first) = *terms.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "weighted sum of zero terms".into(),
        })?;
        let shape = self.shape(first).to_vec();
        let wv = self.value(weights).data();
        let mut out = vec![0.0; numel(&shape)];
        for &(k, t) in terms {
            if k >= wv.len() {
                return Err(mismatch("weighted_sum", self.shape(weights), &[k]));
            }
            let tv = self.value(t);
            if tv.shape() != shape.as_slice() {
                return Err(mismatch("weighted_sum", &shape, tv.shape()));
            }
            let w = wv[k];
            out.iter_mut().zip(tv.data()).for_each(|(o, x)| *o += w * x);
        }
        let rg = self.rg(weights) || terms.iter().any(|&(_, t)| self.rg(t));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::WeightedSum {
                weights,
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch("softmax_cross_entropy", s, &[labels.len()]));
        }
        let (batch, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let data = self.value(logits).data();
        let mut probs = Vec::with_capacity(batch * k);
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &data[b * k..(b + 1) * k];
            let top = (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            let m = row[top];
            // log-sum-exp split as m + ln(1 + rest) keeps precision when one
            // logit dominates
            let rest: f64 = (0..k).filter(|&j| j != top).map(|j| (row[j] - m).exp()).sum();
            let log_z = rest.ln_1p();
            loss += (m - row[label]) + log_z;
            probs.extend(row.iter().map(|v| (v - m - log_z).exp()));
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("softmax_cross_entropy"));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagates gradients from a scalar `loss` to every node that requires
    /// them. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Computes the contribution of node `i` to each of its inputs. Every
    /// contribution is built in its own buffer and then added to the input's
    /// gradient in one pass, so gradients from separate consumers combine
    /// with a single addition per element.
    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let want = |v: Var| nodes[v.0].requires_grad;
        let zeros = |v: Var| vec![0.0; nodes[v.0].value.numel()];
        let mut put = |v: Var, contrib: Vec<f64>| deposit(grads, v, contrib);
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        put(v, g.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    put(*a, g.to_vec());
                }
                if want(*b) {
                    put(*b, g.iter().map(|g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if want(a) {
                    put(a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                }
                if want(b) {
                    put(b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, s) => {
                if want(*a) {
                    put(*a, g.iter().map(|g| g * s).collect());
                }
            }
            Op::Relu(a) => {
                if want(*a) {
                    let x = val(*a);
                    put(*a, g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect());
                }
            }
            Op::Sum(a) => {
                if want(*a) {
                    put(*a, vec![g[0]; nodes[a.0].value.numel()]);
                }
            }
            Op::Mean(a) => {
                if want(*a) {
                    let n = nodes[a.0].value.numel();
                    put(*a, vec![g[0] / n as f64; n]);
                }
            }
            Op::Linear { x, weight, bias } => {
                let (x, weight, bias) = (*x, *weight, *bias);
                let xs = nodes[x.0].value.shape();
                let (batch, fin) = (xs[0], xs[1]);
                let fout = nodes[weight.0].value.shape()[0];
                if want(x) {
                    let wd = val(weight);
                    let mut gx = zeros(x);
                    for b in 0..batch {
                        for o in 0..fout {
                            let go = g[b * fout + o];
                            for i in 0..fin {
                                gx[b * fin + i] += go * wd[o * fin + i];
                            }
                        }
                    }
                    put(x, gx);
                }
                if want(weight) {
                    let xd = val(x);
                    let mut gw = zeros(weight);
                    for b in 0..batch {
                        for o in 0..fout {
                            let go = g[b * fout + o];
                            for i in 0..fin {
                                gw[o * fin + i] += go * xd[b * fin + i];
                            }
                        }
                    }
                    put(weight, gw);
                }
                if want(bias) {
                    let mut gb = zeros(bias);
                    for b in 0..batch {
                        for o in 0..fout {
                            gb[o] += g[b * fout + o];
                        }
                    }
                    put(bias, gb);
                }
            }
            Op::Conv3d {
                x,
                weight,
                kernel,
                geom,
            } => {
                let (x, weight) = (*x, *weight);
                let xd = Dims5::from_shape(nodes[x.0].value.shape());
                let od = Dims5::from_shape(nodes[i].value.shape());
                let mut gx = want(x).then(|| zeros(x));
                let mut gw = want(weight).then(|| zeros(weight));
                kernels::conv3d_backward(
                    val(x),
                    xd,
                    val(weight),
                    *kernel,
                    od,
                    *geom,
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                if let Some(buf) = gx {
                    put(x, buf);
                }
                if let Some(buf) = gw {
                    put(weight, buf);
                }
            }
            Op::Normalize3d {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xd = Dims5::from_shape(nodes[x.0].value.shape());
                let s = xd.spatial();
                let n = (xd.b * s) as f64;
                let gm = val(gamma);
                let mut sum_g = vec![0.0; xd.c];
                let mut sum_gx = vec![0.0; xd.c];
                for b in 0..xd.b {
                    for c in 0..xd.c {
                        let p = (b * xd.c + c) * s;
                        for j in p..p + s {
                            sum_g[c] += g[j];
                            sum_gx[c] += g[j] * xhat[j];
                        }
                    }
                }
                if want(x) {
                    let mut gx = zeros(x);
                    for b in 0..xd.b {
                        for c in 0..xd.c {
                            let p = (b * xd.c + c) * s;
                            let k = gm[c] * inv_std[c] / n;
                            let (mg, mgx) = (sum_g[c], sum_gx[c]);
                            for j in p..p + s {
                                gx[j] = k * (n * g[j] - mg - xhat[j] * mgx);
                            }
                        }
                    }
                    put(x, gx);
                }
                if want(gamma) {
                    put(gamma, sum_gx);
                }
                if want(beta) {
                    put(beta, sum_g);
                }
            }
            Op::Pool3d {
                x,
                kernel,
                mode,
                argmax,
            } => {
                if want(*x) {
                    let xd = Dims5::from_shape(nodes[x.0].value.shape());
                    let mut gx = zeros(*x);
                    kernels::pool3d_backward(xd, *kernel, *mode, argmax, g, &mut gx);
                    put(*x, gx);
                }
            }
            Op::ConcatChannels(parts) => {
                let od = Dims5::from_shape(nodes[i].value.shape());
                let s = od.spatial();
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p.0].value.shape()[1];
                    if want(p) {
                        let mut gp = Vec::with_capacity(od.b * c * s);
                        for b in 0..od.b {
                            let src = (b * od.c + offset) * s;
                            gp.extend_from_slice(&g[src..src + c * s]);
                        }
                        put(p, gp);
                    }
                    offset += c;
                }
            }
            Op::GlobalAvgPool(x) => {
                if want(*x) {
                    let s = Dims5::from_shape(nodes[x.0].value.shape()).spatial();
                    let gx = g
                        .iter()
                        .flat_map(|go| std::iter::repeat_n(go / s as f64, s))
                        .collect();
                    put(*x, gx);
                }
            }
            Op::Softmax(x) => {
                if want(*x) {
                    let w = nodes[i].value.data();
                    let dot: f64 = g.iter().zip(w).map(|(g, w)| g * w).sum();
                    put(*x, g.iter().zip(w).map(|(g, w)| w * (g - dot)).collect());
                }
            }
            Op::WeightedSum { weights, terms } => {
                let wv = val(*weights);
                if want(*weights) {
                    let mut gw = zeros(*weights);
                    for &(k, t) in terms {
                        gw[k] += val(t).iter().zip(g).map(|(x, g)| x * g).sum::<f64>();
                    }
                    put(*weights, gw);
                }
                for &(k, t) in terms {
                    if want(t) {
                        let w = wv[k];
                        put(t, g.iter().map(|g| w * g).collect());
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if want(*logits) {
                    let batch = labels.len();
                    let k = probs.len() / batch;
                    let scale = g[0] / batch as f64;
                    let mut gl = zeros(*logits);
                    for (b, &label) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            gl[b * k + c] = scale * (probs[b * k + c] - onehot);
                        }
                    }
                    put(*logits, gl);
                }
            }
        }
    }
}

fn deposit(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contrib),
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
