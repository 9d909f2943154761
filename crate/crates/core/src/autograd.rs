//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation eagerly. Leaves created with
//! [`Tape::param`] require gradients; leaves created with [`Tape::constant`]
//! do not, and no gradient is ever accumulated into them. Calling
//! [`Tape::backward`] on a scalar node returns the gradient of every node.

use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { input: Var, weight: Var, pad: usize },
    ConvTranspose { input: Var, weight: Var, pad: usize },
    AddChannelBias { input: Var, bias: Var },
    AvgPool { input: Var },
    AvgUnpool { input: Var },
    MaxPool { input: Var, argmax: Vec<usize> },
    Upsample { input: Var, factor: usize },
    Relu { input: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale { input: Var, factor: f64 },
    AddScalar { input: Var },
    Stabilize { input: Var, eps: f64 },
    Sum { input: Var },
    SumSpatial { input: Var },
    Select { input: Var, indices: Vec<usize> },
    MaskedMean { input: Var, weights: Vec<f64>, total: f64 },
    SoftmaxCe {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        valid: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when nothing flowed into it.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn has(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(contract(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub(crate) fn stabilize_value(x: f64, eps: f64) -> f64 {
    if x.abs() > eps {
        x
    } else if x >= 0.0 {
        eps
    } else {
        -eps
    }
}

/// Stride-1 correlation: `out[o,y,x] = Σ w[o,c,ky,kx] · in[c, y+ky-pad, x+kx-pad]`.
fn conv_forward(
    input: &[f64],
    (cin, h, w): (usize, usize, usize),
    weight: &[f64],
    (cout, k): (usize, usize),
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        let out_o = &mut out[o * ho * wo..(o + 1) * ho * wo];
        for c in 0..cin {
            let in_c = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, pad, h, ho);
                for kx in 0..k {
                    let wv = weight[((o * cin + c) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(kx, pad, w, wo);
                    for y in y0..y1 {
                        let iy = y + ky - pad;
                        let row_in = &in_c[iy * w..];
                        let row_out = &mut out_o[y * wo..(y + 1) * wo];
                        for x in x0..x1 {
                            row_out[x] += wv * row_in[x + kx - pad];
                        }
                    }
                }
            }
        }
    }
    (out, ho, wo)
}

/// Adjoint of [`conv_forward`] with respect to its input.
fn conv_transpose(
    grad_out: &[f64],
    (cout, ho, wo): (usize, usize, usize),
    weight: &[f64],
    (cin, k): (usize, usize),
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let h = ho + k - 1 - 2 * pad;
    let w = wo + k - 1 - 2 * pad;
    let mut out = vec![0.0; cin * h * w];
    for o in 0..cout {
        let g_o = &grad_out[o * ho * wo..(o + 1) * ho * wo];
        for c in 0..cin {
            let out_c = &mut out[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, pad, h, ho);
                for kx in 0..k {
                    let wv = weight[((o * cin + c) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(kx, pad, w, wo);
                    for y in y0..y1 {
                        let iy = y + ky - pad;
                        let row_g = &g_o[y * wo..(y + 1) * wo];
                        let row_out = &mut out_c[iy * w..(iy + 1) * w];
                        for x in x0..x1 {
                            row_out[x + kx - pad] += wv * row_g[x];
                        }
                    }
                }
            }
        }
    }
    (out, h, w)
}

/// `gw[o,c,ky,kx] = Σ_{y,x} a[o,y,x] · b[c, y+ky-pad, x+kx-pad]`.
fn conv_weight_grad(
    a: &[f64],
    (cout, ho, wo): (usize, usize, usize),
    b: &[f64],
    (cin, h, w): (usize, usize, usize),
    k: usize,
    pad: usize,
) -> Vec<f64> {
    let mut gw = vec![0.0; cout * cin * k * k];
    for o in 0..cout {
        let a_o = &a[o * ho * wo..(o + 1) * ho * wo];
        for c in 0..cin {
            let b_c = &b[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, pad, h, ho);
                for kx in 0..k {
                    let (x0, x1) = valid_range(kx, pad, w, wo);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y + ky - pad;
                        let row_a = &a_o[y * wo..(y + 1) * wo];
                        let row_b = &b_c[iy * w..];
                        for x in x0..x1 {
                            acc += row_a[x] * row_b[x + kx - pad];
                        }
                    }
                    gw[((o * cin + c) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    gw
}

/// Output positions `y` for which `y + offset - pad` lies inside `0..extent`.
fn valid_range(offset: usize, pad: usize, extent: usize, out_extent: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(offset);
    let hi = (extent + pad).saturating_sub(offset).min(out_extent);
    (lo, hi.max(lo))
}

fn avg_pool(x: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let base = ch * h * w;
                let s = x[base + 2 * y * w + 2 * xx]
                    + x[base + 2 * y * w + 2 * xx + 1]
                    + x[base + (2 * y + 1) * w + 2 * xx]
                    + x[base + (2 * y + 1) * w + 2 * xx + 1];
                out[(ch * ho + y) * wo + xx] = 0.25 * s;
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool`]: every input cell receives a quarter of its pooled cell.
fn avg_unpool(x: &[f64], (c, ho, wo): (usize, usize, usize)) -> Vec<f64> {
    let (h, w) = (ho * 2, wo * 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[(ch * h + y) * w + xx] = 0.25 * x[(ch * ho + y / 2) * wo + xx / 2];
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Stride-1 2-D correlation of a C×H×W input with an O×C×k×k kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, pad: usize) -> Result<Var> {
        let (cin, h, w) = self.value(input).chw()?;
        let ws = self.value(weight).shape().to_vec();
        let [cout, wc, k, k2] = ws[..] else {
            return Err(contract(format!("conv weight must be 4-D, got {ws:?}")));
        };
        if wc != cin || k != k2 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(contract(format!(
                "conv2d: input {cin}×{h}×{w} incompatible with kernel {ws:?} (pad {pad})"
            )));
        }
        let (out, ho, wo) = conv_forward(
            self.value(input).data(),
            (cin, h, w),
            self.value(weight).data(),
            (cout, k),
            pad,
        );
        let rg = self.rg(input) || self.rg(weight);
        let t = Tensor::new(vec![cout, ho, wo], out)?;
        Ok(self.push(t, Op::Conv { input, weight, pad }, rg))
    }

    /// Adjoint of [`Tape::conv2d`] with respect to the input: maps an O×H'×W'
    /// tensor back onto the C×H×W input grid.
    pub fn conv2d_transpose(&mut self, input: Var, weight: Var, pad: usize) -> Result<Var> {
        let (cout, ho, wo) = self.value(input).chw()?;
        let ws = self.value(weight).shape().to_vec();
        let [wo_, cin, k, k2] = ws[..] else {
            return Err(contract(format!("conv weight must be 4-D, got {ws:?}")));
        };
        if wo_ != cout || k != k2 || ho + k < 1 + 2 * pad || wo + k < 1 + 2 * pad {
            return Err(contract(format!(
                "conv2d_transpose: input {cout}×{ho}×{wo} incompatible with kernel {ws:?}"
            )));
        }
        let (out, h, w) = conv_transpose(
            self.value(input).data(),
            (cout, ho, wo),
            self.value(weight).data(),
            (cin, k),
            pad,
        );
        let rg = self.rg(input) || self.rg(weight);
        let t = Tensor::new(vec![cin, h, w], out)?;
        Ok(self.push(t, Op::ConvTranspose { input, weight, pad }, rg))
    }

    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        if self.value(bias).shape() != [c] {
            return Err(contract(format!(
                "bias shape {:?} does not match {c} channels",
                self.value(bias).shape()
            )));
        }
        let mut out = self.value(input).data().to_vec();
        let b = self.value(bias).data();
        for ch in 0..c {
            for v in &mut out[ch * h * w..(ch + 1) * h * w] {
                *v += b[ch];
            }
        }
        let rg = self.rg(input) || self.rg(bias);
        let t = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(t, Op::AddChannelBias { input, bias }, rg))
    }

    /// 2×2, stride-2 average pooling.
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(contract(format!("avg_pool2 needs even extents, got {h}×{w}")));
        }
        let out = avg_pool(self.value(input).data(), (c, h, w));
        let rg = self.rg(input);
        let t = Tensor::new(vec![c, h / 2, w / 2], out)?;
        Ok(self.push(t, Op::AvgPool { input }, rg))
    }

    /// Adjoint of [`Tape::avg_pool2`].
    pub fn avg_unpool2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        let out = avg_unpool(self.value(input).data(), (c, h, w));
        let rg = self.rg(input);
        let t = Tensor::new(vec![c, h * 2, w * 2], out)?;
        Ok(self.push(t, Op::AvgUnpool { input }, rg))
    }

    /// 2×2, stride-2 max pooling; ties resolve to the first cell in row-major order.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(contract(format!("max_pool2 needs even extents, got {h}×{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = vec![0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best = usize::MAX;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = (ch * h + 2 * y + dy) * w + 2 * xx + dx;
                        if best == usize::MAX || x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    let o = (ch * ho + y) * wo + xx;
                    out[o] = x[best];
                    argmax[o] = best;
                }
            }
        }
        let rg = self.rg(input);
        let t = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(t, Op::MaxPool { input, argmax }, rg))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        if factor == 0 {
            return Err(contract("upsample factor must be positive"));
        }
        if factor == 1 {
            return Ok(input);
        }
        let (hu, wu) = (h * factor, w * factor);
        let x = self.value(input).data();
        let mut out = vec![0.0; c * hu * wu];
        for ch in 0..c {
            for y in 0..hu {
                for xx in 0..wu {
                    out[(ch * hu + y) * wu + xx] = x[(ch * h + y / factor) * w + xx / factor];
                }
            }
        }
        let rg = self.rg(input);
        let t = Tensor::new(vec![c, hu, wu], out)?;
        Ok(self.push(t, Op::Upsample { input, factor }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("relu shape");
        let rg = self.rg(input);
        self.push(t, Op::Relu { input }, rg)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("scale shape");
        let rg = self.rg(input);
        self.push(t, Op::Scale { input, factor }, rg)
    }

    pub fn add_scalar(&mut self, input: Var, c: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v + c).collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("add_scalar shape");
        let rg = self.rg(input);
        self.push(t, Op::AddScalar { input }, rg)
    }

    /// `sign(x)·max(|x|, eps)` with `sign(0) = +1`. Values above `eps` in
    /// magnitude pass unchanged.
    pub fn stabilize(&mut self, input: Var, eps: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| stabilize_value(v, eps)).collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("stabilize shape");
        let rg = self.rg(input);
        self.push(t, Op::Stabilize { input, eps }, rg)
    }

    pub fn square(&mut self, input: Var) -> Var {
        self.mul(input, input).expect("square shape")
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).len().max(1) as f64;
        let s = self.sum(input);
        self.scale(s, 1.0 / n)
    }

    /// Sums every trailing dimension, leaving one value per leading index.
    pub fn sum_spatial(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let c = x.shape()[0];
        let data = (0..c).map(|ch| x.channel(ch).iter().sum()).collect();
        let rg = self.rg(input);
        self.push(Tensor::vector(data), Op::SumSpatial { input }, rg)
    }

    /// Gathers entries of the leading dimension in the given order.
    pub fn select(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let lead = x.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= lead) {
            return Err(contract(format!("select index {bad} out of range {lead}")));
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(shape.iter().product());
        for &i in indices {
            data.extend_from_slice(x.channel(i));
        }
        let rg = self.rg(input);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::Select {
                input,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Weighted spatial mean per channel: `out[c] = Σ_p w_p x[c,p] / Σ_p w_p`.
    pub fn masked_mean(&mut self, input: Var, weights: &[f64]) -> Result<Var> {
        let x = self.value(input);
        let c = x.shape()[0];
        let plane = x.len() / c.max(1);
        if weights.len() != plane {
            return Err(contract(format!(
                "mask has {} cells, feature plane has {plane}",
                weights.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(contract("masked_mean over an empty mask"));
        }
        let data = (0..c)
            .map(|ch| {
                x.channel(ch)
                    .iter()
                    .zip(weights)
                    .map(|(v, w)| v * w)
                    .sum::<f64>()
                    / total
            })
            .collect();
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::vector(data),
            Op::MaskedMean {
                input,
                weights: weights.to_vec(),
                total,
            },
            rg,
        ))
    }

    /// Mean per-pixel softmax cross entropy over a K×H×W logit map.
    /// `targets[p]` is the row of the true class at pixel `p`, `None` to skip.
    /// Returns 0 when every pixel is skipped.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (k, h, w) = self.value(logits).chw()?;
        let plane = h * w;
        if targets.len() != plane {
            return Err(contract(format!(
                "{} targets for a {h}×{w} logit map",
                targets.len()
            )));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; k * plane];
        let mut loss = 0.0;
        let mut valid = 0;
        for (p, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= k {
                return Err(contract(format!("target row {t} out of range {k}")));
            }
            let max = (0..k).map(|c| x[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..k {
                let e = (x[c * plane + p] - max).exp();
                probs[c * plane + p] = e;
                z += e;
            }
            for c in 0..k {
                probs[c * plane + p] /= z;
            }
            loss += -(x[t * plane + p] - max - z.ln());
            valid += 1;
        }
        let value = if valid > 0 { loss / valid as f64 } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
                valid,
            },
            rg,
        ))
    }

    /// Backpropagates from a single-element node.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.rg(root) {
            grads[root.0] = Some(vec![1.0; self.value(root).len()]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, shapes }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl FnOnce() -> Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        let c = contrib();
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(c),
        }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv { input, weight, pad } => {
                let (cin, h, w) = self.value(input).chw().unwrap();
                let ws = self.value(weight).shape();
                let (cout, k) = (ws[0], ws[2]);
                let (_, ho, wo) = node.value.chw().unwrap();
                self.accumulate(grads, input, || {
                    conv_transpose(g, (cout, ho, wo), self.value(weight).data(), (cin, k), pad).0
                });
                self.accumulate(grads, weight, || {
                    conv_weight_grad(g, (cout, ho, wo), self.value(input).data(), (cin, h, w), k, pad)
                });
            }
            &Op::ConvTranspose { input, weight, pad } => {
                let (cout, ho, wo) = self.value(input).chw().unwrap();
                let ws = self.value(weight).shape();
                let (cin, k) = (ws[1], ws[2]);
                let (_, h, w) = node.value.chw().unwrap();
                self.accumulate(grads, input, || {
                    conv_forward(g, (cin, h, w), self.value(weight).data(), (cout, k), pad).0
                });
                self.accumulate(grads, weight, || {
                    conv_weight_grad(self.value(input).data(), (cout, ho, wo), g, (cin, h, w), k, pad)
                });
            }
            &Op::AddChannelBias { input, bias } => {
                self.accumulate(grads, input, || g.to_vec());
                let (c, h, w) = node.value.chw().unwrap();
                self.accumulate(grads, bias, || {
                    (0..c).map(|ch| g[ch * h * w..(ch + 1) * h * w].iter().sum()).collect()
                });
            }
            &Op::AvgPool { input } => {
                let dims = node.value.chw().unwrap();
                self.accumulate(grads, input, || avg_unpool(g, dims));
            }
            &Op::AvgUnpool { input } => {
                let dims = node.value.chw().unwrap();
                // adjoint of the quarter-spread is a quarter-weighted block sum
                self.accumulate(grads, input, || avg_pool(g, dims));
            }
            Op::MaxPool { input, argmax } => {
                let n = self.value(*input).len();
                self.accumulate(grads, *input, || {
                    let mut out = vec![0.0; n];
                    for (o, &src) in argmax.iter().enumerate() {
                        out[src] += g[o];
                    }
                    out
                });
            }
            &Op::Upsample { input, factor } => {
                let (c, h, w) = self.value(input).chw().unwrap();
                let (hu, wu) = (h * factor, w * factor);
                self.accumulate(grads, input, || {
                    let mut out = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..hu {
                            for x in 0..wu {
                                out[(ch * h + y / factor) * w + x / factor] += g[(ch * hu + y) * wu + x];
                            }
                        }
                    }
                    out
                });
            }
            &Op::Relu { input } => {
                let x = self.value(input).data();
                self.accumulate(grads, input, || {
                    g.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect()
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, || g.to_vec());
                self.accumulate(grads, b, || g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, || g.to_vec());
                self.accumulate(grads, b, || g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, || g.iter().zip(bv).map(|(x, y)| x * y).collect());
                self.accumulate(grads, b, || g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            &Op::Div(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, || g.iter().zip(bv).map(|(x, y)| x / y).collect());
                self.accumulate(grads, b, || {
                    g.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(gv, (x, y))| -gv * x / (y * y))
                        .collect()
                });
            }
            &Op::Scale { input, factor } => {
                self.accumulate(grads, input, || g.iter().map(|v| v * factor).collect());
            }
            &Op::AddScalar { input } => {
                self.accumulate(grads, input, || g.to_vec());
            }
            &Op::Stabilize { input, eps } => {
                let x = self.value(input);
                self.accumulate(grads, input, || {
                    g.iter()
                        .zip(x.data())
                        .map(|(gv, v)| if v.abs() > eps { *gv } else { 0.0 })
                        .collect()
                });
            }
            &Op::Sum { input } => {
                let n = self.value(input).len();
                self.accumulate(grads, input, || vec![g[0]; n]);
            }
            &Op::SumSpatial { input } => {
                let x = self.value(input);
                let plane = x.len() / x.shape()[0].max(1);
                self.accumulate(grads, input, || {
                    g.iter().flat_map(|&gv| std::iter::repeat_n(gv, plane)).collect()
                });
            }
            Op::Select { input, indices } => {
                let x = self.value(*input);
                let plane = x.len() / x.shape()[0].max(1);
                let n = x.len();
                self.accumulate(grads, *input, || {
                    let mut out = vec![0.0; n];
                    for (j, &i) in indices.iter().enumerate() {
                        for p in 0..plane {
                            out[i * plane + p] += g[j * plane + p];
                        }
                    }
                    out
                });
            }
            Op::MaskedMean {
                input,
                weights,
                total,
            } => {
                self.accumulate(grads, *input, || {
                    g.iter()
                        .flat_map(|&gv| weights.iter().map(move |w| gv * w / total))
                        .collect()
                });
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
                valid,
            } => {
                if *valid == 0 {
                    return;
                }
                let plane = targets.len();
                let k = probs.len() / plane;
                let scale = g[0] / *valid as f64;
                self.accumulate(grads, *logits, || {
                    let mut out = vec![0.0; k * plane];
                    for (p, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..k {
                            out[c * plane + p] = scale * probs[c * plane + p];
                        }
                        out[t * plane + p] -= scale;
                    }
                    out
                });
            }
        }
    }
}
