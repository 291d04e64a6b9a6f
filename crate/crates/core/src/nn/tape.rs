//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes whose inputs
//! do not require gradients are constants and are skipped on the way back,
//! so frozen parameters cost nothing in the backward sweep.

use std::sync::Arc;

use super::conv::{col2im, gemm, im2col, ConvGeometry};
use super::resample::ResampleMap;
use super::tensor::Tensor;
use crate::losses::{self, SilogConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv { x: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry, cols: Option<Vec<f64>> },
    /// Per-channel mean and biased variance over all pixels of all inputs.
    NormStats { inputs: Vec<Var> },
    NormApply { x: Var, stats: Var, gamma: Var, beta: Var, eps: f64 },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Concat { a: Var, b: Var },
    Slice { x: Var, start: usize },
    Modulate { x: Var, dgamma: Var, beta: Var },
    Softplus { x: Var },
    Resample { x: Var, map: Arc<ResampleMap> },
    Scale { x: Var, factor: f64 },
    Sum { xs: Vec<Var> },
    Bce { logits: Var, target: Arc<Vec<f64>>, valid: Option<Arc<Vec<bool>>> },
    Silog { pred: Var, reference: Var, valid: Arc<Vec<bool>>, cfg: SilogConfig },
    Entropy { logits: Var },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Convolution with weight shaped `[cout, cin, k*k]` and bias `[cout, 1, 1]`.
    pub fn conv(&mut self, x: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Var {
        let xv = self.value(x);
        let cin = xv.channels();
        debug_assert_eq!((xv.height(), xv.width()), (geom.in_h, geom.in_w));
        let wv = self.value(weight);
        let cout = wv.channels();
        let kk = cin * geom.kernel * geom.kernel;
        assert_eq!(wv.len(), cout * kk, "conv weight does not match input channels");
        let p = geom.out_len();
        let cols = if geom.is_pointwise() { None } else { Some(im2col(xv.data(), cin, &geom)) };
        let mut out = vec![0.0; cout * p];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (o, chunk) in out.chunks_mut(p).enumerate() {
                chunk.fill(bv[o]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        let src = cols.as_deref().unwrap_or_else(|| xv.data());
        gemm(cout, kk, p, wv.data(), false, src, false, beta, &mut out);
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        // The unfolded input is only needed to form the weight gradient.
        let cols = if self.rg(weight) { cols } else { None };
        self.push(
            Tensor::from_vec(cout, geom.out_h, geom.out_w, out),
            rg,
            Op::Conv { x, weight, bias, geom, cols },
        )
    }

    pub fn norm_stats(&mut self, inputs: &[Var]) -> Var {
        let c = self.value(inputs[0]).channels();
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for &v in inputs {
            let t = self.value(v);
            assert_eq!(t.channels(), c);
            count += t.plane_len();
            for (ch, s) in sum.iter_mut().enumerate() {
                *s += t.plane(ch).iter().sum::<f64>();
            }
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut var = vec![0.0; c];
        for &v in inputs {
            let t = self.value(v);
            for (ch, acc) in var.iter_mut().enumerate() {
                let m = mean[ch];
                *acc += t.plane(ch).iter().map(|x| (x - m) * (x - m)).sum::<f64>();
            }
        }
        let mut data = mean;
        data.extend(var.iter().map(|s| s / n));
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(Tensor::vector(data), rg, Op::NormStats { inputs: inputs.to_vec() })
    }

    /// `gamma * (x - mean) / sqrt(var + eps) + beta` with `stats = [mean; var]`.
    pub fn norm_apply(&mut self, x: Var, stats: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.channels();
        let n = xv.plane_len();
        let s = self.value(stats).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        for ch in 0..c {
            let inv = 1.0 / (s[c + ch] + eps).sqrt();
            let (m, scale, shift) = (s[ch], g[ch] * inv, b[ch]);
            for (o, xi) in out[ch * n..(ch + 1) * n].iter_mut().zip(xv.plane(ch)) {
                *o = (xi - m) * scale + shift;
            }
        }
        let rg = self.rg(x) || self.rg(stats) || self.rg(gamma) || self.rg(beta);
        let shape = xv.shape();
        self.push(Tensor::from_vec(shape[0], shape[1], shape[2], out), rg, Op::NormApply { x, stats, gamma, beta, eps })
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let [c, h, w] = xv.shape();
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(c, h, w, data), rg, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    /// `ln(1 + exp(x)) + eps`, numerically stable.
    pub fn softplus(&mut self, x: Var, eps: f64) -> Var {
        self.map_unary(x, move |v| softplus(v) + eps, Op::Softplus { x })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map_unary(x, move |v| v * factor, Op::Scale { x, factor })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let [c, h, w] = av.shape();
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(c, h, w, data), rg, Op::Add { a, b })
    }

    /// Sum of equally shaped tensors.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let mut acc = self.value(xs[0]).clone();
        for &v in &xs[1..] {
            acc.add_assign(self.value(v));
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(acc, rg, Op::Sum { xs: xs.to_vec() })
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.height(), av.width()), (bv.height(), bv.width()), "concat: spatial mismatch");
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let t = Tensor::from_vec(av.channels() + bv.channels(), av.height(), av.width(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, rg, Op::Concat { a, b })
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let n = xv.plane_len();
        let data = xv.data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::from_vec(len, xv.height(), xv.width(), data);
        let rg = self.rg(x);
        self.push(t, rg, Op::Slice { x, start })
    }

    /// `(1 + dgamma) * x + beta`, elementwise.
    pub fn modulate(&mut self, x: Var, dgamma: Var, beta: Var) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(dgamma), self.value(beta));
        assert!(xv.shape() == gv.shape() && xv.shape() == bv.shape(), "modulate: shape mismatch");
        let [c, h, w] = xv.shape();
        let data = xv
            .data()
            .iter()
            .zip(gv.data())
            .zip(bv.data())
            .map(|((x, g), b)| (1.0 + g) * x + b)
            .collect();
        let rg = self.rg(x) || self.rg(dgamma) || self.rg(beta);
        self.push(Tensor::from_vec(c, h, w, data), rg, Op::Modulate { x, dgamma, beta })
    }

    pub fn resample(&mut self, x: Var, map: Arc<ResampleMap>) -> Var {
        let xv = self.value(x);
        assert_eq!((xv.height(), xv.width()), map.in_shape(), "resample: input shape mismatch");
        let c = xv.channels();
        let data = map.apply(xv.data(), c);
        let (oh, ow) = map.out_shape();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(c, oh, ow, data), rg, Op::Resample { x, map })
    }

    /// Mean binary cross-entropy of single-channel logits over `valid` pixels.
    pub fn bce(&mut self, logits: Var, target: Arc<Vec<f64>>, valid: Option<Arc<Vec<bool>>>) -> Var {
        let z = self.value(logits).data();
        let value = losses::bce_from_logits(z, &target, valid.as_deref().map(|v| v.as_slice()))
            .expect("bce on empty support");
        let rg = self.rg(logits);
        self.push(Tensor::scalar(value), rg, Op::Bce { logits, target, valid })
    }

    /// Scale-invariant log loss of `pred` against `reference` on `valid`.
    pub fn silog(&mut self, pred: Var, reference: Var, valid: Arc<Vec<bool>>, cfg: SilogConfig) -> Var {
        let (p, r) = (self.value(pred).data(), self.value(reference).data());
        let value = losses::silog_terms(p, r, &valid, &cfg).expect("silog on invalid support").loss;
        let rg = self.rg(pred) || self.rg(reference);
        self.push(Tensor::scalar(value), rg, Op::Silog { pred, reference, valid, cfg })
    }

    /// Mean binary entropy of `sigmoid(logits)`.
    pub fn entropy(&mut self, logits: Var) -> Var {
        let z = self.value(logits).data();
        let value = losses::mean_binary_entropy(z);
        let rg = self.rg(logits);
        self.push(Tensor::scalar(value), rg, Op::Entropy { logits })
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::filled(1, 1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, build: impl FnOnce(&mut Tensor)) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros_like(&self.nodes[v.0].value));
        }
        build(slot.as_mut().unwrap());
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, weight, bias, geom, cols } => {
                let xv = self.value(*x);
                let wv = self.value(*weight);
                let cin = xv.channels();
                let cout = wv.channels();
                let kk = cin * geom.kernel * geom.kernel;
                let p = geom.out_len();
                if let Some(b) = bias {
                    self.accumulate(grads, *b, |gb| {
                        for (o, d) in gb.data_mut().iter_mut().enumerate() {
                            *d += g.data()[o * p..(o + 1) * p].iter().sum::<f64>();
                        }
                    });
                }
                if self.rg(*weight) {
                    let src = cols.as_deref().unwrap_or_else(|| xv.data());
                    self.accumulate(grads, *weight, |gw| {
                        gemm(cout, p, kk, g.data(), false, src, true, 1.0, gw.data_mut());
                    });
                }
                if self.rg(*x) {
                    self.accumulate(grads, *x, |gx| {
                        if geom.is_pointwise() {
                            gemm(kk, cout, p, wv.data(), true, g.data(), false, 1.0, gx.data_mut());
                        } else {
                            let mut dcols = vec![0.0; kk * p];
                            gemm(kk, cout, p, wv.data(), true, g.data(), false, 0.0, &mut dcols);
                            col2im(&dcols, cin, geom, gx.data_mut());
                        }
                    });
                }
            }
            Op::NormStats { inputs } => {
                let s = node.value.data();
                let c = s.len() / 2;
                let n: usize = inputs.iter().map(|&v| self.value(v).plane_len()).sum();
                let n = n as f64;
                for &v in inputs {
                    let xv = self.value(v);
                    self.accumulate(grads, v, |gx| {
                        let plane = xv.plane_len();
                        for ch in 0..c {
                            let dm = g.data()[ch] / n;
                            let dv = 2.0 * g.data()[c + ch] / n;
                            let m = s[ch];
                            for (d, x) in gx.data_mut()[ch * plane..(ch + 1) * plane].iter_mut().zip(xv.plane(ch)) {
                                *d += dm + dv * (x - m);
                            }
                        }
                    });
                }
            }
            Op::NormApply { x, stats, gamma, beta, eps } => {
                let xv = self.value(*x);
                let s = self.value(*stats).data();
                let gam = self.value(*gamma).data();
                let c = xv.channels();
                let n = xv.plane_len();
                let gd = g.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dmean = vec![0.0; c];
                let mut dvar = vec![0.0; c];
                for ch in 0..c {
                    let inv = 1.0 / (s[c + ch] + eps).sqrt();
                    let m = s[ch];
                    let (mut sg, mut sgx) = (0.0, 0.0);
                    for (dy, xi) in gd[ch * n..(ch + 1) * n].iter().zip(xv.plane(ch)) {
                        sg += dy;
                        sgx += dy * (xi - m);
                    }
                    dbeta[ch] = sg;
                    dgamma[ch] = sgx * inv;
                    dmean[ch] = -gam[ch] * inv * sg;
                    dvar[ch] = -0.5 * gam[ch] * sgx * inv * inv * inv;
                }
                self.accumulate(grads, *x, |gx| {
                    for ch in 0..c {
                        let k = gam[ch] / (s[c + ch] + eps).sqrt();
                        for (d, dy) in gx.data_mut()[ch * n..(ch + 1) * n].iter_mut().zip(&gd[ch * n..(ch + 1) * n]) {
                            *d += dy * k;
                        }
                    }
                });
                self.accumulate(grads, *stats, |gs| {
                    for ch in 0..c {
                        gs.data_mut()[ch] += dmean[ch];
                        gs.data_mut()[c + ch] += dvar[ch];
                    }
                });
                self.accumulate(grads, *gamma, |gg| add_slice(gg.data_mut(), &dgamma));
                self.accumulate(grads, *beta, |gb| add_slice(gb.data_mut(), &dbeta));
            }
            Op::Relu { x } => {
                let out = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((d, dy), y) in gx.data_mut().iter_mut().zip(g.data()).zip(out) {
                        if *y > 0.0 {
                            *d += dy;
                        }
                    }
                });
            }
            Op::Softplus { x } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((d, dy), xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        *d += dy * sigmoid(*xi);
                    }
                });
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, |gx| {
                    for (d, dy) in gx.data_mut().iter_mut().zip(g.data()) {
                        *d += dy * factor;
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| ga.add_assign(g));
                self.accumulate(grads, *b, |gb| gb.add_assign(g));
            }
            Op::Sum { xs } => {
                for &v in xs {
                    self.accumulate(grads, v, |gv| gv.add_assign(g));
                }
            }
            Op::Concat { a, b } => {
                let split = self.value(*a).len();
                self.accumulate(grads, *a, |ga| add_slice(ga.data_mut(), &g.data()[..split]));
                self.accumulate(grads, *b, |gb| add_slice(gb.data_mut(), &g.data()[split..]));
            }
            Op::Slice { x, start } => {
                let n = g.plane_len();
                let off = start * n;
                self.accumulate(grads, *x, |gx| add_slice(&mut gx.data_mut()[off..off + g.len()], g.data()));
            }
            Op::Modulate { x, dgamma, beta } => {
                let xv = self.value(*x).data();
                let gv = self.value(*dgamma).data();
                self.accumulate(grads, *x, |gx| {
                    for ((d, dy), gm) in gx.data_mut().iter_mut().zip(g.data()).zip(gv) {
                        *d += dy * (1.0 + gm);
                    }
                });
                self.accumulate(grads, *dgamma, |gg| {
                    for ((d, dy), xi) in gg.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        *d += dy * xi;
                    }
                });
                self.accumulate(grads, *beta, |gb| gb.add_assign(g));
            }
            Op::Resample { x, map } => {
                let c = g.channels();
                self.accumulate(grads, *x, |gx| map.apply_adjoint(g.data(), c, gx.data_mut()));
            }
            Op::Bce { logits, target, valid } => {
                let scale = g.item();
                let z = self.value(*logits).data();
                let d = losses::bce_grad(z, target, valid.as_deref().map(|v| v.as_slice()));
                self.accumulate(grads, *logits, |gz| {
                    for (a, b) in gz.data_mut().iter_mut().zip(&d) {
                        *a += scale * b;
                    }
                });
            }
            Op::Silog { pred, reference, valid, cfg } => {
                let scale = g.item();
                let (p, r) = (self.value(*pred).data(), self.value(*reference).data());
                let (dp, dr) = losses::silog_grads(p, r, valid, cfg);
                self.accumulate(grads, *pred, |gp| {
                    for (a, b) in gp.data_mut().iter_mut().zip(&dp) {
                        *a += scale * b;
                    }
                });
                self.accumulate(grads, *reference, |gr| {
                    for (a, b) in gr.data_mut().iter_mut().zip(&dr) {
                        *a += scale * b;
                    }
                });
            }
            Op::Entropy { logits } => {
                let scale = g.item();
                let z = self.value(*logits).data();
                let n = z.len() as f64;
                self.accumulate(grads, *logits, |gz| {
                    for (d, zi) in gz.data_mut().iter_mut().zip(z) {
                        let s = sigmoid(*zi);
                        *d += scale * (-zi * s * (1.0 - s)) / n;
                    }
                });
            }
        }
    }
}

fn add_slice(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}
