//! Forward graph of the two-stream network.
//!
//! Image and flow pyramids are summed level by level for the mask decoder;
//! the depth decoder reads the image pyramid only. With modulation enabled
//! every mask-decoder scale is rescaled and shifted by parameters predicted
//! from the concatenated mask and depth features of that scale.

use std::collections::HashMap;
use std::sync::Arc;

use super::state::{
    Component, ComponentSet, ConvIdx, DecoderIdx, ModelState, StageIdx, FLOW_CHANNELS, IMAGE_CHANNELS, LEVEL_STRIDES,
    STAGE_STRIDES,
};
use crate::error::{Error, Result};
use crate::nn::conv::ConvGeometry;
use crate::nn::resample::{AxisMap, AxisTap};
use crate::nn::{ResampleMap, Tape, Tensor, Var};

/// Per-level features of one input.
pub type Pyramid = [Var; 4];

#[derive(Clone, Copy, Debug)]
pub struct DepthVars {
    pub scales: Pyramid,
    pub raw: Var,
    pub depth: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct MaskVars {
    pub scales: Pyramid,
    pub logits: Var,
}

/// Which normalization layers use batch statistics in this graph.
#[derive(Clone, Copy, Debug, Default)]
pub struct NormModes {
    pub train: ComponentSet,
}

/// Running-statistic update produced by a batch-statistics normalization layer.
#[derive(Clone, Debug)]
pub struct NormUpdate {
    pub running_mean: usize,
    pub running_var: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One forward graph over a batch, bound to a model snapshot.
pub struct Graph<'a> {
    state: &'a ModelState,
    pub tape: Tape,
    params: Vec<Var>,
    norm: NormModes,
    norm_stats: Vec<(usize, usize, Var)>,
    pub(crate) norm_inputs: Vec<(String, Vec<Var>)>,
    maps: HashMap<(usize, usize, usize, usize), Arc<ResampleMap>>,
}

/// Bilinear resampling between grids whose pixel pitch differs by `factor`
/// (`factor` output pixels per input pixel).
fn scaled_axis(in_len: usize, out_len: usize, factor: f64) -> AxisMap {
    let taps = (0..out_len).map(|j| Some(AxisTap::linear((j as f64 + 0.5) / factor - 0.5, in_len))).collect();
    AxisMap { in_len, taps }
}

impl<'a> Graph<'a> {
    /// `trainable[i]` marks whether parameter `i` receives gradients.
    pub fn new(state: &'a ModelState, trainable: &[bool], norm: NormModes) -> Self {
        assert_eq!(trainable.len(), state.params.len());
        let mut tape = Tape::new();
        let params = state
            .params
            .iter()
            .zip(trainable)
            .map(|(p, &t)| {
                let v = Tensor::from_vec(p.shape[0], p.shape[1], p.shape[2], p.data.clone());
                if t {
                    tape.param(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect();
        Self { state, tape, params, norm, norm_stats: Vec::new(), norm_inputs: Vec::new(), maps: HashMap::new() }
    }

    /// Evaluation graph: no trainable parameters, stored statistics.
    pub fn eval(state: &'a ModelState) -> Self {
        Self::new(state, &vec![false; state.params.len()], NormModes::default())
    }

    pub fn param_var(&self, index: usize) -> Var {
        self.params[index]
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    fn map(&mut self, in_h: usize, in_w: usize, out_h: usize, out_w: usize, factor: usize) -> Arc<ResampleMap> {
        self.maps
            .entry((in_h, in_w, out_h, out_w))
            .or_insert_with(|| {
                let f = factor as f64;
                Arc::new(ResampleMap::new(scaled_axis(in_h, out_h, f), scaled_axis(in_w, out_w, f)))
            })
            .clone()
    }

    fn conv(&mut self, x: Var, idx: ConvIdx, geom: ConvGeometry) -> Var {
        let w = self.params[idx.weight];
        let b = idx.bias.map(|i| self.params[i]);
        self.tape.conv(x, w, b, geom)
    }

    fn pointwise(&mut self, x: Var, idx: ConvIdx) -> Var {
        let t = self.tape.value(x);
        let g = ConvGeometry::same(1, t.height(), t.width());
        self.conv(x, idx, g)
    }

    /// Encodes a batch; normalization statistics are shared across the batch
    /// when the owning component is in training mode.
    pub fn encode(&mut self, component: Component, inputs: &[Var]) -> Result<Vec<Pyramid>> {
        let (stages, channels): (&[StageIdx; 4], usize) = match component {
            Component::ImageEncoder => (&self.state.layout.image, IMAGE_CHANNELS),
            Component::FlowEncoder => (&self.state.layout.flow, FLOW_CHANNELS),
            other => return Err(Error::validation("component", format!("{other} is not an encoder"))),
        };
        let stages = *stages;
        for &x in inputs {
            let c = self.tape.value(x).channels();
            if c != channels {
                return Err(Error::Shape(format!("{component} expects {channels} channels, got {c}")));
            }
        }
        let train = self.norm.train.contains(component);
        let eps = self.state.config.norm_eps;
        let mut current: Vec<Var> = inputs.to_vec();
        let mut levels: Vec<Vec<Var>> = Vec::with_capacity(4);
        for (i, stage) in stages.iter().enumerate() {
            let convs: Vec<Var> = current
                .iter()
                .map(|&x| {
                    let t = self.tape.value(x);
                    let g = ConvGeometry::patchify(STAGE_STRIDES[i], t.height(), t.width());
                    self.conv(x, stage.conv, g)
                })
                .collect();
            let normed = match stage.norm {
                Some(n) => {
                    let name = format!("{}.stage{}.norm", component.name(), i + 1);
                    self.norm_inputs.push((name, convs.clone()));
                    let stats = if train {
                        let s = self.tape.norm_stats(&convs);
                        self.norm_stats.push((n.running_mean, n.running_var, s));
                        s
                    } else {
                        let mut data = self.state.buffers[n.running_mean].data.clone();
                        data.extend_from_slice(&self.state.buffers[n.running_var].data);
                        self.tape.constant(Tensor::vector(data))
                    };
                    let (g, b) = (self.params[n.scale], self.params[n.shift]);
                    convs.iter().map(|&x| self.tape.norm_apply(x, stats, g, b, eps)).collect()
                }
                None => convs,
            };
            current = normed.into_iter().map(|x| self.tape.relu(x)).collect();
            levels.push(current.clone());
        }
        Ok((0..inputs.len()).map(|n| std::array::from_fn(|l| levels[l][n])).collect())
    }

    fn project(&mut self, dec: &DecoderIdx, feats: &Pyramid) -> Pyramid {
        std::array::from_fn(|i| self.pointwise(feats[i], dec.proj[i]))
    }

    /// Upsample every scale to the stride-4 grid, sum, and predict one channel
    /// at the input resolution.
    fn fuse_and_predict(&mut self, dec: &DecoderIdx, scales: &Pyramid, out_h: usize, out_w: usize) -> Var {
        let base = self.tape.value(scales[0]);
        let (bh, bw) = (base.height(), base.width());
        let mut ups = vec![scales[0]];
        for (i, &s) in scales.iter().enumerate().skip(1) {
            let t = self.tape.value(s);
            let m = self.map(t.height(), t.width(), bh, bw, LEVEL_STRIDES[i] / LEVEL_STRIDES[0]);
            ups.push(self.tape.resample(s, m));
        }
        let fused = self.tape.sum(&ups);
        let fused = self.tape.relu(fused);
        let fused = self.pointwise(fused, dec.fuse);
        let fused = self.tape.relu(fused);
        let head = self.pointwise(fused, dec.head);
        let m = self.map(bh, bw, out_h, out_w, LEVEL_STRIDES[0]);
        self.tape.resample(head, m)
    }

    pub fn decode_depth(&mut self, image: &Pyramid, out_h: usize, out_w: usize) -> DepthVars {
        let dec = self.state.layout.depth;
        let scales = self.project(&dec, image);
        let raw = self.fuse_and_predict(&dec, &scales, out_h, out_w);
        let depth = self.tape.softplus(raw, self.state.config.depth_eps);
        DepthVars { scales, raw, depth }
    }

    /// Depth-aware modulation of one mask-decoder scale.
    pub fn modulate(&mut self, level: usize, mask_feat: Var, depth_feat: Var) -> Result<Var> {
        let (m, d) = (self.tape.value(mask_feat), self.tape.value(depth_feat));
        if m.shape() != d.shape() {
            return Err(Error::Shape(format!("modulation inputs {:?} vs {:?}", m.shape(), d.shape())));
        }
        let width = m.channels();
        if width != self.state.config.decoder_width {
            return Err(Error::Shape(format!(
                "modulation expects width {}, got {width}",
                self.state.config.decoder_width
            )));
        }
        let idx = self.state.layout.modulation[level];
        let joint = self.tape.concat(mask_feat, depth_feat);
        let hidden = self.pointwise(joint, idx.fc1);
        let hidden = self.tape.relu(hidden);
        let params = self.pointwise(hidden, idx.fc2);
        let dgamma = self.tape.slice_channels(params, 0, width);
        let beta = self.tape.slice_channels(params, width, width);
        Ok(self.tape.modulate(mask_feat, dgamma, beta))
    }

    pub fn decode_mask(
        &mut self,
        image: &Pyramid,
        flow: &Pyramid,
        depth_scales: Option<&Pyramid>,
        out_h: usize,
        out_w: usize,
    ) -> Result<MaskVars> {
        let dec = self.state.layout.mask;
        let summed: Pyramid = std::array::from_fn(|i| self.tape.add(image[i], flow[i]));
        let mut scales = self.project(&dec, &summed);
        if let Some(depth) = depth_scales {
            for i in 0..4 {
                scales[i] = self.modulate(i, scales[i], depth[i])?;
            }
        }
        let logits = self.fuse_and_predict(&dec, &scales, out_h, out_w);
        Ok(MaskVars { scales, logits })
    }

    /// Full forward of a batch of `(image, flow)` pairs.
    pub fn forward_batch(&mut self, batch: &[(Var, Var)], use_modulation: bool) -> Result<Vec<(MaskVars, DepthVars)>> {
        for &(i, f) in batch {
            let (a, b) = (self.tape.value(i), self.tape.value(f));
            if (a.height(), a.width()) != (b.height(), b.width()) {
                return Err(Error::Shape(format!(
                    "image {}x{} vs flow {}x{}",
                    a.height(),
                    a.width(),
                    b.height(),
                    b.width()
                )));
            }
        }
        let images: Vec<Var> = batch.iter().map(|b| b.0).collect();
        let flows: Vec<Var> = batch.iter().map(|b| b.1).collect();
        let pv = self.encode(Component::ImageEncoder, &images)?;
        let pf = self.encode(Component::FlowEncoder, &flows)?;
        let mut out = Vec::with_capacity(batch.len());
        for n in 0..batch.len() {
            let t = self.tape.value(images[n]);
            let (h, w) = (t.height(), t.width());
            let depth = self.decode_depth(&pv[n], h, w);
            let mask = self.decode_mask(&pv[n], &pf[n], use_modulation.then_some(&depth.scales), h, w)?;
            out.push((mask, depth));
        }
        Ok(out)
    }

    /// Depth branch only (image encoder + depth decoder).
    pub fn depth_batch(&mut self, images: &[Var]) -> Result<Vec<DepthVars>> {
        let pv = self.encode(Component::ImageEncoder, images)?;
        Ok(pv
            .iter()
            .zip(images)
            .map(|(p, &x)| {
                let t = self.tape.value(x);
                let (h, w) = (t.height(), t.width());
                self.decode_depth(p, h, w)
            })
            .collect())
    }

    /// Running-statistic updates for every normalization layer that used
    /// batch statistics.
    pub fn norm_updates(&self) -> Vec<NormUpdate> {
        self.norm_stats
            .iter()
            .map(|&(rm, rv, s)| {
                let d = self.tape.value(s).data();
                let c = d.len() / 2;
                NormUpdate { running_mean: rm, running_var: rv, mean: d[..c].to_vec(), var: d[c..].to_vec() }
            })
            .collect()
    }
}

impl ModelState {
    /// Exponential moving average of normalization statistics.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate], momentum: f64) {
        for u in updates {
            for (r, b) in self.buffers[u.running_mean].data.iter_mut().zip(&u.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in self.buffers[u.running_var].data.iter_mut().zip(&u.var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}

/// Plain-value output of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub height: usize,
    pub width: usize,
    pub mask_logits: Vec<f64>,
    pub depth_raw: Vec<f64>,
    pub depth: Vec<f64>,
    /// `(mask decoder, depth decoder)` features per scale.
    pub decoder_features: Vec<(Tensor, Tensor)>,
}

/// Image encoder pyramid of a single image in evaluation mode.
pub fn encode_image(state: &ModelState, image: &Tensor) -> Result<Vec<Tensor>> {
    let mut g = Graph::eval(state);
    let x = g.input(image.clone());
    let p = g.encode(Component::ImageEncoder, &[x])?;
    Ok(p[0].iter().map(|&v| g.tape.value(v).clone()).collect())
}

/// Evaluation-mode forward pass on one frame.
pub fn forward(state: &ModelState, image: &Tensor, flow: &Tensor, use_modulation: bool) -> Result<ForwardOutput> {
    let mut g = Graph::eval(state);
    let (i, f) = (g.input(image.clone()), g.input(flow.clone()));
    let (mask, depth) = g.forward_batch(&[(i, f)], use_modulation)?.remove(0);
    let v = |var: Var| g.tape.value(var).clone();
    Ok(ForwardOutput {
        height: image.height(),
        width: image.width(),
        mask_logits: v(mask.logits).into_vec(),
        depth_raw: v(depth.raw).into_vec(),
        depth: v(depth.depth).into_vec(),
        decoder_features: (0..4).map(|i| (v(mask.scales[i]), v(depth.scales[i]))).collect(),
    })
}

/// Evaluation-mode modulation of one scale, outside a full forward pass.
pub fn modulate(state: &ModelState, level: usize, mask_feat: &Tensor, depth_feat: &Tensor) -> Result<Tensor> {
    if level >= 4 {
        return Err(Error::validation("level", "must be < 4"));
    }
    let mut g = Graph::eval(state);
    let (m, d) = (g.input(mask_feat.clone()), g.input(depth_feat.clone()));
    let out = g.modulate(level, m, d)?;
    Ok(g.tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::state::{init_model, ModelConfig};

    fn ramp(c: usize, h: usize, w: usize, k: f64) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|i| ((i as f64) * k).sin() * 0.5 + 0.5).collect())
    }

    #[test]
    fn zero_inputs_give_finite_outputs() {
        let s = init_model(&ModelConfig::default(), 0).unwrap();
        let out = forward(&s, &Tensor::zeros(3, 64, 64), &Tensor::zeros(2, 64, 64), true).unwrap();
        assert!(out.mask_logits.iter().chain(&out.depth).all(|v| v.is_finite()));
        assert!(out.depth.iter().all(|&d| d > s.config.depth_eps));
        assert_eq!(out.mask_logits.len(), 64 * 64);
    }

    #[test]
    fn pyramid_sizes_use_ceiling() {
        let s = init_model(&ModelConfig::default(), 0).unwrap();
        let p = encode_image(&s, &ramp(3, 50, 61, 0.1)).unwrap();
        let sizes: Vec<(usize, usize, usize)> = p.iter().map(|t| (t.channels(), t.height(), t.width())).collect();
        assert_eq!(sizes, vec![(16, 13, 16), (32, 7, 8), (64, 4, 4), (128, 2, 2)]);
    }

    #[test]
    fn zero_initialized_modulation_is_identity() {
        let s = init_model(&ModelConfig::default(), 5).unwrap();
        let (img, flow) = (ramp(3, 64, 64, 0.37), ramp(2, 64, 64, 0.11));
        let with = forward(&s, &img, &flow, true).unwrap();
        let without = forward(&s, &img, &flow, false).unwrap();
        let dev = with.mask_logits.iter().zip(&without.mask_logits).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-6);
        let m = ramp(16, 4, 4, 0.2);
        let d = ramp(16, 4, 4, 0.9);
        assert_eq!(modulate(&s, 2, &m, &d).unwrap(), m);
    }

    #[test]
    fn forced_minus_one_scale_zeroes_the_feature() {
        let mut s = init_model(&ModelConfig::default(), 5).unwrap();
        let w = s.config.decoder_width;
        // fc2 weights zero, bias = (-1 for dgamma, 0 for beta)
        let b = s.param_mut("modulation.scale1.fc2.bias").unwrap();
        b.data[..w].fill(-1.0);
        let out = modulate(&s, 0, &ramp(w, 3, 3, 0.3), &ramp(w, 3, 3, 0.7)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depth_ignores_the_flow_stream() {
        let s = init_model(&ModelConfig::default(), 2).unwrap();
        let img = ramp(3, 64, 64, 0.05);
        let a = forward(&s, &img, &ramp(2, 64, 64, 0.3), true).unwrap();
        let b = forward(&s, &img, &ramp(2, 64, 64, 1.7), true).unwrap();
        assert!(a.depth.iter().zip(&b.depth).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.mask_logits != b.mask_logits);
    }

    #[test]
    fn shape_errors() {
        let s = init_model(&ModelConfig::default(), 2).unwrap();
        assert!(forward(&s, &Tensor::zeros(3, 64, 64), &Tensor::zeros(2, 32, 64), true).is_err());
        assert!(forward(&s, &Tensor::zeros(1, 64, 64), &Tensor::zeros(2, 64, 64), true).is_err());
        assert!(modulate(&s, 0, &Tensor::zeros(16, 2, 2), &Tensor::zeros(16, 3, 2)).is_err());
        assert!(modulate(&s, 0, &Tensor::zeros(8, 2, 2), &Tensor::zeros(8, 2, 2)).is_err());
    }
}
