//! Parameter storage, component partition, and deterministic initialization.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five named parameter groups of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    ImageEncoder,
    FlowEncoder,
    MaskDecoder,
    DepthDecoder,
    Modulation,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::ImageEncoder,
        Component::FlowEncoder,
        Component::MaskDecoder,
        Component::DepthDecoder,
        Component::Modulation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::ImageEncoder => "image_encoder",
            Component::FlowEncoder => "flow_encoder",
            Component::MaskDecoder => "mask_decoder",
            Component::DepthDecoder => "depth_decoder",
            Component::Modulation => "modulation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::validation("component", format!("unknown component `{s}`")))
    }

    #[inline]
    pub fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Small set of components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ComponentSet(u8);

impl ComponentSet {
    pub const EMPTY: ComponentSet = ComponentSet(0);
    pub const ALL: ComponentSet = ComponentSet(0b1_1111);

    pub fn of(components: &[Component]) -> Self {
        Self(components.iter().fold(0, |acc, c| acc | c.bit()))
    }

    pub fn contains(self, c: Component) -> bool {
        self.0 & c.bit() != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Component> {
        Component::ALL.into_iter().filter(move |c| self.contains(*c))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    /// Affine scale of a normalization layer.
    NormScale,
    /// Affine shift of a normalization layer.
    NormShift,
}

impl ParamKind {
    pub fn is_norm_affine(self) -> bool {
        matches!(self, ParamKind::NormScale | ParamKind::NormShift)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Per-channel normalization with running statistics and learnable affine.
    #[default]
    Batch,
    /// No normalization layers; convolutions carry a bias instead.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width `C` of the first pyramid level; levels use `C, 2C, 4C, 8C`.
    pub base_width: usize,
    /// Common width of the decoder projections.
    pub decoder_width: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub norm: NormKind,
    pub norm_eps: f64,
    pub norm_momentum: f64,
    pub use_modulation: bool,
    /// Offset added after the softplus of the depth head.
    pub depth_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            decoder_width: 16,
            input_height: 64,
            input_width: 64,
            norm: NormKind::Batch,
            norm_eps: 1e-5,
            norm_momentum: 0.1,
            use_modulation: true,
            depth_eps: 1e-3,
        }
    }
}

/// Downsampling factor of each encoder stage; cumulative strides 4, 8, 16, 32.
pub const STAGE_STRIDES: [usize; 4] = [4, 2, 2, 2];
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const IMAGE_CHANNELS: usize = 3;
pub const FLOW_CHANNELS: usize = 2;

impl ModelConfig {
    pub fn level_widths(&self) -> [usize; 4] {
        let c = self.base_width;
        [c, 2 * c, 4 * c, 8 * c]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::validation("model.base_width", "must be positive"));
        }
        if self.decoder_width == 0 {
            return Err(Error::validation("model.decoder_width", "must be positive"));
        }
        for (name, v) in [("model.input_height", self.input_height), ("model.input_width", self.input_width)] {
            if v == 0 || v % 32 != 0 {
                return Err(Error::validation(name, format!("{v} is not a positive multiple of 32")));
            }
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::validation("model.norm_eps", "must be positive"));
        }
        if !(self.norm_momentum > 0.0 && self.norm_momentum <= 1.0) {
            return Err(Error::validation("model.norm_momentum", "must lie in (0, 1]"));
        }
        if !(self.depth_eps > 0.0) {
            return Err(Error::validation("model.depth_eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub component: Component,
    pub kind: ParamKind,
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

/// Non-learnable state (normalization running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub component: Component,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvIdx {
    pub weight: usize,
    pub bias: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NormIdx {
    pub scale: usize,
    pub shift: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct StageIdx {
    pub conv: ConvIdx,
    pub norm: Option<NormIdx>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct DecoderIdx {
    pub proj: [ConvIdx; 4],
    pub fuse: ConvIdx,
    pub head: ConvIdx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ModulationIdx {
    pub fc1: ConvIdx,
    pub fc2: ConvIdx,
}

/// Index of every parameter inside [`ModelState::params`], derived from the config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Layout {
    pub image: [StageIdx; 4],
    pub flow: [StageIdx; 4],
    pub mask: DecoderIdx,
    pub depth: DecoderIdx,
    pub modulation: [ModulationIdx; 4],
}

#[derive(Clone, Copy)]
enum Init {
    He,
    Lecun,
    Zeros,
    Ones,
    Constant(f64),
}

struct Builder {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
    inits: Vec<Init>,
}

impl Builder {
    fn param(&mut self, name: String, component: Component, kind: ParamKind, shape: [usize; 3], init: Init) -> usize {
        self.params.push(Param { name, component, kind, shape, data: vec![0.0; shape[0] * shape[1] * shape[2]] });
        self.inits.push(init);
        self.params.len() - 1
    }

    fn conv(&mut self, prefix: &str, component: Component, cout: usize, cin: usize, k: usize, bias: bool, init: Init) -> ConvIdx {
        let weight = self.param(format!("{prefix}.weight"), component, ParamKind::Weight, [cout, cin, k * k], init);
        let bias = bias.then(|| self.param(format!("{prefix}.bias"), component, ParamKind::Bias, [cout, 1, 1], Init::Zeros));
        ConvIdx { weight, bias }
    }

    fn norm(&mut self, prefix: &str, component: Component, c: usize) -> NormIdx {
        let scale = self.param(format!("{prefix}.weight"), component, ParamKind::NormScale, [c, 1, 1], Init::Ones);
        let shift = self.param(format!("{prefix}.bias"), component, ParamKind::NormShift, [c, 1, 1], Init::Zeros);
        self.buffers.push(Buffer { name: format!("{prefix}.running_mean"), component, data: vec![0.0; c] });
        self.buffers.push(Buffer { name: format!("{prefix}.running_var"), component, data: vec![1.0; c] });
        let n = self.buffers.len();
        NormIdx { scale, shift, running_mean: n - 2, running_var: n - 1 }
    }

    fn encoder(&mut self, cfg: &ModelConfig, component: Component, in_channels: usize) -> [StageIdx; 4] {
        let widths = cfg.level_widths();
        let batch = cfg.norm == NormKind::Batch;
        std::array::from_fn(|i| {
            let cin = if i == 0 { in_channels } else { widths[i - 1] };
            let prefix = format!("{}.stage{}", component.name(), i + 1);
            let conv = self.conv(&format!("{prefix}.conv"), component, widths[i], cin, STAGE_STRIDES[i], !batch, Init::He);
            let norm = batch.then(|| self.norm(&format!("{prefix}.norm"), component, widths[i]));
            StageIdx { conv, norm }
        })
    }

    fn decoder(&mut self, cfg: &ModelConfig, component: Component, head_bias: f64) -> DecoderIdx {
        let widths = cfg.level_widths();
        let d = cfg.decoder_width;
        let name = component.name();
        let proj = std::array::from_fn(|i| self.conv(&format!("{name}.proj{}", i + 1), component, d, widths[i], 1, true, Init::He));
        let fuse = self.conv(&format!("{name}.fuse"), component, d, d, 1, true, Init::He);
        let head = self.conv(&format!("{name}.head"), component, 1, d, 1, false, Init::Lecun);
        let bias = self.param(format!("{name}.head.bias"), component, ParamKind::Bias, [1, 1, 1], Init::Constant(head_bias));
        DecoderIdx { proj, fuse, head: ConvIdx { weight: head.weight, bias: Some(bias) } }
    }
}

/// All learnable parameters and normalization buffers of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: Vec<Param>,
    pub buffers: Vec<Buffer>,
    pub(crate) layout: Layout,
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Builder) {
    let mut b = Builder { params: Vec::new(), buffers: Vec::new(), inits: Vec::new() };
    let image = b.encoder(cfg, Component::ImageEncoder, IMAGE_CHANNELS);
    let flow = b.encoder(cfg, Component::FlowEncoder, FLOW_CHANNELS);
    let mask = b.decoder(cfg, Component::MaskDecoder, 0.0);
    // softplus(x) = 5 at init: mid-range relative depth
    let depth = b.decoder(cfg, Component::DepthDecoder, (5.0f64.exp() - 1.0).ln());
    let w2 = 2 * cfg.decoder_width;
    let modulation = std::array::from_fn(|i| {
        let prefix = format!("modulation.scale{}", i + 1);
        let fc1 = b.conv(&format!("{prefix}.fc1"), Component::Modulation, w2, w2, 1, true, Init::He);
        // zero last layer: identity modulation at initialization
        let fc2 = b.conv(&format!("{prefix}.fc2"), Component::Modulation, w2, w2, 1, true, Init::Zeros);
        ModulationIdx { fc1, fc2 }
    });
    (Layout { image, flow, mask, depth, modulation }, b)
}

/// Initializes a network deterministically from `seed`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let (layout, mut b) = build_layout(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (p, init) in b.params.iter_mut().zip(&b.inits) {
        let fan_in = (p.shape[1] * p.shape[2]) as f64;
        match *init {
            Init::He | Init::Lecun => {
                let gain = if matches!(init, Init::He) { 2.0 } else { 1.0 };
                let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("finite std");
                p.data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
            Init::Zeros => p.data.fill(0.0),
            Init::Ones => p.data.fill(1.0),
            Init::Constant(c) => p.data.fill(c),
        }
    }
    Ok(ModelState { config: *config, seed, params: b.params, buffers: b.buffers, layout })
}

impl ModelState {
    /// Rebuilds a state from named tensors (checkpoint loading).
    pub(crate) fn from_parts(
        config: ModelConfig,
        seed: u64,
        mut params: BTreeMap<String, (Component, Vec<f64>)>,
        mut buffers: BTreeMap<String, (Component, Vec<f64>)>,
    ) -> Result<Self> {
        config.validate()?;
        let (layout, mut b) = build_layout(&config);
        for p in &mut b.params {
            let (component, data) = params
                .remove(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if component != p.component {
                return Err(Error::Checkpoint(format!("parameter `{}` tagged {component}, expected {}", p.name, p.component)));
            }
            if data.len() != p.data.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has {} values, config implies {}",
                    p.name,
                    data.len(),
                    p.data.len()
                )));
            }
            p.data = data;
        }
        for buf in &mut b.buffers {
            let (component, data) = buffers
                .remove(&buf.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer `{}`", buf.name)))?;
            if component != buf.component || data.len() != buf.data.len() {
                return Err(Error::Checkpoint(format!("buffer `{}` does not match the config", buf.name)));
            }
            buf.data = data;
        }
        if let Some(extra) = params.keys().next().or(buffers.keys().next()) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(ModelState { config, seed, params: b.params, buffers: b.buffers, layout })
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn component_param_count(&self, c: Component) -> usize {
        self.params.iter().filter(|p| p.component == c).map(|p| p.data.len()).sum()
    }

    /// Component -> parameter names, in storage order.
    pub fn partition(&self) -> BTreeMap<Component, Vec<String>> {
        let mut out: BTreeMap<Component, Vec<String>> = BTreeMap::new();
        for p in &self.params {
            out.entry(p.component).or_default().push(p.name.clone());
        }
        out
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Buffer> {
        self.buffers.iter().find(|b| b.name == name)
    }

    /// Flags parameters by component membership.
    pub fn mask_components(&self, set: ComponentSet) -> Vec<bool> {
        self.params.iter().map(|p| set.contains(p.component)).collect()
    }

    /// Flags the affine parameters of normalization layers.
    pub fn mask_norm_affine(&self) -> Vec<bool> {
        self.params.iter().map(|p| p.kind.is_norm_affine()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
            && self.buffers.iter().all(|b| b.data.iter().all(|v| v.is_finite()))
    }

    /// Bitwise equality of the parameters (and buffers) belonging to `c`.
    pub fn component_bits_equal(&self, other: &ModelState, c: Component) -> bool {
        let same = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        self.params
            .iter()
            .zip(&other.params)
            .filter(|(p, _)| p.component == c)
            .all(|(p, q)| p.name == q.name && same(&p.data, &q.data))
            && self
                .buffers
                .iter()
                .zip(&other.buffers)
                .filter(|(b, _)| b.component == c)
                .all(|(b, d)| b.name == d.name && same(&b.data, &d.data))
    }

    /// Copies parameters and buffers of the given components from `src`.
    pub fn copy_components_from(&mut self, src: &ModelState, set: ComponentSet) {
        for (p, q) in self.params.iter_mut().zip(&src.params) {
            if set.contains(p.component) {
                p.data.clone_from(&q.data);
            }
        }
        for (b, d) in self.buffers.iter_mut().zip(&src.buffers) {
            if set.contains(b.component) {
                b.data.clone_from(&d.data);
            }
        }
    }
}
