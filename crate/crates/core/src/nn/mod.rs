//! Network building blocks and the architecture builders.
//!
//! A [`Network`] owns a flat, named [`ParamStore`] and a layout that refers to
//! parameters by index. Optimizers replace parameter tensors in place between
//! steps; the layout never changes after building.

mod cascade;
mod inference;
mod layers;
mod res_unet;
mod unet;

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::serialize::NamedTensor;
use crate::tensor::{Element, Tensor};

pub use cascade::build_cascaded_unet;
pub use inference::{forward_full_volume, tile_starts, DEFAULT_OVERLAP};
pub use res_unet::{build_res_unet, RES_UNET_ENCODER_BLOCKS};
pub use unet::build_unet;

pub(crate) use layers::{Conv, ConvNormAct, ResidualBlock};

/// Index of a parameter inside its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered, uniquely named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element> {
    params: Vec<Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub(crate) fn add(&mut self, name: String, shape: &[usize], data: Vec<T>) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let value = Tensor::param(data, shape).expect("parameter shape");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_at(&self, index: usize) -> &Tensor<T> {
        &self.params[index].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.params[i].value)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces the value at `index` with a fresh leaf holding `data`.
    pub fn set(&mut self, index: usize, data: Vec<T>) -> Result<()> {
        let p = &mut self.params[index];
        if data.len() != p.value.numel() {
            return Err(Error::shape(
                "param_store",
                format!("{}: {} values for shape {:?}", p.name, data.len(), p.value.shape()),
            ));
        }
        p.value = Tensor::param(data, p.value.shape())?;
        Ok(())
    }

    /// Exchanges the values of two same-shaped parameters.
    pub fn swap_values(&mut self, a: usize, b: usize) -> Result<()> {
        if self.params[a].value.shape() != self.params[b].value.shape() {
            return Err(Error::shape(
                "param_store",
                format!("cannot swap {} and {}", self.params[a].name, self.params[b].name),
            ));
        }
        let va = self.params[a].value.clone();
        self.params[a].value = std::mem::replace(&mut self.params[b].value, va);
        Ok(())
    }

    pub fn zero_grads(&self) {
        self.params.iter().for_each(|p| p.value.zero_grad());
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
            })
            .collect()
    }

    /// Loads values by name. Names and shapes must match exactly.
    pub fn load_named(&mut self, tensors: &[NamedTensor]) -> std::result::Result<(), String> {
        if tensors.len() != self.params.len() {
            return Err(format!(
                "checkpoint holds {} tensors, network has {}",
                tensors.len(),
                self.params.len()
            ));
        }
        let mut seen = HashSet::new();
        for t in tensors {
            let i = self
                .position(&t.name)
                .ok_or_else(|| format!("unexpected tensor {}", t.name))?;
            if !seen.insert(i) {
                return Err(format!("tensor {} appears twice", t.name));
            }
            if self.params[i].value.shape() != t.shape.as_slice() {
                return Err(format!(
                    "tensor {} has shape {:?}, network expects {:?}",
                    t.name,
                    t.shape,
                    self.params[i].value.shape()
                ));
            }
        }
        for t in tensors {
            let i = self.position(&t.name).expect("checked");
            let data = t.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
            self.set(i, data).map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
    Group { groups: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
}

/// Negative slope of the leaky ReLU in the plain UNet.
pub const LEAKY_SLOPE: f64 = 1e-2;
/// Default group count for group normalization.
pub const DEFAULT_GROUPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Channel width at the first level; doubles per level.
    pub base_channels: usize,
    /// Encoder depth including the full-resolution level.
    pub levels: usize,
    pub in_modalities: usize,
    pub out_regions: usize,
    pub norm: NormKind,
    pub activation: Activation,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl NetConfig {
    /// Leaky ReLU + instance norm.
    pub fn unet(base_channels: usize, levels: usize) -> Self {
        NetConfig {
            base_channels,
            levels,
            in_modalities: 4,
            out_regions: 3,
            norm: NormKind::Instance,
            activation: Activation::LeakyRelu { slope: LEAKY_SLOPE },
            seed: 0,
        }
    }

    /// ReLU + group norm, four levels.
    pub fn res_unet(base_channels: usize) -> Self {
        NetConfig {
            levels: 4,
            norm: NormKind::Group { groups: DEFAULT_GROUPS },
            activation: Activation::Relu,
            ..Self::unet(base_channels, 4)
        }
    }

    /// ReLU + instance norm in pre-activation residual blocks.
    pub fn cascaded(base_channels: usize, levels: usize) -> Self {
        NetConfig {
            activation: Activation::Relu,
            ..Self::unet(base_channels, levels)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::InvalidArgument(format!(
                "levels must be >= 2, got {}",
                self.levels
            )));
        }
        if self.base_channels < 1 {
            return Err(Error::InvalidArgument("base_channels must be >= 1".into()));
        }
        if self.out_regions != 3 {
            return Err(Error::InvalidArgument(format!(
                "out_regions must be 3 (WT, TC, ET), got {}",
                self.out_regions
            )));
        }
        if self.in_modalities < 1 {
            return Err(Error::InvalidArgument("in_modalities must be >= 1".into()));
        }
        if let NormKind::Group { groups } = self.norm {
            if groups == 0 || self.base_channels % groups != 0 {
                return Err(Error::InvalidArgument(format!(
                    "base_channels {} not divisible into {groups} groups",
                    self.base_channels
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Which builder produced a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ArchKind {
    Unet,
    ResUnet,
    CascadedUnet { stages: usize },
}

impl ArchKind {
    pub fn name(&self) -> &'static str {
        match self {
            ArchKind::Unet => "unet",
            ArchKind::ResUnet => "res_unet",
            ArchKind::CascadedUnet { .. } => "cascaded_unet",
        }
    }
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ArchKind::CascadedUnet { stages } => write!(f, "cascaded_unet(stages={stages})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone)]
enum Layout {
    Unet(unet::UnetLayout),
    ResUnet(res_unet::ResUnetLayout),
    Cascaded(cascade::CascadeLayout),
}

/// A built architecture: parameters plus the forward wiring.
#[derive(Debug, Clone)]
pub struct Network<T: Element = f32> {
    kind: ArchKind,
    cfg: NetConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Element> Network<T> {
    pub fn kind(&self) -> ArchKind {
        self.kind
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Every spatial input extent must be a multiple of this.
    pub fn spatial_divisor(&self) -> usize {
        match &self.layout {
            Layout::Unet(_) | Layout::ResUnet(_) => 1 << (self.cfg.levels - 1),
            Layout::Cascaded(c) => 1 << (self.cfg.levels - 1 + c.stages.len() - 1),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.cfg.in_modalities {
            return Err(Error::shape(
                "network",
                format!("expected [N, {}, D, H, W], got {s:?}", self.cfg.in_modalities),
            ));
        }
        let div = self.spatial_divisor();
        if let Some((axis, ext)) = s[2..].iter().enumerate().find(|(_, &e)| e % div != 0 || e == 0) {
            return Err(Error::shape(
                "network",
                format!("spatial axis {axis} extent {ext} is not a positive multiple of {div}"),
            ));
        }
        Ok(())
    }

    /// Logits `[N, 3, D, H, W]` for input `[N, 4, D, H, W]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        match &self.layout {
            Layout::Unet(l) => l.forward(&self.params, x),
            Layout::ResUnet(l) => l.forward(&self.params, x),
            Layout::Cascaded(l) => l.forward(&self.params, x),
        }
    }

    /// `(encoder, decoder)` residual block counts, when the architecture has
    /// residual blocks in a single encoder path.
    pub fn residual_block_census(&self) -> Option<(usize, usize)> {
        match &self.layout {
            Layout::ResUnet(l) => Some(l.census()),
            _ => None,
        }
    }

    /// Per stage, per level fused multi-encoder features of a cascaded
    /// network, running the whole cascade on `x`.
    pub fn fused_features(&self, x: &Tensor<T>) -> Result<Vec<Vec<Tensor<T>>>> {
        self.check_input(x)?;
        match &self.layout {
            Layout::Cascaded(l) => l.fused_features(&self.params, x),
            _ => Err(Error::InvalidArgument(format!("{} has no fused encoders", self.kind))),
        }
    }

    /// Input extents each stage of a cascade consumes for input extents `ext`.
    pub fn stage_extents(&self, ext: [usize; 3]) -> Vec<[usize; 3]> {
        match &self.layout {
            Layout::Cascaded(l) => (0..l.stages.len())
                .map(|s| ext.map(|e| e >> (l.stages.len() - 1 - s)))
                .collect(),
            _ => vec![ext],
        }
    }
}

/// Something that maps `[N, 4, D, H, W]` inputs to `[N, 3, D, H, W]` logits.
pub trait Segmenter: Sync {
    fn logits(&self, input: &Tensor<f32>) -> Result<Tensor<f32>>;

    /// Required multiple for each spatial extent of the input.
    fn spatial_divisor(&self) -> usize {
        1
    }
}

impl Segmenter for Network<f32> {
    fn logits(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward(input)
    }

    fn spatial_divisor(&self) -> usize {
        Network::spatial_divisor(self)
    }
}

/// Allocates named parameters with He-normal conv weights.
pub(crate) struct Init<'a, T: Element> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Element> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn conv_weight(&mut self, name: String, cin: usize, cout: usize, k: usize) -> ParamId {
        let fan_in = (cin * k * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let data = (0..cout * cin * k * k * k)
            .map(|_| T::from_f64_lossy(normal.sample(&mut self.rng)))
            .collect();
        self.store.add(name, &[cout, cin, k, k, k], data)
    }

    pub fn constant(&mut self, name: String, len: usize, value: f64) -> ParamId {
        self.store.add(name, &[len], vec![T::from_f64_lossy(value); len])
    }
}
