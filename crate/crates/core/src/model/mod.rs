//! Vision-transformer autoencoder mapping semantic crops to prior maps, with
//! optional random patch masking in the encoder.

mod checkpoint;
mod net;

pub use checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, read_checkpoint, write_checkpoint};
pub use net::{
    crop_tokens, encode, forward_graph, loss_per_patch, patchify, random_mask, reference_graph,
    sincos_pos_embed, target_tokens, unpatchify, visible_count, LossPolicy, MaskSpec,
};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::mapgrid::NUM_CLASSES;
use crate::tensor::{Scalar, Tensor};

/// Layer-norm epsilon used throughout the network.
pub const LN_EPS: f64 = 1e-6;

/// Quantity predicted by an output head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Occupancy,
    Stops,
    Velocity,
}

impl TargetKind {
    pub const ALL: [TargetKind; 3] = [TargetKind::Occupancy, TargetKind::Stops, TargetKind::Velocity];

    pub fn name(self) -> &'static str {
        match self {
            TargetKind::Occupancy => "occupancy",
            TargetKind::Stops => "stops",
            TargetKind::Velocity => "velocity",
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TargetKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown target `{s}`")))
    }
}

/// Parses a comma-separated target list such as `occupancy,stops`.
pub fn parse_targets(s: &str) -> Result<Vec<TargetKind>> {
    let targets = s
        .split(',')
        .map(|t| t.trim().parse())
        .collect::<Result<Vec<TargetKind>>>()?;
    let mut sorted = targets.clone();
    sorted.sort();
    sorted.dedup();
    if targets.is_empty() || sorted.len() != targets.len() {
        return Err(Error::Config(format!("invalid target list `{s}`")));
    }
    Ok(targets)
}

/// Named encoder sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// Small enough to train on a laptop CPU.
    Desk,
    Base,
    Large,
    Huge,
}

impl Backbone {
    pub const ALL: [Backbone; 4] = [Backbone::Desk, Backbone::Base, Backbone::Large, Backbone::Huge];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Desk => "desk",
            Backbone::Base => "base",
            Backbone::Large => "large",
            Backbone::Huge => "huge",
        }
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Backbone::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown backbone `{s}`")))
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Width, depth and head count of a transformer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub crop_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub encoder: StackConfig,
    pub decoder: StackConfig,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    pub targets: Vec<TargetKind>,
}

impl ArchConfig {
    pub fn preset(backbone: Backbone) -> Self {
        let stack = |dim, depth, heads| StackConfig { dim, depth, heads };
        let (encoder, decoder) = match backbone {
            Backbone::Desk => (stack(64, 4, 4), stack(64, 1, 4)),
            Backbone::Base => (stack(768, 12, 12), stack(512, 1, 16)),
            Backbone::Large => (stack(1024, 24, 16), stack(512, 1, 16)),
            Backbone::Huge => (stack(1280, 32, 16), stack(512, 1, 16)),
        };
        ArchConfig {
            crop_size: 64,
            patch_size: 8,
            in_channels: NUM_CLASSES,
            encoder,
            decoder,
            mlp_ratio: 4,
            mask_ratio: 0.0,
            targets: vec![TargetKind::Occupancy],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.crop_size == 0 || !self.crop_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "crop size {} is not divisible by patch size {}",
                self.crop_size, self.patch_size
            ));
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 {
            return bad("input channels and MLP ratio must be positive".into());
        }
        for (name, s) in [("encoder", self.encoder), ("decoder", self.decoder)] {
            if s.heads == 0 || s.dim == 0 || s.dim % s.heads != 0 {
                return bad(format!(
                    "{name} width {} is not divisible by {} heads",
                    s.dim, s.heads
                ));
            }
            if s.dim % 4 != 0 {
                return bad(format!("{name} width {} must be a multiple of 4", s.dim));
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask ratio {} outside [0, 1)", self.mask_ratio));
        }
        let mut t = self.targets.clone();
        t.sort();
        t.dedup();
        if t.is_empty() || t.len() != self.targets.len() {
            return bad("targets must be a non-empty list without repeats".into());
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid_side(&self) -> usize {
        self.crop_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Length of a flattened input patch, `p²·C`.
    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let targets: Vec<&str> = self.targets.iter().map(|t| t.name()).collect();
        [
            ("crop_size", self.crop_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("encoder_dim", self.encoder.dim.to_string()),
            ("encoder_depth", self.encoder.depth.to_string()),
            ("encoder_heads", self.encoder.heads.to_string()),
            ("decoder_dim", self.decoder.dim.to_string()),
            ("decoder_depth", self.decoder.depth.to_string()),
            ("decoder_heads", self.decoder.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("mask_ratio", format!("{:?}", self.mask_ratio)),
            ("targets", targets.join(",")),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Data(format!("architecture key `{key}` missing")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Data(format!("architecture key `{key}` is not an integer")))
        };
        let arch = ArchConfig {
            crop_size: num("crop_size")?,
            patch_size: num("patch_size")?,
            in_channels: num("in_channels")?,
            encoder: StackConfig {
                dim: num("encoder_dim")?,
                depth: num("encoder_depth")?,
                heads: num("encoder_heads")?,
            },
            decoder: StackConfig {
                dim: num("decoder_dim")?,
                depth: num("decoder_depth")?,
                heads: num("decoder_heads")?,
            },
            mlp_ratio: num("mlp_ratio")?,
            mask_ratio: get("mask_ratio")?
                .parse()
                .map_err(|_| Error::Data("architecture key `mask_ratio` is not a number".into()))?,
            targets: parse_targets(get("targets")?)?,
        };
        arch.validate()?;
        Ok(arch)
    }
}

fn push_block(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, e: usize, r: usize) {
    let mut add = |name: &str, shape: Vec<usize>| out.push((format!("{prefix}.{name}"), shape));
    add("norm1.gamma", vec![e]);
    add("norm1.beta", vec![e]);
    add("attn.qkv.weight", vec![e, 3 * e]);
    add("attn.qkv.bias", vec![3 * e]);
    add("attn.proj.weight", vec![e, e]);
    add("attn.proj.bias", vec![e]);
    add("norm2.gamma", vec![e]);
    add("norm2.beta", vec![e]);
    add("mlp.fc1.weight", vec![e, r * e]);
    add("mlp.fc1.bias", vec![r * e]);
    add("mlp.fc2.weight", vec![r * e, e]);
    add("mlp.fc2.bias", vec![e]);
}

/// Every learnable array in storage and checkpoint order, with its shape.
/// Positional tables are fixed and not listed.
pub fn param_layout(arch: &ArchConfig) -> Vec<(String, Vec<usize>)> {
    let (e, ed, r) = (arch.encoder.dim, arch.decoder.dim, arch.mlp_ratio);
    let p2 = arch.patch_pixels();
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![arch.token_dim(), e]),
        ("patch_embed.bias".to_string(), vec![e]),
    ];
    for i in 0..arch.encoder.depth {
        push_block(&mut out, &format!("encoder.blocks.{i}"), e, r);
    }
    out.push(("encoder.norm.gamma".into(), vec![e]));
    out.push(("encoder.norm.beta".into(), vec![e]));
    out.push(("decoder_embed.weight".into(), vec![e, ed]));
    out.push(("decoder_embed.bias".into(), vec![ed]));
    out.push(("mask_token".into(), vec![1, ed]));
    for i in 0..arch.decoder.depth {
        push_block(&mut out, &format!("decoder.blocks.{i}"), ed, r);
    }
    out.push(("decoder.norm.gamma".into(), vec![ed]));
    out.push(("decoder.norm.beta".into(), vec![ed]));
    for t in &arch.targets {
        out.push((format!("head.{t}.weight"), vec![ed, p2]));
        out.push((format!("head.{t}.bias"), vec![p2]));
    }
    out
}

/// Closed-form number of learnable scalars.
pub fn param_count(arch: &ArchConfig) -> usize {
    let (e, ed, r) = (arch.encoder.dim, arch.decoder.dim, arch.mlp_ratio);
    let p2 = arch.patch_pixels();
    let block = |d: usize| (4 + 2 * r) * d * d + (9 + r) * d;
    arch.token_dim() * e
        + e
        + arch.encoder.depth * block(e)
        + 2 * e
        + e * ed
        + ed
        + ed
        + arch.decoder.depth * block(ed)
        + 2 * ed
        + arch.targets.len() * (ed * p2 + p2)
}

/// Learnable parameters plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    arch: ArchConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    output_scales: Vec<f64>,
}

impl<T: Scalar> ModelWeights<T> {
    /// Xavier-uniform weight matrices, zero biases, unit layer-norm gains
    /// and a `N(0, 0.02²)` mask token.
    pub fn init<R: Rng>(arch: &ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let token = Normal::new(0.0, 0.02).expect("valid normal");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in param_layout(arch) {
            let n: usize = shape.iter().product();
            let t = if name == "mask_token" {
                Tensor::from_fn(shape, |_| T::of(token.sample(rng)))
            } else if name.ends_with(".gamma") {
                Tensor::full(shape, T::one())
            } else if name.ends_with(".weight") {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                Tensor::from_fn(shape, |_| T::of(rng.random_range(-a..a)))
            } else {
                debug_assert!(n > 0);
                Tensor::zeros(shape)
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(ModelWeights {
            arch: arch.clone(),
            names,
            tensors,
            output_scales: vec![1.0; arch.targets.len()],
        })
    }

    /// Wraps existing arrays after checking them against the layout.
    pub fn from_parts(arch: ArchConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        arch.validate()?;
        let layout = param_layout(&arch);
        if layout.len() != tensors.len() {
            return Err(Error::Data(format!(
                "expected {} parameter arrays, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(ModelWeights {
            output_scales: vec![1.0; arch.targets.len()],
            arch,
            names: layout.into_iter().map(|(n, _)| n).collect(),
            tensors,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Per-target factors mapping head outputs back to raw units, one per
    /// entry of `arch.targets`.
    pub fn output_scales(&self) -> &[f64] {
        &self.output_scales
    }

    pub fn set_output_scales(&mut self, scales: Vec<f64>) -> Result<()> {
        if scales.len() != self.arch.targets.len() || scales.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config(format!(
                "need {} finite output scales, got {scales:?}",
                self.arch.targets.len()
            )));
        }
        self.output_scales = scales;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    /// Number of learnable scalars actually stored.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            arch: self.arch.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            output_scales: self.output_scales.clone(),
        }
    }

    /// Adds every array to `g`, as parameters when `trainable`, otherwise
    /// as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Inference without masking. `tokens` stacks `batch` crops of
    /// [`ArchConfig::num_patches`] rows each; returns one `[rows × p²]`
    /// prediction per target.
    pub fn predict(&self, tokens: &Tensor<T>, batch: usize) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let masks = vec![MaskSpec::identity(self.arch.num_patches()); batch];
        let outs = forward_graph(&mut g, &self.arch, &vars, tokens, &masks)?;
        Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Single-crop forward pass with random masking at `ratio`.
    pub fn forward<R: Rng>(
        &self,
        tokens: &Tensor<T>,
        ratio: f64,
        rng: &mut R,
    ) -> Result<(Vec<Tensor<T>>, MaskSpec)> {
        let spec = MaskSpec::sample(self.arch.num_patches(), ratio, rng)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let outs = forward_graph(&mut g, &self.arch, &vars, tokens, std::slice::from_ref(&spec))?;
        Ok((outs.into_iter().map(|v| g.value(v).clone()).collect(), spec))
    }
}
