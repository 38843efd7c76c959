use std::fmt;
use std::str::FromStr;

use crate::attention::{AttentionConfig, EvitBlockSpec, Mechanism};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Augment {
    None,
    Concat,
    Replace,
}

impl Augment {
    pub fn as_str(self) -> &'static str {
        match self {
            Augment::None => "none",
            Augment::Concat => "concat",
            Augment::Replace => "replace",
        }
    }
}

impl fmt::Display for Augment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Augment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Augment::None),
            "concat" => Ok(Augment::Concat),
            "replace" => Ok(Augment::Replace),
            other => Err(Error::config(format!("unknown augmentation `{other}`"))),
        }
    }
}

/// How an augmented, resolution-halving layer downsamples its attention branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Downsample {
    Patch2x2,
    StrideConv,
}

impl Downsample {
    pub fn as_str(self) -> &'static str {
        match self {
            Downsample::Patch2x2 => "patch2x2",
            Downsample::StrideConv => "strideconv",
        }
    }
}

impl fmt::Display for Downsample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Downsample {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "patch2x2" | "patch" => Ok(Downsample::Patch2x2),
            "strideconv" | "conv" => Ok(Downsample::StrideConv),
            other => Err(Error::config(format!("unknown downsample method `{other}`"))),
        }
    }
}

/// Attention settings shared by every augmented layer. The head width is
/// the layer's channel count divided by `heads`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnTemplate {
    pub mechanism: Mechanism,
    pub heads: usize,
    pub k_rank: usize,
    pub window: usize,
    pub global_tokens: usize,
    pub mlp_ratio: f64,
}

impl Default for AttnTemplate {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::Longformer2D,
            heads: 4,
            k_rank: 16,
            window: 5,
            global_tokens: 0,
            mlp_ratio: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
    pub augment: Augment,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub input_side: usize,
    pub stem_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub downsample: Downsample,
    pub attn: AttnTemplate,
    pub classes: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::flagship()
    }
}

impl ModelSpec {
    /// ResNet18 for 32x32 inputs: 3x3 stem, four two-block layers.
    pub fn resnet18() -> Self {
        let layer = |channels, stride| LayerSpec {
            channels,
            blocks: 2,
            stride,
            augment: Augment::None,
        };
        Self {
            in_channels: 3,
            input_side: 32,
            stem_channels: 64,
            layers: vec![layer(64, 1), layer(128, 2), layer(256, 2), layer(512, 2)],
            downsample: Downsample::Patch2x2,
            attn: AttnTemplate::default(),
            classes: 10,
        }
    }

    /// Longformer concatenation on layers 3 and 4 with 2x2 patches.
    pub fn flagship() -> Self {
        Self::resnet18().with_augment(&[3, 4], Augment::Concat)
    }

    /// Set `mode` on the given 1-based layer indices.
    pub fn with_augment(mut self, layers: &[usize], mode: Augment) -> Self {
        for &l in layers {
            if let Some(layer) = self.layers.get_mut(l.wrapping_sub(1)) {
                layer.augment = mode;
            }
        }
        self
    }

    pub fn with_mechanism(mut self, mechanism: Mechanism) -> Self {
        self.attn.mechanism = mechanism;
        self
    }

    pub fn is_augmented(&self) -> bool {
        self.layers.iter().any(|l| l.augment != Augment::None)
    }

    /// `(channels, side)` entering each layer.
    pub fn layer_inputs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.layers.len());
        let (mut c, mut s) = (self.stem_channels, self.input_side);
        for l in &self.layers {
            out.push((c, s));
            c = l.channels;
            s = s.div_ceil(l.stride.max(1));
        }
        out
    }

    /// Spatial side after each layer.
    pub fn layer_output_sides(&self) -> Vec<usize> {
        self.layer_inputs()
            .iter()
            .zip(&self.layers)
            .map(|(&(_, s), l)| s.div_ceil(l.stride.max(1)))
            .collect()
    }

    /// Attention-branch geometry for layer `idx` (0-based), or `None` when
    /// the layer is plain.
    pub fn evit_spec(&self, idx: usize) -> Option<EvitBlockSpec> {
        let layer = self.layers.get(idx)?;
        if layer.augment == Augment::None {
            return None;
        }
        let (c_in, side) = self.layer_inputs()[idx];
        let out_side = side.div_ceil(layer.stride.max(1));
        let patch = if layer.stride == 2 && self.downsample == Downsample::Patch2x2 { 2 } else { 1 };
        let heads = self.attn.heads.max(1);
        let mut attn = AttentionConfig::new(self.attn.mechanism, heads, layer.channels / heads);
        attn.k_rank = self.attn.k_rank;
        attn.window = self.attn.window;
        attn.global_tokens = self.attn.global_tokens;
        Some(EvitBlockSpec {
            patch,
            in_channels: c_in,
            grid_h: out_side,
            grid_w: out_side,
            dim: layer.channels,
            attn,
            mlp_ratio: self.attn.mlp_ratio,
        })
    }

    /// Every violated invariant, in one configuration error.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.layers.len() != 4 {
            bad.push(format!("model.layers: expected 4 layers, got {}", self.layers.len()));
        }
        if self.in_channels == 0 {
            bad.push("model.in_channels must be positive".to_string());
        }
        if self.input_side == 0 {
            bad.push("model.input_side must be positive".to_string());
        }
        if self.stem_channels == 0 {
            bad.push("model.stem_channels must be positive".to_string());
        }
        if self.classes == 0 {
            bad.push("model.classes must be positive".to_string());
        }
        let inputs = self.layer_inputs();
        for (i, l) in self.layers.iter().enumerate() {
            let n = i + 1;
            if l.channels == 0 {
                bad.push(format!("layer{n}: channels must be positive"));
            }
            if l.blocks == 0 {
                bad.push(format!("layer{n}: blocks must be at least 1"));
            }
            if !(l.stride == 1 || l.stride == 2) {
                bad.push(format!("layer{n}: stride must be 1 or 2, got {}", l.stride));
            }
            if l.augment == Augment::None {
                continue;
            }
            if self.attn.heads == 0 || l.channels % self.attn.heads != 0 {
                bad.push(format!(
                    "layer{n}: attn.heads {} must divide the layer's {} channels",
                    self.attn.heads, l.channels
                ));
                continue;
            }
            let side = inputs[i].1;
            if l.stride == 2 && self.downsample == Downsample::Patch2x2 && !side.is_multiple_of(2) {
                bad.push(format!("layer{n}: patch2x2 needs an even incoming side, got {side}"));
                continue;
            }
            if let Some(spec) = self.evit_spec(i) {
                if let Err(e) = spec.validate() {
                    let msg = e.to_string();
                    let msg = msg.strip_prefix("invalid configuration: ").unwrap_or(&msg).to_string();
                    bad.push(format!("layer{n}: attn: {msg}"));
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}
