use crate::attention::EvitBranch;
use crate::autograd::{BatchNormStats, Module, Param, Tape, Var};
use crate::error::{Error, Result};
use crate::init::{self, Init};
use crate::tensor::Float;

use super::spec::{Augment, Downsample, ModelSpec};

/// Convolution without bias followed by batch norm.
pub struct ConvBn<F: Float> {
    pub conv: Param<F>,
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub stats: BatchNormStats,
    pub bn_name: String,
    pub stride: usize,
    pub padding: usize,
}

impl<F: Float> ConvBn<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        conv_name: &str,
        bn_name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            conv: init.kaiming_conv(format!("{conv_name}.weight"), &[c_out, c_in, kernel, kernel]),
            gamma: init::ones(format!("{bn_name}.weight"), &[c_out]),
            beta: init::zeros(format!("{bn_name}.bias"), &[c_out]),
            stats: BatchNormStats::new(c_out),
            bn_name: bn_name.to_string(),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: Var, training: bool) -> Result<Var> {
        let w = tape.param(&self.conv);
        let y = tape.conv2d(x, w, self.stride, self.padding)?;
        let (g, b) = (tape.param(&self.gamma), tape.param(&self.beta));
        tape.batch_norm2d(y, g, b, &self.stats, training)
    }
}

impl<F: Float> Module<F> for ConvBn<F> {
    fn params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        out.extend([&self.conv, &self.gamma, &self.beta]);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.extend([&mut self.conv, &mut self.gamma, &mut self.beta]);
    }
}

/// Two 3x3 conv-BN stages plus identity or projection shortcut.
pub struct ResidualBlock<F: Float> {
    pub conv1: ConvBn<F>,
    pub conv2: ConvBn<F>,
    pub shortcut: Option<ConvBn<F>>,
}

impl<F: Float> ResidualBlock<F> {
    pub fn new(init: &mut Init, prefix: &str, c_in: usize, c_out: usize, stride: usize) -> Self {
        let conv1 = ConvBn::new(init, &format!("{prefix}.conv1"), &format!("{prefix}.bn1"), c_in, c_out, 3, stride, 1);
        let conv2 = ConvBn::new(init, &format!("{prefix}.conv2"), &format!("{prefix}.bn2"), c_out, c_out, 3, 1, 1);
        let shortcut = (stride != 1 || c_in != c_out).then(|| {
            ConvBn::new(
                init,
                &format!("{prefix}.shortcut.conv"),
                &format!("{prefix}.shortcut.bn"),
                c_in,
                c_out,
                1,
                stride,
                0,
            )
        });
        Self { conv1, conv2, shortcut }
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: Var, training: bool) -> Result<Var> {
        let h = self.conv1.forward(tape, x, training)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h, training)?;
        let s = match &self.shortcut {
            Some(sc) => sc.forward(tape, x, training)?,
            None => {
                if tape.shape(x) != tape.shape(h) {
                    return Err(Error::config(format!(
                        "identity shortcut cannot join {:?} with {:?}",
                        tape.shape(x),
                        tape.shape(h)
                    )));
                }
                x
            }
        };
        let y = tape.add(h, s)?;
        Ok(tape.relu(y))
    }

    fn conv_bns(&self) -> impl Iterator<Item = &ConvBn<F>> {
        [&self.conv1, &self.conv2].into_iter().chain(self.shortcut.as_ref())
    }
}

impl<F: Float> Module<F> for ResidualBlock<F> {
    fn params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.conv1.params(out);
        self.conv2.params(out);
        if let Some(s) = &self.shortcut {
            s.params(out);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.conv1.params_mut(out);
        self.conv2.params_mut(out);
        if let Some(s) = &mut self.shortcut {
            s.params_mut(out);
        }
    }
}

/// Attention path of an augmented block: optional stride-2 conv, then the
/// patch-embedded transformer block folded back to a map.
pub struct AttnPath<F: Float> {
    pub down: Option<Param<F>>,
    pub branch: EvitBranch<F>,
}

impl<F: Float> AttnPath<F> {
    pub fn forward(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let x = match &self.down {
            Some(w) => {
                let w = tape.param(w);
                tape.conv2d(x, w, 2, 1)?
            }
            None => x,
        };
        self.branch.forward(tape, x)
    }
}

impl<F: Float> Module<F> for AttnPath<F> {
    fn params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        out.extend(self.down.iter());
        self.branch.params(out);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.extend(self.down.iter_mut());
        self.branch.params_mut(out);
    }
}

/// First block of a layer.
pub enum HeadBlock<F: Float> {
    Plain(ResidualBlock<F>),
    /// `F(concat(G(X) + X, E(X)))`
    Concat {
        residual: ResidualBlock<F>,
        attn: AttnPath<F>,
        fuse: Param<F>,
    },
    /// `F(E(X))`
    Replace { attn: AttnPath<F>, fuse: Param<F> },
}

/// `C_out x C_in x 1 x 1` pointwise projection applied without bias.
fn pointwise<F: Float>(tape: &mut Tape<F>, x: Var, w: &Param<F>) -> Result<Var> {
    let w = tape.param(w);
    tape.conv2d(x, w, 1, 0)
}

impl<F: Float> HeadBlock<F> {
    pub fn forward(&self, tape: &mut Tape<F>, x: Var, training: bool) -> Result<Var> {
        match self {
            HeadBlock::Plain(b) => b.forward(tape, x, training),
            HeadBlock::Concat { residual, attn, fuse } => {
                let g = residual.forward(tape, x, training)?;
                let e = attn.forward(tape, x)?;
                if tape.shape(g)[2..] != tape.shape(e)[2..] {
                    return Err(Error::Contract(format!(
                        "branch extents disagree: residual {:?}, attention {:?}",
                        tape.shape(g),
                        tape.shape(e)
                    )));
                }
                let cat = tape.concat(&[g, e], 1)?;
                pointwise(tape, cat, fuse)
            }
            HeadBlock::Replace { attn, fuse } => {
                let e = attn.forward(tape, x)?;
                pointwise(tape, e, fuse)
            }
        }
    }

    pub fn residual(&self) -> Option<&ResidualBlock<F>> {
        match self {
            HeadBlock::Plain(b) | HeadBlock::Concat { residual: b, .. } => Some(b),
            HeadBlock::Replace { .. } => None,
        }
    }

    pub fn attn(&self) -> Option<&AttnPath<F>> {
        match self {
            HeadBlock::Plain(_) => None,
            HeadBlock::Concat { attn, .. } | HeadBlock::Replace { attn, .. } => Some(attn),
        }
    }

    pub fn fuse(&self) -> Option<&Param<F>> {
        match self {
            HeadBlock::Plain(_) => None,
            HeadBlock::Concat { fuse, .. } | HeadBlock::Replace { fuse, .. } => Some(fuse),
        }
    }

    pub fn fuse_mut(&mut self) -> Option<&mut Param<F>> {
        match self {
            HeadBlock::Plain(_) => None,
            HeadBlock::Concat { fuse, .. } | HeadBlock::Replace { fuse, .. } => Some(fuse),
        }
    }

    pub fn attn_mut(&mut self) -> Option<&mut AttnPath<F>> {
        match self {
            HeadBlock::Plain(_) => None,
            HeadBlock::Concat { attn, .. } | HeadBlock::Replace { attn, .. } => Some(attn),
        }
    }
}

impl<F: Float> Module<F> for HeadBlock<F> {
    fn params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        match self {
            HeadBlock::Plain(b) => b.params(out),
            HeadBlock::Concat { residual, attn, fuse } => {
                residual.params(out);
                attn.params(out);
                out.push(fuse);
            }
            HeadBlock::Replace { attn, fuse } => {
                attn.params(out);
                out.push(fuse);
            }
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        match self {
            HeadBlock::Plain(b) => b.params_mut(out),
            HeadBlock::Concat { residual, attn, fuse } => {
                residual.params_mut(out);
                attn.params_mut(out);
                out.push(fuse);
            }
            HeadBlock::Replace { attn, fuse } => {
                attn.params_mut(out);
                out.push(fuse);
            }
        }
    }
}

pub struct Layer<F: Float> {
    pub head: HeadBlock<F>,
    pub rest: Vec<ResidualBlock<F>>,
}

impl<F: Float> Layer<F> {
    pub fn forward(&self, tape: &mut Tape<F>, x: Var, training: bool) -> Result<Var> {
        let mut h = self.head.forward(tape, x, training)?;
        for b in &self.rest {
            h = b.forward(tape, h, training)?;
        }
        Ok(h)
    }
}

impl<F: Float> Module<F> for Layer<F> {
    fn params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.head.params(out);
        for b in &self.rest {
            b.params(out);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.head.params_mut(out);
        for b in &mut self.rest {
            b.params_mut(out);
        }
    }
}

/// Stem, four residual layers, global average pool, linear classifier.
pub struct Model<F: Float> {
    pub spec: ModelSpec,
    pub stem: ConvBn<F>,
    pub layers: Vec<Layer<F>>,
    pub fc_w: Param<F>,
    pub fc_b: Param<F>,
}

/// Deterministic construction: parameters are drawn from one stream seeded
/// by `seed`, in declaration order.
pub fn build_model<F: Float>(spec: &ModelSpec, seed: u64) -> Result<Model<F>> {
    spec.validate()?;
    let mut init = Init::new(seed);
    let stem = ConvBn::new(&mut init, "stem.conv", "stem.bn", spec.in_channels, spec.stem_channels, 3, 1, 1);
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut c_in = spec.stem_channels;
    for (i, ls) in spec.layers.iter().enumerate() {
        let prefix = format!("layer{}", i + 1);
        let head_prefix = format!("{prefix}.0");
        let attn_path = |init: &mut Init| -> Result<AttnPath<F>> {
            let evit = spec.evit_spec(i).ok_or_else(|| Error::Contract("missing attention spec".into()))?;
            let down = (ls.stride == 2 && spec.downsample == Downsample::StrideConv)
                .then(|| init.kaiming_conv(format!("{head_prefix}.down.weight"), &[c_in, c_in, 3, 3]));
            let branch = EvitBranch::new(&format!("{head_prefix}.attn"), init, &evit)?;
            Ok(AttnPath { down, branch })
        };
        let head = match ls.augment {
            Augment::None => HeadBlock::Plain(ResidualBlock::new(&mut init, &head_prefix, c_in, ls.channels, ls.stride)),
            Augment::Concat => {
                let residual = ResidualBlock::new(&mut init, &head_prefix, c_in, ls.channels, ls.stride);
                let attn = attn_path(&mut init)?;
                let fuse = init.kaiming_conv(format!("{head_prefix}.fuse.weight"), &[ls.channels, 2 * ls.channels, 1, 1]);
                HeadBlock::Concat { residual, attn, fuse }
            }
            Augment::Replace => {
                let attn = attn_path(&mut init)?;
                let fuse = init.kaiming_conv(format!("{head_prefix}.fuse.weight"), &[ls.channels, ls.channels, 1, 1]);
                HeadBlock::Replace { attn, fuse }
            }
        };
        let rest = (1..ls.blocks)
            .map(|j| ResidualBlock::new(&mut init, &format!("{prefix}.{j}"), ls.channels, ls.channels, 1))
            .collect();
        layers.push(Layer { head, rest });
        c_in = ls.channels;
    }
    let bound = 1.0 / (c_in as f64).sqrt();
    let fc_w = init.uniform("fc.weight", &[spec.classes, c_in], bound);
    let fc_b = init.uniform("fc.bias", &[spec.classes], bound);
    Ok(Model {
        spec: spec.clone(),
        stem,
        layers,
        fc_w,
        fc_b,
    })
}

impl<F: Float> Model<F> {
    /// Logits `B x classes` for `x: B x C x H x W`.
    pub fn forward(&self, tape: &mut Tape<F>, x: Var, training: bool) -> Result<Var> {
        Ok(self.forward_trace(tape, x, training)?.0)
    }

    /// Logits plus the feature-map shape after the stem and after each layer.
    pub fn forward_trace(&self, tape: &mut Tape<F>, x: Var, training: bool) -> Result<(Var, Vec<Vec<usize>>)> {
        let sx = tape.shape(x);
        if sx.len() != 4 || sx[1] != self.spec.in_channels {
            return Err(Error::dim(
                "model input",
                sx,
                &[self.spec.in_channels, self.spec.input_side, self.spec.input_side],
            ));
        }
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let h = self.stem.forward(tape, x, training)?;
        let mut h = tape.relu(h);
        shapes.push(tape.shape(h).to_vec());
        for layer in &self.layers {
            h = layer.forward(tape, h, training)?;
            shapes.push(tape.shape(h).to_vec());
        }
        let pooled = tape.global_avg_pool(h)?;
        let (w, b) = (tape.param(&self.fc_w), tape.param(&self.fc_b));
        Ok((tape.linear(pooled, w, Some(b))?, shapes))
    }

    /// Every batch-norm layer with its parameter-name prefix, in declaration order.
    pub fn batch_norms(&self) -> Vec<(&str, &BatchNormStats)> {
        let mut out = vec![(self.stem.bn_name.as_str(), &self.stem.stats)];
        for layer in &self.layers {
            let blocks = layer.head.residual().into_iter().chain(layer.rest.iter());
            for b in blocks {
                for cb in b.conv_bns() {
                    out.push((cb.bn_name.as_str(), &cb.stats));
                }
            }
        }
        out
    }

    /// Parameters outside every attention path and fusion projection.
    pub fn conv_param_count(&self) -> usize {
        let attn: usize = self
            .layers
            .iter()
            .map(|l| {
                l.head.attn().map_or(0, |a| a.num_params()) + l.head.fuse().map_or(0, |f| f.numel())
            })
            .sum();
        self.num_params() - attn
    }
}

impl<F: Float> Module<F> for Model<F> {
    fn params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.stem.params(out);
        for l in &self.layers {
            l.params(out);
        }
        out.extend([&self.fc_w, &self.fc_b]);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.stem.params_mut(out);
        for l in &mut self.layers {
            l.params_mut(out);
        }
        out.extend([&mut self.fc_w, &mut self.fc_b]);
    }
}
