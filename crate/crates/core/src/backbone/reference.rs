//! Stand-alone ResNet18 with no augmentation machinery, used to pin the
//! unaugmented [`Model`](super::Model) to the textbook network.

use crate::autograd::{BatchNormStats, Param, Tape, Var};
use crate::error::Result;
use crate::init::Init;
use crate::tensor::{Float, Tensor};

struct Stage<F: Float> {
    weight: Param<F>,
    gamma: Tensor<F>,
    beta: Tensor<F>,
    stats: BatchNormStats,
    stride: usize,
    padding: usize,
}

impl<F: Float> Stage<F> {
    fn new(init: &mut Init, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Self {
            weight: init.kaiming_conv("w", &[c_out, c_in, k, k]),
            gamma: Tensor::ones(&[c_out]),
            beta: Tensor::zeros(&[c_out]),
            stats: BatchNormStats::new(c_out),
            stride,
            padding: k / 2,
        }
    }

    fn run(&self, tape: &mut Tape<F>, x: Var, training: bool) -> Result<Var> {
        let w = tape.param(&self.weight);
        let y = tape.conv2d(x, w, self.stride, self.padding)?;
        let g = tape.constant(self.gamma.clone());
        let b = tape.constant(self.beta.clone());
        tape.batch_norm2d(y, g, b, &self.stats, training)
    }
}

struct Basic<F: Float> {
    a: Stage<F>,
    b: Stage<F>,
    proj: Option<Stage<F>>,
}

/// ResNet18-CIFAR: 3x3 stem, widths `[w, 2w, 4w, 8w]`, two basic blocks per stage.
pub struct PlainResNet18<F: Float> {
    stem: Stage<F>,
    blocks: Vec<Basic<F>>,
    fc_w: Param<F>,
    fc_b: Param<F>,
}

impl<F: Float> PlainResNet18<F> {
    pub fn new(in_channels: usize, stem: usize, widths: [usize; 4], classes: usize, seed: u64) -> Self {
        let mut init = Init::new(seed);
        let stem_stage = Stage::new(&mut init, in_channels, stem, 3, 1);
        let mut blocks = Vec::new();
        let mut c = stem;
        for (i, &w) in widths.iter().enumerate() {
            for j in 0..2 {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                let a = Stage::new(&mut init, c, w, 3, stride);
                let b = Stage::new(&mut init, w, w, 3, 1);
                let proj = (stride != 1 || c != w).then(|| Stage::new(&mut init, c, w, 1, stride));
                blocks.push(Basic { a, b, proj });
                c = w;
            }
        }
        let bound = 1.0 / (c as f64).sqrt();
        let fc_w = init.uniform("fc.w", &[classes, c], bound);
        let fc_b = init.uniform("fc.b", &[classes], bound);
        Self {
            stem: stem_stage,
            blocks,
            fc_w,
            fc_b,
        }
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: Var, training: bool) -> Result<Var> {
        let h = self.stem.run(tape, x, training)?;
        let mut h = tape.relu(h);
        for blk in &self.blocks {
            let r = blk.a.run(tape, h, training)?;
            let r = tape.relu(r);
            let r = blk.b.run(tape, r, training)?;
            let s = match &blk.proj {
                Some(p) => p.run(tape, h, training)?,
                None => h,
            };
            let sum = tape.add(r, s)?;
            h = tape.relu(sum);
        }
        let pooled = tape.global_avg_pool(h)?;
        let (w, b) = (tape.param(&self.fc_w), tape.param(&self.fc_b));
        tape.linear(pooled, w, Some(b))
    }
}
