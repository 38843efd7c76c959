use crate::autograd::{Module, Param, Tape, Var};
use crate::error::{Error, Result};
use crate::init::{self, Init, TRANSFORMER_STD};
use crate::tensor::Float;

use super::config::EvitBlockSpec;
use super::mhsa::{AttnProbs, Mhsa};
use super::patch::{tokens_to_map, PatchEmbed};

/// Pre-norm transformer encoder block:
/// `t += MHSA(LN(t)); t += fc2(GELU(fc1(LN(t))))`.
pub struct EvitBlock<F: Float> {
    pub ln1_g: Param<F>,
    pub ln1_b: Param<F>,
    pub attn: Mhsa<F>,
    pub ln2_g: Param<F>,
    pub ln2_b: Param<F>,
    pub fc1_w: Param<F>,
    pub fc1_b: Param<F>,
    pub fc2_w: Param<F>,
    pub fc2_b: Param<F>,
}

impl<F: Float> EvitBlock<F> {
    pub fn new(prefix: &str, init: &mut Init, spec: &EvitBlockSpec) -> Result<Self> {
        spec.validate()?;
        let (d, hidden) = (spec.dim, spec.hidden());
        let ln1_g = init::ones(format!("{prefix}.ln1.weight"), &[d]);
        let ln1_b = init::zeros(format!("{prefix}.ln1.bias"), &[d]);
        let attn = Mhsa::new(&format!("{prefix}.attn"), init, &spec.attn, (spec.grid_h, spec.grid_w))?;
        let ln2_g = init::ones(format!("{prefix}.ln2.weight"), &[d]);
        let ln2_b = init::zeros(format!("{prefix}.ln2.bias"), &[d]);
        let fc1_w = init.normal(format!("{prefix}.mlp.fc1.weight"), &[hidden, d], TRANSFORMER_STD);
        let fc1_b = init::zeros(format!("{prefix}.mlp.fc1.bias"), &[hidden]);
        let fc2_w = init.normal(format!("{prefix}.mlp.fc2.weight"), &[d, hidden], TRANSFORMER_STD);
        let fc2_b = init::zeros(format!("{prefix}.mlp.fc2.bias"), &[d]);
        Ok(Self {
            ln1_g,
            ln1_b,
            attn,
            ln2_g,
            ln2_b,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        })
    }

    pub fn forward(&self, tape: &mut Tape<F>, t: Var) -> Result<(Var, AttnProbs<F>)> {
        let (g, b) = (tape.param(&self.ln1_g), tape.param(&self.ln1_b));
        let n1 = tape.layer_norm(t, g, b)?;
        let (a, probs) = self.attn.forward(tape, n1)?;
        let t = tape.add(t, a)?;
        let (g, b) = (tape.param(&self.ln2_g), tape.param(&self.ln2_b));
        let n2 = tape.layer_norm(t, g, b)?;
        let (w1, b1) = (tape.param(&self.fc1_w), tape.param(&self.fc1_b));
        let hdn = tape.linear(n2, w1, Some(b1))?;
        let hdn = tape.gelu(hdn);
        let (w2, b2) = (tape.param(&self.fc2_w), tape.param(&self.fc2_b));
        let m = tape.linear(hdn, w2, Some(b2))?;
        Ok((tape.add(t, m)?, probs))
    }
}

impl<F: Float> Module<F> for EvitBlock<F> {
    fn params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        out.extend([&self.ln1_g, &self.ln1_b]);
        self.attn.params(out);
        out.extend([&self.ln2_g, &self.ln2_b, &self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b]);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.extend([&mut self.ln1_g, &mut self.ln1_b]);
        self.attn.params_mut(out);
        out.extend([
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]);
    }
}

/// Feature map in, feature map out: patch embedding, one block, global
/// tokens dropped, tokens folded back onto the grid.
pub struct EvitBranch<F: Float> {
    pub spec: EvitBlockSpec,
    pub embed: PatchEmbed<F>,
    pub block: EvitBlock<F>,
}

impl<F: Float> EvitBranch<F> {
    pub fn new(prefix: &str, init: &mut Init, spec: &EvitBlockSpec) -> Result<Self> {
        spec.validate()?;
        let embed = PatchEmbed::new(
            &format!("{prefix}.embed"),
            init,
            spec.patch,
            spec.in_channels,
            spec.grid_h,
            spec.grid_w,
            spec.dim,
            spec.attn.effective_globals(),
        );
        let block = EvitBlock::new(&format!("{prefix}.block"), init, spec)?;
        Ok(Self {
            spec: spec.clone(),
            embed,
            block,
        })
    }

    /// `N x C x H x W -> N x dim x (H/p) x (W/p)`.
    pub fn forward(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let tokens = self.embed.forward(tape, x)?;
        let (t, _) = self.block.forward(tape, tokens)?;
        let g = self.embed.global_tokens();
        let t = if g > 0 {
            tape.narrow(t, 1, g, self.spec.tokens())?
        } else {
            t
        };
        let map = tokens_to_map(tape, t, self.spec.grid_h, self.spec.grid_w)?;
        if tape.shape(map)[1] != self.spec.dim {
            return Err(Error::Contract("branch output channels differ from dim".into()));
        }
        Ok(map)
    }
}

impl<F: Float> Module<F> for EvitBranch<F> {
    fn params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.embed.params(out);
        self.block.params(out);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.embed.params_mut(out);
        self.block.params_mut(out);
    }
}
