use crate::autograd::{Module, Param, Tape, Var};
use crate::error::{Error, Result};
use crate::init::{self, Init, TRANSFORMER_STD};
use crate::tensor::Float;

/// Non-overlapping `patch x patch` tokenizer with a learned absolute
/// position table and optional leading global tokens.
pub struct PatchEmbed<F: Float> {
    pub patch: usize,
    pub in_channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub proj_w: Param<F>,
    pub proj_b: Param<F>,
    pub pos: Param<F>,
    pub globals: Option<Param<F>>,
}

impl<F: Float> PatchEmbed<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prefix: &str,
        init: &mut Init,
        patch: usize,
        in_channels: usize,
        grid_h: usize,
        grid_w: usize,
        dim: usize,
        global_tokens: usize,
    ) -> Self {
        let fan_in = in_channels * patch * patch;
        let proj_w = init.normal(format!("{prefix}.proj.weight"), &[dim, fan_in], TRANSFORMER_STD);
        let proj_b = init::zeros(format!("{prefix}.proj.bias"), &[dim]);
        let globals = (global_tokens > 0)
            .then(|| init.normal(format!("{prefix}.globals"), &[global_tokens, dim], TRANSFORMER_STD));
        let pos = init.normal(
            format!("{prefix}.pos"),
            &[global_tokens + grid_h * grid_w, dim],
            TRANSFORMER_STD,
        );
        Self {
            patch,
            in_channels,
            grid_h,
            grid_w,
            dim,
            proj_w,
            proj_b,
            pos,
            globals,
        }
    }

    pub fn global_tokens(&self) -> usize {
        self.globals.as_ref().map_or(0, |g| g.shape()[0])
    }

    /// `N x C x H x W -> N x (g + n) x dim`.
    pub fn forward(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let sx = tape.shape(x).to_vec();
        let &[n, c, h, w] = sx.as_slice() else {
            return Err(Error::dim("patch_embed", &sx, &[]));
        };
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::config(format!("{h}x{w} input is not divisible into {p}x{p} patches")));
        }
        if c != self.in_channels || h / p != self.grid_h || w / p != self.grid_w {
            return Err(Error::dim(
                "patch_embed",
                &sx,
                &[self.in_channels, self.grid_h * p, self.grid_w * p],
            ));
        }
        let (gh, gw) = (h / p, w / p);
        let blocks = tape.reshape(x, &[n, c, gh, p, gw, p])?;
        let blocks = tape.permute(blocks, &[0, 2, 4, 1, 3, 5])?;
        let flat = tape.reshape(blocks, &[n, gh * gw, c * p * p])?;
        let (pw, pb) = (tape.param(&self.proj_w), tape.param(&self.proj_b));
        let mut tokens = tape.linear(flat, pw, Some(pb))?;
        if let Some(g) = &self.globals {
            let g = tape.param(g);
            let g = tape.expand_batch(g, n);
            tokens = tape.concat(&[g, tokens], 1)?;
        }
        let pos = tape.param(&self.pos);
        tape.add_broadcast(tokens, pos)
    }
}

impl<F: Float> Module<F> for PatchEmbed<F> {
    fn params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        out.push(&self.proj_w);
        out.push(&self.proj_b);
        if let Some(g) = &self.globals {
            out.push(g);
        }
        out.push(&self.pos);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.push(&mut self.proj_w);
        out.push(&mut self.proj_b);
        if let Some(g) = &mut self.globals {
            out.push(g);
        }
        out.push(&mut self.pos);
    }
}

/// `B x n x d -> B x d x gh x gw`, row-major over the grid.
pub fn tokens_to_map<F: Float>(tape: &mut Tape<F>, tokens: Var, grid_h: usize, grid_w: usize) -> Result<Var> {
    let st = tape.shape(tokens).to_vec();
    let &[b, n, d] = st.as_slice() else {
        return Err(Error::dim("tokens_to_map", &st, &[grid_h, grid_w]));
    };
    if n != grid_h * grid_w {
        return Err(Error::dim("tokens_to_map", &st, &[grid_h, grid_w]));
    }
    let t = tape.permute(tokens, &[0, 2, 1])?;
    tape.reshape(t, &[b, d, grid_h, grid_w])
}

/// `B x d x h x w -> B x (h*w) x d`; the 1x1-patch tokenization without projection.
pub fn map_to_tokens<F: Float>(tape: &mut Tape<F>, map: Var) -> Result<Var> {
    let sm = tape.shape(map).to_vec();
    let &[b, d, h, w] = sm.as_slice() else {
        return Err(Error::dim("map_to_tokens", &sm, &[]));
    };
    let t = tape.reshape(map, &[b, d, h * w])?;
    tape.permute(t, &[0, 2, 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut init = Init::new(seed);
        let v = init.standard_normal_vec(crate::tensor::numel(shape));
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn identity_projection_recovers_pixels() {
        let mut e = PatchEmbed::<f64>::new("e", &mut Init::new(0), 1, 3, 4, 5, 4, 0);
        let mut w = vec![0.0; 4 * 3];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        e.proj_w.value = Tensor::from_vec(&[4, 3], w).unwrap();
        e.pos.value = Tensor::zeros(&[20, 4]);
        let x = random(&[2, 3, 4, 5], 1);
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let t = e.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.shape(t), &[2, 20, 4]);
        let td = tape.value(t).data();
        for b in 0..2 {
            for i in 0..4 {
                for j in 0..5 {
                    for ch in 0..3 {
                        let tok = td[(b * 20 + i * 5 + j) * 4 + ch];
                        assert_eq!(tok, x.data()[((b * 3 + ch) * 4 + i) * 5 + j]);
                    }
                    assert_eq!(td[(b * 20 + i * 5 + j) * 4 + 3], 0.0);
                }
            }
        }
    }

    #[test]
    fn patch_two_matches_gather_oracle() {
        let (c, h, w, dim) = (2, 4, 6, 5);
        let e = PatchEmbed::<f64>::new("e", &mut Init::new(3), 2, c, 2, 3, dim, 0);
        let x = random(&[1, c, h, w], 4);
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let t = e.forward(&mut tape, xv).unwrap();
        let td = tape.value(t).data();
        let (pw, pos) = (e.proj_w.value.data(), e.pos.value.data());
        for gr in 0..2 {
            for gc in 0..3 {
                let mut block = Vec::new();
                for ch in 0..c {
                    for dr in 0..2 {
                        for dc in 0..2 {
                            block.push(x.data()[(ch * h + gr * 2 + dr) * w + gc * 2 + dc]);
                        }
                    }
                }
                let tok = gr * 3 + gc;
                for o in 0..dim {
                    let want: f64 = (0..block.len()).map(|i| pw[o * block.len() + i] * block[i]).sum::<f64>()
                        + pos[tok * dim + o];
                    assert!((td[tok * dim + o] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn odd_extent_with_patch_two_is_config_error() {
        let e = PatchEmbed::<f32>::new("e", &mut Init::new(0), 2, 1, 2, 2, 4, 0);
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros(&[1, 1, 5, 4]));
        assert!(matches!(e.forward(&mut tape, x), Err(Error::Config(_))));
    }

    #[test]
    fn map_token_round_trip_and_ordering() {
        let x = random(&[2, 3, 4, 5], 9);
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let t = map_to_tokens(&mut tape, xv).unwrap();
        let back = tokens_to_map(&mut tape, t, 4, 5).unwrap();
        assert!(tape.value(back).bit_eq(&x));

        let mut tokens = vec![0.0f64; 20];
        tokens[5] = 1.0;
        let tv = tape.constant(Tensor::from_vec(&[1, 20, 1], tokens).unwrap());
        let m = tokens_to_map(&mut tape, tv, 4, 5).unwrap();
        assert_eq!(tape.value(m).data()[5], 1.0);
        assert!(tokens_to_map(&mut tape, tv, 3, 5).is_err());
    }
}
