use std::sync::Arc;

use crate::autograd::{Module, Param, Tape, Var};
use crate::error::{Error, Result};
use crate::init::{self, Init, TRANSFORMER_STD};
use crate::tensor::{score_scope, Float, Tensor};

use super::config::{AttentionConfig, Mechanism};
use super::longformer::NeighborPattern;

/// Attention weights captured from one forward pass.
#[derive(Clone, Debug)]
pub enum AttnProbs<F: Float> {
    /// `B x H x n x m`, with `m = n` (full) or `m = k` (Linformer).
    Dense(Tensor<F>),
    /// `B x H x nnz` over the neighbor lists of `pattern`.
    Sparse {
        probs: Tensor<F>,
        pattern: Arc<NeighborPattern>,
    },
}

impl<F: Float> AttnProbs<F> {
    /// Score-buffer elements for one forward pass.
    pub fn numel(&self) -> usize {
        match self {
            AttnProbs::Dense(t) => t.numel(),
            AttnProbs::Sparse { probs, .. } => probs.numel(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AttnProbs::Dense(t) => t.shape(),
            AttnProbs::Sparse { probs, .. } => probs.shape(),
        }
    }

    /// `B x H x n x n` weights over sequence positions. Linformer weights
    /// live over projected positions and cannot be expanded.
    pub fn to_dense(&self) -> Result<Tensor<F>> {
        match self {
            AttnProbs::Dense(t) if t.shape()[2] == t.shape()[3] => Ok(t.clone()),
            AttnProbs::Dense(t) => Err(Error::Contract(format!(
                "weights of shape {:?} are over projected keys",
                t.shape()
            ))),
            AttnProbs::Sparse { probs, pattern } => {
                let s = probs.shape();
                let dense = pattern.densify(probs);
                dense.reshape(&[s[0], s[1], pattern.len(), pattern.len()])
            }
        }
    }
}

/// Multi-head self-attention over a fixed-length sequence.
pub struct Mhsa<F: Float> {
    pub cfg: AttentionConfig,
    pub seq_len: usize,
    pub wq: Param<F>,
    pub bq: Param<F>,
    pub wk: Param<F>,
    pub bk: Param<F>,
    pub wv: Param<F>,
    pub bv: Param<F>,
    pub wo: Param<F>,
    pub bo: Param<F>,
    /// Linformer key/value projections, `k x seq_len`.
    pub e_k: Option<Param<F>>,
    pub e_v: Option<Param<F>>,
    pattern: Option<Arc<NeighborPattern>>,
}

impl<F: Float> Mhsa<F> {
    /// `grid` is the spatial token grid; global tokens (Longformer only)
    /// are taken from `cfg`.
    pub fn new(prefix: &str, init: &mut Init, cfg: &AttentionConfig, grid: (usize, usize)) -> Result<Self> {
        let tokens = grid.0 * grid.1;
        cfg.validate(tokens)?;
        let d = cfg.dim();
        let seq_len = tokens + cfg.effective_globals();
        let mut lin = |name: &str| {
            (
                init.normal(format!("{prefix}.{name}.weight"), &[d, d], TRANSFORMER_STD),
                init::zeros(format!("{prefix}.{name}.bias"), &[d]),
            )
        };
        let (wq, bq) = lin("q");
        let (wk, bk) = lin("k");
        let (wv, bv) = lin("v");
        let (wo, bo) = lin("out");
        let (mut e_k, mut e_v, mut pattern) = (None, None, None);
        match cfg.mechanism {
            Mechanism::Full => {}
            Mechanism::Linformer => {
                let std = (1.0 / cfg.k_rank as f64).sqrt();
                e_k = Some(init.normal(format!("{prefix}.e_k"), &[cfg.k_rank, seq_len], std));
                e_v = Some(init.normal(format!("{prefix}.e_v"), &[cfg.k_rank, seq_len], std));
            }
            Mechanism::Longformer2D => {
                pattern = Some(Arc::new(NeighborPattern::longformer2d(
                    grid.0,
                    grid.1,
                    cfg.window,
                    cfg.effective_globals(),
                )?));
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            seq_len,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            e_k,
            e_v,
            pattern,
        })
    }

    pub fn pattern(&self) -> Option<&Arc<NeighborPattern>> {
        self.pattern.as_ref()
    }

    fn split_heads(&self, tape: &mut Tape<F>, x: Var, b: usize) -> Result<Var> {
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim);
        let t = tape.reshape(x, &[b, self.seq_len, h, dh])?;
        let t = tape.permute(t, &[0, 2, 1, 3])?;
        tape.reshape(t, &[b * h, self.seq_len, dh])
    }

    /// `B x L x d -> B x L x d`, with the attention weights of the pass.
    pub fn forward(&self, tape: &mut Tape<F>, x: Var) -> Result<(Var, AttnProbs<F>)> {
        let sx = tape.shape(x).to_vec();
        let d = self.cfg.dim();
        let &[b, l, dx] = sx.as_slice() else {
            return Err(Error::dim("mhsa", &sx, &[self.seq_len, d]));
        };
        if l != self.seq_len || dx != d {
            return Err(Error::dim("mhsa", &sx, &[self.seq_len, d]));
        }
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim);
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let proj = |tape: &mut Tape<F>, w: &Param<F>, bias: &Param<F>| -> Result<Var> {
            let (w, bias) = (tape.param(w), tape.param(bias));
            let y = tape.linear(x, w, Some(bias))?;
            self.split_heads(tape, y, b)
        };
        let q = proj(tape, &self.wq, &self.bq)?;
        let k = proj(tape, &self.wk, &self.bk)?;
        let v = proj(tape, &self.wv, &self.bv)?;

        let (heads_out, probs) = match self.cfg.mechanism {
            Mechanism::Full => {
                let scores = score_scope(|| tape.matmul_nt(q, k, scale))?;
                let p = score_scope(|| tape.softmax(scores, None))?;
                let weights = tape.value(p).reshape(&[b, h, l, l])?;
                (tape.matmul(p, v)?, AttnProbs::Dense(weights))
            }
            Mechanism::Linformer => {
                let (ek, ev) = match (&self.e_k, &self.e_v) {
                    (Some(ek), Some(ev)) => (tape.param(ek), tape.param(ev)),
                    _ => return Err(Error::Contract("linformer projections missing".into())),
                };
                let kp = tape.matmul(ek, k)?;
                let vp = tape.matmul(ev, v)?;
                let scores = score_scope(|| tape.matmul_nt(q, kp, scale))?;
                let p = score_scope(|| tape.softmax(scores, None))?;
                let weights = tape.value(p).reshape(&[b, h, l, self.cfg.k_rank])?;
                (tape.matmul(p, vp)?, AttnProbs::Dense(weights))
            }
            Mechanism::Longformer2D => {
                let pattern = self
                    .pattern
                    .clone()
                    .ok_or_else(|| Error::Contract("longformer pattern missing".into()))?;
                let (out, probs) = tape.sparse_attention(q, k, v, pattern.clone(), scale)?;
                let probs = probs.reshape(&[b, h, pattern.nnz()])?;
                (out, AttnProbs::Sparse { probs, pattern })
            }
        };
        let t = tape.reshape(heads_out, &[b, h, l, dh])?;
        let t = tape.permute(t, &[0, 2, 1, 3])?;
        let t = tape.reshape(t, &[b, l, d])?;
        let (wo, bo) = (tape.param(&self.wo), tape.param(&self.bo));
        Ok((tape.linear(t, wo, Some(bo))?, probs))
    }
}

impl<F: Float> Module<F> for Mhsa<F> {
    fn params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        out.extend([&self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo]);
        out.extend(self.e_k.iter());
        out.extend(self.e_v.iter());
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.extend([
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
        ]);
        out.extend(self.e_k.iter_mut());
        out.extend(self.e_v.iter_mut());
    }
}
