use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

use super::tape::{Tape, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Running mean / variance of a batch-norm layer. Behind a mutex so a model
/// can be shared by reference while training-mode forwards update it.
#[derive(Debug)]
pub struct BatchNormStats {
    inner: Mutex<(Vec<f64>, Vec<f64>)>,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        Self {
            inner: Mutex::new((vec![0.0; channels], vec![1.0; channels])),
        }
    }

    pub fn from_parts(mean: Vec<f64>, var: Vec<f64>) -> Self {
        Self {
            inner: Mutex::new((mean, var)),
        }
    }

    pub fn channels(&self) -> usize {
        self.snapshot().0.len()
    }

    pub fn snapshot(&self) -> (Vec<f64>, Vec<f64>) {
        self.inner.lock().expect("batch-norm stats poisoned").clone()
    }

    pub fn set(&self, mean: Vec<f64>, var: Vec<f64>) {
        *self.inner.lock().expect("batch-norm stats poisoned") = (mean, var);
    }
}

impl Clone for BatchNormStats {
    fn clone(&self) -> Self {
        let (m, v) = self.snapshot();
        Self::from_parts(m, v)
    }
}

impl PartialEq for BatchNormStats {
    fn eq(&self, other: &Self) -> bool {
        self.snapshot() == other.snapshot()
    }
}

impl<F: Float> Tape<F> {
    /// Per-channel normalization of `N x C x H x W`. Training mode uses batch
    /// statistics (biased variance) and folds them into `stats` with momentum
    /// 0.1 (unbiased variance); eval mode reads `stats`.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &BatchNormStats,
        training: bool,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let &[n, c, h, w] = sx.as_slice() else {
            return Err(Error::dim("batch_norm2d", &sx, self.shape(gamma)));
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.channels() != c {
            return Err(Error::dim("batch_norm2d", &sx, self.shape(gamma)));
        }
        let hw = h * w;
        let m = n * hw;
        let tx = self.value(x).clone();
        let xd = tx.data();
        let (mean, rstd) = if training {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for s in 0..n {
                for ch in 0..c {
                    let plane = &xd[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    mean[ch] += plane.iter().map(|v| v.f64()).sum::<f64>();
                }
            }
            for v in &mut mean {
                *v /= m as f64;
            }
            for s in 0..n {
                for ch in 0..c {
                    let plane = &xd[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    let mu = mean[ch];
                    var[ch] += plane.iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>();
                }
            }
            for v in &mut var {
                *v /= m as f64;
            }
            {
                let mut guard = stats.inner.lock().expect("batch-norm stats poisoned");
                let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
                for ch in 0..c {
                    guard.0[ch] = (1.0 - BN_MOMENTUM) * guard.0[ch] + BN_MOMENTUM * mean[ch];
                    guard.1[ch] = (1.0 - BN_MOMENTUM) * guard.1[ch] + BN_MOMENTUM * var[ch] * unbias;
                }
            }
            let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            (mean, rstd)
        } else {
            let (rm, rv) = stats.snapshot();
            (rm, rv.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect())
        };
        let (tg, tb) = (self.value(gamma).clone(), self.value(beta).clone());
        let mut out = vec![F::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                let (mu, rs) = (mean[ch], rstd[ch]);
                let (ga, be) = (tg.data()[ch].f64(), tb.data()[ch].f64());
                for (o, &v) in out[off..off + hw].iter_mut().zip(&xd[off..off + hw]) {
                    *o = F::of((v.f64() - mu) * rs * ga + be);
                }
            }
        }
        let out = Tensor::new_unchecked(sx.clone(), out);
        Ok(self.push(out, &[x, gamma, beta], move |g, needs| {
            let gd = g.data();
            let xd = tx.data();
            let mut sum_dy = vec![0.0f64; c];
            let mut sum_dy_xhat = vec![0.0f64; c];
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * hw;
                    let (mu, rs) = (mean[ch], rstd[ch]);
                    for (&dy, &v) in gd[off..off + hw].iter().zip(&xd[off..off + hw]) {
                        let dy = dy.f64();
                        sum_dy[ch] += dy;
                        sum_dy_xhat[ch] += dy * (v.f64() - mu) * rs;
                    }
                }
            }
            let gx = if needs[0] {
                let mut dx = vec![F::zero(); xd.len()];
                let mf = m as f64;
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        let (mu, rs) = (mean[ch], rstd[ch]);
                        let ga = tg.data()[ch].f64();
                        for ((d, &dy), &v) in dx[off..off + hw].iter_mut().zip(&gd[off..off + hw]).zip(&xd[off..off + hw]) {
                            let dy = dy.f64();
                            *d = F::of(if training {
                                let xhat = (v.f64() - mu) * rs;
                                ga * rs / mf * (mf * dy - sum_dy[ch] - xhat * sum_dy_xhat[ch])
                            } else {
                                dy * ga * rs
                            });
                        }
                    }
                }
                Some(Tensor::new_unchecked(sx.clone(), dx))
            } else {
                None
            };
            let gg = needs[1].then(|| Tensor::new_unchecked(vec![c], sum_dy_xhat.iter().map(|&v| F::of(v)).collect()));
            let gb = needs[2].then(|| Tensor::new_unchecked(vec![c], sum_dy.iter().map(|&v| F::of(v)).collect()));
            Ok(vec![gx, gg, gb])
        }))
    }

    /// Normalize over the last axis, then `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::dim("layer_norm", &sx, self.shape(gamma)))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", &sx, self.shape(gamma)));
        }
        let tx = self.value(x).clone();
        let rows = tx.numel() / d.max(1);
        let (tg, tb) = (self.value(gamma).clone(), self.value(beta).clone());
        let mut mean = vec![0.0f64; rows];
        let mut rstd = vec![0.0f64; rows];
        let mut out = vec![F::zero(); tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mu = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            for (j, o) in out[r * d..(r + 1) * d].iter_mut().enumerate() {
                let xhat = (row[j].f64() - mu) * rs;
                *o = F::of(xhat * tg.data()[j].f64() + tb.data()[j].f64());
            }
        }
        let out = Tensor::new_unchecked(sx.clone(), out);
        Ok(self.push(out, &[x, gamma, beta], move |g, needs| {
            let gd = g.data();
            let mut dx = if needs[0] { vec![F::zero(); tx.numel()] } else { Vec::new() };
            let mut dg = vec![0.0f64; d];
            let mut db = vec![0.0f64; d];
            let mut dxhat = vec![0.0f64; d];
            let mut xhat = vec![0.0f64; d];
            for r in 0..rows {
                let row = &tx.data()[r * d..(r + 1) * d];
                let grow = &gd[r * d..(r + 1) * d];
                let (mu, rs) = (mean[r], rstd[r]);
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for j in 0..d {
                    xhat[j] = (row[j].f64() - mu) * rs;
                    let dy = grow[j].f64();
                    dg[j] += dy * xhat[j];
                    db[j] += dy;
                    dxhat[j] = dy * tg.data()[j].f64();
                    mean_dxhat += dxhat[j];
                    mean_dxhat_xhat += dxhat[j] * xhat[j];
                }
                if needs[0] {
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = F::of(rs * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat));
                    }
                }
            }
            let gx = needs[0].then(|| Tensor::new_unchecked(sx.clone(), dx));
            let gg = needs[1].then(|| Tensor::new_unchecked(vec![d], dg.iter().map(|&v| F::of(v)).collect()));
            let gb = needs[2].then(|| Tensor::new_unchecked(vec![d], db.iter().map(|&v| F::of(v)).collect()));
            Ok(vec![gx, gg, gb])
        }))
    }
}
