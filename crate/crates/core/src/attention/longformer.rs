use std::sync::Arc;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{score_scope, Float, Tensor};

/// Attention pattern stored as per-query neighbor lists (CSR).
///
/// Sequence layout: global tokens first (`0..globals`), then the spatial
/// grid in row-major order. Spatial tokens see their clipped Chebyshev
/// window plus every global token; global tokens see everything.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborPattern {
    len: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

impl NeighborPattern {
    pub fn longformer2d(grid_h: usize, grid_w: usize, window: usize, globals: usize) -> Result<Self> {
        if window.is_multiple_of(2) {
            return Err(Error::config(format!("sliding window must be odd, got {window}")));
        }
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::config("empty token grid"));
        }
        let radius = (window / 2) as isize;
        let len = globals + grid_h * grid_w;
        let mut offsets = Vec::with_capacity(len + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for _ in 0..globals {
            indices.extend(0..len as u32);
            offsets.push(indices.len());
        }
        for r in 0..grid_h as isize {
            for c in 0..grid_w as isize {
                indices.extend(0..globals as u32);
                for rr in (r - radius).max(0)..=(r + radius).min(grid_h as isize - 1) {
                    for cc in (c - radius).max(0)..=(c + radius).min(grid_w as isize - 1) {
                        indices.push((globals + rr as usize * grid_w + cc as usize) as u32);
                    }
                }
                offsets.push(indices.len());
            }
        }
        Ok(Self { len, offsets, indices })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Stored scores per (batch, head): the O(n * w^2) footprint.
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn neighbors(&self, query: usize) -> impl Iterator<Item = usize> + '_ {
        self.indices[self.offsets[query]..self.offsets[query + 1]]
            .iter()
            .map(|&j| j as usize)
    }

    pub fn degree(&self, query: usize) -> usize {
        self.offsets[query + 1] - self.offsets[query]
    }

    /// Scatter per-query sparse rows (`stacks x nnz`) into dense
    /// `stacks x len x len`, zero off-pattern.
    pub fn densify<F: Float>(&self, sparse: &Tensor<F>) -> Tensor<F> {
        let stacks = sparse.numel() / self.nnz().max(1);
        let mut dense = vec![F::zero(); stacks * self.len * self.len];
        for s in 0..stacks {
            let src = &sparse.data()[s * self.nnz()..(s + 1) * self.nnz()];
            for i in 0..self.len {
                for p in self.offsets[i]..self.offsets[i + 1] {
                    dense[(s * self.len + i) * self.len + self.indices[p] as usize] = src[p];
                }
            }
        }
        Tensor::new_unchecked(vec![stacks, self.len, self.len], dense)
    }

    /// Additive mask (0 on-pattern, -inf elsewhere) for the dense reference path.
    pub fn additive_mask<F: Float>(&self) -> Tensor<F> {
        let mut m = vec![F::neg_infinity(); self.len * self.len];
        for i in 0..self.len {
            for j in self.neighbors(i) {
                m[i * self.len + j] = F::zero();
            }
        }
        Tensor::new_unchecked(vec![self.len, self.len], m)
    }
}

fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

impl<F: Float> Tape<F> {
    /// Attention restricted to `pattern`, for stacks `q, k, v: S x L x dh`.
    /// Scores are held per neighbor list only; returns the output and the
    /// attention weights (`S x nnz`).
    pub fn sparse_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        pattern: Arc<NeighborPattern>,
        scale: F,
    ) -> Result<(Var, Tensor<F>)> {
        let sq = self.shape(q).to_vec();
        let &[stacks, len, dh] = sq.as_slice() else {
            return Err(Error::dim("sparse_attention", &sq, self.shape(k)));
        };
        if self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(Error::dim("sparse_attention", &sq, self.shape(k)));
        }
        if pattern.len() != len {
            return Err(Error::dim("sparse_attention pattern", &sq, &[pattern.len()]));
        }
        let (tq, tk, tv) = (self.value(q).clone(), self.value(k).clone(), self.value(v).clone());
        let nnz = pattern.nnz();
        let mut probs = vec![F::zero(); stacks * nnz];
        let mut out = vec![F::zero(); stacks * len * dh];
        for s in 0..stacks {
            let base = s * len * dh;
            let (qs, ks, vs) = (&tq.data()[base..], &tk.data()[base..], &tv.data()[base..]);
            let ps = &mut probs[s * nnz..(s + 1) * nnz];
            for i in 0..len {
                let qi = &qs[i * dh..(i + 1) * dh];
                let (lo, hi) = (pattern.offsets[i], pattern.offsets[i + 1]);
                let row = &mut ps[lo..hi];
                for (p, &j) in row.iter_mut().zip(&pattern.indices[lo..hi]) {
                    let j = j as usize;
                    *p = scale * dot(qi, &ks[j * dh..(j + 1) * dh]);
                }
                crate::autograd::softmax_rows(row, hi - lo)?;
                let oi = &mut out[base + i * dh..base + (i + 1) * dh];
                for (&p, &j) in row.iter().zip(&pattern.indices[lo..hi]) {
                    let j = j as usize;
                    for (o, &vv) in oi.iter_mut().zip(&vs[j * dh..(j + 1) * dh]) {
                        *o += p * vv;
                    }
                }
            }
        }
        let probs = score_scope(|| Tensor::new_unchecked(vec![stacks, nnz], probs));
        let saved = probs.clone();
        let out = Tensor::new_unchecked(sq.clone(), out);
        let var = self.push(out, &[q, k, v], move |g, _| {
            let gd = g.data();
            let mut dq = vec![F::zero(); stacks * len * dh];
            let mut dk = vec![F::zero(); stacks * len * dh];
            let mut dv = vec![F::zero(); stacks * len * dh];
            let mut ds = Vec::new();
            for s in 0..stacks {
                let base = s * len * dh;
                let (qs, ks, vs) = (&tq.data()[base..], &tk.data()[base..], &tv.data()[base..]);
                let ps = &saved.data()[s * nnz..(s + 1) * nnz];
                for i in 0..len {
                    let (lo, hi) = (pattern.offsets[i], pattern.offsets[i + 1]);
                    let gi = &gd[base + i * dh..base + (i + 1) * dh];
                    let row = &ps[lo..hi];
                    let idx = &pattern.indices[lo..hi];
                    ds.clear();
                    let mut weighted = F::zero();
                    for (&p, &j) in row.iter().zip(idx) {
                        let j = j as usize;
                        let dp = dot(gi, &vs[j * dh..(j + 1) * dh]);
                        weighted += p * dp;
                        ds.push(dp);
                        for (d, &gv) in dv[base + j * dh..base + (j + 1) * dh].iter_mut().zip(gi) {
                            *d += p * gv;
                        }
                    }
                    let qi = &qs[i * dh..(i + 1) * dh];
                    for ((&p, &j), dp) in row.iter().zip(idx).zip(ds.iter()) {
                        let j = j as usize;
                        let dscore = p * (*dp - weighted) * scale;
                        for (d, &kv) in dq[base + i * dh..base + (i + 1) * dh].iter_mut().zip(&ks[j * dh..(j + 1) * dh]) {
                            *d += dscore * kv;
                        }
                        for (d, &qv) in dk[base + j * dh..base + (j + 1) * dh].iter_mut().zip(qi) {
                            *d += dscore * qv;
                        }
                    }
                }
            }
            Ok(vec![
                Some(Tensor::new_unchecked(sq.clone(), dq)),
                Some(Tensor::new_unchecked(sq.clone(), dk)),
                Some(Tensor::new_unchecked(sq.clone(), dv)),
            ])
        });
        Ok((var, probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_by_four_window_three_degrees() {
        let p = NeighborPattern::longformer2d(4, 4, 3, 0).unwrap();
        assert_eq!(p.degree(0), 4);
        assert_eq!(p.degree(1), 6);
        assert_eq!(p.degree(5), 9);
        assert_eq!(p.degree(15), 4);
    }

    #[test]
    fn globals_attend_everything_and_are_seen_by_all() {
        let p = NeighborPattern::longformer2d(3, 3, 1, 2).unwrap();
        assert_eq!(p.len(), 11);
        assert_eq!(p.degree(0), 11);
        for q in 2..11 {
            let n: Vec<usize> = p.neighbors(q).collect();
            assert_eq!(n, vec![0, 1, q]);
        }
    }

    #[test]
    fn even_window_rejected() {
        assert!(matches!(NeighborPattern::longformer2d(4, 4, 2, 0), Err(Error::Config(_))));
    }
}
