use crate::error::{Error, Result};
use crate::tensor::{numel, Float, Tensor};

use super::tape::{Tape, Var};

/// Copy `data` (row-major `shape`) into the axis order `axes`.
pub fn permute_data<F: Float>(data: &[F], shape: &[usize], axes: &[usize]) -> (Vec<F>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = numel(shape);
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out, out_shape);
    }
    // Innermost run is contiguous when the last axis stays last.
    let run = if rank > 0 && axes[rank - 1] == rank - 1 { out_shape[rank - 1] } else { 1 };
    let outer_rank = if run > 1 { rank - 1 } else { rank };
    let mut idx = vec![0usize; outer_rank];
    let mut off = 0usize;
    for _ in 0..total / run {
        out.extend_from_slice(&data[off..off + run]);
        let mut d = outer_rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl<F: Float> Tape<F> {
    /// Zero-copy reshape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, &[x], move |g, _| Ok(vec![Some(g.reshape(&sx)?)])))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if axes.len() != sx.len() || axes.iter().any(|&a| a >= sx.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", &sx, axes));
        }
        let (data, shape) = permute_data(self.value(x).data(), &sx, axes);
        let out = Tensor::new_unchecked(shape.clone(), data);
        let inv = inverse_axes(axes);
        Ok(self.push(out, &[x], move |g, _| {
            let (d, s) = permute_data(g.data(), &shape, &inv);
            Ok(vec![Some(Tensor::new_unchecked(s, d))])
        }))
    }

    /// Join along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut extents = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &first, s));
            }
            extents.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_axis: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for (&v, &e) in xs.iter().zip(&extents) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let out = Tensor::new_unchecked(shape, data);
        Ok(self.push(out, xs, move |g, needs| {
            let gd = g.data();
            let mut grads = Vec::with_capacity(extents.len());
            let mut start = 0;
            for (i, &e) in extents.iter().enumerate() {
                if needs[i] {
                    let mut d = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let base = (o * total_axis + start) * inner;
                        d.extend_from_slice(&gd[base..base + e * inner]);
                    }
                    let mut s = first.clone();
                    s[axis] = e;
                    grads.push(Some(Tensor::new_unchecked(s, d)));
                } else {
                    grads.push(None);
                }
                start += e;
            }
            Ok(grads)
        }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] {
            return Err(Error::dim("narrow", &sx, &[axis, start, len]));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let ext = sx[axis];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sx.clone();
        shape[axis] = len;
        let out = Tensor::new_unchecked(shape, data);
        Ok(self.push(out, &[x], move |g, _| {
            let mut d = vec![F::zero(); numel(&sx)];
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                d[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            Ok(vec![Some(Tensor::new_unchecked(sx.clone(), d))])
        }))
    }

    /// `N x C x H x W -> N x C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let &[n, c, h, w] = sx.as_slice() else {
            return Err(Error::dim("global_avg_pool", &sx, &[]));
        };
        let hw = h * w;
        let inv = F::one() / F::of(hw as f64);
        let data: Vec<F> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<F>() * inv)
            .collect();
        let out = Tensor::new_unchecked(vec![n, c], data);
        Ok(self.push(out, &[x], move |g, _| {
            let mut d = Vec::with_capacity(n * c * hw);
            for &v in g.data() {
                d.extend(std::iter::repeat_n(v * inv, hw));
            }
            Ok(vec![Some(Tensor::new_unchecked(sx.clone(), d))])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let (out, s) = permute_data(&data, &shape, &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(out[(a * 2 + b) * 3 + c], data[(b * 3 + c) * 4 + a]);
                }
            }
        }
        let (back, s2) = permute_data(&out, &s, &inverse_axes(&[2, 0, 1]));
        assert_eq!(s2, shape.to_vec());
        assert_eq!(back, data);
    }

    #[test]
    fn narrow_and_concat_invert() {
        let mut tape = Tape::<f64>::inference();
        let data: Vec<f64> = (0..2 * 5 * 3).map(|i| i as f64).collect();
        let x = tape.constant(Tensor::from_vec(&[2, 5, 3], data.clone()).unwrap());
        let a = tape.narrow(x, 1, 0, 2).unwrap();
        let b = tape.narrow(x, 1, 2, 3).unwrap();
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }
}
