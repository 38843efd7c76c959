use crate::error::{Error, Result};
use crate::tensor::{gemm, Float, Tensor};

use super::tape::{Tape, Var};

/// Batched GEMM over contiguous stacks. A side flagged `*_bcast` holds a
/// single matrix reused for every batch entry; a broadcast output is summed
/// over the batch.
#[allow(clippy::too_many_arguments)]
pub fn bmm<F: Float>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    a_bcast: bool,
    trans_a: bool,
    b: &[F],
    b_bcast: bool,
    trans_b: bool,
    c: &mut [F],
    c_bcast: bool,
) {
    for i in 0..batch {
        let ao = if a_bcast { 0 } else { i * m * k };
        let bo = if b_bcast { 0 } else { i * k * n };
        let co = if c_bcast { 0 } else { i * m * n };
        let beta = if c_bcast && i > 0 { F::one() } else { F::zero() };
        gemm(
            m,
            k,
            n,
            alpha,
            &a[ao..ao + m * k],
            trans_a,
            &b[bo..bo + k * n],
            trans_b,
            beta,
            &mut c[co..co + m * n],
        );
    }
}

/// (batch, rows, cols) view of a rank-2 or rank-3 shape.
fn as_batched(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [r, c] => Some((1, r, c)),
        [b, r, c] => Some((b, r, c)),
        _ => None,
    }
}

fn broadcast_batch(op: &'static str, sa: &[usize], sb: &[usize], ba: usize, bb: usize) -> Result<usize> {
    if ba == bb || ba == 1 || bb == 1 {
        Ok(ba.max(bb))
    } else {
        Err(Error::dim(op, sa, sb))
    }
}

impl<F: Float> Tape<F> {
    /// Batched product `a @ b` for rank-2/3 operands; a batch extent of 1
    /// (or a rank-2 operand) broadcasts.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ((ba, m, k), (bb, k2, n)) = match (as_batched(&sa), as_batched(&sb)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        if k != k2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let batch = broadcast_batch("matmul", &sa, &sb, ba, bb)?;
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let (a_bc, b_bc) = (ba == 1 && batch > 1, bb == 1 && batch > 1);
        let mut out = vec![F::zero(); batch * m * n];
        bmm(batch, m, k, n, F::one(), ta.data(), a_bc, false, tb.data(), b_bc, false, &mut out, false);
        let shape = if sa.len() == 2 && sb.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let out = Tensor::new_unchecked(shape, out);
        Ok(self.push(out, &[a, b], move |g, needs| {
            let ga = if needs[0] {
                // dA = dC @ B^T
                let mut d = vec![F::zero(); ba * m * k];
                bmm(batch, m, n, k, F::one(), g.data(), false, false, tb.data(), b_bc, true, &mut d, a_bc);
                Some(Tensor::new_unchecked(sa.clone(), d))
            } else {
                None
            };
            let gb = if needs[1] {
                // dB = A^T @ dC
                let mut d = vec![F::zero(); bb * k * n];
                bmm(batch, k, m, n, F::one(), ta.data(), a_bc, true, g.data(), false, false, &mut d, b_bc);
                Some(Tensor::new_unchecked(sb.clone(), d))
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    /// `alpha * a @ b^T` for stacks `a: B x m x k`, `b: B x n x k`. The fused
    /// scale keeps attention score computation to a single n x n buffer.
    pub fn matmul_nt(&mut self, a: Var, b: Var, alpha: F) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ((ba, m, k), (bb, n, k2)) = match (as_batched(&sa), as_batched(&sb)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::dim("matmul_nt", &sa, &sb)),
        };
        if k != k2 || ba != bb {
            return Err(Error::dim("matmul_nt", &sa, &sb));
        }
        let batch = ba;
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let mut out = vec![F::zero(); batch * m * n];
        bmm(batch, m, k, n, alpha, ta.data(), false, false, tb.data(), false, true, &mut out, false);
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let out = Tensor::new_unchecked(shape, out);
        Ok(self.push(out, &[a, b], move |g, needs| {
            let ga = if needs[0] {
                // dA = alpha * dC @ B
                let mut d = vec![F::zero(); batch * m * k];
                bmm(batch, m, n, k, alpha, g.data(), false, false, tb.data(), false, false, &mut d, false);
                Some(Tensor::new_unchecked(sa.clone(), d))
            } else {
                None
            };
            let gb = if needs[1] {
                // dB = alpha * dC^T @ A
                let mut d = vec![F::zero(); batch * n * k];
                bmm(batch, n, m, k, alpha, g.data(), false, true, ta.data(), false, false, &mut d, false);
                Some(Tensor::new_unchecked(sb.clone(), d))
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    /// Affine map over the last axis: `x @ w^T + b` with `w: out x in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let in_dim = *sx.last().ok_or_else(|| Error::dim("linear", &sx, &sw))?;
        if sw.len() != 2 || sw[1] != in_dim {
            return Err(Error::dim("linear", &sx, &sw));
        }
        let out_dim = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::dim("linear bias", &sw, self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / in_dim.max(1);
        let (tx, tw) = (self.value(x).clone(), self.value(w).clone());
        let mut out = vec![F::zero(); rows * out_dim];
        gemm(rows, in_dim, out_dim, F::one(), tx.data(), false, tw.data(), true, F::zero(), &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(out_dim) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = out_dim;
        let out = Tensor::new_unchecked(shape, out);
        let inputs: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        Ok(self.push(out, &inputs, move |g, needs| {
            let gd = g.data();
            let gx = if needs[0] {
                let mut d = vec![F::zero(); rows * in_dim];
                gemm(rows, out_dim, in_dim, F::one(), gd, false, tw.data(), false, F::zero(), &mut d);
                Some(Tensor::new_unchecked(sx.clone(), d))
            } else {
                None
            };
            let gw = if needs[1] {
                let mut d = vec![F::zero(); out_dim * in_dim];
                gemm(out_dim, rows, in_dim, F::one(), gd, true, tx.data(), false, F::zero(), &mut d);
                Some(Tensor::new_unchecked(sw.clone(), d))
            } else {
                None
            };
            let mut res = vec![gx, gw];
            if needs.len() == 3 {
                let mut d = vec![F::zero(); out_dim];
                for row in gd.chunks(out_dim) {
                    for (s, &v) in d.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                res.push(Some(Tensor::new_unchecked(vec![out_dim], d)));
            }
            Ok(res)
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_product() {
        let mut tape = Tape::<f64>::inference();
        let a = tape.constant(mat(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(mat(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn identity_and_zero_cases() {
        let mut tape = Tape::<f64>::inference();
        let i = tape.constant(mat(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(mat(&[2, 2], &[0.3, -1.0, 2.5, 7.0]));
        let c = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(c).data(), tape.value(a).data());
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let r = tape.constant(mat(&[3, 4], &[1.0; 12]));
        let c = tape.matmul(z, r).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::inference();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        match tape.matmul(a, b) {
            Err(Error::Dim { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected dim error, got {other:?}"),
        }
        let c = tape.constant(Tensor::zeros(&[3, 2, 3]));
        let d = tape.constant(Tensor::zeros(&[2, 3, 2]));
        assert!(tape.matmul(c, d).is_err());
    }

    #[test]
    fn batch_one_broadcasts() {
        let mut tape = Tape::<f64>::inference();
        let e = tape.constant(mat(&[1, 2], &[0.5, 0.5]));
        let x = tape.constant(mat(&[3, 2, 1], &[1.0, 3.0, 2.0, 4.0, -1.0, 1.0]));
        let y = tape.matmul(e, x).unwrap();
        assert_eq!(tape.shape(y), &[3, 1, 1]);
        assert_eq!(tape.value(y).data(), &[2.0, 3.0, 0.0]);
    }
}
