use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

use super::tape::{Tape, Var};

fn gelu_cdf<F: Float>(x: F) -> F {
    F::of(0.5) * (F::one() + (x * F::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_pdf<F: Float>(x: F) -> F {
    F::of(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (-(x * x) * F::of(0.5)).exp()
}

impl<F: Float> Tape<F> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, &[a, b], |g, _| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let out = ta.zip_map(&tb, |x, y| x * y)?;
        Ok(self.push(out, &[a, b], move |g, needs| {
            let ga = if needs[0] { Some(g.zip_map(&tb, |g, y| g * y)?) } else { None };
            let gb = if needs[1] { Some(g.zip_map(&ta, |g, x| g * x)?) } else { None };
            Ok(vec![ga, gb])
        }))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, &[a], move |g, _| Ok(vec![Some(g.map(|g| g * c))]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        if self.kink_signature().is_some() {
            let active: Vec<bool> = out.data().iter().map(|&y| y > F::zero()).collect();
            self.record_kinks(active.into_iter());
        }
        let saved = out.clone();
        self.push(out, &[a], move |g, _| {
            Ok(vec![Some(g.zip_map(&saved, |g, y| if y > F::zero() { g } else { F::zero() })?)])
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a).clone();
        let out = x.map(|x| x * gelu_cdf(x));
        self.push(out, &[a], move |g, _| {
            Ok(vec![Some(g.zip_map(&x, |g, x| g * (gelu_cdf(x) + x * gelu_pdf(x)))?)])
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], move |g, _| Ok(vec![Some(Tensor::full(&shape, g.item()))]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let n = F::of(self.value(a).numel() as f64);
        let out = Tensor::scalar(self.value(a).sum() / n);
        self.push(out, &[a], move |g, _| Ok(vec![Some(Tensor::full(&shape, g.item() / n))]))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s; `b` repeats
    /// over the leading axes.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(Error::dim("add_broadcast", &sa, &sb));
        }
        let inner = self.value(b).numel();
        let tb = self.value(b).clone();
        let mut data = self.value(a).to_vec();
        for chunk in data.chunks_mut(inner.max(1)) {
            for (x, &y) in chunk.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let out = Tensor::new_unchecked(sa, data);
        Ok(self.push(out, &[a, b], move |g, needs| {
            let gb = if needs[1] {
                let mut acc = vec![F::zero(); inner];
                for chunk in g.data().chunks(inner.max(1)) {
                    for (s, &v) in acc.iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
                Some(Tensor::new_unchecked(sb.clone(), acc))
            } else {
                None
            };
            Ok(vec![Some(g.clone()), gb])
        }))
    }

    /// Repeat `a` along a new leading axis of extent `batch`.
    pub fn expand_batch(&mut self, a: Var, batch: usize) -> Var {
        let inner_shape = self.shape(a).to_vec();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(src.len() * batch);
        for _ in 0..batch {
            data.extend_from_slice(src);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&inner_shape);
        let out = Tensor::new_unchecked(shape, data);
        self.push(out, &[a], move |g, _| {
            let inner = crate::tensor::numel(&inner_shape);
            let mut acc = vec![F::zero(); inner];
            for chunk in g.data().chunks(inner.max(1)) {
                for (s, &v) in acc.iter_mut().zip(chunk) {
                    *s += v;
                }
            }
            Ok(vec![Some(Tensor::new_unchecked(inner_shape.clone(), acc))])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_unit_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gives_twice_input() {
        let vals = vec![1.5, -2.0, 0.25, 4.0];
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[4], vals.clone()).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        let expect: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.wrt(x).unwrap().data(), expect.as_slice());
    }

    #[test]
    fn add_broadcast_rejects_non_suffix() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add_broadcast(a, b).is_err());
    }

    #[test]
    fn gelu_matches_reference_points() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::from_vec(&[3], vec![0.0, 1.0, -1.0]).unwrap());
        let y = tape.gelu(x);
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((v[2] + 0.158_655_253_931_457_05).abs() < 1e-12);
    }
}
