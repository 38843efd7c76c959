use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

use super::tape::{Tape, Var};

/// Max-subtracted softmax of each `n`-row in place. Rows whose entries are
/// all `-inf` are rejected.
pub(crate) fn softmax_rows<F: Float>(data: &mut [F], n: usize) -> Result<()> {
    for (r, row) in data.chunks_mut(n).enumerate() {
        if row.iter().all(|&v| v == F::neg_infinity()) {
            return Err(Error::FullyMasked { row: r });
        }
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = F::one() / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(())
}

/// `dx = y * (dy - <dy, y>)` per row.
pub(crate) fn softmax_rows_backward<F: Float>(y: &[F], dy: &[F], n: usize) -> Vec<F> {
    let mut dx = vec![F::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    dx
}

impl<F: Float> Tape<F> {
    /// Softmax over the last axis. `mask` is added before normalization and
    /// may match `x` or its trailing two axes; `-inf` entries come out as
    /// exact zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&Tensor<F>>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().ok_or_else(|| Error::Input("softmax of a scalar".into()))?;
        let mut data = self.value(x).to_vec();
        if let Some(mask) = mask {
            let sm = mask.shape();
            let ok = sm == sx.as_slice() || (sm.len() == 2 && sx.len() >= 2 && sm == &sx[sx.len() - 2..]);
            if !ok {
                return Err(Error::dim("softmax mask", &sx, sm));
            }
            for chunk in data.chunks_mut(mask.numel()) {
                for (v, &m) in chunk.iter_mut().zip(mask.data()) {
                    *v += m;
                }
            }
        }
        softmax_rows(&mut data, n)?;
        let out = Tensor::new_unchecked(sx.clone(), data);
        let saved = out.clone();
        Ok(self.push(out, &[x], move |g, _| {
            let dx = softmax_rows_backward(saved.data(), g.data(), n);
            Ok(vec![Some(Tensor::new_unchecked(sx.clone(), dx))])
        }))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        let &[b, classes] = sl.as_slice() else {
            return Err(Error::Input(format!("cross_entropy expects B x classes logits, got {sl:?}")));
        };
        if labels.len() != b {
            return Err(Error::Input(format!("{} labels for a batch of {b}", labels.len())));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Input(format!("label {l} at index {i} is outside [0, {classes})")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![F::zero(); b * classes];
        let mut total = 0.0f64;
        for (r, (row, prow)) in ld.chunks(classes).zip(probs.chunks_mut(classes)).enumerate() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += (lse - row[labels[r]]).f64();
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let out = Tensor::scalar(F::of(total / b as f64));
        let labels = labels.to_vec();
        Ok(self.push(out, &[logits], move |g, _| {
            let scale = g.item() / F::of(b as f64);
            let mut d = probs;
            for (r, row) in d.chunks_mut(classes).enumerate() {
                row[labels[r]] -= F::one();
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            Ok(vec![Some(Tensor::new_unchecked(sl.clone(), d))])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_softmax(v: &[f64]) -> Vec<f64> {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::from_vec(&[v.len()], v.to_vec()).unwrap());
        let y = tape.softmax(x, None).unwrap();
        tape.value(y).to_vec()
    }

    #[test]
    fn analytic_softmax_cases() {
        assert_eq!(run_softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let r = run_softmax(&[2f64.ln(), 0.0]);
        assert!((r[0] - 2.0 / 3.0).abs() < 1e-15 && (r[1] - 1.0 / 3.0).abs() < 1e-15);
        let r = run_softmax(&[1000.0, 0.0]);
        assert_eq!(r[0], 1.0);
        assert!(r[1] < 1e-300);
        assert!(r.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn masked_entries_are_exact_zero_and_full_mask_errors() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let ninf = f32::NEG_INFINITY;
        let mask = Tensor::from_vec(&[2, 3], vec![0.0, ninf, 0.0, ninf, 0.0, ninf]).unwrap();
        let y = tape.softmax(x, Some(&mask)).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
        assert_eq!(v[4], 1.0);
        let full = Tensor::from_vec(&[2, 3], vec![0.0, 0.0, 0.0, ninf, ninf, ninf]).unwrap();
        assert!(matches!(tape.softmax(x, Some(&full)), Err(Error::FullyMasked { row: 1 })));
    }

    #[test]
    fn cross_entropy_analytic_cases() {
        let mut tape = Tape::<f64>::inference();
        let logits = tape.constant(Tensor::zeros(&[3, 10]));
        let l = tape.cross_entropy(logits, &[0, 4, 9]).unwrap();
        assert!((tape.value(l).item() - 10f64.ln()).abs() < 1e-12);

        let mut row = vec![0.0; 10];
        row[3] = 40.0;
        let logits = tape.constant(Tensor::from_vec(&[1, 10], row).unwrap());
        let l = tape.cross_entropy(logits, &[3]).unwrap();
        assert!(tape.value(l).item() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::<f32>::inference();
        let logits = tape.constant(Tensor::zeros(&[2, 10]));
        match tape.cross_entropy(logits, &[1, 10]) {
            Err(Error::Input(msg)) => assert!(msg.contains("index 1")),
            other => panic!("expected input error, got {other:?}"),
        }
    }
}
