use crate::error::{Error, Result};
use crate::tensor::{gemm, Float, Tensor};

use super::tape::{Tape, Var};

/// `(extent + 2*padding - kernel) / stride + 1`, or `None` when the kernel
/// does not fit.
pub(crate) fn conv_out_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the image itself is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<F: Float>(x: &[F], g: &Geometry, cols: &mut [F]) {
    let p = g.cols();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Float>(cols: &[F], g: &Geometry, dx: &mut [F]) {
    let p = g.cols();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += cols[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<F: Float> Tape<F> {
    /// 2-D cross-correlation, `x: N x C x H x W`, `w: O x C x kh x kw`, no bias.
    ///
    /// Lowered per sample to im2col + GEMM; the column buffer is transient
    /// and rebuilt in the backward pass instead of being saved.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[n, c, h, wd], &[o, c2, kh, kw]) = (sx.as_slice(), sw.as_slice()) else {
            return Err(Error::dim("conv2d", &sx, &sw));
        };
        if c != c2 {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        let (oh, ow) = match (
            conv_out_extent(h, kh, stride, padding),
            conv_out_extent(wd, kw, stride, padding),
        ) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(Error::config(format!(
                    "conv2d on {sx:?} with kernel {kh}x{kw}, stride {stride}, padding {padding} has no valid output"
                )))
            }
        };
        let geo = Geometry {
            c,
            h,
            w: wd,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad: padding,
        };
        let (k, p) = (geo.rows(), geo.cols());
        let (tx, tw) = (self.value(x).clone(), self.value(w).clone());
        let mut out = vec![F::zero(); n * o * p];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![F::zero(); k * p] };
        let in_per = c * h * wd;
        for s in 0..n {
            let xs = &tx.data()[s * in_per..(s + 1) * in_per];
            let colm: &[F] = if geo.is_pointwise() {
                xs
            } else {
                im2col(xs, &geo, &mut cols);
                &cols
            };
            gemm(o, k, p, F::one(), tw.data(), false, colm, false, F::zero(), &mut out[s * o * p..(s + 1) * o * p]);
        }
        drop(cols);
        let out = Tensor::new_unchecked(vec![n, o, oh, ow], out);
        Ok(self.push(out, &[x, w], move |g, needs| {
            let gd = g.data();
            let mut dx = if needs[0] { vec![F::zero(); n * in_per] } else { Vec::new() };
            let mut dw = if needs[1] { vec![F::zero(); o * k] } else { Vec::new() };
            let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![F::zero(); k * p] };
            let mut dcols = if needs[0] && !geo.is_pointwise() {
                vec![F::zero(); k * p]
            } else {
                Vec::new()
            };
            for s in 0..n {
                let gs = &gd[s * o * p..(s + 1) * o * p];
                let xs = &tx.data()[s * in_per..(s + 1) * in_per];
                if needs[1] {
                    let colm: &[F] = if geo.is_pointwise() {
                        xs
                    } else {
                        im2col(xs, &geo, &mut cols);
                        &cols
                    };
                    let beta = if s == 0 { F::zero() } else { F::one() };
                    gemm(o, p, k, F::one(), gs, false, colm, true, beta, &mut dw);
                }
                if needs[0] {
                    let dxs = &mut dx[s * in_per..(s + 1) * in_per];
                    if geo.is_pointwise() {
                        gemm(k, o, p, F::one(), tw.data(), true, gs, false, F::zero(), dxs);
                    } else {
                        gemm(k, o, p, F::one(), tw.data(), true, gs, false, F::zero(), &mut dcols);
                        col2im(&dcols, &geo, dxs);
                    }
                }
            }
            drop(cols);
            drop(dcols);
            let gx = needs[0].then(|| Tensor::new_unchecked(sx.clone(), dx));
            let gw = needs[1].then(|| Tensor::new_unchecked(sw.clone(), dw));
            Ok(vec![gx, gw])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_identity_kernel() {
        let mut tape = Tape::<f64>::inference();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| i as f64 * 0.1 - 3.0).collect();
        let x = tape.constant(Tensor::from_vec(&[2, 3, 4, 5], data.clone()).unwrap());
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = tape.constant(Tensor::from_vec(&[3, 3, 1, 1], eye).unwrap());
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn constant_input_all_ones_kernel() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 2.5));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 22.5));
    }

    #[test]
    fn output_extent_floor_and_errors() {
        assert_eq!(conv_out_extent(32, 3, 2, 1), Some(16));
        assert_eq!(conv_out_extent(7, 3, 2, 0), Some(3));
        assert_eq!(conv_out_extent(2, 5, 1, 1), None);
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(tape.conv2d(x, w, 1, 1), Err(Error::Config(_))));
    }
}
