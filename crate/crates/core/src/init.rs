//! Seeded parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal, Uniform};

use crate::autograd::Param;
use crate::tensor::{numel, Float, Tensor};

/// Transformer linear / embedding standard deviation.
pub const TRANSFORMER_STD: f64 = 0.02;

/// One RNG stream consumed in parameter declaration order, so a seed fully
/// determines a model.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn normal<F: Float>(&mut self, name: impl Into<String>, shape: &[usize], std: f64) -> Param<F> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..numel(shape)).map(|_| F::of(self.rng.sample(dist))).collect();
        Param::new(name, Tensor::new_unchecked(shape.to_vec(), data))
    }

    /// He-normal for a conv weight `O x C x kh x kw`, fan-out mode.
    pub fn kaiming_conv<F: Float>(&mut self, name: impl Into<String>, shape: &[usize]) -> Param<F> {
        let fan_out = shape[0] * shape[2..].iter().product::<usize>();
        self.normal(name, shape, (2.0 / fan_out as f64).sqrt())
    }

    pub fn uniform<F: Float>(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> Param<F> {
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let data = (0..numel(shape)).map(|_| F::of(self.rng.sample(dist))).collect();
        Param::new(name, Tensor::new_unchecked(shape.to_vec(), data))
    }

    pub fn standard_normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.sample(StandardNormal)).collect()
    }
}

pub fn zeros<F: Float>(name: impl Into<String>, shape: &[usize]) -> Param<F> {
    Param::new(name, Tensor::zeros(shape))
}

pub fn ones<F: Float>(name: impl Into<String>, shape: &[usize]) -> Param<F> {
    Param::new(name, Tensor::ones(shape))
}
