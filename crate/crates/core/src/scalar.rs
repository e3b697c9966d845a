//! Storage scalar abstraction.
//!
//! Embeddings and centroids are stored as `T: Scalar` (`f32` on disk, `f64`
//! where the extra headroom matters). Every reduction in this crate widens to
//! `f64` before accumulating, so scores and gradients are computed at the same
//! precision regardless of the storage type.

use std::fmt::{Debug, Display};

use num_traits::Float;

pub trait Scalar: Float + Debug + Display + Default + Send + Sync + 'static {
    /// Lossless widening to the accumulation type.
    fn widen(self) -> f64;

    /// Rounds an accumulated value back into storage.
    fn narrow(value: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }

    #[inline]
    fn narrow(value: f64) -> Self {
        value as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn widen(self) -> f64 {
        self
    }

    #[inline]
    fn narrow(value: f64) -> Self {
        value
    }
}

/// Inner product accumulated in `f64`.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.widen() * y.widen()).sum()
}

/// Squared Euclidean distance accumulated in `f64`.
#[inline]
pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.widen() - y.widen();
            d * d
        })
        .sum()
}
