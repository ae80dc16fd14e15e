//! Minimal differentiable computation core.
//!
//! Values live on a [`Tape`] as small dense vectors or matrices. The forward
//! pass records one node per primitive; [`Tape::backward`] sweeps the nodes in
//! reverse creation order and accumulates exact gradients. Parameters are held
//! in a [`ParamStore`] and bound to tape leaves with [`Tape::param`].
//!
//! All arithmetic is generic over [`Scalar`] so the same code trains in `f32`
//! and runs its gradient checks in `f64`.

mod gradcheck;
pub mod kernels;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{finite_diff_check, finite_diff_check_adjusted, relative_error, FdReport};
pub use matrix::Matrix;
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tape::{Gradients, GruNodes, NodeId, Tape};

use num_traits::{Float, FromPrimitive};
use std::fmt::{Debug, Display};

/// Floating point type the tape can run on.
pub trait Scalar:
    Float + FromPrimitive + Debug + Display + Default + Send + Sync + std::iter::Sum + 'static
{
    /// Lossless-or-rounded conversion from `f64`.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Smallest argument passed to a logarithm; anything below is clamped and
/// counted as a saturation.
pub const LOG_CLAMP: f64 = 1e-30;

/// Vanilla SGD: `p <- p - lr * grad(p)` for every entry, then zero the
/// gradients.
pub fn sgd_apply<T: Scalar>(params: &mut ParamStore<T>, lr: T) {
    for entry in params.entries_mut() {
        for (p, g) in entry.value.iter_mut().zip(entry.grad.iter_mut()) {
            *p = *p - lr * *g;
            *g = T::zero();
        }
    }
}
