//! Dense tensors, a dynamic reverse-mode tape, parameter containers and the
//! deterministic random source everything else is built on.
//!
//! All math is generic over [`Real`] so the same model code runs in `f32`
//! for training and in `f64` when gradients are checked numerically.

mod checkpoint;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, read_tensor_file, write_checkpoint, write_tensor_file};
pub use optim::{cosine_schedule, AdamW, AdamWConfig};
pub use params::{Bound, Param, ParamSet};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul_naive, Tensor};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating point element type of tensors.
pub trait Real:
    num_traits::Float
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}
