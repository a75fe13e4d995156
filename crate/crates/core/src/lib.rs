pub mod distill;
pub mod encoder;
pub mod error;
pub mod fewshot;
pub mod mixture;
pub mod numerics;
pub mod partbank;
pub mod synthdata;

pub use error::{Error, Result};
pub use numerics::{ParamSet, Real, Rng, Tensor};
