#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fslstm;
pub mod matrix;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod trn;
pub mod video;

pub use error::{Error, Result};
pub use matrix::Matrix;
