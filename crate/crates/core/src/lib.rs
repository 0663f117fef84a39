//! Single-pass rationale extraction: a small transformer encoder whose layers
//! progressively skim away tokens, leaving a sparse contiguous rationale next
//! to the prediction. A generate-then-predict baseline, a synthetic corpus
//! generator with planted rationales, and the evaluation harness live here too.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod rnp;
pub mod tensor;
pub mod train;
pub mod yofo;

pub use error::{Error, Result};
