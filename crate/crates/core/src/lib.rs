// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod garfa;
pub mod harness;
pub mod lslora;
pub mod model;
pub mod numcore;
pub mod probes;
pub mod trainer;

pub use error::{GlabError, Result};
