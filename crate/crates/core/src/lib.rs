// `!(x > t)` is deliberate throughout: NaN must fail every threshold check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod experiments;
pub mod imp;
pub mod lmmse;
pub mod scm;
pub mod search;
pub mod sets;
pub mod stats;
pub mod voting;

pub use error::{Error, Result};
pub use sets::FeatureSet;
