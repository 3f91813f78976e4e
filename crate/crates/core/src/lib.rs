#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod domains;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod models;
pub mod moments;
pub mod numerics;
pub mod samplers;
pub mod stein;
pub mod vector_fields;
pub mod wasserstein;

pub use error::{Error, Result};
