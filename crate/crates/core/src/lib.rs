#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod effective;
pub mod error;
pub mod io;
pub mod keyquery;
pub mod linalg;
pub mod metrics;
pub mod ode;
pub mod runner;
pub mod transformer;

pub use error::{Error, Result};
