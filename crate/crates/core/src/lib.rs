//! Differentiable constructive solid geometry with fuzzy-logic booleans.

pub mod autodiff;
pub mod compare;
pub mod document;
pub mod error;
pub mod fuzzy;
pub mod io;
pub mod optimizer;
pub mod primitives;
pub mod prune;
pub mod target;
pub mod tree;

pub use error::{Error, Result};
