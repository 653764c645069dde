//! Vector measures on truncated q-regular trees, constraint spaces of
//! difference matrices, and the rank-one geometry that separates
//! concentrating measures from spread-out ones.
//!
//! The guide in `book/` walks through the modules with runnable examples.

pub mod atoms;
pub mod builders;
pub mod error;
pub mod experiments;
pub mod fourier;
pub mod rng;
pub mod space;
pub mod tree;

pub use error::{Error, Result};

// Compiles and runs the code in the guide as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/trees.md")]
    mod trees {}
    #[doc = include_str!("../../../book/src/spaces.md")]
    mod spaces {}
    #[doc = include_str!("../../../book/src/atoms.md")]
    mod atoms {}
    #[doc = include_str!("../../../book/src/builders.md")]
    mod builders {}
    #[doc = include_str!("../../../book/src/bv.md")]
    mod bv {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
