//! Few-shot meta-learning engine.
//!
//! The crate is `no_std` (with `alloc`) unless the `std` feature is enabled.
//! It holds the numerical core: a tape-based reverse-mode autodiff over dense
//! tensors, the Conv-4 embedding backbone and relation module, the prototype
//! based few-shot methods, the episodic data protocol and the
//! meta-training/meta-testing loops. File formats, directory loading and the
//! command line live in the `fsl-harness` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod baseline;
pub mod checkpoint;
pub mod data;
mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod meta;
pub mod methods;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod stats;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{BnMode, Graph, Var};
pub use tensor::{Precision, Real, Tensor};
