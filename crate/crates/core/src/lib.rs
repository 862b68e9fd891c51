//! Mixtures of residual adapters with expert-choice token routing, inserted
//! into a frozen toy transformer TTS backbone.
//!
//! The crate is `no_std` (with `alloc`) and holds every numeric piece of the
//! system: a small reverse-mode autodiff engine ([`numerics`]), the adapter
//! mixture ([`adapters`]), the backbone ([`model`]), the synthetic corpus
//! ([`data`]), optimization ([`training`]) and the objective metrics
//! ([`evaluation`]). File formats and the command line live in the
//! `adaptermix` companion crate.
//!
//! All floating point math that is not plain IEEE arithmetic goes through
//! `libm`, so results are bit-reproducible across platforms.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adapters;
pub mod data;
mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod params;
pub mod rng;
pub mod training;

#[cfg(all(test, not(feature = "std")))]
extern crate std;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
pub use params::{Grads, ParamId, ParamStore, Session};
