//! Core library for coverage-driven frame selection and progressive knowledge
//! transfer on a desk-scale multi-agent toy task.
//!
//! The crate is organised around three pillars:
//!
//! * **Selection** — [`features`] turns frame metadata into normalized 4-D
//!   feature vectors with a weighted ground metric, and [`sampler`] runs the
//!   medoid-initialized farthest-first greedy selector over the resulting
//!   distance matrix.
//! * **Oracles** — [`oracles`] holds exact small-instance references:
//!   brute-force k-center, bottleneck and p-Wasserstein transport via integer
//!   flows, and metric verifiers. These are independent of the selector and
//!   exist to machine-check its guarantees.
//! * **Adaptation** — [`tensor`] is a minimal deterministic rank-4 tensor
//!   engine with reverse-mode gradients, [`adapt`] builds the
//!   compression-injection blocks on top of it, and [`scenegen`] wires both
//!   into a synthetic multi-agent scene task comparing selection strategies.
//!
//! The crate is `no_std`-compatible (requires `alloc`); enable the `libm`
//! feature when building without `std`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("flowsel-core requires either the `std` or the `libm` feature");

pub mod adapt;
pub mod features;
pub mod gradsuite;
pub(crate) mod math;
pub mod oracles;
pub mod rng;
pub mod sampler;
pub mod scenegen;
pub mod tensor;

pub use features::{DistanceMatrix, FeatureVector, FrameRecord, TimestampMode, WeightVector};
pub use sampler::SelectionResult;
