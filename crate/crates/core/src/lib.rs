//! Matrix-based token merging and restoration for transformer token sequences.
//!
//! The crate is `no_std` and only needs `alloc`. It covers the pure algorithmic
//! side of the pipeline:
//!
//! - [`partition`] splits non-special positions into destination and source sets.
//! - [`merge`] builds the fusion matrix, decides which sources are preserved and
//!   produces the reduced sequence.
//! - [`restore`](mod@restore) reconstructs a full-length sequence from a merged one.
//! - [`transformer`] hosts both operators inside deterministic toy blocks.
//! - [`complexity`] is the analytic FLOP model and its efficiency condition.
//!
//! File formats, benchmarks and the command-line tool live in the `mame` crate.
//!
//! ```
//! use mame_core::{gen_synthetic, make_plan, mame, mare, PartitionStyle, Pattern, SimilarityConfig};
//!
//! let x = gen_synthetic(1, 197, 64, 1, 42, Pattern::Clustered { k: 5, noise_scale: 0.05 })?;
//! let plan = make_plan(197, 1, PartitionStyle::Alternating, 0.5, 0)?;
//! let merged = mame(&x, &plan, &SimilarityConfig::with_tau(0.5))?;
//! assert!(merged.reduced_length() < 197);
//! assert_eq!(mare(&merged)?.length(), 197);
//! # Ok::<(), mame_core::Error>(())
//! ```
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod complexity;
mod error;
pub mod merge;
pub mod partition;
pub mod restore;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use merge::{
    mame, mame_with_metric, FusionRule, FusionState, FusionWeight, MergedSequence, OpCounters,
    SimilarityConfig, SimilarityFunction,
};
pub use partition::{make_plan, PartitionPlan, PartitionStyle};
pub use restore::{mare, restore};
pub use rng::SplitMix64;
pub use synth::{gen_synthetic, Pattern};
pub use tensor::{Matrix, TokenMatrix};
