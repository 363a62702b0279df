//! File formats, benchmarks and the command-line surface for `mame-core`.
//!
//! - [`tokenio`]: the `.mamt` binary token format and the JSON fusion-state
//!   format.
//! - [`bench`](mod@bench): timing sweep of merging against attention.
//! - [`analyze`]: CSV sweep of the analytic cost model.
//! - [`cli`]: argument parsing and subcommand dispatch for the `mame` binary.

pub mod analyze;
pub mod bench;
pub mod cli;
mod error;
pub mod tokenio;

pub use error::{Error, Result};
pub use tokenio::{read_fusion_state, read_tokens, write_fusion_state, write_tokens, DType};
