//! Multi-stream unpaired image-to-image translation.
//!
//! The crate is organised as a pipeline:
//!
//! * [`data`] procedurally generates urban scenes with exact segmentation maps,
//!   plus a class-conditional day-to-night oracle used as ground truth.
//! * [`maskops`] turns segmentation maps into per-stream masks and masked inputs.
//! * [`models`] holds the forward passes: multi-stream and single-stream
//!   generators, the two-path upscaler, the discriminator trio and the segmenter.
//! * [`losses`] implements the adversarial, cycle, identity, edge and
//!   segmentation terms and their composition.
//! * [`training`] runs the two-phase alternating optimisation with checkpoints.
//! * [`eval`] measures translations against the oracle and runs the
//!   stream-swap and ablation experiments.
//! * [`cli`] wires everything into the `msui2i` binary.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod maskops;
pub mod models;
pub mod training;

pub use error::{Error, Result};

/// Environment variable that forces the deterministic execution mode.
pub const DETERMINISTIC_ENV: &str = "MSUI2I_DETERMINISTIC";

/// Returns true when `MSUI2I_DETERMINISTIC=1` is set.
pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).map(|v| v == "1").unwrap_or(false)
}
