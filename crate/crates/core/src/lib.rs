//! Language-conditioned reshaping of 2-D robot trajectories.
//!
//! The crate covers the whole pipeline: workspace geometry, an A* planner
//! for initial trajectories, a CHOMP-style optimizer that produces
//! ground-truth reshaped trajectories from semantic commands, the command
//! language, a small reverse-mode autodiff engine, the multi-modal
//! transformer and its baselines, dataset generation, and training and
//! evaluation.

pub mod autodiff;
pub mod checkpoint;
pub mod chomp;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geom;
pub mod gradsuite;
pub mod language;
pub mod model;
pub mod planner;
pub mod train;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic, platform-independent RNG used everywhere a seed is taken.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
