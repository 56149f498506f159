//! Weakly-supervised 3D lesion localization.
//!
//! The pipeline trains a binary classifier on labeled volumes, then trains
//! a generator adversarially against the frozen classifier to produce
//! per-voxel perturbation masks. Masks are aggregated over superpixels into
//! ranked relevance maps, which are scored against ground-truth lesions by
//! Dice overlap. Every stage is deterministic given its seed, and every
//! artifact (volumes, parameters, logs, reports) has a pinned on-disk
//! format so runs can be reproduced and compared byte for byte.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod objective;
pub mod phantom;
pub mod relevance;
pub mod seeds;
pub mod slic;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{BinaryMask, PerturbationMask, Volume};
