//! Cycle-consistent image completion and extrapolation.
//!
//! Two generators — a completion network that fills a masked interior and an
//! extrapolation network that paints outward from an interior — are trained
//! jointly against one global discriminator. Each training step closes both
//! cycles (complete-then-extrapolate and extrapolate-then-complete) and
//! optimizes adversarial, contextual (masked L1) and cycle-reconstruction
//! losses on a shared square mask. Inference composites known pixels back
//! over the network output, and evaluation scores PSNR in both directions.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod masking;
pub mod networks;
pub mod params;
pub mod rng;
pub mod training;

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, tensor_names, Checkpoint};

pub use error::{Error, Result};
