//! Pseudo-label guided model inversion.
//!
//! The attack runs in two stages. Public images are pseudo-labelled with the
//! target classifier's top-n most confident picks per private class, and a
//! conditional GAN is trained on them with an explicit classification
//! constraint from the target. Then, for a chosen class, latent vectors of
//! the conditional generator are optimized under a max-margin loss so that
//! several augmented views of the generated image are all classified as
//! that class.

pub mod classifier;
pub mod data;
pub mod error;
pub mod eval;
pub mod gan;
pub mod io;
pub mod losses;
pub mod manifest;
pub mod nn;
pub mod pipeline;
pub mod reconstruct;
pub mod select;
#[doc(hidden)]
pub mod testing;

pub use error::{Error, ErrorCategory, Result};
