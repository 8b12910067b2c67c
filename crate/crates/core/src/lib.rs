//! Explains classifier predictions through latent concepts.
//!
//! Training-time token representations are clustered into concepts, the
//! salient inputs of a test prediction are found with integrated gradients,
//! mapped onto those concepts, and rendered into a prompt for a
//! chat-completion model.

pub mod attribution;
pub mod concept_discoverer;
pub mod concept_mapper;
pub mod error;
pub mod evaluation;
mod model_file;
pub mod pipeline;
pub mod plausifyer;
pub mod repr_store;
pub mod scorer;
pub mod synthetic;

pub use error::{LacoatError, Result};
