//! Formation-conditioned multi-agent trajectory generation.
//!
//! A play starts from a static formation of offensive players. The model maps
//! that formation, in one forward pass, to a per-frame Gaussian mixture over
//! every player's displacement from their starting spot. One set of mixture
//! weights is shared by all players, so choosing a component picks a whole
//! play concept at once.

pub mod dataio;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
