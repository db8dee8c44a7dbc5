//! Region-aligned vision-language training and location-conditioned retrieval
//! over a synthetic lesion corpus.

pub mod caa;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod grounding;
pub mod explain;
pub mod losses;
pub mod mining;
pub mod params;
pub mod retrieval;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
