//! Speech-guided 3D visual grounding on synthetic rooms.
//!
//! A grounder scores candidate boxes against both a (possibly mis-transcribed)
//! text description and the speech it came from, fuses the two score vectors,
//! and aligns speech, text and object features contrastively.

pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evalmetrics;
pub mod grounding;
pub mod losses;
pub mod nn;
pub mod phonetics;
pub mod scenegen;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use config::TrainConfig;
pub use error::{Error, Result};
